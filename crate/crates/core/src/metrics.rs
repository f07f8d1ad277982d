//! Reconstruction quality measures.
//!
//! The headline SNR divides the *summed* signal power `Σx²` by the *mean*
//! squared error. Variants using a consistent convention are exposed
//! alongside under explicit names.

use serde::Serialize;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::privacy;
use crate::seed::{self, stream};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SnrReport {
    /// `Σ x²`
    pub power: f64,
    /// `mean (x − x̃)²`
    pub mse: f64,
    /// `power / mse`, `+∞` when `mse == 0`.
    pub snr: f64,
}

pub fn snr_from(power: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        power / mse
    }
}

pub fn snr(reference: &Tensor, reconstructed: &Tensor) -> Result<SnrReport> {
    let mse = tensor::mse(reference, reconstructed)?;
    let power = reference.sum_sq();
    Ok(SnrReport { power, mse, snr: snr_from(power, mse) })
}

/// `mean x² / mean (x − x̃)²`, dimensionless per element.
pub fn snr_mean_convention(reference: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    let mse = tensor::mse(reference, reconstructed)?;
    Ok(snr_from(reference.sum_sq() / reference.numel() as f64, mse))
}

/// `Σ x² / Σ (x − x̃)²`; equals the mean-convention value.
pub fn snr_sum_convention(reference: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    let err = reference.sub(reconstructed)?.sum_sq();
    Ok(snr_from(reference.sum_sq(), err))
}

pub fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

/// Per-canvas power the reference noise levels are quoted against.
pub const REFERENCE_POWER: f64 = 14.29;

/// Reference noise levels, one per decade.
pub const REFERENCE_SIGMAS: [f64; 7] = [5e-7, 5e-6, 5e-5, 5e-4, 5e-3, 5e-2, 5e-1];

/// Rescales `REFERENCE_SIGMAS` so each level keeps its `P / σ²` ratio for
/// canvases of per-canvas power `power`.
pub fn matched_sigmas(power: f64) -> Vec<f64> {
    let k = (power / REFERENCE_POWER).sqrt();
    REFERENCE_SIGMAS.iter().map(|s| s * k).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChannelRow {
    pub sigma: f64,
    pub identity_mse: f64,
    pub identity_snr: f64,
    pub codec_mse: f64,
    pub codec_snr: f64,
}

/// Passes every canvas through the identity channel `x + n` and the codec
/// channel `decode(encode(x + n))` with the same noise draw, for each
/// noise standard deviation in `sigmas`. MSEs are averaged over canvases
/// and SNR is mean power over mean MSE.
pub fn noisy_channel_eval(codec: &Codec, canvases: &[Tensor], sigmas: &[f64], seed: u64) -> Result<Vec<ChannelRow>> {
    if canvases.is_empty() {
        return Err(Error::InvalidArgument("noisy channel evaluation needs canvases".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("noise level {s} must be >= 0")));
    }
    let n = canvases.len() as f64;
    let power = canvases.iter().map(Tensor::sum_sq).sum::<f64>() / n;
    let mut rows = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let noisy: Vec<Tensor> = canvases
            .iter()
            .enumerate()
            .map(|(ci, x)| privacy::noise(x, sigma, &mut seed::rng(seed, &[stream::CHANNEL, si as u64, ci as u64])))
            .collect();
        let mut id_mse = 0.0;
        for (x, y) in canvases.iter().zip(&noisy) {
            id_mse += tensor::mse(x, y)?;
        }
        let mut codec_mse = 0.0;
        for (xs, ys) in canvases.chunks(16).zip(noisy.chunks(16)) {
            let refs: Vec<&Tensor> = ys.iter().collect();
            for (x, r) in xs.iter().zip(codec.reconstruct(&refs)?) {
                codec_mse += tensor::mse(x, &r)?;
            }
        }
        let (id_mse, codec_mse) = (id_mse / n, codec_mse / n);
        rows.push(ChannelRow {
            sigma,
            identity_mse: id_mse,
            identity_snr: snr_from(power, id_mse),
            codec_mse,
            codec_snr: snr_from(power, codec_mse),
        });
    }
    Ok(rows)
}
