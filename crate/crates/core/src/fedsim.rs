//! Federated rounds with codec transport.
//!
//! Every round the server samples clients. Each selected client then:
//!
//! 1. trains the adapter from its fixed initialisation `(A₀, B₀ = 0)` on
//!    weights `W_base + D` as last received;
//! 2. forms its increment `(ΔA, ΔB)`;
//! 3. optionally clips each factor tensor and adds Gaussian noise;
//! 4. packs the increment into a canvas, encodes it, and serializes the
//!    latent as f32 bytes.
//!
//! The server decodes and unpacks every payload and rebuilds
//! `Ãᵢ = A₀ + ΔÃᵢ`, `B̃ᵢ = ΔB̃ᵢ`. It sums (or averages) them and applies
//! `D += η B̃ Ã`.
//!
//! On the plain downlink, clients receive `D` as f32. On the encoded
//! downlink, they receive the aggregated latent, decode it themselves, and
//! apply the same update rule.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::capture::SnapshotStore;
use crate::codec::Codec;
use crate::data::{self, Dataset, TaskData, TaskSpec};
use crate::error::{Error, Result};
use crate::lora::{self, LocalOpts, LoraFactors, ModelConfig, TargetModel, WeightDelta};
use crate::metrics;
use crate::privacy::{self, PrivacySpec, Sensitivity};
use crate::report;
use crate::seed::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downlink {
    Plain,
    Encoded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub clients: usize,
    /// Per-round client sampling probability.
    pub fraction: f64,
    pub rounds: usize,
    pub local: LocalOpts,
    /// Global step on the summed (or averaged) client product. The toy
    /// model diverges with sum aggregation at 1.0.
    pub eta: f64,
    pub aggregation: Aggregation,
    pub downlink: Downlink,
    pub privacy: Option<PrivacySpec>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            fraction: 1.0,
            rounds: 20,
            local: LocalOpts::default(),
            eta: 0.01,
            aggregation: Aggregation::Sum,
            downlink: Downlink::Plain,
            privacy: None,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return bad("fed: clients must be positive".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fed: fraction {} not in (0, 1]", self.fraction));
        }
        if self.rounds == 0 {
            return bad("fed: rounds must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("fed: eta must be positive, got {}", self.eta));
        }
        if self.local.batch == 0 || !(self.local.lr > 0.0) {
            return bad("fed: local batch and lr must be positive".into());
        }
        if let Some(p) = &self.privacy {
            p.validate()?;
        }
        Ok(())
    }
}

/// Model, task data and client shards shared by every run of one seed.
#[derive(Clone, Debug)]
pub struct Setup {
    pub seed: u64,
    pub model: TargetModel,
    pub init: LoraFactors,
    pub data: TaskData,
    /// Client shards of the fine-tuning data (D₂).
    pub finetune_shards: Vec<Dataset>,
    /// Client shards of the capture data (D₁).
    pub capture_shards: Vec<Dataset>,
}

impl Setup {
    pub fn new(model: &ModelConfig, task: &TaskSpec, clients: usize, seed: u64) -> Result<Self> {
        let (m, init) = lora::init_model(model, seed)?;
        if task.n_classes != model.n_classes {
            return Err(Error::Config(format!(
                "task has {} classes but the model head has {}",
                task.n_classes, model.n_classes
            )));
        }
        let data = data::synthetic_task(task, model.d, seed)?;
        let shard = |ds: &Dataset, tag: u64| -> Result<Vec<Dataset>> {
            let parts = data::partition_dirichlet(
                &ds.y,
                ds.n_classes,
                clients,
                task.dirichlet_alpha,
                seed::derive(seed, &[tag]),
            )?;
            Ok(parts.iter().map(|idx| ds.subset(idx)).collect())
        };
        let finetune_shards = shard(&data.finetune, 2)?;
        let capture_shards = shard(&data.capture, 1)?;
        Ok(Self { seed, model: m, init, data, finetune_shards, capture_shards })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Capture,
    Finetune,
}

/// Server-side global state.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    /// Authoritative dense update accumulated so far.
    pub delta: WeightDelta,
    pub round: usize,
}

impl ServerState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { delta: WeightDelta::zeros(cfg), round: 0 }
    }
}

/// Weights the clients train on: what they reconstructed from the
/// downlink. The plain downlink carries f32; the encoded one is decoded
/// locally, so clients hold the same values as the server.
pub fn client_view(state: &ServerState, mode: Downlink) -> WeightDelta {
    match mode {
        Downlink::Plain => state.delta.round_f32(),
        Downlink::Encoded => state.delta.clone(),
    }
}

pub fn to_wire(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn from_wire(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Truncated(format!("payload of {} bytes for {n} elements", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Selected client ids, `;`-separated.
    pub selected: String,
    pub n_selected: usize,
    /// Serialized uplink payload size per client, `;`-separated.
    pub client_uplink_bytes: String,
    pub uplink_bytes: u64,
    /// Uplink size had the canvases been sent without encoding.
    pub uplink_bytes_uncompressed: u64,
    pub downlink_bytes: u64,
    /// Per-client `mse(canvas, decode(encode(canvas)))`, `;`-separated.
    pub client_recon_mse: String,
    pub recon_mse: f64,
    pub recon_snr: f64,
    pub update_norm: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Largest factor norm before noise; NaN without privacy.
    pub max_clipped_norm: f64,
    pub sigma: f64,
    pub noise_std: f64,
    pub mu: f64,
    pub delta_spent: f64,
    /// `‖decode(ΣF) − Σ decode(Fᵢ)‖₂` on the encoded downlink; NaN otherwise.
    pub downlink_gap: f64,
    pub codec_family: String,
    pub codec_trained: bool,
}

struct ClientOut {
    id: usize,
    canvas: Tensor,
    wire: Vec<u8>,
    max_norm: f64,
}

pub struct RunContext<'a> {
    pub setup: &'a Setup,
    pub cfg: &'a FedConfig,
    pub codec: &'a Codec,
    pub phase: Phase,
    sigma: Option<f64>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> RunContext<'a> {
    pub fn new(setup: &'a Setup, cfg: &'a FedConfig, codec: &'a Codec, phase: Phase, threads: usize) -> Result<Self> {
        cfg.validate()?;
        let mcfg = setup.model.config;
        let spec = codec.spec();
        if [spec.rows, spec.cols] != mcfg.canvas_shape() {
            return Err(Error::Shape(format!(
                "codec expects {}x{} canvases, model packs {:?}",
                spec.rows,
                spec.cols,
                mcfg.canvas_shape()
            )));
        }
        if setup.finetune_shards.len() != cfg.clients || setup.capture_shards.len() != cfg.clients {
            return Err(Error::Config("setup was partitioned for a different client count".into()));
        }
        let sigma = match &cfg.privacy {
            Some(p) => Some(p.resolve_sigma(cfg.fraction, cfg.rounds as u64)?),
            None => None,
        };
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { setup, cfg, codec, phase, sigma, pool })
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    fn shards(&self) -> &[Dataset] {
        match self.phase {
            Phase::Capture => &self.setup.capture_shards,
            Phase::Finetune => &self.setup.finetune_shards,
        }
    }

    fn train_set(&self) -> &Dataset {
        match self.phase {
            Phase::Capture => &self.setup.data.capture,
            Phase::Finetune => &self.setup.data.finetune,
        }
    }

    fn client(&self, id: usize, round: usize, view: &WeightDelta, k: usize) -> Result<ClientOut> {
        let setup = self.setup;
        let mcfg = setup.model.config;
        let mut rng = seed::rng(setup.seed, &[stream::LOCAL, round as u64, id as u64]);
        let mut upd =
            lora::local_train(&setup.model, view, &setup.init, &self.shards()[id], &self.cfg.local, &mut rng)?;
        let mut max_norm = f64::NAN;
        if let (Some(p), Some(sigma)) = (&self.cfg.privacy, self.sigma) {
            let std = match p.sensitivity {
                Sensitivity::Lemma => sigma * privacy::sensitivity(p.clip, k)?,
                Sensitivity::Clip => sigma * p.clip,
            };
            let mut nrng = seed::rng(setup.seed, &[stream::NOISE, round as u64, id as u64]);
            max_norm = 0.0;
            for t in upd.tensors_mut() {
                let c = privacy::clip(t, p.clip);
                max_norm = f64::max(max_norm, c.norm_l2());
                *t = privacy::noise(&c, std, &mut nrng);
            }
        }
        let canvas = lora::pack(&upd, &mcfg)?.round_f32();
        let feature = self.codec.encode(&canvas)?;
        Ok(ClientOut { id, canvas, wire: to_wire(&feature.latent), max_norm })
    }

    fn noise_std(&self, k: usize) -> f64 {
        match (&self.cfg.privacy, self.sigma) {
            (Some(p), Some(s)) => match p.sensitivity {
                Sensitivity::Lemma => s * p.clip / k as f64,
                Sensitivity::Clip => s * p.clip,
            },
            _ => 0.0,
        }
    }

    /// Rebuilds `(Ã, B̃)` from an aggregated increment covering `k` clients.
    fn rebuild(&self, inc: &LoraFactors, k: usize) -> Result<LoraFactors> {
        let a0 = match self.cfg.aggregation {
            Aggregation::Sum => self.setup.init.scale(k as f64),
            Aggregation::Mean => self.setup.init.clone(),
        };
        let mut out = inc.clone();
        for (a, base) in out.a.iter_mut().zip(&a0.a) {
            a.axpy(1.0, base)?;
        }
        Ok(out)
    }

    /// Runs one round, returning its report and the canvases the selected
    /// clients sent (before encoding).
    pub fn run_round(&self, state: &mut ServerState) -> Result<(RoundReport, Vec<(usize, Tensor)>)> {
        let setup = self.setup;
        let mcfg = setup.model.config;
        let round = state.round;
        let selected = data::sample_clients(self.cfg.clients, self.cfg.fraction, setup.seed, round as u64);
        let k = selected.len();
        let view = client_view(state, self.cfg.downlink);

        let outs: Vec<ClientOut> = match &self.pool {
            Some(pool) => pool.install(|| {
                selected.par_iter().map(|&id| self.client(id, round, &view, k)).collect::<Result<Vec<_>>>()
            })?,
            None => selected.iter().map(|&id| self.client(id, round, &view, k)).collect::<Result<Vec<_>>>()?,
        };

        // Server: decode every payload in ascending client order.
        let latent_shape = self.codec.spec().latent_shape()?;
        let latents: Vec<Tensor> = outs.iter().map(|o| from_wire(&o.wire, &latent_shape)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = latents.iter().collect();
        let decoded = self.codec.decode_batch(&refs)?;
        let mut recon = Vec::with_capacity(k);
        let mut recon_snr = 0.0;
        for (o, d) in outs.iter().zip(&decoded) {
            let r = metrics::snr(&o.canvas, d)?;
            recon.push(r.mse);
            recon_snr += r.snr;
        }
        let incs: Vec<LoraFactors> = decoded.iter().map(|c| lora::unpack(c, &mcfg)).collect::<Result<_>>()?;
        let mean_mode = self.cfg.aggregation == Aggregation::Mean;

        let before = state.delta.clone();
        let (downlink_bytes, gap) = match self.cfg.downlink {
            Downlink::Plain => {
                let mut inc = lora::aggregate(&incs)?;
                if mean_mode {
                    inc = inc.scale(1.0 / k as f64);
                }
                let agg = self.rebuild(&inc, k)?;
                lora::apply_global_update(&mut state.delta, &agg, self.cfg.eta)?;
                (4 * state.delta.numel() as u64, f64::NAN)
            }
            Downlink::Encoded => {
                let mut sum = Tensor::zeros(&latent_shape);
                for z in &latents {
                    sum.axpy(1.0, z)?;
                }
                if mean_mode {
                    sum = sum.scale(1.0 / k as f64);
                }
                let wire = to_wire(&sum);
                let shipped = from_wire(&wire, &latent_shape)?;
                let canvas = self.codec.decode_batch(&[&shipped])?.pop().expect("one canvas");
                let mut direct = Tensor::zeros(&mcfg.canvas_shape());
                for d in &decoded {
                    direct.axpy(if mean_mode { 1.0 / k as f64 } else { 1.0 }, d)?;
                }
                let gap = canvas.sub(&direct)?.norm_l2();
                let agg = self.rebuild(&lora::unpack(&canvas, &mcfg)?, k)?;
                lora::apply_global_update(&mut state.delta, &agg, self.cfg.eta)?;
                (wire.len() as u64, gap)
            }
        };
        for t in &state.delta.d {
            t.ensure_finite("global update")?;
        }
        let mut update_sq = 0.0;
        for (a, b) in state.delta.d.iter().zip(&before.d) {
            update_sq += a.sub(b)?.sum_sq();
        }
        state.round += 1;

        let train = self.train_set();
        let test = &setup.data.test;
        let (sigma, mu, delta_spent) = match (&self.cfg.privacy, self.sigma) {
            (Some(p), Some(s)) => {
                let sp = privacy::spend(p.epsilon, self.cfg.fraction, state.round as u64, s)?;
                (s, sp.mu, sp.delta)
            }
            _ => (0.0, 0.0, 0.0),
        };
        let canvas_bytes = 4 * (mcfg.canvas_rows() * mcfg.d) as u64;
        let join = |v: Vec<String>| v.join(";");
        let report = RoundReport {
            round: state.round,
            selected: join(selected.iter().map(|s| s.to_string()).collect()),
            n_selected: k,
            client_uplink_bytes: join(outs.iter().map(|o| o.wire.len().to_string()).collect()),
            uplink_bytes: outs.iter().map(|o| o.wire.len() as u64).sum(),
            uplink_bytes_uncompressed: canvas_bytes * k as u64,
            downlink_bytes,
            client_recon_mse: join(recon.iter().map(|m| format!("{m:e}")).collect()),
            recon_mse: recon.iter().sum::<f64>() / k as f64,
            recon_snr: recon_snr / k as f64,
            update_norm: update_sq.sqrt(),
            train_loss: setup.model.loss(&state.delta, train)?,
            train_acc: setup.model.accuracy(&state.delta, train)?,
            test_loss: setup.model.loss(&state.delta, test)?,
            test_acc: setup.model.accuracy(&state.delta, test)?,
            max_clipped_norm: outs.iter().map(|o| o.max_norm).fold(f64::NAN, f64::max),
            sigma,
            noise_std: self.noise_std(k),
            mu,
            delta_spent,
            downlink_gap: gap,
            codec_family: self.codec.spec().family.name().to_string(),
            codec_trained: self.codec.is_trained(),
        };
        let canvases = outs.into_iter().map(|o| (o.id, o.canvas)).collect();
        Ok((report, canvases))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub state: ServerState,
}

/// All configured rounds on the fine-tuning data.
pub fn run_experiment(setup: &Setup, cfg: &FedConfig, codec: &Codec, threads: usize) -> Result<RunOutput> {
    let ctx = RunContext::new(setup, cfg, codec, Phase::Finetune, threads)?;
    let mut state = ServerState::new(&setup.model.config);
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        reports.push(ctx.run_round(&mut state)?.0);
    }
    Ok(RunOutput { reports, state })
}

/// Uncompressed, noise-free run on the capture data recording every
/// selected client's canvas each round.
pub fn capture_run(setup: &Setup, cfg: &FedConfig, threads: usize) -> Result<SnapshotStore> {
    let mut cfg = cfg.clone();
    cfg.privacy = None;
    cfg.downlink = Downlink::Plain;
    let shape = setup.model.config.canvas_shape();
    let identity = Codec::build(&crate::codec::CodecSpec::identity(shape[0], shape[1]), 0)?;
    let ctx = RunContext::new(setup, &cfg, &identity, Phase::Capture, threads)?;
    let mut state = ServerState::new(&setup.model.config);
    let mut store = SnapshotStore::new(shape[0], shape[1]);
    for r in 0..cfg.rounds {
        let (_, canvases) = ctx.run_round(&mut state)?;
        for (id, c) in canvases {
            store.push(id as u32, r as u32, &c)?;
        }
    }
    Ok(store)
}

pub fn write_transcript(path: &Path, reports: &[RoundReport]) -> Result<()> {
    report::write_csv(path, reports)
}

pub fn read_transcript(path: &Path) -> Result<Vec<RoundReport>> {
    let mut r = csv::Reader::from_path(path).map_err(report::csv_err)?;
    r.deserialize().map(|row| row.map_err(report::csv_err)).collect()
}

/// Final global model: base weights, head, adapter initialisation and the
/// accumulated update.
pub fn model_bundle(setup: &Setup, state: &ServerState) -> Bundle {
    let m = &setup.model;
    let mut tensors = Vec::new();
    for s in 0..m.config.n_slots() {
        let (l, p) = (s / lora::N_PROJ, lora::PROJ_NAMES[s % lora::N_PROJ]);
        tensors.push((format!("layer{l}.{p}.base"), m.base(s).clone()));
        tensors.push((format!("layer{l}.{p}.delta"), state.delta.d[s].clone()));
        tensors.push((format!("layer{l}.{p}.lora_a0"), setup.init.a[s].clone()));
    }
    tensors.push(("head".into(), m.head().clone()));
    Bundle {
        descriptor: serde_json::json!({
            "kind": "model",
            "model": m.config,
            "seed": setup.seed,
            "rounds": state.round,
        }),
        tensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecSpec;

    fn small() -> (ModelConfig, TaskSpec) {
        let m = ModelConfig { d: 8, layers: 1, rank: 2, n_classes: 3 };
        let t = TaskSpec { n_samples: 600, n_test: 200, n_classes: 3, ..TaskSpec::default() };
        (m, t)
    }

    fn identity(m: &ModelConfig) -> Codec {
        let [r, c] = m.canvas_shape();
        Codec::build(&CodecSpec::identity(r, c), 0).unwrap()
    }

    #[test]
    fn one_report_per_round_and_parallel_matches_serial() {
        let (m, t) = small();
        let setup = Setup::new(&m, &t, 4, 11).unwrap();
        let cfg = FedConfig { clients: 4, fraction: 0.5, rounds: 3, ..FedConfig::default() };
        let codec = identity(&m);
        let a = run_experiment(&setup, &cfg, &codec, 1).unwrap();
        let b = run_experiment(&setup, &cfg, &codec, 3).unwrap();
        assert_eq!(a.reports.len(), 3);
        assert_eq!(a.state, b.state);
        let (ra, rb) = (format!("{:?}", a.reports), format!("{:?}", b.reports));
        assert_eq!(ra, rb);
        for r in &a.reports {
            assert!(r.n_selected >= 1);
            assert_eq!(r.uplink_bytes, r.uplink_bytes_uncompressed);
            assert_eq!(r.recon_mse, 0.0);
        }
    }

    #[test]
    fn encoded_identity_downlink_tracks_plain() {
        let (m, t) = small();
        let setup = Setup::new(&m, &t, 3, 5).unwrap();
        let codec = identity(&m);
        let plain = FedConfig { clients: 3, rounds: 3, ..FedConfig::default() };
        let enc = FedConfig { downlink: Downlink::Encoded, ..plain.clone() };
        let a = run_experiment(&setup, &plain, &codec, 1).unwrap();
        let b = run_experiment(&setup, &enc, &codec, 1).unwrap();
        let scale = a.state.delta.norm_l2();
        let mut diff = 0.0;
        for (x, y) in a.state.delta.d.iter().zip(&b.state.delta.d) {
            diff += x.sub(y).unwrap().sum_sq();
        }
        assert!(diff.sqrt() <= 1e-5 * scale, "{} vs {}", diff.sqrt(), scale);
        let latent = codec.spec().latent_shape().unwrap().iter().product::<usize>() as u64;
        for r in &b.reports {
            assert_eq!(r.downlink_bytes, 4 * latent);
            assert!(r.downlink_gap < 1e-5 * scale);
        }
    }

    #[test]
    fn clipping_bounds_every_factor_before_noise() {
        let (m, t) = small();
        let setup = Setup::new(&m, &t, 3, 2).unwrap();
        let privacy = PrivacySpec { clip: 1e-3, sigma: Some(0.5), ..PrivacySpec::default() };
        let cfg = FedConfig { clients: 3, rounds: 2, privacy: Some(privacy), ..FedConfig::default() };
        let out = run_experiment(&setup, &cfg, &identity(&m), 1).unwrap();
        for r in &out.reports {
            assert!(r.max_clipped_norm <= 1e-3 * (1.0 + 1e-12));
            let sp = privacy::spend(0.25, 1.0, r.round as u64, 0.5).unwrap();
            assert_eq!((r.mu, r.delta_spent), (sp.mu, sp.delta));
        }
    }

    #[test]
    fn capture_records_every_selected_client() {
        let (m, t) = small();
        let setup = Setup::new(&m, &t, 3, 8).unwrap();
        let cfg = FedConfig { clients: 3, rounds: 2, ..FedConfig::default() };
        let store = capture_run(&setup, &cfg, 1).unwrap();
        assert_eq!(store.len(), 6);
        assert!(store.canvases().iter().all(|c| c.norm_l2() > 0.0));
    }

    #[test]
    fn codec_shape_mismatch_is_rejected() {
        let (m, t) = small();
        let setup = Setup::new(&m, &t, 2, 1).unwrap();
        let cfg = FedConfig { clients: 2, rounds: 1, ..FedConfig::default() };
        let wrong = Codec::build(&CodecSpec::identity(4, 4), 0).unwrap();
        assert!(matches!(run_experiment(&setup, &cfg, &wrong, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn transcript_round_trips_through_csv() {
        let (m, t) = small();
        let setup = Setup::new(&m, &t, 2, 4).unwrap();
        let cfg = FedConfig { clients: 2, rounds: 2, ..FedConfig::default() };
        let out = run_experiment(&setup, &cfg, &identity(&m), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_transcript(&p, &out.reports).unwrap();
        let back = read_transcript(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].selected, out.reports[1].selected);
        assert_eq!(back[1].test_acc, out.reports[1].test_acc);
        assert!(back[1].downlink_gap.is_nan());
    }
}
