//! Autoencoder codecs for update canvases.
//!
//! Families:
//!
//! * `identity`: the canvas is its own latent.
//! * `resnet2d`: the canvas is one `[1, rows, cols]` image. Encoder: 3×3
//!   stem conv, one stride-2 3×3 conv per stage, then residual blocks
//!   `x + conv(relu(conv(x)))`. Decoder: residual blocks, one stride-2
//!   transposed conv per stage down to a single channel, and a 7×7 conv.
//! * `cnn1d`: every canvas row is a `[1, cols]` signal. Encoder: one
//!   stride-2 conv per stage and a 1-wide conv to `latent_channels`.
//!   Decoder: one stride-2 transposed conv per stage and a 1-wide conv
//!   back to one channel.
//!
//! ReLU follows each conv except those producing the latent, a single
//! channel, or the final output. Canvases are divided by a fixed scale
//! (the RMS of the training set) before encoding and multiplied back after
//! decoding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::Bundle;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::AdamState;
use crate::seed::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Identity,
    Cnn1d,
    Resnet2d,
    Uformer,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Identity => "identity",
            Family::Cnn1d => "cnn1d",
            Family::Resnet2d => "resnet2d",
            Family::Uformer => "uformer",
        }
    }
}

fn default_res_blocks() -> usize {
    3
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub family: Family,
    /// Canvas shape; zero means "take it from the model".
    #[serde(default)]
    pub rows: usize,
    #[serde(default)]
    pub cols: usize,
    /// Output channels of each stride-2 stage.
    #[serde(default)]
    pub channels: Vec<usize>,
    /// Latent channels of `cnn1d`; `resnet2d` uses the last stage's.
    #[serde(default)]
    pub latent_channels: usize,
    #[serde(default = "default_res_blocks")]
    pub res_blocks: usize,
    /// Odd kernel width of the stride-2 stages.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

impl CodecSpec {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self { family: Family::Identity, rows, cols, channels: vec![], latent_channels: 0, res_blocks: 0, kernel: 3 }
    }

    pub fn resnet2d(rows: usize, cols: usize, channels: &[usize], res_blocks: usize) -> Self {
        Self {
            family: Family::Resnet2d,
            rows,
            cols,
            channels: channels.to_vec(),
            latent_channels: 0,
            res_blocks,
            kernel: 3,
        }
    }

    pub fn cnn1d(rows: usize, cols: usize, channels: &[usize], latent_channels: usize) -> Self {
        Self {
            family: Family::Cnn1d,
            rows,
            cols,
            channels: channels.to_vec(),
            latent_channels,
            res_blocks: 0,
            kernel: 3,
        }
    }

    /// Six stages on a 4096×2048 canvas, latent `[64, 64, 32]`.
    pub fn resnet2d_full() -> Self {
        Self::resnet2d(4096, 2048, &[2, 4, 8, 16, 32, 64], 3)
    }

    /// Seven stages over 128 signals of length 32768, latent `[128, 4, 256]`.
    pub fn cnn1d_full() -> Self {
        Self::cnn1d(128, 32768, &[64, 128, 256, 256, 256, 128, 64], 4)
    }

    /// Three stages on the default 128×64 toy canvas, latent `[8, 16, 8]`.
    pub fn resnet2d_desk() -> Self {
        Self::resnet2d(128, 64, &[2, 4, 8], 3)
    }

    pub fn cnn1d_desk() -> Self {
        Self::cnn1d(128, 64, &[8, 16, 16], 2)
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Fills a zero canvas shape from `shape`.
    pub fn resolved(&self, shape: [usize; 2]) -> Self {
        let mut s = self.clone();
        if s.rows == 0 {
            s.rows = shape[0];
        }
        if s.cols == 0 {
            s.cols = shape[1];
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("codec canvas shape {}x{} must be positive", self.rows, self.cols));
        }
        match self.family {
            Family::Identity => return Ok(()),
            Family::Uformer => return Err(Error::UnsupportedFamily(self.family.name().into())),
            Family::Cnn1d | Family::Resnet2d => {}
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("codec needs at least one stage with positive channels".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        let f = 1usize.checked_shl(self.stages() as u32).unwrap_or(0);
        if f == 0 || self.cols % f != 0 || (self.family == Family::Resnet2d && self.rows % f != 0) {
            return bad(format!(
                "canvas {}x{} is not divisible by 2^{} for {}",
                self.rows,
                self.cols,
                self.stages(),
                self.family.name()
            ));
        }
        if self.family == Family::Cnn1d && self.latent_channels == 0 {
            return bad("cnn1d needs latent_channels > 0".into());
        }
        Ok(())
    }

    /// Latent shape of one canvas.
    pub fn latent_shape(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let f = 1 << self.stages();
        Ok(match self.family {
            Family::Identity => vec![self.rows, self.cols],
            Family::Resnet2d => vec![*self.channels.last().expect("validated"), self.rows / f, self.cols / f],
            Family::Cnn1d => vec![self.rows, self.latent_channels, self.cols / f],
            Family::Uformer => unreachable!("rejected by validate"),
        })
    }

    /// Shape of one canvas as fed to the encoder.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.family {
            Family::Cnn1d => vec![self.rows, 1, self.cols],
            Family::Resnet2d | Family::Uformer => vec![1, self.rows, self.cols],
            Family::Identity => vec![self.rows, self.cols],
        }
    }
}

/// Latent element count over canvas element count.
pub fn compression_ratio(spec: &CodecSpec) -> Result<f64> {
    let latent: usize = spec.latent_shape()?.iter().product();
    Ok(latent as f64 / (spec.rows * spec.cols) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeature {
    pub latent: Tensor,
    pub canvas_shape: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub test: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self { epochs: 200, lr: 2e-4, batch: 4, seed: 0 }
    }
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    std: f64,
}

/// Allocates parameter indices in construction order.
struct Alloc {
    next: usize,
    specs: Vec<ParamSpec>,
}

impl Alloc {
    fn new(start: usize) -> Self {
        Self { next: start, specs: Vec::new() }
    }

    fn param(&mut self, g: &mut Graph, name: String, shape: Vec<usize>, std: f64) -> NodeId {
        let id = g.param(self.next);
        self.next += 1;
        self.specs.push(ParamSpec { name, shape, std });
        id
    }
}

enum Act {
    Relu,
    Linear,
}

struct Net<'a> {
    g: &'a mut Graph,
    alloc: &'a mut Alloc,
    spec: &'a CodecSpec,
}

impl Net<'_> {
    fn gain(act: &Act) -> f64 {
        match act {
            Act::Relu => 2.0,
            Act::Linear => 1.0,
        }
    }

    fn finish(&mut self, y: NodeId, act: Act) -> NodeId {
        match act {
            Act::Relu => self.g.relu(y),
            Act::Linear => y,
        }
    }

    fn conv2d(
        &mut self,
        x: NodeId,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        act: Act,
        damp: f64,
    ) -> NodeId {
        let std = damp * (Self::gain(&act) / (ci * k * k) as f64).sqrt();
        let w = self.alloc.param(self.g, format!("{name}.w"), vec![co, ci, k, k], std);
        let b = self.alloc.param(self.g, format!("{name}.b"), vec![co], 0.0);
        let y = self.g.conv2d(x, w, Some(b), (stride, stride), (k / 2, k / 2));
        self.finish(y, act)
    }

    fn convt2d(&mut self, x: NodeId, name: &str, ci: usize, co: usize, k: usize, act: Act) -> NodeId {
        let std = (4.0 * Self::gain(&act) / (ci * k * k) as f64).sqrt();
        let w = self.alloc.param(self.g, format!("{name}.w"), vec![ci, co, k, k], std);
        let b = self.alloc.param(self.g, format!("{name}.b"), vec![co], 0.0);
        let y = self.g.conv_transpose2d(x, w, Some(b), (2, 2), (k / 2, k / 2), (1, 1));
        self.finish(y, act)
    }

    fn conv1d(&mut self, x: NodeId, name: &str, ci: usize, co: usize, k: usize, stride: usize, act: Act) -> NodeId {
        let std = (Self::gain(&act) / (ci * k) as f64).sqrt();
        let w = self.alloc.param(self.g, format!("{name}.w"), vec![co, ci, k], std);
        let b = self.alloc.param(self.g, format!("{name}.b"), vec![co], 0.0);
        let y = self.g.conv1d(x, w, Some(b), stride, k / 2);
        self.finish(y, act)
    }

    fn convt1d(&mut self, x: NodeId, name: &str, ci: usize, co: usize, k: usize, act: Act) -> NodeId {
        let std = (2.0 * Self::gain(&act) / (ci * k) as f64).sqrt();
        let w = self.alloc.param(self.g, format!("{name}.w"), vec![ci, co, k], std);
        let b = self.alloc.param(self.g, format!("{name}.b"), vec![co], 0.0);
        let y = self.g.conv_transpose1d(x, w, Some(b), 2, k / 2, 1);
        self.finish(y, act)
    }

    fn res_block(&mut self, x: NodeId, name: &str, c: usize) -> NodeId {
        let h = self.conv2d(x, &format!("{name}.0"), c, c, 3, 1, Act::Relu, 1.0);
        let h = self.conv2d(h, &format!("{name}.1"), c, c, 3, 1, Act::Linear, 0.1);
        self.g.add(x, h)
    }

    fn encoder(&mut self, x: NodeId) -> NodeId {
        let s = self.spec;
        let k = s.kernel;
        match s.family {
            Family::Resnet2d => {
                let mut h = self.conv2d(x, "enc.stem", 1, 1, 3, 1, Act::Linear, 1.0);
                let mut ci = 1;
                for (i, &co) in s.channels.iter().enumerate() {
                    h = self.conv2d(h, &format!("enc.down{i}"), ci, co, k, 2, Act::Relu, 1.0);
                    ci = co;
                }
                for i in 0..s.res_blocks {
                    h = self.res_block(h, &format!("enc.res{i}"), ci);
                }
                h
            }
            Family::Cnn1d => {
                let mut h = x;
                let mut ci = 1;
                for (i, &co) in s.channels.iter().enumerate() {
                    h = self.conv1d(h, &format!("enc.down{i}"), ci, co, k, 2, Act::Relu);
                    ci = co;
                }
                self.conv1d(h, "enc.latent", ci, s.latent_channels, 1, 1, Act::Linear)
            }
            Family::Identity | Family::Uformer => unreachable!("no encoder graph"),
        }
    }

    fn decoder(&mut self, z: NodeId) -> NodeId {
        let s = self.spec;
        let k = s.kernel;
        match s.family {
            Family::Resnet2d => {
                let mut ci = *s.channels.last().expect("validated");
                let mut h = z;
                for i in 0..s.res_blocks {
                    h = self.res_block(h, &format!("dec.res{i}"), ci);
                }
                let n = s.channels.len();
                for i in (0..n).rev() {
                    let co = if i == 0 { 1 } else { s.channels[i - 1] };
                    let act = if co == 1 { Act::Linear } else { Act::Relu };
                    h = self.convt2d(h, &format!("dec.up{}", n - 1 - i), ci, co, k, act);
                    ci = co;
                }
                self.conv2d(h, "dec.out", 1, 1, 7, 1, Act::Linear, 1.0)
            }
            Family::Cnn1d => {
                let mut ci = s.latent_channels;
                let mut h = z;
                let n = s.channels.len();
                for i in (0..n).rev() {
                    let co = s.channels[i];
                    h = self.convt1d(h, &format!("dec.up{}", n - 1 - i), ci, co, k, Act::Relu);
                    ci = co;
                }
                self.conv1d(h, "dec.out", ci, 1, 1, 1, Act::Linear)
            }
            Family::Identity | Family::Uformer => unreachable!("no decoder graph"),
        }
    }
}

struct Graphs {
    enc: Graph,
    dec: Graph,
    ae: Graph,
    enc_out: NodeId,
    dec_out: NodeId,
    ae_loss: NodeId,
    param_specs: Vec<ParamSpec>,
}

fn build_graphs(spec: &CodecSpec) -> Graphs {
    let input = spec.input_shape();
    let latent = spec.latent_shape().expect("validated");
    let (in_sample, latent_sample) = match spec.family {
        Family::Cnn1d => (input[1..].to_vec(), latent[1..].to_vec()),
        _ => (input, latent),
    };

    let mut enc = Graph::new();
    let mut ea = Alloc::new(0);
    let x = enc.input("x", &in_sample);
    let enc_out = Net { g: &mut enc, alloc: &mut ea, spec }.encoder(x);
    enc.set_output("latent", enc_out);

    let mut dec = Graph::new();
    let mut da = Alloc::new(ea.next);
    let z = dec.input("z", &latent_sample);
    let dec_out = Net { g: &mut dec, alloc: &mut da, spec }.decoder(z);
    dec.set_output("canvas", dec_out);

    let mut ae = Graph::new();
    let mut aa = Alloc::new(0);
    let x = ae.input("x", &in_sample);
    let h = Net { g: &mut ae, alloc: &mut aa, spec }.encoder(x);
    let y = Net { g: &mut ae, alloc: &mut aa, spec }.decoder(h);
    let ae_loss = ae.mse(y, x);
    ae.set_output("loss", ae_loss);
    debug_assert_eq!(aa.next, da.next);

    let mut param_specs = ea.specs;
    param_specs.extend(da.specs);
    Graphs { enc, dec, ae, enc_out, dec_out, ae_loss, param_specs }
}

pub struct Codec {
    spec: CodecSpec,
    graphs: Option<Graphs>,
    params: Vec<Tensor>,
    scale: f64,
    trained: bool,
}

impl std::fmt::Debug for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Codec")
            .field("spec", &self.spec)
            .field("params", &self.params.len())
            .field("scale", &self.scale)
            .field("trained", &self.trained)
            .finish()
    }
}

impl Codec {
    /// Builds the encoder and decoder and draws initial parameters.
    pub fn build(spec: &CodecSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.family == Family::Identity {
            return Ok(Self { spec: spec.clone(), graphs: None, params: vec![], scale: 1.0, trained: true });
        }
        let graphs = build_graphs(spec);
        let mut rng = seed::rng(seed, &[stream::CODEC]);
        let params = graphs.param_specs.iter().map(|p| Tensor::randn(&p.shape, p.std, &mut rng)).collect();
        let codec = Self { spec: spec.clone(), graphs: Some(graphs), params, scale: 1.0, trained: false };
        let got = codec.infer_latent_shape(1)?;
        let got = if spec.family == Family::Resnet2d { &got[1..] } else { &got[..] };
        let want = spec.latent_shape()?;
        if got != want.as_slice() {
            return Err(Error::Shape(format!("encoder produces {got:?}, spec declares {want:?}")));
        }
        Ok(codec)
    }

    /// Encoder output shape for `batch` canvases, from shape arithmetic
    /// alone. For `cnn1d` the leading dimension counts signals.
    pub fn infer_latent_shape(&self, batch: usize) -> Result<Vec<usize>> {
        let Some(g) = &self.graphs else {
            return Ok(vec![batch, self.spec.rows, self.spec.cols]);
        };
        let mut input = self.spec.input_shape();
        input[0] *= batch;
        if self.spec.family == Family::Resnet2d {
            input.insert(0, batch);
            input[1] = 1;
        }
        let pshapes: Vec<Vec<usize>> = self.params.iter().map(|p| p.shape().to_vec()).collect();
        let shapes = g.enc.infer_shapes(&pshapes, &[("x", &input)])?;
        Ok(shapes[g.enc_out.index()].clone())
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.graphs.as_ref().map_or_else(Vec::new, |g| g.param_specs.iter().map(|p| p.name.clone()).collect())
    }

    pub fn compression_ratio(&self) -> f64 {
        compression_ratio(&self.spec).expect("validated at build")
    }

    fn check_canvas(&self, c: &Tensor) -> Result<()> {
        if c.shape() != [self.spec.rows, self.spec.cols] {
            return Err(Error::Shape(format!(
                "canvas {:?} does not match codec input {}x{}",
                c.shape(),
                self.spec.rows,
                self.spec.cols
            )));
        }
        Ok(())
    }

    /// Stacks canvases into the encoder's batched input, scaled by `1/scale`.
    fn stack(&self, canvases: &[&Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(canvases.len() * self.spec.rows * self.spec.cols);
        for c in canvases {
            self.check_canvas(c)?;
            data.extend(c.data().iter().map(|v| v / self.scale));
        }
        let (r, c, n) = (self.spec.rows, self.spec.cols, canvases.len());
        match self.spec.family {
            Family::Resnet2d => Tensor::new(&[n, 1, r, c], data),
            Family::Cnn1d => Tensor::new(&[n * r, 1, c], data),
            _ => unreachable!("conv families only"),
        }
    }

    pub fn encode(&self, canvas: &Tensor) -> Result<EncodedFeature> {
        Ok(self.encode_batch(&[canvas])?.pop().expect("one feature"))
    }

    pub fn encode_batch(&self, canvases: &[&Tensor]) -> Result<Vec<EncodedFeature>> {
        let shape = [self.spec.rows, self.spec.cols];
        let Some(g) = &self.graphs else {
            return canvases
                .iter()
                .map(|c| {
                    self.check_canvas(c)?;
                    Ok(EncodedFeature { latent: (*c).clone(), canvas_shape: shape })
                })
                .collect();
        };
        if canvases.is_empty() {
            return Ok(vec![]);
        }
        let x = self.stack(canvases)?;
        let tr = g.enc.forward(&self.params, &[("x", &x)])?;
        let z = g.enc.get(&tr, &self.params, g.enc_out);
        let latent_shape = self.spec.latent_shape()?;
        let per: usize = latent_shape.iter().product();
        Ok(z.data()
            .chunks(per)
            .map(|chunk| EncodedFeature {
                latent: Tensor::new(&latent_shape, chunk.to_vec()).expect("latent shape"),
                canvas_shape: shape,
            })
            .collect())
    }

    pub fn decode(&self, feature: &EncodedFeature) -> Result<Tensor> {
        Ok(self.decode_batch(&[&feature.latent])?.pop().expect("one canvas"))
    }

    pub fn decode_batch(&self, latents: &[&Tensor]) -> Result<Vec<Tensor>> {
        let want = self.spec.latent_shape()?;
        for z in latents {
            if z.shape() != want.as_slice() {
                return Err(Error::Shape(format!("latent {:?} does not match {want:?}", z.shape())));
            }
        }
        let Some(g) = &self.graphs else {
            return Ok(latents.iter().map(|z| (*z).clone()).collect());
        };
        if latents.is_empty() {
            return Ok(vec![]);
        }
        let n = latents.len();
        let mut data = Vec::with_capacity(n * want.iter().product::<usize>());
        for z in latents {
            data.extend_from_slice(z.data());
        }
        let zin = match self.spec.family {
            Family::Resnet2d => Tensor::new(&[n, want[0], want[1], want[2]], data)?,
            Family::Cnn1d => Tensor::new(&[n * want[0], want[1], want[2]], data)?,
            _ => unreachable!("conv families only"),
        };
        let tr = g.dec.forward(&self.params, &[("z", &zin)])?;
        let y = g.dec.get(&tr, &self.params, g.dec_out);
        let (r, c) = (self.spec.rows, self.spec.cols);
        Ok(y.data()
            .chunks(r * c)
            .map(|chunk| Tensor::new(&[r, c], chunk.iter().map(|v| v * self.scale).collect()).expect("canvas"))
            .collect())
    }

    /// `decode(encode(x))` for each canvas.
    pub fn reconstruct(&self, canvases: &[&Tensor]) -> Result<Vec<Tensor>> {
        let f = self.encode_batch(canvases)?;
        let z: Vec<&Tensor> = f.iter().map(|f| &f.latent).collect();
        self.decode_batch(&z)
    }

    /// Mean-convention reconstruction MSE over `canvases`, in canvas units.
    pub fn eval_mse(&self, canvases: &[Tensor], batch: usize) -> Result<f64> {
        let mut total = 0.0;
        for chunk in canvases.chunks(batch.max(1)) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            for (x, y) in chunk.iter().zip(self.reconstruct(&refs)?) {
                total += crate::tensor::mse(x, &y)?;
            }
        }
        Ok(total / canvases.len() as f64)
    }

    /// Minimises reconstruction MSE with Adam on shuffled minibatches.
    /// The normalisation scale is fixed to the RMS of `train` first.
    /// Losses are reported in canvas units; after training the parameters
    /// are rounded to f32 so a saved checkpoint reproduces them exactly.
    pub fn train(&mut self, train: &[Tensor], test: &[Tensor], opts: &TrainOpts) -> Result<Vec<EpochLoss>> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument("codec training needs non-empty train and test sets".into()));
        }
        for c in train.iter().chain(test) {
            self.check_canvas(c)?;
        }
        if self.graphs.is_none() {
            let t = self.eval_mse(test, opts.batch)?;
            return Ok((1..=opts.epochs).map(|epoch| EpochLoss { epoch, train: 0.0, test: t }).collect());
        }
        let n_el: usize = train.iter().map(Tensor::numel).sum();
        let ms = train.iter().map(Tensor::sum_sq).sum::<f64>() / n_el as f64;
        self.scale = if ms > 0.0 { (ms.sqrt() as f32) as f64 } else { 1.0 };
        let s2 = self.scale * self.scale;

        let mut adam = AdamState::new(&self.params, opts.lr)?;
        let mut rng = seed::rng(opts.seed, &[stream::TRAIN]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut curve = Vec::with_capacity(opts.epochs);
        for epoch in 1..=opts.epochs {
            order.shuffle(&mut rng);
            let mut acc = 0.0;
            let mut count = 0usize;
            for batch in order.chunks(opts.batch.max(1)) {
                let refs: Vec<&Tensor> = batch.iter().map(|&i| &train[i]).collect();
                let (loss, grads) = self.loss_and_grads(&refs)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("codec training loss at epoch {epoch}")));
                }
                adam.step(&mut self.params, &grads)?;
                acc += loss * batch.len() as f64;
                count += batch.len();
            }
            let test_loss = self.eval_mse(test, opts.batch.max(1) * 4)?;
            if !test_loss.is_finite() {
                return Err(Error::NonFinite(format!("codec test loss at epoch {epoch}")));
            }
            curve.push(EpochLoss { epoch, train: acc / count as f64 * s2, test: test_loss });
        }
        for p in &mut self.params {
            *p = p.round_f32();
        }
        self.trained = true;
        Ok(curve)
    }

    fn loss_and_grads(&self, batch: &[&Tensor]) -> Result<(f64, Vec<Option<Tensor>>)> {
        let g = self.graphs.as_ref().expect("conv family");
        let x = self.stack(batch)?;
        let tr = g.ae.forward(&self.params, &[("x", &x)])?;
        let loss = g.ae.get(&tr, &self.params, g.ae_loss).data()[0];
        let grads = g.ae.backward(&tr, &self.params, g.ae_loss)?;
        Ok((loss, grads))
    }

    pub fn to_bundle(&self) -> Bundle {
        let names = self.param_names();
        Bundle {
            descriptor: serde_json::json!({
                "kind": "codec",
                "spec": self.spec,
                "scale": self.scale,
                "trained": self.trained,
            }),
            tensors: names.into_iter().zip(self.params.iter().cloned()).collect(),
        }
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let d = &b.descriptor;
        if d.get("kind").and_then(|k| k.as_str()) != Some("codec") {
            return Err(Error::Malformed("bundle is not a codec checkpoint".into()));
        }
        let spec: CodecSpec =
            serde_json::from_value(d["spec"].clone()).map_err(|e| Error::Malformed(format!("codec spec: {e}")))?;
        let scale = d["scale"].as_f64().ok_or_else(|| Error::Malformed("codec scale missing".into()))?;
        let trained = d["trained"].as_bool().unwrap_or(false);
        let mut codec = Self::build(&spec, 0)?;
        let names = codec.param_names();
        if names.len() != b.tensors.len() {
            return Err(Error::Malformed(format!("expected {} tensors, found {}", names.len(), b.tensors.len())));
        }
        for ((want, p), (name, t)) in names.iter().zip(&mut codec.params).zip(&b.tensors) {
            if want != name || p.shape() != t.shape() {
                return Err(Error::Malformed(format!(
                    "tensor `{name}` {:?} does not match `{want}` {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t.clone();
        }
        codec.scale = scale;
        codec.trained = trained;
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bundle().to_bytes()?)))
    }
}

/// Draws a random canvas for smoke tests of a spec.
pub fn random_canvas<R: Rng>(spec: &CodecSpec, std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(&[spec.rows, spec.cols], std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_shapes_and_ratios() {
        let r = Codec::build(&CodecSpec::resnet2d_full(), 0).unwrap();
        assert_eq!(r.infer_latent_shape(1).unwrap(), vec![1, 64, 64, 32]);
        assert_eq!(r.compression_ratio(), 131072.0 / 8388608.0);
        let c = Codec::build(&CodecSpec::cnn1d_full(), 0).unwrap();
        assert_eq!(c.infer_latent_shape(1).unwrap(), vec![128, 4, 256]);
        assert_eq!(c.compression_ratio(), 0.03125);
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let spec = CodecSpec::identity(4, 6);
        let codec = Codec::build(&spec, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_canvas(&spec, 1.0, &mut rng);
        let f = codec.encode(&x).unwrap();
        assert_eq!(f.latent.shape(), &[4, 6]);
        assert_eq!(codec.decode(&f).unwrap(), x);
        assert_eq!(compression_ratio(&spec).unwrap(), 1.0);
    }

    #[test]
    fn uformer_and_bad_dims_rejected() {
        let mut s = CodecSpec::resnet2d_desk();
        s.family = Family::Uformer;
        assert!(matches!(Codec::build(&s, 0), Err(Error::UnsupportedFamily(_))));
        let s = CodecSpec::resnet2d(12, 64, &[2, 4, 8], 1);
        assert!(Codec::build(&s, 0).is_err());
    }

    #[test]
    fn desk_shape_law() {
        let s = CodecSpec::resnet2d(128, 64, &[16, 32, 64], 1);
        assert_eq!(s.latent_shape().unwrap(), vec![64, 16, 8]);
        let codec = Codec::build(&s, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_canvas(&s, 1.0, &mut rng);
        let f = codec.encode(&x).unwrap();
        assert_eq!(f.latent.shape(), &[64, 16, 8]);
        assert_eq!(codec.decode(&f).unwrap().shape(), &[128, 64]);
    }

    #[test]
    fn singleton_training_memorises() {
        let spec = CodecSpec::resnet2d(8, 8, &[4, 8], 1);
        let mut codec = Codec::build(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_canvas(&spec, 1.0, &mut rng);
        let opts = TrainOpts { epochs: 500, lr: 3e-3, batch: 1, seed: 0 };
        let curve = codec.train(&[x.clone()], &[x.clone()], &opts).unwrap();
        assert!(curve.last().unwrap().train < 1e-4 * curve[0].train, "{:?}", curve.last());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_encodings() {
        let spec = CodecSpec::cnn1d(4, 16, &[3, 5], 2);
        let mut codec = Codec::build(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Tensor> = (0..3).map(|_| random_canvas(&spec, 0.1, &mut rng)).collect();
        codec.train(&xs, &xs[..1], &TrainOpts { epochs: 2, lr: 1e-3, batch: 2, seed: 1 }).unwrap();
        let back = Codec::from_bundle(&Bundle::from_bytes(&codec.to_bundle().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.encode(&xs[0]).unwrap(), codec.encode(&xs[0]).unwrap());
        assert_eq!(back.hash().unwrap(), codec.hash().unwrap());
        assert!(back.is_trained());
    }
}
