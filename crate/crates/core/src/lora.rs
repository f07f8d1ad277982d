//! Toy target model with LoRA adapters on its K/Q/V/O projections.
//!
//! Each layer maps a batch of hidden rows `H` to
//! `H + g ⊙ (V(H) W_Oᵀ)` where `V(H) = H W_Vᵀ` and the per-row gate is
//! `g = sigmoid(⟨H W_Qᵀ, H W_Kᵀ⟩ / √d)`. A frozen head maps the last hidden
//! state to class logits. During local training every projection `π` of
//! layer `ℓ` is evaluated as `W[ℓ,π] + B[ℓ,π] A[ℓ,π]`.
//!
//! The server-side weights are `W_base + D`, where `D` is the dense
//! accumulated global update ([`WeightDelta`]).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::AdamState;
use crate::seed::{self, stream};
use crate::tensor::Tensor;

pub const N_PROJ: usize = 4;
pub const PROJ_NAMES: [&str; N_PROJ] = ["K", "Q", "V", "O"];
const K: usize = 0;
const Q: usize = 1;
const V: usize = 2;
const O: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub rank: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 64, layers: 4, rank: 4, n_classes: 8 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.rank == 0 || self.n_classes == 0 {
            return Err(Error::InvalidArgument(format!("model dimensions must be positive: {self:?}")));
        }
        if self.rank >= self.d {
            return Err(Error::InvalidArgument(format!("rank {} must be below d {}", self.rank, self.d)));
        }
        Ok(())
    }

    pub fn canvas_rows(&self) -> usize {
        2 * self.rank * N_PROJ * self.layers
    }

    pub fn canvas_shape(&self) -> [usize; 2] {
        [self.canvas_rows(), self.d]
    }

    pub fn n_slots(&self) -> usize {
        N_PROJ * self.layers
    }
}

/// Frozen base weights. Projections are indexed by `ℓ * 4 + π` in
/// K, Q, V, O order; each is `d×d` and applied as `h ↦ W h`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    pub config: ModelConfig,
    base: Vec<Tensor>,
    head: Tensor,
}

/// Low-rank factors per projection slot: `A` is `r×d`, `B` is `d×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

/// Dense accumulated global update, one `d×d` matrix per projection slot.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDelta {
    pub d: Vec<Tensor>,
}

impl WeightDelta {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self { d: (0..cfg.n_slots()).map(|_| Tensor::zeros(&[cfg.d, cfg.d])).collect() }
    }

    pub fn round_f32(&self) -> Self {
        Self { d: self.d.iter().map(Tensor::round_f32).collect() }
    }

    pub fn numel(&self) -> usize {
        self.d.iter().map(Tensor::numel).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.d.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

/// Base weights `N(0, 1/d)`, head `N(0, 1/d)`, `A ~ N(0, 1/r)`, `B = 0`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<(TargetModel, LoraFactors)> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, &[stream::MODEL]);
    let ws = 1.0 / (cfg.d as f64).sqrt();
    let base = (0..cfg.n_slots()).map(|_| Tensor::randn(&[cfg.d, cfg.d], ws, &mut rng)).collect();
    let head = Tensor::randn(&[cfg.d, cfg.n_classes], ws, &mut rng);
    let as_ = 1.0 / (cfg.rank as f64).sqrt();
    let a = (0..cfg.n_slots()).map(|_| Tensor::randn(&[cfg.rank, cfg.d], as_, &mut rng)).collect();
    let b = (0..cfg.n_slots()).map(|_| Tensor::zeros(&[cfg.d, cfg.rank])).collect();
    Ok((TargetModel { config: *cfg, base, head }, LoraFactors { a, b }))
}

impl LoraFactors {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            a: (0..cfg.n_slots()).map(|_| Tensor::zeros(&[cfg.rank, cfg.d])).collect(),
            b: (0..cfg.n_slots()).map(|_| Tensor::zeros(&[cfg.d, cfg.rank])).collect(),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.a.len()
    }

    /// `[A₀, B₀, A₁, B₁, …]`, the layout used as graph parameters.
    pub fn to_params(&self) -> Vec<Tensor> {
        self.a.iter().zip(&self.b).flat_map(|(a, b)| [a.clone(), b.clone()]).collect()
    }

    pub fn from_params(params: Vec<Tensor>) -> Self {
        let mut a = Vec::with_capacity(params.len() / 2);
        let mut b = Vec::with_capacity(params.len() / 2);
        for (i, p) in params.into_iter().enumerate() {
            if i % 2 == 0 {
                a.push(p)
            } else {
                b.push(p)
            }
        }
        Self { a, b }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.a.iter().zip(&self.b).flat_map(|(a, b)| [a, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.a.iter_mut().zip(self.b.iter_mut()).flat_map(|(a, b)| [a, b])
    }

    fn check_like(&self, other: &LoraFactors) -> Result<()> {
        let same = self.a.len() == other.a.len()
            && self.b.len() == other.b.len()
            && self.tensors().zip(other.tensors()).all(|(x, y)| x.shape() == y.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("factor sets differ in layout".into()))
        }
    }

    pub fn add(&self, other: &LoraFactors) -> Result<Self> {
        self.check_like(other)?;
        let mut out = self.clone();
        for (o, t) in out.tensors_mut().zip(other.tensors()) {
            o.axpy(1.0, t)?;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &LoraFactors) -> Result<Self> {
        self.check_like(other)?;
        let mut out = self.clone();
        for (o, t) in out.tensors_mut().zip(other.tensors()) {
            o.axpy(-1.0, t)?;
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { a: self.a.iter().map(|t| t.scale(c)).collect(), b: self.b.iter().map(|t| t.scale(c)).collect() }
    }

    pub fn round_f32(&self) -> Self {
        Self { a: self.a.iter().map(Tensor::round_f32).collect(), b: self.b.iter().map(Tensor::round_f32).collect() }
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }
}

/// Parameter count of one full set of adapter factors.
pub fn count_transmitted_params(d: u64, r: u64, layers: u64, n_proj: u64) -> u64 {
    d * r * 2 * n_proj * layers
}

/// Stacks every slot's `A` then `Bᵀ` into a `(2·r·4·L) × d` canvas.
pub fn pack(factors: &LoraFactors, cfg: &ModelConfig) -> Result<Tensor> {
    let (r, d) = (cfg.rank, cfg.d);
    if factors.n_slots() != cfg.n_slots()
        || factors.a.iter().any(|a| a.shape() != [r, d])
        || factors.b.iter().any(|b| b.shape() != [d, r])
    {
        return Err(Error::Shape(format!("factors do not match {cfg:?}")));
    }
    let mut canvas = Vec::with_capacity(cfg.canvas_rows() * d);
    for (a, b) in factors.a.iter().zip(&factors.b) {
        canvas.extend_from_slice(a.data());
        canvas.extend_from_slice(b.transpose2().data());
    }
    Tensor::new(&cfg.canvas_shape(), canvas)
}

pub fn unpack(canvas: &Tensor, cfg: &ModelConfig) -> Result<LoraFactors> {
    if canvas.shape() != cfg.canvas_shape() {
        return Err(Error::Shape(format!(
            "canvas {:?} does not match expected {:?}",
            canvas.shape(),
            cfg.canvas_shape()
        )));
    }
    let (r, d) = (cfg.rank, cfg.d);
    let slab = r * d;
    let mut out = LoraFactors { a: Vec::new(), b: Vec::new() };
    for s in 0..cfg.n_slots() {
        let base = 2 * s * slab;
        out.a.push(Tensor::new(&[r, d], canvas.data()[base..base + slab].to_vec())?);
        let bt = Tensor::new(&[r, d], canvas.data()[base + slab..base + 2 * slab].to_vec())?;
        out.b.push(bt.transpose2());
    }
    Ok(out)
}

/// Elementwise sum of all `A`s and of all `B`s, in list order.
pub fn aggregate(list: &[LoraFactors]) -> Result<LoraFactors> {
    let (first, rest) =
        list.split_first().ok_or_else(|| Error::InvalidArgument("cannot aggregate an empty list".into()))?;
    let mut acc = first.clone();
    for f in rest {
        acc.check_like(f)?;
        for (o, t) in acc.tensors_mut().zip(f.tensors()) {
            o.axpy(1.0, t)?;
        }
    }
    Ok(acc)
}

/// `D[s] += η · B̃[s] Ã[s]` for every slot.
pub fn apply_global_update(delta: &mut WeightDelta, agg: &LoraFactors, eta: f64) -> Result<()> {
    if delta.d.len() != agg.n_slots() {
        return Err(Error::Shape("delta and aggregate slot counts differ".into()));
    }
    for ((dm, a), b) in delta.d.iter_mut().zip(&agg.a).zip(&agg.b) {
        let ba = b.matmul(a)?;
        if ba.shape() != dm.shape() {
            return Err(Error::Shape(format!("update {:?} vs delta {:?}", ba.shape(), dm.shape())));
        }
        dm.axpy(eta, &ba)?;
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TargetModel {
    pub fn base(&self, slot: usize) -> &Tensor {
        &self.base[slot]
    }

    pub fn head(&self) -> &Tensor {
        &self.head
    }

    /// `W_base + D` per slot.
    pub fn effective_weights(&self, delta: &WeightDelta) -> Result<Vec<Tensor>> {
        self.base.iter().zip(&delta.d).map(|(w, d)| w.add(d)).collect()
    }

    /// Logits for rows of `x` with weights `W_base + D (+ B A)`.
    pub fn logits(&self, delta: &WeightDelta, factors: Option<&LoraFactors>, x: &Tensor) -> Result<Tensor> {
        let mut w = self.effective_weights(delta)?;
        if let Some(f) = factors {
            for (s, wm) in w.iter_mut().enumerate() {
                wm.axpy(1.0, &f.b[s].matmul(&f.a[s])?)?;
            }
        }
        self.logits_dense(&w, x)
    }

    /// Logits with explicit dense projection weights.
    pub fn logits_dense(&self, w: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let d = self.config.d;
        if x.shape().len() != 2 || x.cols() != d {
            return Err(Error::Shape(format!("model input must be [n, {d}], got {:?}", x.shape())));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut h = x.clone();
        for l in 0..self.config.layers {
            let p = |pi: usize, m: &Tensor| m.matmul(&w[l * N_PROJ + pi].transpose2());
            let k = p(K, &h)?;
            let q = p(Q, &h)?;
            let v = p(V, &h)?;
            let o = p(O, &v)?;
            let n = h.rows();
            let mut next = h.clone();
            for i in 0..n {
                let dot: f64 = (0..d).map(|j| q.get2(i, j) * k.get2(i, j)).sum();
                let g = sigmoid(dot * scale);
                for j in 0..d {
                    next.set2(i, j, h.get2(i, j) + g * o.get2(i, j));
                }
            }
            h = next;
        }
        h.matmul(&self.head)
    }

    /// Fraction of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, delta: &WeightDelta, ds: &Dataset) -> Result<f64> {
        let logits = self.logits(delta, None, &ds.x)?;
        let c = ds.n_classes;
        let hits = logits
            .data()
            .chunks(c)
            .zip(&ds.y)
            .filter(|(row, &y)| {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0;
                arg == y
            })
            .count();
        Ok(hits as f64 / ds.len() as f64)
    }

    /// Mean cross-entropy over `ds`.
    pub fn loss(&self, delta: &WeightDelta, ds: &Dataset) -> Result<f64> {
        let logits = self.logits(delta, None, &ds.x)?;
        let c = ds.n_classes;
        let mut total = 0.0;
        for (row, &y) in logits.data().chunks(c).zip(&ds.y) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        Ok(total / ds.len() as f64)
    }

    /// Training graph over LoRA factors laid out as in
    /// [`LoraFactors::to_params`]. Inputs: `x` `[n, d]`, one-hot `y`
    /// `[n, C]`.
    pub fn train_graph(&self, delta: &WeightDelta) -> Result<TrainGraph> {
        let cfg = self.config;
        let w = self.effective_weights(delta)?;
        let mut g = Graph::new();
        let x = g.input("x", &[cfg.d]);
        let y = g.input("y", &[cfg.n_classes]);
        let mut h = x;
        for l in 0..cfg.layers {
            let proj = |g: &mut Graph, pi: usize, m: NodeId| {
                let slot = l * N_PROJ + pi;
                let wt = g.constant(w[slot].transpose2());
                let a = g.param(2 * slot);
                let b = g.param(2 * slot + 1);
                let base = g.matmul(m, wt);
                let at = g.transpose(a);
                let bt = g.transpose(b);
                let low = g.matmul(m, at);
                let low = g.matmul(low, bt);
                g.add(base, low)
            };
            let k = proj(&mut g, K, h);
            let q = proj(&mut g, Q, h);
            let v = proj(&mut g, V, h);
            let o = proj(&mut g, O, v);
            let qk = g.mul(q, k);
            let dot = g.row_sum(qk);
            let dot = g.scale(dot, 1.0 / (cfg.d as f64).sqrt());
            let gate = g.sigmoid(dot);
            let upd = g.mul_col(o, gate);
            h = g.add(h, upd);
        }
        let head = g.constant(self.head.clone());
        let logits = g.matmul(h, head);
        let loss = g.softmax_cross_entropy(logits, y);
        g.set_output("logits", logits);
        g.set_output("loss", loss);
        Ok(TrainGraph { graph: g, loss, logits })
    }
}

pub struct TrainGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub logits: NodeId,
}

impl TrainGraph {
    /// Mean cross-entropy on rows `idx` of `ds` and its factor gradients.
    pub fn loss_and_grads(&self, params: &[Tensor], ds: &Dataset, idx: &[usize]) -> Result<(f64, Vec<Option<Tensor>>)> {
        let sub = ds.subset(idx);
        let y = ds.one_hot(idx);
        let trace = self.graph.forward(params, &[("x", &sub.x), ("y", &y)])?;
        let loss = self.graph.get(&trace, params, self.loss).data()[0];
        let grads = self.graph.backward(&trace, params, self.loss)?;
        Ok((loss, grads))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for LocalOpts {
    fn default() -> Self {
        Self { epochs: 1, lr: 1e-2, batch: 32 }
    }
}

/// Adam on cross-entropy starting from `init` on weights `W_base + D`;
/// returns the factor change after `opts.epochs` shuffled passes.
pub fn local_train<R: Rng>(
    model: &TargetModel,
    delta: &WeightDelta,
    init: &LoraFactors,
    shard: &Dataset,
    opts: &LocalOpts,
    rng: &mut R,
) -> Result<LoraFactors> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument("local shard is empty".into()));
    }
    if opts.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let tg = model.train_graph(delta)?;
    let mut params = init.to_params();
    let mut adam = AdamState::new(&params, opts.lr)?;
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for batch in order.chunks(opts.batch) {
            let (loss, grads) = tg.loss_and_grads(&params, shard, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("local training loss".into()));
            }
            adam.step(&mut params, &grads)?;
        }
    }
    LoraFactors::from_params(params).sub(init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { d: 8, layers: 2, rank: 2, n_classes: 3 }
    }

    fn toy_data(cfg: &ModelConfig, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, cfg.d], 1.0, &mut rng);
        let y = (0..n).map(|i| i % cfg.n_classes).collect();
        Dataset { x, y, n_classes: cfg.n_classes }
    }

    #[test]
    fn fresh_model_has_zero_update_and_is_deterministic() {
        let cfg = ModelConfig::default();
        let (m1, f1) = init_model(&cfg, 5).unwrap();
        let (m2, f2) = init_model(&cfg, 5).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(f1, f2);
        for (a, b) in f1.a.iter().zip(&f1.b) {
            assert_eq!(b.matmul(a).unwrap().max_abs(), 0.0);
        }
        assert_eq!(cfg.canvas_rows(), 128);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_model(&ModelConfig { d: 4, layers: 1, rank: 4, n_classes: 2 }, 0).is_err());
        assert!(init_model(&ModelConfig { d: 4, layers: 0, rank: 1, n_classes: 2 }, 0).is_err());
    }

    #[test]
    fn transmitted_param_counts() {
        assert_eq!(count_transmitted_params(4096, 8, 32, 4), 8_388_608);
        assert_eq!(count_transmitted_params(64, 4, 4, 4), 8192);
        assert_eq!(count_transmitted_params(64, 0, 4, 4), 0);
    }

    #[test]
    fn hand_packed_tiny_canvas() {
        let cfg = ModelConfig { d: 2, layers: 1, rank: 1, n_classes: 2 };
        let mut f = LoraFactors::zeros(&cfg);
        f.a[0] = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        f.b[0] = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = pack(&f, &cfg).unwrap();
        assert_eq!(c.shape(), &[8, 2]);
        assert_eq!(&c.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(c.data()[4..].iter().all(|&v| v == 0.0));
        assert_eq!(unpack(&c, &cfg).unwrap(), f);
    }

    #[test]
    fn full_scale_canvas_shape() {
        let cfg = ModelConfig { d: 4096, layers: 32, rank: 8, n_classes: 2 };
        assert_eq!(cfg.canvas_shape(), [2048, 4096]);
    }

    #[test]
    fn unpack_rejects_wrong_rows() {
        let cfg = small();
        assert!(unpack(&Tensor::zeros(&[3, 8]), &cfg).is_err());
    }

    #[test]
    fn aggregate_is_sum_in_factor_space() {
        let cfg = ModelConfig { d: 2, layers: 1, rank: 1, n_classes: 2 };
        let mut f1 = LoraFactors::zeros(&cfg);
        f1.a[0] = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        f1.b[0] = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let mut f2 = LoraFactors::zeros(&cfg);
        f2.a[0] = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        f2.b[0] = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let agg = aggregate(&[f1.clone(), f2.clone()]).unwrap();
        let mut delta = WeightDelta::zeros(&cfg);
        apply_global_update(&mut delta, &agg, 1.0).unwrap();
        assert_eq!(delta.d[0].data(), &[1.0, 1.0, 1.0, 1.0]);
        let sep = f1.b[0].matmul(&f1.a[0]).unwrap().add(&f2.b[0].matmul(&f2.a[0]).unwrap()).unwrap();
        assert_eq!(sep.data(), &[1.0, 0.0, 0.0, 1.0]);

        assert_eq!(aggregate(&[f1.clone()]).unwrap(), f1);
        assert_eq!(aggregate(&[f1.clone(), f1.clone()]).unwrap(), f1.scale(2.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn global_update_matches_dense_oracle() {
        let cfg = small();
        let (model, _) = init_model(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agg = LoraFactors {
            a: (0..cfg.n_slots()).map(|_| Tensor::randn(&[2, 8], 0.3, &mut rng)).collect(),
            b: (0..cfg.n_slots()).map(|_| Tensor::randn(&[8, 2], 0.3, &mut rng)).collect(),
        };
        let eta = 0.7;
        let mut delta = WeightDelta::zeros(&cfg);
        apply_global_update(&mut delta, &agg, eta).unwrap();

        let mut w: Vec<Tensor> = (0..cfg.n_slots()).map(|s| model.base(s).clone()).collect();
        for s in 0..cfg.n_slots() {
            for i in 0..8 {
                for j in 0..8 {
                    let v: f64 = (0..2).map(|k| agg.b[s].get2(i, k) * agg.a[s].get2(k, j)).sum();
                    let cur = w[s].get2(i, j);
                    w[s].set2(i, j, cur + eta * v);
                }
            }
        }
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let got = model.logits(&delta, None, &x).unwrap();
        let want = model.logits_dense(&w, &x).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }

        let before = delta.clone();
        apply_global_update(&mut delta, &agg, 0.0).unwrap();
        assert_eq!(delta, before);
        apply_global_update(&mut delta, &LoraFactors::zeros(&cfg), 1.0).unwrap();
        assert_eq!(delta, before);
    }

    #[test]
    fn output_independent_of_a_when_b_zero() {
        let cfg = small();
        let (model, f) = init_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut g = f.clone();
        for a in &mut g.a {
            *a = Tensor::randn(&[2, 8], 5.0, &mut rng);
        }
        let delta = WeightDelta::zeros(&cfg);
        assert_eq!(model.logits(&delta, Some(&f), &x).unwrap(), model.logits(&delta, Some(&g), &x).unwrap());
    }

    #[test]
    fn graph_logits_match_dense_forward() {
        let cfg = small();
        let (model, mut f) = init_model(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for b in &mut f.b {
            *b = Tensor::randn(&[8, 2], 0.5, &mut rng);
        }
        let ds = toy_data(&cfg, 5, 8);
        let delta = WeightDelta::zeros(&cfg);
        let tg = model.train_graph(&delta).unwrap();
        let params = f.to_params();
        let idx: Vec<usize> = (0..5).collect();
        let y = ds.one_hot(&idx);
        let tr = tg.graph.forward(&params, &[("x", &ds.x), ("y", &y)]).unwrap();
        let got = tg.graph.get(&tr, &params, tg.logits);
        let want = model.logits(&delta, Some(&f), &ds.x).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        let cfg = small();
        let (model, mut f) = init_model(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for b in &mut f.b {
            *b = Tensor::randn(&[8, 2], 0.5, &mut rng);
        }
        let ds = toy_data(&cfg, 6, 11);
        let delta = WeightDelta::zeros(&cfg);
        let tg = model.train_graph(&delta).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let params = f.to_params();
        let (_, grads) = tg.loss_and_grads(&params, &ds, &idx).unwrap();
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.numel() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let num = (tg.loss_and_grads(&plus, &ds, &idx).unwrap().0
                    - tg.loss_and_grads(&minus, &ds, &idx).unwrap().0)
                    / (2.0 * h);
                let a = grads[pi].as_ref().unwrap().data()[k];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {pi}[{k}]: analytic {a}, numeric {num}");
            }
        }
    }

    #[test]
    fn zero_epochs_give_zero_delta() {
        let cfg = small();
        let (model, f) = init_model(&cfg, 12).unwrap();
        let ds = toy_data(&cfg, 10, 13);
        let opts = LocalOpts { epochs: 0, lr: 1e-2, batch: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = local_train(&model, &WeightDelta::zeros(&cfg), &f, &ds, &opts, &mut rng).unwrap();
        assert_eq!(d, LoraFactors::zeros(&cfg));
        let empty = ds.subset(&[]);
        assert!(local_train(&model, &WeightDelta::zeros(&cfg), &f, &empty, &opts, &mut rng).is_err());
    }

    #[test]
    fn separable_shard_loss_decreases_monotonically() {
        let cfg = ModelConfig { d: 8, layers: 2, rank: 2, n_classes: 2 };
        let (model, f) = init_model(&cfg, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 40;
        let mut x = Tensor::randn(&[n, 8], 0.3, &mut rng);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (i, &c) in y.iter().enumerate() {
            let s = if c == 0 { 2.0 } else { -2.0 };
            let v = x.get2(i, 0);
            x.set2(i, 0, v + s);
        }
        let ds = Dataset { x, y, n_classes: 2 };
        let tg = model.train_graph(&WeightDelta::zeros(&cfg)).unwrap();
        let mut params = f.to_params();
        let mut adam = AdamState::new(&params, 1e-2).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (loss, grads) = tg.loss_and_grads(&params, &ds, &idx).unwrap();
            assert!(loss < last, "loss rose from {last} to {loss}");
            last = loss;
            adam.step(&mut params, &grads).unwrap();
        }
    }
}
