use fedcodec::data::TaskSpec;
use fedcodec::fedsim::Setup;
use fedcodec::graph::{Graph, NodeId};
use fedcodec::lora::{ModelConfig, WeightDelta};
use fedcodec::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Loss `sum(out * w)` for a fixed random `w`, so every output element
/// contributes with a distinct weight.
fn weighted_loss(g: &mut Graph, out: NodeId, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let w = g.constant(Tensor::randn(shape, 1.0, rng));
    let m = g.mul(out, w);
    g.sum(m)
}

/// Central finite differences against the analytic gradient for every
/// parameter element. Returns the worst relative error.
pub fn check(g: &Graph, loss: NodeId, params: &[Tensor], inputs: &[(&str, &Tensor)]) -> f64 {
    let trace = g.forward(params, inputs).unwrap();
    let grads = g.backward(&trace, params, loss).unwrap();
    let eval = |ps: &[Tensor]| {
        let tr = g.forward(ps, inputs).unwrap();
        g.get(&tr, ps, loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads[pi].as_ref().expect("gradient present");
        assert_eq!(analytic.shape(), p.shape());
        for k in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[k] += STEP;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[k] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Random values kept away from zero so ReLU kinks are not straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul_and_transpose() -> f64 {
    let mut r = rng(1);
    let mut g = Graph::new();
    let a = g.param(0);
    let b = g.param(1);
    let bt = g.transpose(b);
    let y = g.matmul(a, bt);
    let l = weighted_loss(&mut g, y, &[3, 5], &mut r);
    let params = vec![Tensor::randn(&[3, 4], 1.0, &mut r), Tensor::randn(&[5, 4], 1.0, &mut r)];
    check(&g, l, &params, &[])
}

pub fn add_mul_scale() -> f64 {
    let mut r = rng(2);
    let mut g = Graph::new();
    let a = g.param(0);
    let b = g.param(1);
    let s = g.add(a, b);
    let m = g.mul(s, a);
    let y = g.scale(m, -1.7);
    let l = weighted_loss(&mut g, y, &[4, 4], &mut r);
    let params = vec![Tensor::randn(&[4, 4], 1.0, &mut r), Tensor::randn(&[4, 4], 1.0, &mut r)];
    check(&g, l, &params, &[])
}

pub fn mul_col_and_row_sum() -> f64 {
    let mut r = rng(3);
    let mut g = Graph::new();
    let a = g.param(0);
    let b = g.param(1);
    let c = g.row_sum(b);
    let y = g.mul_col(a, c);
    let l = weighted_loss(&mut g, y, &[5, 3], &mut r);
    let params = vec![Tensor::randn(&[5, 3], 1.0, &mut r), Tensor::randn(&[5, 6], 1.0, &mut r)];
    check(&g, l, &params, &[])
}

pub fn relu_and_sigmoid() -> f64 {
    let mut r = rng(4);
    let mut g = Graph::new();
    let a = g.param(0);
    let h = g.relu(a);
    let y = g.sigmoid(h);
    let z = g.sigmoid(a);
    let s = g.add(y, z);
    let l = weighted_loss(&mut g, s, &[6, 6], &mut r);
    let params = vec![away_from_zero(&[6, 6], &mut r)];
    check(&g, l, &params, &[])
}

pub fn sum_mean_mse() -> f64 {
    let mut r = rng(5);
    let mut g = Graph::new();
    let a = g.param(0);
    let b = g.param(1);
    let e = g.mse(a, b);
    let m = g.mean(a);
    let mm = g.mul(m, m);
    let l = g.add(e, mm);
    let params = vec![Tensor::randn(&[7, 3], 1.0, &mut r), Tensor::randn(&[7, 3], 1.0, &mut r)];
    check(&g, l, &params, &[])
}

pub fn softmax_cross_entropy() -> f64 {
    let mut r = rng(6);
    let mut g = Graph::new();
    let z = g.param(0);
    let t = g.param(1);
    let l = g.softmax_cross_entropy(z, t);
    // Non-normalised targets exercise the general gradient.
    let targets = Tensor::randn(&[4, 5], 1.0, &mut r).map(|v| v.abs());
    let params = vec![Tensor::randn(&[4, 5], 2.0, &mut r), targets];
    check(&g, l, &params, &[])
}

pub fn conv2d_strided_with_bias() -> f64 {
    let mut r = rng(7);
    let mut g = Graph::new();
    let x = g.input("x", &[2, 6, 4]);
    let w = g.param(0);
    let b = g.param(1);
    let y = g.conv2d(x, w, Some(b), (2, 2), (1, 1));
    let l = weighted_loss(&mut g, y, &[2, 3, 3, 2], &mut r);
    let params = vec![Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r), Tensor::randn(&[3], 1.0, &mut r)];
    let xin = Tensor::randn(&[2, 2, 6, 4], 1.0, &mut r);
    check(&g, l, &params, &[("x", &xin)])
}

pub fn conv2d_input_gradient() -> f64 {
    let mut r = rng(8);
    let mut g = Graph::new();
    let x = g.param(0);
    let w = g.param(1);
    let y = g.conv2d(x, w, None, (1, 1), (3, 3));
    let l = weighted_loss(&mut g, y, &[1, 2, 4, 4], &mut r);
    let params = vec![Tensor::randn(&[1, 1, 4, 4], 1.0, &mut r), Tensor::randn(&[2, 1, 7, 7], 1.0, &mut r)];
    check(&g, l, &params, &[])
}

pub fn conv_transpose2d_strided() -> f64 {
    let mut r = rng(9);
    let mut g = Graph::new();
    let x = g.param(0);
    let w = g.param(1);
    let b = g.param(2);
    let y = g.conv_transpose2d(x, w, Some(b), (2, 2), (1, 1), (1, 1));
    let l = weighted_loss(&mut g, y, &[2, 3, 6, 4], &mut r);
    let params = vec![
        Tensor::randn(&[2, 2, 3, 2], 1.0, &mut r),
        Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r),
        Tensor::randn(&[3], 1.0, &mut r),
    ];
    check(&g, l, &params, &[])
}

pub fn conv1d_and_transpose1d() -> f64 {
    let mut r = rng(10);
    let mut g = Graph::new();
    let x = g.param(0);
    let w1 = g.param(1);
    let b1 = g.param(2);
    let w2 = g.param(3);
    let h = g.conv1d(x, w1, Some(b1), 2, 1);
    let y = g.conv_transpose1d(h, w2, None, 2, 1, 1);
    let l = weighted_loss(&mut g, y, &[3, 1, 8], &mut r);
    let params = vec![
        Tensor::randn(&[3, 1, 8], 1.0, &mut r),
        Tensor::randn(&[2, 1, 3], 1.0, &mut r),
        Tensor::randn(&[2], 1.0, &mut r),
        Tensor::randn(&[2, 1, 3], 1.0, &mut r),
    ];
    check(&g, l, &params, &[])
}

pub fn residual_block() -> f64 {
    let mut r = rng(11);
    let mut g = Graph::new();
    let x = g.param(0);
    let w1 = g.param(1);
    let w2 = g.param(2);
    let h = g.conv2d(x, w1, None, (1, 1), (1, 1));
    let h = g.relu(h);
    let h = g.conv2d(h, w2, None, (1, 1), (1, 1));
    let y = g.add(x, h);
    let l = weighted_loss(&mut g, y, &[1, 2, 4, 4], &mut r);
    let params = vec![
        away_from_zero(&[1, 2, 4, 4], &mut r),
        Tensor::randn(&[2, 2, 3, 3], 0.5, &mut r),
        Tensor::randn(&[2, 2, 3, 3], 0.5, &mut r),
    ];
    check(&g, l, &params, &[])
}

pub fn shared_parameter_accumulates() -> f64 {
    let mut r = rng(12);
    let mut g = Graph::new();
    let a = g.param(0);
    let a2 = g.param(0);
    let y = g.matmul(a, a2);
    let l = weighted_loss(&mut g, y, &[3, 3], &mut r);
    let params = vec![Tensor::randn(&[3, 3], 1.0, &mut r)];
    check(&g, l, &params, &[])
}

/// End-to-end cross-entropy of a small adapted model with respect to all
/// LoRA factors, with `B` moved off zero so the `A` gradients are live.
pub fn toy_model_loss() -> f64 {
    let m = ModelConfig { d: 8, layers: 2, rank: 2, n_classes: 3 };
    let t = TaskSpec { n_samples: 300, n_test: 60, n_classes: 3, ..TaskSpec::default() };
    let setup = Setup::new(&m, &t, 2, 3).unwrap();
    let mut r = rng(13);
    let delta = WeightDelta { d: (0..m.n_slots()).map(|_| Tensor::randn(&[m.d, m.d], 0.1, &mut r)).collect() };
    let mut factors = setup.init.clone();
    for b in &mut factors.b {
        *b = Tensor::randn(b.shape(), 0.3, &mut r);
    }
    let tg = setup.model.train_graph(&delta).unwrap();
    let ds = &setup.finetune_shards[0];
    let idx: Vec<usize> = (0..ds.len().min(16)).collect();
    let x = ds.subset(&idx).x;
    let y = ds.one_hot(&idx);
    check(&tg.graph, tg.loss, &factors.to_params(), &[("x", &x), ("y", &y)])
}

pub const CASES: &[(&str, fn() -> f64)] = &[
    ("matmul_and_transpose", matmul_and_transpose),
    ("add_mul_scale", add_mul_scale),
    ("mul_col_and_row_sum", mul_col_and_row_sum),
    ("relu_and_sigmoid", relu_and_sigmoid),
    ("sum_mean_mse", sum_mean_mse),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("conv2d_strided_with_bias", conv2d_strided_with_bias),
    ("conv2d_input_gradient", conv2d_input_gradient),
    ("conv_transpose2d_strided", conv_transpose2d_strided),
    ("conv1d_and_transpose1d", conv1d_and_transpose1d),
    ("residual_block", residual_block),
    ("shared_parameter_accumulates", shared_parameter_accumulates),
    ("toy_model_loss", toy_model_loss),
];
