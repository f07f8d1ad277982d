//! Synthetic classification task, task-data splits and Dirichlet
//! non-IID partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

/// Labelled samples: one `d`-vector per row of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        Dataset {
            x: Tensor::new(&[idx.len(), d], data).expect("subset shape"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// One-hot targets `[n, n_classes]` for the given rows.
    pub fn one_hot(&self, idx: &[usize]) -> Tensor {
        let c = self.n_classes;
        let mut t = Tensor::zeros(&[idx.len(), c]);
        for (row, &i) in idx.iter().enumerate() {
            t.data_mut()[row * c + self.y[i]] = 1.0;
        }
        t
    }

    pub fn class_histogram(&self, idx: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &i in idx {
            h[self.y[i]] += 1;
        }
        h
    }
}

/// Class-conditional Gaussian task: class means drawn once with scale
/// `class_sep`, samples scattered around them with scale `noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n_samples: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub class_sep: f64,
    pub noise: f64,
    /// Share of `n_samples` recorded for codec training (D₁); the rest
    /// (D₂) drives fine-tuning.
    pub capture_fraction: f64,
    pub dirichlet_alpha: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_samples: 4000,
            n_test: 1000,
            n_classes: 8,
            class_sep: 1.0,
            noise: 1.0,
            capture_fraction: 0.3,
            dirichlet_alpha: 0.5,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_samples == 0 || self.n_test == 0 {
            return bad("task: n_samples and n_test must be positive");
        }
        if self.n_classes < 2 {
            return bad("task: n_classes must be at least 2");
        }
        if !(self.capture_fraction > 0.0 && self.capture_fraction < 1.0) {
            return bad("task: capture_fraction must lie in (0, 1)");
        }
        if !(self.dirichlet_alpha > 0.0) {
            return bad("task: dirichlet_alpha must be positive");
        }
        if !(self.class_sep >= 0.0 && self.noise > 0.0) {
            return bad("task: class_sep must be >= 0 and noise > 0");
        }
        Ok(())
    }
}

/// The three task datasets of one experiment.
#[derive(Clone, Debug)]
pub struct TaskData {
    /// D₁, used by capture runs.
    pub capture: Dataset,
    /// D₂, used by fine-tuning runs.
    pub finetune: Dataset,
    /// IID held-out evaluation set.
    pub test: Dataset,
}

fn draw(spec: &TaskSpec, means: &Tensor, n: usize, rng: &mut impl Rng) -> Dataset {
    let d = means.cols();
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..spec.n_classes);
        y.push(c);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            data.push(means.get2(c, j) + spec.noise * z);
        }
    }
    Dataset { x: Tensor::new(&[n, d], data).expect("shape"), y, n_classes: spec.n_classes }
}

pub fn synthetic_task(spec: &TaskSpec, d: usize, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = seed::rng(seed, &[stream::DATA]);
    let means = Tensor::randn(&[spec.n_classes, d], spec.class_sep, &mut rng);
    let pool = draw(spec, &means, spec.n_samples, &mut rng);
    let test = draw(spec, &means, spec.n_test, &mut rng);

    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut seed::rng(seed, &[stream::SPLIT, 0]));
    let n_cap = ((pool.len() as f64) * spec.capture_fraction).round() as usize;
    let n_cap = n_cap.clamp(1, pool.len() - 1);
    let (cap, fine) = idx.split_at(n_cap);
    let (mut cap, mut fine) = (cap.to_vec(), fine.to_vec());
    cap.sort_unstable();
    fine.sort_unstable();
    Ok(TaskData { capture: pool.subset(&cap), finetune: pool.subset(&fine), test })
}

pub const PARTITION_RETRIES: usize = 100;

/// Splits sample indices across `n_clients` with per-class client
/// proportions drawn from Dirichlet(`alpha`).
///
/// For each class in ascending order: the class's indices (ascending) are
/// shuffled, `n_clients` Gamma(`alpha`, 1) variates are drawn and
/// normalised, and the shuffled indices are cut at
/// `round(cumsum(p) * n_class)`. If any client ends up empty the whole
/// draw is repeated with the same generator, up to `PARTITION_RETRIES`
/// times.
pub fn partition_dirichlet(
    labels: &[usize],
    n_classes: usize,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::Partition("empty dataset".into()));
    }
    if n_clients == 0 {
        return Err(Error::Partition("no clients".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if labels.len() < n_clients {
        return Err(Error::Partition(format!("{} samples cannot cover {n_clients} clients", labels.len())));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    let mut rng = seed::rng(seed, &[stream::PARTITION]);
    let by_class: Vec<Vec<usize>> =
        (0..n_classes).map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect()).collect();

    for _ in 0..PARTITION_RETRIES {
        let mut shards = vec![Vec::new(); n_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let g: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = g.iter().sum();
            let n = members.len();
            let mut acc = 0.0;
            let mut start = 0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk;
                let end = if k + 1 == n_clients {
                    n
                } else if total > 0.0 {
                    ((acc / total * n as f64).round() as usize).min(n)
                } else {
                    n * (k + 1) / n_clients
                };
                let end = end.max(start);
                shards[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(Error::Partition(format!("some client stayed empty after {PARTITION_RETRIES} draws")))
}

/// Poisson client sampling: each client joins independently with
/// probability `alpha`. An empty draw is repeated once; if still empty a
/// single client is chosen uniformly.
pub fn sample_clients(n_clients: usize, alpha: f64, seed: u64, round: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed, &[stream::SAMPLE, round]);
    for _ in 0..2 {
        let chosen: Vec<usize> = (0..n_clients).filter(|_| rng.random::<f64>() < alpha).collect();
        if !chosen.is_empty() {
            return chosen;
        }
    }
    vec![rng.random_range(0..n_clients)]
}
