#![allow(dead_code)]

pub mod erf;
pub mod grad;

use fedcodec::fedsim::{FedConfig, Setup};
use fedcodec::lora::{self, WeightDelta};
use fedcodec::seed::{self, stream};
use fedcodec::{data, Tensor};

/// Plain FedAvg-LoRA with the server's sum rule, written without packing,
/// encoding, serialization or the aggregation helpers.
pub fn reference_loop(setup: &Setup, cfg: &FedConfig) -> Vec<Vec<f64>> {
    let mcfg = setup.model.config;
    let (d, r) = (mcfg.d, mcfg.rank);
    let n_slots = mcfg.n_slots();
    let mut global: Vec<Vec<f64>> = vec![vec![0.0; d * d]; n_slots];
    for round in 0..cfg.rounds {
        let view = WeightDelta {
            d: global
                .iter()
                .map(|g| Tensor::new(&[d, d], g.iter().map(|&v| v as f32 as f64).collect()).unwrap())
                .collect(),
        };
        let selected = data::sample_clients(cfg.clients, cfg.fraction, setup.seed, round as u64);
        let k = selected.len() as f64;
        let mut a_sum = vec![vec![0.0; r * d]; n_slots];
        let mut b_sum = vec![vec![0.0; d * r]; n_slots];
        for &c in &selected {
            let mut rng = seed::rng(setup.seed, &[stream::LOCAL, round as u64, c as u64]);
            let inc =
                lora::local_train(&setup.model, &view, &setup.init, &setup.finetune_shards[c], &cfg.local, &mut rng)
                    .unwrap();
            for s in 0..n_slots {
                for (acc, &v) in a_sum[s].iter_mut().zip(inc.a[s].data()) {
                    *acc += v as f32 as f64;
                }
                for (acc, &v) in b_sum[s].iter_mut().zip(inc.b[s].data()) {
                    *acc += v as f32 as f64;
                }
            }
        }
        for s in 0..n_slots {
            let a0 = setup.init.a[s].data();
            let a: Vec<f64> = a_sum[s].iter().zip(a0).map(|(x, y)| x + k * y).collect();
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for q in 0..r {
                        acc += b_sum[s][i * r + q] * a[q * d + j];
                    }
                    global[s][i * d + j] += cfg.eta * acc;
                }
            }
        }
    }
    global
}
