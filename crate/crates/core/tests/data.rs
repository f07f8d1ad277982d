use std::collections::HashSet;

use fedcodec::data::{partition_dirichlet, sample_clients};
use fedcodec::seed::{self, stream};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + i / 3) % classes).collect()
}

/// Per-client class counts from a second implementation of the same
/// sampler: proportions first, then boundaries as counts.
fn reference_histograms(labels: &[usize], classes: usize, n: usize, alpha: f64, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed, &[stream::PARTITION]);
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    loop {
        let mut hist = vec![vec![0usize; classes]; n];
        for c in 0..classes {
            let mut members: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
            members.shuffle(&mut rng);
            let w: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = w.iter().sum();
            let m = members.len();
            let mut prev = 0usize;
            let mut cum = 0.0;
            for k in 0..n {
                cum += w[k];
                let cut = if k == n - 1 { m } else { ((cum / total) * m as f64).round().min(m as f64) as usize };
                let cut = cut.max(prev);
                hist[k][c] = cut - prev;
                prev = cut;
            }
        }
        if hist.iter().all(|h| h.iter().sum::<usize>() > 0) {
            return hist;
        }
    }
}

#[test]
fn dirichlet_histograms_match_reference_sampler() {
    let classes = 8;
    let y = labels(4000, classes);
    for seed in [0u64, 5, 17] {
        let shards = partition_dirichlet(&y, classes, 10, 0.5, seed).unwrap();
        let want = reference_histograms(&y, classes, 10, 0.5, seed);
        for (k, shard) in shards.iter().enumerate() {
            let mut h = vec![0usize; classes];
            for &i in shard {
                h[y[i]] += 1;
            }
            assert_eq!(h, want[k], "seed {seed}, client {k}");
        }
    }
}

#[test]
fn huge_concentration_gives_near_uniform_shards() {
    let classes = 4;
    let y = labels(10_000, classes);
    let shards = partition_dirichlet(&y, classes, 10, 1e6, 3).unwrap();
    for c in 0..classes {
        let n_c = y.iter().filter(|&&v| v == c).count() as f64;
        for s in &shards {
            let got = s.iter().filter(|&&i| y[i] == c).count() as f64;
            assert!((got - n_c / 10.0).abs() <= 0.1 * n_c / 10.0, "class {c}: {got} vs {}", n_c / 10.0);
        }
    }
}

#[test]
fn tiny_alpha_exhausts_retries() {
    // One sample per client and a spiky Dirichlet: some client stays empty.
    let y = vec![0usize; 10];
    assert!(partition_dirichlet(&y, 1, 10, 1e-3, 0).is_err());
}

#[test]
fn poisson_sampling_statistics() {
    let rounds = 10_000u64;
    let total: usize = (0..rounds).map(|t| sample_clients(100, 0.05, 42, t).len()).sum();
    let mean = total as f64 / rounds as f64;
    assert!((mean - 5.0).abs() < 0.05 * 5.0, "mean subset size {mean}");
    // Every client is picked about equally often.
    let mut counts = vec![0usize; 100];
    for t in 0..rounds {
        for c in sample_clients(100, 0.05, 42, t) {
            counts[c] += 1;
        }
    }
    let expected = rounds as f64 * 0.05;
    assert!(counts.iter().all(|&c| (c as f64 - expected).abs() < 5.0 * expected.sqrt()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_is_exhaustive_disjoint_and_deterministic(
        n in 40usize..400, classes in 1usize..6, clients in 1usize..8,
        alpha in 0.3f64..20.0, seed in any::<u64>(),
    ) {
        let y = labels(n, classes);
        let Ok(shards) = partition_dirichlet(&y, classes, clients, alpha, seed) else {
            return Ok(());
        };
        prop_assert_eq!(shards.len(), clients);
        let mut seen = HashSet::new();
        for s in &shards {
            prop_assert!(!s.is_empty());
            for &i in s {
                prop_assert!(seen.insert(i));
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(&shards, &partition_dirichlet(&y, classes, clients, alpha, seed).unwrap());
    }

    #[test]
    fn sampler_is_deterministic_sorted_and_nonempty(n in 1usize..200, alpha in 0.001f64..=1.0, seed in any::<u64>(), round in 0u64..1000) {
        let s = sample_clients(n, alpha, seed, round);
        prop_assert!(!s.is_empty());
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&c| c < n));
        prop_assert_eq!(s, sample_clients(n, alpha, seed, round));
    }
}
