use fedcodec::codec::{Codec, CodecSpec};
use fedcodec::metrics::{db, noisy_channel_eval, snr, snr_from};
use fedcodec::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reference_snr_figures() {
    let hi = snr_from(14.29, 8.94e-4);
    assert!((hi / 1.60e4 - 1.0).abs() < 0.01, "{hi}");
    let lo = snr_from(14.29, 5.06e-12);
    assert!((lo / 2.82e12 - 1.0).abs() < 0.01, "{lo}");
    assert!((db(100.0) - 20.0).abs() < 1e-12);
}

#[test]
fn identity_channel_mse_is_the_noise_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[128, 256], 0.05, &mut rng)).collect();
    let codec = Codec::build(&CodecSpec::identity(128, 256), 0).unwrap();
    let sigmas = [5e-5, 5e-3, 5e-1];
    let rows = noisy_channel_eval(&codec, &xs, &sigmas, 3).unwrap();
    let power = xs.iter().map(|x| x.sum_sq()).sum::<f64>() / 4.0;
    for (r, s) in rows.iter().zip(sigmas) {
        assert!((r.identity_mse / (s * s) - 1.0).abs() < 0.02, "{r:?}");
        assert!((r.identity_snr / (power / (s * s)) - 1.0).abs() < 0.02, "{r:?}");
    }
}

proptest! {
    #[test]
    fn snr_matches_hand_sum(data in prop::collection::vec((-10f64..10.0, -10f64..10.0), 1..50)) {
        let (x, y): (Vec<f64>, Vec<f64>) = data.into_iter().unzip();
        let n = x.len();
        let power: f64 = x.iter().map(|v| v * v).sum();
        let mse = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
        let r = snr(&Tensor::new(&[n], x).unwrap(), &Tensor::new(&[n], y).unwrap()).unwrap();
        prop_assert!((r.power - power).abs() <= 1e-9 * (1.0 + power));
        prop_assert!((r.mse - mse).abs() <= 1e-9 * (1.0 + mse));
        if mse > 0.0 {
            prop_assert!((r.snr / (power / mse) - 1.0).abs() < 1e-9);
        }
    }
}
