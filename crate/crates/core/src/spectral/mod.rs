//! Discrete Fourier transforms and the low-frequency retention filter.
//!
//! Bins are ranked by their centred frequency `f(q) = q` for `q ≤ d/2` and
//! `q − d` otherwise. A filter that keeps `k` bins keeps the `k` smallest
//! `|f|`, taking `+f` before `−f`. Odd `k` therefore yields a
//! conjugate-symmetric mask; even `k` keeps one unpaired positive frequency
//! and the filtered signal is the real part of the inverse transform.

mod fft;
mod filter;
mod image;
mod mask;

pub use fft::{dft_1d, idft_1d, transform_in_place, ComplexSpectrum, RealSignal};
pub use filter::{ffb_apply, ffb_on_tape, FourierFilter};
pub use image::{dft_2d, dft_lowpass_2d, read_pgm, write_pgm, LowpassImage};
pub use mask::{bins_by_frequency, build_lowpass_mask, centered_frequency, SpectralFilterSpec};

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::DenseArray;

    fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let mut re = vec![0.0; d];
        let mut im = vec![0.0; d];
        for q in 0..d {
            for (p, &v) in x.iter().enumerate() {
                let angle = -2.0 * PI * (p as f64) * (q as f64) / d as f64;
                re[q] += v * angle.cos();
                im[q] += v * angle.sin();
            }
        }
        (re, im)
    }

    fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> DenseArray {
        DenseArray::uniform(&[b, d], 1.0, rng)
    }

    #[test]
    fn fft_matches_direct_sum_up_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=64 {
            for _ in 0..10 {
                let x = random_rows(&mut rng, 1, d).into_data();
                let s = dft_1d(&x).unwrap();
                let (re, im) = naive_dft(&x);
                for q in 0..d {
                    assert!((s.re[q] - re[q]).abs() < 1e-9, "d={d} q={q}");
                    assert!((s.im[q] - im[q]).abs() < 1e-9, "d={d} q={q}");
                }
            }
        }
    }

    #[test]
    fn round_trip_and_conjugate_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for d in (1..=64).chain([512]) {
            let x = random_rows(&mut rng, 1, d).into_data();
            let s = dft_1d(&x).unwrap();
            assert!(s.conjugate_asymmetry() < 1e-9);
            let back = idft_1d(&s);
            for (a, b) in back.values.iter().zip(&x) {
                assert!((a - b).abs() < 1e-9, "d={d}");
            }
            assert!(back.max_imag_residue < 1e-9);
        }
    }

    #[test]
    fn unpaired_bin_is_halved() {
        // d = 8, k = 2 keeps f = 0 and f = +1 but not f = -1, so the real
        // part carries half of the ±1 pair: applying twice quarters it.
        let spec = build_lowpass_mask(8, 2).unwrap();
        let x = DenseArray::from_fn(&[1, 8], |p| (2.0 * PI * p as f64 / 8.0).cos());
        let once = ffb_apply(&x, &spec).unwrap();
        let twice = ffb_apply(&once, &spec).unwrap();
        for p in 0..8 {
            assert!((once.data()[p] - 0.5 * x.data()[p]).abs() < 1e-12);
            assert!((twice.data()[p] - 0.25 * x.data()[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_refinement_for_odd_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 32;
        for _ in 0..20 {
            let x = random_rows(&mut rng, 1, d);
            let mut prev = f64::INFINITY;
            for k in (1..=d).step_by(2) {
                let spec = build_lowpass_mask(d, k).unwrap();
                let y = ffb_apply(&x, &spec).unwrap();
                let resid = x.zip_map(&y, |a, b| a - b).unwrap().norm();
                assert!(resid <= prev + 1e-9, "k={k}");
                prev = resid;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn filter_is_an_idempotent_contraction(seed in any::<u64>(), d in 1usize..48, kf in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 1 + ((kf * d as f64) as usize).min(d - 1);
            let spec = build_lowpass_mask(d, k).unwrap();
            let x = random_rows(&mut rng, 2, d);
            let once = ffb_apply(&x, &spec).unwrap();
            let twice = ffb_apply(&once, &spec).unwrap();
            if spec.is_conjugate_symmetric() {
                prop_assert!(once.max_abs_diff(&twice) < 1e-9);
            }
            for i in 0..2 {
                let n_in: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                let n_out: f64 = once.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(n_out <= n_in + 1e-9);
            }
        }

        #[test]
        fn filter_is_linear(seed in any::<u64>(), d in 1usize..40, k_raw in 1usize..40, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = k_raw.min(d);
            let spec = build_lowpass_mask(d, k).unwrap();
            let x = random_rows(&mut rng, 1, d);
            let y = random_rows(&mut rng, 1, d);
            let combo = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
            let lhs = ffb_apply(&combo, &spec).unwrap();
            let fx = ffb_apply(&x, &spec).unwrap();
            let fy = ffb_apply(&y, &spec).unwrap();
            let rhs = fx.zip_map(&fy, |a, b| alpha * a + beta * b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }
    }
}
