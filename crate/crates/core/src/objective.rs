//! Similarity head, the two losses and the decision rule.

use crate::autodiff::{DenseArray, Tape, Var};
use crate::error::{dim_err, param_err, Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;
const NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Softmax temperature τ.
    pub tau: f64,
    /// Weight Λ of the alignment term.
    pub rpa_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            rpa_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(param_err!("temperature must be positive, got {}", self.tau));
        }
        if !(self.rpa_weight >= 0.0 && self.rpa_weight.is_finite()) {
            return Err(param_err!("alignment weight must be non-negative, got {}", self.rpa_weight));
        }
        Ok(())
    }
}

fn check_unit_rows(a: &DenseArray, what: &str) -> Result<()> {
    let (m, _) = a.as_matrix_dims();
    for i in 0..m {
        let n = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!("{what} row {i} has norm {n}")));
        }
    }
    Ok(())
}

/// `softmax(⟨x_b, t_{b,c}⟩ / τ)` over classes.
///
/// `text` holds `B·C` rows, sample-major, and may be shaped `B×C×d`.
pub fn class_posterior(tape: &mut Tape, image: Var, text: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(param_err!("temperature must be positive, got {tau}"));
    }
    let (b, d) = tape.value(image).as_matrix_dims();
    let (bc, dt) = tape.value(text).as_matrix_dims();
    if d != dt || b == 0 || bc % b != 0 || bc == 0 {
        return Err(dim_err!("{b}×{d} image features against {bc}×{dt} text features"));
    }
    check_unit_rows(tape.value(image), "image feature")?;
    check_unit_rows(tape.value(text), "text feature")?;
    let c = bc / b;
    let text = tape.reshape(text, &[bc, d])?;
    let index: Vec<usize> = (0..bc).map(|i| i / c).collect();
    let rep = tape.gather_rows(image, &index)?;
    let prod = tape.mul(rep, text)?;
    let sims = tape.sum_rows(prod)?;
    let sims = tape.reshape(sims, &[b, c])?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    tape.softmax_rows(logits)
}

/// Mean `−log p(label)` with probabilities clamped at `1e-12`.
pub fn loss_ce(tape: &mut Tape, posterior: Var, labels: &[usize]) -> Result<Var> {
    let p = tape.value(posterior);
    for i in 0..p.rows() {
        let s: f64 = p.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("posterior row {i} sums to {s}")));
        }
    }
    tape.nll(posterior, labels, PROB_CLAMP)
}

/// `(1/Z) Σ_z (1/N) Σ_i ‖c_i − r_{z,i}‖²` for `learned` `N×d` and `reference` `Z×N×d`.
pub fn loss_rpa(tape: &mut Tape, learned: Var, reference: &DenseArray) -> Result<Var> {
    let (n, d) = tape.value(learned).as_matrix_dims();
    let shape = reference.shape();
    if shape.len() != 3 || shape[1] != n || shape[2] != d {
        return Err(dim_err!("reference {shape:?} for learned {n}×{d}"));
    }
    let z = shape[0];
    let flat = tape.constant(reference.clone().reshape(vec![z * n, d])?)?;
    let index: Vec<usize> = (0..z * n).map(|i| i % n).collect();
    let rep = tape.gather_rows(learned, &index)?;
    let diff = tape.sub(rep, flat)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (z * n) as f64)
}

/// `L_ce + Λ·L_rpa`.
pub fn loss_total(tape: &mut Tape, ce: Var, rpa: Var, rpa_weight: f64) -> Result<Var> {
    let weighted = tape.scale(rpa, rpa_weight)?;
    tape.add(ce, weighted)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn predict(row: &[f64]) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::Contract("cannot predict from an empty row".into()));
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn posterior_of(image: Vec<Vec<f64>>, text: Vec<Vec<f64>>, tau: f64) -> Result<DenseArray> {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::from_rows(&image)?)?;
        let y = t.constant(DenseArray::from_rows(&text)?)?;
        let p = class_posterior(&mut t, x, y, tau)?;
        Ok(t.value(p).clone())
    }

    fn softmax(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    #[test]
    fn posterior_examples() {
        let x = vec![1.0, 0.0];
        let p = posterior_of(vec![x.clone()], vec![unit(&[1.0, 1.0]), unit(&[1.0, -1.0])], 0.01).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let p = posterior_of(vec![x.clone()], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        assert!((p.data()[0] - 0.7310586).abs() < 1e-7);
        assert!((p.data()[1] - 0.2689414).abs() < 1e-7);

        let second = vec![0.9, (1.0f64 - 0.81).sqrt()];
        let p = posterior_of(vec![x], vec![vec![1.0, 0.0], second], 0.01).unwrap();
        assert!(p.data()[0] > 0.9999);
        assert!((p.data()[0] - softmax(&[100.0, 90.0])[0]).abs() < 1e-12);
    }

    #[test]
    fn posterior_requires_unit_rows() {
        let e = posterior_of(vec![vec![2.0, 0.0]], vec![vec![1.0, 0.0]], 1.0);
        assert!(matches!(e, Err(Error::Contract(_))));
        let e = posterior_of(vec![vec![1.0, 0.0]], vec![vec![0.5, 0.0]], 1.0);
        assert!(matches!(e, Err(Error::Contract(_))));
        assert!(posterior_of(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]], 0.0).is_err());
    }

    fn ce_of(p: Vec<Vec<f64>>, labels: &[usize]) -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(DenseArray::from_rows(&p)?)?;
        let l = loss_ce(&mut t, v, labels)?;
        Ok(t.value(l).item())
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce_of(vec![vec![0.0, 1.0, 0.0]], &[1]).unwrap(), 0.0);
        let u = ce_of(vec![vec![1.0 / 16.0; 16]], &[3]).unwrap();
        assert!((u - 16f64.ln()).abs() < 1e-9);
        let v = ce_of(vec![vec![0.7310586, 0.2689414]], &[0]).unwrap();
        assert!((v - 0.3132617).abs() < 1e-7);
        assert!(matches!(ce_of(vec![vec![0.5, 0.5]], &[2]), Err(Error::Index(_))));
        assert!(matches!(ce_of(vec![vec![0.5, 0.6]], &[0]), Err(Error::Contract(_))));
        // Clamped rather than infinite.
        assert!((ce_of(vec![vec![1.0, 0.0]], &[1]).unwrap() - (-PROB_CLAMP.ln())).abs() < 1e-9);
    }

    fn rpa_of(learned: &DenseArray, reference: &DenseArray) -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(learned.clone())?;
        let l = loss_rpa(&mut t, v, reference)?;
        Ok(t.value(l).item())
    }

    /// Explicit triple sum.
    fn rpa_oracle(learned: &DenseArray, reference: &DenseArray) -> f64 {
        let (z, n, d) = (reference.shape()[0], reference.shape()[1], reference.shape()[2]);
        let mut total = 0.0;
        for zi in 0..z {
            let mut inner = 0.0;
            for i in 0..n {
                for j in 0..d {
                    let diff = learned.get(i, j) - reference.data()[(zi * n + i) * d + j];
                    inner += diff * diff;
                }
            }
            total += inner / n as f64;
        }
        total / z as f64
    }

    #[test]
    fn rpa_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let learned = DenseArray::uniform(&[3, 4], 1.0, &mut rng);
        let same = DenseArray::new(vec![2, 3, 4], [learned.data(), learned.data()].concat()).unwrap();
        assert_eq!(rpa_of(&learned, &same).unwrap(), 0.0);

        let one = DenseArray::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let zero = DenseArray::zeros(&[1, 1, 2]);
        assert_eq!(rpa_of(&one, &zero).unwrap(), 2.0);

        let learned = DenseArray::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let reference = DenseArray::new(vec![2, 2, 2], vec![0.0, 1.0, 1.0, 1.0, -0.5, 0.5, 3.0, -2.0]).unwrap();
        assert!((rpa_of(&learned, &reference).unwrap() - rpa_oracle(&learned, &reference)).abs() < 1e-15);
        assert!(matches!(rpa_of(&learned, &DenseArray::zeros(&[2, 3, 2])), Err(Error::Dimension(_))));
    }

    fn total_of(ce: f64, rpa: f64, w: f64) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(DenseArray::scalar(ce)).unwrap();
        let b = t.constant(DenseArray::scalar(rpa)).unwrap();
        let l = loss_total(&mut t, a, b, w).unwrap();
        t.value(l).item()
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_of(1.7, 3.0, 0.0), 1.7);
        assert_eq!(total_of(1.0, 2.0, 0.5), 2.0);
        assert_eq!(total_of(0.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 0.7, 0.2]).unwrap(), 1);
        assert_eq!(predict(&[0.3]).unwrap(), 0);
        assert_eq!(predict(&[0.5, 0.5]).unwrap(), 0);
        assert!(matches!(predict(&[]), Err(Error::Contract(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn posterior_rows_are_distributions(seed in any::<u64>(), b in 1usize..4, c in 1usize..6, tau in 0.05f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
                (0..n).map(|_| unit(DenseArray::uniform(&[5], 1.0, rng).data())).collect()
            };
            let p = posterior_of(mk(&mut rng, b), mk(&mut rng, b * c), tau).unwrap();
            for i in 0..b {
                let s: f64 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(p.row(i).iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }

        #[test]
        fn predict_is_invariant_under_monotone_maps(row in prop::collection::vec(-5.0f64..5.0, 1..10), a in 0.1f64..3.0, b in -2.0f64..2.0) {
            let k = predict(&row).unwrap();
            let exp: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let aff: Vec<f64> = row.iter().map(|v| a * v + b).collect();
            prop_assert_eq!(predict(&exp).unwrap(), k);
            prop_assert_eq!(predict(&aff).unwrap(), k);
        }

        #[test]
        fn ce_is_non_negative(seed in any::<u64>(), c in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = DenseArray::uniform(&[c], 1.0, &mut rng).map(|v| v.abs() + 1e-3);
            let s = raw.sum();
            let p: Vec<f64> = raw.data().iter().map(|v| v / s).collect();
            prop_assert!(ce_of(vec![p], &[c - 1]).unwrap() >= 0.0);
            let uniform = ce_of(vec![vec![1.0 / c as f64; c]], &[0]).unwrap();
            prop_assert!((uniform - (c as f64).ln()).abs() < 1e-9);
        }

        #[test]
        fn rpa_scales_quadratically(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reference = DenseArray::uniform(&[2, 3, 4], 1.0, &mut rng);
            let offset = DenseArray::uniform(&[3, 4], 1.0, &mut rng);
            let base: Vec<f64> = (0..12).map(|i| reference.data()[i] + offset.data()[i]).collect();
            let flipped: Vec<f64> = (0..12).map(|i| reference.data()[i] - offset.data()[i]).collect();
            let scaled: Vec<f64> = (0..12).map(|i| reference.data()[i] + alpha * offset.data()[i]).collect();
            let one = DenseArray::new(vec![1, 3, 4], reference.data()[..12].to_vec()).unwrap();
            let l = |v: Vec<f64>| rpa_of(&DenseArray::new(vec![3, 4], v).unwrap(), &one).unwrap();
            let (lb, lf, ls) = (l(base), l(flipped), l(scaled));
            prop_assert!(lb >= 0.0);
            prop_assert!((lb - lf).abs() < 1e-12);
            prop_assert!((ls - alpha * alpha * lb).abs() < 1e-9);
        }
    }
}
