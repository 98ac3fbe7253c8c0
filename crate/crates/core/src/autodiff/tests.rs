use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn mat(rows: &[&[f64]]) -> DenseArray {
    DenseArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn naive_matmul(a: &DenseArray, b: &DenseArray) -> Vec<f64> {
    let (m, n) = a.as_matrix_dims();
    let p = b.cols();
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a.get(i, k) * b.get(k, j);
            }
            out[i * p + j] = acc;
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let i2 = t.constant(DenseArray::identity(2)).unwrap();
    let m = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let out = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(mat(&[&[1.0, 2.0]])).unwrap();
    let b = t.constant(mat(&[&[3.0], &[4.0]])).unwrap();
    let dot = t.matmul(a, b).unwrap();
    assert_eq!(t.value(dot).data(), &[11.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = DenseArray::uniform(&[3, 4], 1.0, &mut rng);
    let b = DenseArray::uniform(&[4, 2], 1.0, &mut rng);
    let expected = naive_matmul(&a, &b);
    let (av, bv) = (t.constant(a).unwrap(), t.constant(b).unwrap());
    let out = t.matmul(av, bv).unwrap();
    for (x, y) in t.value(out).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(DenseArray::zeros(&[2, 3])).unwrap();
    let b = t.constant(DenseArray::zeros(&[2, 3])).unwrap();
    assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let a = t.constant(DenseArray::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let ones = t.constant(DenseArray::ones(&[3])).unwrap();
    let out = t.mul(a, ones).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0]);

    let z = t.constant(DenseArray::zeros(&[2])).unwrap();
    let out = t.safe_div(z, z).unwrap();
    assert_eq!(t.value(out).data(), &[0.0, 0.0]);

    let one = t.constant(DenseArray::vector(vec![1.0]).unwrap()).unwrap();
    let two = t.constant(DenseArray::vector(vec![2.0]).unwrap()).unwrap();
    let out = t.safe_div(one, two).unwrap();
    let expected = 1.0 / (2.0 + 1e-8);
    assert!((t.value(out).item() - expected).abs() < 1e-15);
    assert!((t.value(out).item() - 0.4999999975).abs() < 1e-12);

    let bad = t.constant(DenseArray::zeros(&[3])).unwrap();
    assert!(matches!(t.add(a, z), Err(Error::Dimension(_))));
    assert!(t.add(a, bad).is_ok());
}

#[test]
fn activation_examples() {
    let mut t = Tape::new();
    let x = t.constant(DenseArray::vector(vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

    let x = t.constant(DenseArray::vector(vec![0.0, 1.0]).unwrap()).unwrap();
    let g = t.gelu(x).unwrap();
    assert_eq!(t.value(g).data()[0], 0.0);
    // Φ(1) from the erfc series in the standard normal tables.
    assert!((t.value(g).data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    for (input, expected) in [
        ([0.0, 0.0], [0.5, 0.5]),
        ([1000.0, 1000.0], [0.5, 0.5]),
        ([1.0, 0.0], [1f64.exp() / (1f64.exp() + 1.0), 1.0 / (1f64.exp() + 1.0)]),
    ] {
        let x = t.constant(mat(&[&input])).unwrap();
        let s = t.softmax_rows(x).unwrap();
        for (a, b) in t.value(s).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let x = t.constant(mat(&[&[1.0, 0.0]])).unwrap();
    let s = t.softmax_rows(x).unwrap();
    assert!((t.value(s).data()[0] - 0.7310586).abs() < 1e-7);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let w = t.param("w", DenseArray::vector(vec![0.3, -2.0, 5.0]).unwrap()).unwrap();
    let s = t.sum(w).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g["w"].data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let w = t.param("w", DenseArray::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let sq = t.mul(w, w).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g["w"].data(), &[2.0, 4.0]);
}

#[test]
fn backward_contract_and_state_errors() {
    let mut t = Tape::new();
    let w = t.param("w", DenseArray::ones(&[2])).unwrap();
    assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    let s = t.sum(w).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::State(_))));
    assert!(matches!(t.sum(w), Err(Error::State(_))));
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mut t = Tape::new();
    let w = t.param("w", DenseArray::ones(&[2])).unwrap();
    t.param("unused", DenseArray::ones(&[3])).unwrap();
    let s = t.sum(w).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g["unused"].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_finite_is_a_hard_error() {
    let mut t = Tape::new();
    let x = t.constant(DenseArray::vector(vec![1e300]).unwrap()).unwrap();
    assert!(matches!(t.mul(x, x), Err(Error::NonFinite(_))));
}

#[test]
fn finite_diff_check_examples() {
    let mut p = ParamSet::new();
    p.insert("p", DenseArray::vector(vec![0.25, -1.5, 3.0]).unwrap(), true);
    let r = finite_diff_check(&p, 1e-5, |t, b| t.sum(b.get("p"))).unwrap();
    assert!(r.max_rel_error < 1e-9);

    let mut p = ParamSet::new();
    p.insert("p", DenseArray::vector(vec![3.0]).unwrap(), true);
    let r = finite_diff_check(&p, 1e-5, |t, b| {
        let v = b.get("p");
        let sq = t.mul(v, v)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

struct Reverse(usize);

impl RowFilter for Reverse {
    fn row_len(&self) -> usize {
        self.0
    }
    fn apply(&self, row: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(row.iter().rev()) {
            *o = 2.0 * v;
        }
    }
    fn apply_adjoint(&self, row: &[f64], out: &mut [f64]) {
        self.apply(row, out)
    }
}

/// One loss per primitive, each reduced to a scalar through a random
/// weighting so that every output entry contributes.
fn primitive_loss(kind: usize, t: &mut Tape, b: &Bound, weights: &DenseArray) -> crate::error::Result<Var> {
    let a = b.get("a");
    let c = b.get("c");
    let out = match kind {
        0 => t.matmul(a, c)?,
        1 => t.add(a, b.get("a2"))?,
        2 => t.sub(a, b.get("a2"))?,
        3 => t.mul(a, b.get("a2"))?,
        4 => {
            let den = t.add(b.get("a2"), 3.0)?;
            t.safe_div(a, den)?
        }
        5 => t.scale(a, -1.7)?,
        6 => t.scale_by(b.get("s"), a)?,
        7 => t.add_bias(a, b.get("bias"))?,
        8 => t.gelu(a)?,
        9 => t.relu(a)?,
        10 => t.softmax_rows(a)?,
        11 => t.transpose(a)?,
        12 => t.slice_cols(a, 1, 2)?,
        13 => t.concat_cols(&[a, b.get("a2")])?,
        14 => t.concat_rows(&[a, b.get("a2")])?,
        15 => t.gather_rows(a, &[2, 0, 0, 1])?,
        16 => t.reshape(a, &[12])?,
        17 => t.sum_rows(a)?,
        18 => t.normalize_rows(a)?,
        19 => {
            let p = t.softmax_rows(a)?;
            return t.nll(p, &[0, 3, 2], 1e-12);
        }
        20 => t.row_filter(a, Arc::new(Reverse(4)))?,
        _ => unreachable!(),
    };
    let n = t.value(out).len();
    let flat = t.reshape(out, &[1, n])?;
    let w = t.constant(DenseArray::from_fn(&[n, 1], |i| weights.data()[i % weights.len()]))?;
    let s = t.matmul(flat, w)?;
    t.reshape(s, &[1])
}

fn primitive_params(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("a", DenseArray::uniform(&[3, 4], 1.0, rng), true);
    p.insert("a2", DenseArray::uniform(&[3, 4], 1.0, rng), true);
    p.insert("c", DenseArray::uniform(&[4, 2], 1.0, rng), true);
    p.insert("s", DenseArray::uniform(&[1], 1.0, rng), true);
    p.insert("bias", DenseArray::uniform(&[4], 1.0, rng), true);
    p
}

#[test]
fn every_primitive_adjoint_matches_finite_differences() {
    for kind in 0..=20 {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 97 + kind as u64);
            let params = primitive_params(&mut rng);
            let weights = DenseArray::uniform(&[24], 1.0, &mut rng);
            let r = finite_diff_check(&params, 1e-5, |t, b| primitive_loss(kind, t, b, &weights)).unwrap();
            assert!(r.max_rel_error < 1e-4, "primitive {kind} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn backward_through_every_primitive_at_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = primitive_params(&mut rng);
    let weights = DenseArray::uniform(&[24], 1.0, &mut rng);
    let mut t = Tape::new();
    let b = params.bind(&mut t).unwrap();
    let mut parts = Vec::new();
    for kind in 0..=20 {
        parts.push(primitive_loss(kind, &mut t, &b, &weights).unwrap());
    }
    let stacked = t.concat_rows(&parts).unwrap();
    let total = t.sum(stacked).unwrap();
    let g = t.backward(total).unwrap();
    for name in ["a", "a2", "c", "s", "bias"] {
        assert!(g[name].all_finite());
        assert!(g[name].norm() > 0.0, "{name} received no gradient");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..8), 1..6)) {
        let n = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
        let mut t = Tape::new();
        let x = t.constant(DenseArray::from_rows(&rows).unwrap()).unwrap();
        let s = t.softmax_rows(x).unwrap();
        let v = t.value(s);
        for i in 0..v.rows() {
            let total: f64 = v.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(v.row(i).iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn safe_div_is_always_finite(a in prop::collection::vec(-1e6f64..1e6, 1..16), b_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(b_seed);
        let n = a.len();
        // Mix exact zeros, denormal-scale and ordinary denominators.
        let b: Vec<f64> = (0..n).map(|i| match i % 3 {
            0 => 0.0,
            1 => rand::Rng::gen_range(&mut rng, -1e-30..1e-30),
            _ => rand::Rng::gen_range(&mut rng, -1e3..1e3),
        }).collect();
        let mut t = Tape::new();
        let av = t.constant(DenseArray::vector(a).unwrap()).unwrap();
        let bv = t.constant(DenseArray::vector(b).unwrap()).unwrap();
        let out = t.safe_div(av, bv).unwrap();
        prop_assert!(t.value(out).all_finite());
    }
}
