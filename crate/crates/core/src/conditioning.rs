//! Processed image features: projection network, batch self-attention,
//! λ-scaled fusion with a division residual, then the Fourier filter.
//!
//! Row convention throughout: a batch `X` is `B×d` and linear maps act as
//! `X·W + b`.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Bound, DenseArray, ParamSet, Tape, Var};
use crate::error::{dim_err, param_err, Error, Result};
use crate::spectral::FourierFilter;

pub const W1: &str = "cond.w1";
pub const B1: &str = "cond.b1";
pub const W2: &str = "cond.w2";
pub const B2: &str = "cond.b2";
pub const W3: &str = "cond.w3";
pub const B3: &str = "cond.b3";
pub const ATTN_Q: &str = "cond.attn.q";
pub const ATTN_K: &str = "cond.attn.k";
pub const ATTN_V: &str = "cond.attn.v";
pub const ATTN_O: &str = "cond.attn.o";
pub const LAMBDA: &str = "cond.lambda";

/// A batch of frozen, unit-norm image embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: DenseArray,
    pub labels: Vec<usize>,
    pub domain_id: String,
}

impl FeatureBatch {
    /// Accepts rows whose norm is within `1e-4` of one.
    pub fn new(features: DenseArray, labels: Vec<usize>, domain_id: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(dim_err!("features must be B×d, got {:?}", features.shape()));
        }
        if labels.len() != features.rows() {
            return Err(dim_err!("{} labels for {} rows", labels.len(), features.rows()));
        }
        for i in 0..features.rows() {
            let n = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::Contract(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            features,
            labels,
            domain_id: domain_id.into(),
        })
    }

    /// Rescales every row to unit norm first.
    pub fn normalized(mut features: DenseArray, labels: Vec<usize>, domain_id: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(dim_err!("features must be B×d, got {:?}", features.shape()));
        }
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::NonFinite(format!("feature row {i} cannot be normalized")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(features, labels, domain_id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Shape hyper-parameters of the conditioning network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditioningConfig {
    pub dim: usize,
    pub heads: usize,
    pub lambda: f64,
    pub learn_lambda: bool,
}

impl ConditioningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(param_err!("dimension {} not divisible by {} heads", self.dim, self.heads));
        }
        if !(0.0..=2.0).contains(&self.lambda) {
            return Err(param_err!("fusion scale {} outside [0, 2]", self.lambda));
        }
        Ok(())
    }
}

fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseArray {
    DenseArray::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

fn near_identity<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DenseArray {
    let mut m = DenseArray::normal(&[d, d], 0.01, rng);
    for i in 0..d {
        m.data_mut()[i * d + i] += 1.0;
    }
    m
}

/// Fan-in uniform weights with zero biases; attention projections start at
/// identity plus N(0, 0.01²) noise.
pub fn init_params<R: Rng + ?Sized>(cfg: &ConditioningConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut p = ParamSet::new();
    p.insert(W1, fan_in_uniform(d, d, rng), true);
    p.insert(B1, DenseArray::zeros(&[d]), true);
    p.insert(W2, fan_in_uniform(d, 2 * d, rng), true);
    p.insert(B2, DenseArray::zeros(&[2 * d]), true);
    p.insert(W3, fan_in_uniform(2 * d, d, rng), true);
    p.insert(B3, DenseArray::zeros(&[d]), true);
    for name in [ATTN_Q, ATTN_K, ATTN_V, ATTN_O] {
        p.insert(name, near_identity(d, rng), true);
    }
    p.insert(LAMBDA, DenseArray::scalar(cfg.lambda), cfg.learn_lambda);
    Ok(p)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// `ReLU(X‴) ⊙ X` with `X′ = XW₁+b₁`, `X″ = GELU(X′)W₂+b₂`, `X‴ = GELU(X″)W₃+b₃`.
pub fn projection_forward(tape: &mut Tape, x: Var, params: &Bound) -> Result<Var> {
    let d = tape.value(x).cols();
    if tape.value(params.get(W1)).rows() != d {
        return Err(dim_err!("projection expects rows of {}, got {d}", tape.value(params.get(W1)).rows()));
    }
    let x1 = linear(tape, x, params.get(W1), params.get(B1))?;
    let a1 = tape.gelu(x1)?;
    let x2 = linear(tape, a1, params.get(W2), params.get(B2))?;
    let a2 = tape.gelu(x2)?;
    let x3 = linear(tape, a2, params.get(W3), params.get(B3))?;
    let gate = tape.relu(x3)?;
    tape.mul(gate, x)
}

/// Multi-head scaled dot-product attention with the batch rows as tokens.
pub fn self_attention_forward(tape: &mut Tape, x: Var, params: &Bound, heads: usize) -> Result<Var> {
    let (_, d) = tape.value(x).as_matrix_dims();
    if heads == 0 || d % heads != 0 {
        return Err(param_err!("dimension {d} not divisible by {heads} heads"));
    }
    let q = tape.matmul(x, params.get(ATTN_Q))?;
    let k = tape.matmul(x, params.get(ATTN_K))?;
    let v = tape.matmul(x, params.get(ATTN_V))?;
    let width = d / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * width, width)?;
        let kh = tape.slice_cols(k, h * width, width)?;
        let vh = tape.slice_cols(v, h * width, width)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(joined, params.get(ATTN_O))
}

/// `X_final = safe_div(λ ⊙ X_projector ⊙ X_self, X) + X`.
pub fn fuse_features(tape: &mut Tape, x: Var, x_projector: Var, x_self: Var, lambda: Var) -> Result<Var> {
    let prod = tape.mul(x_projector, x_self)?;
    let out = tape.scale_by(lambda, prod)?;
    let ratio = tape.safe_div(out, x)?;
    tape.add(ratio, x)
}

/// Retained features ψ: the filtered processed image features.
pub fn pif_pipeline(
    tape: &mut Tape,
    x: Var,
    params: &Bound,
    heads: usize,
    filter: &Arc<FourierFilter>,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if filter.spec().d() != d {
        return Err(dim_err!("filter length {} for features of {d}", filter.spec().d()));
    }
    let xp = projection_forward(tape, x, params)?;
    let xs = self_attention_forward(tape, x, params, heads)?;
    let fused = fuse_features(tape, x, xp, xs, params.get(LAMBDA))?;
    tape.row_filter(fused, filter.clone())
}
