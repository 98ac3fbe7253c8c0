use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{DenseArray, Tape, Var};
use crate::error::{dim_err, param_err, Result};
use crate::seed;

const LAYERS: usize = 2;
const HEADS: usize = 4;
const MLP_RATIO: usize = 4;
pub const MAX_SEQ_LEN: usize = 32;
const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
struct Layer {
    q: Arc<DenseArray>,
    k: Arc<DenseArray>,
    v: Arc<DenseArray>,
    o: Arc<DenseArray>,
    up: Arc<DenseArray>,
    down: Arc<DenseArray>,
}

/// Deterministic stand-in for a pretrained text tower.
///
/// A two-layer pre-activation transformer of width `e` without normalisation
/// layers, followed by mean pooling, a semi-orthogonal `e→d` projection and
/// L2 normalisation. Every weight is drawn from `seed`; token embeddings are
/// drawn from `seed` and a hash of the token text.
#[derive(Clone, Debug)]
pub struct FrozenTextEncoder {
    seed: u64,
    token_dim: usize,
    out_dim: usize,
    positions: Arc<DenseArray>,
    layers: Vec<Layer>,
    out_proj: Arc<DenseArray>,
}

fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Arc<DenseArray> {
    Arc::new(DenseArray::normal(&[rows, cols], std, rng))
}

/// Orthonormalises the rows (if `rows ≤ cols`) or columns of a Gaussian matrix.
fn semi_orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseArray {
    let tall = rows > cols;
    let (n, len) = if tall { (cols, rows) } else { (rows, cols) };
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| dist.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    if tall {
        DenseArray::from_fn(&[rows, cols], |i| basis[i % cols][i / cols])
    } else {
        DenseArray::from_fn(&[rows, cols], |i| basis[i / cols][i % cols])
    }
}

impl FrozenTextEncoder {
    pub fn new(seed: u64, token_dim: usize, out_dim: usize) -> Result<Self> {
        if token_dim == 0 || out_dim == 0 || token_dim % HEADS != 0 {
            return Err(param_err!(
                "token width {token_dim} must be a positive multiple of {HEADS}"
            ));
        }
        let e = token_dim;
        let mut rng = seed::rng(seed, "text-encoder");
        let s = 1.0 / (e as f64).sqrt();
        let positions = gaussian(MAX_SEQ_LEN, e, 0.1 * s, &mut rng);
        let layers = (0..LAYERS)
            .map(|_| Layer {
                q: gaussian(e, e, s, &mut rng),
                k: gaussian(e, e, s, &mut rng),
                v: gaussian(e, e, s, &mut rng),
                o: gaussian(e, e, 0.5 * s, &mut rng),
                up: gaussian(e, MLP_RATIO * e, s, &mut rng),
                down: gaussian(MLP_RATIO * e, e, 0.5 / ((MLP_RATIO * e) as f64).sqrt(), &mut rng),
            })
            .collect();
        let out_proj = Arc::new(semi_orthogonal(e, out_dim, &mut rng));
        Ok(Self {
            seed,
            token_dim,
            out_dim,
            positions,
            layers,
            out_proj,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// The `e×d` output projection.
    pub fn out_proj(&self) -> &DenseArray {
        &self.out_proj
    }

    /// Every frozen weight array, in a fixed order.
    pub fn weights(&self) -> Vec<&DenseArray> {
        let mut out = vec![self.positions.as_ref()];
        for l in &self.layers {
            out.extend([&*l.q, &*l.k, &*l.v, &*l.o, &*l.up, &*l.down]);
        }
        out.push(&self.out_proj);
        out
    }

    /// Embedding of one whitespace token, with norm close to one.
    pub fn token_embedding(&self, token: &str) -> Vec<f64> {
        let mut rng = seed::rng(self.seed ^ seed::fnv1a64(token.as_bytes()), "token");
        let dist = Normal::new(0.0, 1.0 / (self.token_dim as f64).sqrt()).expect("finite std");
        (0..self.token_dim).map(|_| dist.sample(&mut rng)).collect()
    }

    /// Embeddings of the lower-cased whitespace tokens of `text`, one row each.
    pub fn embed_text(&self, text: &str) -> Result<DenseArray> {
        let rows: Vec<Vec<f64>> = text
            .split_whitespace()
            .map(|t| self.token_embedding(&t.to_lowercase()))
            .collect();
        if rows.is_empty() {
            return Err(param_err!("no tokens in {text:?}"));
        }
        DenseArray::from_rows(&rows)
    }

    /// Encodes stacked token sequences into unit-norm `n×d` rows.
    ///
    /// `tokens` holds the sequences one after another, `Σ seq_lens × e`.
    /// Attention never crosses a sequence boundary.
    pub fn encode(&self, tape: &mut Tape, tokens: Var, seq_lens: &[usize]) -> Result<Var> {
        let (rows, e) = tape.value(tokens).as_matrix_dims();
        if e != self.token_dim {
            return Err(dim_err!("tokens of width {e}, encoder width {}", self.token_dim));
        }
        if seq_lens.is_empty() || seq_lens.iter().sum::<usize>() != rows {
            return Err(dim_err!("sequence lengths {seq_lens:?} do not cover {rows} rows"));
        }
        if let Some(&l) = seq_lens.iter().find(|&&l| l == 0 || l > MAX_SEQ_LEN) {
            return Err(dim_err!("sequence length {l} outside [1, {MAX_SEQ_LEN}]"));
        }

        let mut owner = Vec::with_capacity(rows);
        let mut pos_rows = Vec::with_capacity(rows);
        for (s, &l) in seq_lens.iter().enumerate() {
            owner.extend(std::iter::repeat(s).take(l));
            pos_rows.extend(0..l);
        }
        let pos = DenseArray::from_fn(&[rows, e], |i| self.positions.get(pos_rows[i / e], i % e));
        let mask = DenseArray::from_fn(&[rows, rows], |i| {
            if owner[i / rows] == owner[i % rows] {
                0.0
            } else {
                MASKED
            }
        });
        let pos = tape.constant(pos)?;
        let mask = tape.constant(mask)?;

        let mut h = tape.add(tokens, pos)?;
        let width = e / HEADS;
        let scale = 1.0 / (width as f64).sqrt();
        for layer in &self.layers {
            let wq = tape.constant(layer.q.clone())?;
            let wk = tape.constant(layer.k.clone())?;
            let wv = tape.constant(layer.v.clone())?;
            let wo = tape.constant(layer.o.clone())?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut heads = Vec::with_capacity(HEADS);
            for i in 0..HEADS {
                let qh = tape.slice_cols(q, i * width, width)?;
                let kh = tape.slice_cols(k, i * width, width)?;
                let vh = tape.slice_cols(v, i * width, width)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, scale)?;
                let s = tape.add(s, mask)?;
                let a = tape.softmax_rows(s)?;
                heads.push(tape.matmul(a, vh)?);
            }
            let joined = tape.concat_cols(&heads)?;
            let attn = tape.matmul(joined, wo)?;
            h = tape.add(h, attn)?;

            let up = tape.constant(layer.up.clone())?;
            let down = tape.constant(layer.down.clone())?;
            let z = tape.matmul(h, up)?;
            let z = tape.gelu(z)?;
            let z = tape.matmul(z, down)?;
            h = tape.add(h, z)?;
        }

        let n = seq_lens.len();
        let pool = DenseArray::from_fn(&[n, rows], |i| {
            let (s, r) = (i / rows, i % rows);
            if owner[r] == s {
                1.0 / seq_lens[s] as f64
            } else {
                0.0
            }
        });
        let pool = tape.constant(pool)?;
        let pooled = tape.matmul(pool, h)?;
        let proj = tape.constant(self.out_proj.clone())?;
        let out = tape.matmul(pooled, proj)?;
        tape.normalize_rows(out)
    }

    /// [`encode`](Self::encode) outside of any training graph.
    pub fn encode_values(&self, tokens: DenseArray, seq_lens: &[usize]) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let t = tape.constant(tokens)?;
        let out = self.encode(&mut tape, t, seq_lens)?;
        Ok(tape.value(out).clone())
    }
}
