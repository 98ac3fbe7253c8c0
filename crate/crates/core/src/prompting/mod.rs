//! Learnable context tokens, the Meta-Net, prompt assembly and the frozen
//! text encoder.

mod encoder;

use std::sync::Arc;

use rand::Rng;

pub use encoder::{FrozenTextEncoder, MAX_SEQ_LEN};

use crate::autodiff::{Bound, DenseArray, ParamSet, Tape, Var};
use crate::error::{dim_err, param_err, Error, Result};

pub const CONTEXT: &str = "prompt.ctx";
pub const CONTEXT_INIT: &str = "a photo of a";
pub const CONTEXT_INIT_STD: f64 = 0.02;

pub const DEFAULT_TEMPLATES: [&str; 4] = [
    "a photo of a {}",
    "satellite photo of a {}",
    "an aerial image of a {}",
    "remote sensing scene of a {}",
];

pub fn metanet_param(m: usize, part: &str) -> String {
    format!("metanet.{m}.{part}")
}

/// Shapes of the learnable prompt: `M` context tokens of width `e`, and `M`
/// independent two-layer maps `ℝ^d → ℝ^e` with hidden width `max(1, d/16)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptState {
    pub context_len: usize,
    pub token_dim: usize,
    pub feature_dim: usize,
}

impl PromptState {
    pub fn hidden(&self) -> usize {
        (self.feature_dim / 16).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.token_dim == 0 || self.feature_dim == 0 {
            return Err(param_err!("prompt dimensions must be positive: {self:?}"));
        }
        if self.context_len + 1 > MAX_SEQ_LEN {
            return Err(param_err!("context length {} too long", self.context_len));
        }
        Ok(())
    }

    /// Context from the embedded initial phrase plus N(0, 0.02²) noise; the
    /// phrase is cycled or truncated to `M` tokens. Meta-Net weights are
    /// fan-in uniform with zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, encoder: &FrozenTextEncoder, rng: &mut R) -> Result<ParamSet> {
        self.validate()?;
        if encoder.token_dim() != self.token_dim {
            return Err(dim_err!("encoder width {} for tokens of {}", encoder.token_dim(), self.token_dim));
        }
        let (m, e, d, h) = (self.context_len, self.token_dim, self.feature_dim, self.hidden());
        let phrase = encoder.embed_text(CONTEXT_INIT)?;
        let noise = DenseArray::normal(&[m, e], CONTEXT_INIT_STD, rng);
        let ctx = DenseArray::from_fn(&[m, e], |i| phrase.get((i / e) % phrase.rows(), i % e) + noise.data()[i]);
        let mut p = ParamSet::new();
        p.insert(CONTEXT, ctx, true);
        for j in 0..m {
            p.insert(metanet_param(j, "w1"), DenseArray::uniform(&[d, h], 1.0 / (d as f64).sqrt(), rng), true);
            p.insert(metanet_param(j, "b1"), DenseArray::zeros(&[h]), true);
            p.insert(metanet_param(j, "w2"), DenseArray::uniform(&[h, e], 1.0 / (h as f64).sqrt(), rng), true);
            p.insert(metanet_param(j, "b2"), DenseArray::zeros(&[e]), true);
        }
        Ok(p)
    }
}

/// Visual tokens `υ_m = h_m(ψ)` as a `B×M×e` array.
pub fn metanet_forward(tape: &mut Tape, psi: Var, params: &Bound, state: &PromptState) -> Result<Var> {
    let (b, d) = tape.value(psi).as_matrix_dims();
    if d != state.feature_dim {
        return Err(dim_err!("Meta-Net expects features of {}, got {d}", state.feature_dim));
    }
    let mut tokens = Vec::with_capacity(state.context_len);
    for m in 0..state.context_len {
        let w1 = params.get(&metanet_param(m, "w1"));
        let z = tape.matmul(psi, w1)?;
        let z = tape.add_bias(z, params.get(&metanet_param(m, "b1")))?;
        let z = tape.relu(z)?;
        let w2 = params.get(&metanet_param(m, "w2"));
        let z = tape.matmul(z, w2)?;
        tokens.push(tape.add_bias(z, params.get(&metanet_param(m, "b2")))?);
    }
    let joined = if tokens.len() == 1 { tokens[0] } else { tape.concat_cols(&tokens)? };
    tape.reshape(joined, &[b, state.context_len, state.token_dim])
}

/// One token embedding per class, in dataset class order.
#[derive(Clone, Debug)]
pub struct ClassTokens {
    names: Vec<String>,
    table: Arc<DenseArray>,
}

impl ClassTokens {
    /// Hash-derived embeddings of the lower-cased class names.
    pub fn hashed(encoder: &FrozenTextEncoder, names: &[String]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = names.iter().map(|n| encoder.token_embedding(&n.to_lowercase())).collect();
        Self::from_table(names, DenseArray::from_rows(&rows)?)
    }

    /// `scale · a_y · Pᵀ` for unit anchors `a_y` in feature space, where `P` is
    /// the encoder's output projection.
    ///
    /// A prompt dominated by this token encodes close to `a_y`, which gives the
    /// surrogate encoder a zero-shot starting point on any labelled classes.
    pub fn anchored(encoder: &FrozenTextEncoder, names: &[String], anchors: &DenseArray, scale: f64) -> Result<Self> {
        let (n, d) = anchors.as_matrix_dims();
        if n != names.len() || d != encoder.out_dim() {
            return Err(dim_err!("anchors {n}×{d} for {} classes of width {}", names.len(), encoder.out_dim()));
        }
        let table = anchors.matmul(&encoder.out_proj().transpose())?.map(|v| scale * v);
        Self::from_table(names, table)
    }

    pub fn from_table(names: &[String], table: DenseArray) -> Result<Self> {
        if table.rows() != names.len() {
            return Err(dim_err!("{} token rows for {} class names", table.rows(), names.len()));
        }
        table.ensure_finite("class token table")?;
        Ok(Self {
            names: names.to_vec(),
            table: Arc::new(table),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn table(&self) -> &DenseArray {
        &self.table
    }

    pub fn token(&self, class: usize) -> Result<&[f64]> {
        if class >= self.len() {
            return Err(Error::Lookup(format!("class id {class} out of {}", self.len())));
        }
        Ok(self.table.row(class))
    }
}

/// Stacked token sequences `[c₁+υ₁, …, c_M+υ_M, [CLS]_y]`, sample-major:
/// sequence `b·C + c` pairs sample `b` with the `c`-th requested class.
#[derive(Clone, Copy, Debug)]
pub struct PromptBundle {
    pub tokens: Var,
    pub samples: usize,
    pub classes: usize,
    pub seq_len: usize,
}

impl PromptBundle {
    pub fn seq_lens(&self) -> Vec<usize> {
        vec![self.seq_len; self.samples * self.classes]
    }
}

pub fn assemble_prompts(
    tape: &mut Tape,
    context: Var,
    upsilon: Var,
    class_tokens: &ClassTokens,
    class_ids: &[usize],
) -> Result<PromptBundle> {
    let (m, e) = tape.value(context).as_matrix_dims();
    let shape = tape.shape(upsilon).to_vec();
    if shape.len() != 3 || shape[1] != m || shape[2] != e {
        return Err(dim_err!("visual tokens {shape:?} for a {m}×{e} context"));
    }
    if class_tokens.table().cols() != e {
        return Err(dim_err!("class tokens of width {} for width {e}", class_tokens.table().cols()));
    }
    if class_ids.is_empty() {
        return Err(param_err!("no classes to prompt"));
    }
    if let Some(&bad) = class_ids.iter().find(|&&c| c >= class_tokens.len()) {
        return Err(Error::Lookup(format!("class id {bad} out of {}", class_tokens.len())));
    }
    let b = shape[0];
    let flat = tape.reshape(upsilon, &[b * m, e])?;
    let repeat: Vec<usize> = (0..b * m).map(|i| i % m).collect();
    let ctx = tape.gather_rows(context, &repeat)?;
    let shifted = tape.add(flat, ctx)?;
    let table = tape.constant(class_tokens.table.clone())?;
    let source = tape.concat_rows(&[shifted, table])?;

    let mut index = Vec::with_capacity(b * class_ids.len() * (m + 1));
    for s in 0..b {
        for &c in class_ids {
            index.extend((0..m).map(|j| s * m + j));
            index.push(b * m + c);
        }
    }
    let tokens = tape.gather_rows(source, &index)?;
    Ok(PromptBundle {
        tokens,
        samples: b,
        classes: class_ids.len(),
        seq_len: m + 1,
    })
}

/// Text features of a bundle, `(B·C)×d`.
pub fn frozen_text_encode(tape: &mut Tape, encoder: &FrozenTextEncoder, bundle: &PromptBundle) -> Result<Var> {
    encoder.encode(tape, bundle.tokens, &bundle.seq_lens())
}

/// Splits a template on its single `{}` slot.
pub fn parse_template(template: &str) -> Result<(String, String)> {
    let mut parts = template.split("{}");
    let before = parts.next().unwrap_or_default();
    match (parts.next(), parts.next()) {
        (Some(after), None) => Ok((before.trim().to_string(), after.trim().to_string())),
        (None, _) => Err(Error::Template(format!("{template:?} has no {{}} slot"))),
        _ => Err(Error::Template(format!("{template:?} has more than one {{}} slot"))),
    }
}

/// Token rows of `template` with the class slot filled by `class_token`.
fn template_tokens(encoder: &FrozenTextEncoder, template: &str, class_token: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (before, after) = parse_template(template)?;
    let mut rows: Vec<Vec<f64>> = before.split_whitespace().map(|t| encoder.token_embedding(&t.to_lowercase())).collect();
    rows.push(class_token.to_vec());
    rows.extend(after.split_whitespace().map(|t| encoder.token_embedding(&t.to_lowercase())));
    Ok(rows)
}

/// Encodes every template with every class: a `Z×N×d` array.
pub fn reference_prompt_embeddings(
    encoder: &FrozenTextEncoder,
    class_tokens: &ClassTokens,
    templates: &[String],
) -> Result<DenseArray> {
    if templates.is_empty() {
        return Err(param_err!("at least one prompt template is required"));
    }
    let n = class_tokens.len();
    let d = encoder.out_dim();
    let mut out = Vec::with_capacity(templates.len() * n * d);
    for template in templates {
        let mut rows = Vec::new();
        let mut lens = Vec::with_capacity(n);
        for c in 0..n {
            let seq = template_tokens(encoder, template, class_tokens.token(c)?)?;
            lens.push(seq.len());
            rows.extend(seq);
        }
        let encoded = encoder.encode_values(DenseArray::from_rows(&rows)?, &lens)?;
        out.extend_from_slice(encoded.data());
    }
    DenseArray::new(vec![templates.len(), n, d], out)
}

/// Context tokens spelled out by a fixed phrase, for evaluating with a
/// hand-written prompt in place of the learned one.
pub fn phrase_context(encoder: &FrozenTextEncoder, phrase: &str) -> Result<DenseArray> {
    encoder.embed_text(phrase)
}
