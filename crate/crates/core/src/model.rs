//! The full classifier: conditioning, Meta-Net prompts, frozen text encoder
//! and the similarity head.

use std::sync::Arc;

use crate::autodiff::{Bound, DenseArray, ParamSet, Tape, Var};
use crate::conditioning::{self, ConditioningConfig, FeatureBatch};
use crate::data::EmbeddingDataset;
use crate::error::{dim_err, param_err, Error, Result};
use crate::objective::{class_posterior, loss_ce, loss_rpa, loss_total, LossConfig};
use crate::prompting::{
    assemble_prompts, frozen_text_encode, metanet_forward, reference_prompt_embeddings, ClassTokens,
    FrozenTextEncoder, PromptState, CONTEXT, DEFAULT_TEMPLATES,
};
use crate::seed;
use crate::spectral::{build_lowpass_mask, FourierFilter};

/// Number of retained bins: `k` when set, otherwise `350/512` of `d`.
pub fn default_k(dim: usize) -> usize {
    ((dim as f64 * 350.0 / 512.0).round() as usize).clamp(1, dim)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub heads: usize,
    pub context_len: usize,
    /// Token width; zero means the feature dimension.
    pub token_dim: usize,
    /// Retained frequency bins; zero means [`default_k`].
    pub k: usize,
    /// Fusion gain λ.
    pub lambda: f64,
    pub learn_lambda: bool,
    pub tau: f64,
    /// Alignment weight Λ.
    pub rpa_weight: f64,
    pub templates: Vec<String>,
    pub encoder_seed: u64,
    /// Norm of anchored class tokens relative to a word token.
    pub anchor_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            context_len: 4,
            token_dim: 0,
            k: 0,
            lambda: 0.3,
            learn_lambda: false,
            tau: 0.01,
            rpa_weight: 0.5,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            encoder_seed: 0x5eed,
            anchor_scale: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn resolved_k(&self, dim: usize) -> usize {
        if self.k == 0 {
            default_k(dim)
        } else {
            self.k
        }
    }

    pub fn resolved_token_dim(&self, dim: usize) -> usize {
        if self.token_dim == 0 {
            dim
        } else {
            self.token_dim
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            rpa_weight: self.rpa_weight,
        }
    }

    pub fn conditioning(&self, dim: usize) -> ConditioningConfig {
        ConditioningConfig {
            dim,
            heads: self.heads,
            lambda: self.lambda,
            learn_lambda: self.learn_lambda,
        }
    }

    pub fn prompt_state(&self, dim: usize) -> PromptState {
        PromptState {
            context_len: self.context_len,
            token_dim: self.resolved_token_dim(dim),
            feature_dim: dim,
        }
    }
}

/// Everything frozen about a model for one dataset: the encoder, class
/// tokens, filter and reference text embeddings.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dim: usize,
    pub encoder: Arc<FrozenTextEncoder>,
    pub class_tokens: ClassTokens,
    pub filter: Arc<FourierFilter>,
    /// Reference text embeddings `Z×N×d` over every dataset class.
    pub reference: Arc<DenseArray>,
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub posterior: Var,
    /// Visual tokens `B×M×e`.
    pub upsilon: Var,
}

/// Loss terms of one training step.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub ce: Var,
    pub rpa: Var,
}

fn class_means(bank: &DenseArray) -> DenseArray {
    let (z, n, d) = (bank.shape()[0], bank.shape()[1], bank.shape()[2]);
    let mut out = DenseArray::zeros(&[n, d]);
    for zi in 0..z {
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += bank.data()[(zi * n + i) * d + j];
            }
        }
    }
    for i in 0..n {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

impl Model {
    /// Class tokens come from the dataset's text bank when present (anchored
    /// to the mean text embedding of each class) and from hashed class names
    /// otherwise; the text bank also replaces the encoded templates as the
    /// alignment reference.
    pub fn new(config: ModelConfig, ds: &EmbeddingDataset) -> Result<Self> {
        let dim = ds.dim;
        config.conditioning(dim).validate()?;
        config.prompt_state(dim).validate()?;
        config.loss().validate()?;
        let k = config.resolved_k(dim);
        let filter = Arc::new(FourierFilter::new(build_lowpass_mask(dim, k)?));
        let encoder = FrozenTextEncoder::new(config.encoder_seed, config.resolved_token_dim(dim), dim)?;
        let (class_tokens, reference) = match ds.text_bank_array() {
            Some(bank) => {
                let anchors = class_means(&bank);
                let tokens = ClassTokens::anchored(&encoder, &ds.class_names, &anchors, config.anchor_scale)?;
                (tokens, bank)
            }
            None => {
                let tokens = ClassTokens::hashed(&encoder, &ds.class_names)?;
                let reference = reference_prompt_embeddings(&encoder, &tokens, &config.templates)?;
                (tokens, reference)
            }
        };
        Ok(Self {
            config,
            dim,
            encoder: Arc::new(encoder),
            class_tokens,
            filter,
            reference: Arc::new(reference),
        })
    }

    pub fn k(&self) -> usize {
        self.filter.spec().k()
    }

    pub fn prompt_state(&self) -> PromptState {
        self.config.prompt_state(self.dim)
    }

    /// Freshly initialised learnable parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = seed::rng(seed, "model-init");
        let mut p = conditioning::init_params(&self.config.conditioning(self.dim), &mut rng)?;
        p.merge(self.prompt_state().init_params(&self.encoder, &mut rng)?);
        Ok(p)
    }

    fn check_classes(&self, class_ids: &[usize]) -> Result<()> {
        if class_ids.is_empty() {
            return Err(param_err!("empty class set"));
        }
        if let Some(&c) = class_ids.iter().find(|&&c| c >= self.class_tokens.len()) {
            return Err(Error::Lookup(format!("class id {c} out of {}", self.class_tokens.len())));
        }
        Ok(())
    }

    /// Posterior over `class_ids` for every row of `features` (`B×d`, unit rows).
    pub fn forward(&self, tape: &mut Tape, params: &Bound, features: Var, class_ids: &[usize]) -> Result<Forward> {
        self.check_classes(class_ids)?;
        let (_, d) = tape.value(features).as_matrix_dims();
        if d != self.dim {
            return Err(dim_err!("features of {d} for a model of {}", self.dim));
        }
        let psi = conditioning::pif_pipeline(tape, features, params, self.config.heads, &self.filter)?;
        let upsilon = metanet_forward(tape, psi, params, &self.prompt_state())?;
        let bundle = assemble_prompts(tape, params.get(CONTEXT), upsilon, &self.class_tokens, class_ids)?;
        let text = frozen_text_encode(tape, &self.encoder, &bundle)?;
        let posterior = class_posterior(tape, features, text, self.config.tau)?;
        Ok(Forward { posterior, upsilon })
    }

    /// Class text embeddings (`C×d`) prompted with the batch-mean visual tokens.
    pub fn learned_class_embeddings(
        &self,
        tape: &mut Tape,
        params: &Bound,
        upsilon: Var,
        class_ids: &[usize],
    ) -> Result<Var> {
        let shape = tape.shape(upsilon).to_vec();
        let (b, me) = (shape[0], shape[1] * shape[2]);
        let flat = tape.reshape(upsilon, &[b, me])?;
        let avg = tape.constant(DenseArray::full(&[1, b], 1.0 / b as f64))?;
        let mean = tape.matmul(avg, flat)?;
        let mean = tape.reshape(mean, &[1, shape[1], shape[2]])?;
        let bundle = assemble_prompts(tape, params.get(CONTEXT), mean, &self.class_tokens, class_ids)?;
        frozen_text_encode(tape, &self.encoder, &bundle)
    }

    /// `L_ce + Λ·L_rpa` for a batch whose labels all lie in `class_ids`.
    pub fn losses(&self, tape: &mut Tape, params: &Bound, batch: &FeatureBatch, class_ids: &[usize]) -> Result<Losses> {
        let local: Vec<usize> = batch
            .labels
            .iter()
            .map(|l| {
                class_ids
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::Index(format!("label {l} is not in the class set")))
            })
            .collect::<Result<_>>()?;
        let x = tape.constant(batch.features.clone())?;
        let fwd = self.forward(tape, params, x, class_ids)?;
        let ce = loss_ce(tape, fwd.posterior, &local)?;
        let learned = self.learned_class_embeddings(tape, params, fwd.upsilon, class_ids)?;
        let reference = self.reference_for(class_ids);
        let rpa = loss_rpa(tape, learned, &reference)?;
        let total = loss_total(tape, ce, rpa, self.config.rpa_weight)?;
        Ok(Losses { total, ce, rpa })
    }

    /// Reference embeddings restricted to `class_ids`, `Z×C×d`.
    pub fn reference_for(&self, class_ids: &[usize]) -> DenseArray {
        let r = &self.reference;
        let (z, n, d) = (r.shape()[0], r.shape()[1], r.shape()[2]);
        let mut out = Vec::with_capacity(z * class_ids.len() * d);
        for zi in 0..z {
            for &c in class_ids {
                out.extend_from_slice(&r.data()[(zi * n + c) * d..(zi * n + c + 1) * d]);
            }
        }
        DenseArray::new(vec![z, class_ids.len(), d], out).expect("consistent shape")
    }

    /// Posterior values for a batch, outside of any training graph.
    pub fn posterior(&self, params: &ParamSet, features: &DenseArray, class_ids: &[usize]) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let x = tape.constant(features.clone())?;
        let fwd = self.forward(&mut tape, &bound, x, class_ids)?;
        Ok(tape.value(fwd.posterior).clone())
    }
}
