//! Plain SGD with a warmup epoch, deterministic shuffling and checkpoints.

mod checkpoint;

use std::f64::consts::PI;

use rand::seq::SliceRandom;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};

use crate::autodiff::{Gradients, ParamSet, Tape};
use crate::data::{EmbeddingDataset, Split};
use crate::error::{param_err, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            base_lr: 2e-3,
            warmup_lr: 1e-5,
            warmup_epochs: 1,
            batch_size: 4,
            seed: 0,
            schedule: Schedule::Cosine,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(param_err!("epochs and batch size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.warmup_lr > 0.0) {
            return Err(param_err!("learning rates must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(param_err!("warmup of {} epochs leaves no training", self.warmup_epochs));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(param_err!("clip norm must be non-negative"));
        }
        Ok(())
    }
}

/// Warmup rate for the first epochs, then cosine decay from the base rate
/// towards zero (or the constant base rate).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(param_err!("epoch {epoch} outside [0, {})", cfg.epochs));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.warmup_lr);
    }
    Ok(match cfg.schedule {
        Schedule::Constant => cfg.base_lr,
        Schedule::Cosine => {
            let span = (cfg.epochs - cfg.warmup_epochs) as f64;
            let t = (epoch - cfg.warmup_epochs) as f64;
            cfg.base_lr * 0.5 * (1.0 + (PI * t / span).cos())
        }
    })
}

/// `p ← p − rate·g` for every learnable array, then rounds to 32-bit values
/// so that checkpoints reload exactly.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, rate: f64) -> Result<()> {
    let names: Vec<String> = params.learnable_names().map(str::to_string).collect();
    for name in &names {
        if !grads.contains_key(name) {
            return Err(Error::Contract(format!("no gradient for learnable parameter {name:?}")));
        }
    }
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name).expect("listed");
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!("gradient shape {:?} for {name:?} of {:?}", g.shape(), p.shape())));
        }
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= rate * d;
        }
        p.round_to_f32();
    }
    Ok(())
}

/// Scales all gradients so their global norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = ParamSet::global_grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Keep every frequency bin.
    pub no_ffb: bool,
    /// Drop the alignment term.
    pub no_rpa: bool,
    /// Zero fusion gain.
    pub no_fusion: bool,
}

impl Ablations {
    pub fn apply(&self, cfg: &ModelConfig, dim: usize) -> ModelConfig {
        let mut out = cfg.clone();
        if self.no_ffb {
            out.k = dim;
        }
        if self.no_rpa {
            out.rpa_weight = 0.0;
        }
        if self.no_fusion {
            out.lambda = 0.0;
        }
        out
    }

    pub fn flags(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_ffb {
            v.push("no_ffb");
        }
        if self.no_rpa {
            v.push("no_rpa");
        }
        if self.no_fusion {
            v.push("no_fusion");
        }
        v
    }
}

/// Mean losses over the batches of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub total: f64,
    pub ce: f64,
    pub rpa: f64,
}

/// Single-worker training state over one split.
pub struct Trainer<'a> {
    pub model: Model,
    pub params: ParamSet,
    pub cfg: TrainConfig,
    pub step: u64,
    pub epochs_done: usize,
    pub trace: Vec<EpochLoss>,
    ds: &'a EmbeddingDataset,
    split: &'a Split,
    config_hash: [u8; 32],
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, ds: &'a EmbeddingDataset, split: &'a Split, cfg: TrainConfig, config_hash: [u8; 32]) -> Result<Self> {
        cfg.validate()?;
        if split.train.is_empty() {
            return Err(param_err!("empty training stream"));
        }
        let mut params = model.init_params(cfg.seed)?;
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            params.get_mut(&n).expect("listed").round_to_f32();
        }
        Ok(Self {
            model,
            params,
            cfg,
            step: 0,
            epochs_done: 0,
            trace: Vec::new(),
            ds,
            split,
            config_hash,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(mut self, ck: &Checkpoint) -> Result<Self> {
        if ck.config_hash != self.config_hash || ck.seed != self.cfg.seed {
            return Err(Error::Config("checkpoint was written by a different configuration".into()));
        }
        for (name, entry) in self.params.iter() {
            let theirs = ck.params.get(name).ok_or_else(|| Error::Config(format!("checkpoint lacks {name:?}")))?;
            if theirs.shape() != entry.value.shape() {
                return Err(Error::Config(format!("checkpoint shape mismatch for {name:?}")));
            }
        }
        self.params = ck.params.clone();
        self.step = ck.step;
        self.epochs_done = ck.epochs_done as usize;
        Ok(self)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config_hash,
            seed: self.cfg.seed,
            step: self.step,
            epochs_done: self.epochs_done as u32,
            params: self.params.clone(),
        }
    }

    fn diagnostics(&self, epoch: usize, batch: usize, cause: &dyn std::fmt::Display) -> Error {
        let norms: Vec<String> = self
            .params
            .iter()
            .map(|(n, e)| format!("{n}={:.3e}", e.value.norm()))
            .collect();
        Error::Numeric(format!("epoch {epoch}, batch {batch}: {cause}; parameter norms: {}", norms.join(", ")))
    }

    /// Runs the next epoch and returns its mean losses.
    pub fn run_epoch(&mut self) -> Result<EpochLoss> {
        let epoch = self.epochs_done;
        let rate = lr_at(epoch, &self.cfg)?;
        let mut order = self.split.train.clone();
        order.shuffle(&mut seed::rng(seed::derive(self.cfg.seed, epoch as u64), "epoch-shuffle"));

        let mut sum = EpochLoss {
            total: 0.0,
            ce: 0.0,
            rpa: 0.0,
        };
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        for (bi, ids) in batches.iter().enumerate() {
            let batch = self.ds.batch(ids, "train")?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape)?;
            let losses = match self.model.losses(&mut tape, &bound, &batch, &self.split.train_classes) {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => return Err(self.diagnostics(epoch, bi, &e)),
                Err(e) => return Err(e),
            };
            let (total, ce, rpa) = (
                tape.value(losses.total).item(),
                tape.value(losses.ce).item(),
                tape.value(losses.rpa).item(),
            );
            if !total.is_finite() {
                return Err(self.diagnostics(epoch, bi, &"non-finite loss"));
            }
            let mut grads = tape.backward(losses.total)?;
            let norm = clip_gradients(&mut grads, self.cfg.clip_norm);
            if !norm.is_finite() {
                return Err(self.diagnostics(epoch, bi, &"non-finite gradient"));
            }
            sgd_step(&mut self.params, &grads, rate)?;
            self.step += 1;
            sum.total += total;
            sum.ce += ce;
            sum.rpa += rpa;
        }
        let n = batches.len() as f64;
        let mean = EpochLoss {
            total: sum.total / n,
            ce: sum.ce / n,
            rpa: sum.rpa / n,
        };
        log::debug!("epoch {epoch}: lr {rate:.3e} loss {:.5} (ce {:.5}, rpa {:.5})", mean.total, mean.ce, mean.rpa);
        self.trace.push(mean);
        self.epochs_done += 1;
        Ok(mean)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.epochs_done < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamSet,
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochLoss>,
}

pub fn train_run(
    ds: &EmbeddingDataset,
    split: &Split,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ablations: Ablations,
    config_hash: [u8; 32],
) -> Result<TrainOutcome> {
    let model = Model::new(ablations.apply(model_cfg, ds.dim), ds)?;
    let mut trainer = Trainer::new(model, ds, split, cfg.clone(), config_hash)?;
    trainer.run()?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome {
        model: trainer.model,
        params: trainer.params,
        checkpoint,
        trace: trainer.trace,
    })
}
