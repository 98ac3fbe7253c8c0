//! Accuracy, harmonic mean, task runs and the retention sweep.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::{finite_diff_check, DenseArray, GradCheckReport, ParamSet};
use crate::data::{make_split, synth_generate, EmbeddingDataset, EvalSet, Split, SynthConfig, Task};
use crate::error::{param_err, Result};
use crate::model::{Model, ModelConfig};
use crate::objective::predict;
use crate::prompting::CONTEXT;
use crate::trainer::{train_run, Ablations, EpochLoss, TrainConfig, TrainOutcome};

/// `2ab/(a+b)`, and zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Top-1 accuracy in percent over `set`, scoring `eval_batch` records per
/// forward pass. With a batch of one, self-attention sees only the sample.
pub fn evaluate_accuracy(
    model: &Model,
    params: &ParamSet,
    ds: &EmbeddingDataset,
    set: &EvalSet,
    eval_batch: usize,
) -> Result<f64> {
    if set.records.is_empty() {
        return Err(param_err!("evaluation set {:?} is empty", set.name));
    }
    if set.classes.is_empty() || eval_batch == 0 {
        return Err(param_err!("evaluation needs classes and a positive batch size"));
    }
    let mut correct = 0usize;
    for ids in set.records.chunks(eval_batch) {
        let batch = ds.batch(ids, &set.name)?;
        let post = model.posterior(params, &batch.features, &set.classes)?;
        for (i, &label) in batch.labels.iter().enumerate() {
            if set.classes[predict(post.row(i))?] == label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / set.records.len() as f64)
}

/// A copy of `params` whose context tokens are replaced by `context`.
pub fn with_context(params: &ParamSet, context: DenseArray) -> Result<ParamSet> {
    let current = params.get(CONTEXT).ok_or_else(|| param_err!("no context tokens in parameters"))?;
    if current.shape() != context.shape() {
        return Err(param_err!("context {:?} does not replace {:?}", context.shape(), current.shape()));
    }
    let mut out = params.clone();
    out.insert(CONTEXT, context, false);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub seed: u64,
    pub config_hash: String,
    pub ablations: Vec<&'static str>,
    pub k: usize,
    /// `(set name, accuracy %)` per evaluation set.
    pub accuracies: Vec<(String, f64)>,
    /// Base-to-new harmonic mean.
    pub hm: Option<f64>,
    /// HM for base-to-new, mean set accuracy otherwise.
    pub metric: f64,
    pub final_loss: Option<EpochLoss>,
}

impl MetricsReport {
    pub fn new(task: Task, seed: u64, config_hash: &str, ablations: &Ablations, k: usize, accuracies: Vec<(String, f64)>) -> Self {
        let hm = (task == Task::B2n && accuracies.len() == 2).then(|| harmonic_mean(accuracies[0].1, accuracies[1].1));
        let metric = hm.unwrap_or_else(|| accuracies.iter().map(|(_, a)| a).sum::<f64>() / accuracies.len().max(1) as f64);
        Self {
            task,
            seed,
            config_hash: config_hash.to_string(),
            ablations: ablations.flags(),
            k,
            accuracies,
            hm,
            metric,
            final_loss: None,
        }
    }

    pub fn accuracy(&self, set: &str) -> Option<f64> {
        self.accuracies.iter().find(|(n, _)| n == set).map(|(_, a)| *a)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let flags = if self.ablations.is_empty() { "none".to_string() } else { self.ablations.join(", ") };
        let _ = writeln!(s, "task {} | seed {} | k {} | ablations {flags}", self.task, self.seed, self.k);
        for (name, acc) in &self.accuracies {
            let _ = writeln!(s, "  {name:<12} {acc:6.2}%");
        }
        if let Some(hm) = self.hm {
            let _ = writeln!(s, "  {:<12} {hm:6.2}%", "HM");
        }
        if let Some(l) = self.final_loss {
            let _ = writeln!(s, "  final loss {:.5} (ce {:.5}, rpa {:.5})", l.total, l.ce, l.rpa);
        }
        let _ = writeln!(s, "config {}", self.config_hash);
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task={}", self.task);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "ablations={}", self.ablations.join(","));
        let _ = writeln!(s, "k={}", self.k);
        for (name, acc) in &self.accuracies {
            let _ = writeln!(s, "acc.{name}={acc:.6}");
        }
        if let Some(hm) = self.hm {
            let _ = writeln!(s, "hm={hm:.6}");
        }
        let _ = writeln!(s, "metric={:.6}", self.metric);
        if let Some(l) = self.final_loss {
            let _ = writeln!(s, "loss.total={:.9}", l.total);
            let _ = writeln!(s, "loss.ce={:.9}", l.ce);
            let _ = writeln!(s, "loss.rpa={:.9}", l.rpa);
        }
        s
    }
}

/// Scores every evaluation set of a split.
pub fn evaluate_split(
    model: &Model,
    params: &ParamSet,
    ds: &EmbeddingDataset,
    split: &Split,
    eval_batch: usize,
) -> Result<Vec<(String, f64)>> {
    split
        .eval_sets
        .iter()
        .map(|set| Ok((set.name.clone(), evaluate_accuracy(model, params, ds, set, eval_batch)?)))
        .collect()
}

/// One training-and-evaluation job.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub task: Task,
    pub shots: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablations: Ablations,
    pub eval_batch: usize,
    pub config_hash: [u8; 32],
}

pub fn hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits with the training seed, trains and evaluates.
pub fn run_experiment(ds: &EmbeddingDataset, spec: &RunSpec) -> Result<(MetricsReport, TrainOutcome)> {
    let split = make_split(ds, spec.task, spec.train.seed, spec.shots)?;
    let out = train_run(ds, &split, &spec.model, &spec.train, spec.ablations, spec.config_hash)?;
    let accs = evaluate_split(&out.model, &out.params, ds, &split, spec.eval_batch)?;
    let mut report = MetricsReport::new(spec.task, spec.train.seed, &hex(&spec.config_hash), &spec.ablations, out.model.k(), accs);
    report.final_loss = out.trace.last().copied();
    Ok((report, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub std: f64,
    pub reports: Vec<MetricsReport>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and evaluates one run per `(k, seed)` in parallel and averages the
/// task metric per `k`.
pub fn k_sensitivity_sweep(ds: &EmbeddingDataset, base: &RunSpec, k_list: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if k_list.is_empty() || seeds.is_empty() {
        return Err(param_err!("sweep needs at least one k and one seed"));
    }
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > ds.dim) {
        return Err(param_err!("k = {k} outside [1, {}]", ds.dim));
    }
    let jobs: Vec<(usize, u64)> = k_list.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let results: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(k, s)| {
            let mut spec = base.clone();
            spec.model.k = k;
            spec.train.seed = s;
            run_experiment(ds, &spec).map(|(r, _)| r)
        })
        .collect();
    let mut reports = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    Ok(k_list
        .iter()
        .map(|&k| {
            let rs: Vec<MetricsReport> = reports.by_ref().take(seeds.len()).collect();
            let (mean, std) = mean_std(&rs.iter().map(|r| r.metric).collect::<Vec<_>>());
            SweepRow { k, mean, std, reports: rs }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k,mean,std\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.k, r.mean, r.std);
    }
    s
}

/// Finite-difference audit of the full loss at width `dim`: batch of 3,
/// two context tokens, four classes, learnable fusion gain, for full
/// retention and for `k = round(11·dim/16)`.
pub fn gradient_audit(dim: usize, seed: u64) -> Result<Vec<(usize, GradCheckReport)>> {
    if dim < 8 || dim % 4 != 0 {
        return Err(param_err!("audit width {dim} must be a multiple of 4, at least 8"));
    }
    let ds = synth_generate(&SynthConfig {
        n_classes: 4,
        n_domains: 2,
        dim,
        samples_per: 3,
        low_band: (3 * dim / 8).max(2),
        clutter_gain: vec![0.0, 0.5],
        seed,
        text_variants: 2,
        text_noise: 0.5,
    })?;
    let batch = ds.batch(&[0, 4, 8], "audit")?;
    let classes = [0, 1, 2, 3];
    let mut out = Vec::new();
    for k in [dim, ((11 * dim) as f64 / 16.0).round() as usize] {
        let cfg = ModelConfig {
            context_len: 2,
            learn_lambda: true,
            k,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, &ds)?;
        let params = model.init_params(seed)?;
        let r = finite_diff_check(&params, 1e-5, |t, b| Ok(model.losses(t, b, &batch, &classes)?.total))?;
        out.push((k, r));
    }
    Ok(out)
}
