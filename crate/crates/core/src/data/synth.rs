use rand::Rng;
use rand_distr::StandardNormal;

use super::format::{EmbeddingDataset, Record, TextBank};
use crate::error::{param_err, Result};
use crate::seed;
use crate::spectral::centered_frequency;
use crate::spectral::{dft_1d, idft_1d};

/// Within-class jitter norm.
pub const SIGMA_LOW: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_domains: usize,
    pub dim: usize,
    pub samples_per: usize,
    /// Class structure lives on bins with `|f| < low_band / 2`.
    pub low_band: usize,
    /// Expected norm of the high-band clutter added in each domain.
    pub clutter_gain: Vec<f64>,
    pub seed: u64,
    /// Reference text embeddings per class; zero omits the text bank.
    pub text_variants: usize,
    /// Norm of the isotropic noise separating a text embedding from its
    /// class prototype.
    pub text_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_domains: 2,
            dim: 128,
            samples_per: 64,
            low_band: 32,
            clutter_gain: vec![0.0, 0.6],
            seed: 0,
            text_variants: 4,
            text_noise: 6.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_domains == 0 || self.samples_per == 0 {
            return Err(param_err!("class, domain and sample counts must be positive"));
        }
        if self.low_band < 2 || self.low_band >= self.dim {
            return Err(param_err!("low band {} outside [2, {})", self.low_band, self.dim));
        }
        if self.clutter_gain.len() != self.n_domains {
            return Err(param_err!("{} clutter gains for {} domains", self.clutter_gain.len(), self.n_domains));
        }
        if self.clutter_gain.iter().chain([&self.text_noise]).any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(param_err!("gains and noise levels must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn in_low_band(&self, q: usize) -> bool {
        (centered_frequency(q, self.dim).unsigned_abs() as f64) < self.low_band as f64 / 2.0
    }
}

/// Gaussian vector projected onto the chosen half of the spectrum; scaled so
/// that its expected squared norm is `target²`.
fn band_noise<R: Rng>(cfg: &SynthConfig, low: bool, target: f64, rng: &mut R) -> Vec<f64> {
    let d = cfg.dim;
    let bins = (0..d).filter(|&q| cfg.in_low_band(q) == low).count().max(1);
    let std = target / (bins as f64).sqrt();
    let x: Vec<f64> = (0..d).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut s = dft_1d(&x).expect("non-empty");
    for q in 0..d {
        if cfg.in_low_band(q) != low {
            s.re[q] = 0.0;
            s.im[q] = 0.0;
        }
    }
    idft_1d(&s).values
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Unit class prototypes on the low band, jittered per sample, plus
/// per-domain high-band clutter, renormalised and stored at 32 bits.
pub fn synth_generate(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = seed::rng(cfg.seed, "synth-prototypes");
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_classes).map(|_| unit(band_noise(cfg, true, 1.0, &mut rng))).collect();

    let mut records = Vec::with_capacity(cfg.n_classes * cfg.n_domains * cfg.samples_per);
    for (dom, &gain) in cfg.clutter_gain.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(cfg.seed, dom as u64), "synth-samples");
        for (class, proto) in prototypes.iter().enumerate() {
            for _ in 0..cfg.samples_per {
                let jitter = band_noise(cfg, true, SIGMA_LOW, &mut rng);
                let clutter = band_noise(cfg, false, gain, &mut rng);
                let v: Vec<f64> = (0..d).map(|i| proto[i] + jitter[i] + clutter[i]).collect();
                records.push(Record {
                    class,
                    domain: dom,
                    features: unit(v).into_iter().map(|x| x as f32).collect(),
                });
            }
        }
    }

    let text_bank = (cfg.text_variants > 0).then(|| {
        let mut rng = seed::rng(cfg.seed, "synth-text");
        let mut data = Vec::with_capacity(cfg.text_variants * cfg.n_classes * d);
        for _ in 0..cfg.text_variants {
            for proto in &prototypes {
                let noise: Vec<f64> = (0..d)
                    .map(|_| cfg.text_noise / (d as f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let v: Vec<f64> = proto.iter().zip(&noise).map(|(p, n)| p + n).collect();
                data.extend(unit(v).into_iter().map(|x| x as f32));
            }
        }
        TextBank {
            variants: cfg.text_variants,
            data,
        }
    });

    Ok(EmbeddingDataset {
        dim: d,
        class_names: (0..cfg.n_classes).map(|c| format!("class_{c:02}")).collect(),
        domains: (0..cfg.n_domains).map(|i| format!("dom_{i}")).collect(),
        records,
        text_bank,
    })
}
