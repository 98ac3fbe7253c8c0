//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::DenseArray;
use crate::config::{ExperimentConfig, SEED_ENV};
use crate::data::{make_split, read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, gradient_audit, hex, k_sensitivity_sweep, run_experiment, sweep_csv, MetricsReport};
use crate::model::Model;
use crate::spectral::{dft_lowpass_2d, read_pgm, write_pgm};
use crate::trainer::Checkpoint;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "frogdog", version, about = "Fourier-filtered prompt learning over frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set model.k=48`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic embedding dataset from the `[synth]` section.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run and evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for the checkpoint and reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eval_batch: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eval_batch: Option<usize>,
    },
    /// Train and evaluate over retention values and seeds.
    SweepK {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated retention values; defaults to `k_list`.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Comma-separated seeds; defaults to `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Directory for the CSV table and per-run reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Low-pass an image in the 2D frequency domain and write PGMs.
    DemoImage {
        /// P5 PGM input; a built-in test pattern when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Fraction of bins kept along each axis.
        #[arg(long, default_value_t = 0.5)]
        keep: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Validate a dataset file and print its header.
    Inspect { path: PathBuf },
    /// Finite-difference audit of the full training loss.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit_report(report: &MetricsReport, dir: Option<&Path>, stem: &str, out: &mut dyn Write) -> Result<()> {
    let io = |e| Error::io("<stdout>", e);
    out.write_all(report.to_text().as_bytes()).map_err(io)?;
    match dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            write_file(&d.join(format!("{stem}.txt")), &report.to_text())?;
            write_file(&d.join(format!("{stem}.kv")), &report.to_kv())?;
        }
        None => {
            writeln!(out, "---").map_err(io)?;
            out.write_all(report.to_kv().as_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

fn test_pattern(n: usize) -> DenseArray {
    DenseArray::from_fn(&[n, n], |i| {
        let (r, c) = ((i / n) as f64 / n as f64, (i % n) as f64 / n as f64);
        let smooth = 0.5 + 0.25 * (std::f64::consts::TAU * r).sin() * (std::f64::consts::TAU * c).cos();
        let square = if (0.3..0.6).contains(&r) && (0.35..0.7).contains(&c) { 0.4 } else { 0.0 };
        let stripes = if (i % n) % 4 < 2 { 0.1 } else { -0.1 };
        smooth + square + stripes
    })
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    let io = |e| Error::io("<stdout>", e);
    match cmd {
        Command::Synth { cfg, out: path } => {
            let cfg = load_config(&cfg)?;
            let ds = crate::data::synth_generate(&cfg.synth)?;
            write_dataset(&ds, &path)?;
            writeln!(out, "wrote {} records (d={}) to {}", ds.records.len(), ds.dim, path.display()).map_err(io)?;
        }
        Command::Train { cfg, out: dir, eval_batch } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(b) = eval_batch {
                cfg.eval_batch = b;
            }
            let ds = cfg.dataset()?;
            let (report, outcome) = run_experiment(&ds, &cfg.run_spec())?;
            if let Some(d) = &dir {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                outcome.checkpoint.save(&d.join("checkpoint.fdck"))?;
                write_file(&d.join("config.toml"), &cfg.to_toml())?;
            }
            emit_report(&report, dir.as_deref(), "report", out)?;
        }
        Command::Eval { cfg, checkpoint, out: dir, eval_batch } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(b) = eval_batch {
                cfg.eval_batch = b;
            }
            let ck = Checkpoint::load(&checkpoint)?;
            let hash = cfg.hash();
            if ck.config_hash != hash {
                log::warn!("checkpoint was trained under config {}, evaluating under {}", hex(&ck.config_hash), hex(&hash));
            }
            let ds = cfg.dataset()?;
            let model = Model::new(cfg.ablations.apply(&cfg.model, ds.dim), &ds)?;
            let split = make_split(&ds, cfg.task, ck.seed, cfg.shots)?;
            let accs = evaluate_split(&model, &ck.params, &ds, &split, cfg.eval_batch)?;
            let report = MetricsReport::new(cfg.task, ck.seed, &hex(&hash), &cfg.ablations, model.k(), accs);
            emit_report(&report, dir.as_deref(), "eval", out)?;
        }
        Command::SweepK { cfg, k, seeds, out: dir } => {
            let cfg = load_config(&cfg)?;
            let k_list = if k.is_empty() { cfg.k_list.clone() } else { k };
            let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds };
            let ds = cfg.dataset()?;
            let rows = k_sensitivity_sweep(&ds, &cfg.run_spec(), &k_list, &seeds)?;
            let csv = sweep_csv(&rows);
            match &dir {
                Some(d) => {
                    fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                    for r in rows.iter().flat_map(|row| &row.reports) {
                        let stem = format!("k{}_seed{}", r.k, r.seed);
                        write_file(&d.join(format!("{stem}.txt")), &r.to_text())?;
                        write_file(&d.join(format!("{stem}.kv")), &r.to_kv())?;
                    }
                    write_file(&d.join("sweep.csv"), &csv)?;
                }
                None => {
                    for r in rows.iter().flat_map(|row| &row.reports) {
                        out.write_all(r.to_kv().as_bytes()).map_err(io)?;
                        writeln!(out, "---").map_err(io)?;
                    }
                }
            }
            out.write_all(csv.as_bytes()).map_err(io)?;
        }
        Command::DemoImage { input, keep, out_dir } => {
            let image = match &input {
                Some(p) => read_pgm(p)?,
                None => test_pattern(64),
            };
            let res = dft_lowpass_2d(&image, keep)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            write_pgm(&out_dir.join("input.pgm"), &image)?;
            write_pgm(&out_dir.join("filtered.pgm"), &res.filtered)?;
            write_pgm(&out_dir.join("spectrum.pgm"), &res.log_magnitude)?;
            writeln!(out, "wrote input.pgm, filtered.pgm and spectrum.pgm to {}", out_dir.display()).map_err(io)?;
        }
        Command::Inspect { path } => {
            let ds = read_dataset(&path)?;
            writeln!(out, "d={}", ds.dim).map_err(io)?;
            writeln!(out, "classes={}", ds.n_classes()).map_err(io)?;
            writeln!(out, "domains={}", ds.n_domains()).map_err(io)?;
            writeln!(out, "records={}", ds.records.len()).map_err(io)?;
            let bank = ds.text_bank.as_ref().map_or("none".to_string(), |t| t.variants.to_string());
            writeln!(out, "text_bank={bank}").map_err(io)?;
            writeln!(out, "off_norm_records={}", ds.off_norm_records()).map_err(io)?;
            writeln!(out, "class_names={}", ds.class_names.join(",")).map_err(io)?;
            writeln!(out, "domain_names={}", ds.domains.join(",")).map_err(io)?;
        }
        Command::Gradcheck { dim, seed } => {
            let mut worst = 0.0f64;
            for (k, r) in gradient_audit(dim, seed)? {
                writeln!(out, "k={k} entries={} max_rel_error={:.3e} worst={:?}", r.entries_checked, r.max_rel_error, r.worst).map_err(io)?;
                worst = worst.max(r.max_rel_error);
            }
            let ok = worst < AUDIT_TOLERANCE;
            writeln!(out, "{} (tolerance {AUDIT_TOLERANCE:e})", if ok { "PASS" } else { "FAIL" }).map_err(io)?;
            if !ok {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(EXIT_OK)
}
