//! Command-line front end over [`crate::pipeline`].
//!
//! Settings resolve as built-in defaults, then `--config` file, then the
//! path environment variables, then flags.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::pipeline::{self, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "wsi-mil", version, about = "Weakly-supervised whole-slide image classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    slides_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    store_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic slide set with planted diseased patches.
    Fixture {
        #[arg(long)]
        n_slides: Option<usize>,
        #[arg(long)]
        diseased_fraction: Option<f64>,
        #[arg(long)]
        planted_fraction: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Write tissue patch manifests for every slide.
    Tile {
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        min_tissue_fraction: Option<f64>,
    },
    /// Encode manifest patches with the toy encoder into the feature store.
    Encode {
        #[arg(long)]
        truncate_k: Option<usize>,
    },
    /// Validate and install an externally written feature store.
    ImportFeatures {
        #[arg(long)]
        store: PathBuf,
    },
    /// Train the attention head on frozen features.
    TrainHead {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Fine-tune encoder and head on top-k attended patches.
    Finetune {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Select patches once instead of every epoch.
        #[arg(long)]
        static_topk: bool,
        #[arg(long)]
        max_grad_norm: Option<f64>,
    },
    /// Block-wise CKA between frozen and fine-tuned encoders.
    Cka {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Retrain the head on every truncation level of the encoder.
    TruncateEval {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Merge stage outputs into report.csv.
    Report,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve(cli: &Cli, env: &dyn Fn(&str) -> Option<String>) -> Result<PipelineConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env(env);
    let c = &cli.common;
    set(&mut cfg.seed, c.seed);
    set(&mut cfg.paths.slides_dir, c.slides_dir.clone());
    set(&mut cfg.paths.store_dir, c.store_dir.clone());
    set(&mut cfg.paths.output_dir, c.output_dir.clone());
    match &cli.command {
        Command::Fixture {
            n_slides,
            diseased_fraction,
            planted_fraction,
            noise_std,
        } => {
            set(&mut cfg.fixture.n_slides, *n_slides);
            set(&mut cfg.fixture.diseased_fraction, *diseased_fraction);
            set(&mut cfg.fixture.planted_fraction, *planted_fraction);
            set(&mut cfg.fixture.noise_std, *noise_std);
        }
        Command::Tile {
            patch_size,
            stride,
            min_tissue_fraction,
        } => {
            set(&mut cfg.tiling.patch_size, *patch_size);
            if stride.is_some() {
                cfg.tiling.stride = *stride;
            }
            set(&mut cfg.tiling.min_tissue_fraction, *min_tissue_fraction);
        }
        Command::Encode { truncate_k } => set(&mut cfg.encoder.truncate_k, *truncate_k),
        Command::TrainHead {
            epochs,
            learning_rate,
            hidden,
            patience,
        } => {
            set(&mut cfg.train.epochs, *epochs);
            set(&mut cfg.train.learning_rate, *learning_rate);
            set(&mut cfg.train.hidden, *hidden);
            set(&mut cfg.train.patience, *patience);
        }
        Command::Finetune {
            k,
            learning_rate,
            epochs,
            static_topk,
            max_grad_norm,
        } => {
            set(&mut cfg.finetune.k, *k);
            set(&mut cfg.finetune.learning_rate, *learning_rate);
            set(&mut cfg.finetune.epochs, *epochs);
            cfg.finetune.static_topk |= *static_topk;
            set(&mut cfg.finetune.max_grad_norm, *max_grad_norm);
        }
        Command::Cka { samples } => set(&mut cfg.cka.samples, *samples),
        Command::TruncateEval { epochs } => set(&mut cfg.train.epochs, *epochs),
        Command::ImportFeatures { .. } | Command::Report => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| format!("{x:.4}"))
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let line = |out: &mut dyn std::io::Write, s: String| {
        writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
    };
    match &cli.command {
        Command::Fixture { .. } => {
            let s = pipeline::run_fixture(cfg)?;
            line(out, format!("fixture: {} slides ({} diseased), {} planted cells", s.slides, s.diseased, s.planted_cells))
        }
        Command::Tile { .. } => {
            let s = pipeline::run_tile(cfg)?;
            line(out, format!("tile: {} slides, {} patches, {} slides without tissue patches", s.slides, s.patches, s.empty_slides))
        }
        Command::Encode { .. } => {
            let s = pipeline::run_encode(cfg)?;
            line(out, format!("encode: {} (d = {}), {} slides, {} patches, {} skipped", s.encoder, s.dim, s.slides, s.patches, s.skipped))
        }
        Command::ImportFeatures { store } => {
            let s = pipeline::run_import(cfg, store)?;
            line(out, format!("import-features: {} (d = {}), {} slides", s.encoder, s.dim, s.slides))
        }
        Command::TrainHead { .. } => {
            let s = pipeline::run_train_head(cfg)?;
            line(out, format!(
                "train-head: {} best epoch {}, AUC train {} val {} test {}",
                s.encoder, s.best_epoch, opt(s.train_auc), opt(s.val_auc), opt(s.test_auc)
            ))
        }
        Command::Finetune { .. } => {
            let s = pipeline::run_finetune(cfg)?;
            line(out, format!(
                "finetune: test AUC frozen {} tuned {}, top-k precision frozen {} tuned {}, {} slides skipped",
                opt(s.frozen_test_auc), opt(s.tuned_test_auc), opt(s.frozen_precision), opt(s.tuned_precision), s.skipped
            ))
        }
        Command::Cka { .. } => {
            let s = pipeline::run_cka(cfg)?;
            let diag: Vec<String> = s.blocks.iter().zip(&s.diagonal).map(|(b, v)| format!("block{b} {v:.6}")).collect();
            line(out, format!("cka ({} patches): {}", s.n_samples, diag.join(", ")))
        }
        Command::TruncateEval { .. } => {
            for r in pipeline::run_truncate_eval(cfg)? {
                line(out, format!("{:<20} d = {:<4} val AUC {} test AUC {}", r.encoder, r.dim, opt(r.val_auc), opt(r.test_auc)))?;
            }
            Ok(())
        }
        Command::Report => {
            let text = pipeline::run_report(cfg)?;
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// Runs one invocation with an explicit environment, writing normal
/// output to `out` and diagnostics to stderr. Returns the exit code:
/// 0 on success, 2 for IO failures, 1 for everything else.
pub fn run_with<I, T>(args: I, env: &dyn Fn(&str) -> Option<String>, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match resolve(&cli, env).and_then(|cfg| dispatch(&cli, &cfg, out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// [`run_with`] against the process environment and stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env = |k: &str| std::env::var(k).ok();
    run_with(args, &env, &mut std::io::stdout().lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut out = Vec::new();
        assert_eq!(run_with(["wsi-mil", "tile", "--bogus"], &no_env, &mut out), 1);
        assert_eq!(run_with(["wsi-mil", "frobnicate"], &no_env, &mut out), 1);
        assert_eq!(run_with(["wsi-mil", "--help"], &no_env, &mut out), 0);
    }

    #[test]
    fn flags_override_file_and_env() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, "seed = 4\n[paths]\noutput_dir = \"from-file\"\n[train]\nepochs = 3\n").unwrap();
        let cfg_arg = cfg_path.to_str().unwrap();
        let env = |k: &str| (k == pipeline::ENV_OUTPUT_DIR).then(|| "from-env".to_string());

        let cli = Cli::try_parse_from(["wsi-mil", "--config", cfg_arg, "train-head", "--epochs", "7"]).unwrap();
        let cfg = resolve(&cli, &env).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("from-env"));

        let cli = Cli::try_parse_from(["wsi-mil", "--config", cfg_arg, "report", "--output-dir", "flag"]).unwrap();
        assert_eq!(resolve(&cli, &env).unwrap().paths.output_dir, PathBuf::from("flag"));
    }

    #[test]
    fn invalid_values_fail_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("out");
        let mut out = Vec::new();
        let code = run_with(
            ["wsi-mil", "--output-dir", out_dir.to_str().unwrap(), "tile", "--min-tissue-fraction", "1.5"],
            &no_env,
            &mut out,
        );
        assert_eq!(code, 1);
        assert!(!out_dir.exists());
    }

    #[test]
    fn missing_inputs_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Vec::new();
        let code = run_with(
            ["wsi-mil", "--slides-dir", dir.path().join("none").to_str().unwrap(), "tile"],
            &no_env,
            &mut out,
        );
        assert_eq!(code, 2);
    }
}
