//! Command-line front end. `run` returns the process exit status.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint;
use crate::cost;
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::ffn;
use crate::gradcheck::GradCheckConfig;
use crate::gradsuite;
use crate::model::{
    build_model, extract_attention_maps, BlockVariant, ForwardOptions, Model, ModelConfig,
};
use crate::redundancy;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompareWith {
    Ours,
}

#[derive(Debug, Parser)]
#[command(
    name = "vitlite",
    version,
    about = "Hallucinated attention and compact FFN toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Model config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Params and FLOPs of a config.
    Count {
        #[command(flatten)]
        common: Common,
        /// Also count the hallucinated/compact variant and print deltas.
        #[arg(long, value_enum)]
        compare: Option<CompareWith>,
        /// Print the traced-vs-closed-form reconciliation.
        #[arg(long)]
        reconcile: bool,
    },
    /// Finite-difference check of every built-in VJP.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Seeds per op.
        #[arg(long, default_value_t = 10)]
        trials: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Restrict to these ops.
        #[arg(long = "op")]
        ops: Vec<String>,
    },
    /// Train-form vs merged compact FFN over random instances.
    ReparamVerify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Attention-map redundancy of a model.
    Ccs {
        #[command(flatten)]
        common: Common,
        /// Images `[B, C, H, W]` as tensor JSON; random normal when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Checkpoint directory to load instead of a fresh init.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Run both block variants on the same inputs.
        #[arg(long, value_enum)]
        compare: Option<CompareWith>,
    },
    /// SGD on the synthetic stripes dataset.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        images: usize,
        /// Loss curve CSV.
        #[arg(long, default_value = "loss.csv")]
        out: PathBuf,
        /// Save the trained weights here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Write per-block attention maps as JSON files.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Check(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ConfigMismatch(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Check(m)) => {
            let _ = writeln!(err, "check failed: {m}");
            EXIT_CHECK_FAILED
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_CHECK_FAILED
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .and_then(|_| {
            if text.ends_with('\n') {
                Ok(())
            } else {
                out.write_all(b"\n")
            }
        })
        .map_err(|e| Failure::Runtime(Error::io("<stdout>", e)))
}

fn require_config(common: &Common) -> std::result::Result<ModelConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config is required for this subcommand".into()))?;
    let mut cfg = ModelConfig::load(path).map_err(|e| match e {
        Error::Io { .. } | Error::Json(_) => Failure::Usage(e.to_string()),
        other => Failure::from(other),
    })?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Count {
            common,
            compare,
            reconcile,
        } => count(&common, compare, reconcile, out),
        Command::GradCheck {
            common,
            trials,
            tol,
            ops,
        } => grad_check(&common, trials, tol, &ops, out),
        Command::ReparamVerify {
            common,
            trials,
            tol,
        } => reparam_verify(&common, trials, tol, out),
        Command::Ccs {
            common,
            input,
            weights,
            batch,
            compare,
        } => ccs(
            &common,
            input.as_deref(),
            weights.as_deref(),
            batch,
            compare,
            out,
        ),
        Command::TrainToy {
            common,
            steps,
            lr,
            images,
            out: csv,
            save,
        } => train_toy(&common, steps, lr, images, &csv, save.as_deref(), out, err),
        Command::DumpAttn {
            common,
            out: dir,
            input,
            weights,
        } => dump_attn(&common, &dir, input.as_deref(), weights.as_deref(), out),
    }
}

fn count(
    common: &Common,
    compare: Option<CompareWith>,
    reconcile: bool,
    out: &mut dyn Write,
) -> CliResult {
    let cfg = require_config(common)?;
    let mut doc = serde_json::Map::new();
    let mut text = String::new();
    match compare {
        Some(CompareWith::Ours) => {
            let c = cost::compare(&cfg)?;
            text += &c.render_table();
            doc.insert(
                "comparison".into(),
                serde_json::to_value(&c).map_err(Error::from)?,
            );
        }
        None => {
            let r = cost::count_model(&cfg)?;
            text += &r.render_table();
            doc.insert(
                "report".into(),
                serde_json::to_value(&r).map_err(Error::from)?,
            );
        }
    }
    if reconcile {
        let variants: Vec<ModelConfig> = match compare {
            Some(_) => vec![
                cfg.clone().with_variant(BlockVariant::Vanilla),
                cfg.clone().with_variant(BlockVariant::Ours),
            ],
            None => vec![cfg.clone()],
        };
        let mut all = Vec::new();
        for v in &variants {
            let r = cost::reconcile(v).map_err(|e| match e {
                Error::Reconcile { .. } => Failure::Check(e.to_string()),
                other => other.into(),
            })?;
            text += &format!(
                "\nreconciliation ({:?})\n{}",
                v.block_variant,
                r.render_table()
            );
            all.push(serde_json::to_value(&r).map_err(Error::from)?);
        }
        doc.insert("reconciliation".into(), serde_json::Value::Array(all));
    }
    match common.format {
        Format::Table => emit(out, &text),
        Format::Json => emit(
            out,
            &serde_json::to_string_pretty(&doc).map_err(Error::from)?,
        ),
    }
}

fn grad_check(
    common: &Common,
    trials: u64,
    tol: f64,
    ops: &[String],
    out: &mut dyn Write,
) -> CliResult {
    let names: Vec<&str> = if ops.is_empty() {
        gradsuite::SUITE.to_vec()
    } else {
        ops.iter().map(String::as_str).collect()
    };
    let cfg = GradCheckConfig {
        tol,
        seed: common.seed.unwrap_or(0),
        ..Default::default()
    };
    let results = gradsuite::run_suite(&names, trials, &cfg).map_err(Failure::from)?;
    let first_fail = results.iter().find(|r| !r.passed());
    match common.format {
        Format::Json => emit(
            out,
            &serde_json::to_string_pretty(&json!({ "tol": tol, "seeds": trials, "ops": results }))
                .map_err(Error::from)?,
        )?,
        Format::Table => {
            let mut s = format!(
                "{:<20} {:>6} {:>14} {:>9}  status\n",
                "op", "seeds", "worst rel err", "attempts"
            );
            for r in &results {
                s += &format!(
                    "{:<20} {:>6} {:>14.3e} {:>9}  {}\n",
                    r.name,
                    r.seeds,
                    r.worst_rel_err,
                    r.max_attempts,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            emit(out, &s)?;
        }
    }
    match first_fail {
        Some(r) => Err(Failure::Check(format!(
            "{}: {}",
            r.name,
            r.failure.as_deref().unwrap_or("failed")
        ))),
        None => Ok(()),
    }
}

fn reparam_verify(common: &Common, trials: usize, tol: f64, out: &mut dyn Write) -> CliResult {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be positive".into()));
    }
    let sweep = ffn::reparam_sweep(trials, common.seed.unwrap_or(0))?;
    let worst = sweep
        .iter()
        .max_by(|a, b| a.max_abs_diff.total_cmp(&b.max_abs_diff))
        .expect("at least one trial");
    let ok = worst.max_abs_diff < tol;
    match common.format {
        Format::Json => emit(
            out,
            &serde_json::to_string_pretty(&json!({
                "trials": trials,
                "seed": common.seed.unwrap_or(0),
                "tol": tol,
                "max_abs_diff": worst.max_abs_diff,
                "worst_trial": worst,
                "passed": ok,
            }))
            .map_err(Error::from)?,
        )?,
        Format::Table => {
            let rel = if ok { "<" } else { ">=" };
            emit(
                out,
                &format!(
                    "trials = {trials}\nmax |Δ| = {:.3e} {rel} {tol:e}\n",
                    worst.max_abs_diff
                ),
            )?;
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "trial {} (C={}, m={}, t={}, r={}) differs by {:.3e}",
            worst.trial, worst.c, worst.m, worst.t, worst.r, worst.max_abs_diff
        )))
    }
}

fn load_or_build(cfg: &ModelConfig, weights: Option<&Path>) -> std::result::Result<Model, Failure> {
    match weights {
        Some(dir) => {
            let index = checkpoint::read_index(dir)?;
            Ok(checkpoint::load_weights_checked(dir, cfg, index.form)?)
        }
        None => Ok(build_model(cfg)?),
    }
}

fn images_for(
    cfg: &ModelConfig,
    input: Option<&Path>,
    batch: usize,
    seed: u64,
) -> std::result::Result<Tensor, Failure> {
    match input {
        Some(p) => Ok(Tensor::load(p)?),
        None => {
            if batch == 0 {
                return Err(Failure::Usage("--batch must be positive".into()));
            }
            let s = cfg.img_size;
            Ok(Rng::fork(seed, 0x696d_6167).normal_tensor(&[batch, cfg.in_channels, s, s], 1.0))
        }
    }
}

fn ccs_of(model: &Model, images: &Tensor) -> Result<redundancy::CcsReport> {
    let out = model.forward(
        images,
        ForwardOptions {
            capture_maps: true,
            ..Default::default()
        },
    )?;
    redundancy::ccs_batch(&extract_attention_maps(&out)?)
}

fn ccs(
    common: &Common,
    input: Option<&Path>,
    weights: Option<&Path>,
    batch: usize,
    compare: Option<CompareWith>,
    out: &mut dyn Write,
) -> CliResult {
    let cfg = require_config(common)?;
    let images = images_for(&cfg, input, batch, cfg.seed)?;
    let reports: Vec<(String, redundancy::CcsReport)> = match compare {
        None => vec![(
            format!("{:?}", cfg.block_variant).to_lowercase(),
            ccs_of(&load_or_build(&cfg, weights)?, &images)?,
        )],
        Some(CompareWith::Ours) => {
            if weights.is_some() {
                return Err(Failure::Usage(
                    "--compare builds fresh models; drop --weights".into(),
                ));
            }
            [BlockVariant::Vanilla, BlockVariant::Ours]
                .into_iter()
                .map(|v| -> Result<_> {
                    let m = build_model(&cfg.clone().with_variant(v))?;
                    Ok((format!("{v:?}").to_lowercase(), ccs_of(&m, &images)?))
                })
                .collect::<Result<_>>()?
        }
    };
    match common.format {
        Format::Json => {
            let map: serde_json::Map<String, serde_json::Value> = reports
                .iter()
                .map(|(k, r)| Ok((k.clone(), serde_json::to_value(r)?)))
                .collect::<Result<_>>()?;
            emit(
                out,
                &serde_json::to_string_pretty(&map).map_err(Error::from)?,
            )
        }
        Format::Table => {
            let mut s = String::new();
            for (k, r) in &reports {
                s += &format!("[{k}]\n{}", r.render_table());
            }
            emit(out, &s)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_toy(
    common: &Common,
    steps: usize,
    lr: f64,
    images: usize,
    csv: &Path,
    save: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult {
    let cfg = require_config(common)?;
    let data = ToyDataset::generate(&cfg, images, cfg.seed)?;
    let mut model = build_model(&cfg)?;
    let tc = TrainConfig {
        steps,
        lr,
        batch_size: None,
        seed: cfg.seed,
    };
    let _ = writeln!(err, "training {steps} steps on {images} images (lr {lr})");
    let losses = train::train_toy(&mut model, &data, &tc)?;
    train::write_loss_csv(csv, &losses)?;
    let eval = train::evaluate(&model, &data)?;
    if let Some(dir) = save {
        checkpoint::save_weights(&model, dir)?;
    }
    let last = losses.last().copied().unwrap_or(f64::NAN);
    match common.format {
        Format::Json => emit(
            out,
            &serde_json::to_string_pretty(&json!({
                "steps": steps,
                "lr": lr,
                "final_train_loss": last,
                "eval": eval,
                "loss_csv": csv.display().to_string(),
            }))
            .map_err(Error::from)?,
        ),
        Format::Table => emit(
            out,
            &format!(
                "final train loss {last:.6}\neval loss {:.6}, accuracy {:.4}\nloss curve written to {}\n",
                eval.loss,
                eval.accuracy,
                csv.display()
            ),
        ),
    }
}

fn dump_attn(
    common: &Common,
    dir: &Path,
    input: Option<&Path>,
    weights: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    let cfg = require_config(common)?;
    let model = load_or_build(&cfg, weights)?;
    let images = images_for(&cfg, input, 1, cfg.seed)?;
    let fwd = model.forward(
        &images,
        ForwardOptions {
            capture_maps: true,
            ..Default::default()
        },
    )?;
    let maps = extract_attention_maps(&fwd)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for stack in &maps[0] {
        let path = dir.join(format!("attn_block{}.json", stack.block_index));
        let doc = json!({
            "block_index": stack.block_index,
            "provenance": stack.provenance,
            "maps": serde_json::from_str::<serde_json::Value>(&stack.maps.to_json()?).map_err(Error::from)?,
        });
        std::fs::write(&path, serde_json::to_string(&doc).map_err(Error::from)?)
            .map_err(|e| Error::io(&path, e))?;
        written.push(path.display().to_string());
    }
    match common.format {
        Format::Json => emit(
            out,
            &serde_json::to_string_pretty(&json!({ "files": written })).map_err(Error::from)?,
        ),
        Format::Table => emit(
            out,
            &format!("wrote {} file(s) to {}\n", written.len(), dir.display()),
        ),
    }
}
