//! Command line front end.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use dkgh_core::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use dkgh_core::loss::objective;
use dkgh_core::metrics::routing_purity;
use dkgh_core::model::DkghNet;
use dkgh_core::moe::BranchKind;
use dkgh_core::{rng, Real, Tape, Tensor};
use rand::Rng;

use crate::checkpoint;
use crate::config::{Precision, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{Error, IoContext, Result};
use crate::manifest::load_manifest;
use crate::split::subject_kfold;
use crate::synth::{generate_synthetic, load_groups, SyntheticSpec};
use crate::train::{evaluate, routing_csv, train, write_outputs, Evaluation};

#[derive(Debug, Parser)]
#[command(name = "dkgh", version, about = "Gaze-guided hybrid mixture-of-experts classifier", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a key=value spec.
    SynthGen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold; writes metrics.csv, checkpoint/ and last/ under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Also write metrics.txt and routing.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective on a small batch.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Routing records of every manifest sample as CSV.
    RouteDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<u8> {
    match cmd {
        Command::SynthGen { spec, out: dir } => {
            let spec = SyntheticSpec::load(&spec)?;
            let manifest = generate_synthetic(&spec, &dir)?;
            say(out, format!("wrote {} samples, manifest {}", spec.num_subjects * spec.samples_per_subject, manifest.display()));
            Ok(0)
        }
        Command::Train { config, manifest, out: dir } => {
            let cfg = TrainConfig::load(&config)?;
            match cfg.precision {
                Precision::F64 => train_cmd::<f64>(&cfg, &manifest, &dir, out),
                Precision::F32 => train_cmd::<f32>(&cfg, &manifest, &dir, out),
            }?;
            Ok(0)
        }
        Command::Eval {
            checkpoint: ck,
            manifest,
            fold,
            out: dir,
        } => {
            let cfg = checkpoint::load_config(&ck)?;
            match cfg.precision {
                Precision::F64 => eval_cmd::<f64>(&ck, &manifest, fold, dir.as_deref(), out),
                Precision::F32 => eval_cmd::<f32>(&ck, &manifest, fold, dir.as_deref(), out),
            }?;
            Ok(0)
        }
        Command::Gradcheck { config } => {
            let cfg = TrainConfig::load(&config)?;
            let report = gradcheck(&cfg)?;
            say(
                out,
                format!(
                    "max relative error {:e} over {} coordinates (k={}, tolerance 1e-4)",
                    report.max_rel_error, report.coords_checked, cfg.model.top_k
                ),
            );
            if let Some(w) = &report.worst {
                say(out, format!("worst: {}[{}] analytic {:e} numeric {:e}", w.param, w.index, w.analytic, w.numeric));
            }
            say(out, if report.passed { "PASS" } else { "FAIL" }.to_string());
            Ok(if report.passed { 0 } else { 2 })
        }
        Command::RouteDump {
            checkpoint: ck,
            manifest,
            out: path,
        } => {
            let cfg = checkpoint::load_config(&ck)?;
            match cfg.precision {
                Precision::F64 => route_dump::<f64>(&ck, &manifest, &path),
                Precision::F32 => route_dump::<f32>(&ck, &manifest, &path),
            }?;
            say(out, format!("wrote {}", path.display()));
            Ok(0)
        }
    }
}

fn say(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

fn load_data<T: Real>(manifest: &Path, num_classes: usize) -> Result<Dataset<T>> {
    Dataset::load(load_manifest(manifest, num_classes)?)
}

fn train_cmd<T: Real>(cfg: &TrainConfig, manifest: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let data = load_data::<T>(manifest, cfg.model.num_classes)?;
    let folds = subject_kfold(&data.rows, cfg.folds, cfg.seed)?;
    let fold = &folds[cfg.fold];
    let outcome = train(cfg, &data, fold, &mut |row| {
        let m = &row.metrics;
        say(
            out,
            format!(
                "epoch {:>3} {:<5} loss {:.5} acc {:6.2} auc {}",
                row.epoch,
                row.split,
                m.loss_total,
                m.acc,
                m.auc.map_or("n/a".into(), |a| format!("{a:6.2}"))
            ),
        )
    })?;
    write_outputs(dir, cfg, &outcome)?;
    say(out, format!("best test AUC at epoch {}; outputs in {}", outcome.best_epoch, dir.display()));
    Ok(())
}

/// Evaluation of a checkpoint on one fold's test split, plus purity of the
/// domain-expert routing per block when a `gaze_groups.csv` sits next to the
/// manifest.
pub fn evaluate_checkpoint<T: Real>(
    ck: &Path,
    manifest: &Path,
    fold: usize,
) -> Result<(Evaluation<T>, Dataset<T>, Option<Vec<f64>>)> {
    let (net, cfg) = checkpoint::load::<T>(ck)?;
    let data = load_data::<T>(manifest, cfg.model.num_classes)?;
    let folds = subject_kfold(&data.rows, cfg.folds, cfg.seed)?;
    let f = folds
        .get(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} is not in [0, {})", cfg.folds)))?;
    let eval = evaluate(&net, &data, &f.test, cfg.lambda, cfg.batch_size)?;
    let purity = group_purity(&net, &eval, &data, manifest)?;
    Ok((eval, data, purity))
}

fn group_purity<T: Real>(net: &DkghNet<T>, eval: &Evaluation<T>, data: &Dataset<T>, manifest: &Path) -> Result<Option<Vec<f64>>> {
    let path = manifest.parent().unwrap_or(Path::new("")).join("gaze_groups.csv");
    if !path.is_file() {
        return Ok(None);
    }
    let groups: HashMap<String, usize> = load_groups(&path)?;
    let mut ids = Vec::new();
    for &i in &eval.indices {
        let id = &data.rows[i].sample_id;
        ids.push(*groups.get(id).ok_or_else(|| Error::parse(&path, None, format!("no group for `{id}`")))?);
    }
    let mut out = Vec::new();
    for block in 0..net.config().hybrid_blocks() {
        let top1 = eval.top1(block, BranchKind::DomainExpert);
        out.push(routing_purity(&top1, &ids, net.config().num_experts)?);
    }
    Ok(Some(out))
}

fn eval_cmd<T: Real>(ck: &Path, manifest: &Path, fold: usize, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (eval, data, purity) = evaluate_checkpoint::<T>(ck, manifest, fold)?;
    let m = &eval.metrics;
    let mut text = format!(
        "acc {}\nauc {}\nloss_cls {}\nloss_lb {}\nloss_total {}\n",
        m.acc,
        m.auc.map_or("nan".into(), |a| a.to_string()),
        m.loss_cls,
        m.loss_lb,
        m.loss_total
    );
    if let Some(p) = &purity {
        for (b, v) in p.iter().enumerate() {
            text.push_str(&format!("purity_b{b}_DE {v}\n"));
        }
    }
    let _ = write!(out, "{text}");
    if let Some(dir) = dir {
        fs::create_dir_all(dir).at(dir)?;
        let experts = eval.records.first().map_or(0, |r| r.raw_scores.len());
        fs::write(dir.join("metrics.txt"), &text).at(dir.join("metrics.txt"))?;
        fs::write(dir.join("routing.csv"), routing_csv(&eval, &data, experts)).at(dir.join("routing.csv"))?;
    }
    Ok(())
}

fn route_dump<T: Real>(ck: &Path, manifest: &Path, path: &Path) -> Result<()> {
    let (net, cfg) = checkpoint::load::<T>(ck)?;
    let data = load_data::<T>(manifest, cfg.model.num_classes)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let eval = evaluate(&net, &data, &all, cfg.lambda, cfg.batch_size)?;
    fs::write(path, routing_csv(&eval, &data, cfg.model.num_experts)).at(path)
}

/// Finite-difference check of `CE + λ·LB` for the configured model in 64-bit
/// on a seeded batch of two 16×16 samples. Every parameter tensor is probed
/// at up to 16 coordinates.
pub fn gradcheck(cfg: &TrainConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut net = DkghNet::<f64>::new(cfg.model.clone())?;
    let mut r = rng::stream(cfg.seed, 0x6c);
    let side = 16;
    let n = 2 * cfg.model.in_channels * side * side;
    let image = Tensor::new(&[2, cfg.model.in_channels, side, side], (0..n).map(|_| r.random_range(0.0..1.0)).collect())?;
    let heat = Tensor::new(&[2, 1, side, side], (0..2 * side * side).map(|_| r.random_range(0.0..1.0)).collect())?;
    let labels: Vec<usize> = (0..2).map(|i| i % cfg.model.num_classes).collect();
    let lambda = cfg.lambda;
    let check = GradCheckConfig {
        eps: 1e-5,
        max_coords_per_tensor: Some(16),
        seed: cfg.seed,
        ..Default::default()
    };
    Ok(finite_diff_check(
        &mut net,
        |m: &DkghNet<f64>, tape: &mut Tape<'_, f64>| {
            let i = tape.constant(image.clone());
            let h = tape.constant(heat.clone());
            let out = m.forward(tape, i, h)?;
            Ok(objective(tape, &out, &labels, lambda)?.total)
        },
        &check,
    )?)
}
