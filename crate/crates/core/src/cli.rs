//! Command-line front end: `fuse`, `train`, `eval`, `gradcheck` and `selftest`.
//!
//! Exit codes: 0 on success, 1 when a check fails, 2 for usage and data errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::{set_backward_fault, GradCheckOptions, OpKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradsuite::{self, CheckResult, SuiteOptions, MODULES, TOLERANCE};
use crate::io::{self, load_image, save_image, split_luma};
use crate::metrics::{self, GrayImage};
use crate::network::{FuseContext, FusionModel};
use crate::providers::Providers;
use crate::synthetic::synthetic_pair;
use crate::tensor::{Shape, Tensor};
use crate::training::{self, format_log, total_loss, ImagePair, PairDataset, Trainer};
use crate::Tape;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "upfusion", version, about = "Multi-modality image fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fuse one pair of images.
    Fuse(FuseArgs),
    /// Train on a paired dataset and write a checkpoint.
    Train(TrainArgs),
    /// Score fused images against their sources with the five metrics.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a quick battery of internal consistency checks.
    Selftest(ConfigArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file. Desk-scale defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained weights; a freshly initialised model when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub a_dir: Option<PathBuf>,
    #[arg(long)]
    pub b_dir: Option<PathBuf>,
    /// Train on one synthetic pair of this side length instead of a dataset.
    #[arg(long, value_name = "SIDE", conflicts_with_all = ["a_dir", "b_dir"])]
    pub synthetic: Option<usize>,
    /// Where the checkpoint is written.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: bool,
    /// CSV of per-step losses.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub print_every: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub a_dir: PathBuf,
    #[arg(long)]
    pub b_dir: PathBuf,
    #[arg(long)]
    pub f_dir: PathBuf,
    /// Tab-separated report with one row per image and a MEAN row.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Side of the square synthetic inputs.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled per parameter tensor in the module checks.
    #[arg(long, default_value_t = 4)]
    pub coords: usize,
    /// Skip the module checks.
    #[arg(long)]
    pub ops_only: bool,
    /// Break the backward rule of one op, to see the checker catch it.
    #[arg(long, hide = true, value_name = "OP")]
    pub corrupt_backward: Option<String>,
}

enum Failure {
    Usage(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn main() -> ExitCode {
    run(Cli::parse())
}

pub fn run(cli: Cli) -> ExitCode {
    let outcome = match cli.command {
        Command::Fuse(a) => cmd_fuse(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Selftest(a) => cmd_selftest(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn finish(cfg: RunConfig) -> Result<RunConfig> {
    cfg.model.validate()?;
    cfg.schedule.validate()?;
    for line in cfg.to_text().lines() {
        println!("# {line}");
    }
    println!("config digest {:016x}", cfg.digest());
    Ok(cfg)
}

fn providers(cfg: &RunConfig) -> Result<Providers> {
    match &cfg.embeddings {
        Some(p) => Providers::from_file(p),
        None => Ok(Providers::stub(cfg.model.seed)),
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn cmd_fuse(args: &FuseArgs) -> Outcome {
    let mut cfg = args.cfg.resolve()?;
    if let Some(p) = &args.prompt {
        cfg.model.prompt = p.clone();
    }
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    let cfg = finish(cfg)?;
    let start = Instant::now();
    let a = split_luma(&load_image(&args.a)?)?;
    let b = split_luma(&load_image(&args.b)?)?;
    let (sa, sb) = (a.luma.shape(), b.luma.shape());
    if (sa.h(), sa.w()) != (sb.h(), sb.w()) {
        return Err(Error::Data(format!(
            "{} is {}x{} but {} is {}x{}",
            args.a.display(),
            sa.h(),
            sa.w(),
            args.b.display(),
            sb.h(),
            sb.w()
        ))
        .into());
    }
    let model = match &cfg.checkpoint {
        Some(p) => training::load_model(p, &cfg.model)?,
        None => FusionModel::build(&cfg.model)?,
    };
    let providers = providers(&cfg)?;
    let keys = [file_stem(&args.a)];
    let ctx = FuseContext::new(&providers, &cfg.model.prompt, Some(&keys))?;
    let fused = model.fuse_padded(&a.luma, &b.luma, &ctx)?;
    let out = match b.chroma.as_ref().or(a.chroma.as_ref()) {
        Some(chroma) => io::merge_luma(&fused, chroma)?,
        None => fused,
    };
    save_image(&args.out, &out)?;
    println!("fused {}x{} in {:.3}s -> {}", sa.h(), sa.w(), start.elapsed().as_secs_f64(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Outcome {
    let mut cfg = args.cfg.resolve()?;
    if let Some(p) = &args.a_dir {
        cfg.train_a = Some(p.clone());
    }
    if let Some(p) = &args.b_dir {
        cfg.train_b = Some(p.clone());
    }
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(p) = &args.log {
        cfg.log = Some(p.clone());
    }
    if let Some(n) = args.steps {
        cfg.schedule.steps = Some(n);
    }
    let cfg = finish(cfg)?;
    let data = match (args.synthetic, &cfg.train_a, &cfg.train_b) {
        (Some(side), _, _) => {
            let (a, b) = synthetic_pair(side, side, cfg.model.seed);
            PairDataset::new(vec![ImagePair { key: "synthetic".into(), a, b }])?
        }
        (None, Some(da), Some(db)) => PairDataset::load(da, db)?,
        _ => {
            return Err(Error::Argument("no training data: give --a-dir and --b-dir, or --synthetic".into()).into())
        }
    };
    let mut trainer = match (&cfg.checkpoint, args.resume) {
        (Some(p), true) => Trainer::load_checkpoint(p, &cfg.model, cfg.schedule.clone())?,
        (None, true) => return Err(Error::Argument("--resume needs a checkpoint path".into()).into()),
        _ => Trainer::new(FusionModel::build(&cfg.model)?, cfg.schedule.clone())?,
    };
    let providers = providers(&cfg)?;
    println!(
        "training {} pairs for {} steps, {} parameters",
        data.len(),
        cfg.schedule.total_steps(data.len()),
        trainer.model.num_parameters()
    );
    let start = Instant::now();
    let every = args.print_every.max(1);
    let log = trainer.run(&data, &providers, |r| {
        if r.step == 1 || r.step % every == 0 {
            println!(
                "step {:>6}  lr {:.3e}  l_grad {:.5}  l_l1 {:.5}  l_total {:.5}  {:.1}s",
                r.step,
                r.lr,
                r.loss.l_grad,
                r.loss.l_l1,
                r.loss.l_total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(p) = &cfg.log {
        io::write_atomic(p, format_log(&log).as_bytes())?;
        println!("log -> {}", p.display());
    }
    match &cfg.checkpoint {
        Some(p) => {
            trainer.save_checkpoint(p)?;
            println!("checkpoint at step {} -> {}", trainer.step(), p.display());
        }
        None => println!("no checkpoint path set; weights not saved"),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Outcome {
    finish(args.cfg.resolve()?)?;
    let report = metrics::eval_dir(&args.a_dir, &args.b_dir, &args.f_dir)?;
    print!("{}", report.to_table());
    if let Some(p) = &args.out {
        metrics::write_report(p, &report)?;
        println!("report -> {}", p.display());
    }
    Ok(())
}

/// Restores the backward rules when dropped.
struct FaultGuard;

impl Drop for FaultGuard {
    fn drop(&mut self) {
        set_backward_fault(None);
    }
}

fn print_result(kind: &str, r: &CheckResult) {
    let rep = &r.report;
    println!(
        "{kind:<7} {:<16} max_rel_err {:.3e}  {}  worst {}[{}] over {} coords",
        r.name,
        rep.max_rel_err,
        if r.passed() { "ok  " } else { "FAIL" },
        rep.worst_param,
        rep.worst_index,
        rep.coords_checked
    );
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Outcome {
    let cfg = finish(args.cfg.resolve()?)?;
    let _guard = FaultGuard;
    if let Some(name) = &args.corrupt_backward {
        let kind: OpKind = name.parse()?;
        if matches!(kind, OpKind::Leaf | OpKind::Param) {
            return Err(Error::Argument(format!("op {kind} has no backward rule to corrupt")).into());
        }
        println!("corrupting the backward rule of {kind}");
        set_backward_fault(Some(kind));
    }
    let op_opts = GradCheckOptions { seed: args.seed, ..GradCheckOptions::default() };
    let ops = gradsuite::op_checks(&op_opts)?;
    ops.iter().for_each(|r| print_result("op", r));
    let mut failed_ops: Vec<&str> = ops.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let mut failed_modules = Vec::new();
    if !args.ops_only {
        let mut opts = SuiteOptions { size: args.size, ..SuiteOptions::default() };
        opts.grad.seed = args.seed;
        opts.grad.max_coords_per_param = args.coords;
        let start = Instant::now();
        let modules = gradsuite::module_checks(&cfg.model, &opts)?;
        modules.iter().for_each(|r| print_result("module", r));
        println!("module checks took {:.1}s", start.elapsed().as_secs_f64());
        failed_modules = modules.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
        debug_assert_eq!(modules.len(), MODULES.len());
    }
    if failed_ops.is_empty() && failed_modules.is_empty() {
        println!("all gradients within {TOLERANCE:e}");
        return Ok(());
    }
    let mut parts = Vec::new();
    if !failed_ops.is_empty() {
        failed_ops.sort_unstable();
        parts.push(format!("ops {}", failed_ops.join(", ")));
    }
    if !failed_modules.is_empty() {
        parts.push(format!("modules {}", failed_modules.join(", ")));
    }
    Err(Failure::Check(format!("gradcheck failed above {TOLERANCE:e}: {}", parts.join("; "))))
}

fn check(name: &str, ok: bool, detail: String, failures: &mut Vec<String>) {
    if ok {
        println!("PASS {name}");
    } else {
        println!("FAIL {name}: {detail}");
        failures.push(name.to_string());
    }
}

fn cmd_selftest(args: &ConfigArgs) -> Outcome {
    let cfg = finish(args.resolve()?)?;
    let mut failures = Vec::new();

    let reparsed = RunConfig::parse(&cfg.to_text())?;
    check("config round trip", reparsed == cfg, format!("{reparsed:?}"), &mut failures);

    let ops = gradsuite::op_checks(&GradCheckOptions::default())?;
    let bad: Vec<_> = ops.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    check("op gradients", bad.is_empty(), bad.join(", "), &mut failures);

    let (a, b) = synthetic_pair(32, 32, cfg.model.seed);
    let model = FusionModel::build(&cfg.model)?;
    let providers = Providers::stub(cfg.model.seed);
    let ctx = FuseContext::new(&providers, &cfg.model.prompt, None)?;
    let f1 = model.fuse(&a, &b, &ctx)?;
    let f2 = model.fuse(&a, &b, &ctx)?;
    let in_range = f1.data().iter().all(|v| (0.0..=1.0).contains(v));
    check("forward range", in_range, "values outside [0, 1]".into(), &mut failures);
    check("forward determinism", f1.data() == f2.data(), "two runs differ".into(), &mut failures);

    let mut tape = Tape::<f64>::new();
    let av = tape.constant(a.cast());
    let (_, rep) = total_loss(&mut tape, av, av, av)?;
    check("loss identity", rep.l_total == 0.0, format!("{rep:?}"), &mut failures);

    let s = &cfg.schedule;
    let (lr0, lr1) = (training::cosine_lr(0, 100, s.lr0, s.lr_end)?, training::cosine_lr(100, 100, s.lr0, s.lr_end)?);
    check("schedule endpoints", lr0 == s.lr0 && lr1 == s.lr_end, format!("{lr0} .. {lr1}"), &mut failures);

    let g = GrayImage::from_tensor(&a)?;
    let values = metrics::MetricValues::compute(&g, &g, &g)?;
    let ok = (values.ssim - 1.0).abs() <= 1e-6
        && (values.q_ncie - 1.0).abs() <= 1e-6
        && (values.vif - 1.0).abs() <= 1e-3
        && (values.q_p - 1.0).abs() <= 1e-3;
    check("metric identities", ok, format!("{values:?}"), &mut failures);

    let t = Tensor::from_fn(Shape::new(1, 1, 3, 4), |_, _, y, x| (y * 4 + x) as f32 / 7.0);
    let back = io::decode_nfi(&io::encode_nfi(&t)?).map_err(Error::Data)?;
    check("nfi round trip", back == t, "payload changed".into(), &mut failures);

    let trainer = Trainer::new(model, cfg.schedule.clone())?;
    let restored = Trainer::from_checkpoint_bytes(&trainer.checkpoint_bytes()?, &cfg.model, cfg.schedule.clone())?;
    check(
        "checkpoint round trip",
        restored.model.params.value_bytes() == trainer.model.params.value_bytes(),
        "weights changed".into(),
        &mut failures,
    );

    if failures.is_empty() {
        println!("selftest passed");
        Ok(())
    } else {
        Err(Failure::Check(format!("selftest failed: {}", failures.join(", "))))
    }
}
