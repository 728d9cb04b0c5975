use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use vessel_uda::checks::{grad_suite, roundtrip_suite, schedule_suite, SuiteReport};
use vessel_uda::metrics::{mean_scores, score, scores_csv};
use vessel_uda::phantom::{build_dataset, read_pgm, DatasetManifest, PhantomError};
use vessel_uda::pipeline::{CheckpointError, PipelineConfig, PipelineError, RunConfig, RunDir, Stage};
use vessel_uda::tensor::set_silu_derivative_fault;

#[derive(Parser)]
#[command(name = "vessel-uda", version, about = "Diffusion-based domain adaptation for vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-domain phantom dataset.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        m: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run one pipeline stage, or all of them in order.
    Run(RunArgs),
    /// Score predicted masks against ground truth masks with matching names.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a built-in diagnostic suite.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    PretrainA,
    PretrainB,
    Mine,
    Translate,
    TrainSeg,
    Cooptimize,
    All,
}

impl StageArg {
    fn stages(self) -> Vec<Stage> {
        let one = |s| vec![s];
        match self {
            StageArg::PretrainA => one(Stage::PretrainA),
            StageArg::PretrainB => one(Stage::PretrainB),
            StageArg::Mine => one(Stage::Mine),
            StageArg::Translate => one(Stage::Translate),
            StageArg::TrainSeg => one(Stage::TrainSeg),
            StageArg::Cooptimize => one(Stage::Cooptimize),
            StageArg::All => Stage::ALL.to_vec(),
        }
    }
}

/// Settings that override the configuration file when given.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr_gen: Option<f64>,
    #[arg(long)]
    lr_seg: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs_pretrain_a: Option<usize>,
    #[arg(long)]
    epochs_pretrain_b: Option<usize>,
    #[arg(long)]
    epochs_segmenter: Option<usize>,
    #[arg(long)]
    epochs_gen_finetune: Option<usize>,
    #[arg(long)]
    epochs_seg_finetune: Option<usize>,
    #[arg(long)]
    pseudo_label_threshold: Option<f64>,
    #[arg(long)]
    stochastic_synthesis: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            diffusion_steps,
            ddim_steps,
            t0,
            iterations,
            lr_gen,
            lr_seg,
            batch_size,
            epochs_pretrain_a,
            epochs_pretrain_b,
            epochs_segmenter,
            epochs_gen_finetune,
            epochs_seg_finetune,
            pseudo_label_threshold,
            stochastic_synthesis,
            seed
        );
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Grad,
    Roundtrip,
    Schedule,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum)]
    what: Vec<Suite>,
    /// Configuration whose schedule settings the roundtrip and schedule
    /// suites use.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Corrupts the SiLU derivative so the gradient suite has something to catch.
    #[arg(long, hide = true)]
    inject_silu_fault: bool,
}

/// An argument problem found after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) | PipelineError::Contract(_) => 2,
        PipelineError::NumericAbort { .. } => 4,
        PipelineError::MissingArtifact(_) => 3,
        PipelineError::Iteration { source, .. } => pipeline_code(source),
        PipelineError::Io { .. } => 1,
        PipelineError::Checkpoint(CheckpointError::Io { .. }) => 1,
        PipelineError::Checkpoint(_) => 3,
        PipelineError::Phantom(p) => phantom_code(p),
        _ if e.is_numeric() => 4,
        _ => 2,
    }
}

fn phantom_code(e: &PhantomError) -> u8 {
    match e {
        PhantomError::Argument(_) => 2,
        PhantomError::Io { .. } => 1,
        PhantomError::Format { .. } => 3,
    }
}

/// Maps an error chain to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<CheckFailed>() {
            return 5;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return pipeline_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PhantomError>() {
            return phantom_code(e);
        }
        if cause.is::<std::io::Error>() {
            return 1;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Phantom { out, m, n, size, seed } => cmd_phantom(&out, m, n, size, seed),
        Command::Run(args) => cmd_run(args),
        Command::Eval { pred_dir, gt_dir, out } => cmd_eval(&pred_dir, &gt_dir, &out),
        Command::Check(args) => cmd_check(args),
    }
}

fn cmd_phantom(out: &Path, m: usize, n: usize, size: usize, seed: u64) -> Result<()> {
    let manifest = DatasetManifest::new(m, n, size, seed);
    build_dataset(out, &manifest)?;
    println!(
        "wrote {} source and {} target samples at {size}x{size} (seed {seed}) to {}",
        manifest.count_a,
        manifest.count_b,
        out.display()
    );
    Ok(())
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        anyhow::Error::new(PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn effective_config(args: &RunArgs) -> Result<RunConfig> {
    let o = &args.overrides;
    let mut run = match &args.config {
        Some(path) => RunConfig::from_json(&read_config(path)?)
            .with_context(|| format!("reading configuration {}", path.display()))?,
        None => {
            let (Some(dataset), Some(out)) = (&o.dataset, &o.out) else {
                bail!(Usage("either --config or both --dataset and --out are required".into()));
            };
            RunConfig {
                dataset: dataset.clone(),
                out: out.clone(),
                pipeline: PipelineConfig::default(),
            }
        }
    };
    if let Some(d) = &o.dataset {
        run.dataset = d.clone();
    }
    if let Some(d) = &o.out {
        run.out = d.clone();
    }
    o.apply(&mut run.pipeline);
    Ok(run)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let run = effective_config(&args)?;
    if args.print_config {
        println!("{}", run.to_json());
        return Ok(());
    }
    run.validate()?;
    let dir = RunDir::new(&run.out);
    for stage in args.stage.stages() {
        dir.run_stage(stage, &run)?;
        info!("stage {} finished", stage.name());
    }
    if let Ok(summary) = fs::read_to_string(dir.summary()) {
        print!("{summary}");
    }
    Ok(())
}

fn pgm_names(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names = BTreeMap::new();
    for entry in entries {
        let path = entry.with_context(|| format!("listing {}", dir.display()))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            let name = path.file_name().expect("listed file").to_string_lossy().into_owned();
            names.insert(name, path);
        }
    }
    Ok(names)
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    let preds = pgm_names(pred_dir)?;
    let gts = pgm_names(gt_dir)?;
    let orphans: Vec<&str> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !orphans.is_empty() {
        bail!(Usage(format!("files without a counterpart: {}", orphans.join(", "))));
    }
    if preds.is_empty() {
        bail!(Usage(format!("no .pgm files in {}", pred_dir.display())));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (name, pred_path) in &preds {
        let pred = read_pgm(pred_path)?;
        let gt = read_pgm(&gts[name])?.map(|v| f64::from(u8::from(v >= 0.5)));
        let s = score(&pred, &gt).with_context(|| format!("scoring {name}"))?;
        rows.push((name.trim_end_matches(".pgm").to_string(), s));
    }
    let scores: Vec<_> = rows.iter().map(|(_, s)| *s).collect();
    let mean = mean_scores(&scores).context("averaging scores")?;
    let csv = scores_csv(rows.iter().map(|(n, s)| (n.as_str(), s)).chain([("mean", &mean)]));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(out, csv).map_err(|source| PipelineError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let auc = mean.auc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
    println!(
        "{} samples: dsc {:.4} auc {auc} acc {:.4} ahd {:.4}",
        rows.len(),
        mean.dsc,
        mean.acc,
        mean.ahd
    );
    Ok(())
}

fn print_report(report: &SuiteReport) {
    for case in &report.cases {
        let verdict = if case.passed() { "ok" } else { "FAIL" };
        println!("{} {}: error {:.3e} (tolerance {:.0e}) {verdict}", report.suite, case.id, case.error, case.tolerance);
    }
    println!("{}: max error {:.3e}", report.suite, report.max_error());
}

fn cmd_check(args: CheckArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_json(&read_config(path)?)?.pipeline,
        None => PipelineConfig::default(),
    };
    if let Some(v) = args.diffusion_steps {
        cfg.diffusion_steps = v;
    }
    if let Some(v) = args.ddim_steps {
        cfg.ddim_steps = v;
    }
    if let Some(v) = args.t0 {
        cfg.t0 = v;
    }
    cfg.validate()?;
    set_silu_derivative_fault(args.inject_silu_fault);
    let suites = if args.what.is_empty() {
        vec![Suite::Grad, Suite::Roundtrip, Suite::Schedule]
    } else {
        args.what
    };
    let mut failed = Vec::new();
    for suite in suites {
        let report = match suite {
            Suite::Grad => grad_suite(args.seed)?,
            Suite::Roundtrip => roundtrip_suite(&cfg)?,
            Suite::Schedule => schedule_suite(&cfg)?,
        };
        print_report(&report);
        failed.extend(report.failures().map(|c| c.id.clone()));
    }
    if !failed.is_empty() {
        bail!(CheckFailed(failed.join(", ")));
    }
    println!("all checks passed");
    Ok(())
}
