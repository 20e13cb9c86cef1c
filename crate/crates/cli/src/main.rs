use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fusion_core::checks::{
    run_equivalence, run_grad_check, EquivalenceOptions, GradCheckOptions, EQUIVALENCE_TOL, GRAD_TOL,
};
use fusion_core::dsl::{builtin_presets, full_dims, preset, SpecError, PRESET_NAMES};
use fusion_core::graph::Fault;
use fusion_core::search::{grid_nonlinearity_pairs, random_search, run_search, write_results_jsonl, SearchSpace};
use fusion_core::train::{generate_synthetic_dataset, train, Dataset, TrainConfig, TrainError};
use fusion_core::{parse_spec, serialize_spec, Dims, Exec, FusionSpec};

#[derive(Parser)]
#[command(name = "hfusion", version, about = "Generalized Hadamard-product fusion operators")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a spec file; problems go to stderr.
    Validate { spec: PathBuf },
    /// Compare identity-form logits with the explicit Tucker contraction.
    OracleCheck(OracleCheckArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Write a teacher-labelled synthetic dataset.
    GenData(GenDataArgs),
    /// Train a spec and write per-epoch metrics as JSON lines.
    Train(TrainArgs),
    /// Screen a grid or random sample of specs and write ranked results.
    Search(SearchArgs),
    /// Print every built-in preset in canonical syntax.
    Presets,
}

#[derive(Args)]
struct SpecSource {
    /// Spec file.
    #[arg(conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in preset instead of a file.
    #[arg(long)]
    preset: Option<String>,
    /// Branch count for presets (`mlb` always has one).
    #[arg(long, default_value_t = 5)]
    rank: usize,
}

#[derive(Clone, Copy, Debug)]
enum DimsArg {
    /// Fresh small random dims per seed.
    Small,
    /// Whatever the spec says.
    Spec,
    Explicit(Dims),
}

fn parse_dims(s: &str) -> Result<DimsArg, String> {
    match s {
        "small" => return Ok(DimsArg::Small),
        "spec" => return Ok(DimsArg::Spec),
        _ => {}
    }
    let xs = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match xs[..] {
        [d_q, d_v, t_q, t_v, t_o, c] if xs.iter().all(|&x| x > 0) => {
            Ok(DimsArg::Explicit(Dims::new(d_q, d_v, t_q, t_v, t_o, c)))
        }
        _ => Err("expected `small`, `spec` or six positive integers dq,dv,tq,tv,to,classes".into()),
    }
}

#[derive(Args)]
struct OracleCheckArgs {
    #[command(flatten)]
    source: SpecSource,
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// `small`, `spec`, or dq,dv,tq,tv,to,classes.
    #[arg(long, default_value = "small", value_parser = parse_dims)]
    dims: DimsArg,
    /// Replace activations, Φ and plan with their identity forms first.
    #[arg(long)]
    force_identity: bool,
    #[arg(long, hide = true)]
    corrupt_n2: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    source: SpecSource,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// `small`, `spec`, or dq,dv,tq,tv,to,classes.
    #[arg(long, default_value = "small", value_parser = parse_dims)]
    dims: DimsArg,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    source: SpecSource,
    /// Override dims as dq,dv,tq,tv,to,classes.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<DimsArg>,
    /// Number of examples.
    #[arg(long)]
    n: usize,
    /// Seed for the teacher's weights.
    #[arg(long, default_value_t = 0)]
    teacher_seed: u64,
    /// Seed for the input draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the Gaussian inputs.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Dataset destination (FQVD file).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Optimizer {
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Examples per Adam step.
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Student initialization and shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: SpecSource,
    /// Override the spec dims: dq,dv,tq,tv,to,classes.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<DimsArg>,
    /// Training set (FQVD file).
    #[arg(long)]
    train: PathBuf,
    /// Validation set (FQVD file).
    #[arg(long)]
    val: PathBuf,
    /// Metrics destination (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Also write the selected parameters as JSON.
    #[arg(long)]
    params_out: Option<PathBuf>,
    #[command(flatten)]
    opt: Optimizer,
    /// Maximum epochs per training run.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Stop after this many epochs without improvement.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    /// Base spec for the activation grid; omit with --random.
    #[command(flatten)]
    source: SpecSource,
    /// Override the spec dims: dq,dv,tq,tv,to,classes.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<DimsArg>,
    /// Sample this many random specs instead of the grid.
    #[arg(long)]
    random: Option<usize>,
    /// Seed for --random sampling.
    #[arg(long, default_value_t = 0)]
    search_seed: u64,
    /// Training set (FQVD file).
    #[arg(long)]
    train: PathBuf,
    /// Validation set (FQVD file).
    #[arg(long)]
    val: PathBuf,
    /// Use only the first N training examples.
    #[arg(long)]
    subsample: Option<usize>,
    /// Results destination (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opt: Optimizer,
    /// Maximum epochs per training run.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
}

/// Exit codes: 1 check or validation failure, 2 usage, 3 I/O.
#[derive(Debug)]
enum Failure {
    Check(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Io(m) => m,
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(_) => Failure::Io(e.to_string()),
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Check(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn read_spec_file(path: &Path) -> Result<FusionSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_spec(&text).map_err(|e: SpecError| {
        Failure::Check(
            e.messages()
                .iter()
                .map(|m| format!("{}:{m}", path.display()))
                .collect::<Vec<_>>()
                .join("\n"),
        )
    })
}

fn load_spec(src: &SpecSource, dims: Option<DimsArg>) -> Result<FusionSpec, Failure> {
    let spec = match (&src.spec, &src.preset) {
        (Some(path), None) => read_spec_file(path)?,
        (None, Some(name)) => {
            if src.rank == 0 {
                return Err(Failure::Usage("--rank must be at least 1".into()));
            }
            preset(name, full_dims(), src.rank)
                .ok_or_else(|| Failure::Usage(format!("unknown preset {name:?}; known: {}", PRESET_NAMES.join(", "))))?
        }
        (None, None) => return Err(Failure::Usage("give a spec file or --preset".into())),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    Ok(match dims {
        Some(DimsArg::Explicit(d)) => spec.with_dims(d),
        _ => spec,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| match e {
        TrainError::Io(io) => io_err(path, io),
        other => Failure::Check(format!("{}: {other}", path.display())),
    })
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn cmd_validate(path: &Path) -> Outcome {
    read_spec_file(path).map(|_| ())
}

fn cmd_oracle_check(a: &OracleCheckArgs, exec: Exec) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let mut spec = load_spec(&a.source, Some(a.dims))?;
    if !spec.is_identity_form() {
        if !a.force_identity {
            return Err(Failure::Usage(
                "spec is not in identity form (identity activations, no post-fusion network, one sum step); \
                 pass --force-identity to check its identity form"
                    .into(),
            ));
        }
        spec = spec.to_identity_form();
    }
    let opts = EquivalenceOptions {
        small_dims: matches!(a.dims, DimsArg::Small),
        corrupt_n2: a.corrupt_n2,
    };
    let report = run_equivalence(&spec, a.seeds, opts, exec).map_err(|e| Failure::Check(e.to_string()))?;
    print_json(json!({
        "seeds": a.seeds,
        "max_rel_err": report.max_rel_err,
        "tolerance": EQUIVALENCE_TOL,
        "pass": report.passed(),
    }));
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:e} exceeds {EQUIVALENCE_TOL:e}",
            report.max_rel_err
        )))
    }
}

fn cmd_grad_check(a: &GradCheckArgs, exec: Exec) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let spec = load_spec(&a.source, Some(a.dims))?;
    let opts = GradCheckOptions {
        small_dims: matches!(a.dims, DimsArg::Small),
        fault: a.inject_fault.then_some(Fault::NegateQuestionPath),
    };
    let report = run_grad_check(&spec, a.seeds, opts, exec).map_err(|e| Failure::Check(e.to_string()))?;
    let worst = report.worst();
    print_json(json!({
        "seeds": a.seeds,
        "worst": worst.map(|w| json!({"param": w.name, "index": w.index, "rel_err": w.rel_err})),
        "tolerance": GRAD_TOL,
        "pass": report.passed(),
    }));
    match worst {
        Some(w) if !report.passed() => Err(Failure::Check(format!(
            "worst coordinate {}[{}]: analytic {:e}, numeric {:e}, relative error {:e}",
            w.name, w.index, w.analytic, w.numeric, w.rel_err
        ))),
        _ => Ok(()),
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> Outcome {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    if !(a.scale > 0.0 && a.scale.is_finite()) {
        return Err(Failure::Usage("--scale must be positive".into()));
    }
    let spec = load_spec(&a.source, a.dims)?;
    let data = generate_synthetic_dataset(&spec, a.teacher_seed, a.n, a.scale, a.seed)?;
    let mut w = create(&a.out)?;
    data.write_to(&mut w)?;
    w.flush().map_err(|e| io_err(&a.out, e))?;
    print_json(json!({
        "n": data.len(),
        "label_histogram": data.label_histogram(),
    }));
    Ok(())
}

fn train_config(opt: &Optimizer, epochs: usize, patience: Option<usize>, exec: Exec) -> TrainConfig {
    TrainConfig {
        lr: opt.lr,
        batch_size: opt.batch_size,
        max_epochs: epochs,
        patience,
        seed: opt.seed,
        exec,
        ..TrainConfig::default()
    }
}

fn cmd_train(a: &TrainArgs, exec: Exec) -> Outcome {
    let spec = load_spec(&a.source, a.dims)?;
    let train_set = load_data(&a.train)?;
    let val_set = load_data(&a.val)?;
    let cfg = train_config(&a.opt, a.epochs, a.patience, exec);
    let (params, metrics) = train(&spec, &train_set, &val_set, &cfg)?;
    let mut w = create(&a.out)?;
    metrics.write_jsonl(&mut w).map_err(|e| io_err(&a.out, e))?;
    w.flush().map_err(|e| io_err(&a.out, e))?;
    if let Some(path) = &a.params_out {
        let mut w = create(path)?;
        serde_json::to_writer(&mut w, &params).map_err(|e| io_err(path, e.into()))?;
        w.flush().map_err(|e| io_err(path, e))?;
    }
    eprintln!(
        "best epoch {} of {}, {:.1}s",
        metrics.best_epoch,
        metrics.epochs.len(),
        metrics.wall_time_secs
    );
    print_json(json!({
        "epochs_run": metrics.epochs.len(),
        "best_epoch": metrics.best_epoch,
        "val_acc": metrics.best_val_acc,
    }));
    Ok(())
}

fn cmd_search(a: &SearchArgs, exec: Exec) -> Outcome {
    let mut train_set = load_data(&a.train)?;
    let val_set = load_data(&a.val)?;
    if let Some(n) = a.subsample {
        if n == 0 {
            return Err(Failure::Usage("--subsample must be at least 1".into()));
        }
        train_set = train_set.split_at(n).0;
    }
    let candidates = match a.random {
        Some(0) => return Err(Failure::Usage("--random must be at least 1".into())),
        Some(budget) => {
            if a.source.spec.is_some() || a.source.preset.is_some() {
                return Err(Failure::Usage(
                    "--random samples its own specs; drop the base spec".into(),
                ));
            }
            let space = SearchSpace::around(train_set.d_q, train_set.d_v, train_set.n_classes);
            random_search(&space, a.search_seed, budget)
        }
        None => grid_nonlinearity_pairs(&load_spec(&a.source, a.dims)?),
    };
    let cfg = train_config(&a.opt, a.epochs, None, Exec::Sequential);
    cfg.validate()?;
    let results = run_search(&candidates, &train_set, &val_set, &cfg, exec);
    let mut w = create(&a.out)?;
    write_results_jsonl(&results, &mut w).map_err(|e| io_err(&a.out, e))?;
    w.flush().map_err(|e| io_err(&a.out, e))?;
    let failed: Vec<_> = results.iter().filter(|r| r.failed()).collect();
    for r in &failed {
        eprintln!(
            "candidate {} failed: {}",
            r.candidate,
            r.error.as_deref().unwrap_or("unknown")
        );
    }
    let best = results.first().filter(|r| !r.failed());
    print_json(json!({
        "candidates": results.len(),
        "failed": failed.len(),
        "best_val_acc": best.map(|r| r.val_acc),
        "best_spec": best.map(|r| r.spec.clone()),
    }));
    Ok(())
}

fn cmd_presets() -> Outcome {
    let mut out = io::stdout().lock();
    for (i, (name, spec)) in builtin_presets().iter().enumerate() {
        if i > 0 {
            writeln!(out).map_err(|e| Failure::Io(e.to_string()))?;
        }
        write!(out, "# {name}\n{}", serialize_spec(spec)).map_err(|e| Failure::Io(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let outcome = match &cli.command {
        Command::Validate { spec } => cmd_validate(spec),
        Command::OracleCheck(a) => cmd_oracle_check(a, exec),
        Command::GradCheck(a) => cmd_grad_check(a, exec),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a, exec),
        Command::Search(a) => cmd_search(a, exec),
        Command::Presets => cmd_presets(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hfusion: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
