use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mitobench::adapt::AdaptationMode;
use mitobench::bench::{
    cross_domain_plans, emit_report, evaluate_checkpoint, load_backbone, run_cross_domain_experiment,
    run_scaling_experiment, run_session, session_artifacts, BenchConfig, ReportFormat, ResultsStore, SessionCoords,
    StdKind, SweepOptions, SweepReport,
};
use mitobench::ingest::import::published_dataset;
use mitobench::ingest::{
    generate_synthetic, import_manifest, resolve_image_root, DatasetManifest, FileImageStore, MappingConfig,
    SyntheticConfig,
};
use mitobench::splits::{make_scaling_plan, verify_no_leakage, PlanKind, SplitPlan};
use mitobench::{Error, Result};

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "mitobench", version, about = "Benchmark probing, LoRA and fine-tuning of ViT backbones on mitotic-figure patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a COCO-style or delimited annotation export into a manifest.
    Import(ImportArgs),
    /// Write a scaling plan, or one cross-domain plan per training domain.
    Split(SplitArgs),
    /// Train and evaluate a single session of a plan.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Run the full scaling sweep (folds × fractions).
    Scaling(SweepArgs),
    /// Run the full cross-domain sweep (training domains × runs).
    Crossdomain(SweepArgs),
    /// Aggregate a results store into tables, plots and a summary.
    Report(ReportArgs),
    /// Render a synthetic dataset (PNG images plus manifest) for smoke runs.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    source: PathBuf,
    /// Mapping file (TOML or JSON) with `format = "coco"` or `format = "csv"`.
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Image root used to read sizes when the export lacks them.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Compare label totals with a published dataset (e.g. "MIDOG 2022").
    #[arg(long)]
    published: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Scaling,
    Crossdomain,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Plan file; for cross-domain without `--domain`, a directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only write the cross-domain plan for this training domain.
    #[arg(long)]
    domain: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Plan file, or a directory written by `split --kind crossdomain`.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long)]
    mode: AdaptationMode,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, conflicts_with = "domain")]
    fraction: Option<f64>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    store: PathBuf,
    /// Where checkpoints and traces go; defaults to `artifacts/` next to the store.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of the test records.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "probe,lora")]
    modes: Vec<AdaptationMode>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    artifacts: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Md,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum StdArg {
    Population,
    Sample,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
    /// Defaults to the config value, else population.
    #[arg(long, value_enum)]
    std: Option<StdArg>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for the PNG images and `manifest.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Synthetic generator settings as a JSON object.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<String>>,
    #[arg(long)]
    cases_per_domain: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_FAILURE })
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Import(a) => import(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Scaling(a) => sweep(a, PlanKind::Scaling),
        Command::Crossdomain(a) => sweep(a, PlanKind::CrossDomain),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<BenchConfig> {
    let cfg = match path {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn image_store(explicit: Option<&Path>, manifest: &DatasetManifest) -> FileImageStore {
    FileImageStore::new(resolve_image_root(explicit, manifest.image_root.as_deref())).with_capacity(64)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
}

fn import(a: ImportArgs) -> Result<u8> {
    let mapping = MappingConfig::load(&a.mapping)?;
    let dims = a.image_root.as_deref().map(FileImageStore::new);
    let (manifest, report) = import_manifest(&a.source, &mapping, dims.as_ref().map(|d| d as _))?;
    manifest.save(&a.out)?;
    print_json(&report);
    if let Some(name) = &a.published {
        let published = published_dataset(name)
            .ok_or_else(|| Error::Invalid {
                field: "published".into(),
                message: format!("unknown dataset `{name}`"),
            })?;
        for diff in report.compare_published(published) {
            eprintln!("warning: {diff}");
        }
    }
    Ok(0)
}

fn cross_domain_file(dir: &Path, domain: &str) -> PathBuf {
    let safe: String = domain.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    dir.join(format!("crossdomain-{safe}.jsonl"))
}

fn split(a: SplitArgs) -> Result<u8> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    match a.kind {
        KindArg::Scaling => {
            let plan = make_scaling_plan(&manifest, &cfg.scaling, cfg.seed)?;
            plan.save(&a.out)?;
            println!("{} sessions -> {}", plan.sessions().len(), a.out.display());
        }
        KindArg::Crossdomain => {
            if let Some(d) = &a.domain {
                cfg.train_domains = Some(vec![d.clone()]);
            }
            let plans = cross_domain_plans(&manifest, &cfg)?;
            if a.domain.is_some() {
                plans[0].save(&a.out)?;
                println!("{} sessions -> {}", plans[0].sessions().len(), a.out.display());
            } else {
                std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
                    path: a.out.clone(),
                    source: e,
                })?;
                for plan in &plans {
                    let path = cross_domain_file(&a.out, plan.train_domain.as_deref().unwrap_or_default());
                    plan.save(&path)?;
                    println!("{} sessions -> {}", plan.sessions().len(), path.display());
                }
            }
        }
    }
    Ok(0)
}

fn invalid(field: &str, message: String) -> Error {
    Error::Invalid {
        field: field.into(),
        message,
    }
}

fn train(a: TrainArgs) -> Result<u8> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let cfg = load_config(a.config.as_deref())?;
    let plan = if a.plan.is_dir() {
        let domain = a.domain.as_deref().ok_or_else(|| invalid("domain", "required with a plan directory".into()))?;
        SplitPlan::load(cross_domain_file(&a.plan, domain))?
    } else {
        SplitPlan::load(&a.plan)?
    };
    if let Some(d) = &a.domain {
        if plan.train_domain.as_deref() != Some(d.as_str()) {
            return Err(invalid("domain", format!("plan trains on {:?}, not `{d}`", plan.train_domain)));
        }
    }
    let leaks = verify_no_leakage(&plan, &manifest);
    if !leaks.is_clean() {
        return Err(invalid("plan", format!("leakage: {:?}", leaks.violations)));
    }
    let fraction = match (a.fraction, plan.fractions.as_slice()) {
        (Some(f), _) => f,
        (None, [only]) => *only,
        (None, _) => return Err(invalid("fraction", format!("required; plan has {:?}", plan.fractions))),
    };
    let registry = cfg.registry()?;
    let backbone = load_backbone(&registry, &cfg, &a.model)?;
    a.mode.check_supported(backbone.model.spec())?;
    let store = image_store(a.image_root.as_deref(), &manifest);
    let mut results = ResultsStore::open(&a.store)?;
    let artifacts = a.artifacts.unwrap_or_else(|| a.store.parent().unwrap_or(Path::new(".")).join("artifacts"));
    let opts = SweepOptions {
        artifacts: Some(artifacts.clone()),
    };
    let at = SessionCoords {
        fold_index: a.fold,
        fraction,
    };
    let ids = run_session(&manifest, &store, &plan, &at, &a.model, &backbone, a.mode, &cfg, &mut results, None, &opts)?;
    if ids.is_empty() {
        println!("session already complete in {}", a.store.display());
        return Ok(0);
    }
    let results = ResultsStore::open(&a.store)?;
    for id in &ids {
        let rec = results.records().iter().find(|r| &r.run_id == id).expect("just appended");
        println!(
            "{id}: balanced_accuracy {:.4} weighted_f1 {:.4} auroc {}",
            rec.eval.balanced_accuracy,
            rec.eval.weighted_f1,
            rec.eval.auroc.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    let session = &results.records().iter().find(|r| r.run_id == ids[0]).expect("just appended").session_id;
    println!("checkpoint {}", session_artifacts(&artifacts, session).0.display());
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<u8> {
    let test = DatasetManifest::load(&a.test)?;
    let cfg = load_config(a.config.as_deref())?;
    let store = image_store(a.image_root.as_deref(), &test);
    let mut results = ResultsStore::open(&a.store)?;
    let record = evaluate_checkpoint(&a.checkpoint, &test, &store, &cfg, &mut results)?;
    print_json(&record.eval);
    Ok(0)
}

fn sweep(a: SweepArgs, kind: PlanKind) -> Result<u8> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let cfg = load_config(a.config.as_deref())?;
    let store = image_store(a.image_root.as_deref(), &manifest);
    let mut results = ResultsStore::open(&a.store)?;
    if !results.corrupt_lines().is_empty() {
        eprintln!("warning: {} corrupt line(s) in {} ignored", results.corrupt_lines().len(), a.store.display());
    }
    let opts = SweepOptions { artifacts: a.artifacts };
    let report: SweepReport = match kind {
        PlanKind::Scaling => run_scaling_experiment(&manifest, &store, &a.models, &a.modes, &cfg, &mut results, &opts)?,
        PlanKind::CrossDomain => {
            run_cross_domain_experiment(&manifest, &store, &a.models, &a.modes, &cfg, &mut results, &opts)?
        }
    };
    println!(
        "{} new records from {} sessions; {} already complete",
        report.new_records(),
        report.sessions_run,
        report.already_complete
    );
    for s in &report.skipped_models {
        eprintln!("skipped {}{}: {}", s.model, s.mode.map(|m| format!("/{m}")).unwrap_or_default(), s.reason);
    }
    for f in &report.failures {
        eprintln!("failed {}: {}", f.session_id, f.reason);
    }
    Ok(if report.is_partial() { EXIT_PARTIAL } else { 0 })
}

fn report(a: ReportArgs) -> Result<u8> {
    let cfg = load_config(a.config.as_deref())?;
    let results = ResultsStore::open(&a.store)?;
    if !results.corrupt_lines().is_empty() {
        eprintln!("warning: {} corrupt line(s) in {} ignored", results.corrupt_lines().len(), a.store.display());
    }
    let format = match a.format {
        FormatArg::Md => ReportFormat::Md,
        FormatArg::Csv => ReportFormat::Csv,
    };
    let std = match a.std {
        Some(StdArg::Population) => StdKind::Population,
        Some(StdArg::Sample) => StdKind::Sample,
        None => cfg.std,
    };
    let files = emit_report(results.records(), format, &a.out, std)?;
    for f in &files.files {
        println!("{}", f.display());
    }
    Ok(0)
}

fn synth(a: SynthArgs) -> Result<u8> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                what: "synthetic config".into(),
                message: e.to_string(),
            })?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(d) = a.domains {
        cfg.domains = d;
    }
    if let Some(c) = a.cases_per_domain {
        cfg.cases_per_domain = c;
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut ds = generate_synthetic(&cfg)?;
    ds.store.save_png(&a.out)?;
    ds.manifest.image_root = Some(a.out.display().to_string());
    let path = a.out.join("manifest.jsonl");
    ds.manifest.save(&path)?;
    let counts = ds.manifest.label_counts();
    println!(
        "{} images, {} mitotic figures, {} hard negatives -> {}",
        ds.manifest.images.len(),
        counts.mitotic_figure,
        counts.hard_negative,
        path.display()
    );
    Ok(0)
}
