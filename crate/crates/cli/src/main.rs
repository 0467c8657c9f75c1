use std::error::Error;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use celldefect::arch::{
    count_macs, count_params, indicator, infer_shapes, parse_spec, reference_spec, ArchSpec, ConstraintSet, Model,
};
use celldefect::arch::weights::{load_weights, save_weights};
use celldefect::bench::{bench_latency, predict, report_table, ReportRow};
use celldefect::explore::{explore, ExploreConfig, SeedSet};
use celldefect::train::{
    evaluate, evaluate_records, load_manifest, load_samples, split_dataset, synth_dataset, synth_samples, train_two_phase,
    ProxyConfig, ProxyEvaluator, Split, TrainConfig,
};
use clap::{Args, Parser, Subcommand};

type Res<T> = Result<T, Box<dyn Error>>;

/// Compact attention-condenser classifiers for EL solar-cell inspection.
#[derive(Parser)]
#[command(name = "celldefect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect architecture specs.
    #[command(subcommand)]
    Arch(ArchCommand),
    /// Search for a high-scoring architecture within the budget.
    Explore(ExploreArgs),
    /// Generate a synthetic EL-cell dataset with a manifest.
    SynthData {
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 0.5)]
        defect_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-phase training on the train split of a manifest.
    Train(TrainArgs),
    /// Evaluate saved weights on a manifest.
    Eval {
        spec: String,
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluate only this split (re-derived from --seed and --ratio).
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.75)]
        ratio: f64,
    },
    /// Batch-1 latency benchmark.
    Bench {
        spec: String,
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Classify one image. Exit status: 0 functional, 2 defective, 1 error.
    Predict { spec: String, weights: PathBuf, image: PathBuf },
    /// Print a complexity table from a JSON list of rows.
    Report {
        #[arg(long)]
        rows: PathBuf,
        /// Row index the ratios are computed against.
        #[arg(long)]
        baseline: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ArchCommand {
    /// Parse and shape-check a spec.
    Validate { spec: String },
    /// Parameter and MAC counts.
    Stats {
        spec: String,
        /// Input shape as NxCxHxW.
        #[arg(long)]
        input: Option<String>,
    },
    /// Evaluate the design constraints. Exit status 2 when any is violated.
    Check {
        spec: String,
        #[command(flatten)]
        constraints: ConstraintArgs,
    },
}

#[derive(Args, Clone)]
struct ConstraintArgs {
    #[arg(long, default_value_t = 100e6)]
    flops_center: f64,
    #[arg(long, default_value_t = 0.2)]
    flops_tol: f64,
    #[arg(long, default_value_t = 2)]
    min_columns: usize,
    #[arg(long, default_value_t = 0.35)]
    aads_before_depth: f64,
    /// Permit pointwise convolutions with stride > 1.
    #[arg(long)]
    allow_pointwise_strided: bool,
}

impl ConstraintArgs {
    fn build(&self) -> ConstraintSet {
        ConstraintSet {
            min_parallel_columns: self.min_columns,
            forbid_pointwise_strided: !self.allow_pointwise_strided,
            aads_required_before_depth: self.aads_before_depth,
            flops_center: self.flops_center,
            flops_tolerance: self.flops_tol,
        }
    }
}

#[derive(Args)]
struct ExploreArgs {
    /// Directory of seed spec files (*.json); the reference spec when omitted.
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    generations: usize,
    #[arg(long, default_value_t = 8)]
    population: usize,
    /// Synthetic training images for the proxy run (a quarter as many are
    /// held out for validation).
    #[arg(long, default_value_t = 256)]
    proxy_samples: usize,
    #[arg(long, default_value_t = 5)]
    proxy_epochs: usize,
    /// Re-evaluate the winner with this many epochs before reporting.
    #[arg(long)]
    final_epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "best.arch.json")]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    constraints: ConstraintArgs,
}

#[derive(Args)]
struct TrainArgs {
    spec: String,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.75)]
    ratio: f64,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long, default_value = "weights.bin")]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected `train` or `test`, got `{s}`")),
    }
}

/// Reads a spec file; the word `reference` selects the built-in network.
fn load_spec(arg: &str) -> Res<ArchSpec> {
    if arg == "reference" {
        return Ok(reference_spec());
    }
    let text = std::fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?;
    Ok(parse_spec(&text).map_err(|e| format!("{arg}: {e}"))?)
}

fn parse_shape(s: &str) -> Res<[usize; 4]> {
    let dims: Vec<usize> = s.split(['x', 'X']).map(str::parse).collect::<Result<_, _>>()?;
    dims.try_into().map_err(|_| format!("input shape `{s}` must have four dimensions").into())
}

fn print_json(value: &impl serde::Serialize) -> Res<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| format!("{}: {e}", path.display()))?))
}

fn run(cli: Cli) -> Res<u8> {
    match cli.command {
        Command::Arch(ArchCommand::Validate { spec }) => {
            let s = load_spec(&spec)?;
            let shapes = infer_shapes(&s)?;
            let out = shapes[s.topology()?.output];
            println!("ok: {} nodes, output {out}", s.nodes.len());
        }
        Command::Arch(ArchCommand::Stats { spec, input }) => {
            let mut s = load_spec(&spec)?;
            if let Some(shape) = input {
                s.input_shape = parse_shape(&shape)?;
            }
            let check = indicator(&s, &ConstraintSet::default())?;
            print_json(&serde_json::json!({
                "name": s.name,
                "input_shape": s.input_shape,
                "nodes": s.nodes.len(),
                "params": count_params(&s)?,
                "macs": count_macs(&s)?,
                "parallel_width": check.parallel_width,
                "hash": s.structural_hash(),
            }))?;
        }
        Command::Arch(ArchCommand::Check { spec, constraints }) => {
            let result = indicator(&load_spec(&spec)?, &constraints.build())?;
            print_json(&result)?;
            return Ok(if result.pass { 0 } else { 2 });
        }
        Command::Explore(args) => return run_explore(args),
        Command::SynthData {
            count,
            defect_rate,
            seed,
            out,
        } => {
            let records = synth_dataset(count, defect_rate, seed, &out)?;
            let defective = records.iter().filter(|r| r.defect_probability >= 0.5).count();
            println!("wrote {} images ({defective} defective) to {}", records.len(), out.display());
        }
        Command::Train(args) => run_train(args)?,
        Command::Eval {
            spec,
            weights,
            manifest,
            split,
            seed,
            ratio,
        } => {
            let model = load_weights(&load_spec(&spec)?, &weights)?;
            let mut records = load_manifest(&manifest)?;
            if let Some(which) = split {
                records = split_dataset(&records, ratio, seed)?;
                records.retain(|r| r.split == Some(which));
            }
            print_json(&evaluate_records(&model, &records)?)?;
        }
        Command::Bench {
            spec,
            weights,
            runs,
            warmup,
        } => {
            let s = load_spec(&spec)?;
            let model = match weights {
                Some(w) => load_weights(&s, &w)?,
                None => Model::instantiate(&s, 0)?,
            };
            print_json(&bench_latency(&model, runs, warmup, 0)?)?;
        }
        Command::Predict { spec, weights, image } => {
            let model = load_weights(&load_spec(&spec)?, &weights)?;
            let p = predict(&model, &image)?;
            print_json(&p)?;
            return Ok(p.exit_code() as u8);
        }
        Command::Report { rows, baseline } => {
            let text = std::fs::read_to_string(&rows).map_err(|e| format!("{}: {e}", rows.display()))?;
            let rows: Vec<ReportRow> = serde_json::from_str(&text)?;
            print!("{}", report_table(&rows, baseline)?);
        }
    }
    Ok(0)
}

fn run_explore(args: ExploreArgs) -> Res<u8> {
    let mut seeds = Vec::new();
    match &args.seeds {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
            paths.sort();
            for p in paths {
                let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                seeds.push((load_spec(&p.to_string_lossy())?, label));
            }
            if seeds.is_empty() {
                return Err(format!("no *.json specs in {}", dir.display()).into());
            }
        }
        None => seeds.push((reference_spec(), "reference".to_owned())),
    }
    let first = seeds[0].0.clone();
    let train = synth_samples(args.proxy_samples, 0.5, args.seed, &first)?;
    let val = synth_samples((args.proxy_samples / 4).max(2), 0.5, args.seed.wrapping_add(1), &first)?;
    let mut proxy = ProxyConfig {
        seed: args.seed,
        ..ProxyConfig::default()
    };
    proxy.phase.epochs = args.proxy_epochs;
    let mut evaluator = ProxyEvaluator::new(train, val, proxy);
    let config = ExploreConfig {
        generations: args.generations,
        population: args.population,
        ..ExploreConfig::default()
    };
    let mut history = args.history.as_deref().map(create).transpose()?;
    let outcome = explore(
        &SeedSet {
            seeds,
            rng_seed: args.seed,
        },
        &args.constraints.build(),
        &config,
        &mut evaluator,
        history.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(mut w) = history {
        w.flush()?;
    }
    let best = outcome.best;
    std::fs::write(&args.out, best.spec.to_json())?;
    let mut summary = serde_json::json!({
        "id": best.id,
        "accuracy_pct": best.accuracy_pct,
        "params": best.params,
        "macs": best.macs,
        "score_u": best.score_u,
        "lineage": best.lineage,
        "out": args.out.display().to_string(),
    });
    if let Some(epochs) = args.final_epochs {
        evaluator.config.phase.epochs = epochs;
        summary["final_accuracy_pct"] = serde_json::json!(evaluator.run(&best.spec)?);
    }
    print_json(&summary)?;
    Ok(0)
}

fn run_train(args: TrainArgs) -> Res<()> {
    let spec = load_spec(&args.spec)?;
    let records = split_dataset(&load_manifest(&args.manifest)?, args.ratio, args.seed)?;
    let (train, test): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.split == Some(Split::Train));
    let train = load_samples(&train, &spec)?;
    let test = load_samples(&test, &spec)?;
    let mut cfg = TrainConfig {
        rng_seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(e) = args.phase1_epochs {
        cfg.phase1.epochs = e;
    }
    if let Some(e) = args.phase2_epochs {
        cfg.phase2.epochs = e;
    }
    let mut model = Model::instantiate(&spec, args.seed)?;
    let mut log = args.log.as_deref().map(create).transpose()?;
    train_two_phase(&mut model, &train, &cfg, log.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    save_weights(&model, &args.out)?;
    print_json(&serde_json::json!({
        "weights": args.out.display().to_string(),
        "train": evaluate(&model, &train)?,
        "test": evaluate(&model, &test)?,
    }))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
