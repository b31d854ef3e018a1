use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use conformal_deferral::conformal::ScoreKind;
use conformal_deferral::dataio::{
    aggregate_superclasses, load_costs, read_json, write_costs, write_json, write_results,
    write_results_csv, AnnotationStore, ClassMapping, ProbabilityTable,
};
use conformal_deferral::evaluation::{
    ablate_shots, expert_fraction_sweep, retain_bottom_fraction, summarize, summarize_ablation,
    AblationPoint, Benchmark, ExperimentConfig, Knowledge,
};
use conformal_deferral::experts::TieRule;
use conformal_deferral::policy::Strategy;
use conformal_deferral::report::{ablation_plot, ablation_table, render_report};
use conformal_deferral::synth::{canonical_specialists, gen_dataset, SynthConfig};
use conformal_deferral::{Error, Result};

const SCHEMAS: &str = "\
FILE SCHEMAS (comma-separated, header row required):
  probabilities  sample_id,true_label,p_0,...,p_{C-1}
  annotations    expert_id,sample_id,predicted_label
  mapping        fine_label,coarse_label
  costs          expert_id,cost
  results        split,score,strategy,alpha,accuracy,n_queries,max_qpe,avg_qpe

CONFIG FILE (JSON, every key optional, flags take precedence):
  probs, annotations, mapping, costs, out, score, strategies, alphas, splits,
  cal_size, seed, tie_rule, knowledge, jobs, raps_grid, raps_tuning_fraction,
  raps_tuning_alpha, fractions, step, shots

EXIT CODES: 0 success, 1 invalid input or arguments, 2 failure while running.";

#[derive(Parser)]
#[command(name = "conformal-deferral", version, about = "Defer classifier decisions to human experts using conformal prediction sets", after_help = SCHEMAS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep one score and a strategy set over splits at the given alphas (default: the full grid).
    #[command(after_help = SCHEMAS)]
    Run(SweepArgs),
    /// Sweep the full miscoverage grid derived from the model's accuracy.
    #[command(after_help = SCHEMAS)]
    Grid(SweepArgs),
    /// Rerun the grid with only the weakest fraction of experts.
    #[command(after_help = SCHEMAS)]
    AblateExperts {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Kept fractions, comma separated (default: 1, 0.95, ... until a sample loses all annotators).
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Decrement of the default fraction sweep.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Rerun the grid with expert profiles limited to N records per label.
    #[command(after_help = SCHEMAS)]
    AblateShots {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Shot counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
    },
    /// Generate a synthetic probability table and annotation store.
    #[command(after_help = SCHEMAS)]
    Synth {
        /// Scenario JSON (classes, n, model_target_accuracy, confusion_sharpness, blocks, leak, experts, seed).
        #[arg(long, conflicts_with = "canonical")]
        config: Option<PathBuf>,
        /// Use the built-in specialist scenario instead of a config file.
        #[arg(long)]
        canonical: bool,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for probs.csv, annotations.csv, costs.csv and scenario.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render results.csv into summary.md and SVG plots.
    #[command(after_help = SCHEMAS)]
    Report {
        /// A results.csv written by run or grid.
        results: PathBuf,
        /// Output directory (default: next to the results file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Probability table.
    #[arg(long)]
    probs: Option<PathBuf>,
    /// Expert annotations.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Optional fine-to-coarse class mapping applied to the probability table.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Optional expert costs for the least-cost tie rule.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Nonconformity score: lac, aps or raps.
    #[arg(long)]
    score: Option<ScoreKind>,
    /// A single miscoverage level (run only).
    #[arg(long)]
    alpha: Option<f64>,
    /// Strategies, comma separated (default: all six).
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    /// Number of calibration/test splits.
    #[arg(long)]
    splits: Option<usize>,
    /// Calibration set size per split.
    #[arg(long)]
    cal_size: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Tie rule among equally scored experts: random or cost.
    #[arg(long)]
    tie: Option<TieRule>,
    /// Expert knowledge: loo or shots:N.
    #[arg(long)]
    knowledge: Option<Knowledge>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = automatic).
    #[arg(long, env = "CONF_DEFERRAL_JOBS")]
    jobs: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    probs: Option<PathBuf>,
    annotations: Option<PathBuf>,
    mapping: Option<PathBuf>,
    costs: Option<PathBuf>,
    out: Option<PathBuf>,
    score: Option<ScoreKind>,
    strategies: Option<Vec<Strategy>>,
    alphas: Option<Vec<f64>>,
    splits: Option<usize>,
    cal_size: Option<usize>,
    seed: Option<u64>,
    tie_rule: Option<TieRule>,
    knowledge: Option<Knowledge>,
    jobs: Option<usize>,
    raps_grid: Option<Vec<conformal_deferral::conformal::RapsParams>>,
    raps_tuning_fraction: Option<f64>,
    raps_tuning_alpha: Option<f64>,
    fractions: Option<Vec<f64>>,
    step: Option<f64>,
    shots: Option<Vec<usize>>,
}

struct Sweep {
    bench: Benchmark,
    config: ExperimentConfig,
    out: PathBuf,
    file: FileConfig,
}

fn require_file(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| Error::InvalidParameter(format!("--{flag} is required")))?;
    if !path.is_file() {
        return Err(Error::InvalidParameter(format!(
            "--{flag}: `{}` does not exist or is not a file",
            path.display()
        )));
    }
    Ok(path)
}

fn prepare(args: SweepArgs, full_grid: bool) -> Result<Sweep> {
    let mut file: FileConfig = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::InvalidParameter(format!(
                    "--config: `{}` does not exist",
                    path.display()
                )));
            }
            read_json(path)?
        }
        None => FileConfig::default(),
    };
    let probs = require_file(args.probs.or(file.probs.take()), "probs")?;
    let annotations = require_file(args.annotations.or(file.annotations.take()), "annotations")?;
    let mapping = args.mapping.or(file.mapping.take());
    let costs = args.costs.or(file.costs.take());
    let out = args
        .out
        .or(file.out.take())
        .ok_or_else(|| Error::InvalidParameter("--out is required".into()))?;

    let mut config = ExperimentConfig::default();
    config.score = args.score.or(file.score).unwrap_or(config.score);
    config.strategies = args
        .strategies
        .or(file.strategies.take())
        .unwrap_or(config.strategies);
    config.splits = args.splits.or(file.splits).unwrap_or(config.splits);
    config.cal_size = args.cal_size.or(file.cal_size).unwrap_or(config.cal_size);
    config.seed = args.seed.or(file.seed).unwrap_or(config.seed);
    config.tie_rule = args.tie.or(file.tie_rule).unwrap_or(config.tie_rule);
    config.knowledge = args
        .knowledge
        .or(file.knowledge)
        .unwrap_or(config.knowledge);
    config.jobs = args.jobs.or(file.jobs).unwrap_or(config.jobs);
    config.raps_grid = file.raps_grid.take().unwrap_or(config.raps_grid);
    config.raps_tuning_fraction = file
        .raps_tuning_fraction
        .unwrap_or(config.raps_tuning_fraction);
    config.raps_tuning_alpha = file.raps_tuning_alpha.unwrap_or(config.raps_tuning_alpha);
    config.alphas = match (args.alpha, file.alphas.take()) {
        (Some(_), _) if full_grid => {
            return Err(Error::InvalidParameter(
                "--alpha cannot be combined with the full grid; use `run --alpha`".into(),
            ))
        }
        (Some(a), _) => Some(vec![a]),
        (None, _) if full_grid => None,
        (None, alphas) => alphas,
    };
    config.validate()?;

    let mut table = ProbabilityTable::load(&probs)?;
    for w in table.warnings() {
        log::warn!("{}: {w}", probs.display());
    }
    if let Some(path) = mapping {
        let map = ClassMapping::load(require_file(Some(path), "mapping")?)?;
        table = aggregate_superclasses(&table, &map)?;
    }
    let store = AnnotationStore::load(&annotations, &table)?;
    let mut bench = Benchmark::new(table, store)?;
    if let Some(path) = costs {
        bench = bench.with_costs(&load_costs(require_file(Some(path), "costs")?)?);
    }
    log::info!(
        "{} samples, {} classes, {} experts, model accuracy {:.4}",
        bench.table().len(),
        bench.table().classes(),
        bench.profiles().len(),
        bench.table().model_accuracy()
    );
    Ok(Sweep {
        bench,
        config,
        out,
        file,
    })
}

fn sweep(args: SweepArgs, full_grid: bool) -> Result<()> {
    let Sweep {
        bench, config, out, ..
    } = prepare(args, full_grid)?;
    let started = Instant::now();
    let results = bench.run(&config)?;
    log::info!("{} result rows in {:.1?}", results.len(), started.elapsed());
    let summaries = summarize(&results)?;
    write_json(&config, out.join("config.json"))?;
    for path in write_results(&results, &summaries, &out)? {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn write_ablation(
    out: &Path,
    name: &str,
    parameter: &str,
    title: &str,
    points: &[AblationPoint],
) -> Result<()> {
    for p in points {
        write_results_csv(
            &p.results,
            out.join(format!("{name}_{}", p.parameter))
                .join("results.csv"),
        )?;
    }
    let rows = summarize_ablation(points)?;
    write_json(&rows, out.join(format!("{name}_summary.json")))?;
    let table_path = out.join(format!("{name}_summary.md"));
    std::fs::write(&table_path, ablation_table(parameter, &rows)).map_err(|e| Error::Io {
        path: table_path.clone(),
        source: e,
    })?;
    ablation_plot(&rows, parameter, title).write(out.join(format!("{name}.svg")))?;
    log::info!(
        "wrote {name} ablation ({} points) to {}",
        points.len(),
        out.display()
    );
    Ok(())
}

fn ablate_experts_cmd(
    args: SweepArgs,
    fractions: Option<Vec<f64>>,
    step: Option<f64>,
) -> Result<()> {
    let Sweep {
        bench,
        config,
        out,
        file,
    } = prepare(args, false)?;
    let points = match fractions.or(file.fractions) {
        Some(fs) => fs
            .into_iter()
            .map(|f| {
                Ok(AblationPoint {
                    parameter: f,
                    results: retain_bottom_fraction(&bench, f)?.run(&config)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        None => expert_fraction_sweep(&bench, &config, step.or(file.step).unwrap_or(0.05))?,
    };
    write_ablation(
        &out,
        "experts",
        "f_kept",
        "Accuracy vs kept expert fraction",
        &points,
    )
}

fn ablate_shots_cmd(args: SweepArgs, shots: Option<Vec<usize>>) -> Result<()> {
    let Sweep {
        bench,
        config,
        out,
        file,
    } = prepare(args, false)?;
    let shots = shots
        .or(file.shots)
        .unwrap_or_else(|| vec![1, 2, 5, 10, 20, 50]);
    let points = ablate_shots(&bench, &config, &shots)?;
    write_ablation(
        &out,
        "shots",
        "n_shots",
        "Accuracy vs shots per label",
        &points,
    )
}

fn synth_cmd(
    config: Option<PathBuf>,
    canonical: bool,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<()> {
    let mut cfg: SynthConfig = match (config, canonical) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(Error::InvalidParameter(format!(
                    "--config: `{}` does not exist",
                    path.display()
                )));
            }
            read_json(&path)?
        }
        (None, true) => canonical_specialists(0),
        (None, false) => {
            return Err(Error::InvalidParameter(
                "synth needs --config or --canonical".into(),
            ));
        }
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let (table, store) = gen_dataset(&cfg)?;
    table.write(out.join("probs.csv"))?;
    store.write(out.join("annotations.csv"))?;
    write_costs(&cfg.costs(), out.join("costs.csv"))?;
    write_json(&cfg, out.join("scenario.json"))?;
    log::info!(
        "wrote {} samples and {} annotations to {} (model accuracy {:.4})",
        table.len(),
        store.len(),
        out.display(),
        table.model_accuracy()
    );
    Ok(())
}

fn report_cmd(results: PathBuf, out: Option<PathBuf>) -> Result<()> {
    if !results.is_file() {
        return Err(Error::InvalidParameter(format!(
            "`{}` does not exist",
            results.display()
        )));
    }
    let out = out.unwrap_or_else(|| results.parent().map(Path::to_path_buf).unwrap_or_default());
    let report = render_report(&results, &out)?;
    print!("{}", report.table);
    for f in &report.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => sweep(args, false),
        Command::Grid(args) => sweep(args, true),
        Command::AblateExperts {
            sweep,
            fractions,
            step,
        } => ablate_experts_cmd(sweep, fractions, step),
        Command::AblateShots { sweep, shots } => ablate_shots_cmd(sweep, shots),
        Command::Synth {
            config,
            canonical,
            seed,
            out,
        } => synth_cmd(config, canonical, seed, out),
        Command::Report { results, out } => report_cmd(results, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
