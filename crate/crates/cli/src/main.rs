use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use mbdl_prune::bench::{
    evaluate, prepare_seed, read_metrics, row_tag, run_experiment, summarize, train_unpruned, write_summary,
    ExperimentConfig, SeedData,
};
use mbdl_prune::finetune::{finetune, FinetuneSetup, FinetuneStrategy, StrategyKind};
use mbdl_prune::model::io::{load_weights, save_weights};
use mbdl_prune::model::Network;
use mbdl_prune::prune::prune_network;
use mbdl_prune::Error;

#[derive(Parser)]
#[command(name = "mbdl-bench", version, about = "Prune, fine-tune and benchmark model-based reconstruction networks")]
struct Cli {
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Channel pruning ratio in [0, 1).
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// Fine-tuning strategy: sv, sc or ss.
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Inverse problem: mri or sr.
    #[arg(long, global = true)]
    problem: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unpruned model with supervision and save its weights.
    Train,
    /// Prune a weight file by `--ratio`.
    Prune {
        /// Defaults to the unpruned weights written by `train`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Fine-tune pruned weights with `--strategy`.
    Finetune {
        /// Defaults to the pruned weights written by `prune`.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Teacher for the school strategy; defaults to the unpruned weights.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a weight file on the evaluation split.
    Eval {
        #[arg(long)]
        weights: PathBuf,
    },
    /// Run the full train/prune/fine-tune sweep.
    Bench,
    /// Summarise `metrics.csv` over seeds.
    Report,
}

fn load_config(cli: &Cli) -> mbdl_prune::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &cli.problem {
        cfg.set("problem", p)?;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(r) = cli.ratio {
        cfg.ratios = vec![r];
    }
    if let Some(s) = &cli.strategy {
        cfg.set("strategies", s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn single_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn single_ratio(cfg: &ExperimentConfig) -> anyhow::Result<f64> {
    match cfg.ratios.as_slice() {
        [r] => Ok(*r),
        _ => Err(Error::Config("pass --ratio to choose one pruning ratio".into()).into()),
    }
}

fn single_strategy(cfg: &ExperimentConfig) -> anyhow::Result<StrategyKind> {
    match cfg.strategies.as_slice() {
        [s] => Ok(*s),
        _ => Err(Error::Config("pass --strategy to choose one of sv, sc, ss".into()).into()),
    }
}

fn weights_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("weights_{tag}.spde"))
}

fn load(path: &Path) -> anyhow::Result<Network> {
    load_weights(path).with_context(|| format!("reading {}", path.display()))
}

fn report_eval(cfg: &ExperimentConfig, tag: &str, net: &Network, data: &SeedData) -> anyhow::Result<()> {
    let e = evaluate(cfg, net, data)?;
    let trace = cfg.out_dir.join(format!("trace_{tag}.csv"));
    e.trace.write_csv(fs::File::create(&trace)?)?;
    println!(
        "{tag}: psnr {:.3} dB, ssim {:.2}%, params {}, flops {}, {:.2} ± {:.2} ms",
        e.psnr, e.ssim_pct, e.params, e.flops, e.timing.mean_ms, e.timing.std_ms
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let seed = single_seed(&cfg);
    match &cli.command {
        Command::Train => {
            let data = prepare_seed(&cfg, seed)?;
            let tag = row_tag(seed, 0.0, "none");
            let (net, log) = train_unpruned(&cfg, &data)?;
            log.write_csv(fs::File::create(cfg.out_dir.join(format!("train_{tag}.csv")))?)?;
            let path = weights_path(&cfg.out_dir, &tag);
            save_weights(&net, &path)?;
            info!("wrote {}", path.display());
            report_eval(&cfg, &tag, &net, &data)?;
        }
        Command::Prune { weights } => {
            let ratio = single_ratio(&cfg)?;
            let src = weights
                .clone()
                .unwrap_or_else(|| weights_path(&cfg.out_dir, &row_tag(seed, 0.0, "none")));
            let net = load(&src)?;
            let (pruned, report) = prune_network(&net, ratio)?;
            let tag = row_tag(seed, ratio, "none");
            report.write_csv(fs::File::create(cfg.out_dir.join(format!("prune_report_{tag}.csv")))?)?;
            save_weights(&pruned, weights_path(&cfg.out_dir, &tag))?;
            print!("{report}");
        }
        Command::Finetune { weights, teacher } => {
            let ratio = single_ratio(&cfg)?;
            let kind = single_strategy(&cfg)?;
            let src = weights
                .clone()
                .unwrap_or_else(|| weights_path(&cfg.out_dir, &row_tag(seed, ratio, "none")));
            let net = load(&src)?;
            let teacher_path = teacher
                .clone()
                .unwrap_or_else(|| weights_path(&cfg.out_dir, &row_tag(seed, 0.0, "none")));
            let teacher = match kind {
                StrategyKind::School => Some(load(&teacher_path)?),
                _ => None,
            };
            let data = prepare_seed(&cfg, seed)?;
            let mut setup = FinetuneSetup::new(data.op.clone(), data.solver.clone());
            setup.epochs = cfg.epochs;
            setup.lr = cfg.finetune_lr(kind);
            setup.batch_size = cfg.batch_size;
            setup.seed = seed;
            setup.teacher = teacher.as_ref();
            let strategy = FinetuneStrategy {
                kind,
                transforms: cfg.transforms.clone(),
                loss: cfg.loss,
            };
            let (tuned, log) = finetune(&net, &strategy, data.split_for(kind), &setup)?;
            let tag = row_tag(seed, ratio, kind.tag());
            log.write_csv(fs::File::create(cfg.out_dir.join(format!("train_{tag}.csv")))?)?;
            save_weights(&tuned, weights_path(&cfg.out_dir, &tag))?;
            report_eval(&cfg, &tag, &tuned, &data)?;
        }
        Command::Eval { weights } => {
            let net = load(weights)?;
            let data = prepare_seed(&cfg, seed)?;
            let tag = weights
                .file_stem()
                .and_then(|s| s.to_str())
                .map(|s| s.trim_start_matches("weights_").to_string())
                .unwrap_or_else(|| "eval".into());
            report_eval(&cfg, &tag, &net, &data)?;
        }
        Command::Bench => {
            let rows = run_experiment(&cfg)?;
            println!("{} rows written to {}", rows.len(), cfg.out_dir.join("metrics.csv").display());
        }
        Command::Report => {
            let path = cfg.out_dir.join("metrics.csv");
            let rows = read_metrics(&path).with_context(|| format!("reading {}", path.display()))?;
            if rows.is_empty() {
                bail!(Error::Format(format!("{} has no rows", path.display())));
            }
            let summary = summarize(&rows);
            write_summary(&summary, fs::File::create(cfg.out_dir.join("summary.csv"))?)?;
            println!(
                "{:>6} {:>10} {:>5} {:>9} {:>9} {:>8} {:>10} {:>8} {:>8}",
                "ratio", "strategy", "seeds", "achieved", "psnr", "ssim%", "params", "speedup", "degr%"
            );
            for s in &summary {
                println!(
                    "{:>6.2} {:>10} {:>5} {:>9.4} {:>9.3} {:>8.2} {:>10.0} {:>8.3} {:>8.3}",
                    s.nominal_ratio,
                    s.strategy,
                    s.seeds,
                    s.achieved_ratio,
                    s.psnr,
                    s.ssim_pct,
                    s.params,
                    s.speedup,
                    s.degradation_pct
                );
            }
        }
    }
    Ok(())
}

/// 2 for configuration problems, 3 for numerical divergence, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.is::<std::io::Error>()) { 4 } else { 1 };
    };
    match e.root() {
        Error::Config(_) | Error::InvalidSpec(_) | Error::Incompatible(_) => 2,
        Error::Divergence(_) => 3,
        Error::Io(_) | Error::Csv(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
