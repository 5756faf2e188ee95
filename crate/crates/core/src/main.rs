use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cbcnn::checkpoint::Checkpoint;
use cbcnn::config::PipelineConfig;
use cbcnn::dataset::FeatureMatrix;
use cbcnn::eval;
use cbcnn::pipeline::{self, FittedModel, Stage};
use cbcnn::synth;

#[derive(Parser)]
#[command(name = "cbcnn", version, about = "Channel-boosted CNN churn pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override the output directory (relative to the working directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full cross-validated pipeline.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run one stage from the artifacts of earlier stages.
    Stage {
        /// preprocess, balance, pca, encode, train-sae, pretrain, train or eval.
        name: Stage,
        #[arg(short, long)]
        config: PathBuf,
        /// Restrict a per-fold stage to one fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Write the configured synthetic data set.
    Synth {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Score a preprocessed CSV with a saved model.
    Eval {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        /// Write per-row scores here.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
}

fn load_config(path: &Path, g: &Global) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &g.out {
        let abs = std::env::current_dir()?.join(o);
        cfg.output_dir = abs.display().to_string();
    }
    Ok(cfg)
}

fn cmd_eval(model: &Path, data: &Path, scores_out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(model)?;
    let fitted = FittedModel::from_checkpoint(&ck).map_err(anyhow::Error::msg)?;
    let m = FeatureMatrix::load_csv(data)?;
    let scores = cbcnn::par::with_jobs(0, || fitted.score(&m)).map_err(anyhow::Error::msg)?;
    if let Some(p) = scores_out {
        let mut text = String::from("row,label,score\n");
        for (i, (l, s)) in m.labels.iter().zip(&scores).enumerate() {
            text.push_str(&format!("{i},{l},{s}\n"));
        }
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("n = {}", m.n_samples());
    match eval::roc_auc(&scores, &m.labels) {
        Ok(a) => println!("auc = {a:.6}"),
        Err(e) => println!("auc = undefined ({e})"),
    }
    println!("accuracy = {:.6}", eval::accuracy(&scores, &m.labels, 0.5)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config, &cli.global)?;
            let out = pipeline::cmd_run(&cfg)?;
            print!("{}", out.report.to_text());
        }
        Command::Stage { name, config, fold } => {
            let cfg = load_config(&config, &cli.global)?;
            if fold.is_some() && !name.per_fold() {
                bail!("stage {name} does not take --fold");
            }
            pipeline::cmd_stage(name, &cfg, fold)?;
        }
        Command::Synth { config } => {
            let cfg = load_config(&config, &cli.global)?;
            let path = cfg.resolve(&cfg.synth.out);
            synth::write_synthetic(&cfg.synth, &cfg.label_column, cfg.seed, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { model, data, scores } => cmd_eval(&model, &data, scores.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
