use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lsbd::cli::{self, CliError, ExperimentConfig, StageDirs};

#[derive(Parser)]
#[command(name = "lsbd", about = "Group-structured world models: data, training, clustering and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the transition dataset and its held-out part.
    GenData(Common),
    /// Train the unmasked model.
    TrainAvae(Common),
    /// Cluster actions into subgroups.
    Cluster(Common),
    /// Train the masked model on the recovered clusters.
    TrainGmavae(Common),
    /// Score both models and write report.json.
    Evaluate(Common),
    /// Write rollout error curves.
    Rollout(Common),
    /// Run every stage in order.
    Pipeline(Common),
    /// Pick the seed with the lowest prediction error.
    Select(Common),
    /// Print a preset's resolved config.
    ShowConfig(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment: flc, flp, dials2 or dials3.
    #[arg(long)]
    preset: Option<String>,
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; seeds go to <out>/seed_<n>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Use this directory for the seed's files instead of <out>/seed_<n>.
    #[arg(long, requires = "seed")]
    stage_dir: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => Ok(ExperimentConfig::load(p)?),
            (None, Some(name)) => match cli::preset(name) {
                Some(c) => Ok(c),
                None => bail!(CliError::Config(format!("unknown preset {name:?}; known: {:?}", cli::PRESETS))),
            },
            (None, None) => bail!(CliError::Config("pass --config or --preset".into())),
        }
    }

    fn out(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn seeds(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        self.seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone())
    }

    fn dirs(&self, out: &std::path::Path, seed: u64) -> StageDirs {
        match &self.stage_dir {
            Some(d) => StageDirs::new(d),
            None => StageDirs::for_seed(out, seed),
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    let (common, which) = match &cmd {
        Command::GenData(c) => (c, "gen-data"),
        Command::TrainAvae(c) => (c, "train-avae"),
        Command::Cluster(c) => (c, "cluster"),
        Command::TrainGmavae(c) => (c, "train-gmavae"),
        Command::Evaluate(c) => (c, "evaluate"),
        Command::Rollout(c) => (c, "rollout"),
        Command::Pipeline(c) => (c, "pipeline"),
        Command::Select(c) => (c, "select"),
        Command::ShowConfig(c) => (c, "show-config"),
    };
    let cfg = common.config()?;
    if which == "show-config" {
        println!("{}", cfg.resolved_json());
        return Ok(());
    }
    if common.threads == 0 {
        bail!(CliError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global().context("thread pool")?;
    let out = common.out(&cfg);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), cfg.resolved_json())?;
    let seeds = common.seeds(&cfg);
    if which == "select" {
        let sel = cli::stage_select(&seeds, &out)?;
        println!("{}", serde_json::to_string(&sel)?);
        return Ok(());
    }
    for seed in seeds {
        let dirs = common.dirs(&out, seed);
        fs::create_dir_all(&dirs.root)?;
        match which {
            "gen-data" => cli::stage_gen_data(&cfg, seed, &dirs)?,
            "train-avae" => cli::stage_train_avae(&cfg, seed, &dirs)?,
            "cluster" => {
                let p = cli::stage_cluster(&cfg, &dirs)?;
                println!("{}", serde_json::json!({"seed": seed, "clusters": p.clusters, "eta": p.threshold_used}));
            }
            "train-gmavae" => cli::stage_train_gmavae(&cfg, seed, &dirs)?,
            "rollout" => cli::stage_rollout(&cfg, seed, &dirs)?,
            "evaluate" | "pipeline" => {
                let r = if which == "pipeline" { cli::run_pipeline(&cfg, seed, &dirs)? } else { cli::stage_evaluate(&cfg, seed, &dirs)? };
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed,
                        "ari": r.ari,
                        "block_independence": r.gmavae.block_independence,
                        "equivariance_mean": r.gmavae.equivariance.mean,
                        "report": dirs.report(),
                    })
                );
            }
            _ => unreachable!(),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<CliError>().map(CliError::kind).unwrap_or("io");
            eprintln!("{}", serde_json::json!({"error": kind, "message": format!("{e:#}")}));
            ExitCode::from(2)
        }
    }
}
