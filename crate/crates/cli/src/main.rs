use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use metamixer::evaluation::{self, Evaluation};
use metamixer::training::{self, PretrainOptions, RunOptions};
use metamixer::{gradcheck, Checkpoint, ExperimentConfig, Network, RandomStream};

#[derive(Parser)]
#[command(name = "metamixer", version, about = "Online distillation with local and global mixing")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Preset supplying unset keys: cifar, desk or imagenet.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Disable patch mixing of input images.
    #[arg(long, global = true)]
    no_local_mix: bool,
    /// Disable interpolation of hidden representations.
    #[arg(long, global = true)]
    no_global_mix: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured network alone with cross-entropy.
    Pretrain { config: PathBuf },
    /// Run the distillation experiment.
    Distill {
        config: PathBuf,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report test accuracy of the networks stored in checkpoints.
    Eval {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Write pooled final features of the test split as CSV.
    ExportEmbeddings {
        checkpoint: PathBuf,
        /// Index of the network inside the checkpoint.
        #[arg(long, default_value_t = 0)]
        net: usize,
        /// Destination file (default: <out>/embeddings-net<i>.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference checks of the loss gradients.
    Gradcheck { config: PathBuf },
    /// Repeat the experiment over a grid of Beta concentrations.
    SweepAlpha {
        config: PathBuf,
        /// Every (α₁, α₂) pair instead of one-at-a-time slices.
        #[arg(long)]
        full: bool,
    },
}

fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
    if let Some(p) = &o.profile {
        table.insert("profile".into(), toml::Value::String(p.clone()));
    }
    let mut cfg = ExperimentConfig::from_toml(&toml::to_string(&table)?).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if o.no_local_mix {
        cfg.local_mixing = false;
    }
    if o.no_global_mix {
        cfg.global_mixing = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_evaluation(label: &str, e: &Evaluation) {
    for (i, acc) in e.per_network.iter().enumerate() {
        println!("{label} net {i}: {:.2}%", 100.0 * acc);
    }
    println!("{label} avg: {:.2}%", 100.0 * e.avg);
    if let Some(ens) = e.ens {
        println!("{label} ens: {:.2}%", 100.0 * ens);
    }
}

fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let splits = training::load_splits(cfg)?;
    let mut nets = training::init_networks(cfg, &splits.train)?;
    let schedule = cfg.pretrain_schedule();
    let opts = PretrainOptions {
        batch_size: cfg.batch_size,
        augment: cfg.augment(),
        track_after: false,
    };
    for (i, net) in nets.iter_mut().enumerate() {
        info!("pretraining network {i} ({}) for {} epochs", net.architecture(), schedule.total_epochs);
        let mut rng = RandomStream::new(cfg.seed, &format!("pretrain/{i}"));
        training::pretrain(net, &splits.train, &schedule, &opts, &mut rng)?;
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let path = training::RunPaths::new(&cfg.out_dir).pretrained();
    Checkpoint {
        epoch: 0,
        config: cfg.clone(),
        streams: Vec::new(),
        optimizers: nets.iter().map(|_| cfg.schedule().optimizer()).collect(),
        networks: nets.clone(),
    }
    .save(&path)?;
    let e = Evaluation::of(&nets.iter().collect::<Vec<_>>(), &splits.test)?;
    print_evaluation("baseline", &e);
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn eval(paths: &[PathBuf]) -> Result<()> {
    let mut all: Vec<(Network, ExperimentConfig)> = Vec::new();
    for path in paths {
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let splits = training::load_splits(&ck.config)?;
        let e = Evaluation::of(&ck.networks.iter().collect::<Vec<_>>(), &splits.test)?;
        print_evaluation(&path.display().to_string(), &e);
        all.extend(ck.networks.into_iter().map(|n| (n, ck.config.clone())));
    }
    if paths.len() > 1 && all.len() >= 2 {
        let cfg = &all[0].1;
        if all.iter().any(|(_, c)| c.dataset_source().ok() != cfg.dataset_source().ok()) {
            bail!("checkpoints were trained on different datasets; not ensembling across them");
        }
        let splits = training::load_splits(cfg)?;
        let nets: Vec<&Network> = all.iter().map(|(n, _)| n).collect();
        println!(
            "all checkpoints ens: {:.2}%",
            100.0 * evaluation::ensemble_accuracy(&nets, &splits.test)?
        );
    }
    Ok(())
}

fn export(checkpoint: &Path, net: usize, output: Option<&Path>, o: &Overrides) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let Some(network) = ck.networks.get(net) else {
        bail!("checkpoint holds {} networks, no index {net}", ck.networks.len());
    };
    let splits = training::load_splits(&ck.config)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = o.out.clone().unwrap_or_else(|| ck.config.out_dir.clone());
            fs::create_dir_all(&dir)?;
            dir.join(format!("embeddings-net{net}.csv"))
        }
    };
    evaluation::export_embeddings(network, &splits.test, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let o = &cli.overrides;
    match &cli.command {
        Command::Pretrain { config } => pretrain(&load_config(config, o)?),
        Command::Distill { config, resume } => {
            let cfg = load_config(config, o)?;
            let report = training::run_with(&cfg, &RunOptions { resume: resume.clone() })?;
            print_evaluation("final", &report.last);
            println!("report: {}", training::RunPaths::new(&cfg.out_dir).report().display());
            Ok(())
        }
        Command::Eval { checkpoints } => eval(checkpoints),
        Command::ExportEmbeddings { checkpoint, net, output } => export(checkpoint, *net, output.as_deref(), o),
        Command::Gradcheck { config } => {
            let cfg = load_config(config, o)?;
            let report = gradcheck::run_suite(cfg.seed)?;
            println!("{}", gradcheck::describe(&report));
            if !report.passed() {
                bail!("gradient check failed");
            }
            Ok(())
        }
        Command::SweepAlpha { config, full } => {
            let cfg = load_config(config, o)?;
            let pairs = training::sweep_pairs(&cfg, &training::ALPHA_GRID, *full);
            let points = training::sweep_alpha(&cfg, &pairs)?;
            let mut csv = String::from("alpha1,alpha2,avg,ens\n");
            for p in &points {
                let ens = p.ens.map(|v| v.to_string()).unwrap_or_default();
                csv.push_str(&format!("{},{},{},{ens}\n", p.alpha1, p.alpha2, p.avg));
            }
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("sweep.csv");
            fs::write(&path, &csv)?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
