//! `cow` — command-line frontend for the few-shot segmentation pipeline.
//!
//! Subcommands: `gen-data` materializes synthetic episodes, `train` runs the
//! episodic loop, `eval` scores a checkpoint on held-out classes, and
//! `export-protos` dumps one episode's mined prototype banks. Exit codes:
//! 0 on success, 2 for configuration problems, 3 for numeric failures,
//! 1 for anything else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cow_core::config::{GenDataConfig, TrainConfig};
use cow_core::data::{derive_seed, generate_episode, load_episode, save_episode, FoldSplit};
use cow_core::harness::{evaluate, export_prototypes, load_checkpoint, train};
use cow_core::{CowError, Result, Scalar};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cow", version, about = "Few-shot segmentation: generate data, train, evaluate, export prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize synthetic episodes plus a manifest into a directory
    GenData {
        /// Flat key=value config file with the data settings
        #[arg(long)]
        config: PathBuf,
        /// Output directory for episode files and manifest.txt
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the episodic training loop and write checkpoints and metrics
    Train {
        /// Flat key=value config file with the full training settings
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and metrics.log
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of a fresh initialization
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one fold's held-out classes
    Eval {
        /// Checkpoint file produced by `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// Fold whose test classes to evaluate on
        #[arg(long)]
        fold: usize,
        /// Number of evaluation episodes
        #[arg(long)]
        episodes: usize,
        /// Seed for the evaluation episode stream
        #[arg(long)]
        seed: u64,
    },
    /// Mine one episode's prototype banks and write them with their tags
    ExportProtos {
        /// Checkpoint file produced by `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// Episode file produced by `gen-data`
        #[arg(long)]
        episode: PathBuf,
        /// Output container file
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, out, resume } => run_train(&config, &out, resume.as_deref()),
        Command::Eval { ckpt, fold, episodes, seed } => run_eval(&ckpt, fold, episodes, seed),
        Command::ExportProtos { ckpt, episode, out } => run_export(&ckpt, &episode, &out),
    }
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| CowError::Config(format!("cannot read config file {}: {e}", path.display())))
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = GenDataConfig::from_text(&read_config(config)?)?;
    fs::create_dir_all(out)?;
    let mut manifest = String::new();
    let mut written = 0usize;
    for class_id in 0..cfg.data.n_classes_total() as u32 {
        for idx in 0..cfg.episodes_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.data.seed, u64::from(class_id), idx as u64));
            let episode = generate_episode::<Scalar>(&cfg.data, class_id, &mut rng)?;
            let name = format!("ep_c{class_id:03}_i{idx:04}.cowt");
            save_episode(&episode, &out.join(&name))?;
            let _ = writeln!(manifest, "{class_id} {name}");
            written += 1;
        }
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    println!(
        "wrote {written} episodes ({} classes x {} each) and manifest.txt to {}",
        cfg.data.n_classes_total(),
        cfg.episodes_per_class,
        out.display()
    );
    Ok(())
}

fn run_train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::from_text(&read_config(config)?)?;
    let outcome = train::<Scalar>(&cfg, out, resume)?;
    println!("trained {} iterations, final total loss {}", outcome.iterations_done, outcome.final_loss);
    println!("checkpoint: {}", outcome.ckpt_path.display());
    println!("metrics:    {}", outcome.metrics_path.display());
    Ok(())
}

fn run_eval(ckpt: &Path, fold_id: usize, episodes: usize, seed: u64) -> Result<()> {
    let (cfg, ps, done) = load_checkpoint::<Scalar>(ckpt)?;
    let fold = FoldSplit::for_fold(fold_id, &cfg.data)?;
    let report = evaluate(&cfg, &ps, &fold, episodes, seed)?;
    println!("checkpoint after {done} iterations, fold {fold_id}, {episodes} episodes, seed {seed}");
    println!("mean dice {}  mean boundary-f1 {}", report.mean_dice, report.mean_boundary_f1);
    for (class, d, b, n) in &report.per_class {
        println!("class {class}: dice {d}  boundary-f1 {b}  ({n} episodes)");
    }
    let [seg, align, bound, intra, inter, ssp, total] = report.mean_loss_terms;
    println!("mean losses: seg {seg} align {align} bound {bound} intra {intra} inter {inter} ssp {ssp} total {total}");
    println!("wall time {:.2}s", report.wall_seconds);
    Ok(())
}

fn run_export(ckpt: &Path, episode: &Path, out: &Path) -> Result<()> {
    let (cfg, ps, _) = load_checkpoint::<Scalar>(ckpt)?;
    let ep = load_episode::<Scalar>(episode)?;
    export_prototypes(&cfg, &ps, &ep, out)?;
    println!("wrote prototype banks for class {} to {}", ep.class_id, out.display());
    Ok(())
}
