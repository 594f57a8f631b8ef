use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use mcwes_core::config::RunConfig;
use mcwes_core::dataio::{load_corpus_dir, read_manifest, synth_corpus, write_corpus, SynthSpec};
use mcwes_core::metrics::{evaluate, K_EVAL};
use mcwes_core::spotting::{read_proposals, write_proposals};
use mcwes_core::train::{self, load_checkpoint, save_checkpoint, spot_corpus, write_report, write_trace};

#[derive(Parser)]
#[command(name = "mcwes", version, about = "Weakly-supervised micro/macro-expression spotting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (manifest plus feature files).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        videos: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long)]
        g: Option<usize>,
        #[arg(long)]
        effect: Option<f64>,
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Train on a corpus directory and write a checkpoint and loss trace.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Produce proposals for every video of a corpus.
    Spot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Supplies pooling and spotting settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score proposals against a manifest's ground truth.
    Eval {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = K_EVAL)]
        k_eval: f64,
        /// Report JSON destination; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-subject-out training and evaluation.
    Loso {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> mcwes_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::from_env(),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            videos,
            seed,
            d,
            fps,
            g,
            effect,
            subjects,
        } => {
            let defaults = SynthSpec::default();
            let spec = SynthSpec {
                d: d.unwrap_or(defaults.d),
                fps: fps.unwrap_or(defaults.fps),
                g: g.unwrap_or(defaults.g),
                effect_size: effect.unwrap_or(defaults.effect_size),
                subjects: subjects.unwrap_or(defaults.subjects),
                ..defaults
            };
            let corpus = synth_corpus(videos, seed, &spec)?;
            write_corpus(&corpus, &out)?;
            info!("wrote {videos} videos to {}", out.display());
        }
        Command::Train {
            data,
            config,
            out,
            trace,
        } => {
            let config = load_config(config.as_deref())?;
            let corpus = load_corpus_dir(&data)?;
            let outcome = train::train(&corpus, &config)?;
            save_checkpoint(&out, &outcome.params)?;
            write_trace(&trace, &outcome.trace)?;
        }
        Command::Spot {
            ckpt,
            data,
            out,
            config,
        } => {
            let config = load_config(config.as_deref())?;
            config.validate()?;
            let corpus = load_corpus_dir(&data)?;
            let proposals = if corpus.is_empty() {
                Vec::new()
            } else {
                let params = load_checkpoint(&ckpt, &config.model)?;
                spot_corpus(&params, &corpus, &config.pooling, &config.spot)?
            };
            write_proposals(&out, &proposals)?;
            info!("{} proposals written to {}", proposals.len(), out.display());
        }
        Command::Eval {
            proposals,
            manifest,
            k_eval,
            out,
        } => {
            let props = read_proposals(&proposals)?;
            let records = read_manifest(&manifest)?;
            let report = evaluate(&props, &records, k_eval)?;
            print!("{}", report.table());
            if let Some(out) = out {
                write_report(&out, &report)?;
            }
        }
        Command::Loso { data, config, out } => {
            let config = load_config(config.as_deref())?;
            let corpus = load_corpus_dir(&data)?;
            let outcome = train::loso(&corpus, &config)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for fold in &outcome.folds {
                let stem = format!("fold-{}", fold.subject);
                save_checkpoint(&out.join(format!("{stem}.ckpt")), &fold.params)?;
                write_trace(&out.join(format!("{stem}.trace.csv")), &fold.trace)?;
                write_report(&out.join(format!("{stem}.report.json")), &fold.report)?;
            }
            write_proposals(&out.join("proposals.json"), &outcome.proposals)?;
            write_report(&out.join("report.json"), &outcome.report)?;
            print!("{}", outcome.report.table());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mcwes_core::Error>() {
        Some(e) if e.is_config() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
