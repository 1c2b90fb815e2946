use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use regcap_cli::config::{parse_assignment, read_config_file, Resolved, RunConfig};
use regcap_cli::exit_code;
use regcap_cli::pipeline::{self, Arm};
use regcap_core::data::synth::write_corpus;
use regcap_core::Result;

/// Regional-attention image captioning: train, evaluate, caption, export
/// attention heatmaps and run ablations.
#[derive(Parser, Debug)]
#[command(name = "regcap", version)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set decode.beam_size=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Train with this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Evaluation split.
    #[arg(long, global = true)]
    split: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic shapes corpus (images, manifest, vocabulary) to --out.
    Synth,
    /// Train one model per seed.
    Train,
    /// Decode a split and compute the metric suite.
    Eval {
        /// Checkpoint to evaluate; repeatable. Defaults to <out>/seed*/best.ckpt.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Score an existing {id, hypothesis, reference, modality} JSONL file instead.
        #[arg(long, conflicts_with = "checkpoint")]
        hypotheses: Option<PathBuf>,
    },
    /// Caption one PGM/PPM image.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Render an alpha export as a heatmap.
    Heatmap {
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// PGM to write.
        #[arg(long)]
        output: PathBuf,
        /// Optional PPM overlay blended with the input image.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Row of the export to render.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train and compare arms `mode[:K]` on identical data and seeds.
    Ablate {
        #[arg(long = "arm", required = true)]
        arms: Vec<String>,
    },
    /// Print the resolved configuration.
    Config,
}

fn resolve(g: &Global) -> Result<Resolved> {
    let mut assignments = match &g.config {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    for s in &g.set {
        assignments.push(parse_assignment(s)?);
    }
    if let Some(out) = &g.out {
        assignments.push(("out".into(), out.display().to_string()));
    }
    if let Some(seed) = g.seed {
        assignments.push(("train.seeds".into(), format!("[{seed}]")));
    }
    if let Some(split) = &g.split {
        assignments.push(("eval.split".into(), split.clone()));
    }
    RunConfig::resolve(&assignments)
}

fn run(cli: Cli) -> Result<()> {
    let mut res = resolve(&cli.global)?;
    match cli.command {
        Command::Synth => {
            let cfg = &res.config;
            let paths = write_corpus(&cfg.out, &cfg.synth)?;
            println!("manifest {}", paths.manifest.display());
            println!("vocab    {}", paths.vocab.display());
        }
        Command::Train => {
            let runs = pipeline::run_train(&mut res)?;
            for r in &runs.records {
                println!(
                    "seed {}: best epoch {} val loss {:.5}{}",
                    r.seed,
                    r.best_epoch,
                    r.best_val_loss,
                    if r.stopped_early { " (stopped early)" } else { "" }
                );
            }
            let a = &runs.best_val_loss;
            match a.ci_half_width {
                Some(h) => println!("best val loss {:.5} ± {:.5} (95% CI, n={})", a.mean, h, a.n),
                None => println!("best val loss {:.5} (n={})", a.mean, a.n),
            }
        }
        Command::Eval { checkpoint, hypotheses } => {
            let report = match hypotheses {
                Some(p) => pipeline::score_file(&res, &p)?,
                None => pipeline::run_eval(&mut res, &checkpoint)?,
            };
            print!("{}", report.to_table());
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Caption { checkpoint, image } => {
            let out = pipeline::run_caption(&mut res, &checkpoint, &image)?;
            println!("{}", out.caption);
        }
        Command::Heatmap {
            alpha,
            image,
            output,
            overlay,
            index,
        } => pipeline::export_heatmap(&alpha, &image, &output, overlay.as_deref(), index)?,
        Command::Ablate { arms } => {
            let k = res.config.model.regional.tokens;
            let arms = arms.iter().map(|a| Arm::parse(a, k)).collect::<Result<Vec<_>>>()?;
            let report = pipeline::run_ablation(&mut res, &arms)?;
            print!("{}", report.to_table());
        }
        Command::Config => print!("{}", res.config.to_assignments()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
