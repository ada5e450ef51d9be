use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cassforge_cli::eval::{cmd_eval, EvalArgs};
use cassforge_cli::pools::cmd_toy_pools;
use cassforge_cli::separate::{cmd_separate, SeparateArgs};
use cassforge_cli::synth::{cmd_synth, SynthArgs};
use cassforge_cli::trainer::{cmd_train, Phase, TrainArgs, TrainConfig};
use cassforge_core::mixer::MixRecipe;

/// Three-stem cinematic source separation: synthesize mastered training
/// data, train the flow-matching separator, separate mixtures, and
/// evaluate.
#[derive(Parser)]
#[command(name = "cassforge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a self-contained parametric toy clip corpus.
    ToyPools {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        clips: usize,
        #[arg(long, default_value_t = 6.0)]
        clip_seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthesize a dataset of mastered samples.
    Synth {
        /// pools.json manifest.
        #[arg(long)]
        pools: PathBuf,
        /// Recipe JSON (defaults apply for missing fields; omit for all
        /// defaults).
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the separator (warm-up, then full).
    Train {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// warmup or full.
        #[arg(long)]
        phase: String,
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint to continue from (required for the full phase).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Allow a cold-started full phase (no warm-up checkpoint).
        #[arg(long, default_value_t = false)]
        allow_cold: bool,
        /// Ablation: run the full phase without conditioning.
        #[arg(long, default_value_t = false)]
        audio_only: bool,
        #[command(flatten)]
        geometry: GeometryArgs,
    },
    /// Separate a mixture WAV into three stems.
    Separate {
        #[arg(long)]
        mix: PathBuf,
        #[arg(long)]
        facial: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Euler sampling steps; a comma list sweeps several counts.
        #[arg(long, default_value = "128", value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Reference stems for sweep metrics.
        #[arg(long)]
        r#ref: Option<PathBuf>,
    },
    /// Evaluate estimated stems.
    Eval {
        /// Directory with estimated {dx,fx,mx}.wav.
        #[arg(long)]
        est: PathBuf,
        /// Directory with reference {dx,fx,mx,mix}.wav.
        #[arg(long)]
        r#ref: Option<PathBuf>,
        /// Directory with external {dx,fx,mx}.act activations.
        #[arg(long)]
        acts: Option<PathBuf>,
        #[arg(long)]
        emb_est: Option<PathBuf>,
        #[arg(long)]
        emb_ref: Option<PathBuf>,
        #[arg(long)]
        kl_est: Option<PathBuf>,
        #[arg(long)]
        kl_ref: Option<PathBuf>,
        /// class_name,main_class CSV for external activations.
        #[arg(long)]
        grouping: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
}

/// Model geometry / optimization flags shared by training runs. Defaults
/// are production scale; `--toy` switches to the small test geometry.
#[derive(Args)]
struct GeometryArgs {
    /// Use the small toy geometry as the baseline for other flags.
    #[arg(long, default_value_t = false)]
    toy: bool,
    #[arg(long)]
    fft_size: Option<usize>,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    hop_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    time_embed_dim: Option<usize>,
    #[arg(long)]
    attn_dim: Option<usize>,
    #[arg(long)]
    cond_dim: Option<usize>,
    #[arg(long)]
    fusion_shared_dim: Option<usize>,
    #[arg(long)]
    crop_seconds: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

impl GeometryArgs {
    fn into_config(self, steps: u64, seed: u64) -> TrainConfig {
        let mut cfg = if self.toy {
            TrainConfig::toy()
        } else {
            TrainConfig::default()
        };
        if let Some(v) = self.fft_size {
            cfg.stft.fft_size = v;
        }
        if let Some(v) = self.window_size {
            cfg.stft.window_size = v;
        }
        if let Some(v) = self.hop_size {
            cfg.stft.hop_size = v;
        }
        if let Some(v) = self.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = self.time_embed_dim {
            cfg.time_embed_dim = v;
        }
        if let Some(v) = self.attn_dim {
            cfg.attn_dim = v;
        }
        if let Some(v) = self.cond_dim {
            cfg.cond_dim = v;
        }
        if let Some(v) = self.fusion_shared_dim {
            cfg.fusion_shared_dim = v;
        }
        if let Some(v) = self.crop_seconds {
            cfg.crop_seconds = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        cfg.steps = steps;
        cfg.seed = seed;
        cfg
    }
}

fn run() -> cassforge_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::ToyPools {
            out,
            clips,
            clip_seconds,
            seed,
        } => {
            let manifest = cmd_toy_pools(&out, clips, clip_seconds, seed)?;
            println!("wrote toy pools: {}", manifest.display());
        }
        Command::Synth {
            pools,
            recipe,
            out,
            count,
            seed,
        } => {
            let recipe = match recipe {
                Some(path) => MixRecipe::from_json_file(path)?,
                None => MixRecipe::default(),
            };
            let summary = cmd_synth(&SynthArgs {
                pools_path: pools,
                recipe,
                out_dir: out,
                count,
                seed,
            })?;
            println!(
                "synthesized {} samples: loudness {:.2} LKFS (mean), true peak max {:.2} dBTP",
                summary.count,
                summary.mixture_loudness_lkfs.mean,
                summary.mixture_true_peak_dbtp.max
            );
        }
        Command::Train {
            dataset,
            out,
            phase,
            steps,
            seed,
            checkpoint,
            allow_cold,
            audio_only,
            geometry,
        } => {
            let phase: Phase = phase.parse()?;
            let config = geometry.into_config(steps, seed);
            let outcome = cmd_train(&TrainArgs {
                dataset_dir: dataset,
                out_dir: out,
                phase,
                config,
                checkpoint,
                allow_cold,
                audio_only,
            })?;
            let last = outcome.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                outcome.records.len(),
                last,
                outcome.checkpoint_path.display()
            );
        }
        Command::Separate {
            mix,
            facial,
            scene,
            checkpoint,
            steps,
            seed,
            out,
            r#ref,
        } => {
            let outcome = cmd_separate(&SeparateArgs {
                mix_path: mix,
                facial_path: facial,
                scene_path: scene,
                checkpoint,
                steps,
                seed,
                out_dir: out,
                ref_dir: r#ref,
            })?;
            for (row, dir) in outcome.rows.iter().zip(&outcome.step_dirs) {
                match row.si_sdri_mean {
                    Some(m) => println!(
                        "steps {:>4}: mean SI-SDRi {m:.3} dB -> {}",
                        row.steps,
                        dir.display()
                    ),
                    None => println!("steps {:>4}: -> {}", row.steps, dir.display()),
                }
            }
        }
        Command::Eval {
            est,
            r#ref,
            acts,
            emb_est,
            emb_ref,
            kl_est,
            kl_ref,
            grouping,
            report,
        } => {
            let result = cmd_eval(&EvalArgs {
                est_dir: est,
                ref_dir: r#ref,
                acts_dir: acts,
                emb_est,
                emb_ref,
                kl_est,
                kl_ref,
                grouping_csv: grouping,
                report_path: report.clone(),
            })?;
            print!("{}", result.render_table());
            println!("report: {}", report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
