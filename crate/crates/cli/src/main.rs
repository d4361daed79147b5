use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bgflow_cli::ablate::ablate;
use bgflow_cli::config::{RunConfig, CONFIG_ENV};
use bgflow_cli::corpus::write_toy_corpus;
use bgflow_cli::evaluate::{evaluate, write_report};
use bgflow_cli::simulate::simulate;
use bgflow_cli::synth::{Sampling, SynthesisRequest, Synthesizer};
use bgflow_cli::train::{train_acoustic, train_duration, TrainOptions};
use bgflow_core::flowmatch::{ControlSignal, Solver};
use bgflow_core::signal::mel_write;
use bgflow_core::signal::wav::write_wav;
use bgflow_models::acoustic::{EncoderMode, Strategy};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bgflow", version, about = "Background-controllable flow-matching TTS toolkit")]
struct Cli {
    /// Run config (JSON). Falls back to $BGFLOW_CONFIG, then built-in defaults.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, augmentation pools and a matching config.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Simulate acoustic conditions; writes clean/augmented WAV twins.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    TrainAcoustic {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        encoder_mode: Option<EncoderMode>,
    },
    TrainDuration {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Speak `target_text` in the voice (and, for preservation, the
    /// background) of the prompt.
    Synthesize {
        #[arg(long)]
        acoustic: PathBuf,
        #[arg(long)]
        duration: PathBuf,
        #[arg(long)]
        prompt_wav: PathBuf,
        #[arg(long)]
        prompt_text: String,
        /// Comma-separated frames per prompt token; uniform if omitted.
        #[arg(long, value_delimiter = ',')]
        prompt_durations: Option<Vec<u32>>,
        #[arg(long)]
        target_text: String,
        #[arg(long)]
        task: ControlSignal,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        n_steps: Option<usize>,
        #[arg(long)]
        solver: Option<Solver>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generated log-mel.
        #[arg(long)]
        mel_out: Option<PathBuf>,
    },
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        task: ControlSignal,
        /// Comma-separated SNR bucket edges in dB.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        buckets: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated arms (R1..R5, P1..P3); defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        /// Override the training step budget of every arm.
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Loss log path; defaults to `<out>.loss.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    save_every: Option<usize>,
    /// Override the optimizer's step budget.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn options(&self, out: PathBuf) -> TrainOptions {
        TrainOptions {
            out,
            log: self.log.clone(),
            resume: self.resume.clone(),
            save_every: self.save_every,
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load_or_default(cli.config.as_deref())?)
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    match &cli.command {
        Command::ToyCorpus { out, n, seed } => {
            let paths = write_toy_corpus(out, *n, *seed)?;
            Ok(json!({"manifest": paths.manifest, "config": paths.config}))
        }
        Command::Simulate { manifest, out, seed } => {
            let cfg = load_config(&cli)?;
            let path = simulate(&cfg, manifest, out, seed.unwrap_or(cfg.seeds.simulate))?;
            Ok(json!({"manifest": path}))
        }
        Command::TrainAcoustic {
            manifest,
            out,
            common,
            strategy,
            encoder_mode,
        } => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = strategy {
                cfg.acoustic_model.strategy = *s;
            }
            if let Some(m) = encoder_mode {
                cfg.acoustic_model.encoder_mode = *m;
            }
            if let Some(s) = common.steps {
                cfg.acoustic_optimizer.max_steps = Some(s);
                cfg.acoustic_optimizer.epochs = 0;
            }
            if let Some(s) = common.seed {
                cfg.seeds.train = s;
            }
            cfg.validate()?;
            Ok(serde_json::to_value(train_acoustic(&cfg, manifest, &common.options(out.clone()))?)?)
        }
        Command::TrainDuration { manifest, out, common } => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = common.steps {
                cfg.duration_optimizer.max_steps = Some(s);
                cfg.duration_optimizer.epochs = 0;
            }
            if let Some(s) = common.seed {
                cfg.seeds.train = s;
            }
            cfg.validate()?;
            Ok(serde_json::to_value(train_duration(&cfg, manifest, &common.options(out.clone()))?)?)
        }
        Command::Synthesize {
            acoustic,
            duration,
            prompt_wav,
            prompt_text,
            prompt_durations,
            target_text,
            task,
            alpha,
            n_steps,
            solver,
            seed,
            out,
            mel_out,
        } => {
            let cfg = load_config(&cli)?;
            let synth = Synthesizer::load(acoustic, duration)?;
            let s = &cfg.synthesis;
            let req = SynthesisRequest {
                prompt_wav: prompt_wav.clone(),
                prompt_text: prompt_text.clone(),
                prompt_durations: prompt_durations.clone(),
                target_text: target_text.clone(),
                task: *task,
                sampling: Sampling {
                    alpha: alpha.unwrap_or(s.alpha),
                    n_steps: n_steps.unwrap_or(s.n_steps),
                    solver: solver.unwrap_or(s.solver),
                    seed: seed.unwrap_or(cfg.seeds.synthesize),
                },
                vocoder_iters: s.vocoder_iters,
            };
            let res = synth.synthesize(&req)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            write_wav(out, &res.wave)?;
            if let Some(p) = mel_out {
                mel_write(&res.mel, p)?;
            }
            Ok(json!({"wav": out, "mel": mel_out, "frames": res.mel.n_frames(), "durations": res.durations}))
        }
        Command::Evaluate {
            generated,
            reference,
            task,
            buckets,
            out,
        } => {
            let cfg = load_config(&cli)?;
            let edges = buckets.clone().unwrap_or_else(|| cfg.evaluation.bucket_edges.clone());
            let report = evaluate(&cfg, generated, reference, *task, &edges)?;
            write_report(&report, out)?;
            Ok(json!({"out": out, "summary": report.summary_json()}))
        }
        Command::Ablate {
            manifest,
            out,
            arms,
            steps,
        } => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = steps {
                cfg.acoustic_optimizer.max_steps = Some(*s);
                cfg.acoustic_optimizer.epochs = 0;
            }
            let arms = arms.clone().unwrap_or_else(|| cfg.ablation.arms.clone());
            let report = ablate(&cfg, manifest, &arms)?;
            report.write(out)?;
            print!("{}", report.to_text());
            Ok(json!({"out": out, "eval_ids": report.eval_ids}))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e
                .downcast_ref::<bgflow_cli::Error>()
                .map(|e| e.kind())
                .unwrap_or("error");
            let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let err = json!({"error": {"kind": kind, "message": e.to_string(), "causes": chain}});
            eprintln!("{err}");
            let usage = matches!(kind, "usage" | "config");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
