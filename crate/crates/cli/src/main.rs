use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use prefforge::filter::FilterScope;
use prefforge::fixtures::{write_demo_inputs, DEMO_CONCEPTS, DEMO_DISTRACTORS, DEMO_KIN_MANIFEST, DEMO_VQA};
use prefforge::pipeline::{self, PipelineError, RunConfig, EMBED_URL_ENV};
use prefforge::train::Objective;
use prefforge::types::Level;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "prefforge", version, about = "Multi-image preference data forge")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run config. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "out", global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    L1,
    L2Kin,
    L2Arith,
    L3,
    All,
}

impl LevelArg {
    fn levels(self) -> Vec<Level> {
        match self {
            LevelArg::L1 => vec![Level::L1],
            LevelArg::L2Kin => vec![Level::L2Kin],
            LevelArg::L2Arith => vec![Level::L2Arith],
            LevelArg::L3 => vec![Level::L3],
            LevelArg::All => Level::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Dpo,
    Sft,
}

#[derive(Subcommand)]
enum Command {
    /// Generate preference pairs for one level (or all).
    Gen {
        #[arg(long, value_enum)]
        level: LevelArg,
        #[arg(long)]
        count: Option<usize>,
        /// Caption provider for L3: mock or http.
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        vqa: Option<PathBuf>,
        #[arg(long)]
        distractors: Option<PathBuf>,
        #[arg(long)]
        kin_manifest: Option<PathBuf>,
        #[arg(long)]
        concept_index: Option<PathBuf>,
    },
    /// Drop the most similar quarter of chosen/rejected pairs.
    Filter {
        /// Dataset file. Defaults to `<out>/<level>/data.jsonl` for every
        /// level that has one.
        #[arg(long)]
        input: Option<PathBuf>,
        /// `mock` or the embedding sidecar URL.
        #[arg(long, env = EMBED_URL_ENV)]
        embedder: Option<String>,
        /// One threshold for the whole file, or one per batch.
        #[arg(long, value_parser = ["corpus", "per-batch"])]
        scope: Option<String>,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
    },
    /// Train the toy policy under one or more schedules.
    Train {
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        /// Schedule label, e.g. "L2 flat" or "L1→(L2∪L3)". Repeat to compare.
        #[arg(long = "schedule")]
        schedules: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        concept_index: Option<PathBuf>,
    },
    /// Score the answer key and every trained policy on generated probes.
    Eval {
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        concept_index: Option<PathBuf>,
    },
    /// Summarize a dataset file.
    Stats { dataset: PathBuf },
    /// Write a small synthetic input corpus.
    DemoInputs { dir: PathBuf },
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn load_config(g: &Global) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out_dir {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Gen {
            level,
            count,
            provider,
            vqa,
            distractors,
            kin_manifest,
            concept_index,
        } => {
            let levels = level.levels();
            if let Some(n) = count {
                for &l in &levels {
                    cfg.counts.set(l, n);
                }
            }
            set(&mut cfg.l3.caption_provider, provider);
            cfg.inputs.vqa = vqa.or(cfg.inputs.vqa);
            cfg.inputs.distractors = distractors.or(cfg.inputs.distractors);
            cfg.inputs.kin_manifest = kin_manifest.or(cfg.inputs.kin_manifest);
            cfg.inputs.concept_index = concept_index.or(cfg.inputs.concept_index);
            for l in levels {
                print_json(&pipeline::cmd_gen(&cfg, l)?);
            }
        }
        Command::Filter {
            input,
            embedder,
            scope,
            batch_size,
        } => {
            set(&mut cfg.filter.embedder, embedder);
            match scope.as_deref() {
                Some("corpus") => cfg.filter.scope = FilterScope::Corpus,
                Some("per-batch") => cfg.filter.scope = FilterScope::PerBatch(batch_size),
                _ => {}
            }
            let inputs: Vec<PathBuf> = match input {
                Some(p) => vec![p],
                None => Level::ALL
                    .iter()
                    .map(|l| cfg.out_dir.join(l.slug()).join("data.jsonl"))
                    .filter(|p| p.is_file())
                    .collect(),
            };
            if inputs.is_empty() {
                return Err(PipelineError::Input(format!("no datasets under {}", cfg.out_dir.display())));
            }
            for p in inputs {
                let mut s = pipeline::cmd_filter(&cfg, &p)?;
                // Per-pair scores live in the report file.
                s.reports.iter_mut().for_each(|r| r.scores.clear());
                print_json(&s);
            }
        }
        Command::Train {
            objective,
            schedules,
            steps,
            step_size,
            beta,
            concept_index,
        } => {
            if let Some(o) = objective {
                cfg.train.objective = match o {
                    ObjectiveArg::Dpo => Objective::Dpo,
                    ObjectiveArg::Sft => Objective::Sft,
                };
            }
            if !schedules.is_empty() {
                cfg.train.schedules = schedules;
            }
            cfg.train.steps = steps.or(cfg.train.steps);
            set(&mut cfg.train.step_size, step_size);
            set(&mut cfg.train.beta, beta);
            cfg.inputs.concept_index = concept_index.or(cfg.inputs.concept_index);
            for run in pipeline::cmd_train(&cfg)? {
                let last = run.reports.last().and_then(|r| r.last());
                println!(
                    "{}\t{}\tsteps={}\tloss={:.6}\tpref_acc={:.4}",
                    run.name,
                    run.label,
                    run.steps,
                    last.map_or(f64::NAN, |e| e.mean_loss),
                    last.map_or(f64::NAN, |e| e.preference_accuracy)
                );
            }
        }
        Command::Eval { probes, concept_index } => {
            set(&mut cfg.eval.probes, probes);
            cfg.inputs.concept_index = concept_index.or(cfg.inputs.concept_index);
            print!("{}", pipeline::cmd_eval(&cfg)?.markdown());
        }
        Command::Stats { dataset } => print_json(&pipeline::cmd_stats(&dataset)?),
        Command::DemoInputs { dir } => {
            write_demo_inputs(&dir, cfg.seed).map_err(|e| PipelineError::Io { path: dir.clone(), source: e })?;
            println!(
                "[inputs]\nvqa = {:?}\ndistractors = {:?}\nkin_manifest = {:?}\nconcept_index = {:?}",
                dir.join(DEMO_VQA),
                dir.join(DEMO_DISTRACTORS),
                dir.join(DEMO_KIN_MANIFEST),
                dir.join(DEMO_CONCEPTS)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
