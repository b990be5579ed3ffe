use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cotforge::builder::build_full;
use cotforge::gateway::mock::SimulatedModel;
use cotforge::gateway::TransportMode;
use cotforge::model::{load_dataset, save_dataset};
use cotforge::pipeline::{
    evaluate_files, gateway_for, MetricSet, Pipeline, PipelineConfig, PipelineError, Stage, StageRun, SynthPart,
};

#[derive(Parser)]
#[command(name = "cotforge", version, about = "Teacher, assistant and student reasoning distillation")]
struct Cli {
    /// Log errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// mock, replay or live.
    #[arg(long)]
    transport: Option<TransportMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base URL of the endpoint this command talks to.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name at that endpoint.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    quarantine_path: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Teacher reasoning synthesis (stage 1, stage 2 or both).
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Single JSON Lines corpus holding all three splits.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "both")]
        stage: SynthPart,
    },
    /// Assistant reasoning over the training split.
    Augment {
        #[command(flatten)]
        common: Common,
    },
    /// Merge a teacher_full and an assistant_aug dataset into a full dataset.
    Build {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        assistant: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the assistant model on teacher reasoning.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train the student against the frozen assistant.
    Distill {
        #[command(flatten)]
        common: Common,
    },
    /// Train the ablation students.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Score a predictions file against gold records.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "cls,gen")]
        metrics: MetricSet,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config whose embedding endpoint provides Sim.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Evaluate all trained models and write the report.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run several stages in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stage names or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
}

#[derive(Clone, Copy)]
enum Target {
    Teacher,
    Assistant,
}

fn load_config(c: &Common, target: Target) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = c.transport {
        cfg.transport = t;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.cache_dir {
        cfg.cache_dir = Some(d.clone());
    }
    if let Some(q) = &c.quarantine_path {
        cfg.quarantine_path = Some(q.clone());
    }
    let endpoint = match target {
        Target::Teacher => &mut cfg.teacher,
        Target::Assistant => &mut cfg.assistant,
    };
    if let Some(e) = &c.endpoint {
        endpoint.base_url = e.clone();
    }
    if let Some(m) = &c.model {
        endpoint.model_name = m.clone();
    }
    Ok(cfg)
}

fn print_runs(runs: &[StageRun]) {
    for r in runs {
        for d in &r.dirs {
            println!("{}\t{}\t{}", r.stage, if r.reused { "reused" } else { "done" }, d.display());
        }
    }
}

fn run_stages(common: &Common, target: Target, stages: &[Stage]) -> Result<(), PipelineError> {
    let p = Pipeline::new(load_config(common, target)?)?;
    let runs = p.run(stages)?;
    print_runs(&runs);
    if stages.contains(&Stage::Report) {
        print_report(&p)?;
    }
    Ok(())
}

fn print_report(p: &Pipeline) -> Result<(), PipelineError> {
    let path = p.report_dir().join("report.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
    print!("{text}");
    Ok(())
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Synthesize { common, corpus, stage } => {
            let mut cfg = load_config(&common, Target::Teacher)?;
            if let Some(c) = corpus {
                cfg.corpus.train = c.clone();
                cfg.corpus.dev = c.clone();
                cfg.corpus.test = c;
            }
            let dir = Pipeline::new(cfg)?.synthesize(stage)?;
            println!("synthesize\tdone\t{}", dir.display());
            Ok(())
        }
        Command::Augment { common } => run_stages(&common, Target::Assistant, &[Stage::Augment]),
        Command::Build { teacher, assistant, out } => {
            let full = build_full(&load_dataset(&teacher)?, &load_dataset(&assistant)?)?;
            save_dataset(&full, &out)?;
            println!("build\tdone\t{} ({} entries)", out.display(), full.len());
            Ok(())
        }
        Command::Train { common } => run_stages(&common, Target::Teacher, &[Stage::Train]),
        Command::Distill { common } => run_stages(&common, Target::Teacher, &[Stage::Distill]),
        Command::Ablate { common } => run_stages(&common, Target::Teacher, &[Stage::Ablate]),
        Command::Evaluate { pred, gold, metrics, out, config, name } => {
            let embedder = match config {
                Some(path) => {
                    let cfg = PipelineConfig::load(&path)?;
                    match &cfg.embedding {
                        Some(e) => Some(gateway_for(&cfg, e, SimulatedModel::teacher())?),
                        None => None,
                    }
                }
                None => None,
            };
            let report = evaluate_files(&name, &pred, &gold, metrics, embedder.as_ref())?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(path) => std::fs::write(&path, text + "\n").map_err(|e| PipelineError::io(&path, e))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Report { common } => {
            let p = Pipeline::new(load_config(&common, Target::Teacher)?)?;
            if !p.has_outputs() {
                return Err(PipelineError::NothingToReport(p.config().output_dir.clone()));
            }
            print_runs(&p.run(&[Stage::Evaluate, Stage::Report])?);
            print_report(&p)
        }
        Command::Run { common, stages } => {
            let stages = Stage::parse_list(&stages).map_err(PipelineError::Config)?;
            run_stages(&common, Target::Teacher, &stages)
        }
    }
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => 2,
        PipelineError::Dependency { .. } => 3,
        PipelineError::NothingToReport(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
