//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{self, RunDir, TrainStart};
use crate::report::{grid, write_reports};

#[derive(Debug, Parser)]
#[command(name = "orthodiff", version, about = "Subject-driven toy diffusion with orthogonal feature decoupling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus into <out>/corpus.
    GenCorpus(Common),
    /// Pretrain, then run the main training phase.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from a pretrained checkpoint instead of pretraining.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue a trained checkpoint up to `train.steps` total steps.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images of held-out subjects.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a trained checkpoint and write metrics.json / metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score the four expert ablations from one shared pretraining.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reuse a pretrained checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Corpus directory (default <out>/corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_parser = ["sequential", "joint"])]
    pub mode: Option<String>,
    #[arg(long, value_parser = ["none", "bg", "pose", "both"])]
    pub ablate: Option<String>,
    /// Main training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Any config key, as section.field=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    fn flags(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(m) = &self.mode {
            out.push(("train.mode".into(), format!("{m:?}")));
        }
        if let Some(a) = &self.ablate {
            out.push(("train.ablation".into(), format!("{a:?}")));
        }
        if let Some(n) = self.steps {
            out.push(("train.steps".into(), n.to_string()));
        }
        Ok(out)
    }

    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.flags()?)
    }

    fn corpus_dir(&self, run: &RunDir) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| run.corpus())
    }
}

fn prepare(common: &Common, command: &str) -> Result<(RunConfig, RunDir)> {
    let config = common.resolve()?;
    let run = RunDir::new(&common.out);
    run.create()?;
    pipeline::write_provenance(&run.root, command, &config)?;
    Ok((config, run))
}

fn checkpoint_or_default(p: &Option<PathBuf>, run: &RunDir) -> PathBuf {
    p.clone().unwrap_or_else(|| run.checkpoint())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(c) => {
            let (config, run) = prepare(&c, "gen-corpus")?;
            let dir = c.corpus.clone().unwrap_or_else(|| run.corpus());
            let m = crate::store::write_corpus(&dir, &config.corpus_config(), config.seed)?;
            println!("corpus: {} samples in {}", m.entries.len(), dir.display());
        }
        Command::Train { common, init, resume } => {
            let (config, run) = prepare(&common, "train")?;
            let corpus = pipeline::open_corpus(&common.corpus_dir(&run))?;
            let start = match (init, resume) {
                (Some(p), _) => TrainStart::Init(p),
                (_, Some(p)) => TrainStart::Resume(p),
                _ => TrainStart::Scratch,
            };
            let s = pipeline::train(&config, &run, &corpus, &start)?;
            println!("trained {} steps; checkpoint {}", s.steps, s.checkpoint.display());
        }
        Command::Sample { common, checkpoint } => {
            let (config, run) = prepare(&common, "sample")?;
            let corpus = pipeline::open_corpus(&common.corpus_dir(&run))?;
            let written = pipeline::sample(&config, &checkpoint_or_default(&checkpoint, &run), &corpus, &run)?;
            println!("wrote {} samples to {}", written.len(), run.samples().display());
        }
        Command::Eval { common, checkpoint } => {
            let (config, run) = prepare(&common, "eval")?;
            let corpus = pipeline::open_corpus(&common.corpus_dir(&run))?;
            let report = pipeline::eval(&config, &checkpoint_or_default(&checkpoint, &run), &corpus)?;
            write_reports(&run.root, "metrics", std::slice::from_ref(&report))?;
            print!("{}", grid(std::slice::from_ref(&report)));
        }
        Command::Ablate { common, init } => {
            let (config, run) = prepare(&common, "ablate")?;
            let corpus = pipeline::open_corpus(&common.corpus_dir(&run))?;
            let reports = pipeline::ablate(&config, &run, &corpus, init.as_deref())?;
            print!("{}", grid(&reports));
        }
    }
    Ok(())
}

/// One-line error, `error[<category>]: <message>`.
pub fn render_error(e: &Error) -> String {
    format!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "))
}

/// Parse `argv`, run the command, and return the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                print!("{e}");
            } else {
                eprintln!("error[usage]: {}", e.to_string().lines().next().unwrap_or_default());
            }
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", render_error(&e));
            e.exit_code()
        }
    }
}

