use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use featurist::evaluator::{read_report, render_summary};
use featurist::llm::LlmMode;
use featurist::memory::{load_summaries, rank_relevant, store_summary};
use featurist::pipeline::{summary_from_report, DiscoverOutcome, Pipeline, RunConfig};
use featurist::synthetic::{self, SyntheticConfig};
use featurist::Error;

#[derive(Parser)]
#[command(name = "featurist", version, about = "Discover interpretable text features that explain a score")]
struct Cli {
    /// Log filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every pipeline stage, resuming from completed stage markers.
    Discover(RunArgs),
    /// Annotate the corpus with the finalized tools in a directory.
    Annotate {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of tool files. Defaults to `<run dir>/tools`.
        #[arg(long)]
        tools: Option<PathBuf>,
        /// Output directory for matrix.tsv. Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit and score an arbitrary feature subset of an annotated run.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated feature ids.
        #[arg(long, value_delimiter = ',')]
        features: Vec<String>,
        /// Report directory. Defaults to `<run dir>/report-custom`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary of a finished run.
    Report {
        /// Run directory or report directory.
        dir: PathBuf,
        /// Print the full JSON report instead of the summary.
        #[arg(long)]
        json: bool,
    },
    /// Inspect or extend the cross-task memory store.
    Memory {
        #[command(subcommand)]
        command: MemoryCommand,
    },
    /// Write a synthetic corpus with planted features and a matching config.
    Synth {
        /// Output directory.
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        records: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1.5)]
        noise_sd: f64,
    },
}

#[derive(Subcommand)]
enum MemoryCommand {
    /// List stored task summaries, most relevant first when a scene is given.
    List {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        scene: Option<String>,
    },
    /// Append the summary of a finished run to the store.
    AddSummary {
        #[arg(long)]
        store: PathBuf,
        /// Run directory or report directory.
        report: PathBuf,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, value_parser = ["live", "record", "replay", "mock"])]
    llm_mode: Option<String>,
    /// Replay cache file.
    #[arg(long)]
    llm_cache: Option<PathBuf>,
    #[arg(long)]
    memory_store: Option<PathBuf>,
    #[arg(long)]
    use_cross_task_memory: bool,
    /// Finalize tools after a single execution check.
    #[arg(long)]
    no_refine: bool,
    /// Skip role-based ideation.
    #[arg(long)]
    no_ideation: bool,
    /// Skip contrastive hypothesis generation.
    #[arg(long)]
    no_contrastive: bool,
    /// Run the beam search without reflection rounds.
    #[arg(long)]
    no_reflection: bool,
    /// Only build PROMPT tools.
    #[arg(long)]
    no_code_tools: bool,
    /// Disable data-parallel execution.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Maximum number of selected features.
    #[arg(long)]
    max_features: Option<usize>,
    #[arg(long)]
    reflection_rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> featurist::Result<RunConfig> {
        let mut c = RunConfig::load(&self.config).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            e => e,
        })?;
        if let Some(d) = &self.run_dir {
            c.run.dir = d.clone();
        }
        if let Some(m) = &self.llm_mode {
            c.llm.mode = m.parse::<LlmMode>()?;
        }
        if let Some(p) = &self.llm_cache {
            c.llm.cache = Some(p.clone());
        }
        if let Some(p) = &self.memory_store {
            c.memory.store = Some(p.clone());
        }
        if self.use_cross_task_memory {
            c.memory.use_cross_task = true;
        }
        if self.no_refine {
            c.tools.toolsmith.refine = false;
        }
        if self.no_ideation {
            c.generation.ideation = false;
        }
        if self.no_contrastive {
            c.generation.contrastive = false;
        }
        if self.no_reflection {
            c.search.reflection_rounds = 0;
        }
        if self.no_code_tools {
            c.tools.toolsmith.code_tools = false;
        }
        if self.sequential {
            c.run.parallel = false;
        }
        if let Some(v) = self.beam_width {
            c.search.beam_width = v;
        }
        if let Some(v) = self.max_features {
            c.search.k = v;
        }
        if let Some(v) = self.reflection_rounds {
            c.search.reflection_rounds = v;
        }
        if let Some(v) = self.seed {
            c.run.seed = v;
            c.search.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_replay_miss() => 3,
        Some(Error::Config(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn report_dir(dir: &Path) -> PathBuf {
    if dir.join("report.json").exists() {
        dir.to_path_buf()
    } else {
        dir.join("report")
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Discover(args) => {
            let pipeline = Pipeline::new(args.resolve()?)?;
            let dir = pipeline.dir().to_path_buf();
            let outcome = pipeline.discover()?;
            if let DiscoverOutcome::AlreadyComplete(_) = outcome {
                println!("already complete: {}", dir.display());
            }
            print!("{}", render_summary(outcome.report()));
            println!("run directory: {}", dir.display());
        }
        Command::Annotate { run, tools, out } => {
            let pipeline = Pipeline::new(run.resolve()?)?;
            let tools = tools.unwrap_or_else(|| pipeline.dir().join("tools"));
            let out = out.unwrap_or_else(|| pipeline.dir().to_path_buf());
            let (matrix, _) = pipeline.annotate_only(&tools, &out)?;
            println!(
                "{} active columns of {} written to {}",
                matrix.active_ids().len(),
                matrix.columns.len(),
                out.join("matrix.tsv").display()
            );
        }
        Command::Evaluate { run, features, out } => {
            if features.is_empty() {
                return Err(Error::Config("--features needs at least one feature id".into()).into());
            }
            let pipeline = Pipeline::new(run.resolve()?)?;
            let out = out.unwrap_or_else(|| pipeline.dir().join("report-custom"));
            let report = pipeline.evaluate_subset(&features, &out)?;
            print!("{}", render_summary(&report));
        }
        Command::Report { dir, json } => {
            let d = report_dir(&dir);
            if json {
                let path = d.join("report.json");
                print!("{}", std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?);
            } else {
                print!("{}", render_summary(&read_report(&d)?));
            }
        }
        Command::Memory { command } => match command {
            MemoryCommand::List { store, scene } => {
                let summaries = load_summaries(&store)?;
                if summaries.is_empty() {
                    println!("no summaries in {}", store.display());
                }
                let ranked = match &scene {
                    Some(s) => rank_relevant(summaries, s, usize::MAX),
                    None => summaries.into_iter().map(|s| (s, f64::NAN)).collect(),
                };
                for (s, rel) in ranked {
                    let names: Vec<&str> = s.final_features.iter().map(|f| f.name.as_str()).collect();
                    let rel = if rel.is_nan() { String::new() } else { format!(" relevance={rel:.3}") };
                    println!("{} joint_mi={:.4}{rel} :: {} :: {}", s.run_id, s.joint_mi, s.scene_description, names.join("; "));
                }
            }
            MemoryCommand::AddSummary { store, report } => {
                let r = read_report(&report_dir(&report))?;
                store_summary(&store, &summary_from_report(&r))?;
                println!("stored summary of run {} in {}", r.metadata.run_id, store.display());
            }
        },
        Command::Synth { out, records, seed, noise_sd } => {
            if records < 10 {
                bail!(Error::Config("--records must be at least 10".into()));
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let recs = synthetic::generate(&SyntheticConfig { n_records: records, noise_sd, seed });
            std::fs::write(out.join("corpus.jsonl"), synthetic::to_jsonl(&recs))?;
            let mut cfg = RunConfig::default();
            cfg.corpus.path = "corpus.jsonl".into();
            cfg.corpus.scene = Some(synthetic::SCENE.into());
            cfg.run.dir = "run".into();
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!("wrote {} records and config.toml to {}", recs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
