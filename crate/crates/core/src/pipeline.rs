//! End-to-end discovery runs over a resumable run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.copy            resolved configuration (TOML)
//! run.log                INFO/WARN lines from every stage, in order
//! stages/<stage>.done    completion markers holding each stage's token usage
//! pool/                  raw hypotheses, consolidated pool, LLM transcript
//! tools/                 one file per annotation tool plus validation logs
//! matrix.tsv             feature matrix (with matrix.meta.json)
//! search.log             one line per beam seed and expansion
//! memory/                search state, reflection hypotheses, augmented matrix
//! report/                report.json and summary.txt
//! ```

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotator::{read_matrix, write_matrix, AnnotateOptions, Annotator, FeatureColumn, FeatureMatrix};
use crate::dataset::{load_corpus, sample_contrastive, ContrastiveOptions, Corpus, InputFormat, LabeledText, SplitOptions};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, read_report, write_report, EvalInput, EvalReport, RunMetadata};
use crate::exec::Execution;
use crate::hypothesis::{CandidatePool, ContrastiveCounts, FeatureHypothesis, Generator, Trace};
use crate::journal::Journal;
use crate::llm::{Gateway, HttpBackend, LlmBackend, LlmMode, ReplayCache, SlotUsage, UsageReport, DEFAULT_IN_FLIGHT};
use crate::memory::{cross_task_hypotheses, retrieve_relevant, store_summary, SearchState, SummaryFeature, TaskSummary};
use crate::prompts::PromptSet;
use crate::runner::{CodeRunner, SubprocessRunner};
use crate::search::{reflect_and_rehypothesize, run_search, Beam, SearchConfig, SearchHooks};
use crate::synthetic;
use crate::toolsmith::{read_tools, write_tool, Toolsmith, ToolsmithConfig};

pub const STAGES: [&str; 5] = ["generate", "tools", "annotate", "search", "evaluate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// `jsonl` or `csv`; inferred from the extension when absent.
    pub format: Option<String>,
    pub scene: Option<String>,
    pub scene_file: Option<PathBuf>,
    pub train_ratio: f64,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: PathBuf::new(),
            format: None,
            scene: None,
            scene_file: None,
            train_ratio: 0.8,
            split_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub ideation: bool,
    pub contrastive: bool,
    pub role_count: usize,
    pub features_per_role: usize,
    pub positive_count: usize,
    pub negative_count: usize,
    pub contrastive_count: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub quantile: f64,
    pub sample_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            ideation: true,
            contrastive: true,
            role_count: 5,
            features_per_role: 5,
            positive_count: 5,
            negative_count: 5,
            contrastive_count: 5,
            n_high: 10,
            n_low: 10,
            quantile: 0.2,
            sample_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolsConfig {
    #[serde(flatten)]
    pub toolsmith: ToolsmithConfig,
    /// Command line of the code-tool runner. Empty means CODE tools fall
    /// back to PROMPT tools.
    pub runner_command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub missing_cap: f64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            missing_cap: crate::annotator::DEFAULT_MISSING_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub store: Option<PathBuf>,
    pub use_cross_task: bool,
    pub cross_task_count: usize,
    pub top_r: usize,
    /// Append this run's summary to the store after evaluation.
    pub write_summary: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            store: None,
            use_cross_task: false,
            cross_task_count: 5,
            top_r: crate::memory::DEFAULT_TOP_R,
            write_summary: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// OpenAI-compatible chat completions, configured from the environment.
    Http,
    /// Scripted responder for the bundled synthetic corpus.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub mode: LlmMode,
    /// Used in live and record modes; mock mode always uses `synthetic`.
    pub backend: BackendKind,
    /// Replay cache file. Defaults to `<run dir>/llm_cache.jsonl`.
    pub cache: Option<PathBuf>,
    pub in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            mode: LlmMode::Mock,
            backend: BackendKind::Http,
            cache: None,
            in_flight: DEFAULT_IN_FLIGHT,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub dir: PathBuf,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            dir: PathBuf::from("run"),
            seed: 0,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusConfig,
    pub generation: GenerationConfig,
    pub tools: ToolsConfig,
    pub annotation: AnnotationConfig,
    pub search: SearchConfig,
    pub memory: MemoryConfig,
    pub llm: LlmConfig,
    /// Directory of prompt-template overrides.
    pub prompts_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths in a config file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.corpus.path);
        fix(&mut cfg.run.dir);
        if let Some(p) = cfg.corpus.scene_file.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.llm.cache.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.memory.store.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.prompts_dir.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.path.as_os_str().is_empty() {
            return Err(Error::Config("corpus.path is required".into()));
        }
        if self.corpus.scene.is_none() && self.corpus.scene_file.is_none() {
            return Err(Error::Config("corpus.scene or corpus.scene_file is required".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.train_ratio) {
            return Err(Error::Config("corpus.train_ratio must be within [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.annotation.missing_cap) {
            return Err(Error::Config("annotation.missing_cap must be within [0, 1]".into()));
        }
        self.search.validate()
    }

    pub fn cache_path(&self) -> PathBuf {
        self.llm
            .cache
            .clone()
            .unwrap_or_else(|| self.run.dir.join("llm_cache.jsonl"))
    }

    /// Digest of everything that influences results: run location, LLM
    /// transport and memory store path are excluded.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.run.dir = PathBuf::new();
        c.run.parallel = true;
        c.llm = LlmConfig::default();
        c.memory.store = None;
        c.corpus.path = PathBuf::new();
        c.corpus.scene_file = None;
        c.prompts_dir = None;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn scene(&self) -> Result<String> {
        if let Some(s) = &self.corpus.scene {
            return Ok(s.clone());
        }
        let path = self
            .corpus
            .scene_file
            .as_ref()
            .ok_or_else(|| Error::Config("no scene description configured".into()))?;
        Ok(std::fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .trim()
            .to_string())
    }

    pub fn exec(&self) -> Execution {
        if self.run.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Builds the gateway described by `config.llm`.
pub fn build_gateway(config: &RunConfig) -> Result<Gateway> {
    let timeout = Duration::from_secs(config.llm.timeout_secs);
    let backend = |kind: BackendKind| -> Result<Arc<dyn LlmBackend>> {
        Ok(match kind {
            BackendKind::Http => Arc::new(HttpBackend::from_env(timeout)?),
            BackendKind::Synthetic => Arc::new(synthetic::mock_backend()),
        })
    };
    let gw = match config.llm.mode {
        LlmMode::Mock => Gateway::mock(synthetic::mock_backend()),
        LlmMode::Live => Gateway::live(backend(config.llm.backend)?),
        LlmMode::Record => {
            let cache = Arc::new(ReplayCache::open(&config.cache_path())?);
            Gateway::record(backend(config.llm.backend)?, cache)
        }
        LlmMode::Replay => {
            let path = config.cache_path();
            if !path.exists() {
                return Err(Error::Config(format!("replay cache {} does not exist", path.display())));
            }
            Gateway::replay(Arc::new(ReplayCache::open(&path)?))
        }
    };
    Ok(gw.with_in_flight_limit(config.llm.in_flight.max(1)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiscoverOutcome {
    Completed(EvalReport),
    AlreadyComplete(EvalReport),
}

impl DiscoverOutcome {
    pub fn report(&self) -> &EvalReport {
        match self {
            DiscoverOutcome::Completed(r) | DiscoverOutcome::AlreadyComplete(r) => r,
        }
    }
}

fn usage_delta(after: &UsageReport, before: &UsageReport) -> UsageReport {
    let mut out = UsageReport::default();
    for (slot, a) in &after.per_slot {
        let b = before.slot(*slot);
        let d = SlotUsage {
            calls: a.calls - b.calls,
            cached_calls: a.cached_calls - b.cached_calls,
            input_tokens: a.input_tokens - b.input_tokens,
            output_tokens: a.output_tokens - b.output_tokens,
        };
        if d != SlotUsage::default() {
            out.per_slot.insert(*slot, d);
        }
    }
    out
}

fn usage_add(total: &mut UsageReport, part: &UsageReport) {
    for (slot, u) in &part.per_slot {
        let e = total.per_slot.entry(*slot).or_default();
        e.calls += u.calls;
        e.cached_calls += u.cached_calls;
        e.input_tokens += u.input_tokens;
        e.output_tokens += u.output_tokens;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Evenly spaced training records used to validate tools.
pub fn validation_samples(corpus: &Corpus, n: usize) -> Vec<LabeledText> {
    let train = corpus.train_indices();
    if train.is_empty() || n == 0 {
        return Vec::new();
    }
    let n = n.min(train.len());
    (0..n)
        .map(|i| corpus.records[train[i * train.len() / n]].clone())
        .collect()
}

pub struct Pipeline {
    pub config: RunConfig,
    gateway: Gateway,
    prompts: PromptSet,
    runner: Option<Box<dyn CodeRunner>>,
}

struct ReflectionHooks<'p> {
    pipeline: &'p Pipeline,
    corpus: &'p Corpus,
    scene: String,
    pool: CandidatePool,
    added: Vec<FeatureHypothesis>,
    history: Vec<crate::hypothesis::GenerationStep>,
}

impl SearchHooks for ReflectionHooks<'_> {
    fn augment(&mut self, state: &mut SearchState, best: &Beam, round: usize, journal: &mut Journal) -> Result<Vec<FeatureColumn>> {
        let p = self.pipeline;
        let generator = Generator::new(&p.gateway, &p.prompts);
        let known: Vec<(&FeatureHypothesis, f64)> = best
            .features
            .iter()
            .filter_map(|id| {
                let h = self.pool.get(id)?;
                Some((h, state.marginal_mi.get(id).copied().unwrap_or(0.0)))
            })
            .collect();
        let mut trace = Trace::default();
        let fresh = reflect_and_rehypothesize(
            &generator,
            &known,
            &self.scene,
            p.config.search.new_features_per_reflection,
            state,
            &mut trace,
        )?;
        journal.append(trace.journal);
        self.history.extend(trace.history);
        let mut inserted = Vec::new();
        for mut h in fresh {
            h.round = round;
            let id = self.pool.insert(h);
            inserted.push(self.pool.get(&id).expect("just inserted").clone());
        }
        let samples = validation_samples(self.corpus, p.config.tools.toolsmith.validation_samples);
        let toolsmith = p.toolsmith();
        let (tools, tj) = toolsmith.build_all(&inserted, &samples, p.config.exec())?;
        journal.append(tj);
        let tools_dir = p.dir().join("tools");
        for t in &tools {
            write_tool(&tools_dir, t)?;
        }
        let annotator = p.annotator();
        let mut columns = Vec::new();
        for t in tools.iter().filter(|t| t.is_usable()) {
            columns.push(annotator.annotate_tool(t, self.corpus, journal)?);
        }
        self.added.extend(inserted);
        Ok(columns)
    }
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let gateway = build_gateway(&config)?;
        Self::with_gateway(config, gateway)
    }

    pub fn with_gateway(config: RunConfig, gateway: Gateway) -> Result<Self> {
        config.validate()?;
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptSet::with_overrides(dir)?,
            None => PromptSet::default(),
        };
        let runner: Option<Box<dyn CodeRunner>> =
            if config.tools.toolsmith.code_tools && !config.tools.runner_command.is_empty() {
                Some(Box::new(SubprocessRunner::new(config.tools.runner_command.clone())?))
            } else {
                None
            };
        Ok(Pipeline {
            config,
            gateway,
            prompts,
            runner,
        })
    }

    pub fn with_runner(mut self, runner: Box<dyn CodeRunner>) -> Self {
        self.runner = Some(runner);
        self
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn dir(&self) -> &Path {
        &self.config.run.dir
    }

    fn marker(&self, stage: &str) -> PathBuf {
        self.dir().join("stages").join(format!("{stage}.done"))
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.marker(stage).exists()
    }

    fn toolsmith(&self) -> Toolsmith<'_> {
        let ts = Toolsmith::new(&self.gateway, &self.prompts, self.config.tools.toolsmith.clone());
        match &self.runner {
            Some(r) => ts.with_runner(r.as_ref()),
            None => ts,
        }
    }

    fn annotator(&self) -> Annotator<'_> {
        let a = Annotator::new(
            &self.gateway,
            AnnotateOptions {
                missing_cap: self.config.annotation.missing_cap,
                exec: self.config.exec(),
            },
        );
        match &self.runner {
            Some(r) => a.with_runner(r.as_ref()),
            None => a,
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let c = &self.config.corpus;
        let format = match &c.format {
            Some(f) => f.parse::<InputFormat>()?,
            None => InputFormat::from_path(&c.path),
        };
        load_corpus(
            &c.path,
            format,
            &self.config.scene()?,
            SplitOptions {
                train_ratio: c.train_ratio,
                seed: c.split_seed,
            },
        )
    }

    fn append_log(&self, journal: &Journal) -> Result<()> {
        if journal.lines().is_empty() {
            return Ok(());
        }
        let path = self.dir().join("run.log");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(journal.render().as_bytes()).map_err(|e| Error::io(&path, e))
    }

    fn prepare_dir(&self) -> Result<()> {
        let dir = self.dir();
        std::fs::create_dir_all(dir.join("stages")).map_err(|e| Error::io(dir, e))?;
        let copy = dir.join("config.copy");
        let text = self.config.to_toml()?;
        if copy.exists() {
            let existing = std::fs::read_to_string(&copy).map_err(|e| Error::io(&copy, e))?;
            let old = RunConfig::from_toml(&existing)?;
            if old.digest()? != self.config.digest()? {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration; use a new run directory",
                    dir.display()
                )));
            }
        }
        std::fs::write(&copy, text).map_err(|e| Error::io(&copy, e))
    }

    fn run_stage<T>(&self, stage: &str, f: impl FnOnce(&mut Journal) -> Result<T>) -> Result<T> {
        let before = self.gateway.usage_report();
        let mut journal = Journal::new();
        journal.info(format!("stage {stage}: start"));
        let result = f(&mut journal);
        match &result {
            Ok(_) => journal.info(format!("stage {stage}: done")),
            Err(e) => journal.warn(format!("stage {stage}: failed: {e}; artifacts in {}", self.dir().display())),
        }
        self.append_log(&journal)?;
        let value = result.map_err(|e| e.in_stage(stage))?;
        let usage = usage_delta(&self.gateway.usage_report(), &before);
        write_json(&self.marker(stage), &usage)?;
        Ok(value)
    }

    /// Token usage summed over the completed stages' markers.
    pub fn recorded_usage(&self) -> Result<UsageReport> {
        let mut total = UsageReport::default();
        for stage in STAGES {
            let m = self.marker(stage);
            if m.exists() {
                usage_add(&mut total, &read_json(&m)?);
            }
        }
        Ok(total)
    }

    /// Runs every stage not yet marked complete.
    pub fn discover(&self) -> Result<DiscoverOutcome> {
        self.prepare_dir()?;
        if STAGES.iter().all(|s| self.is_done(s)) {
            let report = read_report(&self.dir().join("report"))?;
            return Ok(DiscoverOutcome::AlreadyComplete(report));
        }
        let corpus = self.load_corpus().map_err(|e| e.in_stage("generate"))?;
        if !self.is_done("generate") {
            self.run_stage("generate", |j| self.stage_generate(&corpus, j))?;
        }
        if !self.is_done("tools") {
            self.run_stage("tools", |j| self.stage_tools(&corpus, j))?;
        }
        if !self.is_done("annotate") {
            self.run_stage("annotate", |j| self.stage_annotate(&corpus, &self.dir().join("tools"), self.dir(), j).map(|_| ()))?;
        }
        if !self.is_done("search") {
            self.run_stage("search", |j| self.stage_search(&corpus, j))?;
        }
        let report = self.run_stage("evaluate", |j| self.stage_evaluate(&corpus, j))?;
        // The evaluate marker now exists, so the report can carry the full
        // usage total.
        let mut report = report;
        report.metadata.token_usage = self.recorded_usage()?;
        write_report(&self.dir().join("report"), &report)?;
        self.store_memory(&report)?;
        Ok(DiscoverOutcome::Completed(report))
    }

    fn stage_generate(&self, corpus: &Corpus, journal: &mut Journal) -> Result<()> {
        let g = &self.config.generation;
        let scene = &corpus.scene_description;
        let exec = self.config.exec();
        let generator = Generator::new(&self.gateway, &self.prompts);
        let mut trace = Trace::default();
        let mut raw: Vec<FeatureHypothesis> = Vec::new();
        if g.ideation {
            let roles = generator.generate_roles(scene, g.role_count, &mut trace)?;
            raw.extend(generator.ideate(scene, &roles, g.features_per_role, exec, &mut trace));
        }
        if g.contrastive {
            let (high, low) = sample_contrastive(
                corpus,
                ContrastiveOptions {
                    n_high: g.n_high,
                    n_low: g.n_low,
                    quantile: g.quantile,
                    seed: g.sample_seed,
                },
            )?;
            raw.extend(generator.contrastive_features(
                scene,
                &high,
                &low,
                ContrastiveCounts {
                    positive: g.positive_count,
                    negative: g.negative_count,
                    contrastive: g.contrastive_count,
                },
                exec,
                &mut trace,
            )?);
        }
        if self.config.memory.use_cross_task {
            match &self.config.memory.store {
                Some(store) => {
                    let summaries = retrieve_relevant(store, scene, self.config.memory.top_r)?;
                    if summaries.is_empty() {
                        trace.journal.warn("cross-task memory is empty; no seeded features");
                    } else {
                        raw.extend(cross_task_hypotheses(
                            &generator,
                            &summaries,
                            scene,
                            self.config.memory.cross_task_count,
                            &mut trace,
                        )?);
                    }
                }
                None => trace.journal.warn("cross-task memory requested but no store configured"),
            }
        }
        crate::hypothesis::uniquify(&mut raw);
        journal.info(format!("{} raw hypotheses", raw.len()));
        let pool_dir = self.dir().join("pool");
        write_json(&pool_dir.join("raw.json"), &raw)?;
        if raw.is_empty() {
            journal.append(std::mem::take(&mut trace.journal));
            write_json(&pool_dir.join("transcript.json"), &trace.history)?;
            return Err(Error::Empty("hypothesis generation produced no features".into()));
        }
        let mut pool = generator.integrate(&raw, &mut trace)?;
        pool.history = trace.history.clone();
        journal.append(std::mem::take(&mut trace.journal));
        journal.info(format!("candidate pool has {} features", pool.len()));
        write_json(&pool_dir.join("pool.json"), &pool)?;
        Ok(())
    }

    pub fn load_pool(&self) -> Result<CandidatePool> {
        read_json(&self.dir().join("pool").join("pool.json"))
    }

    fn stage_tools(&self, corpus: &Corpus, journal: &mut Journal) -> Result<()> {
        let pool = self.load_pool()?;
        let samples = validation_samples(corpus, self.config.tools.toolsmith.validation_samples);
        let (tools, tj) = self.toolsmith().build_all(&pool.hypotheses, &samples, self.config.exec())?;
        journal.append(tj);
        let dir = self.dir().join("tools");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for t in &tools {
            write_tool(&dir, t)?;
        }
        let usable = tools.iter().filter(|t| t.is_usable()).count();
        journal.info(format!("{usable} of {} tools finalized", pool.len()));
        if usable == 0 {
            return Err(Error::Empty("no annotation tool could be finalized".into()));
        }
        Ok(())
    }

    /// Annotates the corpus with every finalized tool in `tools_dir` and
    /// writes the matrix into `out_dir`.
    pub fn stage_annotate(&self, corpus: &Corpus, tools_dir: &Path, out_dir: &Path, journal: &mut Journal) -> Result<FeatureMatrix> {
        let tools = read_tools(tools_dir)?;
        let (matrix, aj) = self.annotator().annotate_all(&tools, corpus)?;
        journal.append(aj);
        write_matrix(out_dir, &matrix, self.config.annotation.missing_cap)?;
        Ok(matrix)
    }

    /// Standalone annotate entry point: only the matrix is produced.
    pub fn annotate_only(&self, tools_dir: &Path, out_dir: &Path) -> Result<(FeatureMatrix, Journal)> {
        let corpus = self.load_corpus()?;
        let mut journal = Journal::new();
        let m = self
            .stage_annotate(&corpus, tools_dir, out_dir, &mut journal)
            .map_err(|e| e.in_stage("annotate"))?;
        Ok((m, journal))
    }

    fn stage_search(&self, corpus: &Corpus, journal: &mut Journal) -> Result<()> {
        let mut matrix = read_matrix(self.dir())?;
        if matrix.corpus_digest != corpus.digest() {
            return Err(Error::InvalidInput("matrix.tsv was built from a different corpus".into()));
        }
        let pool = self.load_pool()?;
        let y = corpus.norm_scores(&(0..corpus.len()).collect::<Vec<_>>());
        let mut hooks = ReflectionHooks {
            pipeline: self,
            corpus,
            scene: corpus.scene_description.clone(),
            pool,
            added: Vec::new(),
            history: Vec::new(),
        };
        let outcome = run_search(&mut matrix, &y, &self.config.search, &mut hooks, self.config.exec())?;
        journal.append(outcome.journal.clone());
        let mut log = outcome.log.join("\n");
        log.push('\n');
        log.push_str(&format!(
            "best size={} joint_mi={:.6} features={}\n",
            outcome.best.len(),
            outcome.best.joint_mi.value_nats,
            outcome.best.features.join(",")
        ));
        let log_path = self.dir().join("search.log");
        std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
        let mem = self.dir().join("memory");
        outcome.state.save(&mem.join("state.json"))?;
        write_json(&mem.join("best.json"), &outcome.best)?;
        write_json(&mem.join("reflection_pool.json"), &hooks.added)?;
        write_json(&mem.join("reflection_transcript.json"), &hooks.history)?;
        write_matrix(&mem.join("augmented"), &matrix, self.config.annotation.missing_cap)?;
        journal.info(format!(
            "selected {} features, joint MI {:.4} nats",
            outcome.best.len(),
            outcome.best.joint_mi.value_nats
        ));
        Ok(())
    }

    /// Matrix including reflection columns when the search stage ran.
    pub fn load_search_matrix(&self) -> Result<FeatureMatrix> {
        let augmented = self.dir().join("memory").join("augmented");
        if augmented.join("matrix.tsv").exists() {
            read_matrix(&augmented)
        } else {
            read_matrix(self.dir())
        }
    }

    /// Pool hypotheses plus any added by reflection.
    pub fn all_hypotheses(&self) -> Result<Vec<FeatureHypothesis>> {
        let mut hs = self.load_pool()?.hypotheses;
        let extra = self.dir().join("memory").join("reflection_pool.json");
        if extra.exists() {
            hs.extend(read_json::<Vec<FeatureHypothesis>>(&extra)?);
        }
        Ok(hs)
    }

    fn metadata(&self, corpus: &Corpus) -> Result<RunMetadata> {
        let digest = self.config.digest()?;
        Ok(RunMetadata {
            run_id: digest[..12].to_string(),
            seed: self.config.run.seed,
            config_digest: digest,
            corpus_digest: corpus.digest(),
            token_usage: self.recorded_usage()?,
        })
    }

    fn evaluate_ids(&self, corpus: &Corpus, ids: &[String], journal: &mut Journal) -> Result<EvalReport> {
        let matrix = self.load_search_matrix()?;
        let known: Vec<String> = matrix.columns.iter().map(|c| c.feature_id.clone()).collect();
        if ids.is_empty() {
            return Err(Error::InvalidInput("no feature ids given".into()));
        }
        for id in ids {
            match matrix.column(id) {
                None => {
                    return Err(Error::InvalidInput(format!(
                        "unknown feature id `{id}`; known ids: {}",
                        known.join(", ")
                    )))
                }
                Some(c) if c.stats.status == crate::annotator::ColumnStatus::Rejected => {
                    return Err(Error::InvalidInput(format!("feature `{id}` was rejected during annotation")))
                }
                Some(_) => {}
            }
        }
        let hypotheses = self.all_hypotheses()?;
        let state_path = self.dir().join("memory").join("state.json");
        let marginal_mi: BTreeMap<String, f64> = if state_path.exists() {
            SearchState::load(&state_path)?.marginal_mi
        } else {
            BTreeMap::new()
        };
        let best_path = self.dir().join("memory").join("best.json");
        let joint_mi = match read_json::<Beam>(&best_path) {
            Ok(b) if crate::memory::set_digest(&b.features) == crate::memory::set_digest(ids) => b.joint_mi.value_nats,
            _ => {
                let y = corpus.norm_scores(&(0..corpus.len()).collect::<Vec<_>>());
                let mut ctx = crate::search::MiContext::new(
                    &matrix,
                    &y,
                    self.config.search.mi_neighbors,
                    self.config.search.seed,
                    self.config.exec(),
                )?;
                ctx.joint(ids).map(|e| e.value_nats).unwrap_or(0.0)
            }
        };
        let (report, ej) = evaluate(EvalInput {
            matrix: &matrix,
            corpus,
            selected: ids,
            hypotheses: &hypotheses,
            marginal_mi: &marginal_mi,
            joint_mi,
            metadata: self.metadata(corpus)?,
        })?;
        journal.append(ej);
        Ok(report)
    }

    fn stage_evaluate(&self, corpus: &Corpus, journal: &mut Journal) -> Result<EvalReport> {
        let best: Beam = read_json(&self.dir().join("memory").join("best.json"))?;
        let report = self.evaluate_ids(corpus, &best.features, journal)?;
        write_report(&self.dir().join("report"), &report)?;
        match report.spearman_rho {
            Some(r) => journal.info(format!("test spearman {r:.4}, mae {:.4}", report.mae)),
            None => journal.warn("test spearman undefined"),
        }
        Ok(report)
    }

    /// Evaluates an arbitrary subset of annotated features against a
    /// finished (or at least searched) run and writes the report to
    /// `out_dir`.
    pub fn evaluate_subset(&self, ids: &[String], out_dir: &Path) -> Result<EvalReport> {
        let corpus = self.load_corpus()?;
        let mut journal = Journal::new();
        let report = self
            .evaluate_ids(&corpus, ids, &mut journal)
            .map_err(|e| e.in_stage("evaluate"))?;
        write_report(out_dir, &report)?;
        Ok(report)
    }

    fn store_memory(&self, report: &EvalReport) -> Result<()> {
        let m = &self.config.memory;
        let (Some(store), true) = (&m.store, m.write_summary) else {
            return Ok(());
        };
        store_summary(store, &summary_from_report(report))
    }
}

pub fn summary_from_report(report: &EvalReport) -> TaskSummary {
    TaskSummary {
        scene_description: report.scene_description.clone(),
        final_features: report
            .selected_features
            .iter()
            .map(|f| SummaryFeature {
                name: f.name.clone(),
                description: f.description.clone(),
                mi: f.marginal_mi,
            })
            .collect(),
        joint_mi: report.joint_mi,
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        run_id: report.metadata.run_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.corpus.path = "data.jsonl".into();
        c.corpus.scene = Some("reviews".into());
        c.search.k = 4;
        c.tools.toolsmith.code_tools = false;
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_toml("[search]\nbeam = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn digest_ignores_location() {
        let mut a = RunConfig::default();
        a.corpus.scene = Some("s".into());
        let mut b = a.clone();
        b.run.dir = "elsewhere".into();
        b.llm.mode = LlmMode::Replay;
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.search.k = 3;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn usage_arithmetic() {
        let mut a = UsageReport::default();
        a.per_slot.insert(crate::llm::Slot::Agent, SlotUsage { calls: 5, cached_calls: 1, input_tokens: 50, output_tokens: 9 });
        let mut b = UsageReport::default();
        b.per_slot.insert(crate::llm::Slot::Agent, SlotUsage { calls: 2, cached_calls: 0, input_tokens: 20, output_tokens: 4 });
        let d = usage_delta(&a, &b);
        assert_eq!(d.slot(crate::llm::Slot::Agent), SlotUsage { calls: 3, cached_calls: 1, input_tokens: 30, output_tokens: 5 });
        let mut t = b.clone();
        usage_add(&mut t, &d);
        assert_eq!(t, a);
    }
}
