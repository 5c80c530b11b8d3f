use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use featurist::annotator::{read_matrix, ColumnStatus};
use featurist::evaluator::read_report;
use featurist::llm::{BackendReply, Gateway, LlmBackend, LlmMode, LlmRequest, MockBackend, Slot};
use featurist::memory::load_summaries;
use featurist::pipeline::{DiscoverOutcome, Pipeline, RunConfig, STAGES};
use featurist::synthetic::{self, SyntheticConfig};
use featurist::toolsmith::{write_tool, AnnotationTool, ToolKind};
use featurist::Error;

fn config(dir: &Path, n_records: usize) -> RunConfig {
    let recs = synthetic::generate(&SyntheticConfig {
        n_records,
        seed: 11,
        ..SyntheticConfig::default()
    });
    let corpus = dir.join("corpus.jsonl");
    std::fs::write(&corpus, synthetic::to_jsonl(&recs)).unwrap();
    let mut c = RunConfig::default();
    c.corpus.path = corpus;
    c.corpus.scene = Some(synthetic::SCENE.into());
    c.run.dir = dir.join("run");
    c.tools.toolsmith.code_tools = false;
    c.search.reflection_rounds = 1;
    c
}

/// Synthetic backend that counts role-generation and annotator requests.
struct Counting {
    inner: MockBackend,
    roles: Arc<AtomicUsize>,
    annotations: Arc<AtomicUsize>,
}

impl LlmBackend for Counting {
    fn complete(&self, request: &LlmRequest) -> featurist::Result<BackendReply> {
        if request.slot == Slot::Annotator {
            self.annotations.fetch_add(1, Ordering::SeqCst);
        } else if request.prompt.contains("virtual evaluator roles") {
            self.roles.fetch_add(1, Ordering::SeqCst);
        }
        self.inner.complete(request)
    }
}

fn counting() -> (Gateway, Arc<AtomicUsize>, Arc<AtomicUsize>) {
    let roles = Arc::new(AtomicUsize::new(0));
    let annotations = Arc::new(AtomicUsize::new(0));
    let gw = Gateway::mock(Counting {
        inner: synthetic::mock_backend(),
        roles: roles.clone(),
        annotations: annotations.clone(),
    });
    (gw, roles, annotations)
}

fn tool(id: &str) -> AnnotationTool {
    AnnotationTool {
        feature_id: id.into(),
        kind: ToolKind::Prompt,
        body: "Give a score from 1 to 10. The text to evaluate is: [TEXT_TO_EVALUATE].".into(),
        refine_count: 0,
        finalized: true,
        rejected: None,
        validation_log: Vec::new(),
    }
}

#[test]
fn full_run_persists_artifacts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 200);
    let store = dir.path().join("memory.jsonl");
    cfg.memory.store = Some(store.clone());
    let pipeline = Pipeline::new(cfg.clone()).unwrap();
    let first = match pipeline.discover().unwrap() {
        DiscoverOutcome::Completed(r) => r,
        other => panic!("expected a fresh run, got {other:?}"),
    };
    let run = dir.path().join("run");
    for path in [
        "config.copy",
        "pool/pool.json",
        "pool/raw.json",
        "matrix.tsv",
        "matrix.meta.json",
        "search.log",
        "run.log",
        "memory/state.json",
        "memory/best.json",
        "report/report.json",
        "report/summary.txt",
    ] {
        assert!(run.join(path).exists(), "missing {path}");
    }
    for stage in STAGES {
        assert!(run.join("stages").join(format!("{stage}.done")).exists());
    }
    assert!(std::fs::read_dir(run.join("tools")).unwrap().count() > 0);
    assert_eq!(read_report(&run.join("report")).unwrap(), first);
    assert_eq!(load_summaries(&store).unwrap().len(), 1);

    let again = Pipeline::new(cfg).unwrap().discover().unwrap();
    assert_eq!(again, DiscoverOutcome::AlreadyComplete(first));
    assert_eq!(load_summaries(&store).unwrap().len(), 1, "no second summary on a no-op rerun");
}

#[test]
fn resume_after_annotation_reuses_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 200);
    let (gw, roles, annotations) = counting();
    let original = Pipeline::with_gateway(cfg.clone(), gw).unwrap().discover().unwrap();
    let full_annotations = annotations.load(Ordering::SeqCst);
    assert_eq!(roles.load(Ordering::SeqCst), 1);

    let run = dir.path().join("run");
    for stage in ["search", "evaluate"] {
        std::fs::remove_file(run.join("stages").join(format!("{stage}.done"))).unwrap();
    }
    std::fs::remove_dir_all(run.join("report")).unwrap();

    let (gw, roles, annotations) = counting();
    let resumed = Pipeline::with_gateway(cfg, gw).unwrap().discover().unwrap();
    assert_eq!(roles.load(Ordering::SeqCst), 0, "generation must not rerun");
    let resumed_annotations = annotations.load(Ordering::SeqCst);
    assert!(
        resumed_annotations < full_annotations / 2,
        "only reflection features should be annotated again ({resumed_annotations} vs {full_annotations})"
    );
    assert!(matches!(resumed, DiscoverOutcome::Completed(_)));
    assert_eq!(resumed.report(), original.report());
}

#[test]
fn evaluate_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 200);
    let pipeline = Pipeline::new(cfg).unwrap();
    let report = pipeline.discover().unwrap().report().clone();

    let searched: Vec<String> = report.selected_features.iter().map(|f| f.id.clone()).collect();
    let same = pipeline.evaluate_subset(&searched, &dir.path().join("again")).unwrap();
    assert_eq!(same, report);

    let picked = vec![synthetic::cue_feature_id("lumen"), synthetic::cue_feature_id("birch")];
    let custom = pipeline.evaluate_subset(&picked, &dir.path().join("custom")).unwrap();
    let ids: Vec<&str> = custom.selected_features.iter().map(|f| f.id.as_str()).collect();
    assert_eq!(ids, ["lumen-mentions", "birch-mentions"]);
    assert!(dir.path().join("custom/report.json").exists());

    let err = pipeline.evaluate_subset(&[], &dir.path().join("x")).unwrap_err();
    assert!(err.to_string().contains("no feature ids"), "{err}");
    let err = pipeline.evaluate_subset(&["nope".into()], &dir.path().join("x")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("unknown feature id `nope`") && msg.contains("amber-mentions"), "{msg}");
}

#[test]
fn annotate_only_with_a_constant_annotator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 60);
    let tools = dir.path().join("tools");
    write_tool(&tools, &tool("constant")).unwrap();
    let gw = Gateway::mock(MockBackend::new().on_slot(Slot::Annotator, "", |_: &LlmRequest| "5"));
    let pipeline = Pipeline::with_gateway(cfg, gw).unwrap();
    let out = dir.path().join("matrix");
    let (matrix, _) = pipeline.annotate_only(&tools, &out).unwrap();
    assert_eq!(matrix.columns.len(), 1);
    assert_eq!(matrix.columns[0].raw, vec![Some(5.0); 60]);
    let header = std::fs::read_to_string(out.join("matrix.tsv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "id\tconstant");
}

#[test]
fn rejected_columns_are_omitted_and_explained() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 60);
    let tools = dir.path().join("tools");
    write_tool(&tools, &tool("kept")).unwrap();
    let mut t = tool("mute");
    t.body = "Say nothing useful. The text to evaluate is: [TEXT_TO_EVALUATE].".into();
    write_tool(&tools, &t).unwrap();
    let gw = Gateway::mock(
        MockBackend::new()
            .on_slot(Slot::Annotator, "Say nothing useful", |_: &LlmRequest| "no idea")
            .on_slot(Slot::Annotator, "", |r: &LlmRequest| format!("{}", 1 + r.prompt.len() % 9)),
    );
    let pipeline = Pipeline::with_gateway(cfg, gw).unwrap();
    let out = dir.path().join("matrix");
    pipeline.annotate_only(&tools, &out).unwrap();
    let tsv = std::fs::read_to_string(out.join("matrix.tsv")).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "id\tkept");
    let meta = std::fs::read_to_string(out.join("matrix.meta.json")).unwrap();
    assert!(meta.contains("\"mute\"") && meta.contains("missing"), "{meta}");
    let back = read_matrix(&out).unwrap();
    assert_eq!(back.column("mute").unwrap().stats.status, ColumnStatus::Rejected);
}

#[test]
fn replay_without_entries_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 60);
    let cache = dir.path().join("empty.jsonl");
    std::fs::write(&cache, "").unwrap();
    cfg.llm.mode = LlmMode::Replay;
    cfg.llm.cache = Some(cache);
    let err = Pipeline::new(cfg).unwrap().discover().unwrap_err();
    assert!(err.is_replay_miss());
    assert!(err.to_string().contains("stage `generate`"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 60);
    let tools = dir.path().join("tools");
    write_tool(&tools, &tool("t")).unwrap();
    let mut replay = cfg.clone();
    let cache = dir.path().join("empty.jsonl");
    std::fs::write(&cache, "").unwrap();
    replay.llm.mode = LlmMode::Replay;
    replay.llm.cache = Some(cache);
    let err = Pipeline::new(replay).unwrap().annotate_only(&tools, dir.path()).unwrap_err();
    assert!(err.is_replay_miss());
    assert!(err.to_string().contains("stage `annotate`"), "{err}");
}

#[test]
fn run_directory_is_bound_to_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 60);
    let mut fast = cfg.clone();
    fast.generation.contrastive = false;
    fast.search.reflection_rounds = 0;
    fast.search.k = 2;
    Pipeline::new(fast.clone()).unwrap().discover().unwrap();
    let mut other = fast;
    other.search.k = 3;
    let err = Pipeline::new(other).unwrap().discover().unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("different configuration"));
}
