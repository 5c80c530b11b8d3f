//! Working memory for one search run and the persistent cross-task store of
//! task summaries.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hypothesis::{jaccard, to_hypotheses, FeatureHypothesis, Generator, Origin, Trace};
use crate::prompts::PromptKind;

pub const DEFAULT_TOP_R: usize = 3;

/// Order-independent digest of a feature-id set.
pub fn set_digest(ids: &[String]) -> String {
    let mut sorted: Vec<&str> = ids.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestedSet {
    /// Sorted feature ids.
    pub features: Vec<String>,
    pub joint_mi: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub tested_sets: BTreeMap<String, TestedSet>,
    pub marginal_mi: BTreeMap<String, f64>,
    pub insights: Vec<String>,
    pub round: usize,
}

impl SearchState {
    pub fn record(&mut self, ids: &[String], joint_mi: f64) -> String {
        let digest = set_digest(ids);
        let mut features = ids.to_vec();
        features.sort();
        self.tested_sets
            .entry(digest.clone())
            .or_insert(TestedSet { features, joint_mi });
        digest
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFeature {
    pub name: String,
    pub description: String,
    pub mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub scene_description: String,
    pub final_features: Vec<SummaryFeature>,
    pub joint_mi: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub run_id: String,
}

/// Appends one summary as a JSON line. The file is locked for the write so
/// concurrent runs sharing a store do not interleave.
pub fn store_summary(path: &Path, summary: &TaskSummary) -> Result<()> {
    if summary.final_features.is_empty() {
        return Err(Error::InvalidInput("a task summary needs at least one final feature".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut line = serde_json::to_string(summary)?;
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let written = file.write_all(line.as_bytes()).and_then(|_| file.flush());
    let _ = file.unlock();
    written.map_err(|e| Error::io(path, e))
}

/// All summaries in insertion order. A missing store is empty; lines that
/// fail to parse are skipped with a log warning.
pub fn load_summaries(path: &Path) -> Result<Vec<TaskSummary>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(s) => out.push(s),
            Err(e) => log::warn!("{}:{}: skipping unreadable summary: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Summaries ranked by word-set Jaccard similarity of scene descriptions;
/// equal scores keep insertion order.
pub fn rank_relevant(summaries: Vec<TaskSummary>, scene: &str, top_r: usize) -> Vec<(TaskSummary, f64)> {
    let mut scored: Vec<(TaskSummary, f64)> = summaries
        .into_iter()
        .map(|s| {
            let score = jaccard(&s.scene_description, scene);
            (s, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(top_r);
    scored
}

pub fn retrieve_relevant(path: &Path, scene: &str, top_r: usize) -> Result<Vec<TaskSummary>> {
    Ok(rank_relevant(load_summaries(path)?, scene, top_r)
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

pub fn render_other_scenes(summaries: &[TaskSummary]) -> String {
    summaries
        .iter()
        .map(|s| {
            let mut block = format!("Scenario: {}\nFeatures:\n", s.scene_description.trim());
            for f in &s.final_features {
                block.push_str(&format!("- {}: {} (MI: {:.4})\n", f.name, f.description, f.mi));
            }
            block.trim_end().to_string()
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// New hypotheses for `scene` seeded from prior summaries. A malformed
/// answer (after one reprompt) yields no hypotheses and a warning.
pub fn cross_task_hypotheses(
    generator: &Generator,
    summaries: &[TaskSummary],
    scene: &str,
    count: usize,
    trace: &mut Trace,
) -> Result<Vec<FeatureHypothesis>> {
    if summaries.is_empty() {
        return Err(Error::InvalidInput("cross-task seeding needs at least one summary".into()));
    }
    let info = render_other_scenes(summaries);
    let n = count.to_string();
    let prompt = generator.prompts.render(
        PromptKind::CrossScene,
        &[
            ("current_scene_description", scene),
            ("other_scenes_info", &info),
            ("feature_count", &n),
        ],
    )?;
    match generator.ask_lines("cross-task seeding", prompt, count, trace) {
        Ok(lines) => Ok(to_hypotheses(&lines, Origin::CrossTask, 0)),
        Err(e) if e.is_replay_miss() => Err(e),
        Err(e) => {
            trace.journal.warn(format!("cross-task seeding produced no features: {e}"));
            Ok(Vec::new())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(scene: &str, features: &[&str]) -> TaskSummary {
        TaskSummary {
            scene_description: scene.into(),
            final_features: features
                .iter()
                .map(|f| SummaryFeature {
                    name: f.to_string(),
                    description: format!("how much {f}"),
                    mi: 0.25,
                })
                .collect(),
            joint_mi: 0.5,
            timestamp: 1_700_000_000,
            run_id: "r1".into(),
        }
    }

    #[test]
    fn digest_ignores_order() {
        let a = set_digest(&["x".into(), "y".into()]);
        assert_eq!(a, set_digest(&["y".into(), "x".into()]));
        assert_ne!(a, set_digest(&["xy".into()]));
    }

    #[test]
    fn store_appends_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem").join("store.jsonl");
        assert!(load_summaries(&path).unwrap().is_empty());
        let a = summary("hotel reviews", &["cleanliness"]);
        let b = summary("essay scoring", &["coherence"]);
        store_summary(&path, &a).unwrap();
        store_summary(&path, &b).unwrap();
        assert_eq!(load_summaries(&path).unwrap(), vec![a.clone(), b.clone()]);
        assert!(store_summary(&path, &summary("empty", &[])).is_err());
    }

    #[test]
    fn corrupt_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let a = summary("x", &["f"]);
        std::fs::write(&path, format!("{}\n{{not json\n", serde_json::to_string(&a).unwrap())).unwrap();
        assert_eq!(load_summaries(&path).unwrap(), vec![a]);
    }

    #[test]
    fn ranking_by_scene_overlap() {
        let other = summary("academic essay grading", &["f"]);
        let close = summary("restaurant review quality", &["g"]);
        let query = "quality of a restaurant review";
        let ranked = rank_relevant(vec![other.clone(), close.clone()], query, 3);
        assert_eq!(ranked[0].0, close);
        // {restaurant, review, quality} vs {quality, of, a, restaurant, review}
        assert!((ranked[0].1 - 3.0 / 5.0).abs() < 1e-12);
        assert_eq!(ranked[1].1, 0.0);
        assert_eq!(rank_relevant(vec![other, close], query, 1).len(), 1);
    }

    #[test]
    fn other_scenes_block() {
        let s = summary("hotel reviews", &["cleanliness", "staff"]);
        assert_eq!(
            render_other_scenes(&[s]),
            "Scenario: hotel reviews\nFeatures:\n- cleanliness: how much cleanliness (MI: 0.2500)\n- staff: how much staff (MI: 0.2500)"
        );
    }
}
