//! Applies finalized tools to every record and assembles the feature matrix.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Split};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::journal::Journal;
use crate::llm::{Gateway, LlmRequest};
use crate::runner::{CodeRunner, TextItem};
use crate::toolsmith::{AnnotationTool, ToolKind, TEXT_PLACEHOLDER};

pub const DEFAULT_MISSING_CAP: f64 = 0.2;
const RUNNER_BATCH: usize = 256;

/// First numeric token in `reply`: optional sign, digits, optional
/// fraction. `"Score: 7/10"` gives 7.
pub fn parse_score(reply: &str) -> Option<f64> {
    let b = reply.as_bytes();
    let mut i = 0;
    while i < b.len() {
        let start = i;
        let mut j = i;
        if b[j] == b'-' || b[j] == b'+' {
            j += 1;
        }
        let int_start = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        let mut end = j;
        if j < b.len() && b[j] == b'.' {
            let mut k = j + 1;
            while k < b.len() && b[k].is_ascii_digit() {
                k += 1;
            }
            if k > j + 1 {
                end = k;
            }
        }
        if end > int_start && (end > j || j > int_start) {
            return reply[start..end].parse().ok();
        }
        i += 1;
    }
    None
}

pub fn render_prompt_tool(body: &str, text: &str) -> String {
    body.replacen(TEXT_PLACEHOLDER, text, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnStatus {
    Active,
    /// No variance on the training rows; kept in the matrix but never
    /// searched.
    Degenerate,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub status: ColumnStatus,
    pub missing_fraction: f64,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureColumn {
    pub feature_id: String,
    pub raw: Vec<Option<f64>>,
    /// Imputed and standardised values, one per row.
    pub values: Vec<f64>,
    pub stats: ColumnStats,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

impl FeatureColumn {
    /// Imputes missing values with the training median and standardises with
    /// training mean and population standard deviation.
    pub fn from_raw(feature_id: &str, raw: Vec<Option<f64>>, split: &[Split], missing_cap: f64) -> Self {
        let n = raw.len().max(1);
        let missing = raw.iter().filter(|v| v.is_none()).count();
        let missing_fraction = missing as f64 / n as f64;
        let mut train: Vec<f64> = raw
            .iter()
            .zip(split)
            .filter(|(_, s)| **s == Split::Train)
            .filter_map(|(v, _)| *v)
            .collect();
        let reject = |reason: String| FeatureColumn {
            feature_id: feature_id.to_string(),
            raw: raw.clone(),
            values: vec![0.0; raw.len()],
            stats: ColumnStats {
                status: ColumnStatus::Rejected,
                missing_fraction,
                median: 0.0,
                mean: 0.0,
                std: 0.0,
                reason: Some(reason),
            },
        };
        if missing_fraction > missing_cap {
            return reject(format!(
                "{:.1}% of values missing (cap {:.1}%)",
                missing_fraction * 100.0,
                missing_cap * 100.0
            ));
        }
        if train.is_empty() {
            return reject("no training values".into());
        }
        train.sort_by(f64::total_cmp);
        let med = median(&train);
        let imputed: Vec<f64> = raw.iter().map(|v| v.unwrap_or(med)).collect();
        let train_imputed: Vec<f64> = imputed
            .iter()
            .zip(split)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(v, _)| *v)
            .collect();
        let m = train_imputed.len() as f64;
        let mean = train_imputed.iter().sum::<f64>() / m;
        let std = (train_imputed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt();
        let degenerate = std <= 1e-12 * mean.abs().max(1.0);
        let values = if degenerate {
            vec![0.0; imputed.len()]
        } else {
            imputed.iter().map(|v| (v - mean) / std).collect()
        };
        FeatureColumn {
            feature_id: feature_id.to_string(),
            raw,
            values,
            stats: ColumnStats {
                status: if degenerate { ColumnStatus::Degenerate } else { ColumnStatus::Active },
                missing_fraction,
                median: med,
                mean,
                std,
                reason: degenerate.then(|| "zero variance on training rows".to_string()),
            },
        }
    }

    pub fn is_active(&self) -> bool {
        self.stats.status == ColumnStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub split: Vec<Split>,
    pub columns: Vec<FeatureColumn>,
    pub corpus_digest: String,
}

impl FeatureMatrix {
    pub fn empty(corpus: &Corpus) -> Self {
        FeatureMatrix {
            row_ids: corpus.records.iter().map(|r| r.id.clone()).collect(),
            split: corpus.split.clone(),
            columns: Vec::new(),
            corpus_digest: corpus.digest(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn column(&self, feature_id: &str) -> Option<&FeatureColumn> {
        self.columns.iter().find(|c| c.feature_id == feature_id)
    }

    /// Adds or replaces a column.
    pub fn insert(&mut self, column: FeatureColumn) {
        match self.columns.iter_mut().find(|c| c.feature_id == column.feature_id) {
            Some(slot) => *slot = column,
            None => self.columns.push(column),
        }
    }

    pub fn active_ids(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| c.is_active())
            .map(|c| c.feature_id.clone())
            .collect()
    }

    pub fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.split[i] == split).collect()
    }

    /// Standardised values of `feature_id` restricted to `rows`.
    pub fn select(&self, feature_id: &str, rows: &[usize]) -> Option<Vec<f64>> {
        let c = self.column(feature_id)?;
        Some(rows.iter().map(|&i| c.values[i]).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnnotateOptions {
    pub missing_cap: f64,
    pub exec: Execution,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            missing_cap: DEFAULT_MISSING_CAP,
            exec: Execution::default(),
        }
    }
}

pub struct Annotator<'a> {
    pub gateway: &'a Gateway,
    pub runner: Option<&'a dyn CodeRunner>,
    pub options: AnnotateOptions,
}

impl<'a> Annotator<'a> {
    pub fn new(gateway: &'a Gateway, options: AnnotateOptions) -> Self {
        Annotator {
            gateway,
            runner: None,
            options,
        }
    }

    pub fn with_runner(mut self, runner: &'a dyn CodeRunner) -> Self {
        self.runner = Some(runner);
        self
    }

    /// Raw values of one tool over every record, index-aligned with the
    /// corpus. Individual failures become `None`; replay misses and runner
    /// loss abort.
    pub fn raw_values(&self, tool: &AnnotationTool, corpus: &Corpus, journal: &mut Journal) -> Result<Vec<Option<f64>>> {
        match tool.kind {
            ToolKind::Prompt => {
                let results = exec::map_slice(&corpus.records, self.options.exec, |r| {
                    let prompt = render_prompt_tool(&tool.body, &r.text);
                    match self.gateway.complete(&LlmRequest::annotator(prompt)) {
                        Ok(resp) => Ok(parse_score(&resp.text).filter(|v| (1.0..=10.0).contains(v))),
                        Err(e) if e.is_replay_miss() => Err(e),
                        Err(e) => {
                            log::debug!("{}: annotation of {} failed: {e}", tool.feature_id, r.id);
                            Ok(None)
                        }
                    }
                });
                results.into_iter().collect()
            }
            ToolKind::Code => {
                let runner = self
                    .runner
                    .ok_or_else(|| Error::Runner(format!("{}: no code runner configured", tool.feature_id)))?;
                let probe = runner.probe(&tool.feature_id, &tool.body)?;
                if !probe.is_ok() {
                    journal.warn(format!(
                        "{}: finalized code tool no longer loads: {}",
                        tool.feature_id,
                        probe.message.unwrap_or_default()
                    ));
                    return Ok(vec![None; corpus.len()]);
                }
                let mut out = Vec::with_capacity(corpus.len());
                for chunk in corpus.records.chunks(RUNNER_BATCH) {
                    let items: Vec<TextItem> = chunk
                        .iter()
                        .map(|r| TextItem {
                            id: r.id.clone(),
                            text: r.text.clone(),
                        })
                        .collect();
                    out.extend(runner.annotate(&tool.feature_id, &items)?);
                }
                Ok(out)
            }
        }
    }

    pub fn annotate_tool(&self, tool: &AnnotationTool, corpus: &Corpus, journal: &mut Journal) -> Result<FeatureColumn> {
        let raw = match self.raw_values(tool, corpus, journal) {
            Ok(raw) => raw,
            Err(e) if e.is_replay_miss() => return Err(e),
            Err(e) => {
                journal.warn(format!("{}: annotation failed: {e}", tool.feature_id));
                vec![None; corpus.len()]
            }
        };
        let column = FeatureColumn::from_raw(&tool.feature_id, raw, &corpus.split, self.options.missing_cap);
        match column.stats.status {
            ColumnStatus::Active => journal.info(format!(
                "{}: annotated, {:.1}% missing",
                tool.feature_id,
                column.stats.missing_fraction * 100.0
            )),
            ColumnStatus::Degenerate => journal.warn(format!("{}: degenerate column, excluded from search", tool.feature_id)),
            ColumnStatus::Rejected => journal.warn(format!(
                "{}: rejected: {}",
                tool.feature_id,
                column.stats.reason.as_deref().unwrap_or("")
            )),
        }
        Ok(column)
    }

    /// Annotates every usable tool, in tool order.
    pub fn annotate_all(&self, tools: &[AnnotationTool], corpus: &Corpus) -> Result<(FeatureMatrix, Journal)> {
        let mut matrix = FeatureMatrix::empty(corpus);
        let mut journal = Journal::new();
        for tool in tools.iter().filter(|t| t.is_usable()) {
            let column = self.annotate_tool(tool, corpus, &mut journal)?;
            matrix.insert(column);
        }
        Ok((matrix, journal))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixMeta {
    corpus_digest: String,
    splits: Vec<Split>,
    missing_cap: f64,
    columns: BTreeMap<String, ColumnStats>,
    /// Column order of `matrix.tsv` (rejected columns are omitted there).
    order: Vec<String>,
}

fn format_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes `matrix.tsv` (raw values, empty cell = missing; rejected columns
/// omitted) and the `matrix.meta.json` sidecar into `dir`.
pub fn write_matrix(dir: &Path, matrix: &FeatureMatrix, missing_cap: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let kept: Vec<&FeatureColumn> = matrix
        .columns
        .iter()
        .filter(|c| c.stats.status != ColumnStatus::Rejected)
        .collect();
    let mut out = String::from("id");
    for c in &kept {
        out.push('\t');
        out.push_str(&c.feature_id);
    }
    out.push('\n');
    for (i, id) in matrix.row_ids.iter().enumerate() {
        if id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidInput(format!("record id {id:?} cannot be written to TSV")));
        }
        out.push_str(id);
        for c in &kept {
            out.push('\t');
            out.push_str(&format_value(c.raw[i]));
        }
        out.push('\n');
    }
    let tsv = dir.join("matrix.tsv");
    std::fs::write(&tsv, out).map_err(|e| Error::io(&tsv, e))?;
    let meta = MatrixMeta {
        corpus_digest: matrix.corpus_digest.clone(),
        splits: matrix.split.clone(),
        missing_cap,
        columns: matrix
            .columns
            .iter()
            .map(|c| (c.feature_id.clone(), c.stats.clone()))
            .collect(),
        order: matrix.columns.iter().map(|c| c.feature_id.clone()).collect(),
    };
    let path = dir.join("matrix.meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix`]. Standardised values are
/// recomputed from the raw cells; rejected columns come back with all
/// values missing.
pub fn read_matrix(dir: &Path) -> Result<FeatureMatrix> {
    let meta_path = dir.join("matrix.meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MatrixMeta = serde_json::from_str(&meta_text)?;
    let tsv = dir.join("matrix.tsv");
    let text = std::fs::read_to_string(&tsv).map_err(|e| Error::io(&tsv, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Empty(tsv.display().to_string()))?
        .split('\t')
        .collect();
    if header.first() != Some(&"id") {
        return Err(Error::MalformedRow {
            path: tsv.clone(),
            line: 1,
            message: "header must start with `id`".into(),
        });
    }
    let names = &header[1..];
    let mut row_ids = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); names.len()];
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::MalformedRow {
                path: tsv.clone(),
                line: n + 2,
                message: format!("expected {} fields, got {}", header.len(), fields.len()),
            });
        }
        row_ids.push(fields[0].to_string());
        for (j, f) in fields[1..].iter().enumerate() {
            let v = if f.is_empty() {
                None
            } else {
                Some(f.parse::<f64>().map_err(|_| Error::MalformedRow {
                    path: tsv.clone(),
                    line: n + 2,
                    message: format!("bad value {f:?}"),
                })?)
            };
            cells[j].push(v);
        }
    }
    if row_ids.len() != meta.splits.len() {
        return Err(Error::InvalidInput(format!(
            "matrix has {} rows but metadata lists {}",
            row_ids.len(),
            meta.splits.len()
        )));
    }
    let mut by_name: BTreeMap<&str, Vec<Option<f64>>> = names.iter().copied().zip(cells).collect();
    let mut columns = Vec::new();
    for id in &meta.order {
        let stats = meta
            .columns
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("no metadata for column `{id}`")))?;
        let column = match by_name.remove(id.as_str()) {
            Some(raw) => FeatureColumn::from_raw(id, raw, &meta.splits, meta.missing_cap),
            None => FeatureColumn {
                feature_id: id.clone(),
                raw: vec![None; row_ids.len()],
                values: vec![0.0; row_ids.len()],
                stats: stats.clone(),
            },
        };
        columns.push(column);
    }
    Ok(FeatureMatrix {
        row_ids,
        split: meta.splits,
        columns,
        corpus_digest: meta.corpus_digest,
    })
}
