//! Linear predictor over the selected features, held-out metrics and the
//! run report.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::annotator::FeatureMatrix;
use crate::dataset::{Corpus, Split};
use crate::error::{Error, Result};
use crate::hypothesis::{FeatureHypothesis, Origin};
use crate::journal::Journal;
use crate::llm::UsageReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub feature_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub rank_deficient: bool,
}

impl LinearModel {
    /// Predictions for column-major inputs ordered like `feature_ids`.
    pub fn predict(&self, columns: &[&[f64]]) -> Result<Vec<f64>> {
        if columns.len() != self.weights.len() {
            return Err(Error::InvalidInput(format!(
                "model has {} weights, got {} columns",
                self.weights.len(),
                columns.len()
            )));
        }
        let n = columns.first().map_or(0, |c| c.len());
        Ok((0..n)
            .map(|i| {
                self.intercept
                    + columns
                        .iter()
                        .zip(&self.weights)
                        .map(|(c, w)| c[i] * w)
                        .sum::<f64>()
            })
            .collect())
    }
}

/// Ordinary least squares with intercept, solved by SVD of the centred
/// design matrix. Rank-deficient designs get the minimum-norm weights.
pub fn fit_linear(feature_ids: &[String], columns: &[&[f64]], y: &[f64], journal: &mut Journal) -> Result<LinearModel> {
    let d = columns.len();
    if d == 0 {
        return Err(Error::InvalidInput("cannot fit a model with no feature columns".into()));
    }
    if feature_ids.len() != d {
        return Err(Error::InvalidInput("one feature id per column required".into()));
    }
    let n = y.len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput("columns and target differ in length".into()));
    }
    if n < d + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least {} rows for {d} features, got {n}",
            d + 1
        )));
    }
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, d, |i, j| columns[j][i] - means[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let svd = x.svd(true, true);
    let s_max = svd.singular_values.max();
    let tol = f64::EPSILON * n.max(d) as f64 * s_max;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let w = if s_max == 0.0 {
        DVector::zeros(d)
    } else {
        svd.solve(&yc, tol).map_err(|e| Error::Degenerate(format!("least squares solve failed: {e}")))?
    };
    let rank_deficient = rank < d;
    if rank_deficient {
        journal.warn(format!(
            "design matrix has rank {rank} < {d} columns; using the minimum-norm solution"
        ));
    }
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - weights.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearModel {
        feature_ids: feature_ids.to_vec(),
        weights,
        intercept,
        rank_deficient,
    })
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation. Without ties this is
/// `1 − 6 Σd² / (n(n² − 1))`; with ties, Pearson correlation of the average
/// ranks.
pub fn spearman(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::InvalidInput("spearman needs at least 2 points".into()));
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in spearman input".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(y) || constant(yhat) {
        return Err(Error::Degenerate("spearman is undefined for a constant vector".into()));
    }
    let ry = average_ranks(y);
    let rh = average_ranks(yhat);
    let has_ties = |r: &[f64]| {
        let mut s = r.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    };
    if !has_ties(&ry) && !has_ties(&rh) {
        let n = y.len() as f64;
        let d2: f64 = ry.iter().zip(&rh).map(|(a, b)| (a - b).powi(2)).sum();
        return Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
    }
    pearson(&ry, &rh).ok_or_else(|| Error::Degenerate("rank vector has no variance".into()))
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("mae needs at least one point".into()));
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Marginal MI divided by the largest one; all zeros when none is positive.
pub fn normalized_importance(mi: &[f64]) -> Vec<f64> {
    let max = mi.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0.0; mi.len()];
    }
    mi.iter().map(|v| (v.max(0.0) / max).min(1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeature {
    pub id: String,
    pub name: String,
    pub description: String,
    pub origin: Origin,
    pub marginal_mi: f64,
    pub importance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub corpus_digest: String,
    pub token_usage: UsageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene_description: String,
    /// `None` when the prediction or target is constant on the test split.
    pub spearman_rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<String>,
    pub mae: f64,
    pub joint_mi: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub intercept: f64,
    pub rank_deficient: bool,
    pub selected_features: Vec<SelectedFeature>,
    /// Feature id to normalised importance.
    pub per_feature_mi: BTreeMap<String, f64>,
    pub metadata: RunMetadata,
}

pub struct EvalInput<'a> {
    pub matrix: &'a FeatureMatrix,
    pub corpus: &'a Corpus,
    pub selected: &'a [String],
    pub hypotheses: &'a [FeatureHypothesis],
    pub marginal_mi: &'a BTreeMap<String, f64>,
    pub joint_mi: f64,
    pub metadata: RunMetadata,
}

fn as_slices(x: &[Vec<f64>]) -> Vec<&[f64]> {
    x.iter().map(Vec::as_slice).collect()
}

/// Fits on the training rows and scores the test rows.
pub fn evaluate(input: EvalInput) -> Result<(EvalReport, Journal)> {
    let mut journal = Journal::new();
    let corpus = input.corpus;
    if corpus.has_degenerate_scores() {
        return Err(Error::Degenerate("all scores are equal; nothing to evaluate".into()));
    }
    if input.selected.is_empty() {
        return Err(Error::InvalidInput("no selected features to evaluate".into()));
    }
    let m = input.matrix;
    if m.n_rows() != corpus.len() {
        return Err(Error::InvalidInput("matrix and corpus are not aligned".into()));
    }
    let train = m.rows(Split::Train);
    let test = m.rows(Split::Test);
    if test.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }
    let pick = |rows: &[usize]| -> Result<Vec<Vec<f64>>> {
        input
            .selected
            .iter()
            .map(|id| {
                m.select(id, rows)
                    .ok_or_else(|| Error::InvalidInput(format!("feature `{id}` is not in the matrix")))
            })
            .collect()
    };
    let x_train = pick(&train)?;
    let x_test = pick(&test)?;
    let y_train = corpus.norm_scores(&train);
    let y_test = corpus.norm_scores(&test);
    let model = fit_linear(input.selected, &as_slices(&x_train), &y_train, &mut journal)?;
    let yhat = model.predict(&as_slices(&x_test))?;
    let (rho, degenerate) = match spearman(&y_test, &yhat) {
        Ok(r) => (Some(r), None),
        Err(Error::Degenerate(msg)) => {
            journal.warn(format!("spearman undefined on the test split: {msg}"));
            (None, Some(msg))
        }
        Err(e) => return Err(e),
    };
    let error = mae(&y_test, &yhat)?;
    let mis: Vec<f64> = input
        .selected
        .iter()
        .map(|id| input.marginal_mi.get(id).copied().unwrap_or(0.0))
        .collect();
    let importance = normalized_importance(&mis);
    let mut selected_features = Vec::new();
    let mut per_feature_mi = BTreeMap::new();
    for (i, id) in input.selected.iter().enumerate() {
        let h = input.hypotheses.iter().find(|h| &h.id == id);
        selected_features.push(SelectedFeature {
            id: id.clone(),
            name: h.map_or(id.clone(), |h| h.name.clone()),
            description: h.map_or(String::new(), |h| h.description.clone()),
            origin: h.map_or(Origin::Role, |h| h.origin),
            marginal_mi: mis[i],
            importance: importance[i],
            weight: model.weights[i],
        });
        per_feature_mi.insert(id.clone(), importance[i]);
    }
    let report = EvalReport {
        scene_description: corpus.scene_description.clone(),
        spearman_rho: rho,
        degenerate,
        mae: error,
        joint_mi: input.joint_mi,
        n_train: train.len(),
        n_test: test.len(),
        intercept: model.intercept,
        rank_deficient: model.rank_deficient,
        selected_features,
        per_feature_mi,
        metadata: input.metadata,
    };
    Ok((report, journal))
}

pub fn render_summary(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("Scenario: {}\n", report.scene_description));
    match report.spearman_rho {
        Some(r) => s.push_str(&format!("Spearman rho (test): {r:.4}\n")),
        None => s.push_str("Spearman rho (test): undefined (constant vector)\n"),
    }
    s.push_str(&format!("MAE (test, normalized scores): {:.4}\n", report.mae));
    s.push_str(&format!("Joint MI of selected set: {:.4} nats\n", report.joint_mi));
    s.push_str(&format!("Rows: {} train, {} test\n\n", report.n_train, report.n_test));
    s.push_str("Selected features (importance = marginal MI / max):\n");
    let mut order: Vec<&SelectedFeature> = report.selected_features.iter().collect();
    order.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.id.cmp(&b.id)));
    for f in order {
        let bar = "#".repeat((f.importance * 20.0).round() as usize);
        s.push_str(&format!(
            "  {:<28} {:>6.3} {:<20} MI {:.4}  w {:+.4}\n      {}\n",
            f.name, f.importance, bar, f.marginal_mi, f.weight, f.description
        ));
    }
    s.push_str("\nToken usage:\n");
    for (slot, u) in &report.metadata.token_usage.per_slot {
        s.push_str(&format!(
            "  {:<10} calls {:>6} (cached {:>6})  input {:>9}  output {:>8}\n",
            slot.as_str(),
            u.calls,
            u.cached_calls,
            u.input_tokens,
            u.output_tokens
        ));
    }
    s
}

/// Writes `report.json` and `summary.txt` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let summary = dir.join("summary.txt");
    std::fs::write(&summary, render_summary(report)).map_err(|e| Error::io(&summary, e))
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let json = dir.join("report.json");
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    Ok(serde_json::from_str(&text)?)
}
