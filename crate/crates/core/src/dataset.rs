//! Labeled text corpora: loading, score normalization, train/test split and
//! the high/low quantile samples used for contrastive prompting.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// Guesses the format from a file extension, defaulting to JSON Lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for InputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledText {
    pub id: String,
    pub text: String,
    pub raw_score: f64,
    /// Min-max normalized score in `[0, 1]`.
    pub norm_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<LabeledText>,
    pub scene_description: String,
    pub score_min: f64,
    pub score_max: f64,
    pub split: Vec<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            train_ratio: 0.8,
            seed: 42,
        }
    }
}

#[derive(Deserialize)]
struct JsonRow {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: String,
    score: f64,
}

#[derive(Deserialize)]
struct CsvRow {
    #[serde(default)]
    id: Option<String>,
    text: String,
    score: String,
}

/// Loads a corpus from JSON Lines (`id`, `text`, `score`) or CSV with header
/// `id,text,score`. A missing id becomes the zero-based row index.
pub fn load_corpus(
    path: &Path,
    format: InputFormat,
    scene: &str,
    split: SplitOptions,
) -> Result<Corpus> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = match format {
        InputFormat::Jsonl => parse_jsonl(path, &raw)?,
        InputFormat::Csv => parse_csv(path, &raw)?,
    };
    if rows.is_empty() {
        return Err(Error::Empty(format!("corpus file {} has no records", path.display())));
    }
    Corpus::from_rows(rows, scene, split)
}

type Row = (String, String, f64, usize);

fn parse_jsonl(path: &Path, raw: &str) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(line).map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let id = match row.id {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            Some(other) => {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("id must be a string, got {other}"),
                })
            }
        };
        let index = rows.len();
        rows.push((id.unwrap_or_else(|| index.to_string()), row.text, row.score, line_no));
    }
    Ok(rows)
}

fn parse_csv(path: &Path, raw: &str) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(raw.as_bytes());
    let mut rows = Vec::new();
    for result in reader.deserialize::<CsvRow>() {
        let line_no = |e: &csv::Error| e.position().map(|p| p.line() as usize).unwrap_or(0);
        let row = result.map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            line: line_no(&e),
            message: e.to_string(),
        })?;
        // header is line 1
        let line = rows.len() + 2;
        let score: f64 = row.score.trim().parse().map_err(|_| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: format!("score `{}` is not a number", row.score),
        })?;
        let index = rows.len();
        let id = row.id.filter(|s| !s.is_empty()).unwrap_or_else(|| index.to_string());
        rows.push((id, row.text, score, line));
    }
    Ok(rows)
}

impl Corpus {
    fn from_rows(rows: Vec<Row>, scene: &str, split: SplitOptions) -> Result<Corpus> {
        let mut seen = HashSet::new();
        for (id, text, score, line) in &rows {
            let fail = |message: String| Error::MalformedRow {
                path: Default::default(),
                line: *line,
                message,
            };
            if text.trim().is_empty() {
                return Err(fail("empty text".into()));
            }
            if !score.is_finite() {
                return Err(fail(format!("non-finite score {score}")));
            }
            if id.contains(['\t', '\n', '\r']) {
                return Err(fail("id contains a tab or newline".into()));
            }
            if !seen.insert(id.clone()) {
                return Err(fail(format!("duplicate id `{id}`")));
            }
        }
        let items: Vec<(String, String, f64)> =
            rows.into_iter().map(|(id, text, score, _)| (id, text, score)).collect();
        Corpus::from_scored(items, scene, split)
    }

    /// Builds a corpus from in-memory `(id, text, raw score)` triples.
    pub fn from_scored(
        items: Vec<(String, String, f64)>,
        scene: &str,
        split: SplitOptions,
    ) -> Result<Corpus> {
        if items.is_empty() {
            return Err(Error::Empty("corpus has no records".into()));
        }
        if !(split.train_ratio > 0.0 && split.train_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "train ratio must be in (0, 1], got {}",
                split.train_ratio
            )));
        }
        let mut ids = HashSet::new();
        if let Some((id, _, _)) = items.iter().find(|(id, _, _)| !ids.insert(id.clone())) {
            return Err(Error::InvalidInput(format!("duplicate id `{id}`")));
        }
        if let Some((id, _, s)) = items.iter().find(|(_, _, s)| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("record `{id}` has non-finite score {s}")));
        }
        let score_min = items.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
        let score_max = items.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
        let range = score_max - score_min;
        if range == 0.0 {
            log::warn!("all scores equal {score_min}; normalized scores set to 0.0");
        }
        let records: Vec<LabeledText> = items
            .into_iter()
            .map(|(id, text, raw_score)| LabeledText {
                norm_score: if range > 0.0 {
                    ((raw_score - score_min) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                },
                id,
                text,
                raw_score,
            })
            .collect();
        let split = assign_split(records.len(), split);
        Ok(Corpus {
            records,
            scene_description: scene.to_string(),
            score_min,
            score_max,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every record has the same raw score.
    pub fn has_degenerate_scores(&self) -> bool {
        self.score_max == self.score_min
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    fn indices(&self, which: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn norm_scores(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&i| self.records[i].norm_score).collect()
    }

    /// Content digest over ids, texts, scores and split tags.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (r, s) in self.records.iter().zip(&self.split) {
            h.update(r.id.as_bytes());
            h.update([0]);
            h.update(r.text.as_bytes());
            h.update([0]);
            h.update(r.raw_score.to_bits().to_le_bytes());
            h.update([matches!(s, Split::Train) as u8]);
        }
        hex::encode(h.finalize())
    }
}

fn assign_split(n: usize, opts: SplitOptions) -> Vec<Split> {
    let mut n_train = (opts.train_ratio * n as f64).round() as usize;
    n_train = n_train.clamp(1, n);
    if n_train == n && n >= 2 && opts.train_ratio < 1.0 {
        n_train = n - 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    order.shuffle(&mut rng);
    let mut split = vec![Split::Test; n];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    split
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveOptions {
    pub n_high: usize,
    pub n_low: usize,
    /// Fraction of the train split forming each of the high and low buckets.
    pub quantile: f64,
    pub seed: u64,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        ContrastiveOptions {
            n_high: 10,
            n_low: 10,
            quantile: 0.2,
            seed: 7,
        }
    }
}

/// Draws `n_high` train records uniformly from the top quantile by
/// normalized score and `n_low` from the bottom quantile.
pub fn sample_contrastive(
    corpus: &Corpus,
    opts: ContrastiveOptions,
) -> Result<(Vec<LabeledText>, Vec<LabeledText>)> {
    let mut train = corpus.train_indices();
    if opts.n_high + opts.n_low > train.len() {
        return Err(Error::InvalidInput(format!(
            "requested {} + {} samples but the train split has {} records",
            opts.n_high,
            opts.n_low,
            train.len()
        )));
    }
    train.sort_by(|&a, &b| {
        let (ra, rb) = (&corpus.records[a], &corpus.records[b]);
        rb.norm_score
            .total_cmp(&ra.norm_score)
            .then_with(|| ra.id.cmp(&rb.id))
    });
    let bucket = ((opts.quantile * train.len() as f64).round() as usize)
        .clamp(1, train.len());
    for (want, label) in [(opts.n_high, "high"), (opts.n_low, "low")] {
        if bucket < want {
            return Err(Error::InvalidInput(format!(
                "{label}-quantile bucket size {bucket} < {want} requested samples"
            )));
        }
    }
    let top = &train[..bucket];
    let bottom = &train[train.len() - bucket..];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pick = |pool: &[usize], n: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledText> {
        pool.choose_multiple(rng, n)
            .map(|&i| corpus.records[i].clone())
            .collect()
    };
    let high = pick(top, opts.n_high, &mut rng);
    let low = pick(bottom, opts.n_low, &mut rng);
    Ok((high, low))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn scored(n: usize) -> Corpus {
        let items = (0..n)
            .map(|i| (format!("r{i:03}"), format!("text number {i}"), i as f64))
            .collect();
        Corpus::from_scored(items, "scene", SplitOptions { train_ratio: 1.0, seed: 1 }).unwrap()
    }

    #[test]
    fn minmax_normalization() {
        let f = write_tmp(
            "{\"id\":\"a\",\"text\":\"x\",\"score\":0}\n{\"id\":\"b\",\"text\":\"y\",\"score\":5}\n{\"id\":\"c\",\"text\":\"z\",\"score\":10}\n",
            ".jsonl",
        );
        let c = load_corpus(f.path(), InputFormat::Jsonl, "s", SplitOptions::default()).unwrap();
        let norms: Vec<f64> = c.records.iter().map(|r| r.norm_score).collect();
        assert_eq!(norms, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn equal_scores_normalize_to_zero() {
        let f = write_tmp("id,text,score\na,x,7\nb,y,7\nc,z,7\n", ".csv");
        let c = load_corpus(f.path(), InputFormat::Csv, "s", SplitOptions::default()).unwrap();
        assert!(c.records.iter().all(|r| r.norm_score == 0.0));
        assert!(c.has_degenerate_scores());
    }

    #[test]
    fn seeded_split_is_repeatable() {
        let f = write_tmp("id,text,score\na,x,1\nb,y,2\nc,z,3\n", ".csv");
        let opts = SplitOptions { train_ratio: 0.8, seed: 42 };
        let a = load_corpus(f.path(), InputFormat::Csv, "s", opts).unwrap();
        let b = load_corpus(f.path(), InputFormat::Csv, "s", opts).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(a, b);
        assert_eq!(a.train_indices().len() + a.test_indices().len(), 3);
        assert!(!a.test_indices().is_empty());
    }

    #[test]
    fn missing_id_uses_row_index() {
        let f = write_tmp("{\"text\":\"x\",\"score\":1}\n\n{\"text\":\"y\",\"score\":2}\n", ".jsonl");
        let c = load_corpus(f.path(), InputFormat::Jsonl, "s", SplitOptions::default()).unwrap();
        assert_eq!(c.records[0].id, "0");
        assert_eq!(c.records[1].id, "1");
    }

    #[test]
    fn malformed_row_names_line() {
        let f = write_tmp("{\"text\":\"x\",\"score\":1}\n{\"text\":\"y\"}\n", ".jsonl");
        let err = load_corpus(f.path(), InputFormat::Jsonl, "s", SplitOptions::default())
            .unwrap_err();
        match err {
            Error::MalformedRow { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let f = write_tmp("id,text,score\na,x,1\nb,y,oops\n", ".csv");
        let err = load_corpus(f.path(), InputFormat::Csv, "s", SplitOptions::default()).unwrap_err();
        match err {
            Error::MalformedRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_and_nonfinite_rejected() {
        let f = write_tmp("", ".jsonl");
        assert!(matches!(
            load_corpus(f.path(), InputFormat::Jsonl, "s", SplitOptions::default()),
            Err(Error::Empty(_))
        ));
        let f = write_tmp("id,text,score\na,x,NaN\n", ".csv");
        assert!(load_corpus(f.path(), InputFormat::Csv, "s", SplitOptions::default()).is_err());
        let f = write_tmp("{\"text\":\"   \",\"score\":1}\n", ".jsonl");
        assert!(load_corpus(f.path(), InputFormat::Jsonl, "s", SplitOptions::default()).is_err());
    }

    #[test]
    fn contrastive_buckets_are_disjoint() {
        let c = scored(100);
        let opts = ContrastiveOptions { n_high: 5, n_low: 5, quantile: 0.2, seed: 1 };
        let (high, low) = sample_contrastive(&c, opts).unwrap();
        assert_eq!(high.len(), 5);
        assert_eq!(low.len(), 5);
        let min_high = high.iter().map(|r| r.norm_score).fold(f64::INFINITY, f64::min);
        let max_low = low.iter().map(|r| r.norm_score).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_high > max_low);
        let (h2, l2) = sample_contrastive(&c, opts).unwrap();
        let ids = |v: &[LabeledText]| v.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&high), ids(&h2));
        assert_eq!(ids(&low), ids(&l2));
    }

    #[test]
    fn contrastive_bucket_too_small() {
        let c = scored(100);
        let opts = ContrastiveOptions { n_high: 30, n_low: 5, quantile: 0.2, seed: 1 };
        let err = sample_contrastive(&c, opts).unwrap_err().to_string();
        assert!(err.contains("bucket size 20 < 30"), "{err}");
    }

    #[test]
    fn contrastive_uses_train_only() {
        let items = (0..50)
            .map(|i| (format!("r{i}"), format!("t{i}"), i as f64))
            .collect();
        let c = Corpus::from_scored(items, "s", SplitOptions { train_ratio: 0.8, seed: 3 }).unwrap();
        let test_ids: HashSet<String> =
            c.test_indices().iter().map(|&i| c.records[i].id.clone()).collect();
        let opts = ContrastiveOptions { n_high: 4, n_low: 4, quantile: 0.2, seed: 9 };
        let (h, l) = sample_contrastive(&c, opts).unwrap();
        assert!(h.iter().chain(&l).all(|r| !test_ids.contains(&r.id)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalization_preserves_order(scores in proptest::collection::vec(-1e6f64..1e6, 2..60)) {
                let items = scores.iter().enumerate()
                    .map(|(i, s)| (format!("r{i}"), "t".to_string(), *s)).collect();
                let c = Corpus::from_scored(items, "s", SplitOptions::default()).unwrap();
                for a in &c.records {
                    prop_assert!((0.0..=1.0).contains(&a.norm_score));
                    for b in &c.records {
                        if a.raw_score < b.raw_score {
                            prop_assert!(a.norm_score <= b.norm_score);
                        }
                    }
                }
            }
        }
    }
}
