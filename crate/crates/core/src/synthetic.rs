//! Planted-feature corpora and a scripted LLM that understands them.
//!
//! Each record is a bag of cue words. A cue's occurrence count (1 to 10) is
//! its latent level; the score is the sum of the planted cues' levels plus
//! Gaussian noise. The scripted backend proposes one feature per cue,
//! writes a counting prompt for it and, in the annotator slot, answers with
//! the count plus deterministic noise in [-0.5, 0.5).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::llm::{LlmRequest, MockBackend, Slot};

pub const SCENE: &str = "Synthetic product reviews whose helpfulness depends on a few specific recurring cue words.";

const PLANTED: [&str; 3] = ["amber", "lumen", "quartz"];
const NOISE: [&str; 7] = ["birch", "cobalt", "dune", "ember", "fjord", "garnet", "harbor"];
/// Present in every text but only ever proposed by reflection.
const REFLECTION: [&str; 2] = ["indigo", "juniper"];
const FILLER: [&str; 12] = [
    "the", "product", "arrived", "and", "it", "works", "well", "with", "some", "minor", "notes", "overall",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_records: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_records: 600,
            noise_sd: 1.5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub id: String,
    pub text: String,
    pub score: f64,
}

pub fn planted_cues() -> &'static [&'static str] {
    &PLANTED
}

pub fn noise_cues() -> &'static [&'static str] {
    &NOISE
}

pub fn reflection_cues() -> &'static [&'static str] {
    &REFLECTION
}

/// Feature name and description for a cue word.
pub fn cue_feature(word: &str) -> (String, String) {
    let mut cap = word.to_string();
    cap[..1].make_ascii_uppercase();
    (
        format!("{cap} mentions"),
        format!("Number of times the cue word {word} appears in the review text, counted as whole words"),
    )
}

/// Feature id the pipeline assigns to a cue's feature.
pub fn cue_feature_id(word: &str) -> String {
    format!("{word}-mentions")
}

pub fn generate(config: &SyntheticConfig) -> Vec<SyntheticRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sd).expect("finite noise sd");
    (0..config.n_records)
        .map(|i| {
            let mut tokens: Vec<&str> = Vec::new();
            let mut score = 0.0;
            for word in PLANTED.iter().chain(&NOISE).chain(&REFLECTION) {
                let level: usize = rng.random_range(1..=10);
                if PLANTED.contains(word) {
                    score += level as f64;
                }
                tokens.extend(std::iter::repeat_n(*word, level));
            }
            for _ in 0..20 {
                tokens.push(FILLER[rng.random_range(0..FILLER.len())]);
            }
            tokens.shuffle(&mut rng);
            score += noise.sample(&mut rng);
            SyntheticRecord {
                id: format!("r{i:04}"),
                text: tokens.join(" "),
                score: (score * 1000.0).round() / 1000.0,
            }
        })
        .collect()
}

/// JSONL corpus text (`id`, `text`, `score` per line).
pub fn to_jsonl(records: &[SyntheticRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = serde_json::json!({"id": r.id, "text": r.text, "score": r.score});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

fn count_after(prompt: &str, marker: &str) -> usize {
    prompt
        .find(marker)
        .map(|i| {
            prompt[i + marker.len()..]
                .chars()
                .take_while(char::is_ascii_digit)
                .collect::<String>()
        })
        .and_then(|s| s.parse().ok())
        .unwrap_or(1)
}

fn feature_lines(words: impl Iterator<Item = &'static str>, n: usize) -> String {
    words
        .take(n)
        .map(|w| {
            let (name, desc) = cue_feature(w);
            format!("{name}, {desc}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn ideation_cues() -> Vec<&'static str> {
    PLANTED.iter().chain(&NOISE).copied().collect()
}

fn cycle_from(start: usize) -> impl Iterator<Item = &'static str> {
    let cues = ideation_cues();
    (0..).map(move |i| cues[(start + i) % cues.len()])
}

fn cue_in(s: &str) -> Option<&'static str> {
    PLANTED
        .iter()
        .chain(&NOISE)
        .chain(&REFLECTION)
        .copied()
        .find(|w| s.split(|c: char| !c.is_ascii_alphanumeric()).any(|t| t == *w))
}

/// Deterministic annotation noise, uniform in [-0.5, 0.5).
fn jitter(text: &str, word: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes().chain(word.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

const TEXT_MARKER: &str = "The text to evaluate is: ";

fn annotate(req: &LlmRequest) -> String {
    let p = &req.prompt;
    let Some(at) = p.rfind(TEXT_MARKER) else {
        return "n/a".into();
    };
    let (head, text) = (&p[..at], &p[at + TEXT_MARKER.len()..]);
    let Some(word) = head
        .find("the cue word ")
        .and_then(|i| cue_in(head[i + "the cue word ".len()..].split_whitespace().next().unwrap_or("")))
    else {
        return "n/a".into();
    };
    let count = text.split(|c: char| !c.is_ascii_alphanumeric()).filter(|t| *t == word).count() as f64;
    format!("{:.2}", (count + jitter(text, word)).clamp(1.0, 10.0))
}

fn prompt_tool(req: &LlmRequest) -> String {
    let word = cue_in(&req.prompt).unwrap_or("amber");
    format!(
        "Count how many times the cue word {word} appears in the text below as a whole word. \
         Answer with that count as a score from 1 to 10 (use 10 for ten or more, 1 for one or none). \
         Respond with ONLY the numerical score. {TEXT_MARKER}[TEXT_TO_EVALUATE]."
    )
}

fn integrate(req: &LlmRequest) -> String {
    let p = &req.prompt;
    let start = p.find("Original Feature List:").map_or(0, |i| i + "Original Feature List:".len());
    let end = p.find("As a feature engineering expert").unwrap_or(p.len());
    let mut seen: Vec<&'static str> = Vec::new();
    for line in p[start..end].lines() {
        if let Some(w) = cue_in(line) {
            if !seen.contains(&w) {
                seen.push(w);
            }
        }
    }
    feature_lines(seen.clone().into_iter(), seen.len())
}

/// Scripted backend for the synthetic corpus. Every prompt family used by
/// the pipeline has a rule.
pub fn mock_backend() -> MockBackend {
    MockBackend::new()
        .on_slot(Slot::Annotator, "", annotate)
        .on("virtual evaluator roles", |r: &LlmRequest| {
            let n = count_after(&r.prompt, "Only output ");
            (1..=n)
                .map(|i| format!("Evaluator {i}, judges how often specific recurring cue words appear in reviews"))
                .collect::<Vec<_>>()
                .join("\n")
        })
        .on("fully embody", |r: &LlmRequest| {
            let n = count_after(&r.prompt, "Only output ");
            let role = count_after(&r.prompt, "Evaluator ");
            feature_lines(cycle_from((role.saturating_sub(1)) * n), n)
        })
        .on("contrastive analysis of the two", |r: &LlmRequest| {
            feature_lines(cycle_from(0), count_after(&r.prompt, "Only output "))
        })
        .on("identified as high-score under", |r: &LlmRequest| {
            feature_lines(cycle_from(0), count_after(&r.prompt, "Only output "))
        })
        .on("identified as low-score under", |r: &LlmRequest| {
            feature_lines(cycle_from(5), count_after(&r.prompt, "Only output "))
        })
        .on("Original Feature List", integrate)
        .on("best tool type to annotate", |_: &LlmRequest| "PROMPT")
        .on("create an precise and effective prompt template", prompt_tool)
        .on("An annotation prompt template for a text feature needs to be improved", prompt_tool)
        .on("You are reviewing an automatic annotation tool", |_: &LlmRequest| "SATISFACTORY")
        .on("completed a round of feature selection", |r: &LlmRequest| {
            let n = count_after(&r.prompt, "Only output ");
            let words = REFLECTION.iter().copied().chain(cycle_from(3));
            feature_lines(words, n)
        })
        .on("learn from the successful features identified in OTHER", |r: &LlmRequest| {
            feature_lines(cycle_from(0), count_after(&r.prompt, "Only output "))
        })
}
