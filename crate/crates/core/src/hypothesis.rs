//! Candidate feature generation: evaluator-role ideation, contrastive
//! analysis of high/low samples, and LLM-driven consolidation into the
//! candidate pool.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledText;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::journal::Journal;
use crate::llm::{Gateway, LlmRequest};
use crate::prompts::{PromptKind, PromptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Role,
    Positive,
    Negative,
    Contrastive,
    Reflection,
    CrossTask,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Origin::Role => "role",
            Origin::Positive => "positive",
            Origin::Negative => "negative",
            Origin::Contrastive => "contrastive",
            Origin::Reflection => "reflection",
            Origin::CrossTask => "cross_task",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHypothesis {
    pub id: String,
    pub name: String,
    pub description: String,
    pub origin: Origin,
    pub round: usize,
    /// Ids of the raw hypotheses this one was consolidated from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

impl FeatureHypothesis {
    pub fn new(name: &str, description: &str, origin: Origin, round: usize) -> Self {
        FeatureHypothesis {
            id: slugify(name),
            name: name.to_string(),
            description: description.to_string(),
            origin,
            round,
            sources: Vec::new(),
        }
    }
}

/// One raw LLM exchange kept for provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStep {
    pub step: String,
    pub raw_output: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub hypotheses: Vec<FeatureHypothesis>,
    pub history: Vec<GenerationStep>,
}

impl CandidatePool {
    /// Adds `h`, suffixing its id with `-2`, `-3`, ... on collision. Returns
    /// the id actually assigned.
    pub fn insert(&mut self, mut h: FeatureHypothesis) -> String {
        let taken: BTreeSet<&str> = self.hypotheses.iter().map(|x| x.id.as_str()).collect();
        h.id = unique_slug(&h.id, &taken);
        let id = h.id.clone();
        self.hypotheses.push(h);
        id
    }

    pub fn get(&self, id: &str) -> Option<&FeatureHypothesis> {
        self.hypotheses.iter().find(|h| h.id == id)
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// Raw LLM transcript plus run-log lines for one generation phase.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub journal: Journal,
    pub history: Vec<GenerationStep>,
}

impl Trace {
    pub fn append(&mut self, other: Trace) {
        self.journal.append(other.journal);
        self.history.extend(other.history);
    }
}

/// Lowercase, spaces to hyphens, everything outside `[a-z0-9-]` dropped.
pub fn slugify(name: &str) -> String {
    let mut out = String::new();
    for c in name.trim().chars().flat_map(char::to_lowercase) {
        if c.is_ascii_alphanumeric() {
            out.push(c);
        } else if (c.is_whitespace() || c == '-' || c == '_') && !out.ends_with('-') {
            out.push('-');
        }
    }
    let out = out.trim_matches('-').to_string();
    if out.is_empty() {
        "feature".to_string()
    } else {
        out
    }
}

fn unique_slug(base: &str, taken: &BTreeSet<&str>) -> String {
    if !taken.contains(base) {
        return base.to_string();
    }
    (2..)
        .map(|n| format!("{base}-{n}"))
        .find(|s| !taken.contains(s.as_str()))
        .expect("unbounded suffix search")
}

/// Makes ids unique within `items` in order, using the collision suffix rule.
pub fn uniquify(items: &mut [FeatureHypothesis]) {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for h in items.iter_mut() {
        let taken: BTreeSet<&str> = seen.iter().map(String::as_str).collect();
        let id = unique_slug(&h.id, &taken);
        seen.insert(id.clone());
        h.id = id;
    }
}

const MAX_NAME_WORDS: usize = 6;
const AUTO_NAME_WORDS: usize = 5;

/// Splits `"Name, description"` at the first comma. A line without a comma,
/// or whose pre-comma part is too long to be a name, becomes a description
/// with a name built from its first words.
pub fn parse_feature_line(line: &str) -> Option<(String, String)> {
    let line = strip_list_marker(line.trim());
    if line.is_empty() {
        return None;
    }
    if let Some((head, tail)) = line.split_once(',') {
        let head = head.trim().trim_matches(|c| c == '[' || c == ']' || c == '*').trim();
        let tail = tail.trim();
        let words = head.split_whitespace().count();
        if !head.is_empty() && !tail.is_empty() && words <= MAX_NAME_WORDS {
            return Some((head.to_string(), tail.to_string()));
        }
    }
    Some((auto_name(line), line.to_string()))
}

fn auto_name(description: &str) -> String {
    let words: Vec<&str> = description
        .split_whitespace()
        .take(AUTO_NAME_WORDS)
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        "Feature".to_string()
    } else {
        words.join(" ")
    }
}

fn strip_list_marker(line: &str) -> &str {
    let l = line.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &l[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    l
}

fn content_lines(raw: &str) -> Vec<&str> {
    raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub name: String,
    pub criteria: String,
}

impl Role {
    pub fn describe(&self) -> String {
        format!("{}, {}", self.name, self.criteria)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastiveCounts {
    pub positive: usize,
    pub negative: usize,
    pub contrastive: usize,
}

impl Default for ContrastiveCounts {
    fn default() -> Self {
        ContrastiveCounts {
            positive: 5,
            negative: 5,
            contrastive: 5,
        }
    }
}

pub const SAMPLE_CHAR_LIMIT: usize = 1000;
const SAMPLE_SEPARATOR: &str = "-----";

/// Sample texts laid out between separator lines, each cut to
/// [`SAMPLE_CHAR_LIMIT`] characters.
pub fn render_samples(samples: &[LabeledText]) -> String {
    let mut out = String::new();
    out.push_str(SAMPLE_SEPARATOR);
    out.push('\n');
    for s in samples {
        let text: String = s.text.chars().take(SAMPLE_CHAR_LIMIT).collect();
        out.push_str(&text);
        out.push('\n');
        out.push_str(SAMPLE_SEPARATOR);
        out.push('\n');
    }
    out.pop();
    out
}

/// Drives the generation prompts through the agent slot.
pub struct Generator<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
}

impl<'a> Generator<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptSet) -> Self {
        Generator { gateway, prompts }
    }

    /// Asks for exactly `expected` non-empty lines, reprompting once with a
    /// format reminder.
    pub(crate) fn ask_lines(
        &self,
        step: &str,
        prompt: String,
        expected: usize,
        trace: &mut Trace,
    ) -> Result<Vec<String>> {
        let first = self.gateway.complete(&LlmRequest::agent(prompt.clone()))?.text;
        trace.history.push(GenerationStep {
            step: step.to_string(),
            raw_output: first.clone(),
        });
        let lines = content_lines(&first);
        if lines.len() == expected {
            return Ok(lines.into_iter().map(String::from).collect());
        }
        trace.journal.warn(format!(
            "{step}: expected {expected} lines, got {}; reprompting",
            lines.len()
        ));
        let retry = format!("{prompt}{}", format_reminder(expected));
        let second = self.gateway.complete(&LlmRequest::agent(retry))?.text;
        trace.history.push(GenerationStep {
            step: format!("{step} (reprompt)"),
            raw_output: second.clone(),
        });
        let lines = content_lines(&second);
        if lines.len() == expected {
            return Ok(lines.into_iter().map(String::from).collect());
        }
        Err(Error::Format {
            what: step.to_string(),
            detail: format!("expected {expected} lines, got {}", lines.len()),
            raw: second,
        })
    }

    pub fn generate_roles(
        &self,
        scene: &str,
        role_count: usize,
        trace: &mut Trace,
    ) -> Result<Vec<Role>> {
        if role_count == 0 {
            return Err(Error::InvalidInput("role_count must be at least 1".into()));
        }
        let n = role_count.to_string();
        let prompt = self.prompts.render(
            PromptKind::GenerateRoles,
            &[("scene_description", scene), ("role_count", &n)],
        )?;
        let lines = self.ask_lines("generate roles", prompt, role_count, trace)?;
        Ok(lines
            .iter()
            .filter_map(|l| parse_feature_line(l))
            .map(|(name, criteria)| Role { name, criteria })
            .collect())
    }

    pub fn features_from_role(
        &self,
        scene: &str,
        role: &Role,
        per_role: usize,
        trace: &mut Trace,
    ) -> Result<Vec<FeatureHypothesis>> {
        if per_role == 0 {
            return Err(Error::InvalidInput("per_role must be at least 1".into()));
        }
        let n = per_role.to_string();
        let described = role.describe();
        let prompt = self.prompts.render(
            PromptKind::FeaturesFromRole,
            &[
                ("scene_description", scene),
                ("role_description", &described),
                ("feature_count_per_role", &n),
            ],
        )?;
        let step = format!("features from role {}", role.name);
        let lines = self.ask_lines(&step, prompt, per_role, trace)?;
        Ok(to_hypotheses(&lines, Origin::Role, 0))
    }

    /// Runs every role's prompt, concurrently when enabled. A failing role
    /// is logged and skipped.
    pub fn ideate(
        &self,
        scene: &str,
        roles: &[Role],
        per_role: usize,
        exec: Execution,
        trace: &mut Trace,
    ) -> Vec<FeatureHypothesis> {
        let results = exec::map_slice(roles, exec, |role| {
            let mut t = Trace::default();
            let r = self.features_from_role(scene, role, per_role, &mut t);
            (r, t)
        });
        let mut out = Vec::new();
        for (role, (r, t)) in roles.iter().zip(results) {
            trace.append(t);
            match r {
                Ok(mut hs) => out.append(&mut hs),
                Err(e) => trace.journal.warn(format!("role `{}` produced no features: {e}", role.name)),
            }
        }
        out
    }

    /// High-only, low-only and mixed prompts. Each prompt fails independently;
    /// a failure is logged and contributes nothing.
    pub fn contrastive_features(
        &self,
        scene: &str,
        high: &[LabeledText],
        low: &[LabeledText],
        counts: ContrastiveCounts,
        exec: Execution,
        trace: &mut Trace,
    ) -> Result<Vec<FeatureHypothesis>> {
        if high.is_empty() || low.is_empty() {
            return Err(Error::InvalidInput(
                "contrastive analysis needs both high and low samples".into(),
            ));
        }
        let high_block = render_samples(high);
        let low_block = render_samples(low);
        let jobs = [Origin::Positive, Origin::Negative, Origin::Contrastive];
        let results = exec::map_slice(&jobs, exec, |&origin| {
            let mut t = Trace::default();
            let r = self.contrastive_one(scene, origin, &high_block, &low_block, counts, &mut t);
            (r, t)
        });
        let mut out = Vec::new();
        for (origin, (r, t)) in jobs.iter().zip(results) {
            trace.append(t);
            match r {
                Ok(mut hs) => out.append(&mut hs),
                Err(e) => trace
                    .journal
                    .warn(format!("{origin} sample analysis produced no features: {e}")),
            }
        }
        Ok(out)
    }

    fn contrastive_one(
        &self,
        scene: &str,
        origin: Origin,
        high: &str,
        low: &str,
        counts: ContrastiveCounts,
        trace: &mut Trace,
    ) -> Result<Vec<FeatureHypothesis>> {
        let (kind, count, step) = match origin {
            Origin::Positive => (PromptKind::AnalyzePositive, counts.positive, "analyze positive samples"),
            Origin::Negative => (PromptKind::AnalyzeNegative, counts.negative, "analyze negative samples"),
            _ => (PromptKind::AnalyzeContrastive, counts.contrastive, "analyze contrastive samples"),
        };
        let n = count.to_string();
        let prompt = match origin {
            Origin::Positive => self.prompts.render(
                kind,
                &[("scene_description", scene), ("samples", high), ("feature_count_positive", &n)],
            )?,
            Origin::Negative => self.prompts.render(
                kind,
                &[("scene_description", scene), ("samples", low), ("feature_count_negative", &n)],
            )?,
            _ => self.prompts.render(
                kind,
                &[
                    ("scene_description", scene),
                    ("positive_samples", high),
                    ("negative_samples", low),
                    ("feature_count_contrastive", &n),
                ],
            )?,
        };
        let lines = self.ask_lines(step, prompt, count, trace)?;
        Ok(to_hypotheses(&lines, origin, 0))
    }

    /// Consolidates raw hypotheses through the integrate prompt. The pool
    /// never grows: surplus output lines are dropped with a warning.
    pub fn integrate(&self, raw: &[FeatureHypothesis], trace: &mut Trace) -> Result<CandidatePool> {
        if raw.is_empty() {
            return Err(Error::InvalidInput("nothing to integrate".into()));
        }
        let feature_list = raw
            .iter()
            .map(|h| format!("{}, {}", h.name, h.description))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = self
            .prompts
            .render(PromptKind::IntegrateFeatures, &[("feature_list", &feature_list)])?;
        let mut raw_out = self.gateway.complete(&LlmRequest::agent(prompt.clone()))?.text;
        trace.history.push(GenerationStep {
            step: "integrate".into(),
            raw_output: raw_out.clone(),
        });
        if content_lines(&raw_out).is_empty() {
            trace.journal.warn("integrate: empty output; reprompting");
            let retry = format!(
                "{prompt}\n\nFormat reminder: output one feature per line and at least one line."
            );
            raw_out = self.gateway.complete(&LlmRequest::agent(retry))?.text;
            trace.history.push(GenerationStep {
                step: "integrate (reprompt)".into(),
                raw_output: raw_out.clone(),
            });
            if content_lines(&raw_out).is_empty() {
                return Err(Error::Format {
                    what: "integrate".into(),
                    detail: "no features in output".into(),
                    raw: raw_out,
                });
            }
        }
        let mut lines = content_lines(&raw_out);
        if lines.len() > raw.len() {
            trace.journal.warn(format!(
                "integrate returned {} features for {} inputs; keeping the first {}",
                lines.len(),
                raw.len(),
                raw.len()
            ));
            lines.truncate(raw.len());
        }
        let mut pool = CandidatePool::default();
        for line in lines {
            let Some((name, description)) = parse_feature_line(line) else {
                continue;
            };
            let source = best_source(&description, &name, raw);
            let mut h = FeatureHypothesis::new(&name, &description, source.origin, 0);
            h.sources = vec![source.id.clone()];
            pool.insert(h);
        }
        Ok(pool)
    }
}

pub(crate) fn to_hypotheses(lines: &[String], origin: Origin, round: usize) -> Vec<FeatureHypothesis> {
    lines
        .iter()
        .filter_map(|l| parse_feature_line(l))
        .map(|(name, desc)| FeatureHypothesis::new(&name, &desc, origin, round))
        .collect()
}

pub(crate) fn format_reminder(expected: usize) -> String {
    format!(
        "\n\nFormat reminder: output exactly {expected} non-empty lines. Each line must be a name, a comma, then a description. No numbering, headings, or any other text."
    )
}

fn word_set(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Word-set Jaccard similarity, 0 when both sides are empty.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (word_set(a), word_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

fn best_source<'r>(description: &str, name: &str, raw: &'r [FeatureHypothesis]) -> &'r FeatureHypothesis {
    let probe = format!("{name} {description}");
    let mut best = &raw[0];
    let mut best_score = f64::NEG_INFINITY;
    for h in raw {
        let s = jaccard(&probe, &format!("{} {}", h.name, h.description));
        if s > best_score {
            best = h;
            best_score = s;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;

    fn lines(n: usize, prefix: &str) -> String {
        (0..n)
            .map(|i| format!("{prefix} {i}, measures aspect number {i} of the text"))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    #[test]
    fn first_comma_split() {
        assert_eq!(
            parse_feature_line("Critical Shopper, focuses on verifiable detail").unwrap(),
            ("Critical Shopper".into(), "focuses on verifiable detail".into())
        );
        assert_eq!(
            parse_feature_line("Detail Specificity, mentions sizes, fit and fabric").unwrap(),
            ("Detail Specificity".into(), "mentions sizes, fit and fabric".into())
        );
        let (name, desc) = parse_feature_line("Measures how concrete the advice is").unwrap();
        assert_eq!(name, "Measures how concrete the advice");
        assert_eq!(desc, "Measures how concrete the advice is");
        let long = "The degree to which the review gives specific numbers about the product, such as size";
        assert_eq!(parse_feature_line(long).unwrap().1, long);
        assert_eq!(parse_feature_line("2. Tone, is polite").unwrap().0, "Tone");
        assert!(parse_feature_line("   ").is_none());
    }

    #[test]
    fn slug_rules() {
        assert_eq!(slugify("Detail Specificity"), "detail-specificity");
        assert_eq!(slugify("  Use of  \"Numbers\" (%) "), "use-of-numbers");
        assert_eq!(slugify("!!!"), "feature");
        let mut pool = CandidatePool::default();
        let h = FeatureHypothesis::new("Tone", "d", Origin::Role, 0);
        assert_eq!(pool.insert(h.clone()), "tone");
        assert_eq!(pool.insert(h.clone()), "tone-2");
        assert_eq!(pool.insert(h), "tone-3");
    }

    #[test]
    fn roles_parse_five() {
        let gw = Gateway::mock(MockBackend::new().on("virtual evaluator roles", |_| lines(5, "Role")));
        let prompts = PromptSet::default();
        let g = Generator::new(&gw, &prompts);
        let mut t = Trace::default();
        let roles = g.generate_roles("restaurant reviews", 5, &mut t).unwrap();
        assert_eq!(roles.len(), 5);
        assert_eq!(roles[0].name, "Role 0");
        assert_eq!(t.history.len(), 1);
    }

    #[test]
    fn wrong_count_twice_is_format_error_with_raw() {
        let gw = Gateway::mock(MockBackend::new().on("virtual evaluator roles", |_| lines(4, "Role")));
        let prompts = PromptSet::default();
        let g = Generator::new(&gw, &prompts);
        let mut t = Trace::default();
        match g.generate_roles("s", 5, &mut t) {
            Err(Error::Format { raw, .. }) => assert!(raw.contains("Role 3")),
            other => panic!("expected format error, got {other:?}"),
        }
        assert_eq!(t.history.len(), 2);
    }

    #[test]
    fn reprompt_recovers() {
        let bad = lines(3, "Role");
        let good = lines(5, "Role");
        let gw = Gateway::mock(
            MockBackend::new().on_sequence("virtual evaluator roles", vec![&bad, &good]),
        );
        let prompts = PromptSet::default();
        let g = Generator::new(&gw, &prompts);
        let mut t = Trace::default();
        assert_eq!(g.generate_roles("s", 5, &mut t).unwrap().len(), 5);
        assert!(t.journal.has_warning("reprompting"));
    }

    #[test]
    fn role_features_keep_duplicates() {
        let gw = Gateway::mock(MockBackend::new().on("fully embody", |_| {
            "Detail Specificity, mentions sizes fit and fabric\nDetail Specificity, mentions sizes fit and fabric\nTone, polite"
        }));
        let prompts = PromptSet::default();
        let g = Generator::new(&gw, &prompts);
        let role = Role { name: "Shopper".into(), criteria: "cares about fit".into() };
        let mut t = Trace::default();
        let hs = g.features_from_role("s", &role, 3, &mut t).unwrap();
        assert_eq!(hs.len(), 3);
        assert!(hs.iter().all(|h| h.origin == Origin::Role));
        assert_eq!(hs[0].description, hs[1].description);
    }

    #[test]
    fn contrastive_union_and_partial_failure() {
        let ok = MockBackend::new()
            .on("identified as high-score under", |_| lines(5, "Pos"))
            .on("identified as low-score under", |_| lines(5, "Neg"))
            .on("contrastive analysis of the two", |_| lines(5, "Con"));
        let gw = Gateway::mock(ok);
        let prompts = PromptSet::default();
        let g = Generator::new(&gw, &prompts);
        let sample = |id: &str, text: &str| LabeledText {
            id: id.into(),
            text: text.into(),
            raw_score: 0.0,
            norm_score: 0.0,
        };
        let high = vec![sample("h", "great\nmulti-line")];
        let low = vec![sample("l", "bad")];
        let mut t = Trace::default();
        let all = g
            .contrastive_features("s", &high, &low, ContrastiveCounts::default(), Execution::Parallel, &mut t)
            .unwrap();
        assert_eq!(all.len(), 15);
        let origins: BTreeSet<Origin> = all.iter().map(|h| h.origin).collect();
        assert_eq!(origins.len(), 3);

        let partial = MockBackend::new()
            .on("identified as high-score under", |_| lines(5, "Pos"))
            .on("identified as low-score under", |_| "only one line")
            .on("contrastive analysis of the two", |_| lines(5, "Con"));
        let gw = Gateway::mock(partial);
        let g = Generator::new(&gw, &prompts);
        let mut t = Trace::default();
        let some = g
            .contrastive_features("s", &high, &low, ContrastiveCounts::default(), Execution::Sequential, &mut t)
            .unwrap();
        assert_eq!(some.len(), 10);
        assert!(t.journal.has_warning("negative sample analysis"));
        assert!(g
            .contrastive_features("s", &[], &low, ContrastiveCounts::default(), Execution::Sequential, &mut t)
            .is_err());
    }

    #[test]
    fn samples_render_between_separators() {
        let s = LabeledText {
            id: "a".into(),
            text: "line one\nline two".into(),
            raw_score: 0.0,
            norm_score: 0.0,
        };
        assert_eq!(render_samples(&[s]), "-----\nline one\nline two\n-----");
        let long = LabeledText {
            id: "b".into(),
            text: "é".repeat(1500),
            raw_score: 0.0,
            norm_score: 0.0,
        };
        let r = render_samples(&[long]);
        assert_eq!(r.chars().filter(|c| *c == 'é').count(), SAMPLE_CHAR_LIMIT);
    }

    #[test]
    fn integrate_merges_and_never_grows() {
        let raw = vec![
            FeatureHypothesis::new("Tone", "is the tone polite", Origin::Role, 0),
            FeatureHypothesis::new("Tone", "is the tone polite", Origin::Positive, 0),
            FeatureHypothesis::new("Length", "how long the review is", Origin::Negative, 0),
        ];
        let gw = Gateway::mock(MockBackend::new().on("Original Feature List", |_| {
            "Tone, is the tone polite\nLength, how long the review is"
        }));
        let prompts = PromptSet::default();
        let g = Generator::new(&gw, &prompts);
        let mut t = Trace::default();
        let pool = g.integrate(&raw, &mut t).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.hypotheses[1].origin, Origin::Negative);

        let one = vec![raw[2].clone()];
        let gw = Gateway::mock(MockBackend::new().on("Original Feature List", |_| {
            "Length, how long\nExtra, invented\nMore, invented"
        }));
        let g = Generator::new(&gw, &prompts);
        let pool = g.integrate(&one, &mut t).unwrap();
        assert_eq!(pool.len(), 1);

        let gw = Gateway::mock(MockBackend::new().on("Original Feature List", |_| "\n \n"));
        let g = Generator::new(&gw, &prompts);
        assert!(matches!(g.integrate(&one, &mut t), Err(Error::Format { .. })));
    }
}
