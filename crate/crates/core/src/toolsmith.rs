//! Turns feature hypotheses into annotation tools: picks PROMPT or CODE,
//! generates the tool, then checks it on a few samples and refines it.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotator::{parse_score, render_prompt_tool};
use crate::dataset::LabeledText;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::hypothesis::{FeatureHypothesis, SAMPLE_CHAR_LIMIT};
use crate::journal::Journal;
use crate::llm::{Gateway, LlmRequest};
use crate::prompts::{PromptKind, PromptSet};
use crate::runner::{CodeRunner, TextItem};

pub const TEXT_PLACEHOLDER: &str = "[TEXT_TO_EVALUATE]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolKind {
    Prompt,
    Code,
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolKind::Prompt => "prompt",
            ToolKind::Code => "code",
        })
    }
}

impl ToolKind {
    pub fn file_suffix(self) -> &'static str {
        match self {
            ToolKind::Prompt => "prompt.txt",
            ToolKind::Code => "tool.py",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub sample_id: String,
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One check of a tool version against the validation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRound {
    pub refine_count: u32,
    pub outputs: Vec<SampleOutput>,
    /// `satisfactory`, `refine`, `execution_failed` or `unchecked`.
    pub verdict: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub critique: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTool {
    pub feature_id: String,
    pub kind: ToolKind,
    pub body: String,
    pub refine_count: u32,
    pub finalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
    #[serde(default)]
    pub validation_log: Vec<ValidationRound>,
}

impl AnnotationTool {
    fn draft(feature_id: &str, kind: ToolKind, body: String) -> Self {
        AnnotationTool {
            feature_id: feature_id.to_string(),
            kind,
            body,
            refine_count: 0,
            finalized: false,
            rejected: None,
            validation_log: Vec::new(),
        }
    }

    pub fn is_usable(&self) -> bool {
        self.finalized && self.rejected.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolsmithConfig {
    pub max_refines: u32,
    pub validation_samples: usize,
    /// When false, tools are finalized after one execution check without
    /// asking the validator.
    pub refine: bool,
    /// When false every feature gets a PROMPT tool and the tool-type
    /// question is never asked.
    pub code_tools: bool,
    pub function_name: String,
}

impl Default for ToolsmithConfig {
    fn default() -> Self {
        ToolsmithConfig {
            max_refines: 3,
            validation_samples: 5,
            refine: true,
            code_tools: true,
            function_name: "annotate".into(),
        }
    }
}

pub struct Toolsmith<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub runner: Option<&'a dyn CodeRunner>,
    pub config: ToolsmithConfig,
}

/// Whether a generated template can be used as a PROMPT tool.
pub fn is_well_formed_template(body: &str) -> bool {
    let t = body.trim_end();
    t.matches(TEXT_PLACEHOLDER).count() == 1
        && (t.ends_with(TEXT_PLACEHOLDER) || t.ends_with(&format!("{TEXT_PLACEHOLDER}.")))
}

/// Removes a surrounding markdown code fence, if any.
pub fn strip_code_fence(src: &str) -> String {
    let t = src.trim();
    if !t.starts_with("```") {
        return t.to_string();
    }
    let mut lines: Vec<&str> = t.lines().skip(1).collect();
    if lines.last().is_some_and(|l| l.trim_start().starts_with("```")) {
        lines.pop();
    }
    lines.join("\n").trim_end().to_string()
}

enum Verdict {
    Satisfactory,
    Refine(String),
}

fn parse_verdict(raw: &str, journal: &mut Journal, feature_id: &str) -> Verdict {
    let mut lines = raw.lines().map(str::trim).filter(|l| !l.is_empty());
    let first = lines.next().unwrap_or("");
    let word: String = first
        .chars()
        .filter(|c| c.is_ascii_alphabetic() || c.is_whitespace())
        .collect::<String>()
        .trim()
        .to_ascii_uppercase();
    if word.starts_with("SATISFACTORY") {
        return Verdict::Satisfactory;
    }
    if word.starts_with("REFINE") {
        let rest: Vec<&str> = lines.collect();
        let critique = if rest.is_empty() {
            first.to_string()
        } else {
            rest.join("\n")
        };
        return Verdict::Refine(critique);
    }
    journal.warn(format!(
        "{feature_id}: unrecognised validator verdict {first:?}; accepting tool"
    ));
    Verdict::Satisfactory
}

fn truncate_chars(s: &str, limit: usize) -> &str {
    match s.char_indices().nth(limit) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn format_outputs(samples: &[LabeledText], outputs: &[SampleOutput]) -> String {
    let mut out = String::new();
    for (i, (s, o)) in samples.iter().zip(outputs).enumerate() {
        let value = match (o.value, &o.error) {
            (Some(v), _) => format!("{v}"),
            (None, Some(e)) => format!("error: {e}"),
            (None, None) => "no value".to_string(),
        };
        out.push_str(&format!(
            "Sample {} (id {}):\nText: {}\nOutput: {}\n\n",
            i + 1,
            s.id,
            truncate_chars(&s.text, SAMPLE_CHAR_LIMIT),
            value
        ));
    }
    out.trim_end().to_string()
}

impl<'a> Toolsmith<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptSet, config: ToolsmithConfig) -> Self {
        Toolsmith {
            gateway,
            prompts,
            runner: None,
            config,
        }
    }

    pub fn with_runner(mut self, runner: &'a dyn CodeRunner) -> Self {
        self.runner = Some(runner);
        self
    }

    fn agent(&self, prompt: String) -> Result<String> {
        Ok(self.gateway.complete(&LlmRequest::agent(prompt))?.text)
    }

    pub fn decide_tool_type(&self, h: &FeatureHypothesis, journal: &mut Journal) -> Result<ToolKind> {
        let prompt = self
            .prompts
            .render(PromptKind::DecideToolType, &[("feature_description", &h.description)])?;
        let parse = |s: &str| match s.trim().trim_matches(|c: char| !c.is_ascii_alphabetic()).to_ascii_uppercase().as_str() {
            "CODE" => Some(ToolKind::Code),
            "PROMPT" => Some(ToolKind::Prompt),
            _ => None,
        };
        let first = self.agent(prompt.clone())?;
        if let Some(k) = parse(&first) {
            return Ok(k);
        }
        journal.warn(format!("{}: tool type answer {:?} unclear; reprompting", h.id, first.trim()));
        let second = self.agent(format!(
            "{prompt}\n\nAnswer with exactly one word: CODE or PROMPT."
        ))?;
        if let Some(k) = parse(&second) {
            return Ok(k);
        }
        journal.warn(format!(
            "{}: tool type answer {:?} unclear again; using PROMPT",
            h.id,
            second.trim()
        ));
        Ok(ToolKind::Prompt)
    }

    pub fn build_prompt_tool(&self, h: &FeatureHypothesis, journal: &mut Journal) -> Result<AnnotationTool> {
        let prompt = self
            .prompts
            .render(PromptKind::GeneratePromptTool, &[("feature_description", &h.description)])?;
        let first = self.agent(prompt.clone())?;
        if is_well_formed_template(&first) {
            return Ok(AnnotationTool::draft(&h.id, ToolKind::Prompt, first.trim().to_string()));
        }
        journal.warn(format!("{}: generated template is malformed; regenerating", h.id));
        let second = self.agent(format!(
            "{prompt}\n\nThe placeholder {TEXT_PLACEHOLDER} must appear exactly once, at the very end."
        ))?;
        if is_well_formed_template(&second) {
            return Ok(AnnotationTool::draft(&h.id, ToolKind::Prompt, second.trim().to_string()));
        }
        Err(Error::Format {
            what: format!("prompt tool for feature `{}`", h.id),
            detail: format!("template must contain {TEXT_PLACEHOLDER} once, at the end"),
            raw: second,
        })
    }

    fn runner(&self) -> Result<&'a dyn CodeRunner> {
        self.runner
            .ok_or_else(|| Error::Runner("no code runner configured".into()))
    }

    fn probe(&self, tool_id: &str, source: &str) -> Result<std::result::Result<(), String>> {
        let outcome = self.runner()?.probe(tool_id, source)?;
        if outcome.is_ok() {
            Ok(Ok(()))
        } else {
            Ok(Err(format!(
                "{:?}: {}",
                outcome.status,
                outcome.message.unwrap_or_default()
            )))
        }
    }

    fn refine_code(&self, h: &FeatureHypothesis, body: &str, critique: &str) -> Result<String> {
        let prompt = self.prompts.render(
            PromptKind::RefineCodeTool,
            &[
                ("feature_name", &h.name),
                ("feature_description", &h.description),
                ("tool_body", body),
                ("critique", critique),
                ("function_name", &self.config.function_name),
            ],
        )?;
        Ok(strip_code_fence(&self.agent(prompt)?))
    }

    /// Generates a CODE tool and repairs it until the runner accepts it.
    /// Falls back to a PROMPT tool once the repair budget is spent.
    pub fn build_code_tool(&self, h: &FeatureHypothesis, journal: &mut Journal) -> Result<AnnotationTool> {
        let prompt = self.prompts.render(
            PromptKind::GenerateCodeTool,
            &[
                ("function_name", &self.config.function_name),
                ("feature_name", &h.name),
                ("feature_description", &h.description),
            ],
        )?;
        let mut body = strip_code_fence(&self.agent(prompt)?);
        let mut tool = AnnotationTool::draft(&h.id, ToolKind::Code, body.clone());
        loop {
            match self.probe(&h.id, &body)? {
                Ok(()) => {
                    tool.body = body;
                    return Ok(tool);
                }
                Err(problem) => {
                    if tool.refine_count >= self.config.max_refines {
                        journal.warn(format!(
                            "{}: code tool still failing after {} repairs ({problem}); falling back to a prompt tool",
                            h.id, tool.refine_count
                        ));
                        return self.build_prompt_tool(h, journal);
                    }
                    journal.info(format!("{}: code tool failed probe ({problem}); repairing", h.id));
                    body = self.refine_code(h, &body, &problem)?;
                    tool.refine_count += 1;
                }
            }
        }
    }

    /// Sample outputs plus whether the run hit a hard failure (an LLM or
    /// runner error, as opposed to an unparseable reply).
    fn execute(&self, tool: &AnnotationTool, samples: &[LabeledText]) -> Result<(Vec<SampleOutput>, bool)> {
        match tool.kind {
            ToolKind::Prompt => {
                let mut hard = false;
                let outputs = samples
                .iter()
                .map(|s| {
                    let prompt = render_prompt_tool(&tool.body, &s.text);
                    match self.gateway.complete(&LlmRequest::annotator(prompt)) {
                        Ok(r) => {
                            let value = parse_score(&r.text).filter(|v| (1.0..=10.0).contains(v));
                            Ok(SampleOutput {
                                sample_id: s.id.clone(),
                                value,
                                error: value.is_none().then(|| format!("unparseable reply {:?}", r.text)),
                            })
                        }
                        Err(e) if e.is_replay_miss() => Err(e),
                        Err(e) => {
                            hard = true;
                            Ok(SampleOutput {
                                sample_id: s.id.clone(),
                                value: None,
                                error: Some(e.to_string()),
                            })
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()?;
                Ok((outputs, hard))
            }
            ToolKind::Code => {
                let runner = self.runner()?;
                let failed = |msg: String| -> Vec<SampleOutput> {
                    samples
                        .iter()
                        .map(|s| SampleOutput {
                            sample_id: s.id.clone(),
                            value: None,
                            error: Some(msg.clone()),
                        })
                        .collect()
                };
                if let Err(problem) = self.probe(&tool.feature_id, &tool.body)? {
                    return Ok((failed(problem), true));
                }
                let items: Vec<TextItem> = samples
                    .iter()
                    .map(|s| TextItem {
                        id: s.id.clone(),
                        text: s.text.clone(),
                    })
                    .collect();
                match runner.annotate(&tool.feature_id, &items) {
                    Ok(values) => Ok((
                        samples
                            .iter()
                            .zip(values)
                            .map(|(s, value)| SampleOutput {
                                sample_id: s.id.clone(),
                                value,
                                error: value.is_none().then(|| "tool returned no value".to_string()),
                            })
                            .collect(),
                        false,
                    )),
                    Err(e) => Ok((failed(e.to_string()), true)),
                }
            }
        }
    }

    fn regenerate(&self, h: &FeatureHypothesis, tool: &AnnotationTool, critique: &str, journal: &mut Journal) -> Result<String> {
        match tool.kind {
            ToolKind::Code => self.refine_code(h, &tool.body, critique),
            ToolKind::Prompt => {
                let prompt = self.prompts.render(
                    PromptKind::RefinePromptTool,
                    &[
                        ("feature_description", &h.description),
                        ("tool_body", &tool.body),
                        ("critique", critique),
                    ],
                )?;
                for _ in 0..2 {
                    let body = self.agent(prompt.clone())?;
                    if is_well_formed_template(&body) {
                        return Ok(body.trim().to_string());
                    }
                }
                journal.warn(format!("{}: refined template is malformed; keeping previous version", h.id));
                Ok(tool.body.clone())
            }
        }
    }

    fn validate(&self, h: &FeatureHypothesis, tool: &AnnotationTool, samples: &[LabeledText], outputs: &[SampleOutput], journal: &mut Journal) -> Result<Verdict> {
        let prompt = self.prompts.render(
            PromptKind::ValidateTool,
            &[
                ("feature_name", &h.name),
                ("feature_description", &h.description),
                ("tool_kind", &tool.kind.to_string().to_ascii_uppercase()),
                ("tool_body", &tool.body),
                ("sample_outputs", &format_outputs(samples, outputs)),
            ],
        )?;
        let raw = self.agent(prompt)?;
        Ok(parse_verdict(&raw, journal, &h.id))
    }

    /// Runs the tool on the samples, asks the validator for a verdict and
    /// rewrites the tool until it is accepted or the refine budget runs out.
    pub fn validate_and_refine(
        &self,
        mut tool: AnnotationTool,
        h: &FeatureHypothesis,
        samples: &[LabeledText],
        journal: &mut Journal,
    ) -> Result<AnnotationTool> {
        let samples = &samples[..samples.len().min(self.config.validation_samples)];
        loop {
            let (outputs, hard_failure) = self.execute(&tool, samples)?;
            let broken = hard_failure || outputs.iter().all(|o| o.value.is_none());
            if broken {
                let errors: Vec<String> = outputs
                    .iter()
                    .filter_map(|o| o.error.as_ref().map(|e| format!("{}: {e}", o.sample_id)))
                    .collect();
                let critique = format!("The tool failed to produce values:\n{}", errors.join("\n"));
                tool.validation_log.push(ValidationRound {
                    refine_count: tool.refine_count,
                    outputs,
                    verdict: "execution_failed".into(),
                    critique: critique.clone(),
                });
                if tool.refine_count >= self.config.max_refines {
                    let reason = format!("tool failed on every validation attempt ({} refines)", tool.refine_count);
                    journal.warn(format!("{}: rejected: {reason}", h.id));
                    tool.rejected = Some(reason);
                    return Ok(tool);
                }
                tool.body = self.regenerate(h, &tool, &critique, journal)?;
                tool.refine_count += 1;
                continue;
            }
            if !self.config.refine || tool.refine_count >= self.config.max_refines {
                tool.validation_log.push(ValidationRound {
                    refine_count: tool.refine_count,
                    outputs,
                    verdict: "unchecked".into(),
                    critique: String::new(),
                });
                tool.finalized = true;
                return Ok(tool);
            }
            match self.validate(h, &tool, samples, &outputs, journal)? {
                Verdict::Satisfactory => {
                    tool.validation_log.push(ValidationRound {
                        refine_count: tool.refine_count,
                        outputs,
                        verdict: "satisfactory".into(),
                        critique: String::new(),
                    });
                    tool.finalized = true;
                    return Ok(tool);
                }
                Verdict::Refine(critique) => {
                    tool.validation_log.push(ValidationRound {
                        refine_count: tool.refine_count,
                        outputs,
                        verdict: "refine".into(),
                        critique: critique.clone(),
                    });
                    tool.body = self.regenerate(h, &tool, &critique, journal)?;
                    tool.refine_count += 1;
                }
            }
        }
    }

    /// Full path for one hypothesis: choose a type, build, validate.
    pub fn build_tool(&self, h: &FeatureHypothesis, samples: &[LabeledText], journal: &mut Journal) -> Result<AnnotationTool> {
        let kind = if self.config.code_tools {
            self.decide_tool_type(h, journal)?
        } else {
            ToolKind::Prompt
        };
        let draft = match kind {
            ToolKind::Code if self.runner.is_none() => {
                journal.warn(format!("{}: CODE tool requested but no runner is available; using a prompt tool", h.id));
                self.build_prompt_tool(h, journal)?
            }
            ToolKind::Code => self.build_code_tool(h, journal)?,
            ToolKind::Prompt => self.build_prompt_tool(h, journal)?,
        };
        let tool = self.validate_and_refine(draft, h, samples, journal)?;
        journal.info(format!(
            "{}: {} tool, {} refines, {}",
            h.id,
            tool.kind,
            tool.refine_count,
            if tool.is_usable() { "finalized" } else { "rejected" }
        ));
        Ok(tool)
    }

    /// Builds tools for every hypothesis. Hypotheses whose tool cannot be
    /// produced are reported and skipped; replay misses abort.
    pub fn build_all(&self, hypotheses: &[FeatureHypothesis], samples: &[LabeledText], exec: Execution) -> Result<(Vec<AnnotationTool>, Journal)> {
        let results = exec::map_slice(hypotheses, exec, |h| {
            let mut journal = Journal::new();
            let r = self.build_tool(h, samples, &mut journal);
            (r, journal)
        });
        let mut tools = Vec::new();
        let mut journal = Journal::new();
        for (h, (r, j)) in hypotheses.iter().zip(results) {
            journal.append(j);
            match r {
                Ok(t) => tools.push(t),
                Err(e) if e.is_replay_miss() => return Err(e),
                Err(e) => journal.warn(format!("{}: no tool: {e}", h.id)),
            }
        }
        Ok((tools, journal))
    }
}

pub fn tool_path(dir: &Path, tool: &AnnotationTool) -> PathBuf {
    dir.join(format!("{}.{}", tool.feature_id, tool.kind.file_suffix()))
}

/// Writes `<id>.prompt.txt` or `<id>.tool.py` plus `<id>.validation.json`.
pub fn write_tool(dir: &Path, tool: &AnnotationTool) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let status = match (&tool.rejected, tool.finalized) {
        (Some(_), _) => "rejected",
        (None, true) => "finalized",
        (None, false) => "draft",
    };
    let mut text = format!(
        "# feature_id: {}\n# kind: {}\n# refine_count: {}\n# status: {}\n",
        tool.feature_id, tool.kind, tool.refine_count, status
    );
    if let Some(reason) = &tool.rejected {
        text.push_str(&format!("# rejected: {}\n", reason.replace('\n', " ")));
    }
    text.push_str("---\n");
    text.push_str(&tool.body);
    text.push('\n');
    let path = tool_path(dir, tool);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let log_path = dir.join(format!("{}.validation.json", tool.feature_id));
    let log = serde_json::to_string_pretty(&tool.validation_log)?;
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    Ok(path)
}

/// Reads a tool file written by [`write_tool`]. The validation log is
/// loaded when present.
pub fn read_tool(path: &Path) -> Result<AnnotationTool> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        what: format!("tool file {}", path.display()),
        detail: detail.to_string(),
        raw: String::new(),
    };
    let (header, body) = text.split_once("\n---\n").ok_or_else(|| bad("missing `---` separator"))?;
    let field = |name: &str| -> Result<String> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(&format!("# {name}: ")))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("missing `{name}` header")))
    };
    let feature_id = field("feature_id")?;
    let kind = match field("kind")?.as_str() {
        "prompt" => ToolKind::Prompt,
        "code" => ToolKind::Code,
        other => return Err(bad(&format!("unknown kind `{other}`"))),
    };
    let refine_count = field("refine_count")?.parse().map_err(|_| bad("bad refine_count"))?;
    let status = field("status")?;
    let rejected = match status.as_str() {
        "rejected" => Some(field("rejected").unwrap_or_else(|_| "rejected".into())),
        _ => None,
    };
    let log_path = path.with_file_name(format!("{feature_id}.validation.json"));
    let validation_log = match std::fs::read_to_string(&log_path) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Vec::new(),
    };
    Ok(AnnotationTool {
        feature_id,
        kind,
        body: body.strip_suffix('\n').unwrap_or(body).to_string(),
        refine_count,
        finalized: status == "finalized",
        rejected,
        validation_log,
    })
}

/// Loads every tool file in `dir`, sorted by feature id.
pub fn read_tools(dir: &Path) -> Result<Vec<AnnotationTool>> {
    let mut tools = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".prompt.txt") || name.ends_with(".tool.py") {
            tools.push(read_tool(&path)?);
        }
    }
    tools.sort_by(|a, b| a.feature_id.cmp(&b.feature_id));
    Ok(tools)
}
