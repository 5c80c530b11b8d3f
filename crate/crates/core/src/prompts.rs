//! Prompt templates with named `{placeholder}` slots.
//!
//! Defaults are compiled in from `prompts/*.txt`; a directory containing
//! files with the same names overrides them one by one.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptKind {
    GenerateRoles,
    FeaturesFromRole,
    AnalyzePositive,
    AnalyzeNegative,
    AnalyzeContrastive,
    IntegrateFeatures,
    DecideToolType,
    GenerateCodeTool,
    GeneratePromptTool,
    ReflectFeatures,
    CrossScene,
    ValidateTool,
    RefinePromptTool,
    RefineCodeTool,
}

impl PromptKind {
    pub const ALL: [PromptKind; 14] = [
        PromptKind::GenerateRoles,
        PromptKind::FeaturesFromRole,
        PromptKind::AnalyzePositive,
        PromptKind::AnalyzeNegative,
        PromptKind::AnalyzeContrastive,
        PromptKind::IntegrateFeatures,
        PromptKind::DecideToolType,
        PromptKind::GenerateCodeTool,
        PromptKind::GeneratePromptTool,
        PromptKind::ReflectFeatures,
        PromptKind::CrossScene,
        PromptKind::ValidateTool,
        PromptKind::RefinePromptTool,
        PromptKind::RefineCodeTool,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::GenerateRoles => "generate_roles.txt",
            PromptKind::FeaturesFromRole => "features_from_role.txt",
            PromptKind::AnalyzePositive => "analyze_positive.txt",
            PromptKind::AnalyzeNegative => "analyze_negative.txt",
            PromptKind::AnalyzeContrastive => "analyze_contrastive.txt",
            PromptKind::IntegrateFeatures => "integrate_features.txt",
            PromptKind::DecideToolType => "decide_tool_type.txt",
            PromptKind::GenerateCodeTool => "generate_code_tool.txt",
            PromptKind::GeneratePromptTool => "generate_prompt_tool.txt",
            PromptKind::ReflectFeatures => "reflect_features.txt",
            PromptKind::CrossScene => "cross_scene.txt",
            PromptKind::ValidateTool => "validate_tool.txt",
            PromptKind::RefinePromptTool => "refine_prompt_tool.txt",
            PromptKind::RefineCodeTool => "refine_code_tool.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::GenerateRoles => include_str!("../prompts/generate_roles.txt"),
            PromptKind::FeaturesFromRole => include_str!("../prompts/features_from_role.txt"),
            PromptKind::AnalyzePositive => include_str!("../prompts/analyze_positive.txt"),
            PromptKind::AnalyzeNegative => include_str!("../prompts/analyze_negative.txt"),
            PromptKind::AnalyzeContrastive => include_str!("../prompts/analyze_contrastive.txt"),
            PromptKind::IntegrateFeatures => include_str!("../prompts/integrate_features.txt"),
            PromptKind::DecideToolType => include_str!("../prompts/decide_tool_type.txt"),
            PromptKind::GenerateCodeTool => include_str!("../prompts/generate_code_tool.txt"),
            PromptKind::GeneratePromptTool => include_str!("../prompts/generate_prompt_tool.txt"),
            PromptKind::ReflectFeatures => include_str!("../prompts/reflect_features.txt"),
            PromptKind::CrossScene => include_str!("../prompts/cross_scene.txt"),
            PromptKind::ValidateTool => include_str!("../prompts/validate_tool.txt"),
            PromptKind::RefinePromptTool => include_str!("../prompts/refine_prompt_tool.txt"),
            PromptKind::RefineCodeTool => include_str!("../prompts/refine_code_tool.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

impl Template {
    pub fn new(text: impl Into<String>) -> Self {
        Template { text: text.into() }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Placeholder names in order of first appearance, deduplicated.
    pub fn placeholders(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (_, name) in scan(&self.text) {
            if seen.insert(name) {
                out.push(name.to_string());
            }
        }
        out
    }

    /// Substitutes every `{name}`. Each template placeholder must be supplied
    /// and every supplied value must be used. Values are inserted verbatim
    /// and never rescanned.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String> {
        let wanted: BTreeSet<String> = self.placeholders().into_iter().collect();
        let given: BTreeSet<String> = vars.iter().map(|(k, _)| k.to_string()).collect();
        if let Some(missing) = wanted.difference(&given).next() {
            return Err(Error::InvalidInput(format!("no value for placeholder {{{missing}}}")));
        }
        if let Some(extra) = given.difference(&wanted).next() {
            return Err(Error::InvalidInput(format!("template has no placeholder {{{extra}}}")));
        }
        let mut out = String::with_capacity(self.text.len());
        let mut last = 0;
        for (start, name) in scan(&self.text) {
            out.push_str(&self.text[last..start]);
            let value = vars.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).unwrap_or("");
            out.push_str(value);
            last = start + name.len() + 2;
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

/// `(byte offset of '{', name)` for every `{[a-z_]+}` in `text`.
fn scan(text: &str) -> Vec<(usize, &str)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, &text[i + 1..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: Vec<(PromptKind, Template)>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: PromptKind::ALL
                .iter()
                .map(|&k| (k, Template::new(k.builtin())))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Built-in templates, with any file in `dir` named like a template
    /// replacing the default.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut set = PromptSet::default();
        for (kind, tpl) in set.templates.iter_mut() {
            let path = dir.join(kind.file_name());
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                *tpl = Template::new(text);
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: PromptKind) -> &Template {
        &self
            .templates
            .iter()
            .find(|(k, _)| *k == kind)
            .expect("every kind has a template")
            .1
    }

    pub fn render(&self, kind: PromptKind, vars: &[(&str, &str)]) -> Result<String> {
        self.get(kind).render(vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_all() {
        let t = Template::new("a {x} b {y} {x}");
        assert_eq!(t.render(&[("x", "1"), ("y", "{x}")]).unwrap(), "a 1 b {x} 1");
        assert!(t.render(&[("x", "1")]).is_err());
        assert!(t.render(&[("x", "1"), ("y", "2"), ("z", "3")]).is_err());
    }

    #[test]
    fn square_brackets_are_not_placeholders() {
        let t = Template::new("[TEXT_TO_EVALUATE] {Upper} {a1} {ok}");
        assert_eq!(t.placeholders(), vec!["ok"]);
    }

    #[test]
    fn builtin_placeholders() {
        let set = PromptSet::default();
        let names = |k| set.get(k).placeholders();
        assert_eq!(names(PromptKind::GenerateRoles), vec!["scene_description", "role_count"]);
        assert_eq!(
            names(PromptKind::AnalyzeContrastive),
            vec![
                "scene_description",
                "positive_samples",
                "negative_samples",
                "feature_count_contrastive"
            ]
        );
        assert_eq!(names(PromptKind::IntegrateFeatures), vec!["feature_list"]);
        assert_eq!(names(PromptKind::DecideToolType), vec!["feature_description"]);
        assert_eq!(
            names(PromptKind::CrossScene),
            vec!["current_scene_description", "other_scenes_info", "feature_count"]
        );
        assert!(set
            .get(PromptKind::GeneratePromptTool)
            .text()
            .contains("The text to evaluate is: [TEXT_TO_EVALUATE]."));
    }

    #[test]
    fn overrides_replace_single_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("decide_tool_type.txt"), "custom {feature_description}").unwrap();
        let set = PromptSet::with_overrides(dir.path()).unwrap();
        assert_eq!(
            set.render(PromptKind::DecideToolType, &[("feature_description", "d")]).unwrap(),
            "custom d"
        );
        assert_eq!(
            set.get(PromptKind::GenerateRoles),
            PromptSet::default().get(PromptKind::GenerateRoles)
        );
    }
}
