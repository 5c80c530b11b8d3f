use std::fmt;

/// Ordered run-log lines. Parallel work writes into its own journal and the
/// caller merges them in item order, so the persisted log does not depend on
/// thread scheduling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Journal {
    lines: Vec<String>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn info(&mut self, msg: impl fmt::Display) {
        let line = format!("INFO {msg}");
        log::info!("{msg}");
        self.lines.push(line);
    }

    pub fn warn(&mut self, msg: impl fmt::Display) {
        let line = format!("WARN {msg}");
        log::warn!("{msg}");
        self.lines.push(line);
    }

    pub fn append(&mut self, other: Journal) {
        self.lines.extend(other.lines);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.lines
            .iter()
            .filter_map(|l| l.strip_prefix("WARN "))
    }

    pub fn has_warning(&self, needle: &str) -> bool {
        self.warnings().any(|w| w.contains(needle))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}
