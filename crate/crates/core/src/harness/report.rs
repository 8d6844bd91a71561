//! Line-oriented run reports: `key<TAB>value` rows grouped into sections.
//!
//! The format is deliberately diff-friendly; identical configurations must
//! serialize byte-identically, so every float is printed with a fixed
//! precision and iteration order follows the configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One named group of key/value rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSection {
    pub name: String,
    pub rows: Vec<(String, String)>,
}

impl ReportSection {
    pub fn new(name: impl Into<String>) -> Self {
        ReportSection { name: name.into(), rows: Vec::new() }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.rows.push((key.into(), value.into()));
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.push(key, format_f64(value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// A full report: configuration echo plus per-run and aggregate sections.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunReport {
    pub sections: Vec<ReportSection>,
}

/// Fixed-precision float formatting shared by all report writers.
pub fn format_f64(value: f64) -> String {
    format!("{value:.6}")
}

/// Space-separated token list.
pub fn format_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

impl RunReport {
    pub fn section(&mut self, name: impl Into<String>) -> &mut ReportSection {
        self.sections.push(ReportSection::new(name));
        self.sections.last_mut().unwrap()
    }

    pub fn find(&self, name: &str) -> Option<&ReportSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Serialize to the line-oriented text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for section in &self.sections {
            let _ = writeln!(out, "section\t{}", section.name);
            for (key, value) in &section.rows {
                let _ = writeln!(out, "{key}\t{value}");
            }
        }
        out
    }

    /// Parse the text format back, reporting line-located errors.
    pub fn from_text(text: &str) -> Result<RunReport> {
        let mut report = RunReport::default();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('\t').ok_or_else(|| {
                Error::parse_at_line(idx + 1, format!("expected key<TAB>value, got {line:?}"))
            })?;
            if key == "section" {
                report.sections.push(ReportSection::new(value));
            } else {
                let section = report.sections.last_mut().ok_or_else(|| {
                    Error::parse_at_line(idx + 1, "row before any section header")
                })?;
                section.push(key, value);
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunReport> {
        let text = std::fs::read_to_string(path)?;
        RunReport::from_text(&text)
    }

    /// Human-readable rendering for the `report` subcommand.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        for section in &self.sections {
            let _ = writeln!(out, "== {} ==", section.name);
            let width = section.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (key, value) in &section.rows {
                let _ = writeln!(out, "  {key:<width$}  {value}");
            }
            let _ = writeln!(out);
        }
        out
    }
}
