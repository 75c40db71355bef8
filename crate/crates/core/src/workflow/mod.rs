//! Workflow definitions: the rule grammar, validation against a machine
//! catalog, and compilation into a per-sample step DAG.
//!
//! A workflow file is a sequence of unindented top-level directives
//! (`key : value`) and `rule <name>:` blocks whose body lines are indented
//! `key: value` pairs:
//!
//! ```text
//! image : "registry.example/fastq2bam:1.0"
//! referencefile : "refs"
//! testsamplesize : 3
//!
//! rule align:
//!     input: ["{sampleID}.fastq", "{reference}/hg38.fa"]
//!     output: ["{sampleID}.bam"]
//!     params: [threads=8]
//!     resources: [machine="n2-standard-8", disk_gb=200, disk_class="balanced"]
//!     shell: "bwa mem -t {params.threads} {input} > {output}"
//! ```

mod compile;
mod parse;
pub mod template;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::DiskClass;

pub use compile::{compile_task, is_external, CompileError, Edge, StepSpec, TaskPlan};
pub use parse::{parse_workflow, parse_workflow_named, ParseError, KEYWORDS};
pub use validate::{validate_workflow, Diagnostic};

/// Name given to workflows parsed without an explicit name.
pub const DEFAULT_WORKFLOW_NAME: &str = "workflow";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub name: String,
    pub rules: Vec<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configfile: Option<String>,
    /// Raw `config` directive text: `key=value` pairs separated by `,` or `;`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referencefile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub testsamplesize: Option<u32>,
    /// Values loaded from `configfile`. Not part of the source text.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub file_config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    #[serde(default)]
    pub input: Vec<String>,
    #[serde(default)]
    pub output: Vec<String>,
    #[serde(default)]
    pub params: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<ResourceRequest>,
    pub command: RuleCommand,
    /// Stored as written; has no effect on execution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metawrapper: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleCommand {
    Shell(String),
    Script(String),
}

/// Per-step resource request. Unset fields fall back to engine defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disk_gb: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disk_class: Option<DiskClass>,
}

/// Smallest disk a step may request, in GB.
pub const MIN_DISK_GB: u32 = 10;

impl ResourceRequest {
    pub fn new(machine: impl Into<String>, disk_gb: u32, disk_class: DiskClass) -> Self {
        Self {
            machine: Some(machine.into()),
            disk_gb: Some(disk_gb),
            disk_class: Some(disk_class),
        }
    }

    /// Fields set here win; unset fields are taken from `defaults`.
    pub fn or_defaults(&self, defaults: &ResourceRequest) -> ResourceRequest {
        ResourceRequest {
            machine: self.machine.clone().or_else(|| defaults.machine.clone()),
            disk_gb: self.disk_gb.or(defaults.disk_gb),
            disk_class: self.disk_class.or(defaults.disk_class),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.machine.is_none() && self.disk_gb.is_none() && self.disk_class.is_none()
    }
}

impl Workflow {
    pub fn rule(&self, name: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.name == name)
    }

    /// Key-value pairs from the inline `config` directive.
    pub fn inline_config(&self) -> BTreeMap<String, String> {
        self.config
            .as_deref()
            .map(|c| parse::parse_config_pairs(c).unwrap_or_default())
            .unwrap_or_default()
    }

    /// Inline `config` merged over values loaded from `configfile`.
    pub fn config_values(&self) -> BTreeMap<String, String> {
        let mut merged = self.file_config.clone();
        merged.extend(self.inline_config());
        merged
    }

    /// Load `configfile` contents into `file_config`.
    pub fn set_file_config(&mut self, text: &str) -> Result<(), String> {
        self.file_config = parse_config_file(text)?;
        Ok(())
    }

    /// Render the workflow back into source text. Parsing the result yields
    /// an equal workflow (except `file_config`, which is not source).
    pub fn to_source(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let mut directive = |key: &str, value: &Option<String>| {
            if let Some(v) = value {
                let _ = writeln!(out, "{key} : {}", quote(v));
            }
        };
        directive("workdir", &self.workdir);
        directive("configfile", &self.configfile);
        directive("config", &self.config);
        directive("image", &self.image);
        directive("referencefile", &self.referencefile);
        if let Some(n) = self.testsamplesize {
            let _ = writeln!(out, "testsamplesize : {n}");
        }
        for rule in &self.rules {
            let _ = writeln!(out, "\nrule {}:", rule.name);
            if !rule.input.is_empty() {
                let _ = writeln!(out, "    input: {}", quote_list(&rule.input));
            }
            if !rule.output.is_empty() {
                let _ = writeln!(out, "    output: {}", quote_list(&rule.output));
            }
            if !rule.params.is_empty() {
                let items: Vec<String> = rule
                    .params
                    .iter()
                    .map(|(k, v)| format!("{k}={}", quote(v)))
                    .collect();
                let _ = writeln!(out, "    params: [{}]", items.join(", "));
            }
            if let Some(res) = rule.resources.as_ref().filter(|r| !r.is_empty()) {
                let mut items = Vec::new();
                if let Some(m) = &res.machine {
                    items.push(format!("machine={}", quote(m)));
                }
                if let Some(d) = res.disk_gb {
                    items.push(format!("disk_gb={d}"));
                }
                if let Some(c) = res.disk_class {
                    items.push(format!("disk_class=\"{c}\""));
                }
                let _ = writeln!(out, "    resources: [{}]", items.join(", "));
            }
            match &rule.command {
                RuleCommand::Shell(s) => {
                    let _ = writeln!(out, "    shell: {}", quote(s));
                }
                RuleCommand::Script(s) => {
                    let _ = writeln!(out, "    script: {}", quote(s));
                }
            }
            if let Some(m) = &rule.metawrapper {
                let _ = writeln!(out, "    metawrapper: {}", quote(m));
            }
        }
        out
    }
}

/// Parse a `configfile`: a flat JSON object, or `key=value` lines with
/// `#` comments.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    if text.trim_start().starts_with('{') {
        let obj: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        return obj
            .into_iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => Ok((k, s)),
                serde_json::Value::Number(_) | serde_json::Value::Bool(_) => Ok((k, v.to_string())),
                _ => Err(format!("config key '{k}' must map to a string, number or boolean")),
            })
            .collect();
    }
    let body: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .filter(|l| !l.trim().is_empty())
        .collect();
    parse::parse_config_pairs(&body.join("\n"))
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn quote_list(items: &[String]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| quote(s)).collect();
    format!("[{}]", quoted.join(", "))
}
