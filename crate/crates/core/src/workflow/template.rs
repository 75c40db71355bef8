//! `{placeholder}` templates used in paths, params and shell commands.
//!
//! Literal braces are written doubled (`{{`, `}}`).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A placeholder name as it appears between braces.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Placeholder {
    SampleId,
    Input,
    Output,
    Workdir,
    Reference,
    Param(String),
    Config(String),
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "sampleID" => Some(Self::SampleId),
            "input" => Some(Self::Input),
            "output" => Some(Self::Output),
            "workdir" => Some(Self::Workdir),
            "reference" => Some(Self::Reference),
            _ => {
                if let Some(key) = name.strip_prefix("params.") {
                    is_ident(key).then(|| Self::Param(key.to_string()))
                } else if let Some(key) = name.strip_prefix("config.") {
                    is_config_key(key).then(|| Self::Config(key.to_string()))
                } else {
                    None
                }
            }
        }
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SampleId => f.write_str("{sampleID}"),
            Self::Input => f.write_str("{input}"),
            Self::Output => f.write_str("{output}"),
            Self::Workdir => f.write_str("{workdir}"),
            Self::Reference => f.write_str("{reference}"),
            Self::Param(k) => write!(f, "{{params.{k}}}"),
            Self::Config(k) => write!(f, "{{config.{k}}}"),
        }
    }
}

pub(crate) fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_config_key(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unclosed '{{' at offset {0}")]
    Unclosed(usize),
    #[error("unmatched '}}' at offset {0}")]
    Unmatched(usize),
    #[error("unknown placeholder '{{{name}}}'")]
    Unknown { name: String, offset: usize },
    #[error("placeholder {0} has no value here")]
    Unbound(Placeholder),
}

impl TemplateError {
    /// Character offset inside the template text, when known.
    pub fn offset(&self) -> Option<usize> {
        match self {
            Self::Unclosed(o) | Self::Unmatched(o) => Some(*o),
            Self::Unknown { offset, .. } => Some(*offset),
            Self::Unbound(_) => None,
        }
    }
}

/// Split a template into literal runs and placeholders.
pub fn segments(text: &str) -> Result<Vec<Segment>, TemplateError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '{' if chars.get(i + 1) == Some(&'{') => {
                lit.push('{');
                i += 2;
            }
            '}' if chars.get(i + 1) == Some(&'}') => {
                lit.push('}');
                i += 2;
            }
            '}' => return Err(TemplateError::Unmatched(i)),
            '{' => {
                let start = i;
                let close = chars[i + 1..]
                    .iter()
                    .position(|&c| c == '}' || c == '{')
                    .map(|p| p + i + 1)
                    .filter(|&p| chars[p] == '}')
                    .ok_or(TemplateError::Unclosed(start))?;
                let name: String = chars[start + 1..close].iter().collect();
                let slot = Placeholder::parse(&name)
                    .ok_or(TemplateError::Unknown { name, offset: start })?;
                if !lit.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                out.push(Segment::Slot(slot));
                i = close + 1;
            }
            c => {
                lit.push(c);
                i += 1;
            }
        }
    }
    if !lit.is_empty() {
        out.push(Segment::Literal(lit));
    }
    Ok(out)
}

/// Placeholders referenced by a template, in order of appearance.
pub fn placeholders(text: &str) -> Result<Vec<Placeholder>, TemplateError> {
    Ok(segments(text)?
        .into_iter()
        .filter_map(|s| match s {
            Segment::Slot(p) => Some(p),
            Segment::Literal(_) => None,
        })
        .collect())
}

/// Values available while rendering a template.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a> {
    pub sample_id: Option<&'a str>,
    pub input: Option<String>,
    pub output: Option<String>,
    pub workdir: Option<&'a str>,
    pub reference: Option<&'a str>,
    pub params: Option<&'a BTreeMap<String, String>>,
    pub config: Option<&'a BTreeMap<String, String>>,
}

impl Bindings<'_> {
    fn lookup(&self, slot: &Placeholder) -> Option<String> {
        match slot {
            Placeholder::SampleId => self.sample_id.map(str::to_string),
            Placeholder::Input => self.input.clone(),
            Placeholder::Output => self.output.clone(),
            Placeholder::Workdir => self.workdir.map(str::to_string),
            Placeholder::Reference => self.reference.map(str::to_string),
            Placeholder::Param(k) => self.params.and_then(|p| p.get(k)).cloned(),
            Placeholder::Config(k) => self.config.and_then(|c| c.get(k)).cloned(),
        }
    }
}

pub fn render(text: &str, bindings: &Bindings<'_>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    for seg in segments(text)? {
        match seg {
            Segment::Literal(l) => out.push_str(&l),
            Segment::Slot(p) => {
                let value = bindings.lookup(&p).ok_or(TemplateError::Unbound(p))?;
                out.push_str(&value);
            }
        }
    }
    Ok(out)
}
