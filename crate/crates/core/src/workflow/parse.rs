use std::collections::{BTreeMap, HashSet};

use crate::catalog::DiskClass;

use super::template::{self, is_ident};
use super::{ResourceRequest, Rule, RuleCommand, Workflow, DEFAULT_WORKFLOW_NAME, MIN_DISK_GB};

/// Every keyword the grammar recognizes.
pub const KEYWORDS: [&str; 14] = [
    "rule",
    "workdir",
    "configfile",
    "input",
    "output",
    "params",
    "resources",
    "shell",
    "script",
    "metawrapper",
    "config",
    "image",
    "referencefile",
    "testsamplesize",
];

const TOP_LEVEL: [&str; 6] = [
    "workdir",
    "configfile",
    "config",
    "image",
    "referencefile",
    "testsamplesize",
];

const RESOURCE_KEYS: [&str; 3] = ["machine", "disk_gb", "disk_class"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("{line}:{column}: syntax error: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{line}: rule '{name}' is defined more than once")]
    DuplicateRule { name: String, line: usize },
    #[error("{line}:{column}: unknown keyword '{keyword}'")]
    UnknownKeyword {
        keyword: String,
        line: usize,
        column: usize,
    },
    #[error("{line}: rule '{rule}' has neither 'shell' nor 'script'")]
    MissingCommand { rule: String, line: usize },
    #[error("{line}: rule '{rule}' has both 'shell' and 'script'")]
    BothCommands { rule: String, line: usize },
}

impl ParseError {
    pub fn line(&self) -> usize {
        match self {
            Self::Syntax { line, .. }
            | Self::DuplicateRule { line, .. }
            | Self::UnknownKeyword { line, .. }
            | Self::MissingCommand { line, .. }
            | Self::BothCommands { line, .. } => *line,
        }
    }
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

pub fn parse_workflow(text: &str) -> Result<Workflow, ParseError> {
    parse_workflow_named(DEFAULT_WORKFLOW_NAME, text)
}

pub fn parse_workflow_named(name: &str, text: &str) -> Result<Workflow, ParseError> {
    Parser::new(text).run(name)
}

/// Parse `key=value` pairs separated by `,` or `;`.
pub(crate) fn parse_config_pairs(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for part in text.split([',', ';', '\n']) {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("config entry '{part}' is not key=value"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("config entry '{part}' has an empty key"));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(format!("config key '{k}' repeated"));
        }
    }
    Ok(out)
}

/// A character with its 1-based source position.
#[derive(Clone, Copy)]
struct Pc {
    ch: char,
    line: usize,
    col: usize,
}

/// Cursor over the characters of one (possibly multi-line) value.
struct Value {
    chars: Vec<Pc>,
    pos: usize,
    end_line: usize,
    end_col: usize,
}

enum Item {
    Str(String),
    Int(u64),
}

impl Value {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|p| p.ch)
    }

    fn here(&self) -> (usize, usize) {
        self.chars
            .get(self.pos)
            .map(|p| (p.line, p.col))
            .unwrap_or((self.end_line, self.end_col))
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        let (l, c) = self.here();
        syntax(l, c, message)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += 1;
            } else if c == '#' {
                // comment runs to end of line
                let line = self.chars[self.pos].line;
                while self.chars.get(self.pos).is_some_and(|p| p.line == line) {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn expect_end(&mut self) -> Result<(), ParseError> {
        self.skip_ws();
        match self.peek() {
            None => Ok(()),
            Some(c) => Err(self.err(format!("unexpected '{c}' after value"))),
        }
    }

    fn string(&mut self) -> Result<String, ParseError> {
        self.skip_ws();
        if self.peek() != Some('"') {
            return Err(self.err("expected a double-quoted string"));
        }
        let open = self.here();
        self.pos += 1;
        let mut out = String::new();
        loop {
            let Some(c) = self.peek() else {
                return Err(syntax(open.0, open.1, "unterminated string"));
            };
            self.pos += 1;
            match c {
                '"' => break,
                '\\' => {
                    let esc = self
                        .peek()
                        .ok_or_else(|| syntax(open.0, open.1, "unterminated string"))?;
                    out.push(match esc {
                        'n' => '\n',
                        't' => '\t',
                        'r' => '\r',
                        '"' => '"',
                        '\\' => '\\',
                        other => {
                            return Err(self.err(format!("unknown escape '\\{other}'")));
                        }
                    });
                    self.pos += 1;
                }
                '\n' => return Err(syntax(open.0, open.1, "unterminated string")),
                c => out.push(c),
            }
        }
        Ok(out)
    }

    fn int(&mut self) -> Result<u64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected an integer"));
        }
        let digits: String = self.chars[start..self.pos].iter().map(|p| p.ch).collect();
        digits.parse().map_err(|_| {
            let p = self.chars[start];
            syntax(p.line, p.col, "integer out of range")
        })
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_')
        {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().map(|p| p.ch).collect();
        if !is_ident(&s) {
            self.pos = start;
            return Err(self.err("expected an identifier"));
        }
        Ok(s)
    }

    fn item(&mut self) -> Result<Item, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some('"') => self.string().map(Item::Str),
            Some(c) if c.is_ascii_digit() => self.int().map(Item::Int),
            _ => Err(self.err("expected a string or integer")),
        }
    }

    /// `[a, b, ...]` with `f` parsing each element; trailing comma allowed.
    fn bracketed<T>(
        &mut self,
        mut f: impl FnMut(&mut Self) -> Result<T, ParseError>,
    ) -> Result<Vec<T>, ParseError> {
        self.skip_ws();
        if self.peek() != Some('[') {
            return Err(self.err("expected '['"));
        }
        self.pos += 1;
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(']') {
                self.pos += 1;
                return Ok(out);
            }
            out.push(f(self)?);
            self.skip_ws();
            match self.peek() {
                Some(',') => self.pos += 1,
                Some(']') => {}
                Some(c) => return Err(self.err(format!("expected ',' or ']', found '{c}'"))),
                None => return Err(self.err("unclosed '['")),
            }
        }
    }

    fn string_list(&mut self) -> Result<Vec<String>, ParseError> {
        self.skip_ws();
        if self.peek() == Some('"') {
            Ok(vec![self.string()?])
        } else {
            self.bracketed(Self::string)
        }
    }

    fn kv_list(&mut self) -> Result<Vec<(String, Item, (usize, usize))>, ParseError> {
        self.bracketed(|v| {
            v.skip_ws();
            let at = v.here();
            let key = v.ident()?;
            v.skip_ws();
            if v.peek() != Some('=') {
                return Err(v.err("expected '='"));
            }
            v.pos += 1;
            let item = v.item()?;
            Ok((key, item, at))
        })
    }
}

#[derive(Default)]
struct RuleBuilder {
    name: String,
    line: usize,
    seen: HashSet<String>,
    input: Vec<String>,
    output: Vec<String>,
    params: Vec<(String, String)>,
    resources: Option<ResourceRequest>,
    shell: Option<String>,
    script: Option<String>,
    metawrapper: Option<String>,
}

impl RuleBuilder {
    fn finish(self) -> Result<Rule, ParseError> {
        let command = match (self.shell, self.script) {
            (Some(s), None) => RuleCommand::Shell(s),
            (None, Some(s)) => RuleCommand::Script(s),
            (None, None) => {
                return Err(ParseError::MissingCommand {
                    rule: self.name,
                    line: self.line,
                })
            }
            (Some(_), Some(_)) => {
                return Err(ParseError::BothCommands {
                    rule: self.name,
                    line: self.line,
                })
            }
        };
        Ok(Rule {
            name: self.name,
            input: self.input,
            output: self.output,
            params: self.params,
            resources: self.resources,
            command,
            metawrapper: self.metawrapper,
        })
    }
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    idx: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().collect(),
            idx: 0,
        }
    }

    fn run(mut self, name: &str) -> Result<Workflow, ParseError> {
        let mut wf = Workflow {
            name: name.to_string(),
            rules: Vec::new(),
            workdir: None,
            configfile: None,
            config: None,
            image: None,
            referencefile: None,
            testsamplesize: None,
            file_config: BTreeMap::new(),
        };
        let mut seen_directives = HashSet::new();
        let mut rule_names = HashSet::new();
        let mut current: Option<RuleBuilder> = None;

        while self.idx < self.lines.len() {
            let raw = self.lines[self.idx];
            let lineno = self.idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                self.idx += 1;
                continue;
            }
            let indent = raw.len() - raw.trim_start().len();
            if indent == 0 {
                if let Some(rule) = current.take() {
                    wf.rules.push(rule.finish()?);
                }
                if let Some(rest) = raw.strip_prefix("rule") {
                    if rest.starts_with(char::is_whitespace) || rest.starts_with(':') {
                        let rule = self.rule_header(raw, lineno)?;
                        if !rule_names.insert(rule.name.clone()) {
                            return Err(ParseError::DuplicateRule {
                                name: rule.name,
                                line: lineno,
                            });
                        }
                        current = Some(rule);
                        self.idx += 1;
                        continue;
                    }
                }
                let (key, col, value_start) = self.key(raw, lineno)?;
                if !TOP_LEVEL.contains(&key.as_str()) {
                    return Err(syntax(
                        lineno,
                        col,
                        format!("'{key}' is only valid inside a rule"),
                    ));
                }
                if !seen_directives.insert(key.clone()) {
                    return Err(syntax(lineno, col, format!("directive '{key}' repeated")));
                }
                let mut value = self.value(value_start)?;
                self.directive(&mut wf, &key, &mut value, lineno, col)?;
            } else {
                let Some(rule) = current.as_mut() else {
                    return Err(syntax(lineno, indent + 1, "indented line outside a rule"));
                };
                let (key, col, value_start) = self.key(raw, lineno)?;
                if TOP_LEVEL.contains(&key.as_str()) {
                    return Err(syntax(
                        lineno,
                        col,
                        format!("'{key}' is a top-level directive, not a rule field"),
                    ));
                }
                if !rule.seen.insert(key.clone()) {
                    return Err(syntax(lineno, col, format!("field '{key}' repeated")));
                }
                let mut value = self.value(value_start)?;
                Self::rule_field(rule, &key, &mut value)?;
            }
        }
        if let Some(rule) = current.take() {
            wf.rules.push(rule.finish()?);
        }
        if wf.rules.is_empty() {
            let line = self.lines.len().max(1);
            return Err(syntax(line, 1, "no rules defined"));
        }
        Ok(wf)
    }

    fn rule_header(&self, raw: &str, lineno: usize) -> Result<RuleBuilder, ParseError> {
        let rest = &raw["rule".len()..];
        let name_start = 4 + (rest.len() - rest.trim_start().len());
        let body = rest.trim_start();
        let name_len = body
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(body.len());
        let name = &body[..name_len];
        if !is_ident(name) {
            return Err(syntax(lineno, name_start + 1, "expected a rule name"));
        }
        let after = body[name_len..].trim_start();
        let Some(tail) = after.strip_prefix(':') else {
            return Err(syntax(
                lineno,
                name_start + name_len + 1,
                "expected ':' after rule name",
            ));
        };
        let tail = tail.trim();
        if !tail.is_empty() && !tail.starts_with('#') {
            return Err(syntax(
                lineno,
                raw.len() - tail.len() + 1,
                "unexpected text after rule header",
            ));
        }
        Ok(RuleBuilder {
            name: name.to_string(),
            line: lineno,
            ..Default::default()
        })
    }

    /// Returns (keyword, 1-based column of keyword, byte offset of value).
    fn key(&self, raw: &str, lineno: usize) -> Result<(String, usize, usize), ParseError> {
        let indent = raw.len() - raw.trim_start().len();
        let body = &raw[indent..];
        let key_len = body
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(body.len());
        let key = &body[..key_len];
        let col = raw[..indent].chars().count() + 1;
        if key.is_empty() {
            return Err(syntax(lineno, col, "expected a keyword"));
        }
        let after = &body[key_len..];
        let ws = after.len() - after.trim_start().len();
        if !after.trim_start().starts_with(':') {
            if !KEYWORDS.contains(&key) {
                return Err(ParseError::UnknownKeyword {
                    keyword: key.to_string(),
                    line: lineno,
                    column: col,
                });
            }
            return Err(syntax(
                lineno,
                col + key.chars().count() + ws,
                format!("expected ':' after '{key}'"),
            ));
        }
        if !KEYWORDS.contains(&key) || key == "rule" {
            return Err(ParseError::UnknownKeyword {
                keyword: key.to_string(),
                line: lineno,
                column: col,
            });
        }
        Ok((key.to_string(), col, indent + key_len + ws + 1))
    }

    /// Collect the value starting at `start` on the current line, pulling in
    /// continuation lines while a `[` list is still open.
    fn value(&mut self, start: usize) -> Result<Value, ParseError> {
        let mut chars = Vec::new();
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut byte_start = start;
        loop {
            let raw = self.lines[self.idx];
            let lineno = self.idx + 1;
            let prefix_cols = raw[..byte_start].chars().count();
            let mut comment = false;
            for (i, ch) in raw[byte_start..].chars().enumerate() {
                let col = prefix_cols + i + 1;
                if comment {
                    break;
                }
                if in_str {
                    if escaped {
                        escaped = false;
                    } else if ch == '\\' {
                        escaped = true;
                    } else if ch == '"' {
                        in_str = false;
                    }
                } else {
                    match ch {
                        '"' => in_str = true,
                        '[' => depth += 1,
                        ']' => depth = depth.saturating_sub(1),
                        '#' => {
                            comment = true;
                            continue;
                        }
                        _ => {}
                    }
                }
                chars.push(Pc {
                    ch,
                    line: lineno,
                    col,
                });
            }
            let end_col = raw.chars().count() + 1;
            self.idx += 1;
            if depth == 0 || in_str || self.idx >= self.lines.len() {
                return Ok(Value {
                    chars,
                    pos: 0,
                    end_line: lineno,
                    end_col,
                });
            }
            chars.push(Pc {
                ch: '\n',
                line: lineno,
                col: end_col,
            });
            byte_start = 0;
        }
    }

    fn directive(
        &self,
        wf: &mut Workflow,
        key: &str,
        value: &mut Value,
        lineno: usize,
        col: usize,
    ) -> Result<(), ParseError> {
        if key == "testsamplesize" {
            let at = {
                value.skip_ws();
                value.here()
            };
            let n = value.int()?;
            value.expect_end()?;
            if n == 0 {
                return Err(syntax(at.0, at.1, "testsamplesize must be at least 1"));
            }
            let n = u32::try_from(n).map_err(|_| syntax(at.0, at.1, "testsamplesize too large"))?;
            wf.testsamplesize = Some(n);
            return Ok(());
        }
        let s = value.string()?;
        value.expect_end()?;
        match key {
            "workdir" => wf.workdir = Some(s),
            "configfile" => wf.configfile = Some(s),
            "config" => {
                parse_config_pairs(&s).map_err(|m| syntax(lineno, col, m))?;
                wf.config = Some(s);
            }
            "image" => wf.image = Some(s),
            "referencefile" => wf.referencefile = Some(s),
            _ => unreachable!("caller filters top-level keys"),
        }
        Ok(())
    }

    fn rule_field(rule: &mut RuleBuilder, key: &str, value: &mut Value) -> Result<(), ParseError> {
        match key {
            "input" | "output" => {
                value.skip_ws();
                let at = value.here();
                let list = value.string_list()?;
                check_templates(&list, at)?;
                if key == "input" {
                    rule.input = list;
                } else {
                    rule.output = list;
                }
            }
            "params" => {
                let mut seen = HashSet::new();
                for (k, item, at) in value.kv_list()? {
                    if !seen.insert(k.clone()) {
                        return Err(syntax(at.0, at.1, format!("param '{k}' repeated")));
                    }
                    let v = match item {
                        Item::Str(s) => {
                            check_templates(std::slice::from_ref(&s), at)?;
                            s
                        }
                        Item::Int(n) => n.to_string(),
                    };
                    rule.params.push((k, v));
                }
            }
            "resources" => {
                let mut req = ResourceRequest::default();
                let mut seen = HashSet::new();
                for (k, item, at) in value.kv_list()? {
                    if !RESOURCE_KEYS.contains(&k.as_str()) {
                        return Err(ParseError::UnknownKeyword {
                            keyword: k,
                            line: at.0,
                            column: at.1,
                        });
                    }
                    if !seen.insert(k.clone()) {
                        return Err(syntax(at.0, at.1, format!("resource '{k}' repeated")));
                    }
                    match (k.as_str(), item) {
                        ("machine", Item::Str(s)) => req.machine = Some(s),
                        ("disk_gb", Item::Int(n)) => {
                            let gb = u32::try_from(n)
                                .ok()
                                .filter(|&g| g >= MIN_DISK_GB)
                                .ok_or_else(|| {
                                    syntax(
                                        at.0,
                                        at.1,
                                        format!("disk_gb must be between {MIN_DISK_GB} and {}", u32::MAX),
                                    )
                                })?;
                            req.disk_gb = Some(gb);
                        }
                        ("disk_class", Item::Str(s)) => {
                            let class = s.parse::<DiskClass>().map_err(|_| {
                                syntax(
                                    at.0,
                                    at.1,
                                    format!("disk_class '{s}' is not one of standard, balanced, ssd"),
                                )
                            })?;
                            req.disk_class = Some(class);
                        }
                        (k, _) => {
                            let want = if k == "disk_gb" { "an integer" } else { "a string" };
                            return Err(syntax(at.0, at.1, format!("'{k}' expects {want}")));
                        }
                    }
                }
                rule.resources = Some(req);
            }
            "shell" | "script" | "metawrapper" => {
                value.skip_ws();
                let at = value.here();
                let s = value.string()?;
                if key != "metawrapper" {
                    check_templates(std::slice::from_ref(&s), at)?;
                }
                match key {
                    "shell" => rule.shell = Some(s),
                    "script" => rule.script = Some(s),
                    _ => rule.metawrapper = Some(s),
                }
            }
            _ => unreachable!("keyword list covers rule fields"),
        }
        value.expect_end()
    }
}

/// Reject templates with unbalanced braces or unknown placeholder names.
fn check_templates(items: &[String], at: (usize, usize)) -> Result<(), ParseError> {
    for item in items {
        if let Err(e) = template::segments(item) {
            return Err(syntax(at.0, at.1, format!("in \"{item}\": {e}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_RULES: &str = r#"
testsamplesize : 3

rule download:
    output: ["{sampleID}.fastq"]
    shell: "fetch {sampleID} > {output}"

rule align:
    input: ["{sampleID}.fastq"]
    output: ["{sampleID}.bam"]
    shell: "bwa mem ref.fa {input} > {sampleID}.bam"
"#;

    #[test]
    fn two_rule_source() {
        let wf = parse_workflow(TWO_RULES).unwrap();
        assert_eq!(wf.rules.len(), 2);
        assert_eq!(wf.testsamplesize, Some(3));
        assert_eq!(wf.rules[1].name, "align");
        assert_eq!(
            wf.rules[1].command,
            RuleCommand::Shell("bwa mem ref.fa {input} > {sampleID}.bam".into())
        );
    }

    #[test]
    fn unknown_keyword() {
        let src = "rule a:\n    gpu: 1\n    shell: \"x\"\n";
        let err = parse_workflow(src).unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownKeyword {
                keyword: "gpu".into(),
                line: 2,
                column: 5
            }
        );
    }

    #[test]
    fn unknown_top_level_keyword() {
        let err = parse_workflow("gpu : 1\nrule a:\n  shell: \"x\"\n").unwrap_err();
        assert!(matches!(err, ParseError::UnknownKeyword { ref keyword, line: 1, .. } if keyword == "gpu"));
    }

    #[test]
    fn empty_source() {
        let err = parse_workflow("").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { ref message, .. } if message == "no rules defined"));
        let err = parse_workflow("# only a comment\n\n").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { ref message, .. } if message == "no rules defined"));
    }

    #[test]
    fn duplicate_rule() {
        let src = "rule a:\n  shell: \"x\"\nrule a:\n  shell: \"y\"\n";
        assert_eq!(
            parse_workflow(src).unwrap_err(),
            ParseError::DuplicateRule {
                name: "a".into(),
                line: 3
            }
        );
    }

    #[test]
    fn command_presence() {
        let missing = "rule a:\n  output: [\"x\"]\n";
        assert!(matches!(
            parse_workflow(missing).unwrap_err(),
            ParseError::MissingCommand { ref rule, line: 1 } if rule == "a"
        ));
        let both = "rule a:\n  shell: \"x\"\n  script: \"s.py\"\n";
        assert!(matches!(
            parse_workflow(both).unwrap_err(),
            ParseError::BothCommands { ref rule, .. } if rule == "a"
        ));
    }

    #[test]
    fn syntax_error_position() {
        let src = "rule a:\n  shell: \"x\"\n  input: [\"a\" \"b\"]\n";
        match parse_workflow(src).unwrap_err() {
            ParseError::Syntax { line, column, .. } => {
                assert_eq!((line, column), (3, 15));
            }
            other => panic!("unexpected {other:?}"),
        }
        let unterminated = "rule a:\n  shell: \"x\n";
        assert!(matches!(
            parse_workflow(unterminated).unwrap_err(),
            ParseError::Syntax { line: 2, column: 10, .. }
        ));
    }

    #[test]
    fn repeated_directive_and_field() {
        let src = "image : \"a\"\nimage : \"b\"\nrule a:\n  shell: \"x\"\n";
        assert!(matches!(parse_workflow(src).unwrap_err(), ParseError::Syntax { line: 2, .. }));
        let src = "rule a:\n  shell: \"x\"\n  shell: \"y\"\n";
        assert!(matches!(parse_workflow(src).unwrap_err(), ParseError::Syntax { line: 3, .. }));
    }

    #[test]
    fn misplaced_keywords() {
        let src = "shell : \"x\"\nrule a:\n  shell: \"x\"\n";
        assert!(matches!(parse_workflow(src).unwrap_err(), ParseError::Syntax { line: 1, .. }));
        let src = "rule a:\n  image: \"x\"\n  shell: \"x\"\n";
        assert!(matches!(parse_workflow(src).unwrap_err(), ParseError::Syntax { line: 2, .. }));
        let src = "  shell: \"x\"\nrule a:\n  shell: \"x\"\n";
        assert!(matches!(parse_workflow(src).unwrap_err(), ParseError::Syntax { line: 1, .. }));
    }

    #[test]
    fn testsamplesize_must_be_positive() {
        let src = "testsamplesize : 0\nrule a:\n  shell: \"x\"\n";
        assert!(matches!(parse_workflow(src).unwrap_err(), ParseError::Syntax { line: 1, .. }));
    }

    #[test]
    fn resources_and_params() {
        let src = r#"
rule align:
    params: [sampleID="{sampleID}", threads=8]
    resources: [machine="e2-standard-4", disk_gb=200, disk_class="balanced"]
    shell: "bwa -t {params.threads} {params.sampleID}"
    metawrapper: "0.72.0/bio/bwa/mem"
"#;
        let wf = parse_workflow(src).unwrap();
        let rule = &wf.rules[0];
        assert_eq!(
            rule.params,
            vec![
                ("sampleID".into(), "{sampleID}".into()),
                ("threads".into(), "8".into())
            ]
        );
        assert_eq!(
            rule.resources,
            Some(ResourceRequest::new("e2-standard-4", 200, DiskClass::Balanced))
        );
        assert_eq!(rule.metawrapper.as_deref(), Some("0.72.0/bio/bwa/mem"));
    }

    #[test]
    fn resource_bounds() {
        let small = "rule a:\n  resources: [disk_gb=9]\n  shell: \"x\"\n";
        assert!(matches!(parse_workflow(small).unwrap_err(), ParseError::Syntax { line: 2, .. }));
        let class = "rule a:\n  resources: [disk_class=\"nvme\"]\n  shell: \"x\"\n";
        assert!(matches!(parse_workflow(class).unwrap_err(), ParseError::Syntax { line: 2, .. }));
        let gpu = "rule a:\n  resources: [gpu=1]\n  shell: \"x\"\n";
        assert!(matches!(
            parse_workflow(gpu).unwrap_err(),
            ParseError::UnknownKeyword { ref keyword, line: 2, .. } if keyword == "gpu"
        ));
    }

    #[test]
    fn multi_line_lists_and_comments() {
        let src = r#"
# pipeline
rule merge:   # header comment
    input: [
        "{sampleID}.a.bam",   # first
        "{sampleID}.b.bam",
    ]
    output: "{sampleID}.bam"
    shell: "samtools merge {output} {input}"
"#;
        let wf = parse_workflow(src).unwrap();
        assert_eq!(wf.rules[0].input.len(), 2);
        assert_eq!(wf.rules[0].output, vec!["{sampleID}.bam".to_string()]);
    }

    #[test]
    fn bad_placeholders_are_syntax_errors() {
        let src = "rule a:\n  shell: \"echo {sampleID\"\n";
        assert!(matches!(parse_workflow(src).unwrap_err(), ParseError::Syntax { line: 2, .. }));
        let src = "rule a:\n  shell: \"echo {nope}\"\n";
        assert!(matches!(parse_workflow(src).unwrap_err(), ParseError::Syntax { line: 2, .. }));
    }

    #[test]
    fn config_directive() {
        let src = "config : \"genome=hg38; threads=4\"\nrule a:\n  shell: \"x\"\n";
        let wf = parse_workflow(src).unwrap();
        assert_eq!(wf.inline_config().get("genome").map(String::as_str), Some("hg38"));
        let bad = "config : \"genome\"\nrule a:\n  shell: \"x\"\n";
        assert!(parse_workflow(bad).is_err());
    }

    #[test]
    fn to_source_round_trip() {
        let wf = parse_workflow(TWO_RULES).unwrap();
        assert_eq!(parse_workflow(&wf.to_source()).unwrap(), wf);
    }
}
