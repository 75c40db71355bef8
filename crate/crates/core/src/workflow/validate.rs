use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::{parse_machine_name, MachineCatalog, MachineNameError};

use super::compile::{rule_edges, topo_order, CompileError};
use super::template::{placeholders, render, Bindings, Placeholder};
use super::{RuleCommand, Workflow};

/// A problem found by [`validate_workflow`]. `rule` is `None` for
/// workflow-wide findings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub rule: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rule {
            Some(r) => write!(f, "rule '{r}': {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

const PROBE_SAMPLE: &str = "__sample__";
const PROBE_REFERENCE: &str = "__reference__";

pub fn validate_workflow(w: &Workflow, catalog: &MachineCatalog) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let diag = |rule: &str, message: String| Diagnostic {
        rule: Some(rule.to_string()),
        message,
    };

    // Keys from a config file are only known once it is loaded.
    let config_known = w.configfile.is_none() || !w.file_config.is_empty();
    let config_values = w.config_values();

    for rule in &w.rules {
        if let Some(machine) = rule.resources.as_ref().and_then(|r| r.machine.as_deref()) {
            match parse_machine_name(machine) {
                Err(MachineNameError::UnsupportedSeries(series)) => out.push(diag(
                    &rule.name,
                    format!("machine '{machine}': unsupported series '{series}' (supported: e2, n2, n1)"),
                )),
                Err(e) => out.push(diag(&rule.name, format!("machine '{machine}': {e}"))),
                Ok(_) if catalog.machine(machine).is_none() => out.push(diag(
                    &rule.name,
                    format!("machine '{machine}': unknown machine type (not in catalog)"),
                )),
                Ok(_) => {}
            }
        }

        let declared = |key: &str| rule.params.iter().any(|(k, _)| k == key);
        let mut check = |field: &str, text: &str, allow_io: bool, allow_params: bool| {
            let Ok(slots) = placeholders(text) else {
                out.push(diag(&rule.name, format!("{field}: malformed template \"{text}\"")));
                return;
            };
            for slot in slots {
                let problem = match &slot {
                    Placeholder::Input | Placeholder::Output if !allow_io => {
                        Some(format!("{slot} cannot be used here"))
                    }
                    Placeholder::Param(_) if !allow_params => {
                        Some(format!("{slot} cannot be used inside params"))
                    }
                    Placeholder::Param(k) if !declared(k) => {
                        Some(format!("{slot} refers to undeclared param '{k}'"))
                    }
                    Placeholder::Config(k) if config_known && !config_values.contains_key(k) => {
                        Some(format!("{slot} refers to undeclared config key '{k}'"))
                    }
                    _ => None,
                };
                if let Some(p) = problem {
                    out.push(diag(&rule.name, format!("{field}: {p}")));
                }
            }
        };
        for (_, v) in &rule.params {
            check("params", v, false, false);
        }
        for p in &rule.input {
            check("input", p, false, true);
        }
        for p in &rule.output {
            check("output", p, false, true);
        }
        match &rule.command {
            RuleCommand::Shell(s) => check("shell", s, true, true),
            RuleCommand::Script(s) => check("script", s, true, true),
        }
    }

    // Dependency graph over probe-resolved paths.
    let probe = w
        .rules
        .iter()
        .map(|rule| {
            let mut params = std::collections::BTreeMap::new();
            let base = Bindings {
                sample_id: Some(PROBE_SAMPLE),
                workdir: Some(w.workdir.as_deref().unwrap_or(".")),
                reference: Some(PROBE_REFERENCE),
                config: Some(&config_values),
                ..Default::default()
            };
            for (k, v) in &rule.params {
                params.insert(k.clone(), render(v, &base).unwrap_or_else(|_| v.clone()));
            }
            let b = Bindings {
                params: Some(&params),
                ..base
            };
            let resolve = |items: &[String]| -> Vec<String> {
                items
                    .iter()
                    .map(|p| render(p, &b).unwrap_or_else(|_| p.clone()))
                    .collect()
            };
            (rule.name.clone(), resolve(&rule.input), resolve(&rule.output))
        })
        .collect::<Vec<_>>();
    match rule_edges(&probe) {
        Err(CompileError::ConflictingOutput { path, rules }) => out.push(Diagnostic {
            rule: None,
            message: format!(
                "output '{}' is produced by more than one rule ({})",
                path.replace(PROBE_SAMPLE, "{sampleID}"),
                rules.join(", ")
            ),
        }),
        Err(other) => out.push(Diagnostic {
            rule: None,
            message: other.to_string(),
        }),
        Ok(edges) => {
            if let Err(stuck) = topo_order(w.rules.len(), &edges) {
                let names: Vec<&str> = stuck.iter().map(|&i| w.rules[i].name.as_str()).collect();
                out.push(Diagnostic {
                    rule: None,
                    message: format!("cycle involving {}", names.join(", ")),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::MachineCatalog;
    use crate::workflow::parse_workflow;

    fn catalog() -> MachineCatalog {
        MachineCatalog::sample()
    }

    #[test]
    fn self_loop_cycle() {
        let src = r#"
rule A:
    output: ["a.bam"]
    shell: "make a"
rule B:
    input: ["a.bam", "x.bam"]
    output: ["x.bam"]
    shell: "touch x"
"#;
        let diags = validate_workflow(&parse_workflow(src).unwrap(), &catalog());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].message, "cycle involving B");
    }

    #[test]
    fn unsupported_series() {
        let src = "rule a:\n  resources: [machine=\"c2-standard-4\"]\n  shell: \"x\"\n";
        let diags = validate_workflow(&parse_workflow(src).unwrap(), &catalog());
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("unsupported series"), "{}", diags[0]);
    }

    #[test]
    fn unknown_machine_in_catalog() {
        let src = "rule a:\n  resources: [machine=\"n2-standard-6\"]\n  shell: \"x\"\n";
        let diags = validate_workflow(&parse_workflow(src).unwrap(), &catalog());
        assert!(diags[0].message.contains("not in catalog"));
    }

    #[test]
    fn consistent_workflow_has_no_diagnostics() {
        let src = r#"
config : "genome=hg38"
rule download:
    params: [id="{sampleID}"]
    output: ["{params.id}.fastq"]
    shell: "fetch {params.id} > {output}"
rule align:
    input: ["{sampleID}.fastq"]
    output: ["{sampleID}.bam"]
    resources: [machine="e2-standard-4", disk_gb=200]
    shell: "bwa {config.genome} {input} > {output}"
"#;
        assert_eq!(validate_workflow(&parse_workflow(src).unwrap(), &catalog()), vec![]);
    }

    #[test]
    fn undeclared_placeholders() {
        let src = r#"
rule a:
    params: [x="{params.y}"]
    input: ["{output}"]
    shell: "echo {params.z} {config.k}"
"#;
        let diags = validate_workflow(&parse_workflow(src).unwrap(), &catalog());
        let msgs: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        assert_eq!(msgs.len(), 4, "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("undeclared param 'z'")));
        assert!(msgs.iter().any(|m| m.contains("undeclared config key 'k'")));
        assert!(msgs.iter().any(|m| m.contains("inside params")));
        assert!(msgs.iter().any(|m| m.contains("{output} cannot be used here")));
    }

    #[test]
    fn config_keys_unchecked_until_file_loaded() {
        let src = "configfile : \"cfg.json\"\nrule a:\n  shell: \"echo {config.k}\"\n";
        assert!(validate_workflow(&parse_workflow(src).unwrap(), &catalog()).is_empty());
    }

    #[test]
    fn two_rule_cycle_and_conflicts() {
        let src = "rule a:\n  input: [\"b\"]\n  output: [\"a\"]\n  shell: \"x\"\nrule b:\n  input: [\"a\"]\n  output: [\"b\"]\n  shell: \"x\"\n";
        let diags = validate_workflow(&parse_workflow(src).unwrap(), &catalog());
        assert_eq!(diags[0].message, "cycle involving a, b");
        let src = "rule a:\n  output: [\"{sampleID}.o\"]\n  shell: \"x\"\nrule b:\n  output: [\"{sampleID}.o\"]\n  shell: \"x\"\n";
        let diags = validate_workflow(&parse_workflow(src).unwrap(), &catalog());
        assert!(diags[0].message.contains("'{sampleID}.o'"), "{}", diags[0]);
    }
}
