use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::template::{render, Bindings, TemplateError};
use super::{ResourceRequest, Rule, RuleCommand, Workflow};

/// One sample's instantiation of a workflow: steps in topological order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub sample_id: String,
    pub steps: Vec<StepSpec>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub producer: String,
    pub consumer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpec {
    pub rule_name: String,
    pub resolved_command: String,
    pub resolved_inputs: Vec<String>,
    pub resolved_outputs: Vec<String>,
    /// Effective resources after defaulting.
    pub resources: ResourceRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CompileError {
    #[error("rule '{rule}': input '{input}' is not produced by any rule and is neither external nor a reference")]
    UnresolvedInput { rule: String, input: String },
    #[error("dependency cycle involving {}", .rules.join(", "))]
    Cycle { rules: Vec<String> },
    #[error("output '{path}' is produced by more than one rule ({})", .rules.join(", "))]
    ConflictingOutput { path: String, rules: Vec<String> },
    #[error("rule '{rule}' {field}: {source}")]
    Template {
        rule: String,
        field: &'static str,
        source: TemplateError,
    },
}

/// Inputs with a URI scheme are fetched from outside the task.
pub fn is_external(path: &str) -> bool {
    path.contains("://")
}

pub(crate) fn is_reference(path: &str, reference_root: &str) -> bool {
    path == reference_root
        || path
            .strip_prefix(reference_root)
            .is_some_and(|rest| rest.starts_with('/'))
}

impl TaskPlan {
    pub fn step(&self, rule_name: &str) -> Option<&StepSpec> {
        self.steps.iter().find(|s| s.rule_name == rule_name)
    }

    /// Names of the steps whose outputs `rule_name` consumes.
    pub fn producers_of(&self, rule_name: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|e| e.consumer == rule_name)
            .map(|e| e.producer.as_str())
            .collect()
    }

    /// Outputs of steps no other step consumes: the task's results.
    pub fn result_paths(&self) -> Vec<&str> {
        let producers: BTreeSet<&str> = self.edges.iter().map(|e| e.producer.as_str()).collect();
        self.steps
            .iter()
            .filter(|s| !producers.contains(s.rule_name.as_str()))
            .flat_map(|s| s.resolved_outputs.iter().map(String::as_str))
            .collect()
    }
}

struct Resolved {
    inputs: Vec<String>,
    outputs: Vec<String>,
    command: String,
}

fn resolve_rule(
    rule: &Rule,
    sample_id: &str,
    workdir: &str,
    reference_root: &str,
    config: &BTreeMap<String, String>,
) -> Result<Resolved, CompileError> {
    let tpl_err = |field: &'static str| {
        let rule = rule.name.clone();
        move |source| CompileError::Template {
            rule: rule.clone(),
            field,
            source,
        }
    };
    let base = Bindings {
        sample_id: Some(sample_id),
        workdir: Some(workdir),
        reference: Some(reference_root),
        config: Some(config),
        ..Default::default()
    };
    let mut params = BTreeMap::new();
    for (k, v) in &rule.params {
        params.insert(k.clone(), render(v, &base).map_err(tpl_err("params"))?);
    }
    let with_params = Bindings {
        params: Some(&params),
        ..base.clone()
    };
    let inputs = rule
        .input
        .iter()
        .map(|p| render(p, &with_params))
        .collect::<Result<Vec<_>, _>>()
        .map_err(tpl_err("input"))?;
    let outputs = rule
        .output
        .iter()
        .map(|p| render(p, &with_params))
        .collect::<Result<Vec<_>, _>>()
        .map_err(tpl_err("output"))?;
    let full = Bindings {
        input: Some(inputs.join(" ")),
        output: Some(outputs.join(" ")),
        ..with_params
    };
    let command = match &rule.command {
        RuleCommand::Shell(s) => render(s, &full).map_err(tpl_err("shell"))?,
        RuleCommand::Script(s) => {
            let path = render(s, &full).map_err(tpl_err("script"))?;
            let interpreter = match path.rsplit_once('.').map(|(_, ext)| ext) {
                Some("py") => "python3",
                Some("R" | "r") => "Rscript",
                Some("pl") => "perl",
                _ => "sh",
            };
            format!("{interpreter} {path}")
        }
    };
    Ok(Resolved {
        inputs,
        outputs,
        command,
    })
}

/// Rule-level dependency edges (indices into `w.rules`) using placeholder
/// values for `sample_id`.
pub(crate) fn rule_edges(
    rules: &[(String, Vec<String>, Vec<String>)],
) -> Result<Vec<(usize, usize)>, CompileError> {
    let mut producer_of: HashMap<&str, usize> = HashMap::new();
    for (idx, (name, _, outputs)) in rules.iter().enumerate() {
        for out in outputs {
            if let Some(prev) = producer_of.insert(out.as_str(), idx) {
                if prev != idx {
                    return Err(CompileError::ConflictingOutput {
                        path: out.clone(),
                        rules: vec![rules[prev].0.clone(), name.clone()],
                    });
                }
            }
        }
    }
    let mut edges = BTreeSet::new();
    for (consumer, (_, inputs, _)) in rules.iter().enumerate() {
        for input in inputs {
            if let Some(&producer) = producer_of.get(input.as_str()) {
                edges.insert((producer, consumer));
            }
        }
    }
    Ok(edges.into_iter().collect())
}

/// Kahn's algorithm, always taking the lowest-index ready node so that
/// independent rules keep their source order.
pub(crate) fn topo_order(n: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>, Vec<usize>> {
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(p, c) in edges {
        indegree[c] += 1;
        succ[p].push(c);
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &succ[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).filter(|&i| indegree[i] > 0).collect())
    }
}

/// Instantiate `w` for one sample.
///
/// Dependencies are inferred by exact match between a rule's resolved inputs
/// and other rules' resolved outputs. Steps without explicit resources
/// inherit every field of `defaults`; explicit fields are kept.
pub fn compile_task(
    w: &Workflow,
    sample_id: &str,
    defaults: &ResourceRequest,
    reference_root: &str,
) -> Result<TaskPlan, CompileError> {
    let workdir = w.workdir.as_deref().unwrap_or(".");
    let config = w.config_values();
    let resolved = w
        .rules
        .iter()
        .map(|r| resolve_rule(r, sample_id, workdir, reference_root, &config))
        .collect::<Result<Vec<_>, _>>()?;

    let shapes: Vec<_> = w
        .rules
        .iter()
        .zip(&resolved)
        .map(|(r, res)| (r.name.clone(), res.inputs.clone(), res.outputs.clone()))
        .collect();
    let edges = rule_edges(&shapes)?;

    for (rule, res) in w.rules.iter().zip(&resolved) {
        for input in &res.inputs {
            let produced = shapes.iter().any(|(_, _, outs)| outs.contains(input));
            if !produced && !is_external(input) && !is_reference(input, reference_root) {
                return Err(CompileError::UnresolvedInput {
                    rule: rule.name.clone(),
                    input: input.clone(),
                });
            }
        }
    }

    let order = topo_order(w.rules.len(), &edges).map_err(|stuck| CompileError::Cycle {
        rules: stuck.iter().map(|&i| w.rules[i].name.clone()).collect(),
    })?;
    let position: HashMap<usize, usize> = order.iter().enumerate().map(|(p, &i)| (i, p)).collect();

    let mut resolved: Vec<Option<Resolved>> = resolved.into_iter().map(Some).collect();
    let steps = order
        .iter()
        .map(|&i| {
            let rule = &w.rules[i];
            let res = resolved[i].take().expect("each rule visited once");
            let resources = rule
                .resources
                .as_ref()
                .map(|r| r.or_defaults(defaults))
                .unwrap_or_else(|| defaults.clone());
            StepSpec {
                rule_name: rule.name.clone(),
                resolved_command: res.command,
                resolved_inputs: res.inputs,
                resolved_outputs: res.outputs,
                resources,
                image: w.image.clone(),
            }
        })
        .collect();

    let mut edges: Vec<(usize, usize)> = edges;
    edges.sort_by_key(|&(p, c)| (position[&c], position[&p]));
    let edges = edges
        .into_iter()
        .map(|(p, c)| Edge {
            producer: w.rules[p].name.clone(),
            consumer: w.rules[c].name.clone(),
        })
        .collect();

    Ok(TaskPlan {
        sample_id: sample_id.to_string(),
        steps,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::DiskClass;
    use crate::workflow::parse_workflow;

    const CHAIN: &str = r#"
rule download:
    output: ["{sampleID}.fastq"]
    shell: "fetch {sampleID} > {output}"
rule align:
    input: ["{sampleID}.fastq", "{reference}/hg38.fa"]
    output: ["{sampleID}.bam"]
    resources: [machine="n2-standard-8"]
    shell: "bwa mem {reference}/hg38.fa {sampleID}.fastq > {output}"
rule refine:
    input: ["{sampleID}.bam"]
    output: ["{sampleID}.refined.bam"]
    shell: "refine {input} {output} # {sampleID}"
"#;

    fn defaults() -> ResourceRequest {
        ResourceRequest::new("e2-standard-16", 100, DiskClass::Balanced)
    }

    #[test]
    fn linear_chain() {
        let wf = parse_workflow(CHAIN).unwrap();
        let plan = compile_task(&wf, "S1", &defaults(), "reference").unwrap();
        assert_eq!(plan.steps.len(), 3);
        assert_eq!(plan.edges.len(), 2);
        assert!(plan.steps.iter().all(|s| s.resolved_command.contains("S1")));
        assert_eq!(plan.steps[1].resolved_inputs, vec!["S1.fastq", "reference/hg38.fa"]);
        assert_eq!(plan.result_paths(), vec!["S1.refined.bam"]);
        assert_eq!(plan.producers_of("refine"), vec!["align"]);
    }

    #[test]
    fn explicit_fields_keep_priority_over_defaults() {
        let wf = parse_workflow(CHAIN).unwrap();
        let plan = compile_task(&wf, "S1", &defaults(), "reference").unwrap();
        let align = plan.step("align").unwrap();
        assert_eq!(align.resources.machine.as_deref(), Some("n2-standard-8"));
        assert_eq!(align.resources.disk_gb, Some(100));
        assert_eq!(plan.step("download").unwrap().resources, defaults());
    }

    #[test]
    fn one_step_task() {
        let wf = parse_workflow("rule rtea:\n  output: [\"{sampleID}.tsv\"]\n  shell: \"rtea {sampleID}\"\n").unwrap();
        let plan = compile_task(&wf, "GTEX-1", &defaults(), "reference").unwrap();
        assert_eq!(plan.steps.len(), 1);
        assert!(plan.edges.is_empty());
    }

    #[test]
    fn independent_rules_keep_source_order() {
        let src = "rule b:\n  output: [\"b\"]\n  shell: \"x\"\nrule a:\n  output: [\"a\"]\n  shell: \"y\"\n";
        let plan = compile_task(&parse_workflow(src).unwrap(), "S", &defaults(), "reference").unwrap();
        let names: Vec<_> = plan.steps.iter().map(|s| s.rule_name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert!(plan.edges.is_empty());
    }

    #[test]
    fn consumer_before_producer_in_source() {
        let src = "rule use:\n  input: [\"x\"]\n  shell: \"cat x\"\nrule make:\n  output: [\"x\"]\n  shell: \"touch x\"\n";
        let plan = compile_task(&parse_workflow(src).unwrap(), "S", &defaults(), "reference").unwrap();
        let names: Vec<_> = plan.steps.iter().map(|s| s.rule_name.as_str()).collect();
        assert_eq!(names, ["make", "use"]);
    }

    #[test]
    fn unresolved_input() {
        let src = "rule a:\n  input: [\"missing.txt\"]\n  shell: \"x\"\n";
        let err = compile_task(&parse_workflow(src).unwrap(), "S", &defaults(), "reference").unwrap_err();
        assert_eq!(
            err,
            CompileError::UnresolvedInput {
                rule: "a".into(),
                input: "missing.txt".into()
            }
        );
        let ok = "rule a:\n  input: [\"sra://{sampleID}\"]\n  shell: \"x\"\n";
        assert!(compile_task(&parse_workflow(ok).unwrap(), "S", &defaults(), "reference").is_ok());
    }

    #[test]
    fn self_loop_is_cycle() {
        let src = "rule b:\n  input: [\"x.bam\"]\n  output: [\"x.bam\"]\n  shell: \"x\"\n";
        let err = compile_task(&parse_workflow(src).unwrap(), "S", &defaults(), "reference").unwrap_err();
        assert_eq!(err, CompileError::Cycle { rules: vec!["b".into()] });
    }

    #[test]
    fn script_command_uses_interpreter() {
        let src = "rule a:\n  script: \"scripts/{sampleID}.py\"\n";
        let plan = compile_task(&parse_workflow(src).unwrap(), "S9", &defaults(), "reference").unwrap();
        assert_eq!(plan.steps[0].resolved_command, "python3 scripts/S9.py");
    }

    #[test]
    fn config_and_workdir_placeholders() {
        let src = "workdir : \"/data\"\nconfig : \"genome=hg38\"\nrule a:\n  params: [id=\"{sampleID}-{config.genome}\"]\n  shell: \"cd {workdir} && run {params.id}\"\n";
        let plan = compile_task(&parse_workflow(src).unwrap(), "S1", &defaults(), "reference").unwrap();
        assert_eq!(plan.steps[0].resolved_command, "cd /data && run S1-hg38");
    }

    #[test]
    fn topo_order_reports_stuck_nodes() {
        assert_eq!(topo_order(3, &[(0, 1), (1, 2)]), Ok(vec![0, 1, 2]));
        assert_eq!(topo_order(3, &[(1, 2), (2, 1)]), Err(vec![1, 2]));
    }
}
