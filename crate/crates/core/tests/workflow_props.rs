use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::sample::subsequence;

use gflow::catalog::{DiskClass, MachineCatalog};
use gflow::workflow::{
    compile_task, parse_workflow_named, validate_workflow, ResourceRequest, Rule, RuleCommand, Workflow,
};

const MACHINES: [&str; 5] = ["e2-standard-2", "e2-highmem-8", "n2-standard-16", "n1-highcpu-4", "n2-highmem-64"];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            "[a-zA-Z0-9 _./:-]{1,6}",
            Just("\"".to_string()),
            Just("\\".to_string()),
            Just("\t".to_string()),
            Just("{sampleID}".to_string()),
            Just("{{".to_string()),
        ],
        0..5,
    )
    .prop_map(|parts| parts.concat())
}

fn disk_class() -> impl Strategy<Value = DiskClass> {
    prop::sample::select(DiskClass::ALL.to_vec())
}

fn resources() -> impl Strategy<Value = Option<ResourceRequest>> {
    (
        prop::option::of(prop::sample::select(MACHINES.to_vec())),
        prop::option::of(10u32..5000),
        prop::option::of(disk_class()),
    )
        .prop_map(|(machine, disk_gb, disk_class)| {
            let r = ResourceRequest {
                machine: machine.map(String::from),
                disk_gb,
                disk_class,
            };
            (!r.is_empty()).then_some(r)
        })
}

fn rule(name: String) -> impl Strategy<Value = Rule> {
    (
        prop::collection::vec(text(), 0..3),
        prop::collection::vec(text(), 0..3),
        prop::collection::btree_map("[a-z][a-z0-9_]{0,5}", text(), 0..3),
        resources(),
        any::<bool>(),
        text(),
        prop::option::of(text()),
    )
        .prop_map(move |(input, output, params, resources, shell, cmd, metawrapper)| Rule {
            name: name.clone(),
            input,
            output,
            params: params.into_iter().collect(),
            resources,
            command: if shell { RuleCommand::Shell(cmd) } else { RuleCommand::Script(cmd) },
            metawrapper,
        })
}

fn config_directive() -> impl Strategy<Value = Option<String>> {
    prop::option::of(prop::collection::btree_map("[a-z][a-z0-9_]{0,5}", "[a-zA-Z0-9./]{1,6}", 1..4)).prop_map(
        |m| {
            m.map(|m| {
                m.into_iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            })
        },
    )
}

fn workflow() -> impl Strategy<Value = Workflow> {
    let names = prop::collection::btree_set("r[a-z0-9_]{0,6}", 1..6);
    let rules = names.prop_flat_map(|names| names.into_iter().map(rule).collect::<Vec<_>>());
    (
        rules,
        prop::option::of(text()),
        prop::option::of(text()),
        config_directive(),
        prop::option::of(text()),
        prop::option::of(text()),
        prop::option::of(1u32..50),
    )
        .prop_map(|(rules, workdir, configfile, config, image, referencefile, testsamplesize)| Workflow {
            name: "generated".into(),
            rules,
            workdir,
            configfile,
            config,
            image,
            referencefile,
            testsamplesize,
            file_config: BTreeMap::new(),
        })
}

/// A chain-free pipeline: rule `i` writes `{sampleID}.o<i>` and reads some
/// outputs of lower-numbered rules plus optional external and reference
/// inputs. Rules are then emitted in a shuffled order.
#[derive(Debug, Clone)]
struct Pipeline {
    reads: Vec<Vec<usize>>,
    external: Vec<bool>,
    reference: Vec<bool>,
    resources: Vec<Option<ResourceRequest>>,
    order: Vec<usize>,
}

fn pipeline() -> impl Strategy<Value = Pipeline> {
    (1usize..8).prop_flat_map(|n| {
        let reads: Vec<_> = (0..n)
            .map(|i| subsequence((0..i).collect::<Vec<_>>(), 0..=i))
            .collect();
        (
            reads,
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(resources(), n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
            .prop_map(|(reads, external, reference, resources, order)| Pipeline {
                reads,
                external,
                reference,
                resources,
                order,
            })
    })
}

impl Pipeline {
    fn inputs(&self, i: usize) -> Vec<String> {
        let mut v: Vec<String> = self.reads[i].iter().map(|j| format!("{{sampleID}}.o{j}")).collect();
        if self.external[i] {
            v.push(format!("sra://{{sampleID}}.raw{i}"));
        }
        if self.reference[i] {
            v.push("{reference}/genome.fa".into());
        }
        v
    }

    fn workflow(&self) -> Workflow {
        let rules = self
            .order
            .iter()
            .map(|&i| Rule {
                name: format!("step{i}"),
                input: self.inputs(i),
                output: vec![format!("{{sampleID}}.o{i}")],
                params: vec![],
                resources: self.resources[i].clone(),
                command: RuleCommand::Shell("run {sampleID} {input} {output}".into()),
                metawrapper: None,
            })
            .collect();
        Workflow {
            name: "pipeline".into(),
            rules,
            workdir: None,
            configfile: None,
            config: None,
            image: None,
            referencefile: None,
            testsamplesize: None,
            file_config: BTreeMap::new(),
        }
    }
}

fn render(template: &str, sample: &str) -> String {
    template.replace("{sampleID}", sample).replace("{reference}", "reference")
}

fn defaults() -> ResourceRequest {
    ResourceRequest::new("e2-standard-16", 100, DiskClass::Balanced)
}

proptest! {
    #[test]
    fn source_round_trips(w in workflow()) {
        let src = w.to_source();
        let back = parse_workflow_named(&w.name, &src);
        prop_assert!(back.is_ok(), "{:?}\n{src}", back.err());
        prop_assert_eq!(back.unwrap(), w);
    }

    #[test]
    fn edges_match_brute_force(p in pipeline(), sample in "[A-Z]{2}[0-9]{1,4}") {
        let w = p.workflow();
        prop_assert!(validate_workflow(&w, &MachineCatalog::sample()).is_empty());
        let plan = compile_task(&w, &sample, &defaults(), "reference").unwrap();

        let mut expected = BTreeSet::new();
        for prod in &w.rules {
            for cons in &w.rules {
                let outs: Vec<String> = prod.output.iter().map(|o| render(o, &sample)).collect();
                if prod.name != cons.name && cons.input.iter().any(|i| outs.contains(&render(i, &sample))) {
                    expected.insert((prod.name.clone(), cons.name.clone()));
                }
            }
        }
        let got: BTreeSet<_> = plan.edges.iter().map(|e| (e.producer.clone(), e.consumer.clone())).collect();
        prop_assert_eq!(&got, &expected);

        prop_assert_eq!(plan.steps.len(), w.rules.len());
        let pos: BTreeMap<&str, usize> =
            plan.steps.iter().enumerate().map(|(i, s)| (s.rule_name.as_str(), i)).collect();
        for (a, b) in &expected {
            prop_assert!(pos[a.as_str()] < pos[b.as_str()], "{} after {}", a, b);
        }
        for s in &plan.steps {
            prop_assert!(!s.resolved_command.contains('{'), "{}", s.resolved_command);
            prop_assert!(s.resolved_command.contains(&sample));
        }

        let again = compile_task(&w, &sample, &defaults(), "reference").unwrap();
        prop_assert_eq!(plan, again);
    }

    #[test]
    fn explicit_resources_are_never_defaulted(p in pipeline()) {
        let w = p.workflow();
        let d = defaults();
        let plan = compile_task(&w, "S1", &d, "reference").unwrap();
        for step in &plan.steps {
            let req = w.rule(&step.rule_name).unwrap().resources.clone().unwrap_or_default();
            let got = &step.resources;
            prop_assert_eq!(&got.machine, &req.machine.clone().or(d.machine.clone()));
            prop_assert_eq!(got.disk_gb, req.disk_gb.or(d.disk_gb));
            prop_assert_eq!(got.disk_class, req.disk_class.or(d.disk_class));
        }
    }
}
