use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use rust_decimal::Decimal;

use gflow::backend::{
    run_job_sim, run_task_local, FailureReason, InjectedFailure, LocalOptions, Override, PoolConfig, Quantity,
    RuleWorkload, TaskOutcome, WorkloadSpec,
};
use gflow::catalog::{DiskClass, MachineCatalog};
use gflow::optimizer::{job_cost_report, profile_job, recommend};
use gflow::orchestrator::{EventRecord, Job, JobState, Orchestrator, OrchestratorOptions, TaskState};
use gflow::store::{ObjectStore, StoreUri};
use gflow::workflow::{compile_task, parse_workflow_named, ResourceRequest, Workflow};

const TWO_RULES: &str = "\
rule fetch:
    input: [\"sra://{sampleID}\"]
    output: [\"{sampleID}.fastq\"]
    shell: \"fetch {sampleID}\"

rule align:
    input: [\"{sampleID}.fastq\"]
    output: [\"{sampleID}.bam\"]
    shell: \"align {input}\"
";

struct Sandbox {
    _dir: tempfile::TempDir,
    store: ObjectStore,
    log: PathBuf,
    results: StoreUri,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path().join("store")).unwrap();
        store.create_bucket("results").unwrap();
        Self {
            log: dir.path().join("job.jsonl"),
            _dir: dir,
            store,
            results: StoreUri::new("results", "").unwrap(),
        }
    }

    fn run(&self, w: &Workflow, ids: &[String], machine: &str, retries: u32, spec: &WorkloadSpec, cap: u32) -> Orchestrator {
        self.run_on(w, ids, ResourceRequest::new(machine, 500, DiskClass::Balanced), retries, spec, cap)
    }

    fn run_on(
        &self,
        w: &Workflow,
        ids: &[String],
        defaults: ResourceRequest,
        retries: u32,
        spec: &WorkloadSpec,
        cap: u32,
    ) -> Orchestrator {
        let job = Job::new(
            w.clone(),
            ids.to_vec(),
            defaults,
            retries,
            self.results.clone(),
        )
        .unwrap();
        let opts = OrchestratorOptions {
            lease_hours: Decimal::from(100),
            ..Default::default()
        };
        let mut orch = Orchestrator::submit(job, &self.log, opts).unwrap();
        run_job_sim(&mut orch, spec, &MachineCatalog::sample(), &PoolConfig::uniform(cap), &self.store, "reference")
            .unwrap();
        orch
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("S{i:03}")).collect()
}

fn q(v: f64) -> Option<Quantity> {
    Some(Quantity::Fixed(Decimal::try_from(v).unwrap()))
}

#[derive(Debug, Clone)]
struct Scenario {
    samples: usize,
    capacity: u32,
    retries: u32,
    failure_rate: f64,
    injected: Vec<(usize, Vec<u32>)>,
    seed: u64,
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (1usize..25, 1u32..6, 0u32..4, 0.0f64..0.4, any::<u64>()).prop_flat_map(|(samples, capacity, retries, rate, seed)| {
        prop::collection::vec((0..samples, prop::collection::vec(1u32..5, 1..3)), 0..5).prop_map(move |injected| {
            Scenario {
                samples,
                capacity,
                retries,
                failure_rate: rate,
                injected,
                seed,
            }
        })
    })
}

impl Scenario {
    fn spec(&self) -> WorkloadSpec {
        let mut spec = WorkloadSpec::fixed(self.seed, "fetch", Decimal::new(25, 2), 1.0, 2.0, 20.0);
        spec.rules.insert(
            "align".into(),
            RuleWorkload {
                duration_hours: q(1.5),
                peak_cpu: q(3.0),
                peak_mem_gb: q(10.0),
                peak_disk_gb: q(80.0),
            },
        );
        spec.failure_rate = Some(self.failure_rate);
        let names = ids(self.samples);
        for (i, attempts) in &self.injected {
            if spec.failures.iter().any(|f| f.sample == names[*i]) {
                continue;
            }
            spec.failures.push(InjectedFailure {
                sample: names[*i].clone(),
                attempts: attempts.clone(),
                step: "align".into(),
            });
        }
        spec
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sim_runs_conserve_samples(s in scenario()) {
        let w = parse_workflow_named("props", TWO_RULES).unwrap();
        let names = ids(s.samples);
        let sb = Sandbox::new();
        let orch = sb.run(&w, &names, "e2-standard-4", s.retries, &s.spec(), s.capacity);

        // every log prefix: invariants, conservation, pool capacity
        let text = fs::read_to_string(&sb.log).unwrap();
        let mut state = JobState::default();
        for (i, line) in text.lines().enumerate() {
            let rec: EventRecord = serde_json::from_str(line).unwrap();
            state.apply(&rec).unwrap();
            prop_assert!(state.check_invariants().is_ok(), "line {}: {:?}", i + 1, state.check_invariants());
            let counted: usize = TaskState::ALL.iter().map(|st| state.count(*st)).sum();
            prop_assert_eq!(counted, s.samples);
            for (pool, used) in state.pool_in_use() {
                prop_assert!(*used <= s.capacity, "line {}: pool {} holds {}", i + 1, pool, used);
            }
        }
        prop_assert_eq!(&state, orch.state());

        let report = gflow::backend::JobReport::from_state(orch.state());
        let seen: BTreeSet<&str> = report.outcomes.iter().map(|o| o.sample_id.as_str()).collect();
        prop_assert_eq!(report.outcomes.len(), s.samples);
        prop_assert_eq!(seen.len(), s.samples);
        for o in &report.outcomes {
            prop_assert!(o.state == TaskState::Succeeded || o.state == TaskState::Exhausted, "{:?}", o);
        }

        // one result object per succeeded sample, none otherwise
        let owners: Vec<String> = sb
            .store
            .list(&sb.results)
            .unwrap()
            .into_iter()
            .map(|(u, _)| u.key().split('/').next().unwrap().to_string())
            .collect();
        let succeeded: Vec<String> = report
            .outcomes
            .iter()
            .filter(|o| o.state == TaskState::Succeeded)
            .map(|o| o.sample_id.clone())
            .collect();
        prop_assert_eq!(owners, succeeded);
    }

    #[test]
    fn makespan_respects_lower_bound(
        hours in prop::collection::vec(1i64..2000, 1..15),
        capacity in 1u32..5,
    ) {
        let w = parse_workflow_named("bound", TWO_RULES).unwrap();
        let names = ids(hours.len());
        let mut spec = WorkloadSpec::fixed(1, "fetch", Decimal::ZERO, 1.0, 1.0, 1.0);
        spec.rules.insert("align".into(), RuleWorkload {
            duration_hours: Some(Quantity::Fixed(Decimal::ONE)),
            peak_cpu: q(1.0),
            peak_mem_gb: q(1.0),
            peak_disk_gb: q(1.0),
        });
        let durations: Vec<Decimal> = hours.iter().map(|h| Decimal::new(*h, 2)).collect();
        for (id, d) in names.iter().zip(&durations) {
            spec.overrides.push(Override {
                sample: id.clone(),
                rule: "align".into(),
                values: RuleWorkload { duration_hours: Some(Quantity::Fixed(*d)), ..Default::default() },
            });
        }
        let sb = Sandbox::new();
        let orch = sb.run(&w, &names, "e2-standard-2", 0, &spec, capacity);
        let total: Decimal = durations.iter().sum();
        let longest = durations.iter().copied().max().unwrap();
        let bound = (total / Decimal::from(capacity)).max(longest);
        prop_assert!(orch.state().last_time() >= bound, "{} < {}", orch.state().last_time(), bound);
    }

    #[test]
    fn billing_is_linear_in_prices(s in scenario(), factor in 2i64..6) {
        let w = parse_workflow_named("linear", TWO_RULES).unwrap();
        let sb = Sandbox::new();
        let orch = sb.run(&w, &ids(s.samples), "n2-standard-8", s.retries, &s.spec(), s.capacity);
        let c = MachineCatalog::sample();
        let k = Decimal::from(factor);
        let base = job_cost_report(orch.state(), &c).unwrap();
        let scaled = job_cost_report(orch.state(), &c.scaled(k)).unwrap();
        prop_assert_eq!(scaled.aggregate, base.aggregate * k);
        // the mean is a quotient, exact up to the last of 28 digits
        prop_assert!((scaled.mean_per_sample - base.mean_per_sample * k).abs() < Decimal::new(1, 24));
        for (a, b) in base.samples.iter().zip(&scaled.samples) {
            prop_assert_eq!(b.machine_cost, a.machine_cost * k);
            prop_assert_eq!(b.disk_cost, a.disk_cost * k);
            prop_assert_eq!(b.total, a.total * k);
            prop_assert_eq!(b.hours, a.hours);
        }
    }

    /// Re-running every sample under the recommendation never runs out of
    /// memory or disk when no sample's peaks exceed the profiled ones.
    #[test]
    fn recommendation_is_safe(
        peaks in prop::collection::vec((0.5f64..15.0, 1.0f64..120.0, 10.0f64..900.0), 2..12),
        test_count in 1usize..4,
        headroom in 100i64..150,
    ) {
        let w = parse_workflow_named("safety", TWO_RULES).unwrap();
        let names = ids(peaks.len());
        let test_count = test_count.min(names.len());
        let (tmax_cpu, tmax_mem, tmax_disk) = peaks[..test_count]
            .iter()
            .fold((0.0f64, 0.0f64, 0.0f64), |a, p| (a.0.max(p.0), a.1.max(p.1), a.2.max(p.2)));
        let mut spec = WorkloadSpec::fixed(9, "fetch", Decimal::new(1, 1), 0.5, 1.0, 5.0);
        spec.rules.insert("align".into(), RuleWorkload {
            duration_hours: q(2.0),
            peak_cpu: q(1.0),
            peak_mem_gb: q(1.0),
            peak_disk_gb: q(1.0),
        });
        for (i, (id, p)) in names.iter().zip(&peaks).enumerate() {
            // samples outside the test set stay within the test-set peaks
            let p = if i < test_count { *p } else { (p.0.min(tmax_cpu), p.1.min(tmax_mem), p.2.min(tmax_disk)) };
            spec.overrides.push(Override {
                sample: id.clone(),
                rule: "align".into(),
                values: RuleWorkload {
                    duration_hours: None,
                    peak_cpu: q(p.0),
                    peak_mem_gb: q(p.1),
                    peak_disk_gb: q(p.2),
                },
            });
        }
        let catalog = MachineCatalog::sample();

        let test = Sandbox::new();
        let big = ResourceRequest::new("n2-highmem-64", 1000, DiskClass::Balanced);
        let orch = test.run_on(&w, &names[..test_count], big, 0, &spec, 4);
        let profile = profile_job(orch.state()).unwrap();
        let rec = recommend(&profile, &catalog, Decimal::new(headroom, 2)).unwrap();

        let full = Sandbox::new();
        let tuned = rec.apply(&w);
        let orch = full.run(&tuned, &names, "e2-standard-2", 0, &spec, 4);
        for t in orch.state().tasks() {
            for h in &t.history {
                for step in &h.steps {
                    prop_assert!(
                        !matches!(step.failure, Some(FailureReason::OutOfMemory | FailureReason::DiskFull)),
                        "{} {} failed with {:?} on {}", t.sample_id, step.rule_name, step.failure, step.machine
                    );
                }
            }
            prop_assert_eq!(t.state, TaskState::Succeeded);
        }
    }
}

fn dag_workflow(reads: &[Vec<usize>], order: &[usize]) -> Workflow {
    let mut src = String::new();
    for &i in order {
        let inputs: Vec<String> = reads[i].iter().map(|j| format!("\"{{sampleID}}.o{j}\"")).collect();
        let checks: String = reads[i].iter().map(|j| format!("test -f {{sampleID}}.o{j} && ")).collect();
        src.push_str(&format!("rule step{i}:\n"));
        if !inputs.is_empty() {
            src.push_str(&format!("    input: [{}]\n", inputs.join(", ")));
        }
        src.push_str(&format!("    output: [\"{{sampleID}}.o{i}\"]\n"));
        src.push_str(&format!("    shell: \"{checks}echo {i} > {{output}}\"\n\n"));
    }
    parse_workflow_named("dag", &src).unwrap()
}

fn dag() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<usize>)> {
    (1usize..6).prop_flat_map(|n| {
        let reads: Vec<_> = (0..n)
            .map(|i| prop::sample::subsequence((0..i).collect::<Vec<_>>(), 0..=i))
            .collect();
        (reads, Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Each step checks that its producers' files exist before writing its own.
    #[test]
    fn local_steps_start_after_their_producers((reads, order) in dag()) {
        let w = dag_workflow(&reads, &order);
        let plan = compile_task(&w, "S1", &ResourceRequest::new("e2-standard-2", 10, DiskClass::Standard), "reference")
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = LocalOptions::new(dir.path().join("work"), dir.path().join("logs"));
        let mut started = Vec::new();
        let out = run_task_local(&plan, &dir.path().join("disk"), None, &dir.path().join("logs"), &opts, 1, |e| {
            if let gflow::backend::StepEvent::Started { rule, .. } = e {
                started.push(rule);
            }
        });
        prop_assert_eq!(&out.result, &TaskOutcome::Succeeded);
        for e in &plan.edges {
            let p = started.iter().position(|r| *r == e.producer).unwrap();
            let c = started.iter().position(|r| *r == e.consumer).unwrap();
            prop_assert!(p < c, "{} started before {}", e.consumer, e.producer);
        }
    }
}
