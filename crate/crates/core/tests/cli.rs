use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rust_decimal::Decimal;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
        for e in walkdir::WalkDir::new(&data) {
            let e = e.unwrap();
            let to = dir.path().join("data").join(e.path().strip_prefix(&data).unwrap());
            if e.file_type().is_dir() {
                fs::create_dir_all(&to).unwrap();
            } else {
                fs::copy(e.path(), &to).unwrap();
            }
        }
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn gflow(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gflow"));
        for (k, _) in std::env::vars() {
            if k.starts_with("GFLOW_") {
                cmd.env_remove(k);
            }
        }
        cmd.arg("--store-root").arg(self.path("store")).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.gflow(args);
        assert_eq!(out.status.code(), Some(0), "gflow {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn create_sim(&self, workload: &str) {
        self.ok(&[
            "create",
            &self.arg("data/rnaseq.snakemake"),
            "--samples",
            &self.arg("data/rnaseq_samples.txt"),
            "--backend",
            "sim",
            "--workload",
            &self.arg(workload),
        ]);
    }
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

fn aggregate(json: &str) -> Decimal {
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    let agg = v
        .get("aggregate")
        .or_else(|| v.pointer("/final_cost/aggregate"))
        .unwrap_or_else(|| panic!("no aggregate in {json}"));
    agg.as_str().map(|s| s.parse().unwrap()).unwrap_or_else(|| agg.to_string().parse().unwrap())
}

#[test]
fn plan_prints_steps_and_edges() {
    let env = Env::new();
    let out = env.ok(&["plan", &env.arg("data/fastq2bam.snakemake"), "--sample", "NA12878"]);
    assert!(out.contains("workflow fastq2bam (3 rules), sample NA12878"), "{out}");
    assert!(out.contains("download -> align"), "{out}");
    assert!(out.contains("align -> refine"), "{out}");
    assert!(out.lines().filter(|l| l.trim_start().starts_with('$')).all(|l| l.contains("NA12878")));

    let json = env.ok(&["plan", &env.arg("data/fastq2bam.snakemake"), "--sample", "NA12878", "--json"]);
    let plan: gflow::workflow::TaskPlan = serde_json::from_str(&json).unwrap();
    assert_eq!(plan.steps.len(), 3);
    assert_eq!(plan.edges.len(), 2);
    assert_eq!(plan.steps[0].resources.machine.as_deref(), Some("e2-standard-16"));
}

#[test]
fn parse_errors_exit_2() {
    let env = Env::new();
    fs::write(env.path("bad.snakemake"), "rule a:\n    gpu: \"1\"\n    shell: \"x\"\n").unwrap();
    let out = env.gflow(&["plan", &env.arg("bad.snakemake")]);
    assert_eq!(code(&out), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gpu") && err.contains(":2:"), "{err}");

    fs::write(env.path("dups.txt"), "S1\nS2\nS1\n").unwrap();
    let out = env.gflow(&["create", &env.arg("data/rnaseq.snakemake"), "--samples", &env.arg("dups.txt")]);
    assert_eq!(code(&out), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = env.gflow(&["plan", &env.arg("data/rnaseq.snakemake"), "--headroom", "0.9"]);
    assert_eq!(code(&out), Some(2));
}

#[test]
fn lifecycle_out_of_order_exits_3() {
    let env = Env::new();
    for args in [["optimize", "nothing"], ["run", "nothing"], ["teardown", "nothing"], ["cost", "nothing"]] {
        let out = env.gflow(&args);
        assert_eq!(code(&out), Some(3), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("nothing"));
    }
    env.create_sim("data/rnaseq_workload.json");
    let again = env.gflow(&[
        "create",
        &env.arg("data/rnaseq.snakemake"),
        "--samples",
        &env.arg("data/rnaseq_samples.txt"),
    ]);
    assert_eq!(code(&again), Some(3));
}

#[test]
fn sim_lifecycle_and_preserved_cost() {
    let env = Env::new();
    env.create_sim("data/rnaseq_workload.json");
    let opt = env.ok(&["optimize", "rnaseq"]);
    assert!(opt.contains("align"), "{opt}");
    let run = env.ok(&["run", "rnaseq", "--json"]);
    let live = aggregate(&run);
    assert!(live > Decimal::ZERO);
    assert_eq!(aggregate(&env.ok(&["cost", "rnaseq", "--json"])), live);
    let status = env.ok(&["status", "rnaseq"]);
    assert!(status.contains("12"), "{status}");

    let dst = env.arg("fetched");
    assert_eq!(env.ok(&["fetch", "store://rnaseq-results/", &dst]).trim(), "copied 12, skipped 0");
    assert_eq!(env.ok(&["fetch", "store://rnaseq-results/", &dst]).trim(), "copied 0, skipped 12");

    let down = env.ok(&["teardown", "rnaseq"]);
    assert!(down.contains("cost record kept"), "{down}");
    assert!(!env.path("store/rnaseq-results").exists());
    assert_eq!(aggregate(&env.ok(&["cost", "rnaseq", "--json"])), live);

    env.ok(&["teardown", "rnaseq", "--all"]);
    assert_eq!(code(&env.gflow(&["cost", "rnaseq"])), Some(3));
}

#[test]
fn exhausted_samples_exit_1() {
    let env = Env::new();
    let text = fs::read_to_string(env.path("data/rnaseq_workload.json")).unwrap();
    let text = text.replace("\"attempts\": [1]", "\"attempts\": [1, 2]");
    fs::write(env.path("always_fails.json"), text).unwrap();
    env.create_sim("always_fails.json");
    let out = env.gflow(&["run", "rnaseq", "--defaults", "--max-retries", "1"]);
    assert_eq!(code(&out), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SRR0003"));
    let results = walkdir::WalkDir::new(env.path("store/rnaseq-results"))
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .count();
    assert_eq!(results, 11);
}
