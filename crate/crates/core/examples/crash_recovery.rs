//! Stop a simulated job partway, tear its last log line, recover from the
//! event log and finish.
//!
//!     cargo run --example crash_recovery

use std::io::Write;
use std::path::Path;

use rust_decimal_macros::dec;

use gflow::backend::{run_job_sim, PoolConfig, WorkloadSpec};
use gflow::catalog::{DiskClass, MachineCatalog};
use gflow::orchestrator::{parse_sample_list, Job, Orchestrator, OrchestratorOptions, TaskState};
use gflow::project::load_job_file;
use gflow::store::{ObjectStore, StoreUri};
use gflow::workflow::ResourceRequest;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let catalog = MachineCatalog::sample();
    let w = load_job_file(&data.join("rnaseq.snakemake"), &catalog)?;
    let samples = parse_sample_list(&std::fs::read_to_string(data.join("rnaseq_samples.txt"))?)?;
    let spec = WorkloadSpec::load(&data.join("rnaseq_workload.json"))?;
    let pools = PoolConfig::uniform(4);

    let dir = tempfile::tempdir()?;
    let store = ObjectStore::open(dir.path().join("store"))?;
    store.create_bucket("results")?;
    let log = dir.path().join("events.jsonl");
    let job = Job::new(
        w,
        samples,
        ResourceRequest::new("e2-standard-16", 100, DiskClass::Balanced),
        3,
        StoreUri::new("results", "")?,
    )?;
    let opts = OrchestratorOptions {
        lease_hours: dec!(12),
        ..Default::default()
    };

    let mut orch = Orchestrator::submit(job, &log, opts)?;
    orch.set_halt_after(Some(60));
    let err = run_job_sim(&mut orch, &spec, &catalog, &pools, &store, "reference").unwrap_err();
    let s = orch.state();
    println!(
        "stopped: {err}; {} succeeded, {} running",
        s.count(TaskState::Succeeded),
        s.count(TaskState::Running)
    );
    drop(orch);

    std::fs::OpenOptions::new().append(true).open(&log)?.write_all(b"{\"seq\":61,\"ti")?;

    let (mut orch, rep) = Orchestrator::recover(&log, false)?;
    println!(
        "recovered {} events; cut torn line {:?}; requeued {:?}",
        rep.events_replayed, rep.truncated_line, rep.lost
    );
    run_job_sim(&mut orch, &spec, &catalog, &pools, &store, "reference")?;
    let results = store.list(&StoreUri::new("results", "")?)?;
    println!(
        "done: {} succeeded, {} result objects",
        orch.state().count(TaskState::Succeeded),
        results.len()
    );
    Ok(())
}
