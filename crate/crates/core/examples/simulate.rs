//! Run twelve samples through the simulator and print the cost report.
//!
//!     cargo run --example simulate

use std::path::Path;

use rust_decimal_macros::dec;

use gflow::backend::{run_job_sim, PoolConfig, WorkloadSpec};
use gflow::catalog::{DiskClass, MachineCatalog};
use gflow::optimizer::job_cost_report;
use gflow::orchestrator::{parse_sample_list, Job, Orchestrator, OrchestratorOptions};
use gflow::project::load_job_file;
use gflow::store::{ObjectStore, StoreUri};
use gflow::workflow::ResourceRequest;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let catalog = MachineCatalog::sample();
    let w = load_job_file(&data.join("rnaseq.snakemake"), &catalog)?;
    let samples = parse_sample_list(&std::fs::read_to_string(data.join("rnaseq_samples.txt"))?)?;
    let spec = WorkloadSpec::load(&data.join("rnaseq_workload.json"))?;

    let dir = tempfile::tempdir()?;
    let store = ObjectStore::open(dir.path().join("store"))?;
    store.create_bucket("rnaseq-results")?;
    let job = Job::new(
        w,
        samples,
        ResourceRequest::new("e2-standard-16", 100, DiskClass::Balanced),
        3,
        StoreUri::new("rnaseq-results", "")?,
    )?;
    let opts = OrchestratorOptions {
        concurrency: 4,
        lease_hours: dec!(12),
        ..Default::default()
    };
    let mut orch = Orchestrator::submit(job, &dir.path().join("events.jsonl"), opts)?;
    let report = run_job_sim(&mut orch, &spec, &catalog, &PoolConfig::uniform(4), &store, "reference")?;

    println!("job {}: makespan {} h on 4 slots", report.job_id, report.makespan_hours);
    println!("{}", job_cost_report(orch.state(), &catalog)?.render_table());
    Ok(())
}
