//! The whole project cycle on the local backend: create buckets, profile
//! test samples, run with the tuned machines, tear down and read back the
//! preserved cost.
//!
//!     cargo run --example lifecycle

use std::fs;
use std::path::Path;

use gflow::backend::BackendKind;
use gflow::orchestrator::parse_sample_list;
use gflow::project::{
    cost_query, create_architecture, fetch, find_optimized_param, load_job_file, remove_project, run_pipeline,
    CreateOptions, EngineConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let dir = tempfile::tempdir()?;
    let store_root = dir.path().join("store");

    let config = EngineConfig {
        backend: BackendKind::Local,
        ..Default::default()
    };
    let catalog = config.load_catalog()?;
    let w = load_job_file(&data.join("fastq2bam.snakemake"), &catalog)?;
    let samples = parse_sample_list(&fs::read_to_string(data.join("samples.txt"))?)?;

    let mut env = create_architecture(
        &w,
        samples,
        &config,
        &CreateOptions {
            store_root: store_root.clone(),
            project_id: None,
            base_dir: data.clone(),
        },
    )?;
    let b = &env.buckets;
    println!("created {}: buckets {}, {}, {}", env.project_id, b.reference, b.results, b.staging);

    let opt = find_optimized_param(&mut env)?;
    for (rule, r) in &opt.recommendation.rules {
        println!("  {rule}: {} {} GB", r.machine, r.disk_gb);
    }

    let out = run_pipeline(&mut env, Some(&opt.recommendation))?;
    println!("{}", out.cost.render_table());
    // local steps take milliseconds, so the table rounds to zero
    println!("unrounded aggregate ${}", out.cost.aggregate);

    let copied = fetch(&store_root, &env.results_uri(), &dir.path().join("results"))?;
    println!("fetched {} result files", copied.copied);

    let removed = remove_project(&store_root, &env.project_id, false)?;
    println!("removed {} buckets", removed.buckets_removed.len());
    let after = cost_query(&store_root, &env.project_id)?;
    if let Some(a) = after.aggregate() {
        println!("cost after teardown ${a}");
    }
    Ok(())
}
