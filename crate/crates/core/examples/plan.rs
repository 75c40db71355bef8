//! Parse a workflow file, check it against the sample catalog, and print
//! one sample's step plan as JSON.
//!
//!     cargo run --example plan -- [workflow] [sample]

use std::path::PathBuf;

use gflow::catalog::{DiskClass, MachineCatalog};
use gflow::project::load_job_file;
use gflow::workflow::{compile_task, ResourceRequest};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data/fastq2bam.snakemake"));
    let sample = args.next().unwrap_or_else(|| "NA12878".into());

    let w = load_job_file(&path, &MachineCatalog::sample())?;
    println!("{} rules; round-trip source:\n{}", w.rules.len(), w.to_source());

    let defaults = ResourceRequest::new("e2-standard-16", 100, DiskClass::Balanced);
    let plan = compile_task(&w, &sample, &defaults, "reference")?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    Ok(())
}
