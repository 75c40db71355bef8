//! Size a machine for one profiled rule and price it against the default.
//!
//!     cargo run --example recommend

use std::collections::BTreeMap;

use rust_decimal_macros::dec;

use gflow::catalog::{feasible_machines, DiskClass, MachineCatalog};
use gflow::optimizer::{
    compare_costs, estimate_task_cost, recommend, round_cents, ResourceProfile, RuleProfile, DEFAULT_HEADROOM,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = MachineCatalog::sample();

    // peaks observed on a few test samples of a 7 h alignment step
    let mut rules = BTreeMap::new();
    rules.insert(
        "align".to_string(),
        RuleProfile {
            peak_cpu_cores: 7.0,
            peak_mem_gb: 56.0,
            peak_disk_gb: 225.0,
            mean_duration_hours: dec!(7),
            samples: 3,
            requested_disk_class: None,
        },
    );
    let profile = ResourceProfile { rules };

    let rec = recommend(&profile, &catalog, DEFAULT_HEADROOM)?;
    let pick = &rec.rules["align"];
    println!("recommended {} with {} GB {}", pick.machine, pick.disk_gb, pick.disk_class);

    println!("cheapest five that fit 7.7 cores and 61.6 GB:");
    for m in feasible_machines(&catalog, 7.7, 61.6).iter().take(5) {
        println!("  {:<16} {:>3} vCPU {:>4} GB  ${}/h", m.name, m.vcpu, m.mem_gb, m.price_per_hour);
    }

    let hours = dec!(7);
    let default = catalog.machine("n2-highmem-16").expect("in catalog");
    let baseline = estimate_task_cost(default, 500, DiskClass::Balanced, hours, &catalog)?;
    let tuned = estimate_task_cost(catalog.machine(&pick.machine).expect("in catalog"), pick.disk_gb, pick.disk_class, hours, &catalog)?;
    println!(
        "per sample: ${} on n2-highmem-16/500 GB vs ${} tuned, {} less",
        round_cents(baseline),
        round_cents(tuned),
        compare_costs(baseline, tuned)?
    );
    Ok(())
}
