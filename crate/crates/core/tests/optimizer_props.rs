use std::collections::BTreeMap;

use proptest::prelude::*;
use rust_decimal::Decimal;

use gflow::catalog::{
    feasible_machines, parse_machine_name, DiskClass, DiskPrice, Family, MachineCatalog, MachineType, Series,
};
use gflow::optimizer::{compare_costs, recommend, requirement, ResourceProfile, RuleProfile};

fn catalog_of(machines: Vec<MachineType>) -> MachineCatalog {
    let disks = DiskClass::ALL
        .into_iter()
        .map(|c| DiskPrice {
            disk_class: c,
            price_per_gb_hour: Decimal::new(1, 4),
        })
        .collect();
    MachineCatalog::new("USD", machines, disks).unwrap()
}

/// Up to 50 distinct shapes with coarse prices, so ties are common.
fn random_catalog() -> impl Strategy<Value = MachineCatalog> {
    let names: Vec<String> = MachineCatalog::sample().machines.into_iter().map(|m| m.name).collect();
    prop::sample::subsequence(names, 1..=50)
        .prop_flat_map(|names| {
            let n = names.len();
            (Just(names), prop::collection::vec(1i64..20, n))
        })
        .prop_map(|(names, prices)| {
            catalog_of(
                names
                    .iter()
                    .zip(prices)
                    .map(|(n, p)| MachineType::from_name(n, Decimal::new(p, 1)).unwrap())
                    .collect(),
            )
        })
}

fn brute_force(c: &MachineCatalog, cpu: f64, mem: f64) -> Vec<String> {
    let mut fit: Vec<&MachineType> = Vec::new();
    for m in &c.machines {
        if f64::from(m.vcpu) >= cpu && m.mem_gb >= mem {
            fit.push(m);
        }
    }
    // selection sort on (price, vcpu, name)
    let mut out = Vec::new();
    while !fit.is_empty() {
        let mut best = 0;
        for i in 1..fit.len() {
            let (a, b) = (fit[i], fit[best]);
            if (a.price_per_hour, a.vcpu, &a.name) < (b.price_per_hour, b.vcpu, &b.name) {
                best = i;
            }
        }
        out.push(fit.remove(best).name.clone());
    }
    out
}

fn profile(cpu: f64, mem: f64, disk: f64) -> ResourceProfile {
    let mut rules = BTreeMap::new();
    rules.insert(
        "align".to_string(),
        RuleProfile {
            peak_cpu_cores: cpu,
            peak_mem_gb: mem,
            peak_disk_gb: disk,
            mean_duration_hours: Decimal::ONE,
            samples: 1,
            requested_disk_class: None,
        },
    );
    ResourceProfile { rules }
}

fn headroom() -> impl Strategy<Value = Decimal> {
    (100i64..300).prop_map(|h| Decimal::new(h, 2))
}

proptest! {
    #[test]
    fn machine_names_in_language_parse(
        series in "(e2|n2|n1)",
        family in "(standard|highmem|highcpu)",
        count in "[1-9][0-9]{0,6}",
    ) {
        let name = format!("{series}-{family}-{count}");
        let shape = parse_machine_name(&name).unwrap();
        let ratio = match shape.family {
            Family::Standard => 4,
            Family::Highmem => 8,
            Family::Highcpu => 1,
        };
        prop_assert_eq!(shape.vcpu, count.parse::<u32>().unwrap());
        prop_assert_eq!(shape.mem_gb, shape.vcpu * ratio);
        prop_assert_eq!(shape.series.to_string(), series);
    }

    #[test]
    fn names_outside_language_fail(name in "[a-z0-9-]{0,20}") {
        let in_language = {
            let parts: Vec<&str> = name.split('-').collect();
            parts.len() == 3
                && ["e2", "n2", "n1"].contains(&parts[0])
                && ["standard", "highmem", "highcpu"].contains(&parts[1])
                && !parts[2].is_empty()
                && !parts[2].starts_with('0')
                && parts[2].bytes().all(|b| b.is_ascii_digit())
        };
        prop_assume!(!in_language);
        prop_assert!(parse_machine_name(&name).is_err(), "{} parsed", name);
    }

    #[test]
    fn feasible_machines_match_brute_force(c in random_catalog(), cpu in 0.0f64..70.0, mem in 0.0f64..600.0) {
        let got: Vec<String> = feasible_machines(&c, cpu, mem).iter().map(|m| m.name.clone()).collect();
        prop_assert_eq!(got, brute_force(&c, cpu, mem));
    }

    #[test]
    fn more_memory_never_adds_machines(
        c in random_catalog(),
        cpu in 0.0f64..70.0,
        mem in 0.0f64..600.0,
        extra in 0.0f64..200.0,
    ) {
        let low: Vec<&str> = feasible_machines(&c, cpu, mem).iter().map(|m| m.name.as_str()).collect();
        for m in feasible_machines(&c, cpu, mem + extra) {
            prop_assert!(low.contains(&m.name.as_str()), "{} appeared", m.name);
        }
    }

    #[test]
    fn recommendation_is_cheapest_feasible(
        c in random_catalog(),
        cpu in 0.1f64..40.0,
        mem in 0.1f64..300.0,
        h in headroom(),
    ) {
        let exact = {
            let (nc, nm) = (requirement(cpu, h), requirement(mem, h));
            c.machines
                .iter()
                .filter(|m| Decimal::from(m.vcpu) >= nc && Decimal::try_from(m.mem_gb).unwrap() >= nm)
                .min_by(|a, b| (a.price_per_hour, a.vcpu, &a.name).cmp(&(b.price_per_hour, b.vcpu, &b.name)))
                .map(|m| m.name.clone())
        };
        match recommend(&profile(cpu, mem, 10.0), &c, h) {
            Ok(r) => prop_assert_eq!(Some(&r.rules["align"].machine), exact.as_ref()),
            Err(_) => prop_assert!(exact.is_none()),
        }
    }

    #[test]
    fn headroom_never_lowers_price_or_disk(
        cpu in 0.1f64..20.0,
        mem in 0.1f64..150.0,
        disk in 0.0f64..2000.0,
        h1 in headroom(),
        dh in 0i64..100,
    ) {
        let c = MachineCatalog::sample();
        let h2 = h1 + Decimal::new(dh, 2);
        let p = profile(cpu, mem, disk);
        if let (Ok(a), Ok(b)) = (recommend(&p, &c, h1), recommend(&p, &c, h2)) {
            let (a, b) = (&a.rules["align"], &b.rules["align"]);
            let (ma, mb) = (c.machine(&a.machine).unwrap(), c.machine(&b.machine).unwrap());
            prop_assert!(mb.price_per_hour >= ma.price_per_hour);
            prop_assert!(b.disk_gb >= a.disk_gb);
        }
    }

    /// Within one series and family price grows with size, so vCPU and
    /// memory are monotone in headroom too.
    #[test]
    fn headroom_monotone_within_a_family(
        series in prop::sample::select(vec![Series::E2, Series::N2, Series::N1]),
        family in prop::sample::select(vec![Family::Standard, Family::Highmem, Family::Highcpu]),
        cpu in 0.1f64..20.0,
        mem in 0.1f64..150.0,
        h1 in headroom(),
        dh in 0i64..100,
    ) {
        let machines: Vec<MachineType> = MachineCatalog::sample()
            .machines
            .into_iter()
            .filter(|m| m.series == series && m.family == family)
            .collect();
        let c = catalog_of(machines);
        let h2 = h1 + Decimal::new(dh, 2);
        let p = profile(cpu, mem, 50.0);
        match (recommend(&p, &c, h1), recommend(&p, &c, h2)) {
            (Ok(a), Ok(b)) => {
                let ma = c.machine(&a.rules["align"].machine).unwrap();
                let mb = c.machine(&b.rules["align"].machine).unwrap();
                prop_assert!(mb.vcpu >= ma.vcpu);
                prop_assert!(mb.mem_gb >= ma.mem_gb);
            }
            (Err(_), Ok(_)) => prop_assert!(false, "larger headroom became feasible"),
            _ => {}
        }
    }

    #[test]
    fn reduction_signs_oppose(b in 1i64..100_000, o in 1i64..100_000) {
        let (b, o) = (Decimal::new(b, 2), Decimal::new(o, 2));
        let fwd = compare_costs(b, o).unwrap().percent;
        let back = compare_costs(o, b).unwrap().percent;
        prop_assert_eq!(fwd.is_sign_positive() && !fwd.is_zero(), back.is_sign_negative() && !back.is_zero());
        prop_assert_eq!(fwd.is_zero(), back.is_zero());
        // (1 - o/b) = -(1 - b/o) * o/b
        let lhs = fwd;
        let rhs = -back * o / b;
        prop_assert!((lhs - rhs).abs() < Decimal::new(1, 18), "{} vs {}", lhs, rhs);
    }
}

/// Across families the cheapest machine for a larger need can have fewer
/// cores: more headroom may swap a cheap highcpu shape for a small highmem one.
#[test]
fn headroom_can_trade_cores_for_memory() {
    let c = catalog_of(vec![
        MachineType::from_name("e2-highcpu-16", Decimal::new(40, 2)).unwrap(),
        MachineType::from_name("e2-highmem-4", Decimal::new(50, 2)).unwrap(),
    ]);
    let p = profile(2.0, 14.0, 10.0);
    let a = recommend(&p, &c, Decimal::new(11, 1)).unwrap();
    let b = recommend(&p, &c, Decimal::new(12, 1)).unwrap();
    assert_eq!(a.rules["align"].machine, "e2-highcpu-16");
    assert_eq!(b.rules["align"].machine, "e2-highmem-4");
}
