use std::fmt;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use crate::backend::StepRecord;
use crate::catalog::{DiskClass, MachineCatalog, MachineType};
use crate::orchestrator::{JobState, TaskState};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("catalog has no price for disk class '{0}'")]
    UnknownDiskClass(DiskClass),
    #[error("catalog has no machine '{0}'")]
    UnknownMachine(String),
    #[error("negative duration {0} h")]
    NegativeHours(Decimal),
    #[error("sample '{sample}' succeeded without a recorded duration for step '{step}'")]
    MissingDuration { sample: String, step: String },
    #[error("baseline cost must be positive, got {0}")]
    NonpositiveBaseline(Decimal),
}

/// Half-up rounding to cents, applied only when rendering.
pub fn round_cents(d: Decimal) -> Decimal {
    d.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)
}

pub fn currency_symbol(code: &str) -> String {
    match code {
        "USD" => "$".into(),
        "EUR" => "€".into(),
        "GBP" => "£".into(),
        "JPY" => "¥".into(),
        other => format!("{other} "),
    }
}

/// Machine and disk cost of running for `hours`.
pub fn step_cost(
    machine_price: Decimal,
    disk_gb: u32,
    disk_class: DiskClass,
    hours: Decimal,
    catalog: &MachineCatalog,
) -> Result<(Decimal, Decimal), CostError> {
    if hours.is_sign_negative() && !hours.is_zero() {
        return Err(CostError::NegativeHours(hours));
    }
    let disk_price = catalog
        .disk_price(disk_class)
        .ok_or(CostError::UnknownDiskClass(disk_class))?;
    Ok((machine_price * hours, disk_price * Decimal::from(disk_gb) * hours))
}

/// `price × hours + disk price × disk_gb × hours`, unrounded.
pub fn estimate_task_cost(
    machine: &MachineType,
    disk_gb: u32,
    disk_class: DiskClass,
    hours: Decimal,
    catalog: &MachineCatalog,
) -> Result<Decimal, CostError> {
    let (m, d) = step_cost(machine.price_per_hour, disk_gb, disk_class, hours, catalog)?;
    Ok(m + d)
}

/// Relative saving of `optimized` against `baseline`, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reduction {
    pub percent: Decimal,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.percent.round_dp_with_strategy(0, RoundingStrategy::MidpointAwayFromZero);
        write!(f, "{}%", whole.normalize())
    }
}

pub fn compare_costs(baseline: Decimal, optimized: Decimal) -> Result<Reduction, CostError> {
    if baseline <= Decimal::ZERO {
        return Err(CostError::NonpositiveBaseline(baseline));
    }
    Ok(Reduction {
        percent: (Decimal::ONE - optimized / baseline) * Decimal::ONE_HUNDRED,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCost {
    pub sample_id: String,
    pub state: TaskState,
    pub attempts: u32,
    pub hours: Decimal,
    pub machine_cost: Decimal,
    pub disk_cost: Decimal,
    pub total: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: Decimal,
    pub optimized: Decimal,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub currency: String,
    pub samples: Vec<SampleCost>,
    pub aggregate: Decimal,
    pub mean_per_sample: Decimal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

fn bill(records: &[&StepRecord], catalog: &MachineCatalog) -> Result<(Decimal, Decimal, Decimal), CostError> {
    let mut totals = (Decimal::ZERO, Decimal::ZERO, Decimal::ZERO);
    for r in records {
        let machine = catalog
            .machine(&r.machine)
            .ok_or_else(|| CostError::UnknownMachine(r.machine.clone()))?;
        let (m, d) = step_cost(machine.price_per_hour, r.disk_gb, r.disk_class, r.duration_hours, catalog)?;
        totals.0 += r.duration_hours;
        totals.1 += m;
        totals.2 += d;
    }
    Ok(totals)
}

/// Bill every recorded step of every attempt, failed ones included, on the
/// machine and disk it ran with.
pub fn job_cost_report(state: &JobState, catalog: &MachineCatalog) -> Result<CostReport, CostError> {
    let mut samples = Vec::new();
    for t in state.tasks() {
        if t.state == TaskState::Succeeded {
            if let Some(last) = t.history.last() {
                for (step, _) in &t.step_states {
                    if !last.steps.iter().any(|s| &s.rule_name == step) {
                        return Err(CostError::MissingDuration {
                            sample: t.sample_id.clone(),
                            step: step.clone(),
                        });
                    }
                }
            }
        }
        let records: Vec<&StepRecord> = t.history.iter().flat_map(|h| h.steps.iter()).collect();
        let (hours, machine_cost, disk_cost) = bill(&records, catalog)?;
        samples.push(SampleCost {
            sample_id: t.sample_id.clone(),
            state: t.state,
            attempts: t.attempts,
            hours,
            machine_cost,
            disk_cost,
            total: machine_cost + disk_cost,
        });
    }
    Ok(CostReport::new(catalog.currency.clone(), samples))
}

impl CostReport {
    pub fn new(currency: String, samples: Vec<SampleCost>) -> Self {
        let aggregate: Decimal = samples.iter().map(|s| s.total).sum();
        let mean_per_sample = if samples.is_empty() {
            Decimal::ZERO
        } else {
            aggregate / Decimal::from(samples.len())
        };
        Self {
            currency,
            samples,
            aggregate,
            mean_per_sample,
            comparison: None,
        }
    }

    /// Attach a comparison of this report's mean against `baseline`.
    pub fn with_baseline(mut self, baseline: Decimal) -> Result<Self, CostError> {
        self.comparison = Some(Comparison {
            baseline,
            optimized: self.mean_per_sample,
            reduction: compare_costs(baseline, self.mean_per_sample)?,
        });
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        use fmt::Write;
        let sym = currency_symbol(&self.currency);
        let money = |d: Decimal| format!("{sym}{:.2}", round_cents(d));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>8} {:>10} {:>12} {:>12} {:>12}",
            "sample", "state", "attempts", "hours", "machine", "disk", "total"
        );
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:<16} {:<10} {:>8} {:>10} {:>12} {:>12} {:>12}",
                s.sample_id,
                s.state.to_string(),
                s.attempts,
                format!("{:.2}", s.hours),
                money(s.machine_cost),
                money(s.disk_cost),
                money(s.total)
            );
        }
        let _ = writeln!(out, "aggregate        {}", money(self.aggregate));
        let _ = write!(out, "mean per sample  {}", money(self.mean_per_sample));
        if let Some(c) = &self.comparison {
            let _ = write!(
                out,
                "\nbaseline {} vs optimized {}: {} reduction",
                money(c.baseline),
                money(c.optimized),
                c.reduction
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::DiskPrice;
    use rust_decimal_macros::dec;

    fn catalog(machine_price: Decimal, disk_price: Decimal) -> MachineCatalog {
        MachineCatalog::new(
            "USD",
            vec![MachineType::from_name("n2-standard-4", machine_price).unwrap()],
            DiskClass::ALL
                .into_iter()
                .map(|c| DiskPrice {
                    disk_class: c,
                    price_per_gb_hour: disk_price,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_arithmetic() {
        let cat = catalog(dec!(0.20), dec!(0.0001));
        let m = cat.machine("n2-standard-4").unwrap();
        assert_eq!(estimate_task_cost(m, 250, DiskClass::Balanced, dec!(7), &cat).unwrap(), dec!(1.575));
        assert_eq!(estimate_task_cost(m, 250, DiskClass::Balanced, dec!(0), &cat).unwrap(), dec!(0));
    }

    #[test]
    fn calibrated_per_sample_cost() {
        // 1.72 over 7 h with a 100 GB disk at 0.0001/GB-h
        let cat = catalog(dec!(1.72) / dec!(7) - dec!(0.01), dec!(0.0001));
        let m = cat.machine("n2-standard-4").unwrap();
        let c = estimate_task_cost(m, 100, DiskClass::Standard, dec!(7), &cat).unwrap();
        assert_eq!(round_cents(c), dec!(1.72));
    }

    #[test]
    fn reduction_rendering() {
        let r = compare_costs(dec!(7.34), dec!(1.72)).unwrap();
        assert!((r.percent - dec!(76.57)).abs() <= dec!(0.01), "{}", r.percent);
        assert_eq!(r.to_string(), "77%");
        assert_eq!(compare_costs(dec!(3), dec!(3)).unwrap().to_string(), "0%");
        assert_eq!(compare_costs(dec!(1.00), dec!(0.00)).unwrap().to_string(), "100%");
        assert_eq!(compare_costs(dec!(1), dec!(1.5)).unwrap().to_string(), "-50%");
        assert!(matches!(compare_costs(dec!(0), dec!(1)), Err(CostError::NonpositiveBaseline(_))));
    }

    #[test]
    fn cents_round_half_up() {
        assert_eq!(round_cents(dec!(0.125)), dec!(0.13));
        assert_eq!(round_cents(dec!(0.12)), dec!(0.12));
        assert_eq!(round_cents(dec!(0.1249)), dec!(0.12));
    }

    #[test]
    fn empty_report() {
        let r = job_cost_report(&JobState::default(), &MachineCatalog::sample()).unwrap();
        assert!(r.samples.is_empty());
        assert_eq!(r.aggregate, Decimal::ZERO);
        assert!(r.render_table().contains("$0.00"));
    }
}
