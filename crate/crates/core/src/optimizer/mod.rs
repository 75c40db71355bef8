//! Resource profiling, machine recommendation and billing.

mod cost;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rust_decimal::prelude::{FromPrimitive, ToPrimitive};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::backend::StepRecord;
use crate::catalog::{feasible_machines, DiskClass, MachineCatalog};
use crate::orchestrator::JobState;
use crate::workflow::{ResourceRequest, Workflow, MIN_DISK_GB};

pub use cost::{
    compare_costs, currency_symbol, estimate_task_cost, job_cost_report, round_cents, step_cost, Comparison,
    CostError, CostReport, Reduction, SampleCost,
};

pub const DEFAULT_HEADROOM: Decimal = Decimal::from_parts(11, 0, 0, false, 1);
pub const DEFAULT_TEST_SAMPLES: u32 = 3;
pub const DISK_GRANULARITY_GB: u32 = 10;
const REQUIREMENT_DP: u32 = 6;

/// Observed needs of one rule over the test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleProfile {
    pub peak_cpu_cores: f64,
    pub peak_mem_gb: f64,
    pub peak_disk_gb: f64,
    pub mean_duration_hours: Decimal,
    /// Distinct samples with a successful observation.
    pub samples: u32,
    /// Disk class the rule asked for explicitly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested_disk_class: Option<DiskClass>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub rules: BTreeMap<String, RuleProfile>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileError {
    #[error("no test task completed rule(s) {} under the default resources; try a larger default machine", .rules.join(", "))]
    AllTestTasksFailed { rules: Vec<String> },
}

/// Aggregate successful step observations: maxima of peaks, mean duration.
pub fn profile_records<'a>(
    rules: &[(String, Option<DiskClass>)],
    observations: impl IntoIterator<Item = (&'a str, &'a StepRecord)>,
) -> Result<ResourceProfile, ProfileError> {
    struct Acc {
        cpu: f64,
        mem: f64,
        disk: f64,
        hours: Decimal,
        n: u32,
        samples: BTreeSet<String>,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for (sample, rec) in observations {
        if !rec.succeeded() {
            continue;
        }
        let a = acc.entry(rec.rule_name.as_str()).or_insert(Acc {
            cpu: 0.0,
            mem: 0.0,
            disk: 0.0,
            hours: Decimal::ZERO,
            n: 0,
            samples: BTreeSet::new(),
        });
        a.cpu = a.cpu.max(rec.peak_cpu_cores);
        a.mem = a.mem.max(rec.peak_mem_gb);
        a.disk = a.disk.max(rec.peak_disk_gb);
        a.hours += rec.duration_hours;
        a.n += 1;
        a.samples.insert(sample.to_string());
    }
    let missing: Vec<String> = rules
        .iter()
        .filter(|(r, _)| !acc.contains_key(r.as_str()))
        .map(|(r, _)| r.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ProfileError::AllTestTasksFailed { rules: missing });
    }
    let profile = rules
        .iter()
        .map(|(rule, class)| {
            let a = &acc[rule.as_str()];
            (
                rule.clone(),
                RuleProfile {
                    peak_cpu_cores: a.cpu,
                    peak_mem_gb: a.mem,
                    peak_disk_gb: a.disk,
                    mean_duration_hours: a.hours / Decimal::from(a.n),
                    samples: a.samples.len() as u32,
                    requested_disk_class: *class,
                },
            )
        })
        .collect();
    Ok(ResourceProfile { rules: profile })
}

/// Profile every step observation recorded in a job's log.
pub fn profile_job(state: &JobState) -> Result<ResourceProfile, ProfileError> {
    let rules: Vec<(String, Option<DiskClass>)> = state
        .job()
        .map(|j| {
            j.workflow
                .rules
                .iter()
                .map(|r| (r.name.clone(), r.resources.as_ref().and_then(|res| res.disk_class)))
                .collect()
        })
        .unwrap_or_default();
    let observations = state.tasks().flat_map(|t| {
        t.history
            .iter()
            .flat_map(move |h| h.steps.iter().map(move |s| (t.sample_id.as_str(), s)))
    });
    profile_records(&rules, observations)
}

/// Number of test samples: the workflow's setting or the engine default,
/// clamped to the sample count.
pub fn test_sample_count(workflow: &Workflow, engine_default: u32, available: usize) -> usize {
    let wanted = workflow.testsamplesize.unwrap_or(engine_default).max(1) as usize;
    wanted.min(available)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Cpu,
    Memory,
    CpuAndMemory,
    /// Each bound alone is satisfiable, but no machine meets both.
    Combination,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cpu => "cpu",
            Self::Memory => "memory",
            Self::CpuAndMemory => "cpu and memory",
            Self::Combination => "cpu/memory combination",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RecommendError {
    #[error("headroom must be at least 1, got {0}")]
    HeadroomBelowOne(Decimal),
    #[error("rule '{rule}': no machine offers {need_vcpu} vCPU and {need_mem_gb} GB (binding constraint: {constraint})")]
    NoFeasibleMachine {
        rule: String,
        constraint: Constraint,
        need_vcpu: Decimal,
        need_mem_gb: Decimal,
    },
    #[error("optparams: {0}")]
    Invalid(String),
    #[error("optparams: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRecommendation {
    pub machine: String,
    pub disk_gb: u32,
    pub disk_class: DiskClass,
}

/// Per-rule resources: the optparams artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommendation {
    pub headroom: Decimal,
    pub rules: BTreeMap<String, RuleRecommendation>,
}

/// `peak × headroom`, snapped to a fixed number of decimals so that float
/// noise in the peak cannot tip a boundary comparison.
pub fn requirement(peak: f64, headroom: Decimal) -> Decimal {
    let peak = Decimal::from_f64(peak.max(0.0)).unwrap_or(Decimal::MAX);
    (peak * headroom).round_dp(REQUIREMENT_DP)
}

/// Smallest multiple of the disk granularity covering `need`, at least
/// the minimum disk.
pub fn disk_size_for(need_gb: Decimal) -> u32 {
    let step = Decimal::from(DISK_GRANULARITY_GB);
    let rounded = (need_gb / step).ceil() * step;
    rounded.to_u32().unwrap_or(u32::MAX).max(MIN_DISK_GB)
}

fn binding_constraint(catalog: &MachineCatalog, cpu: f64, mem: f64) -> Constraint {
    let cpu_ok = catalog.machines.iter().any(|m| f64::from(m.vcpu) >= cpu);
    let mem_ok = catalog.machines.iter().any(|m| m.mem_gb >= mem);
    match (cpu_ok, mem_ok) {
        (false, false) => Constraint::CpuAndMemory,
        (false, true) => Constraint::Cpu,
        (true, false) => Constraint::Memory,
        (true, true) => Constraint::Combination,
    }
}

/// Cheapest feasible machine and rounded disk per rule.
pub fn recommend(
    p: &ResourceProfile,
    catalog: &MachineCatalog,
    headroom: Decimal,
) -> Result<Recommendation, RecommendError> {
    if headroom < Decimal::ONE {
        return Err(RecommendError::HeadroomBelowOne(headroom));
    }
    let mut rules = BTreeMap::new();
    for (rule, prof) in &p.rules {
        let cpu = requirement(prof.peak_cpu_cores, headroom);
        let mem = requirement(prof.peak_mem_gb, headroom);
        let disk = requirement(prof.peak_disk_gb, headroom);
        let (cpu_f, mem_f) = (cpu.to_f64().unwrap_or(f64::MAX), mem.to_f64().unwrap_or(f64::MAX));
        let machine = feasible_machines(catalog, cpu_f, mem_f)
            .first()
            .map(|m| m.name.clone())
            .ok_or_else(|| RecommendError::NoFeasibleMachine {
                rule: rule.clone(),
                constraint: binding_constraint(catalog, cpu_f, mem_f),
                need_vcpu: cpu,
                need_mem_gb: mem,
            })?;
        rules.insert(
            rule.clone(),
            RuleRecommendation {
                machine,
                disk_gb: disk_size_for(disk),
                disk_class: prof.requested_disk_class.unwrap_or(DiskClass::Balanced),
            },
        );
    }
    Ok(Recommendation { headroom, rules })
}

impl Recommendation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recommendation serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RecommendError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, RecommendError> {
        let text = std::fs::read_to_string(path).map_err(|source| RecommendError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Check a (possibly hand-edited) recommendation against a workflow and
    /// catalog.
    pub fn validate(&self, w: &Workflow, catalog: &MachineCatalog) -> Result<(), RecommendError> {
        if self.headroom < Decimal::ONE {
            return Err(RecommendError::HeadroomBelowOne(self.headroom));
        }
        for (rule, r) in &self.rules {
            if w.rule(rule).is_none() {
                return Err(RecommendError::Invalid(format!("rule '{rule}' is not in the workflow")));
            }
            if catalog.machine(&r.machine).is_none() {
                return Err(RecommendError::Invalid(format!(
                    "rule '{rule}': machine '{}' is not in the catalog",
                    r.machine
                )));
            }
            if r.disk_gb < MIN_DISK_GB {
                return Err(RecommendError::Invalid(format!(
                    "rule '{rule}': disk_gb {} is below the {MIN_DISK_GB} GB minimum",
                    r.disk_gb
                )));
            }
        }
        Ok(())
    }

    /// The workflow with each recommended rule's resources replaced.
    pub fn apply(&self, w: &Workflow) -> Workflow {
        let mut out = w.clone();
        for rule in &mut out.rules {
            if let Some(r) = self.rules.get(&rule.name) {
                rule.resources = Some(ResourceRequest::new(r.machine.clone(), r.disk_gb, r.disk_class));
            }
        }
        out
    }
}
