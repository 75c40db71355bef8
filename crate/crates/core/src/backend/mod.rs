//! Task execution: a local subprocess backend and a discrete-event simulator.

mod local;
mod sim;
mod workload;

use std::fmt;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::catalog::DiskClass;

pub use local::{run_job_local, run_task_local, LocalOptions, StepLimits};
pub use local::{shell_quote, LocalError, StepEvent};
pub use sim::{makespan_lower_bound, run_job_sim, run_task_sim, SimError, VirtualClock, SIM_RESULT_NAME};
pub use workload::{InjectedFailure, Override, RuleWorkload, StepDraw};
pub use workload::{Distribution, Quantity, WorkloadError, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NonZeroExit,
    OutOfMemory,
    DiskFull,
    DiskQuotaExceeded,
    InjectedFault,
    Timeout,
    SpawnFailure,
    MissingOutput,
    LeaseExpired,
    WorkerLost,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::NonZeroExit => "non-zero exit",
            Self::OutOfMemory => "out of memory",
            Self::DiskFull => "disk full",
            Self::DiskQuotaExceeded => "disk quota exceeded",
            Self::InjectedFault => "injected fault",
            Self::Timeout => "timeout",
            Self::SpawnFailure => "spawn failure",
            Self::MissingOutput => "missing output",
            Self::LeaseExpired => "lease expired",
            Self::WorkerLost => "worker lost",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TaskOutcome {
    Succeeded,
    Failed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<String>,
        reason: FailureReason,
    },
}

impl TaskOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Self::Succeeded)
    }
}

/// Measurements for one executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub rule_name: String,
    pub machine: String,
    pub disk_gb: u32,
    pub disk_class: DiskClass,
    pub duration_hours: Decimal,
    /// `None` when the step was stopped before exiting.
    pub exit_status: Option<i32>,
    pub peak_cpu_cores: f64,
    pub peak_mem_gb: f64,
    pub peak_disk_gb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
}

impl StepRecord {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub sample_id: String,
    pub attempt: u32,
    pub steps: Vec<StepRecord>,
    pub result: TaskOutcome,
}

impl ExecutionOutcome {
    pub fn duration_hours(&self) -> Decimal {
        self.steps.iter().map(|s| s.duration_hours).sum()
    }
}

/// Backend selector shared by the CLI and the project API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Local,
    #[default]
    Sim,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Local => "local",
            Self::Sim => "sim",
        })
    }
}

/// Summary of a finished (or interrupted) job run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub job_id: String,
    pub makespan_hours: Decimal,
    pub outcomes: Vec<SampleSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub sample_id: String,
    pub state: crate::orchestrator::TaskState,
    pub attempts: u32,
}

impl JobReport {
    pub fn from_state(state: &crate::orchestrator::JobState) -> Self {
        Self {
            job_id: state.job().map(|j| j.job_id.clone()).unwrap_or_default(),
            makespan_hours: state.last_time(),
            outcomes: state
                .tasks()
                .map(|t| SampleSummary {
                    sample_id: t.sample_id.clone(),
                    state: t.state,
                    attempts: t.attempts,
                })
                .collect(),
        }
    }

    pub fn exhausted(&self) -> Vec<&str> {
        self.outcomes
            .iter()
            .filter(|o| o.state == crate::orchestrator::TaskState::Exhausted)
            .map(|o| o.sample_id.as_str())
            .collect()
    }
}

/// Task slots per machine type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub default_capacity: u32,
    #[serde(default)]
    pub capacities: std::collections::BTreeMap<String, u32>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self::uniform(4)
    }
}

impl PoolConfig {
    pub fn uniform(capacity: u32) -> Self {
        Self {
            default_capacity: capacity.max(1),
            capacities: Default::default(),
        }
    }

    pub fn capacity(&self, machine: &str) -> u32 {
        self.capacities
            .get(machine)
            .copied()
            .unwrap_or(self.default_capacity)
            .max(1)
    }
}

/// Slots of one machine type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePool {
    pub machine: String,
    pub capacity: u32,
    in_use: u32,
}

impl NodePool {
    pub fn new(machine: impl Into<String>, capacity: u32) -> Self {
        Self {
            machine: machine.into(),
            capacity: capacity.max(1),
            in_use: 0,
        }
    }

    pub fn in_use(&self) -> u32 {
        self.in_use
    }

    /// Take a slot if one is free.
    pub fn try_acquire(&mut self) -> bool {
        if self.in_use < self.capacity {
            self.in_use += 1;
            true
        } else {
            false
        }
    }

    pub fn release(&mut self) {
        debug_assert!(self.in_use > 0, "release on idle pool {}", self.machine);
        self.in_use = self.in_use.saturating_sub(1);
    }
}

/// Key of the result object written for a succeeded sample.
pub fn result_key(sample_id: &str, path: &str) -> String {
    format!("{sample_id}/{}", path.trim_start_matches("./"))
}
