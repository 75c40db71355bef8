//! Job control: the sample queue, per-task state machine, and the
//! append-only event log that makes both recoverable.
//!
//! All state changes go through [`Orchestrator`], which appends an event to
//! the log before applying it to memory. [`JobState`] is a pure fold over
//! those events, so replaying a log rebuilds exactly the state that wrote
//! it.

mod log;
mod state;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{StepRecord, TaskOutcome};
use crate::store::StoreUri;
use crate::workflow::{ResourceRequest, Workflow};

pub use log::{replay, CorruptLog, EventBody, EventLog, EventRecord, LogError};
pub use state::{
    AttemptRecord, JobState, JobStatus, QueueState, StepProgress, StepState, TaskRecord, TaskState,
    Transition, ETA_WINDOW,
};

/// Lease length used when no task duration estimate exists, in hours.
pub const DEFAULT_LEASE_HOURS: Decimal = Decimal::from_parts(24, 0, 0, false, 0);
pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub workflow: Workflow,
    pub sample_ids: Vec<String>,
    pub defaults: ResourceRequest,
    pub max_retries: u32,
    pub result_root: StoreUri,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SampleListError {
    #[error("sample list is empty")]
    EmptySampleList,
    #[error("line {line}: duplicate sample id '{id}'")]
    DuplicateSampleId { id: String, line: usize },
}

/// One ID per line; `#` starts a comment; blank lines are ignored.
pub fn parse_sample_list(text: &str) -> Result<Vec<String>, SampleListError> {
    let mut seen = HashSet::new();
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let id = line.split('#').next().unwrap_or("").trim();
        if id.is_empty() {
            continue;
        }
        if !seen.insert(id.to_string()) {
            return Err(SampleListError::DuplicateSampleId {
                id: id.to_string(),
                line: i + 1,
            });
        }
        ids.push(id.to_string());
    }
    if ids.is_empty() {
        return Err(SampleListError::EmptySampleList);
    }
    Ok(ids)
}

impl Job {
    /// Build a job whose id is derived from its contents, so resubmitting
    /// identical inputs yields the same id.
    pub fn new(
        workflow: Workflow,
        sample_ids: Vec<String>,
        defaults: ResourceRequest,
        max_retries: u32,
        result_root: StoreUri,
    ) -> Result<Self, SampleListError> {
        if sample_ids.is_empty() {
            return Err(SampleListError::EmptySampleList);
        }
        let mut seen = HashSet::new();
        for (i, id) in sample_ids.iter().enumerate() {
            if !seen.insert(id) {
                return Err(SampleListError::DuplicateSampleId {
                    id: id.clone(),
                    line: i + 1,
                });
            }
        }
        let mut h = Sha256::new();
        h.update(workflow.to_source());
        for id in &sample_ids {
            h.update(id);
            h.update([0]);
        }
        h.update(serde_json::to_vec(&defaults).expect("resources serialize"));
        let job_id = format!("{}-{}", workflow.name, &hex::encode(h.finalize())[..10]);
        Ok(Self {
            job_id,
            workflow,
            sample_ids,
            defaults,
            max_retries,
            result_root,
        })
    }
}

/// Parse `samples` and build a job over them.
pub fn submit_job(
    workflow: Workflow,
    samples: &str,
    defaults: ResourceRequest,
    result_root: StoreUri,
) -> Result<Job, SampleListError> {
    Job::new(
        workflow,
        parse_sample_list(samples)?,
        defaults,
        DEFAULT_MAX_RETRIES,
        result_root,
    )
}

/// A sample handed to a worker. Reports must quote the lease so that
/// outcomes from superseded attempts are rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub sample_id: String,
    pub attempt: u32,
    pub expiry: Decimal,
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("unknown sample '{0}'")]
    UnknownSample(String),
    #[error("sample '{0}' is not in flight")]
    NotInFlight(String),
    #[error("lease for sample '{sample}' attempt {attempt} has been superseded")]
    StaleLease { sample: String, attempt: u32 },
    #[error("unknown job '{0}'")]
    UnknownJob(String),
    #[error("event log already exists at {0}")]
    LogExists(PathBuf),
    /// Raised by fault injection; the log is left exactly as a crash would.
    #[error("orchestrator halted after {0} events")]
    Halted(u64),
    #[error("illegal transition: {0}")]
    Illegal(String),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrchestratorOptions {
    pub fsync: bool,
    /// Task slots the job can use at once; feeds the ETA.
    pub concurrency: u32,
    pub lease_hours: Decimal,
}

impl Default for OrchestratorOptions {
    fn default() -> Self {
        Self {
            fsync: false,
            concurrency: 1,
            lease_hours: DEFAULT_LEASE_HOURS,
        }
    }
}

/// What [`Orchestrator::recover`] found and repaired.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub events_replayed: u64,
    /// Line number of a torn final record that was cut off, if any.
    pub truncated_line: Option<usize>,
    /// Samples that were running when the log ended.
    pub lost: Vec<String>,
}

/// Single writer of a job's state.
pub struct Orchestrator {
    state: JobState,
    log: EventLog,
    halt_after: Option<u64>,
}

impl Orchestrator {
    /// Start a new job log at `log_path` with every sample queued.
    pub fn submit(
        job: Job,
        log_path: &Path,
        opts: OrchestratorOptions,
    ) -> Result<Self, OrchestratorError> {
        if log_path.exists() && fs::metadata(log_path).map(|m| m.len() > 0).unwrap_or(false) {
            return Err(OrchestratorError::LogExists(log_path.to_path_buf()));
        }
        let log = EventLog::create(log_path, opts.fsync)?;
        let mut orch = Self {
            state: JobState::default(),
            log,
            halt_after: None,
        };
        orch.emit(
            None,
            Decimal::ZERO,
            EventBody::JobSubmitted {
                job: Box::new(job),
                concurrency: opts.concurrency.max(1),
                lease_hours: opts.lease_hours,
            },
        )?;
        Ok(orch)
    }

    /// Rebuild from an existing log. A torn final record is cut off; any
    /// task that was running is failed as lost and requeued (or exhausted).
    pub fn recover(log_path: &Path, fsync: bool) -> Result<(Self, RecoveryReport), OrchestratorError> {
        let mut report = RecoveryReport::default();
        let state = match replay(log_path) {
            Ok(state) => state,
            Err(LogError::Corrupt(c)) if c.is_final_line => {
                EventLog::truncate_to(log_path, c.valid_bytes)?;
                report.truncated_line = Some(c.line);
                *c.state
            }
            Err(e) => return Err(e.into()),
        };
        if state.job().is_none() {
            return Err(OrchestratorError::UnknownJob(log_path.display().to_string()));
        }
        report.events_replayed = state.next_seq();
        let log = EventLog::append_to(log_path, fsync)?;
        let mut orch = Self {
            state,
            log,
            halt_after: None,
        };
        let now = orch.state.last_time();
        let stranded: Vec<(String, TaskState)> = orch
            .state
            .tasks()
            .filter(|t| matches!(t.state, TaskState::Running | TaskState::Failed))
            .map(|t| (t.sample_id.clone(), t.state))
            .collect();
        for (sample, st) in stranded {
            if st == TaskState::Running {
                report.lost.push(sample.clone());
                let step = orch.state.task(&sample).and_then(|t| t.running_step().map(str::to_string));
                orch.fail(&sample, step, crate::backend::FailureReason::WorkerLost, now)?;
            } else {
                orch.settle_failure(&sample, now)?;
            }
        }
        Ok((orch, report))
    }

    /// Stop writing after `n` total events, returning [`OrchestratorError::Halted`].
    /// Used to simulate a controller crash at an exact log position.
    pub fn set_halt_after(&mut self, n: Option<u64>) {
        self.halt_after = n;
    }

    pub fn state(&self) -> &JobState {
        &self.state
    }

    pub fn job(&self) -> &Job {
        self.state.job().expect("orchestrator always holds a submitted job")
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }

    fn emit(&mut self, sample: Option<&str>, now: Decimal, body: EventBody) -> Result<(), OrchestratorError> {
        let seq = self.state.next_seq();
        if self.halt_after.is_some_and(|n| seq >= n) {
            return Err(OrchestratorError::Halted(seq));
        }
        let job_id = match (&body, self.state.job()) {
            (EventBody::JobSubmitted { job, .. }, _) => job.job_id.clone(),
            (_, Some(job)) => job.job_id.clone(),
            (_, None) => return Err(OrchestratorError::Illegal("event before job submission".into())),
        };
        let record = EventRecord {
            seq,
            time: now.max(self.state.last_time()),
            job_id,
            sample_id: sample.map(str::to_string),
            body,
        };
        // a record that the fold rejects must never reach the log
        self.state.validate(&record).map_err(OrchestratorError::Illegal)?;
        self.log.append(&record)?;
        self.state.mutate(&record);
        Ok(())
    }

    fn current(&self, lease: &Lease) -> Result<&TaskRecord, OrchestratorError> {
        let task = self
            .state
            .task(&lease.sample_id)
            .ok_or_else(|| OrchestratorError::UnknownSample(lease.sample_id.clone()))?;
        if task.state != TaskState::Running {
            return Err(OrchestratorError::NotInFlight(lease.sample_id.clone()));
        }
        if task.attempts != lease.attempt {
            return Err(OrchestratorError::StaleLease {
                sample: lease.sample_id.clone(),
                attempt: lease.attempt,
            });
        }
        Ok(task)
    }

    /// Re-enqueue expired leases, then hand out the head of the queue.
    pub fn lease_next(&mut self, now: Decimal) -> Result<Option<Lease>, OrchestratorError> {
        let expired: Vec<String> = self
            .state
            .queue()
            .in_flight
            .iter()
            .filter(|(_, &expiry)| expiry <= now)
            .map(|(s, _)| s.clone())
            .collect();
        for sample in expired {
            let step = self.state.task(&sample).and_then(|t| t.running_step().map(str::to_string));
            self.fail(&sample, step, crate::backend::FailureReason::LeaseExpired, now)?;
        }
        let Some(sample) = self.state.queue().pending.front().cloned() else {
            return Ok(None);
        };
        let attempt = self.state.task(&sample).map(|t| t.attempts + 1).unwrap_or(1);
        let expiry = now + self.state.lease_hours();
        self.emit(Some(&sample), now, EventBody::Leased { attempt, expiry })?;
        Ok(Some(Lease {
            sample_id: sample,
            attempt,
            expiry,
        }))
    }

    /// Record that a step began on `pool`. Renews the lease.
    pub fn step_started(
        &mut self,
        lease: &Lease,
        step: &str,
        pool: &str,
        now: Decimal,
    ) -> Result<(), OrchestratorError> {
        self.current(lease)?;
        let expiry = now + self.state.lease_hours();
        self.emit(
            Some(&lease.sample_id),
            now,
            EventBody::StepStarted {
                step: step.to_string(),
                pool: pool.to_string(),
                expiry,
            },
        )
    }

    pub fn step_finished(
        &mut self,
        lease: &Lease,
        record: StepRecord,
        now: Decimal,
    ) -> Result<(), OrchestratorError> {
        self.current(lease)?;
        self.emit(
            Some(&lease.sample_id),
            now,
            EventBody::StepFinished {
                record: Box::new(record),
            },
        )
    }

    /// Close the lease with a final outcome. Failures are re-enqueued at the
    /// tail while retries remain, otherwise the task is exhausted.
    pub fn report_outcome(
        &mut self,
        lease: &Lease,
        outcome: TaskOutcome,
        now: Decimal,
    ) -> Result<TaskRecord, OrchestratorError> {
        self.current(lease)?;
        match outcome {
            TaskOutcome::Succeeded => self.emit(Some(&lease.sample_id), now, EventBody::Succeeded {})?,
            TaskOutcome::Failed { step, reason } => self.fail(&lease.sample_id, step, reason, now)?,
        }
        Ok(self.state.task(&lease.sample_id).expect("task exists").clone())
    }

    fn fail(
        &mut self,
        sample: &str,
        step: Option<String>,
        reason: crate::backend::FailureReason,
        now: Decimal,
    ) -> Result<(), OrchestratorError> {
        self.emit(Some(sample), now, EventBody::Failed { step, reason })?;
        self.settle_failure(sample, now)
    }

    fn settle_failure(&mut self, sample: &str, now: Decimal) -> Result<(), OrchestratorError> {
        let attempts = self.state.task(sample).map(|t| t.attempts).unwrap_or(0);
        if attempts <= self.state.max_retries() {
            self.emit(Some(sample), now, EventBody::Requeued {})
        } else {
            self.emit(Some(sample), now, EventBody::Exhausted {})
        }
    }

    pub fn status(&self) -> JobStatus {
        self.state.status()
    }
}
