use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::log::{EventBody, EventRecord};
use super::Job;
use crate::backend::{StepRecord, TaskOutcome};

/// Number of most recent completions averaged for the ETA.
pub const ETA_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Exhausted,
}

impl TaskState {
    pub const ALL: [TaskState; 5] = [
        Self::Queued,
        Self::Running,
        Self::Succeeded,
        Self::Failed,
        Self::Exhausted,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Succeeded | Self::Exhausted)
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepState {
    Pending,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: TaskState,
    pub time: Decimal,
}

/// Everything observed during one lease of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub leased_at: Decimal,
    pub steps: Vec<StepRecord>,
    pub outcome: Option<TaskOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub sample_id: String,
    pub state: TaskState,
    pub attempts: u32,
    pub step_states: Vec<(String, StepState)>,
    pub timestamps: Vec<Transition>,
    pub history: Vec<AttemptRecord>,
    running: Option<(String, String)>,
}

impl TaskRecord {
    /// Step currently executing, if any.
    pub fn running_step(&self) -> Option<&str> {
        self.running.as_ref().map(|(step, _)| step.as_str())
    }

    /// Pool holding the currently executing step.
    pub fn running_pool(&self) -> Option<&str> {
        self.running.as_ref().map(|(_, pool)| pool.as_str())
    }

    fn step_state_mut(&mut self, step: &str) -> Option<&mut StepState> {
        self.step_states
            .iter_mut()
            .find(|(name, _)| name == step)
            .map(|(_, s)| s)
    }

    fn step_state(&self, step: &str) -> Option<StepState> {
        self.step_states.iter().find(|(n, _)| n == step).map(|(_, s)| *s)
    }

    fn enter(&mut self, state: TaskState, time: Decimal) {
        self.state = state;
        self.timestamps.push(Transition { state, time });
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub pending: VecDeque<String>,
    /// Lease expiry per leased sample.
    pub in_flight: BTreeMap<String, Decimal>,
}

/// Job state as a fold over its event log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JobState {
    job: Option<Job>,
    tasks: Vec<TaskRecord>,
    index: HashMap<String, usize>,
    queue: QueueState,
    pools: BTreeMap<String, u32>,
    next_seq: u64,
    last_time: Decimal,
    concurrency: u32,
    lease_hours: Decimal,
    completions: Vec<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepProgress {
    pub rule: String,
    pub pending: usize,
    pub running: usize,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub total: usize,
    pub counts: BTreeMap<TaskState, usize>,
    pub steps: Vec<StepProgress>,
    pub elapsed_hours: Decimal,
    /// `None` until at least one task has completed.
    pub eta_hours: Option<Decimal>,
}

impl JobStatus {
    pub fn count(&self, state: TaskState) -> usize {
        self.counts.get(&state).copied().unwrap_or(0)
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "job {} ({} samples)", self.job_id, self.total)?;
        let counts: Vec<String> = TaskState::ALL
            .iter()
            .map(|s| format!("{s}: {}", self.count(*s)))
            .collect();
        writeln!(f, "  {}", counts.join("  "))?;
        for s in &self.steps {
            writeln!(
                f,
                "  step {:<20} done {:>6}  running {:>4}  failed {:>4}",
                s.rule, s.succeeded, s.running, s.failed
            )?;
        }
        write!(f, "  elapsed {:.2} h", self.elapsed_hours)?;
        match self.eta_hours {
            Some(eta) => write!(f, "  eta {:.2} h", eta),
            None => write!(f, "  eta unknown"),
        }
    }
}

impl JobState {
    pub fn job(&self) -> Option<&Job> {
        self.job.as_ref()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.iter()
    }

    pub fn task(&self, sample: &str) -> Option<&TaskRecord> {
        self.index.get(sample).map(|&i| &self.tasks[i])
    }

    pub fn queue(&self) -> &QueueState {
        &self.queue
    }

    /// Steps currently running per pool.
    pub fn pool_in_use(&self) -> &BTreeMap<String, u32> {
        &self.pools
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn last_time(&self) -> Decimal {
        self.last_time
    }

    pub fn lease_hours(&self) -> Decimal {
        self.lease_hours
    }

    pub fn concurrency(&self) -> u32 {
        self.concurrency
    }

    pub fn max_retries(&self) -> u32 {
        self.job.as_ref().map(|j| j.max_retries).unwrap_or(0)
    }

    pub fn count(&self, state: TaskState) -> usize {
        self.tasks.iter().filter(|t| t.state == state).count()
    }

    /// Every task is Succeeded or Exhausted.
    pub fn is_done(&self) -> bool {
        self.job.is_some() && self.tasks.iter().all(|t| t.state.is_terminal())
    }

    /// Validate and apply one record.
    pub fn apply(&mut self, rec: &EventRecord) -> Result<(), String> {
        if rec.seq != self.next_seq {
            return Err(format!("expected seq {}, found {}", self.next_seq, rec.seq));
        }
        self.validate(rec)?;
        self.mutate(rec);
        Ok(())
    }

    /// Check that `rec` is a legal next event without changing anything.
    pub(crate) fn validate(&self, rec: &EventRecord) -> Result<(), String> {
        if rec.time < self.last_time {
            return Err(format!("time {} precedes {}", rec.time, self.last_time));
        }
        let Some(job) = &self.job else {
            return match &rec.body {
                EventBody::JobSubmitted { job, .. } if job.job_id == rec.job_id => Ok(()),
                EventBody::JobSubmitted { .. } => Err("job id mismatch".into()),
                _ => Err("first event must be job_submitted".into()),
            };
        };
        if rec.job_id != job.job_id {
            return Err(format!("record for job '{}' in log of '{}'", rec.job_id, job.job_id));
        }
        let sample = rec.sample_id.as_deref().ok_or("task event without sample_id")?;
        let task = self.task(sample).ok_or_else(|| format!("unknown sample '{sample}'"))?;
        let expect = |want: TaskState| {
            if task.state == want {
                Ok(())
            } else {
                Err(format!("{:?} on {sample} in state {}", event_name(&rec.body), task.state))
            }
        };
        match &rec.body {
            EventBody::JobSubmitted { .. } => Err("job already submitted".into()),
            EventBody::Leased { attempt, .. } => {
                expect(TaskState::Queued)?;
                if self.queue.pending.front().map(String::as_str) != Some(sample) {
                    return Err(format!("{sample} leased out of queue order"));
                }
                if *attempt != task.attempts + 1 || *attempt > job.max_retries + 1 {
                    return Err(format!("{sample} leased with attempt {attempt}"));
                }
                Ok(())
            }
            EventBody::StepStarted { step, .. } => {
                expect(TaskState::Running)?;
                if task.running.is_some() {
                    return Err(format!("{sample} starts {step} while another step runs"));
                }
                match task.step_state(step) {
                    Some(StepState::Pending) => Ok(()),
                    Some(s) => Err(format!("{sample} starts {step} in step state {s:?}")),
                    None => Err(format!("unknown step '{step}'")),
                }
            }
            EventBody::StepFinished { record } => {
                expect(TaskState::Running)?;
                if task.running_step() != Some(record.rule_name.as_str()) {
                    return Err(format!("{sample} finishes {} which is not running", record.rule_name));
                }
                Ok(())
            }
            EventBody::Succeeded {} => {
                expect(TaskState::Running)?;
                if task.running.is_some()
                    || task.step_states.iter().any(|(_, s)| *s != StepState::Succeeded)
                {
                    return Err(format!("{sample} succeeded with unfinished steps"));
                }
                Ok(())
            }
            EventBody::Failed { .. } => expect(TaskState::Running),
            EventBody::Requeued {} => {
                expect(TaskState::Failed)?;
                if task.attempts > job.max_retries {
                    return Err(format!("{sample} requeued with no retries left"));
                }
                Ok(())
            }
            EventBody::Exhausted {} => {
                expect(TaskState::Failed)?;
                if task.attempts != job.max_retries + 1 {
                    return Err(format!("{sample} exhausted with retries left"));
                }
                Ok(())
            }
        }
    }

    /// Apply a record already accepted by [`Self::validate`].
    pub(crate) fn mutate(&mut self, rec: &EventRecord) {
        self.next_seq += 1;
        self.last_time = rec.time;
        let time = rec.time;
        if let EventBody::JobSubmitted {
            job,
            concurrency,
            lease_hours,
        } = &rec.body
        {
            let rules: Vec<String> = job.workflow.rules.iter().map(|r| r.name.clone()).collect();
            for (i, id) in job.sample_ids.iter().enumerate() {
                self.index.insert(id.clone(), i);
                self.tasks.push(TaskRecord {
                    sample_id: id.clone(),
                    state: TaskState::Queued,
                    attempts: 0,
                    step_states: rules.iter().map(|r| (r.clone(), StepState::Pending)).collect(),
                    timestamps: vec![Transition {
                        state: TaskState::Queued,
                        time,
                    }],
                    history: Vec::new(),
                    running: None,
                });
                self.queue.pending.push_back(id.clone());
            }
            self.concurrency = *concurrency;
            self.lease_hours = *lease_hours;
            self.job = Some((**job).clone());
            return;
        }

        let sample = rec.sample_id.as_deref().expect("validated");
        let idx = self.index[sample];
        let task = &mut self.tasks[idx];
        match &rec.body {
            EventBody::JobSubmitted { .. } => unreachable!(),
            EventBody::Leased { attempt, expiry } => {
                self.queue.pending.pop_front();
                self.queue.in_flight.insert(sample.to_string(), *expiry);
                task.attempts = *attempt;
                for (_, s) in &mut task.step_states {
                    *s = StepState::Pending;
                }
                task.history.push(AttemptRecord {
                    attempt: *attempt,
                    leased_at: time,
                    steps: Vec::new(),
                    outcome: None,
                });
                task.enter(TaskState::Running, time);
            }
            EventBody::StepStarted { step, pool, expiry } => {
                *task.step_state_mut(step).expect("validated") = StepState::Running;
                task.running = Some((step.clone(), pool.clone()));
                *self.pools.entry(pool.clone()).or_insert(0) += 1;
                self.queue.in_flight.insert(sample.to_string(), *expiry);
            }
            EventBody::StepFinished { record } => {
                *task.step_state_mut(&record.rule_name).expect("validated") = if record.succeeded() {
                    StepState::Succeeded
                } else {
                    StepState::Failed
                };
                if let Some((_, pool)) = task.running.take() {
                    release(&mut self.pools, &pool);
                }
                if let Some(h) = task.history.last_mut() {
                    h.steps.push((**record).clone());
                }
            }
            EventBody::Succeeded {} => {
                self.queue.in_flight.remove(sample);
                if let Some(h) = task.history.last_mut() {
                    h.outcome = Some(TaskOutcome::Succeeded);
                    self.completions.push(time - h.leased_at);
                }
                task.enter(TaskState::Succeeded, time);
            }
            EventBody::Failed { step, reason } => {
                self.queue.in_flight.remove(sample);
                if let Some((running, pool)) = task.running.take() {
                    release(&mut self.pools, &pool);
                    if let Some(s) = task.step_state_mut(&running) {
                        *s = StepState::Failed;
                    }
                }
                if let Some(h) = task.history.last_mut() {
                    h.outcome = Some(TaskOutcome::Failed {
                        step: step.clone(),
                        reason: *reason,
                    });
                }
                task.enter(TaskState::Failed, time);
            }
            EventBody::Requeued {} => {
                self.queue.pending.push_back(sample.to_string());
                task.enter(TaskState::Queued, time);
            }
            EventBody::Exhausted {} => task.enter(TaskState::Exhausted, time),
        }
    }

    pub fn status(&self) -> JobStatus {
        let mut counts: BTreeMap<TaskState, usize> = TaskState::ALL.iter().map(|s| (*s, 0)).collect();
        for t in &self.tasks {
            *counts.entry(t.state).or_insert(0) += 1;
        }
        let rules: Vec<&str> = self
            .job
            .as_ref()
            .map(|j| j.workflow.rules.iter().map(|r| r.name.as_str()).collect())
            .unwrap_or_default();
        let steps = rules
            .iter()
            .enumerate()
            .map(|(i, rule)| {
                let mut p = StepProgress {
                    rule: rule.to_string(),
                    pending: 0,
                    running: 0,
                    succeeded: 0,
                    failed: 0,
                };
                for t in &self.tasks {
                    match t.step_states[i].1 {
                        StepState::Pending => p.pending += 1,
                        StepState::Running => p.running += 1,
                        StepState::Succeeded => p.succeeded += 1,
                        StepState::Failed => p.failed += 1,
                    }
                }
                p
            })
            .collect();
        let remaining = self.tasks.iter().filter(|t| !t.state.is_terminal()).count();
        JobStatus {
            job_id: self.job.as_ref().map(|j| j.job_id.clone()).unwrap_or_default(),
            total: self.tasks.len(),
            counts,
            steps,
            elapsed_hours: self.last_time,
            eta_hours: eta(remaining, self.concurrency, &self.completions),
        }
    }

    /// Structural invariants that must hold after every event.
    pub fn check_invariants(&self) -> Result<(), String> {
        let max_retries = self.max_retries();
        let mut queued = 0;
        let mut running = 0;
        for t in &self.tasks {
            let pending = self.queue.pending.iter().filter(|s| **s == t.sample_id).count();
            let leased = self.queue.in_flight.contains_key(&t.sample_id);
            let (want_pending, want_leased) = match t.state {
                TaskState::Queued => (1, false),
                TaskState::Running => (0, true),
                _ => (0, false),
            };
            if pending != want_pending || leased != want_leased {
                return Err(format!("{} in state {} has queue presence {pending}/{leased}", t.sample_id, t.state));
            }
            queued += usize::from(t.state == TaskState::Queued);
            running += usize::from(t.state == TaskState::Running);
            if t.attempts > max_retries + 1 {
                return Err(format!("{} has {} attempts", t.sample_id, t.attempts));
            }
            if t.state == TaskState::Succeeded
                && t.step_states.iter().any(|(_, s)| *s != StepState::Succeeded)
            {
                return Err(format!("{} succeeded with unfinished steps", t.sample_id));
            }
            if t.state == TaskState::Exhausted
                && (t.attempts != max_retries + 1
                    || !matches!(t.history.last().and_then(|h| h.outcome.as_ref()), Some(TaskOutcome::Failed { .. })))
            {
                return Err(format!("{} exhausted inconsistently", t.sample_id));
            }
        }
        if queued != self.queue.pending.len() || running != self.queue.in_flight.len() {
            return Err("queue sizes disagree with task states".into());
        }
        let total: usize = TaskState::ALL.iter().map(|s| self.count(*s)).sum();
        if self.job.as_ref().is_some_and(|j| j.sample_ids.len() != total) {
            return Err("task counts do not sum to the sample count".into());
        }
        Ok(())
    }
}

fn release(pools: &mut BTreeMap<String, u32>, pool: &str) {
    if let Some(n) = pools.get_mut(pool) {
        *n = n.saturating_sub(1);
    }
}

fn event_name(body: &EventBody) -> &'static str {
    match body {
        EventBody::JobSubmitted { .. } => "job_submitted",
        EventBody::Leased { .. } => "leased",
        EventBody::StepStarted { .. } => "step_started",
        EventBody::StepFinished { .. } => "step_finished",
        EventBody::Succeeded {} => "succeeded",
        EventBody::Failed { .. } => "failed",
        EventBody::Requeued {} => "requeued",
        EventBody::Exhausted {} => "exhausted",
    }
}

/// `ceil(remaining / concurrency)` rounds of the trailing mean task duration.
fn eta(remaining: usize, concurrency: u32, completions: &[Decimal]) -> Option<Decimal> {
    if remaining == 0 {
        return Some(Decimal::ZERO);
    }
    if completions.is_empty() {
        return None;
    }
    let window = &completions[completions.len().saturating_sub(ETA_WINDOW)..];
    let mean = window.iter().sum::<Decimal>() / Decimal::from(window.len());
    let slots = concurrency.max(1) as usize;
    let rounds = remaining.div_ceil(slots);
    Some(mean * Decimal::from(rounds))
}
