//! Discrete-event simulation of a job on virtual time (hours).
//!
//! Each step of a task occupies one slot of the pool for its machine type
//! for its drawn duration. Events are ordered by (time, sequence), so runs
//! with identical inputs produce identical logs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rust_decimal::Decimal;

use super::workload::{WorkloadError, WorkloadSpec};
use super::{result_key, ExecutionOutcome, FailureReason, JobReport, NodePool, PoolConfig, StepRecord, TaskOutcome};
use crate::catalog::{DiskClass, MachineCatalog};
use crate::orchestrator::{Lease, Orchestrator, OrchestratorError};
use crate::store::{ObjectStore, StoreError};
use crate::workflow::{compile_task, CompileError, TaskPlan};

/// Result object written for each succeeded sample.
pub const SIM_RESULT_NAME: &str = "outcome.json";

/// Virtual time in hours since job start. Never moves backwards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct VirtualClock {
    now: Decimal,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(now: Decimal) -> Self {
        Self {
            now: now.max(Decimal::ZERO),
        }
    }

    pub fn now(&self) -> Decimal {
        self.now
    }

    pub fn advance(&mut self, hours: Decimal) {
        self.now += hours.max(Decimal::ZERO);
    }

    pub fn advance_to(&mut self, t: Decimal) {
        self.now = self.now.max(t);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("step '{rule}' has no machine type")]
    MissingMachine { rule: String },
    #[error("step '{rule}' requests machine '{machine}', which is not in the catalog")]
    UnknownMachine { rule: String, machine: String },
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Simulate one attempt of one task, steps in plan order.
///
/// A failing step still consumes its full drawn duration. The clock
/// advances by the total duration of executed steps.
pub fn run_task_sim(
    plan: &TaskPlan,
    spec: &WorkloadSpec,
    clock: &mut VirtualClock,
    catalog: &MachineCatalog,
    attempt: u32,
) -> Result<ExecutionOutcome, SimError> {
    spec.check_covers(plan)?;
    let sample = plan.sample_id.as_str();
    let injected = spec.injected_failure(sample, attempt);
    let mut steps = Vec::with_capacity(plan.steps.len());
    let mut result = TaskOutcome::Succeeded;
    for step in &plan.steps {
        let rule = step.rule_name.as_str();
        let machine_name = step
            .resources
            .machine
            .as_deref()
            .ok_or_else(|| SimError::MissingMachine { rule: rule.to_string() })?;
        let machine = catalog.machine(machine_name).ok_or_else(|| SimError::UnknownMachine {
            rule: rule.to_string(),
            machine: machine_name.to_string(),
        })?;
        let disk_gb = step.resources.disk_gb.unwrap_or(crate::workflow::MIN_DISK_GB);
        let draw = spec.draw(sample, rule, attempt)?;

        let failure = if draw.peak_mem_gb > machine.mem_gb {
            Some(FailureReason::OutOfMemory)
        } else if draw.peak_disk_gb > f64::from(disk_gb) {
            Some(FailureReason::DiskFull)
        } else if injected == Some(rule) || spec.random_failure(sample, rule, attempt) {
            Some(FailureReason::InjectedFault)
        } else {
            None
        };
        clock.advance(draw.duration_hours);
        steps.push(StepRecord {
            rule_name: rule.to_string(),
            machine: machine.name.clone(),
            disk_gb,
            disk_class: step.resources.disk_class.unwrap_or(DiskClass::Balanced),
            duration_hours: draw.duration_hours,
            exit_status: Some(match failure {
                None => 0,
                Some(FailureReason::OutOfMemory) => 137,
                Some(_) => 1,
            }),
            peak_cpu_cores: draw.peak_cpu.min(f64::from(machine.vcpu)),
            peak_mem_gb: draw.peak_mem_gb.min(machine.mem_gb),
            peak_disk_gb: draw.peak_disk_gb.min(f64::from(disk_gb)),
            failure,
        });
        if let Some(reason) = failure {
            result = TaskOutcome::Failed {
                step: Some(rule.to_string()),
                reason,
            };
            break;
        }
    }
    Ok(ExecutionOutcome {
        sample_id: sample.to_string(),
        attempt,
        steps,
        result,
    })
}

struct Active {
    lease: Lease,
    outcome: ExecutionOutcome,
    next_step: usize,
    /// Pool slot currently held.
    holding: Option<String>,
}

struct Pool {
    pool: NodePool,
    waiting: VecDeque<usize>,
}

struct Driver<'a> {
    orch: &'a mut Orchestrator,
    spec: &'a WorkloadSpec,
    catalog: &'a MachineCatalog,
    store: &'a ObjectStore,
    pool_config: &'a PoolConfig,
    reference_root: &'a str,
    pools: BTreeMap<String, Pool>,
    active: Vec<Option<Active>>,
    live: usize,
    heap: BinaryHeap<Reverse<(Decimal, u64, usize)>>,
    seq: u64,
    plans: BTreeMap<String, TaskPlan>,
}

/// Whether an orchestrator error only means the lease was superseded.
fn superseded(e: &OrchestratorError) -> bool {
    matches!(e, OrchestratorError::StaleLease { .. } | OrchestratorError::NotInFlight(_))
}

impl Driver<'_> {
    fn plan(&mut self, sample: &str) -> Result<&TaskPlan, SimError> {
        if !self.plans.contains_key(sample) {
            let job = self.orch.job();
            let plan = compile_task(&job.workflow, sample, &job.defaults, self.reference_root)?;
            self.spec.check_covers(&plan)?;
            self.plans.insert(sample.to_string(), plan);
        }
        Ok(&self.plans[sample])
    }

    fn pool(&mut self, machine: &str) -> &mut Pool {
        let cap = self.pool_config.capacity(machine);
        self.pools.entry(machine.to_string()).or_insert_with(|| Pool {
            pool: NodePool::new(machine, cap),
            waiting: VecDeque::new(),
        })
    }

    fn drop_task(&mut self, id: usize) {
        if let Some(task) = self.active[id].take() {
            if let Some(machine) = task.holding {
                self.release(&machine);
            }
            self.live -= 1;
        }
    }

    fn release(&mut self, machine: &str) {
        self.pool(machine).pool.release();
    }

    /// Try to place the task's next step; queue it on the pool otherwise.
    fn place(&mut self, id: usize, now: Decimal) -> Result<(), SimError> {
        let Some(task) = self.active[id].as_ref() else {
            return Ok(());
        };
        let step = &task.outcome.steps[task.next_step];
        let machine = step.machine.clone();
        let rule = step.rule_name.clone();
        let duration = step.duration_hours;
        let lease = task.lease.clone();
        let pool = self.pool(&machine);
        if !pool.pool.try_acquire() {
            pool.waiting.push_back(id);
            return Ok(());
        }
        self.active[id].as_mut().expect("present").holding = Some(machine.clone());
        match self.orch.step_started(&lease, &rule, &machine, now) {
            Ok(()) => {}
            Err(e) if superseded(&e) => {
                self.drop_task(id);
                return self.wake(&machine, now);
            }
            Err(e) => return Err(e.into()),
        }
        self.seq += 1;
        self.heap.push(Reverse((now + duration, self.seq, id)));
        Ok(())
    }

    /// Hand freed slots of `machine` to waiting tasks.
    fn wake(&mut self, machine: &str, now: Decimal) -> Result<(), SimError> {
        loop {
            let pool = self.pool(machine);
            if pool.pool.in_use() >= pool.pool.capacity {
                return Ok(());
            }
            let Some(next) = pool.waiting.pop_front() else {
                return Ok(());
            };
            self.place(next, now)?;
        }
    }

    fn admit(&mut self, now: Decimal, cap: usize) -> Result<(), SimError> {
        while self.live < cap {
            let Some(lease) = self.orch.lease_next(now)? else {
                return Ok(());
            };
            let plan = self.plan(&lease.sample_id)?.clone();
            let mut scratch = VirtualClock::at(now);
            let outcome = run_task_sim(&plan, self.spec, &mut scratch, self.catalog, lease.attempt)?;
            let id = self.active.len();
            self.active.push(Some(Active {
                lease,
                outcome,
                next_step: 0,
                holding: None,
            }));
            self.live += 1;
            self.place(id, now)?;
        }
        Ok(())
    }

    fn step_done(&mut self, id: usize, now: Decimal) -> Result<(), SimError> {
        let Some(task) = self.active[id].as_mut() else {
            return Ok(());
        };
        let record = task.outcome.steps[task.next_step].clone();
        let lease = task.lease.clone();
        let machine = task.holding.take().expect("running step holds a slot");
        task.next_step += 1;
        let finished_all = task.next_step == task.outcome.steps.len();
        let result = task.outcome.result.clone();

        self.release(&machine);
        let res = self.orch.step_finished(&lease, record.clone(), now);
        if let Err(e) = res {
            if !superseded(&e) {
                return Err(e.into());
            }
            self.drop_task(id);
            return self.wake(&machine, now);
        }
        if record.succeeded() && !finished_all {
            self.place(id, now)?;
        } else {
            if result.is_success() {
                let outcome = &self.active[id].as_ref().expect("present").outcome;
                let bytes = serde_json::to_vec_pretty(outcome).expect("outcome serializes");
                let job = self.orch.job();
                let uri = job.result_root.join(&result_key(&lease.sample_id, SIM_RESULT_NAME))?;
                self.store.put_no_clobber(&uri, &bytes)?;
            }
            match self.orch.report_outcome(&lease, result, now) {
                Ok(_) => {}
                Err(e) if superseded(&e) => {}
                Err(e) => return Err(e.into()),
            }
            self.drop_task(id);
        }
        self.wake(&machine, now)
    }
}

/// Drive `orch` to completion on virtual time.
///
/// Tasks are admitted while fewer are live than the capacity of the pool
/// serving the first step. Succeeded samples get one result object under
/// the job's result root, written without overwriting.
pub fn run_job_sim(
    orch: &mut Orchestrator,
    spec: &WorkloadSpec,
    catalog: &MachineCatalog,
    pools: &PoolConfig,
    store: &ObjectStore,
    reference_root: &str,
) -> Result<JobReport, SimError> {
    let first_sample = orch.job().sample_ids[0].clone();
    let mut driver = Driver {
        orch,
        spec,
        catalog,
        store,
        pool_config: pools,
        reference_root,
        pools: BTreeMap::new(),
        active: Vec::new(),
        live: 0,
        heap: BinaryHeap::new(),
        seq: 0,
        plans: BTreeMap::new(),
    };
    let first_machine = driver
        .plan(&first_sample)?
        .steps
        .first()
        .and_then(|s| s.resources.machine.clone())
        .unwrap_or_default();
    let cap = pools.capacity(&first_machine) as usize;

    let mut clock = VirtualClock::at(driver.orch.state().last_time());
    loop {
        driver.admit(clock.now(), cap)?;
        match driver.heap.pop() {
            Some(Reverse((t, _, id))) => {
                clock.advance_to(t);
                driver.step_done(id, clock.now())?;
            }
            None if driver.orch.is_done() => break,
            None => {
                // Only leases without a live worker remain: let them expire.
                let next_expiry = driver.orch.state().queue().in_flight.values().min().copied();
                match next_expiry {
                    Some(t) if t > clock.now() => clock.advance_to(t),
                    _ => break,
                }
            }
        }
    }
    Ok(JobReport::from_state(driver.orch.state()))
}

/// Lower bound on makespan for equal-shaped tasks: total work over total
/// first-pool capacity, or the longest task.
pub fn makespan_lower_bound(task_hours: &[Decimal], capacity: u32) -> Decimal {
    let total: Decimal = task_hours.iter().sum();
    let longest = task_hours.iter().copied().max().unwrap_or_default();
    (total / Decimal::from(capacity.max(1))).max(longest)
}
