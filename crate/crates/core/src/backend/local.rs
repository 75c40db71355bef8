//! Run tasks as local subprocesses.
//!
//! Each step runs under `sh -c` with the task's disk directory as working
//! directory. Memory and CPU figures come from the kernel's accounting of
//! the reaped child (`wait4`), so they cover the shell and the children it
//! waited for. Disk usage is the apparent size of the task directory after
//! each step.

use std::fs::{self, File};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rust_decimal::prelude::FromPrimitive;
use rust_decimal::Decimal;
use walkdir::WalkDir;

use super::{result_key, ExecutionOutcome, FailureReason, JobReport, PoolConfig, StepRecord, TaskOutcome};
use crate::catalog::DiskClass;
use crate::orchestrator::{Lease, Orchestrator, OrchestratorError};
use crate::store::{disk_capacity_bytes, ObjectStore, PutOutcome, StoreError, StoreUri};
use crate::workflow::{compile_task, is_external, CompileError, StepSpec, TaskPlan, MIN_DISK_GB};

const GIB: f64 = (1u64 << 30) as f64;
const MIN_STEP_HOURS: Decimal = Decimal::from_parts(1, 0, 0, false, 9);

#[derive(Debug, Clone, Default)]
pub struct StepLimits {
    /// Wall-clock limit per step.
    pub timeout: Option<Duration>,
    /// Overrides the step's `disk_gb` as the quota, in bytes.
    pub disk_quota_bytes: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct LocalOptions {
    /// Parent of per-task disk directories.
    pub work_root: PathBuf,
    /// Step output goes to `<log_root>/<job>/<sample>/<step>.{out,err}`.
    pub log_root: PathBuf,
    /// Wraps every command, e.g. `docker run --rm -v {workdir}:/work -w /work {image} sh -c {command}`.
    /// `{command}` is substituted shell-quoted.
    pub container: Option<String>,
    pub limits: StepLimits,
    /// Keep task directories after success.
    pub keep_workdirs: bool,
    /// Reference objects staged onto each task disk before the first step.
    pub references: Option<StoreUri>,
}

impl LocalOptions {
    pub fn new(work_root: impl Into<PathBuf>, log_root: impl Into<PathBuf>) -> Self {
        Self {
            work_root: work_root.into(),
            log_root: log_root.into(),
            container: None,
            limits: StepLimits::default(),
            keep_workdirs: false,
            references: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LocalError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

/// Progress notifications from a running task.
#[derive(Debug, Clone)]
pub enum StepEvent {
    Started { rule: String, machine: String },
    Finished(StepRecord),
}

pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn wrap_command(template: Option<&str>, step: &StepSpec, workdir: &Path) -> Result<String, String> {
    let Some(t) = template else {
        return Ok(step.resolved_command.clone());
    };
    if t.contains("{image}") && step.image.is_none() {
        return Err("container template needs an image but the workflow sets none".into());
    }
    Ok(t.replace("{image}", step.image.as_deref().unwrap_or(""))
        .replace("{workdir}", &shell_quote(&workdir.to_string_lossy()))
        .replace("{command}", &shell_quote(&step.resolved_command)))
}

fn dir_size(root: &Path) -> u64 {
    WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| e.metadata().ok())
        .map(|m| m.len())
        .sum()
}

fn hours(d: Duration) -> Decimal {
    Decimal::from_f64(d.as_secs_f64() / 3600.0)
        .unwrap_or_default()
        .round_dp(9)
        .max(MIN_STEP_HOURS)
}

struct Reaped {
    exit: Option<i32>,
    timed_out: bool,
    rusage: libc::rusage,
}

/// Wait for `pid`, killing its process group after `timeout`.
fn reap(pid: libc::pid_t, timeout: Option<Duration>, start: Instant) -> std::io::Result<Reaped> {
    let mut status = 0;
    // SAFETY: rusage is plain data; zeroed is a valid value.
    let mut rusage: libc::rusage = unsafe { std::mem::zeroed() };
    let mut timed_out = false;
    let mut pause = Duration::from_millis(2);
    loop {
        let flags = if timed_out { 0 } else { libc::WNOHANG };
        // SAFETY: pid is our unreaped child; status and rusage are valid out-pointers.
        let r = unsafe { libc::wait4(pid, &mut status, flags, &mut rusage) };
        if r == pid {
            break;
        }
        if r < 0 {
            let err = std::io::Error::last_os_error();
            if err.kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            return Err(err);
        }
        if timeout.is_some_and(|t| start.elapsed() >= t) {
            // SAFETY: signalling the process group we created for the child.
            unsafe { libc::kill(-pid, libc::SIGKILL) };
            timed_out = true;
            continue;
        }
        std::thread::sleep(pause);
        pause = (pause * 2).min(Duration::from_millis(50));
    }
    let exit = if libc::WIFEXITED(status) {
        Some(libc::WEXITSTATUS(status))
    } else if libc::WIFSIGNALED(status) {
        Some(128 + libc::WTERMSIG(status))
    } else {
        None
    };
    Ok(Reaped {
        exit: if timed_out { None } else { exit },
        timed_out,
        rusage,
    })
}

fn cpu_seconds(r: &libc::rusage) -> f64 {
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 / 1e6;
    tv(r.ru_utime) + tv(r.ru_stime)
}

/// Execute one attempt of `plan` in `disk_root`, stopping at the first
/// failing step. Execution problems are reported as failed outcomes.
pub fn run_task_local(
    plan: &TaskPlan,
    disk_root: &Path,
    refs: Option<(&ObjectStore, &StoreUri)>,
    log_dir: &Path,
    opts: &LocalOptions,
    attempt: u32,
    mut on_event: impl FnMut(StepEvent),
) -> ExecutionOutcome {
    let mut steps = Vec::new();
    let fail = |steps: Vec<StepRecord>, step: Option<&str>, reason| ExecutionOutcome {
        sample_id: plan.sample_id.clone(),
        attempt,
        steps,
        result: TaskOutcome::Failed {
            step: step.map(str::to_string),
            reason,
        },
    };
    let task_disk_gb = plan
        .steps
        .iter()
        .filter_map(|s| s.resources.disk_gb)
        .max()
        .unwrap_or(MIN_DISK_GB);
    if fs::create_dir_all(disk_root).is_err() || fs::create_dir_all(log_dir).is_err() {
        return fail(steps, None, FailureReason::SpawnFailure);
    }
    if let Some((store, root)) = refs {
        let capacity = opts
            .limits
            .disk_quota_bytes
            .unwrap_or_else(|| disk_capacity_bytes(task_disk_gb));
        match store.stage_references(root, disk_root, capacity) {
            Ok(_) | Err(StoreError::NoSuchPrefix(_)) => {}
            Err(StoreError::DiskFull { .. }) => return fail(steps, None, FailureReason::DiskFull),
            Err(e) => {
                log::warn!("staging references for {}: {e}", plan.sample_id);
                return fail(steps, None, FailureReason::SpawnFailure);
            }
        }
    }

    for step in &plan.steps {
        let machine = step.resources.machine.clone().unwrap_or_default();
        let disk_gb = step.resources.disk_gb.unwrap_or(MIN_DISK_GB);
        let quota = opts
            .limits
            .disk_quota_bytes
            .unwrap_or_else(|| disk_capacity_bytes(disk_gb));
        on_event(StepEvent::Started {
            rule: step.rule_name.clone(),
            machine: machine.clone(),
        });
        let start = Instant::now();
        let mut record = StepRecord {
            rule_name: step.rule_name.clone(),
            machine,
            disk_gb,
            disk_class: step.resources.disk_class.unwrap_or(DiskClass::Balanced),
            duration_hours: MIN_STEP_HOURS,
            exit_status: None,
            peak_cpu_cores: 0.0,
            peak_mem_gb: 0.0,
            peak_disk_gb: 0.0,
            failure: None,
        };

        let spawned = wrap_command(opts.container.as_deref(), step, disk_root)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))
            .and_then(|cmd| {
                let out = File::create(log_dir.join(format!("{}.out", step.rule_name)))?;
                let err = File::create(log_dir.join(format!("{}.err", step.rule_name)))?;
                Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .current_dir(disk_root)
                    .stdin(Stdio::null())
                    .stdout(out)
                    .stderr(err)
                    .process_group(0)
                    .spawn()
            });
        let child = match spawned {
            Ok(c) => c,
            Err(e) => {
                log::warn!("spawning step {} for {}: {e}", step.rule_name, plan.sample_id);
                record.failure = Some(FailureReason::SpawnFailure);
                on_event(StepEvent::Finished(record.clone()));
                steps.push(record);
                return fail(steps, Some(&step.rule_name), FailureReason::SpawnFailure);
            }
        };
        let reaped = reap(child.id() as libc::pid_t, opts.limits.timeout, start);
        let wall = start.elapsed();
        record.duration_hours = hours(wall);
        let used = dir_size(disk_root);
        record.peak_disk_gb = used as f64 / GIB;

        let failure = match reaped {
            Err(e) => {
                log::warn!("waiting for step {}: {e}", step.rule_name);
                Some(FailureReason::SpawnFailure)
            }
            Ok(r) => {
                record.exit_status = r.exit;
                // ru_maxrss is in KiB on Linux
                record.peak_mem_gb = r.rusage.ru_maxrss as f64 / (1024.0 * 1024.0);
                let secs = wall.as_secs_f64();
                if secs > 0.0 {
                    record.peak_cpu_cores = cpu_seconds(&r.rusage) / secs;
                }
                if r.timed_out {
                    Some(FailureReason::Timeout)
                } else if r.exit != Some(0) {
                    Some(FailureReason::NonZeroExit)
                } else if used > quota {
                    Some(FailureReason::DiskQuotaExceeded)
                } else if step
                    .resolved_outputs
                    .iter()
                    .any(|o| !is_external(o) && !disk_root.join(o).exists())
                {
                    Some(FailureReason::MissingOutput)
                } else {
                    None
                }
            }
        };
        record.failure = failure;
        on_event(StepEvent::Finished(record.clone()));
        steps.push(record);
        if let Some(reason) = failure {
            return fail(steps, Some(&step.rule_name), reason);
        }
    }
    ExecutionOutcome {
        sample_id: plan.sample_id.clone(),
        attempt,
        steps,
        result: TaskOutcome::Succeeded,
    }
}

/// Upload a succeeded task's result files without overwriting.
fn publish(
    plan: &TaskPlan,
    disk_root: &Path,
    store: &ObjectStore,
    result_root: &StoreUri,
) -> Result<(), StoreError> {
    for path in plan.result_paths() {
        if is_external(path) {
            continue;
        }
        let bytes = fs::read(disk_root.join(path)).map_err(|source| StoreError::Io {
            context: format!("reading result {path}"),
            source,
        })?;
        let uri = result_root.join(&result_key(&plan.sample_id, path))?;
        if store.put_no_clobber(&uri, &bytes)? == PutOutcome::AlreadyExists {
            log::info!("{uri} already exists; keeping the earlier result");
        }
    }
    Ok(())
}

enum Msg {
    Step(Lease, StepEvent),
    Done(Lease, ExecutionOutcome),
}

/// Drive `orch` to completion with local subprocesses.
///
/// A whole task runs on one slot; concurrency is the capacity configured
/// for the machine type of the task's first step. Outcome reports are
/// serialized through this thread, the orchestrator's only writer.
pub fn run_job_local(
    orch: &mut Orchestrator,
    store: &ObjectStore,
    opts: &LocalOptions,
    pools: &PoolConfig,
    reference_root: &str,
) -> Result<JobReport, LocalError> {
    let job = orch.job().clone();
    let first = compile_task(&job.workflow, &job.sample_ids[0], &job.defaults, reference_root)?;
    let machine = first
        .steps
        .first()
        .and_then(|s| s.resources.machine.clone())
        .unwrap_or_default();
    let capacity = pools.capacity(&machine) as usize;
    let offset = orch.state().last_time();
    let start = Instant::now();
    let now = || offset + Decimal::from_f64(start.elapsed().as_secs_f64() / 3600.0).unwrap_or_default().round_dp(9);

    let (tx, rx) = mpsc::channel::<Msg>();
    std::thread::scope(|scope| -> Result<(), LocalError> {
        let mut live = 0usize;
        loop {
            while live < capacity {
                let Some(lease) = orch.lease_next(now())? else { break };
                let plan = compile_task(&job.workflow, &lease.sample_id, &job.defaults, reference_root)?;
                let disk_root = opts
                    .work_root
                    .join(&job.job_id)
                    .join(&lease.sample_id)
                    .join(format!("attempt-{}", lease.attempt));
                let log_dir = opts.log_root.join(&job.job_id).join(&lease.sample_id);
                let tx = tx.clone();
                let result_root = job.result_root.clone();
                live += 1;
                scope.spawn(move || {
                    let refs = opts.references.as_ref().map(|r| (store, r));
                    let events_tx = tx.clone();
                    let events_lease = lease.clone();
                    let mut outcome = run_task_local(&plan, &disk_root, refs, &log_dir, opts, lease.attempt, |ev| {
                        let _ = events_tx.send(Msg::Step(events_lease.clone(), ev));
                    });
                    if outcome.result.is_success() {
                        if let Err(e) = publish(&plan, &disk_root, store, &result_root) {
                            log::warn!("publishing results for {}: {e}", plan.sample_id);
                            outcome.result = TaskOutcome::Failed {
                                step: None,
                                reason: FailureReason::MissingOutput,
                            };
                        } else if !opts.keep_workdirs {
                            let _ = fs::remove_dir_all(&disk_root);
                        }
                    }
                    let _ = tx.send(Msg::Done(lease, outcome));
                });
            }
            if live == 0 {
                break;
            }
            let msg = rx.recv().expect("a live worker holds a sender");
            let res = match msg {
                Msg::Step(lease, StepEvent::Started { rule, machine }) => {
                    orch.step_started(&lease, &rule, &machine, now())
                }
                Msg::Step(lease, StepEvent::Finished(record)) => orch.step_finished(&lease, record, now()),
                Msg::Done(lease, outcome) => {
                    live -= 1;
                    orch.report_outcome(&lease, outcome.result, now()).map(|_| ())
                }
            };
            match res {
                Ok(()) => {}
                Err(OrchestratorError::StaleLease { .. } | OrchestratorError::NotInFlight(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    })?;
    Ok(JobReport::from_state(orch.state()))
}
