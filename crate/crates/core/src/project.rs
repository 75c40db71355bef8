//! Project lifecycle: load a workflow file, create the project's buckets
//! and directories, profile a test subset, run the full sample list, and
//! tear down while keeping a cost record.
//!
//! Everything lives under one store root:
//!
//! ```text
//! <store_root>/
//!   <id>-ref-<suffix>/  <id>-results/  <id>-staging/   buckets
//!   .gflow/projects/<id>/env.json                        manifest
//!   .gflow/projects/<id>/catalog.json
//!   .gflow/projects/<id>/optparams.json
//!   .gflow/projects/<id>/test_samples.json
//!   .gflow/projects/<id>/logs/events/<job>.jsonl
//!   .gflow/projects/<id>/logs/steps/
//!   .gflow/records/<id>.json                             survives teardown
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::backend::{
    run_job_local, run_job_sim, BackendKind, JobReport, LocalError, LocalOptions, PoolConfig, SimError,
    StepLimits, WorkloadError, WorkloadSpec,
};
use crate::catalog::{parse_machine_name, CatalogError, DiskClass, MachineCatalog};
use crate::optimizer::{
    job_cost_report, profile_job, recommend, test_sample_count, CostError, CostReport, ProfileError,
    Recommendation, RecommendError, ResourceProfile, DEFAULT_HEADROOM, DEFAULT_TEST_SAMPLES,
};
use crate::orchestrator::{
    replay, Job, JobState, JobStatus, LogError, Orchestrator, OrchestratorError, OrchestratorOptions,
    SampleListError, TaskState, DEFAULT_LEASE_HOURS, DEFAULT_MAX_RETRIES,
};
use crate::store::{CopyReport, ObjectStore, PutOutcome, StoreError, StoreUri};
use crate::workflow::{
    compile_task, parse_workflow_named, validate_workflow, CompileError, Diagnostic, ParseError,
    ResourceRequest, Workflow, MIN_DISK_GB,
};

pub const DEFAULT_MACHINE: &str = "e2-standard-16";
pub const DEFAULT_DISK_GB: u32 = 100;
/// Directory under each task disk that references are staged into; the
/// value of `{reference}`.
pub const REFERENCE_DIR: &str = "reference";
pub const STATE_DIR: &str = ".gflow";
const MAX_PROJECT_ID_LEN: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid engine config: {0}")]
    Invalid(String),
}

/// Engine settings. Every field has a default; a TOML file may set any
/// subset and command-line flags override both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub backend: BackendKind,
    pub pools: PoolConfig,
    pub max_retries: u32,
    pub headroom: Decimal,
    /// Lease length in hours. Unset: twice the expected task duration
    /// on the simulator, 24 h locally.
    pub lease_hours: Option<Decimal>,
    pub default_machine: String,
    pub default_disk_gb: u32,
    pub default_disk_class: DiskClass,
    pub test_samples: u32,
    /// Let the full run skip samples already processed by the test run.
    pub reuse_test_results: bool,
    /// Overrides the workload spec's seed.
    pub seed: Option<u64>,
    pub workload: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    /// Command wrapper for the local backend, see [`LocalOptions::container`].
    pub container: Option<String>,
    pub step_timeout_secs: Option<u64>,
    pub fsync: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Sim,
            pools: PoolConfig::default(),
            max_retries: DEFAULT_MAX_RETRIES,
            headroom: DEFAULT_HEADROOM,
            lease_hours: None,
            default_machine: DEFAULT_MACHINE.to_string(),
            default_disk_gb: DEFAULT_DISK_GB,
            default_disk_class: DiskClass::Balanced,
            test_samples: DEFAULT_TEST_SAMPLES,
            reuse_test_results: false,
            seed: None,
            workload: None,
            catalog: None,
            container: None,
            step_timeout_secs: None,
            fsync: false,
        }
    }
}

/// Values given on the command line (or through `GFLOW_*` variables).
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub backend: Option<BackendKind>,
    pub catalog: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workload: Option<PathBuf>,
    pub max_retries: Option<u32>,
    pub headroom: Option<Decimal>,
    pub default_machine: Option<String>,
    pub capacity: Option<u32>,
    pub lease_hours: Option<Decimal>,
}

impl EngineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn with_overrides(mut self, o: &ConfigOverrides) -> Self {
        if let Some(b) = o.backend {
            self.backend = b;
        }
        if let Some(c) = &o.catalog {
            self.catalog = Some(c.clone());
        }
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(w) = &o.workload {
            self.workload = Some(w.clone());
        }
        if let Some(n) = o.max_retries {
            self.max_retries = n;
        }
        if let Some(h) = o.headroom {
            self.headroom = h;
        }
        if let Some(m) = &o.default_machine {
            self.default_machine = m.clone();
        }
        if let Some(c) = o.capacity {
            self.pools.default_capacity = c;
        }
        if let Some(l) = o.lease_hours {
            self.lease_hours = Some(l);
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.pools.default_capacity == 0 {
            return bad("pool capacity must be at least 1".into());
        }
        if let Some((m, _)) = self.pools.capacities.iter().find(|(_, c)| **c == 0) {
            return bad(format!("pool capacity for {m} must be at least 1"));
        }
        if self.headroom < Decimal::ONE {
            return bad(format!("headroom must be at least 1, got {}", self.headroom));
        }
        if let Err(e) = parse_machine_name(&self.default_machine) {
            return bad(format!("default machine '{}': {e}", self.default_machine));
        }
        if self.default_disk_gb < MIN_DISK_GB {
            return bad(format!("default disk must be at least {MIN_DISK_GB} GB"));
        }
        if self.test_samples == 0 {
            return bad("test_samples must be at least 1".into());
        }
        if matches!(self.lease_hours, Some(l) if l <= Decimal::ZERO) {
            return bad("lease_hours must be positive".into());
        }
        Ok(())
    }

    /// Resources for steps that request none.
    pub fn defaults(&self) -> ResourceRequest {
        ResourceRequest::new(self.default_machine.clone(), self.default_disk_gb, self.default_disk_class)
    }

    pub fn load_catalog(&self) -> Result<MachineCatalog, CatalogError> {
        match &self.catalog {
            Some(p) => MachineCatalog::load(p),
            None => Ok(MachineCatalog::sample()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProjectError {
    #[error("{path}:{error}")]
    Parse { path: String, error: ParseError },
    #[error("{path}: invalid workflow\n  {}", .diagnostics.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n  "))]
    Invalid { path: String, diagnostics: Vec<Diagnostic> },
    #[error("{path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sample list: {0}")]
    Samples(#[from] SampleListError),
    #[error("'{0}' cannot be used as a project id (letters, digits and '-', at most {MAX_PROJECT_ID_LEN})")]
    InvalidProjectId(String),
    #[error("project '{0}' already exists")]
    AlreadyExists(String),
    #[error("unknown project '{0}'")]
    UnknownProject(String),
    #[error("project '{0}' has not been created; run `gflow create` first")]
    NotCreated(String),
    #[error("no event log for job '{0}'")]
    UnknownJob(String),
    #[error("the sim backend needs a workload spec (--workload)")]
    MissingWorkload,
    #[error("catalog: {0}")]
    Catalog(#[from] CatalogError),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Local(#[from] LocalError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl ProjectError {
    /// 2 for bad input, 3 for everything environmental.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Parse { .. }
            | Self::Invalid { .. }
            | Self::ConfigFile { .. }
            | Self::Config(_)
            | Self::Samples(_)
            | Self::InvalidProjectId(_)
            | Self::MissingWorkload
            | Self::Workload(WorkloadError::Parse(_) | WorkloadError::Invalid { .. })
            | Self::Recommend(RecommendError::Invalid(_) | RecommendError::Parse(_))
            | Self::Recommend(RecommendError::HeadroomBelowOne(_)) => 2,
            Self::Catalog(CatalogError::Io { .. }) => 3,
            Self::Catalog(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> ProjectError {
    let context = context.into();
    move |source| ProjectError::Io { context, source }
}

/// Parse and validate a workflow file. Its name is the file stem; a
/// `configfile` is read relative to the file's directory.
pub fn load_job_file(path: &Path, catalog: &MachineCatalog) -> Result<Workflow, ProjectError> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {shown}")))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(crate::workflow::DEFAULT_WORKFLOW_NAME);
    let mut w = parse_workflow_named(name, &text).map_err(|error| ProjectError::Parse {
        path: shown.clone(),
        error,
    })?;
    if let Some(cfg) = w.configfile.clone() {
        let cfg_path = path.parent().unwrap_or(Path::new(".")).join(&cfg);
        let cfg_text = fs::read_to_string(&cfg_path).map_err(io_err(format!("reading configfile {}", cfg_path.display())))?;
        w.set_file_config(&cfg_text).map_err(|message| ProjectError::ConfigFile {
            path: cfg_path.display().to_string(),
            message,
        })?;
    }
    let diagnostics = validate_workflow(&w, catalog);
    if !diagnostics.is_empty() {
        return Err(ProjectError::Invalid { path: shown, diagnostics });
    }
    Ok(w)
}

/// Lowercase `name` and replace anything outside `[a-z0-9-]` with `-`.
pub fn project_id_for(name: &str) -> Result<String, ProjectError> {
    let mut id = String::new();
    for c in name.chars().map(|c| c.to_ascii_lowercase()) {
        let c = if c.is_ascii_lowercase() || c.is_ascii_digit() { c } else { '-' };
        if !(c == '-' && (id.is_empty() || id.ends_with('-'))) {
            id.push(c);
        }
    }
    let id = id.trim_end_matches('-').to_string();
    if id.is_empty() || id.len() > MAX_PROJECT_ID_LEN {
        return Err(ProjectError::InvalidProjectId(name.to_string()));
    }
    Ok(id)
}

fn check_project_id(id: &str) -> Result<(), ProjectError> {
    if project_id_for(id)? != id {
        return Err(ProjectError::InvalidProjectId(id.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets {
    pub reference: String,
    pub results: String,
    pub staging: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Test,
    Run,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobEntry {
    pub job_id: String,
    pub kind: JobKind,
}

/// The environment manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectEnv {
    pub project_id: String,
    pub store_root: PathBuf,
    pub buckets: Buckets,
    pub event_log_dir: PathBuf,
    pub catalog_path: PathBuf,
    pub created_at: DateTime<Utc>,
    pub workflow: Workflow,
    pub samples: Vec<String>,
    pub config: EngineConfig,
    /// Prefix tasks stage references from, if the workflow has any.
    #[serde(default)]
    pub references: Option<StoreUri>,
    #[serde(default)]
    pub jobs: Vec<JobEntry>,
}

fn projects_dir(store_root: &Path) -> PathBuf {
    store_root.join(STATE_DIR).join("projects")
}

fn record_path(store_root: &Path, id: &str) -> PathBuf {
    store_root.join(STATE_DIR).join("records").join(format!("{id}.json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ProjectError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(io_err(format!("writing {}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, ProjectError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| ProjectError::Io {
            context: format!("reading {}", path.display()),
            source: io::Error::new(io::ErrorKind::InvalidData, e),
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(format!("reading {}", path.display()))(e)),
    }
}

impl ProjectEnv {
    pub fn dir(&self) -> PathBuf {
        projects_dir(&self.store_root).join(&self.project_id)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir().join("env.json")
    }

    pub fn optparams_path(&self) -> PathBuf {
        self.dir().join("optparams.json")
    }

    pub fn test_record_path(&self) -> PathBuf {
        self.dir().join("test_samples.json")
    }

    pub fn step_log_dir(&self) -> PathBuf {
        self.dir().join("logs").join("steps")
    }

    pub fn work_dir(&self) -> PathBuf {
        self.dir().join("work")
    }

    pub fn log_path(&self, job_id: &str) -> PathBuf {
        self.event_log_dir.join(format!("{job_id}.jsonl"))
    }

    pub fn results_uri(&self) -> StoreUri {
        StoreUri::new(self.buckets.results.clone(), "").expect("bucket names are validated at create")
    }

    pub fn test_results_uri(&self) -> StoreUri {
        StoreUri::new(self.buckets.staging.clone(), "test").expect("bucket names are validated at create")
    }

    pub fn store(&self) -> Result<ObjectStore, ProjectError> {
        Ok(ObjectStore::open(&self.store_root)?)
    }

    pub fn catalog(&self) -> Result<MachineCatalog, ProjectError> {
        Ok(MachineCatalog::load(&self.catalog_path)?)
    }

    pub fn last_job(&self, kind: JobKind) -> Option<&str> {
        self.jobs.iter().rev().find(|j| j.kind == kind).map(|j| j.job_id.as_str())
    }

    /// Read a manifest, or `None` if the project has none.
    pub fn load(store_root: &Path, id: &str) -> Result<Option<Self>, ProjectError> {
        check_project_id(id)?;
        read_json(&projects_dir(store_root).join(id).join("env.json"))
    }

    /// Read a manifest that must exist.
    pub fn open(store_root: &Path, id: &str) -> Result<Self, ProjectError> {
        Self::load(store_root, id)?.ok_or_else(|| ProjectError::NotCreated(id.to_string()))
    }

    pub fn save(&self) -> Result<(), ProjectError> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&self.manifest_path(), &json)
    }

    fn record_job(&mut self, job_id: &str, kind: JobKind) -> Result<(), ProjectError> {
        if !self.jobs.iter().any(|j| j.job_id == job_id) {
            self.jobs.push(JobEntry {
                job_id: job_id.to_string(),
                kind,
            });
        }
        self.save()
    }
}

/// Cost of the last full run, kept after teardown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub job_id: String,
    pub currency: String,
    pub samples: usize,
    pub aggregate: Decimal,
    pub mean_per_sample: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectRecord {
    pub project_id: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub removed_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub final_cost: Option<CostSummary>,
}

impl ProjectRecord {
    pub fn load(store_root: &Path, id: &str) -> Result<Option<Self>, ProjectError> {
        check_project_id(id)?;
        read_json(&record_path(store_root, id))
    }

    fn save(&self, store_root: &Path) -> Result<(), ProjectError> {
        let json = serde_json::to_vec_pretty(self).expect("record serializes");
        write_atomic(&record_path(store_root, &self.project_id), &json)
    }
}

pub struct CreateOptions {
    pub store_root: PathBuf,
    /// Defaults to the workflow name.
    pub project_id: Option<String>,
    /// Directory a local `referencefile` is resolved against.
    pub base_dir: PathBuf,
}

fn absolute(p: &Path) -> Result<PathBuf, ProjectError> {
    std::path::absolute(p).map_err(io_err(format!("resolving {}", p.display())))
}

fn upload_references(store: &ObjectStore, src: &Path, bucket: &str) -> Result<usize, ProjectError> {
    let mut n = 0;
    if src.is_file() {
        let name = src.file_name().and_then(|s| s.to_str()).unwrap_or("reference");
        store.put_file(&StoreUri::new(bucket, name)?, src)?;
        return Ok(1);
    }
    for entry in walkdir::WalkDir::new(src).sort_by_file_name() {
        let entry = entry.map_err(|e| ProjectError::Io {
            context: format!("walking {}", src.display()),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(src).expect("walk stays under its root");
        let key: Vec<&str> = rel.iter().map(|c| c.to_str().unwrap_or("_")).collect();
        store.put_file(&StoreUri::new(bucket, key.join("/"))?, entry.path())?;
        n += 1;
    }
    Ok(n)
}

/// Create the project directory tree and its three buckets, upload local
/// references, and persist the manifest and project record.
pub fn create_architecture(
    w: &Workflow,
    samples: Vec<String>,
    config: &EngineConfig,
    opts: &CreateOptions,
) -> Result<ProjectEnv, ProjectError> {
    config.validate()?;
    let project_id = match &opts.project_id {
        Some(id) => {
            check_project_id(id)?;
            id.clone()
        }
        None => project_id_for(&w.name)?,
    };
    if samples.is_empty() {
        return Err(SampleListError::EmptySampleList.into());
    }
    let store_root = absolute(&opts.store_root)?;
    fs::create_dir_all(&store_root).map_err(io_err(format!("creating {}", store_root.display())))?;
    if ProjectEnv::load(&store_root, &project_id)?.is_some() {
        return Err(ProjectError::AlreadyExists(project_id));
    }
    let store = ObjectStore::open(&store_root)?;
    let catalog = config.load_catalog()?;

    let mut config = config.clone();
    config.workload = config.workload.as_deref().map(absolute).transpose()?;
    config.catalog = None;

    let suffix = loop {
        let s = format!("{:06x}", rand::thread_rng().gen_range(0..0x100_0000u32));
        if !store.bucket_exists(&format!("{project_id}-ref-{s}")) {
            break s;
        }
    };
    let buckets = Buckets {
        reference: format!("{project_id}-ref-{suffix}"),
        results: format!("{project_id}-results"),
        staging: format!("{project_id}-staging"),
    };
    let dir = projects_dir(&store_root).join(&project_id);
    let event_log_dir = dir.join("logs").join("events");
    for d in [&event_log_dir, &dir.join("logs").join("steps"), &dir.join("work")] {
        fs::create_dir_all(d).map_err(io_err(format!("creating {}", d.display())))?;
    }
    for b in [&buckets.reference, &buckets.results, &buckets.staging] {
        store.create_bucket(b)?;
    }

    let references = match w.referencefile.as_deref() {
        Some(r) if r.starts_with(crate::store::URI_SCHEME) => Some(r.parse::<StoreUri>()?),
        Some(r) => {
            let src = opts.base_dir.join(r);
            if !src.exists() {
                return Err(ProjectError::Io {
                    context: format!("referencefile {}", src.display()),
                    source: io::Error::from(io::ErrorKind::NotFound),
                });
            }
            let n = upload_references(&store, &src, &buckets.reference)?;
            log::info!("uploaded {n} reference object(s) to {}", buckets.reference);
            Some(StoreUri::new(buckets.reference.clone(), "")?)
        }
        None => None,
    };

    let catalog_path = dir.join("catalog.json");
    write_atomic(&catalog_path, catalog.to_json().as_bytes())?;
    let env = ProjectEnv {
        project_id: project_id.clone(),
        store_root: store_root.clone(),
        buckets,
        event_log_dir,
        catalog_path,
        created_at: Utc::now(),
        workflow: w.clone(),
        samples,
        config,
        references,
        jobs: Vec::new(),
    };
    env.save()?;
    ProjectRecord {
        project_id,
        created_at: env.created_at,
        removed_at: None,
        final_cost: None,
    }
    .save(&store_root)?;
    Ok(env)
}

fn load_workload(config: &EngineConfig) -> Result<WorkloadSpec, ProjectError> {
    let path = config.workload.as_deref().ok_or(ProjectError::MissingWorkload)?;
    let mut spec = WorkloadSpec::load(path)?;
    if let Some(seed) = config.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

/// Run `job` to completion, resuming from its log if one exists.
fn execute(env: &ProjectEnv, job: Job, catalog: &MachineCatalog) -> Result<JobState, ProjectError> {
    let config = &env.config;
    let store = env.store()?;
    let log_path = env.log_path(&job.job_id);
    let first = compile_task(&job.workflow, &job.sample_ids[0], &job.defaults, REFERENCE_DIR)?;
    let first_machine = first
        .steps
        .first()
        .and_then(|s| s.resources.machine.clone())
        .unwrap_or_default();
    let spec = match config.backend {
        BackendKind::Sim => Some(load_workload(config)?),
        BackendKind::Local => None,
    };

    let resuming = fs::metadata(&log_path).map(|m| m.len() > 0).unwrap_or(false);
    let mut orch = if resuming {
        let (orch, report) = Orchestrator::recover(&log_path, config.fsync)?;
        log::info!(
            "resuming {} from {} event(s); {} task(s) were in flight",
            job.job_id,
            report.events_replayed,
            report.lost.len()
        );
        orch
    } else {
        let lease_hours = config.lease_hours.unwrap_or_else(|| {
            spec.as_ref()
                .and_then(|s| s.expected_task_hours(&first))
                .map(|h| (h * Decimal::TWO).max(Decimal::new(1, 6)))
                .unwrap_or(DEFAULT_LEASE_HOURS)
        });
        let opts = OrchestratorOptions {
            fsync: config.fsync,
            concurrency: config.pools.capacity(&first_machine),
            lease_hours,
        };
        Orchestrator::submit(job, &log_path, opts)?
    };
    if orch.is_done() {
        return Ok(orch.state().clone());
    }

    match spec {
        Some(spec) => {
            run_job_sim(&mut orch, &spec, catalog, &config.pools, &store, REFERENCE_DIR)?;
        }
        None => {
            let mut opts = LocalOptions::new(env.work_dir(), env.step_log_dir());
            opts.container = config.container.clone();
            opts.limits = StepLimits {
                timeout: config.step_timeout_secs.map(std::time::Duration::from_secs),
                disk_quota_bytes: None,
            };
            opts.references = env.references.clone();
            run_job_local(&mut orch, &store, &opts, &config.pools, REFERENCE_DIR)?;
        }
    }
    Ok(orch.state().clone())
}

/// Samples the test run processed successfully.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestRecord {
    pub job_id: String,
    pub result_root: StoreUri,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimization {
    pub recommendation: Recommendation,
    pub profile: ResourceProfile,
    pub test_job: JobReport,
    pub optparams_path: PathBuf,
}

/// Run the first test samples under the default resources, profile them,
/// and write the recommendation to the project's optparams file.
pub fn find_optimized_param(env: &mut ProjectEnv) -> Result<Optimization, ProjectError> {
    let catalog = env.catalog()?;
    let wanted = env.workflow.testsamplesize.unwrap_or(env.config.test_samples) as usize;
    let n = test_sample_count(&env.workflow, env.config.test_samples, env.samples.len());
    if n < wanted {
        log::warn!("only {n} sample(s) available; testing {n} instead of {wanted}");
    }
    let mut job = Job::new(
        env.workflow.clone(),
        env.samples[..n].to_vec(),
        env.config.defaults(),
        env.config.max_retries,
        env.test_results_uri(),
    )?;
    job.job_id = format!("{}-test", job.job_id);
    let job_id = job.job_id.clone();
    env.record_job(&job_id, JobKind::Test)?;

    let state = execute(env, job, &catalog)?;
    let profile = profile_job(&state)?;
    let recommendation = recommend(&profile, &catalog, env.config.headroom)?;
    write_atomic(&env.optparams_path(), recommendation.to_json().as_bytes())?;
    let record = TestRecord {
        job_id,
        result_root: env.test_results_uri(),
        samples: state
            .tasks()
            .filter(|t| t.state == TaskState::Succeeded)
            .map(|t| t.sample_id.clone())
            .collect(),
    };
    write_atomic(
        &env.test_record_path(),
        &serde_json::to_vec_pretty(&record).expect("test record serializes"),
    )?;
    Ok(Optimization {
        recommendation,
        profile,
        test_job: JobReport::from_state(&state),
        optparams_path: env.optparams_path(),
    })
}

/// The optparams file written by [`find_optimized_param`], if any,
/// validated against the project.
pub fn load_optparams(env: &ProjectEnv, path: Option<&Path>) -> Result<Option<Recommendation>, ProjectError> {
    let default_path = env.optparams_path();
    let path = path.unwrap_or(&default_path);
    if path == default_path && !path.exists() {
        return Ok(None);
    }
    let rec = Recommendation::load(path)?;
    rec.validate(&env.workflow, &env.catalog()?)?;
    Ok(Some(rec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: JobReport,
    pub cost: CostReport,
    pub log_path: PathBuf,
}

impl RunOutcome {
    pub fn exhausted(&self) -> Vec<&str> {
        self.report.exhausted()
    }
}

fn copy_between_buckets(store: &ObjectStore, src: &StoreUri, dst: &StoreUri, sample: &str) -> Result<(), ProjectError> {
    let from = src.join(sample)?;
    for (uri, _) in store.list(&from)? {
        let rel = uri.key().strip_prefix(src.key().trim_end_matches('/')).unwrap_or(uri.key());
        let target = dst.join(rel.trim_start_matches('/'))?;
        if store.put_no_clobber(&target, &store.get(&uri)?)? == PutOutcome::AlreadyExists {
            log::info!("{target} already exists");
        }
    }
    Ok(())
}

fn test_costs(env: &ProjectEnv, catalog: &MachineCatalog) -> Result<Option<CostReport>, ProjectError> {
    let Some(test_id) = env.last_job(JobKind::Test) else {
        return Ok(None);
    };
    let path = env.log_path(test_id);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(job_cost_report(&read_state(&path)?, catalog)?))
}

/// Cost report for a full-run job: its own samples plus any reused from
/// the test run, compared against the test run's mean when optimized
/// parameters were applied.
fn run_cost_report(env: &ProjectEnv, state: &JobState, catalog: &MachineCatalog) -> Result<CostReport, ProjectError> {
    let mut report = job_cost_report(state, catalog)?;
    let test = test_costs(env, catalog)?;
    let job = state.job().ok_or_else(|| ProjectError::UnknownJob(String::new()))?;
    let ran: BTreeSet<&str> = job.sample_ids.iter().map(String::as_str).collect();
    if let Some(test) = &test {
        let mut samples = report.samples.clone();
        let reused = test
            .samples
            .iter()
            .filter(|s| !ran.contains(s.sample_id.as_str()) && env.samples.contains(&s.sample_id));
        samples.extend(reused.cloned());
        let order: BTreeMap<&str, usize> = env.samples.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        samples.sort_by_key(|s| order.get(s.sample_id.as_str()).copied().unwrap_or(usize::MAX));
        report = CostReport::new(report.currency.clone(), samples);
    }
    let optimized = job.workflow != env.workflow;
    if let Some(test) = test.filter(|t| optimized && t.mean_per_sample > Decimal::ZERO) {
        report = report.with_baseline(test.mean_per_sample)?;
    }
    Ok(report)
}

/// Run every sample, with `optparams` applied when given and the default
/// resources otherwise, then bill the job.
pub fn run_pipeline(env: &mut ProjectEnv, optparams: Option<&Recommendation>) -> Result<RunOutcome, ProjectError> {
    let catalog = env.catalog()?;
    let workflow = match optparams {
        Some(rec) => {
            rec.validate(&env.workflow, &catalog)?;
            rec.apply(&env.workflow)
        }
        None => env.workflow.clone(),
    };
    let mut samples = env.samples.clone();
    if env.config.reuse_test_results {
        if let Some(rec) = read_json::<TestRecord>(&env.test_record_path())? {
            let store = env.store()?;
            for s in &rec.samples {
                copy_between_buckets(&store, &rec.result_root, &env.results_uri(), s)?;
            }
            samples.retain(|s| !rec.samples.contains(s));
        }
    }
    if samples.is_empty() {
        return Err(ProjectError::Io {
            context: "every sample was processed by the test run; nothing left to run".into(),
            source: io::Error::from(io::ErrorKind::InvalidInput),
        });
    }
    let job = Job::new(
        workflow,
        samples,
        env.config.defaults(),
        env.config.max_retries,
        env.results_uri(),
    )?;
    let job_id = job.job_id.clone();
    env.record_job(&job_id, JobKind::Run)?;
    let state = execute(env, job, &catalog)?;
    let cost = run_cost_report(env, &state, &catalog)?;

    let mut record = ProjectRecord::load(&env.store_root, &env.project_id)?.unwrap_or(ProjectRecord {
        project_id: env.project_id.clone(),
        created_at: env.created_at,
        removed_at: None,
        final_cost: None,
    });
    record.final_cost = Some(CostSummary {
        job_id: job_id.clone(),
        currency: cost.currency.clone(),
        samples: cost.samples.len(),
        aggregate: cost.aggregate,
        mean_per_sample: cost.mean_per_sample,
    });
    record.save(&env.store_root)?;
    Ok(RunOutcome {
        report: JobReport::from_state(&state),
        cost,
        log_path: env.log_path(&job_id),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RemovalReport {
    pub project_id: String,
    pub buckets_removed: Vec<String>,
    pub record_kept: bool,
}

/// Remove buckets, logs and the manifest. The project record stays
/// unless `all` is set.
pub fn remove_project(store_root: &Path, project_id: &str, all: bool) -> Result<RemovalReport, ProjectError> {
    let env = ProjectEnv::load(store_root, project_id)?;
    let record = ProjectRecord::load(store_root, project_id)?;
    let mut report = RemovalReport {
        project_id: project_id.to_string(),
        buckets_removed: Vec::new(),
        record_kept: !all,
    };
    match (&env, &record) {
        (None, None) => return Err(ProjectError::UnknownProject(project_id.into())),
        (None, Some(_)) if !all => return Err(ProjectError::UnknownProject(project_id.into())),
        _ => {}
    }
    if let Some(env) = &env {
        let store = env.store()?;
        for b in [&env.buckets.reference, &env.buckets.results, &env.buckets.staging] {
            if store.bucket_exists(b) {
                store.remove_bucket(b)?;
                report.buckets_removed.push(b.clone());
            }
        }
        fs::remove_dir_all(env.dir()).map_err(io_err(format!("removing {}", env.dir().display())))?;
    }
    match record {
        Some(_) if all => {
            let path = record_path(store_root, project_id);
            fs::remove_file(&path).map_err(io_err(format!("removing {}", path.display())))?;
        }
        Some(mut r) => {
            r.removed_at = Some(Utc::now());
            r.save(store_root)?;
        }
        None => {}
    }
    Ok(report)
}

/// Replay a job log, tolerating a torn final line from a writer that is
/// still running.
fn read_state(path: &Path) -> Result<JobState, ProjectError> {
    match replay(path) {
        Ok(s) => Ok(s),
        Err(LogError::Corrupt(c)) if c.is_final_line => Ok(*c.state),
        Err(e) => Err(e.into()),
    }
}

fn find_job_log(store_root: &Path, target: &str) -> Result<PathBuf, ProjectError> {
    if project_id_for(target).ok().as_deref() == Some(target) {
        if let Some(env) = ProjectEnv::load(store_root, target)? {
            let job = env
                .last_job(JobKind::Run)
                .or_else(|| env.last_job(JobKind::Test))
                .ok_or_else(|| ProjectError::UnknownJob(target.to_string()))?;
            return Ok(env.log_path(job));
        }
    }
    let file = format!("{target}.jsonl");
    if let Ok(entries) = fs::read_dir(projects_dir(store_root)) {
        for entry in entries.flatten() {
            let candidate = entry.path().join("logs").join("events").join(&file);
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(ProjectError::UnknownJob(target.to_string()))
}

/// Progress of a job, or of a project's latest job. Read-only.
pub fn job_status(store_root: &Path, target: &str) -> Result<JobStatus, ProjectError> {
    Ok(read_state(&find_job_log(store_root, target)?)?.status())
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostAnswer {
    /// Recomputed from the project's last run log.
    Live(CostReport),
    /// From the record kept after teardown (or before any run).
    Record(ProjectRecord),
}

impl CostAnswer {
    pub fn aggregate(&self) -> Option<Decimal> {
        match self {
            Self::Live(r) => Some(r.aggregate),
            Self::Record(r) => r.final_cost.as_ref().map(|c| c.aggregate),
        }
    }
}

pub fn cost_query(store_root: &Path, project_id: &str) -> Result<CostAnswer, ProjectError> {
    if let Some(env) = ProjectEnv::load(store_root, project_id)? {
        if let Some(job) = env.last_job(JobKind::Run) {
            let path = env.log_path(job);
            if path.exists() {
                let catalog = env.catalog()?;
                return Ok(CostAnswer::Live(run_cost_report(&env, &read_state(&path)?, &catalog)?));
            }
        }
    }
    ProjectRecord::load(store_root, project_id)?
        .map(CostAnswer::Record)
        .ok_or_else(|| ProjectError::UnknownProject(project_id.to_string()))
}

/// Copy objects under `src` into `dst`, keeping files that already exist.
pub fn fetch(store_root: &Path, src: &StoreUri, dst: &Path) -> Result<CopyReport, ProjectError> {
    Ok(ObjectStore::open(store_root)?.copy_no_clobber(src, dst)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::parse_workflow_named;
    use rust_decimal_macros::dec;

    const WF: &str = r#"
rule align:
    input: ["sra://{sampleID}.fastq"]
    output: ["{sampleID}.bam"]
    shell: "bwa {input} > {output}"
"#;

    fn sim_env(dir: &Path) -> (Workflow, EngineConfig, CreateOptions) {
        let w = parse_workflow_named("toy_align", WF).unwrap();
        let spec = WorkloadSpec::fixed(7, "align", dec!(2), 3.0, 10.0, 40.0);
        let wl = dir.join("workload.json");
        fs::write(&wl, spec.to_json()).unwrap();
        let config = EngineConfig {
            workload: Some(wl),
            ..Default::default()
        };
        let opts = CreateOptions {
            store_root: dir.join("store"),
            project_id: None,
            base_dir: dir.to_path_buf(),
        };
        (w, config, opts)
    }

    fn samples(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("S{i}")).collect()
    }

    #[test]
    fn project_ids() {
        assert_eq!(project_id_for("RNAseq_Align v2").unwrap(), "rnaseq-align-v2");
        assert_eq!(project_id_for("__x__").unwrap(), "x");
        assert!(project_id_for("___").is_err());
        assert!(project_id_for(&"a".repeat(41)).is_err());
        assert!(check_project_id("Bad").is_err());
    }

    #[test]
    fn config_toml_and_overrides() {
        let text = "backend = \"local\"\nheadroom = 1.25\nmax_retries = 5\n[pools]\ndefault_capacity = 2\n[pools.capacities]\n\"e2-standard-4\" = 8\n";
        let cfg = EngineConfig::from_toml(text, Path::new("gflow.toml")).unwrap();
        assert_eq!(cfg.backend, BackendKind::Local);
        assert_eq!(cfg.headroom, dec!(1.25));
        assert_eq!(cfg.pools.capacity("e2-standard-4"), 8);
        assert_eq!(cfg.default_machine, DEFAULT_MACHINE);
        let cfg = cfg.with_overrides(&ConfigOverrides {
            max_retries: Some(1),
            capacity: Some(3),
            ..Default::default()
        });
        assert_eq!(cfg.max_retries, 1);
        assert_eq!(cfg.pools.capacity("n1-standard-1"), 3);
        assert!(EngineConfig::from_toml("colour = 1", Path::new("x")).is_err());
        assert!(EngineConfig::from_toml("headroom = 0.9", Path::new("x")).is_err());
        assert!(EngineConfig::from_toml("default_machine = \"m5-large\"", Path::new("x")).is_err());
        assert!(EngineConfig::from_toml("[pools]\ndefault_capacity = 0", Path::new("x")).is_err());
    }

    #[test]
    fn create_twice_fails() {
        let d = tempfile::tempdir().unwrap();
        let (w, cfg, opts) = sim_env(d.path());
        let env = create_architecture(&w, samples(2), &cfg, &opts).unwrap();
        assert_eq!(env.project_id, "toy-align");
        assert!(env.manifest_path().is_file());
        assert!(env.catalog_path.is_file());
        let store = env.store().unwrap();
        for b in [&env.buckets.reference, &env.buckets.results, &env.buckets.staging] {
            assert!(store.bucket_exists(b), "{b}");
        }
        assert!(matches!(
            create_architecture(&w, samples(2), &cfg, &opts),
            Err(ProjectError::AlreadyExists(_))
        ));
    }

    #[test]
    fn lifecycle_order_enforced() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(
            ProjectEnv::open(&d.path().join("store"), "toy-align"),
            Err(ProjectError::NotCreated(_))
        ));
    }

    #[test]
    fn local_reference_directory_is_uploaded() {
        let d = tempfile::tempdir().unwrap();
        let (mut w, cfg, opts) = sim_env(d.path());
        fs::create_dir_all(d.path().join("refs/idx")).unwrap();
        fs::write(d.path().join("refs/hg38.fa"), ">chr1\nACGT\n").unwrap();
        fs::write(d.path().join("refs/idx/hg38.bwt"), "x").unwrap();
        w.referencefile = Some("refs".into());
        let env = create_architecture(&w, samples(1), &cfg, &opts).unwrap();
        let refs = env.references.clone().unwrap();
        let listed: Vec<String> = env.store().unwrap().list(&refs).unwrap().into_iter().map(|(u, _)| u.key().to_string()).collect();
        assert_eq!(listed, vec!["hg38.fa", "idx/hg38.bwt"]);
    }

    #[test]
    fn optimize_run_teardown() {
        let d = tempfile::tempdir().unwrap();
        let (w, cfg, opts) = sim_env(d.path());
        let mut env = create_architecture(&w, samples(5), &cfg, &opts).unwrap();
        let opt = find_optimized_param(&mut env).unwrap();
        assert_eq!(opt.test_job.outcomes.len(), 3);
        // 3.3 vCPU and 11 GB after headroom
        assert_eq!(opt.recommendation.rules["align"].machine, "e2-standard-4");
        assert_eq!(opt.recommendation.rules["align"].disk_gb, 50);
        let rec = load_optparams(&env, None).unwrap().unwrap();
        assert_eq!(rec, opt.recommendation);

        let out = run_pipeline(&mut env, Some(&rec)).unwrap();
        assert!(out.exhausted().is_empty());
        assert_eq!(out.cost.samples.len(), 5);
        assert!(out.cost.comparison.as_ref().unwrap().reduction.percent > Decimal::ZERO);
        let results = env.store().unwrap().list(&env.results_uri()).unwrap();
        assert_eq!(results.len(), 5);

        let status = job_status(&env.store_root, &env.project_id).unwrap();
        assert_eq!(status.count(TaskState::Succeeded), 5);

        let live = cost_query(&env.store_root, &env.project_id).unwrap();
        let removed = remove_project(&env.store_root, &env.project_id, false).unwrap();
        assert_eq!(removed.buckets_removed.len(), 3);
        assert!(!env.dir().exists());
        let kept = cost_query(&env.store_root, &env.project_id).unwrap();
        assert!(matches!(kept, CostAnswer::Record(_)));
        assert_eq!(kept.aggregate(), live.aggregate());

        assert!(matches!(
            remove_project(&env.store_root, &env.project_id, false),
            Err(ProjectError::UnknownProject(_))
        ));
        remove_project(&env.store_root, &env.project_id, true).unwrap();
        assert!(matches!(
            cost_query(&env.store_root, &env.project_id),
            Err(ProjectError::UnknownProject(_))
        ));
    }

    #[test]
    fn defaults_run_bills_default_machine() {
        let d = tempfile::tempdir().unwrap();
        let (w, cfg, opts) = sim_env(d.path());
        let mut env = create_architecture(&w, samples(2), &cfg, &opts).unwrap();
        let out = run_pipeline(&mut env, None).unwrap();
        let state = read_state(&out.log_path).unwrap();
        for t in state.tasks() {
            for h in &t.history {
                assert!(h.steps.iter().all(|s| s.machine == DEFAULT_MACHINE));
            }
        }
        assert!(out.cost.comparison.is_none());
    }

    #[test]
    fn reuse_skips_test_samples() {
        let d = tempfile::tempdir().unwrap();
        let (w, mut cfg, opts) = sim_env(d.path());
        cfg.reuse_test_results = true;
        let mut env = create_architecture(&w, samples(4), &cfg, &opts).unwrap();
        let opt = find_optimized_param(&mut env).unwrap();
        let out = run_pipeline(&mut env, Some(&opt.recommendation)).unwrap();
        assert_eq!(out.report.outcomes.len(), 1);
        assert_eq!(out.cost.samples.len(), 4);
        assert_eq!(env.store().unwrap().list(&env.results_uri()).unwrap().len(), 4);
    }

    #[test]
    fn rerun_resumes_finished_job() {
        let d = tempfile::tempdir().unwrap();
        let (w, cfg, opts) = sim_env(d.path());
        let mut env = create_architecture(&w, samples(2), &cfg, &opts).unwrap();
        let a = run_pipeline(&mut env, None).unwrap();
        let before = fs::read(&a.log_path).unwrap();
        let b = run_pipeline(&mut env, None).unwrap();
        assert_eq!(a.cost, b.cost);
        assert_eq!(fs::read(&b.log_path).unwrap(), before);
    }

    #[test]
    fn sim_without_workload_is_a_usage_error() {
        let d = tempfile::tempdir().unwrap();
        let (w, mut cfg, opts) = sim_env(d.path());
        cfg.workload = None;
        let mut env = create_architecture(&w, samples(1), &cfg, &opts).unwrap();
        let err = run_pipeline(&mut env, None).unwrap_err();
        assert!(matches!(err, ProjectError::MissingWorkload));
        assert_eq!(err.exit_code(), 2);
    }
}
