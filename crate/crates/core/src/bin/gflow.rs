use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rust_decimal::Decimal;

use gflow::backend::BackendKind;
use gflow::catalog::MachineCatalog;
use gflow::optimizer::{round_cents, currency_symbol, Recommendation};
use gflow::orchestrator::parse_sample_list;
use gflow::project::{
    self, ConfigOverrides, CostAnswer, CreateOptions, EngineConfig, ProjectEnv, ProjectError, REFERENCE_DIR,
};
use gflow::store::StoreUri;
use gflow::workflow::compile_task;

const EXIT_PARTIAL: u8 = 1;

#[derive(Parser)]
#[command(name = "gflow", version, about = "Run per-sample workflows and size their machines for cost")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Directory holding buckets and project state.
    #[arg(long, global = true, env = "GFLOW_STORE_ROOT", default_value = "gflow-store")]
    store_root: PathBuf,
    /// Engine config file (TOML).
    #[arg(long, global = true, env = "GFLOW_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "GFLOW_BACKEND", value_enum)]
    backend: Option<BackendKind>,
    /// Machine catalog (JSON); the built-in sample catalog otherwise.
    #[arg(long, global = true, env = "GFLOW_CATALOG")]
    catalog: Option<PathBuf>,
    /// Seed for simulated workloads.
    #[arg(long, global = true, env = "GFLOW_SEED")]
    seed: Option<u64>,
    /// Workload spec for the sim backend.
    #[arg(long, global = true, env = "GFLOW_WORKLOAD")]
    workload: Option<PathBuf>,
    #[arg(long, global = true, env = "GFLOW_MAX_RETRIES")]
    max_retries: Option<u32>,
    #[arg(long, global = true, env = "GFLOW_HEADROOM")]
    headroom: Option<Decimal>,
    /// Machine for steps that request none.
    #[arg(long, global = true, env = "GFLOW_DEFAULT_MACHINE")]
    default_machine: Option<String>,
    /// Task slots per machine type.
    #[arg(long, global = true, env = "GFLOW_CAPACITY")]
    capacity: Option<u32>,
    #[arg(long, global = true, env = "GFLOW_LEASE_HOURS")]
    lease_hours: Option<Decimal>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a workflow and print the step plan of one sample.
    Plan {
        workflow: PathBuf,
        #[arg(long, default_value = "SAMPLE")]
        sample: String,
        /// Print the plan as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Create a project: buckets, directories, uploaded references.
    Create {
        workflow: PathBuf,
        /// Sample list, one id per line.
        #[arg(long, env = "GFLOW_SAMPLES")]
        samples: PathBuf,
        /// Defaults to the workflow file name.
        #[arg(long, env = "GFLOW_PROJECT")]
        project: Option<String>,
    },
    /// Profile test samples and write optimized parameters.
    Optimize { project: String },
    /// Run every sample and report the cost.
    Run {
        project: String,
        /// Use this optparams file instead of the project's.
        #[arg(long, conflicts_with = "defaults")]
        optparams: Option<PathBuf>,
        /// Ignore optimized parameters and use the default resources.
        #[arg(long)]
        defaults: bool,
        #[arg(long)]
        json: bool,
    },
    /// Remove buckets and logs; keep the cost record unless --all.
    Teardown {
        project: String,
        #[arg(long)]
        all: bool,
    },
    /// Progress of a project's latest job, or of a job by id.
    Status { target: String },
    /// Cost of a project's last run.
    Cost {
        project: String,
        #[arg(long)]
        json: bool,
    },
    /// Copy objects to a local directory without overwriting.
    Fetch { source: StoreUri, destination: PathBuf },
}

impl Global {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            backend: self.backend,
            catalog: self.catalog.clone(),
            seed: self.seed,
            workload: self.workload.clone(),
            max_retries: self.max_retries,
            headroom: self.headroom,
            default_machine: self.default_machine.clone(),
            capacity: self.capacity,
            lease_hours: self.lease_hours,
        }
    }

    fn config(&self, base: EngineConfig) -> Result<EngineConfig, ProjectError> {
        let base = match &self.config {
            Some(p) => EngineConfig::load(p)?,
            None => base,
        };
        let cfg = base.with_overrides(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }

    fn open(&self, project: &str) -> Result<ProjectEnv, ProjectError> {
        let mut env = ProjectEnv::open(&self.store_root, project)?;
        if self.catalog.is_some() {
            log::warn!("the catalog is fixed when a project is created; --catalog ignored");
        }
        let mut cfg = self.config(env.config.clone())?;
        cfg.catalog = None;
        env.config = cfg;
        Ok(env)
    }
}

fn money(code: &str, d: Decimal) -> String {
    format!("{}{:.2}", currency_symbol(code), round_cents(d))
}

fn print_recommendation(rec: &Recommendation, catalog: &MachineCatalog) {
    println!("{:<20} {:<16} {:>5} {:>8} {:>8}  disk", "rule", "machine", "vcpu", "mem_gb", "price/h");
    for (rule, r) in &rec.rules {
        let (vcpu, mem, price) = catalog
            .machine(&r.machine)
            .map(|m| (m.vcpu.to_string(), m.mem_gb.to_string(), money(&catalog.currency, m.price_per_hour)))
            .unwrap_or_default();
        println!(
            "{rule:<20} {:<16} {vcpu:>5} {mem:>8} {price:>8}  {} GB {}",
            r.machine, r.disk_gb, r.disk_class
        );
    }
}

fn read_samples(path: &Path) -> Result<Vec<String>, ProjectError> {
    let text = fs::read_to_string(path).map_err(|source| ProjectError::Io {
        context: format!("reading {}", path.display()),
        source,
    })?;
    Ok(parse_sample_list(&text)?)
}

fn run(cli: Cli) -> Result<u8, ProjectError> {
    let g = &cli.global;
    match cli.command {
        Command::Plan { workflow, sample, json } => {
            let cfg = g.config(EngineConfig::default())?;
            let w = project::load_job_file(&workflow, &cfg.load_catalog()?)?;
            let plan = compile_task(&w, &sample, &cfg.defaults(), REFERENCE_DIR)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&plan).expect("plan serializes"));
                return Ok(0);
            }
            println!("workflow {} ({} rules), sample {}", w.name, w.rules.len(), plan.sample_id);
            for (i, s) in plan.steps.iter().enumerate() {
                let r = &s.resources;
                println!(
                    "{:>3}. {:<20} {} {} GB {}",
                    i + 1,
                    s.rule_name,
                    r.machine.as_deref().unwrap_or("-"),
                    r.disk_gb.unwrap_or_default(),
                    r.disk_class.map(|c| c.to_string()).unwrap_or_default()
                );
                println!("     $ {}", s.resolved_command);
            }
            for e in &plan.edges {
                println!("  {} -> {}", e.producer, e.consumer);
            }
        }
        Command::Create {
            workflow,
            samples,
            project,
        } => {
            let cfg = g.config(EngineConfig::default())?;
            let w = project::load_job_file(&workflow, &cfg.load_catalog()?)?;
            let samples = read_samples(&samples)?;
            let base_dir = workflow.parent().map(Path::to_path_buf).unwrap_or_default();
            let env = project::create_architecture(
                &w,
                samples,
                &cfg,
                &CreateOptions {
                    store_root: g.store_root.clone(),
                    project_id: project,
                    base_dir,
                },
            )?;
            println!("created project {}", env.project_id);
            println!("  reference bucket  {}", env.buckets.reference);
            println!("  results bucket    {}", env.buckets.results);
            println!("  staging bucket    {}", env.buckets.staging);
            println!("  samples           {}", env.samples.len());
        }
        Command::Optimize { project } => {
            let mut env = g.open(&project)?;
            let opt = project::find_optimized_param(&mut env)?;
            let failed = opt.test_job.exhausted().len();
            println!(
                "profiled {} test sample(s) ({failed} failed) with headroom {}",
                opt.test_job.outcomes.len(),
                opt.recommendation.headroom
            );
            print_recommendation(&opt.recommendation, &env.catalog()?);
            println!("wrote {}", opt.optparams_path.display());
        }
        Command::Run {
            project,
            optparams,
            defaults,
            json,
        } => {
            let mut env = g.open(&project)?;
            let rec = if defaults {
                None
            } else {
                project::load_optparams(&env, optparams.as_deref())?
            };
            if rec.is_none() {
                log::info!("no optimized parameters; using {}", env.config.default_machine);
            }
            let out = project::run_pipeline(&mut env, rec.as_ref())?;
            if json {
                println!("{}", out.cost.to_json());
            } else {
                println!("job {}  makespan {:.2} h", out.report.job_id, out.report.makespan_hours);
                println!("{}", out.cost.render_table());
            }
            let exhausted = out.exhausted();
            if !exhausted.is_empty() {
                eprintln!("{} sample(s) exhausted their retries: {}", exhausted.len(), exhausted.join(", "));
                return Ok(EXIT_PARTIAL);
            }
        }
        Command::Teardown { project, all } => {
            let r = project::remove_project(&g.store_root, &project, all)?;
            println!("removed project {} ({} bucket(s))", r.project_id, r.buckets_removed.len());
            if r.record_kept {
                println!("cost record kept; `gflow cost {}` still answers", r.project_id);
            }
        }
        Command::Status { target } => {
            println!("{}", project::job_status(&g.store_root, &target)?);
        }
        Command::Cost { project, json } => match project::cost_query(&g.store_root, &project)? {
            CostAnswer::Live(report) if json => println!("{}", report.to_json()),
            CostAnswer::Live(report) => println!("{}", report.render_table()),
            CostAnswer::Record(r) if json => {
                println!("{}", serde_json::to_string_pretty(&r).expect("record serializes"))
            }
            CostAnswer::Record(r) => match &r.final_cost {
                Some(c) => {
                    println!("project {} (job {}, {} samples)", r.project_id, c.job_id, c.samples);
                    println!("aggregate        {}", money(&c.currency, c.aggregate));
                    println!("mean per sample  {}", money(&c.currency, c.mean_per_sample));
                }
                None => println!("project {}: no completed run", r.project_id),
            },
        },
        Command::Fetch { source, destination } => {
            let r = project::fetch(&g.store_root, &source, &destination)?;
            println!("copied {}, skipped {}", r.copied, r.skipped);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    // exit quietly when stdout is a closed pipe, e.g. `gflow status x | head`
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
