use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dfn_fem::analysis::{benchmark_solvers, convergence_study, BenchConfig, StudyConfig};
use dfn_fem::linalg::set_sequential_factorization;
use dfn_fem::params::{parse_config_text, ParameterSet};
use dfn_fem::solvers::SolverKind;
use dfn_fem::timeloop::{run, write_snapshot, CaseConfig};
use dfn_fem::Error;

#[derive(Parser)]
#[command(
    name = "dfn",
    version,
    about = "Finite element simulations of the Doyle-Fuller-Newman cell model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// March one case in time and write its time series and snapshots.
    Simulate(Common),
    /// Run a convergence study against a refined reference solution.
    Converge(Common),
    /// Compare every configured solver on the same case.
    Bench(Common),
    /// Check a parameter, case, study or bench file without running it.
    Validate(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "./out")]
    out: PathBuf,
    /// Worker threads; all cores by default.
    #[arg(long)]
    threads: Option<usize>,
    /// Single-threaded factorizations for bit-reproducible output.
    #[arg(long)]
    deterministic: bool,
    /// Overrides the solver named in the plan.
    #[arg(long)]
    solver: Option<SolverKind>,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config: PathBuf,
    version: &'static str,
    started_unix_s: u64,
    wall_time_s: f64,
    threads: usize,
    deterministic: bool,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolved: Option<toml::Value>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Convergence(_) | Error::Linear(_) | Error::Domain(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: message.into(),
    }
}

struct Outcome {
    artifacts: Vec<String>,
    resolved: Option<toml::Value>,
}

struct Session<'a> {
    opts: &'a Common,
    artifacts: Vec<String>,
    resolved: Option<toml::Value>,
}

impl Session<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.opts.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
        }
        fs::write(&path, contents).map_err(|e| Failure::from(Error::io(&path, e)))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    /// Records the fully resolved configuration and writes it as a standalone file.
    fn resolve<T: Serialize>(&mut self, config: &T) -> Result<(), Failure> {
        let value = toml::Value::try_from(config).map_err(|e| config_error(format!("cannot serialize config: {e}")))?;
        let text = toml::to_string_pretty(&value).map_err(|e| config_error(format!("cannot serialize config: {e}")))?;
        self.write("resolved.toml", &text)?;
        self.resolved = Some(value);
        Ok(())
    }

    fn finish(self) -> Outcome {
        Outcome {
            artifacts: self.artifacts,
            resolved: self.resolved,
        }
    }
}

fn apply_solver(case: &mut CaseConfig, solver: Option<SolverKind>) {
    if let Some(kind) = solver {
        case.plan.solver = kind;
    }
}

fn simulate(s: &mut Session) -> Result<(), Failure> {
    let mut case = CaseConfig::load(&s.opts.config)?;
    apply_solver(&mut case, s.opts.solver);
    s.resolve(&case)?;
    let problem = case.discretization()?;
    log::info!(
        "{} elements, {} radial nodes per particle, {} steps with {}",
        problem.mesh.n_elements(),
        problem.radial[0].n_nodes(),
        case.plan.n_steps(),
        case.plan.solver
    );
    let out = run(&problem, &case.plan, &case.solver, |_, _| {})?;
    s.write("timeseries.csv", &out.series.to_csv())?;
    for (step, state) in &out.snapshots {
        s.write(
            &format!("snapshots/step_{step:06}.txt"),
            &write_snapshot(state, *step, *step as f64 * case.plan.tau),
        )?;
    }
    let last = out.series.records.len();
    s.write(
        "final_state.txt",
        &write_snapshot(&out.state, last, last as f64 * case.plan.tau),
    )?;
    out.into_result()?;
    Ok(())
}

fn converge(s: &mut Session) -> Result<(), Failure> {
    let mut study = StudyConfig::load(&s.opts.config)?;
    apply_solver(&mut study.case, s.opts.solver);
    s.resolve(&study)?;
    let table = convergence_study(&study)?;
    let axis = study.axis.name();
    s.write(&format!("convergence_{axis}.csv"), &table.to_csv())?;
    let text = table.to_text();
    s.write(&format!("convergence_{axis}.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn bench(s: &mut Session) -> Result<(), Failure> {
    let mut cfg = BenchConfig::load(&s.opts.config)?;
    if let Some(kind) = s.opts.solver {
        cfg.kinds = vec![kind];
    }
    s.resolve(&cfg)?;
    let problem = cfg.case.discretization()?;
    let report = benchmark_solvers(&problem, &cfg.case.plan, &cfg.case.solver, &cfg.kinds, cfg.repetitions)?;
    s.write("bench.csv", &report.to_csv())?;
    let text = report.to_text();
    s.write("bench.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn validate(s: &mut Session) -> Result<(), Failure> {
    let path = &s.opts.config;
    let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    let value = parse_config_text(path, &text)?;
    let has = |k: &str| value.get(k).is_some();
    let summary = if has("case") && has("axis") {
        let study = StudyConfig::load(path)?;
        study.level_case(study.reference_level()).discretization()?;
        s.resolve(&study)?;
        format!("study along {} with levels {:?}", study.axis.name(), study.levels)
    } else if has("case") {
        let cfg = BenchConfig::load(path)?;
        cfg.case.discretization()?;
        s.resolve(&cfg)?;
        format!("bench over {} solvers", cfg.kinds.len())
    } else if has("plan") {
        let case = CaseConfig::load(path)?;
        let p = case.discretization()?;
        s.resolve(&case)?;
        format!(
            "case with {} elements and {} steps",
            p.mesh.n_elements(),
            case.plan.n_steps()
        )
    } else {
        ParameterSet::load(path, &BTreeMap::new())?;
        "parameter set".to_string()
    };
    println!("{}: valid {summary}", path.display());
    Ok(())
}

fn write_manifest(opts: &Common, manifest: &Manifest) {
    let path = opts.out.join("manifest.toml");
    let text = match toml::to_string_pretty(manifest) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot serialize manifest: {e}");
            return;
        }
    };
    if let Err(e) = fs::create_dir_all(&opts.out).and_then(|_| fs::write(&path, text)) {
        eprintln!("error: cannot write {}: {e}", path.display());
    }
}

fn execute(name: &str, opts: &Common, job: fn(&mut Session) -> Result<(), Failure>) -> ExitCode {
    let started = Instant::now();
    let started_unix_s = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let threads = opts.threads.unwrap_or(0);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool already configured: {e}");
    }
    set_sequential_factorization(opts.deterministic);
    let mut session = Session {
        opts,
        artifacts: Vec::new(),
        resolved: None,
    };
    let result = job(&mut session);
    let Outcome { artifacts, resolved } = session.finish();
    let (status, error, code) = match result {
        Ok(()) => ("ok".to_string(), None, 0),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ("failed".to_string(), Some(f.message), f.code)
        }
    };
    let manifest = Manifest {
        command: name.to_string(),
        config: absolute(&opts.config),
        version: env!("CARGO_PKG_VERSION"),
        started_unix_s,
        wall_time_s: started.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
        deterministic: opts.deterministic,
        status,
        error,
        artifacts,
        resolved,
    };
    write_manifest(opts, &manifest);
    ExitCode::from(code)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(o) => execute("simulate", o, simulate),
        Command::Converge(o) => execute("converge", o, converge),
        Command::Bench(o) => execute("bench", o, bench),
        Command::Validate(o) => execute("validate", o, validate),
    }
}
