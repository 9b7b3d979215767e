//! Backward Euler time marching, run configuration, and text outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assembly::{operators, DiscreteState, Discretization, StepData};
use crate::error::{Error, Result};
use crate::linalg::norm_inf;
use crate::mesh::{build_laminate, build_radial, Geometry, RadialSpec, Resolution};
use crate::params::{apply_value_overrides, parse_config_text, preset_value, ParameterSet, SubdomainTag};
use crate::solvers::{newton_solve, solve_step, BlockSystem, Group, Layout, SolverConfig, SolverKind, SolverReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationPlan {
    pub t_end: f64,
    pub tau: f64,
    #[serde(default = "default_solver")]
    pub solver: SolverKind,
    /// Keep every n-th state; 0 keeps none.
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_solver() -> SolverKind {
    SolverKind::TwoDsFc
}

impl SimulationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= self.t_end && self.t_end.is_finite()) {
            return Err(Error::Validation(format!(
                "plan requires 0 < tau <= t_end, got tau = {}, t_end = {}",
                self.tau, self.t_end
            )));
        }
        Ok(())
    }

    /// `floor(t_end / tau)`, tolerant of round-off in the ratio.
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.tau * (1.0 + 1e-12)).floor() as usize
    }
}

/// Where the parameter set comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Parameter file, relative to the case file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub resolution: Resolution,
    #[serde(default)]
    pub refine: usize,
}

/// Reads a TOML (or `.json`) file into any configuration type.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_value(parse_config_text(path, &text)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Everything one simulation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub params: ParamSource,
    pub geometry: Geometry,
    pub mesh: MeshSpec,
    pub radial: RadialSpec,
    pub plan: SimulationPlan,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl CaseConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut case: CaseConfig = load_config(path)?;
        case.resolve_paths(path);
        case.validate()?;
        Ok(case)
    }

    /// Makes a relative parameter file path relative to the directory of `config_path`.
    pub fn resolve_paths(&mut self, config_path: &Path) {
        if let (Some(file), Some(dir)) = (&self.params.file, config_path.parent()) {
            if file.is_relative() {
                self.params.file = Some(dir.join(file));
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.solver.validate()
    }

    pub fn parameters(&self) -> Result<ParameterSet> {
        let src = &self.params;
        let (mut value, origin) = match (&src.preset, &src.file) {
            (Some(name), None) => (preset_value(name)?, format!("<preset {name}>")),
            (None, Some(file)) => {
                let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
                (parse_config_text(file, &text)?, file.display().to_string())
            }
            _ => {
                return Err(Error::Validation(
                    "params needs exactly one of `preset` or `file`".into(),
                ))
            }
        };
        apply_value_overrides(&mut value, &src.overrides)?;
        ParameterSet::from_value(value, &origin)
    }

    pub fn discretization(&self) -> Result<Discretization> {
        let ps = self.parameters()?;
        let mesh = build_laminate(&self.geometry, &self.mesh.resolution)?.refine_uniform(self.mesh.refine);
        let radial = [
            build_radial(&ps, SubdomainTag::Negative, &self.radial)?,
            build_radial(&ps, SubdomainTag::Positive, &self.radial)?,
        ];
        Discretization::new(ps, mesh, radial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub voltage: f64,
    pub c1_min: f64,
    pub c1_max: f64,
    pub c2surf_min: f64,
    pub c2surf_max: f64,
    pub source_balance: f64,
    pub outer_its: usize,
    pub newton_its: usize,
    pub wall_s: f64,
}

impl StepRecord {
    fn new(problem: &Discretization, t: f64, state: &DiscreteState, report: &SolverReport) -> Result<Self> {
        let (c1_min, c1_max) = min_max(&state.c1);
        let (c2surf_min, c2surf_max) = min_max(&state.surface());
        Ok(Self {
            t,
            voltage: problem.cell_voltage(&state.phi2),
            c1_min,
            c1_max,
            c2surf_min,
            c2surf_max,
            source_balance: problem.discrete_source_balance(state)?,
            outer_its: report.outer_iterations,
            newton_its: report.newton_iterations_total,
            wall_s: report.wall_time,
        })
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimeSeries {
    pub records: Vec<StepRecord>,
}

pub const TIME_SERIES_HEADER: &str =
    "t,voltage,c1_min,c1_max,c2surf_min,c2surf_max,source_balance,outer_its,newton_its,wall_s";

impl TimeSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TIME_SERIES_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{:e}",
                r.t,
                r.voltage,
                r.c1_min,
                r.c1_max,
                r.c2surf_min,
                r.c2surf_max,
                r.source_balance,
                r.outer_its,
                r.newton_its,
                r.wall_s
            );
        }
        out
    }
}

/// Why a run stopped early.
#[derive(Debug)]
pub struct StepFailure {
    pub step: usize,
    pub error: Error,
}

#[derive(Debug)]
pub struct RunOutput {
    pub series: TimeSeries,
    pub initial: DiscreteState,
    pub state: DiscreteState,
    /// `(step, state)` pairs kept at the plan's cadence.
    pub snapshots: Vec<(usize, DiscreteState)>,
    pub reports: Vec<SolverReport>,
    pub failure: Option<StepFailure>,
}

impl RunOutput {
    pub fn into_result(self) -> Result<Self> {
        match self.failure {
            Some(f) => Err(Error::Convergence(format!("step {}: {}", f.step, f.error))),
            None => Ok(self),
        }
    }
}

/// Initial concentrations plus potentials solved from the frozen-concentration system at `t = 0`.
pub fn initialize_state(problem: &Discretization, cfg: &SolverConfig) -> Result<DiscreteState> {
    let mut state = problem.initial_concentrations();
    for (i, &v) in problem.dofs.phi2_vertices.iter().enumerate() {
        let e = (0..problem.mesh.n_elements())
            .find(|&e| problem.mesh.tag(e).is_electrode() && problem.mesh.element(e).contains(&v))
            .expect("phi2 vertex touches an electrode");
        let tag = problem.mesh.tag(e);
        state.phi2[i] = problem.params.ocp(tag, problem.params.electrode_of(tag).c2_init)?.0;
    }
    let current = problem.params.operating.current_at(0.0);
    // the time step only enters the concentration rows, which stay frozen here
    let step = StepData::new(problem, &state, 1.0, 0.0, current)?;
    let x = crate::solvers::reduced_vector(&state);
    let mut sys = BlockSystem::new(
        problem,
        &step,
        Layout::Reduced,
        x,
        &[Group::Phi1, Group::Phi2],
        false,
        cfg.pin,
    )?;
    let x0 = sys.block_values();
    let (xb, _) = newton_solve(&mut sys, &x0, cfg)
        .map_err(|e| Error::Convergence(format!("potential initialization failed: {e}")))?;
    let x = sys.scatter(&xb);
    let nv = problem.dofs.n_vertices;
    state.phi1 = x[nv..2 * nv].to_vec();
    state.phi2 = x[2 * nv..problem.dofs.n_macro()].to_vec();
    crate::solvers::shift_mean(problem, &mut state);
    Ok(state)
}

/// Marches `plan.n_steps()` backward Euler steps from the consistent initial state.
///
/// `observe` sees every accepted state with its step index.
pub fn run(
    problem: &Discretization,
    plan: &SimulationPlan,
    cfg: &SolverConfig,
    mut observe: impl FnMut(usize, &DiscreteState),
) -> Result<RunOutput> {
    plan.validate()?;
    let initial = initialize_state(problem, cfg)?;
    let ops = operators(problem, plan.tau)?;
    let mut out = RunOutput {
        series: TimeSeries::default(),
        initial: initial.clone(),
        state: initial.clone(),
        snapshots: Vec::new(),
        reports: Vec::new(),
        failure: None,
    };
    observe(0, &initial);
    if plan.snapshot_every > 0 {
        out.snapshots.push((0, initial.clone()));
    }
    for k in 1..=plan.n_steps() {
        let t = k as f64 * plan.tau;
        let current = problem.params.operating.current_at(t);
        let started = Instant::now();
        let attempt = StepData::with_operators(problem, &out.state, plan.tau, t, current, ops.clone())
            .and_then(|step| solve_step(plan.solver, problem, &step, &out.state, cfg));
        let (state, mut report) = match attempt {
            Ok(v) => v,
            Err(error) => {
                log::error!("step {k} failed: {error}");
                out.failure = Some(StepFailure { step: k, error });
                return Ok(out);
            }
        };
        report.wall_time = started.elapsed().as_secs_f64();
        if !state.within_bounds(problem) {
            log::warn!("step {k}: concentrations left their physical bounds");
        }
        out.series.records.push(StepRecord::new(problem, t, &state, &report)?);
        observe(k, &state);
        if plan.snapshot_every > 0 && k % plan.snapshot_every == 0 {
            out.snapshots.push((k, state.clone()));
        }
        out.reports.push(report);
        out.state = state;
    }
    Ok(out)
}

/// `max |a - b|` over every unknown.
pub fn state_distance(a: &DiscreteState, b: &DiscreteState) -> f64 {
    let d: Vec<f64> = a.flatten().iter().zip(b.flatten()).map(|(x, y)| x - y).collect();
    norm_inf(&d)
}

/// Largest per-group `max |a - b| / max |a|` over the groups c1, potentials and particle concentrations.
pub fn relative_state_distance(a: &DiscreteState, b: &DiscreteState) -> f64 {
    fn group<'a>(a: impl Iterator<Item = &'a f64> + Clone, b: impl Iterator<Item = &'a f64>) -> f64 {
        let scale = a.clone().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        a.zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }
    let pa = a.phi1.iter().chain(&a.phi2);
    let pb = b.phi1.iter().chain(&b.phi2);
    group(a.c1.iter(), b.c1.iter())
        .max(group(pa, pb))
        .max(group(a.c2.iter().flatten(), b.c2.iter().flatten()))
}

/// Plain-text dump of a state: one header line per field followed by its values.
pub fn write_snapshot(state: &DiscreteState, step: usize, t: f64) -> String {
    let mut out = format!("dfn-state 1\nstep {step}\nt {t:e}\n");
    let mut field = |name: &str, v: &[f64]| {
        let _ = writeln!(out, "{name} {}", v.len());
        for x in v {
            let _ = writeln!(out, "{x:e}");
        }
    };
    field("c1", &state.c1);
    field("phi1", &state.phi1);
    field("phi2", &state.phi2);
    let _ = writeln!(out, "c2 {}", state.c2.len());
    for c in &state.c2 {
        let _ = writeln!(
            out,
            "{} {}",
            c.len(),
            c.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
        );
    }
    out
}

/// Inverse of [`write_snapshot`]; returns `(step, t, state)`.
pub fn read_snapshot(text: &str) -> Result<(usize, f64, DiscreteState)> {
    let bad = |what: &str| Error::Parse {
        path: "<snapshot>".into(),
        message: format!("malformed snapshot: {what}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some("dfn-state 1") {
        return Err(bad("header"));
    }
    fn keyed<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Option<String> {
        lines.next()?.strip_prefix(key)?.strip_prefix(' ').map(str::to_string)
    }
    let step: usize = keyed(&mut lines, "step")
        .ok_or_else(|| bad("step"))?
        .parse()
        .map_err(|_| bad("step"))?;
    let t: f64 = keyed(&mut lines, "t")
        .ok_or_else(|| bad("t"))?
        .parse()
        .map_err(|_| bad("t"))?;
    let mut fields = Vec::new();
    for name in ["c1", "phi1", "phi2"] {
        let n: usize = keyed(&mut lines, name)
            .ok_or_else(|| bad(name))?
            .parse()
            .map_err(|_| bad(name))?;
        let v = (0..n)
            .map(|_| {
                lines
                    .next()
                    .and_then(|l| l.parse::<f64>().ok())
                    .ok_or_else(|| bad(name))
            })
            .collect::<Result<Vec<_>>>()?;
        fields.push(v);
    }
    let slots: usize = keyed(&mut lines, "c2")
        .ok_or_else(|| bad("c2"))?
        .parse()
        .map_err(|_| bad("c2"))?;
    let mut c2 = Vec::with_capacity(slots);
    for _ in 0..slots {
        let line = lines.next().ok_or_else(|| bad("c2 row"))?;
        let mut it = line.split_whitespace();
        let n: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("c2 row"))?;
        let row = it
            .map(|s| s.parse::<f64>().map_err(|_| bad("c2 value")))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != n {
            return Err(bad("c2 row length"));
        }
        c2.push(row);
    }
    let phi2 = fields.pop().unwrap();
    let phi1 = fields.pop().unwrap();
    let c1 = fields.pop().unwrap();
    Ok((step, t, DiscreteState { c1, phi1, phi2, c2 }))
}
