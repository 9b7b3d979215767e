//! Newton's method with backtracking, one-point pinning of the potential null
//! space, element-wise Jacobian elimination, and the decomposition solvers.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble_full, assemble_reduced, split_macro, DiscreteState, Discretization, Fields, KernelOptions, StepData,
};
use crate::error::{DomainError, Error, Result};
use crate::linalg::{norm2, TripletMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "2DS-FC")]
    TwoDsFc,
    #[serde(rename = "2DS-Eta")]
    TwoDsEta,
    #[serde(rename = "1DS-Eta")]
    OneDsEta,
    #[serde(rename = "GSN-FC")]
    GsnFc,
    #[serde(rename = "GSN-Macro")]
    GsnMacro,
    #[serde(rename = "GSN-Phi")]
    GsnPhi,
    #[serde(rename = "GSN-FD")]
    GsnFd,
}

impl SolverKind {
    pub const ALL: [SolverKind; 7] = [
        SolverKind::TwoDsFc,
        SolverKind::TwoDsEta,
        SolverKind::OneDsEta,
        SolverKind::GsnFc,
        SolverKind::GsnMacro,
        SolverKind::GsnPhi,
        SolverKind::GsnFd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::TwoDsFc => "2DS-FC",
            SolverKind::TwoDsEta => "2DS-Eta",
            SolverKind::OneDsEta => "1DS-Eta",
            SolverKind::GsnFc => "GSN-FC",
            SolverKind::GsnMacro => "GSN-Macro",
            SolverKind::GsnPhi => "GSN-Phi",
            SolverKind::GsnFd => "GSN-FD",
        }
    }

    fn recipe(self) -> (Layout, Vec<Stage>) {
        use Group::*;
        let stage = |groups: &[Group]| Stage {
            groups: groups.to_vec(),
            eliminate: false,
            lagged_prefactor: false,
        };
        match self {
            SolverKind::TwoDsFc => (
                Layout::Reduced,
                vec![Stage {
                    eliminate: true,
                    ..stage(&[C1, Phi1, Phi2, Micro])
                }],
            ),
            SolverKind::TwoDsEta => (
                Layout::Reduced,
                vec![
                    stage(&[C1]),
                    Stage {
                        eliminate: true,
                        ..stage(&[Phi1, Phi2, Micro])
                    },
                ],
            ),
            SolverKind::OneDsEta => (Layout::Reduced, vec![stage(&[C1]), stage(&[Phi1, Phi2, Micro])]),
            SolverKind::GsnFc => (Layout::Full, vec![stage(&[C1, Phi1, Phi2, Micro])]),
            SolverKind::GsnMacro => (Layout::Full, vec![stage(&[C1, Phi1, Phi2]), stage(&[Micro])]),
            SolverKind::GsnPhi => (Layout::Full, vec![stage(&[C1]), stage(&[Phi1, Phi2]), stage(&[Micro])]),
            SolverKind::GsnFd => (
                Layout::Full,
                vec![
                    stage(&[Micro]),
                    Stage {
                        lagged_prefactor: true,
                        ..stage(&[Phi2])
                    },
                    stage(&[Phi1]),
                    stage(&[C1]),
                ],
            ),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == key)
            .ok_or_else(|| {
                let names: Vec<&str> = SolverKind::ALL.iter().map(|k| k.name()).collect();
                Error::Validation(format!("unknown solver '{s}', expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSearch {
    pub factor: f64,
    pub max_halvings: usize,
    pub armijo: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            factor: 0.5,
            max_halvings: 25,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_abs_tol: f64,
    pub newton_rel_tol: f64,
    pub outer_rtol: f64,
    pub max_newton: usize,
    pub max_outer: usize,
    pub line_search: LineSearch,
    /// Fraction of a variable group's largest magnitude below which entries
    /// stop counting as relative in the update test.
    pub update_norm_floor: f64,
    /// A line search that cannot reduce the residual ends Newton successfully
    /// when the full step's relative size is below this; the residual is then
    /// at its round-off floor.
    pub stall_rel_tol: f64,
    /// Pinned unknown; defaults to the first `phi2` entry.
    pub pin: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_abs_tol: 1e-13,
            newton_rel_tol: 1e-10,
            outer_rtol: 1e-10,
            max_newton: 50,
            max_outer: 200,
            line_search: LineSearch::default(),
            update_norm_floor: 1e-12,
            stall_rel_tol: 1e-8,
            pin: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("newton_abs_tol", self.newton_abs_tol),
            ("newton_rel_tol", self.newton_rel_tol),
            ("outer_rtol", self.outer_rtol),
            ("update_norm_floor", self.update_norm_floor),
            ("stall_rel_tol", self.stall_rel_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Validation(format!("solver.{name} must be positive, got {v}")));
            }
        }
        let ls = &self.line_search;
        for (name, v) in [("factor", ls.factor), ("armijo", ls.armijo)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Validation(format!(
                    "solver.line_search.{name} out of (0,1): {v}"
                )));
            }
        }
        if self.max_newton == 0 || self.max_outer == 0 {
            return Err(Error::Validation("solver iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolverReport {
    pub outer_iterations: usize,
    pub newton_iterations_total: usize,
    pub linear_solves: usize,
    /// Residual 2-norm at every Newton iterate, block solves concatenated.
    pub residual_history: Vec<f64>,
    pub wall_time: f64,
    pub peak_matrix_order: usize,
}

impl SolverReport {
    fn absorb(&mut self, other: &SolverReport) {
        self.newton_iterations_total += other.newton_iterations_total;
        self.linear_solves += other.linear_solves;
        self.residual_history.extend_from_slice(&other.residual_history);
        self.peak_matrix_order = self.peak_matrix_order.max(other.peak_matrix_order);
    }
}

/// A square nonlinear system for [`newton_solve`].
pub trait NonlinearSystem {
    fn residual(&mut self, x: &[f64]) -> std::result::Result<Vec<f64>, DomainError>;

    /// Solves `J(x) d = -f`; also returns the order of the matrix factorized.
    fn direction(&mut self, x: &[f64], f: &[f64]) -> Result<(Vec<f64>, usize)>;

    /// Index ranges sharing one magnitude scale in the relative-update test.
    fn groups(&self, n: usize) -> Vec<Range<usize>> {
        std::iter::once(0..n).collect()
    }
}

/// Denominators `max(|x_i|, floor * max_{group} |x|)` of the relative-update test.
pub fn update_scales(x: &[f64], groups: &[Range<usize>], floor: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for g in groups {
        let top = x[g.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in g.clone() {
            out[i] = x[i].abs().max(floor * top).max(f64::MIN_POSITIVE);
        }
    }
    out
}

/// `max_i |d_i| / scale_i`.
pub fn relative_update(d: &[f64], scales: &[f64]) -> f64 {
    d.iter().zip(scales).fold(0.0f64, |m, (a, s)| m.max(a.abs() / s))
}

/// Newton iteration with Armijo backtracking; trial states outside the
/// chemistry domain count as rejected steps.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(
    system: &mut S,
    x0: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolverReport)> {
    let mut report = SolverReport::default();
    let mut x = x0.to_vec();
    let groups = system.groups(x.len());
    let mut f = system.residual(&x)?;
    let ls = &cfg.line_search;
    for _ in 0..cfg.max_newton {
        let norm = norm2(&f);
        report.residual_history.push(norm);
        if norm <= cfg.newton_abs_tol {
            return Ok((x, report));
        }
        let (d, order) = system.direction(&x, &f)?;
        report.linear_solves += 1;
        report.newton_iterations_total += 1;
        report.peak_matrix_order = report.peak_matrix_order.max(order);
        let rel = relative_update(&d, &update_scales(&x, &groups, cfg.update_norm_floor));
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=ls.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            if let Ok(ft) = system.residual(&trial) {
                let nt = norm2(&ft);
                if nt.is_finite() && nt * nt <= (1.0 - 2.0 * ls.armijo * alpha) * norm * norm {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            alpha *= ls.factor;
        }
        match accepted {
            Some((xt, ft)) => {
                x = xt;
                f = ft;
                if alpha * rel < cfg.newton_rel_tol {
                    report.residual_history.push(norm2(&f));
                    return Ok((x, report));
                }
            }
            // the residual is at round-off level, so the Newton step is still the best correction
            None if rel < cfg.stall_rel_tol => {
                let full: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
                let x = if system.residual(&full).is_ok() { full } else { x };
                return Ok((x, report));
            }
            None => {
                return Err(Error::Convergence(format!(
                    "line search stalled after {} halvings at residual {norm:.3e}, relative update {rel:.3e}",
                    ls.max_halvings
                )))
            }
        }
    }
    Err(Error::Convergence(format!(
        "Newton did not converge in {} iterations, residual {:.3e}",
        cfg.max_newton,
        norm2(&f)
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `[c1 | phi1 | phi2 | c2 surface]`
    Reduced,
    /// `[c1 | phi1 | phi2 | every radial node]`
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    C1,
    Phi1,
    Phi2,
    /// Surface values in the reduced layout, all radial nodes in the full one.
    Micro,
}

#[derive(Debug, Clone)]
struct Stage {
    groups: Vec<Group>,
    eliminate: bool,
    lagged_prefactor: bool,
}

pub fn group_range(problem: &Discretization, layout: Layout, g: Group) -> Range<usize> {
    let d = &problem.dofs;
    let nv = d.n_vertices;
    match g {
        Group::C1 => 0..nv,
        Group::Phi1 => nv..2 * nv,
        Group::Phi2 => 2 * nv..d.n_macro(),
        Group::Micro => match layout {
            Layout::Reduced => d.n_macro()..d.n_reduced(),
            Layout::Full => d.n_macro()..d.n_full(),
        },
    }
}

fn all_ranges(problem: &Discretization, layout: Layout) -> Vec<Range<usize>> {
    [Group::C1, Group::Phi1, Group::Phi2, Group::Micro]
        .into_iter()
        .map(|g| group_range(problem, layout, g))
        .collect()
}

/// Newton subsystem over some variable groups, all other unknowns held at `base`.
pub struct BlockSystem<'a> {
    problem: &'a Discretization,
    step: &'a StepData,
    layout: Layout,
    base: Vec<f64>,
    indices: Vec<usize>,
    local_of: Vec<usize>,
    group_ranges: Vec<Range<usize>>,
    eliminate: bool,
    pin: Option<usize>,
    prefactor: Option<Vec<f64>>,
}

const ABSENT: usize = usize::MAX;

impl<'a> BlockSystem<'a> {
    pub fn new(
        problem: &'a Discretization,
        step: &'a StepData,
        layout: Layout,
        base: Vec<f64>,
        groups: &[Group],
        eliminate: bool,
        pin: Option<usize>,
    ) -> Result<Self> {
        let mut groups = groups.to_vec();
        groups.sort();
        groups.dedup();
        let mut indices = Vec::new();
        let mut group_ranges = Vec::new();
        for &g in &groups {
            let r = group_range(problem, layout, g);
            group_ranges.push(indices.len()..indices.len() + r.len());
            indices.extend(r);
        }
        let mut local_of = vec![ABSENT; base.len()];
        for (i, &g) in indices.iter().enumerate() {
            local_of[g] = i;
        }
        let both_potentials = groups.contains(&Group::Phi1) && groups.contains(&Group::Phi2);
        let pin = if both_potentials {
            let global = pin.unwrap_or(problem.dofs.default_pin());
            if global >= base.len() || local_of[global] == ABSENT {
                return Err(Error::Validation(format!(
                    "pin index {global} is not a potential unknown of the block"
                )));
            }
            Some(local_of[global])
        } else {
            None
        };
        Ok(Self {
            problem,
            step,
            layout,
            base,
            indices,
            local_of,
            group_ranges,
            eliminate: eliminate && layout == Layout::Reduced && groups.contains(&Group::Micro),
            pin,
            prefactor: None,
        })
    }

    /// Butler–Volmer prefactor evaluated at these surface values instead of the current ones.
    pub fn with_prefactor(mut self, c2s: Vec<f64>) -> Self {
        self.prefactor = Some(c2s);
        self
    }

    pub fn block_values(&self) -> Vec<f64> {
        self.indices.iter().map(|&i| self.base[i]).collect()
    }

    pub fn scatter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.base.clone();
        for (&g, &v) in self.indices.iter().zip(x) {
            y[g] = v;
        }
        y
    }

    fn options(&self) -> KernelOptions<'_> {
        KernelOptions {
            prefactor_c2s: self.prefactor.as_deref(),
            ..Default::default()
        }
    }

    fn restrict(&self, m: &TripletMatrix) -> TripletMatrix {
        let mut out = TripletMatrix::with_capacity(self.indices.len(), m.nnz());
        for k in 0..m.nnz() {
            let (r, c) = (self.local_of[m.rows[k]], self.local_of[m.cols[k]]);
            if r != ABSENT && c != ABSENT {
                out.push(r, c, m.vals[k]);
            }
        }
        out
    }
}

/// Pins `dof`: identity row, zero column, zero right-hand side.
pub fn fix_nullspace(matrix: &mut TripletMatrix, rhs: &mut [f64], pin: usize) -> Result<()> {
    if pin >= matrix.n || pin >= rhs.len() {
        return Err(Error::Validation(format!("pin index {pin} out of range {}", matrix.n)));
    }
    matrix.pin(pin);
    rhs[pin] = 0.0;
    Ok(())
}

impl NonlinearSystem for BlockSystem<'_> {
    fn residual(&mut self, x: &[f64]) -> std::result::Result<Vec<f64>, DomainError> {
        let y = self.scatter(x);
        let opts = self.options();
        let r = match self.layout {
            Layout::Reduced => assemble_reduced(self.problem, self.step, &y, &opts, false)?.0,
            Layout::Full => assemble_full(self.problem, self.step, &y, &opts, false)?.0,
        };
        Ok(self.indices.iter().map(|&i| r[i]).collect())
    }

    fn direction(&mut self, x: &[f64], f: &[f64]) -> Result<(Vec<f64>, usize)> {
        let y = self.scatter(x);
        let opts = self.options();
        let n = self.indices.len();
        let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        match self.layout {
            Layout::Full => {
                let jac = assemble_full(self.problem, self.step, &y, &opts, true)?.1.unwrap();
                let mut a = self.restrict(&jac);
                if let Some(p) = self.pin {
                    fix_nullspace(&mut a, &mut rhs, p)?;
                }
                Ok((a.solve(&rhs)?, n))
            }
            Layout::Reduced if !self.eliminate => {
                let jac = assemble_reduced(self.problem, self.step, &y, &opts, true)?.1.unwrap();
                let mut a = self.restrict(&jac.full_matrix(&self.problem.dofs));
                if let Some(p) = self.pin {
                    fix_nullspace(&mut a, &mut rhs, p)?;
                }
                Ok((a.solve(&rhs)?, n))
            }
            Layout::Reduced => {
                let jac = assemble_reduced(self.problem, self.step, &y, &opts, true)?.1.unwrap();
                let dofs = &self.problem.dofs;
                let n_macro = n - dofs.n_slots();
                let mut s = self.restrict(&jac.macro_part);
                s.n = n_macro;
                let mut rhs_m = rhs[..n_macro].to_vec();
                let surf_local = |slot: usize| self.local_of[dofs.surface(slot)];
                for slot in 0..dofs.n_slots() {
                    let w = jac.d_micro[slot];
                    if !(w.abs() > f64::EPSILON) {
                        return Err(Error::Linear(format!(
                            "singular surface block at element {}",
                            dofs.electrode_elements[slot]
                        )));
                    }
                    let fs = f[surf_local(slot)];
                    let (ur, uv) = &jac.u_src[slot];
                    let (vr, vv) = &jac.v_bdry[slot];
                    for (&r, &a) in ur.iter().zip(uv) {
                        let lr = self.local_of[r];
                        if lr == ABSENT {
                            continue;
                        }
                        rhs_m[lr] += a * fs / w;
                        for (&c, &b) in vr.iter().zip(vv) {
                            let lc = self.local_of[c];
                            if lc != ABSENT {
                                s.push(lr, lc, -a * b / w);
                            }
                        }
                    }
                }
                if let Some(p) = self.pin {
                    fix_nullspace(&mut s, &mut rhs_m, p)?;
                }
                let mut d = s.solve(&rhs_m)?;
                for slot in 0..dofs.n_slots() {
                    let (vr, vv) = &jac.v_bdry[slot];
                    let vd: f64 = vr
                        .iter()
                        .zip(vv)
                        .filter(|(c, _)| self.local_of[**c] != ABSENT)
                        .map(|(c, b)| b * d[self.local_of[*c]])
                        .sum();
                    d.push((-f[surf_local(slot)] - vd) / jac.d_micro[slot]);
                }
                Ok((d, n_macro))
            }
        }
    }

    fn groups(&self, _n: usize) -> Vec<Range<usize>> {
        self.group_ranges.clone()
    }
}

/// Reduced vector `[c1 | phi1 | phi2 | c2 surface]` of a state.
pub fn reduced_vector(state: &DiscreteState) -> Vec<f64> {
    let mut x = Vec::new();
    x.extend_from_slice(&state.c1);
    x.extend_from_slice(&state.phi1);
    x.extend_from_slice(&state.phi2);
    x.extend(state.surface());
    x
}

/// Splits a full-layout vector back into a state.
pub fn state_from_full(problem: &Discretization, x: &[f64]) -> DiscreteState {
    let d = &problem.dofs;
    let (c1, phi1, phi2) = split_macro(d, x);
    DiscreteState {
        c1: c1.to_vec(),
        phi1: phi1.to_vec(),
        phi2: phi2.to_vec(),
        c2: (0..d.n_slots())
            .map(|s| x[d.radial_offsets[s]..d.radial_offsets[s] + d.radial_nodes[s]].to_vec())
            .collect(),
    }
}

/// Completes a reduced-layout solution with the particle profiles implied by it.
pub fn recover_state(problem: &Discretization, step: &StepData, x: &[f64]) -> Result<DiscreteState> {
    let d = &problem.dofs;
    let (c1, phi1, phi2) = split_macro(d, x);
    let c2s = &x[d.n_macro()..];
    let jbar = problem.element_rates(&Fields { c1, phi1, phi2, c2s })?;
    let c2 = (0..d.n_slots())
        .map(|s| step.op(problem, s).backward_recover(&step.c2_prev[s], jbar[s]))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscreteState {
        c1: c1.to_vec(),
        phi1: phi1.to_vec(),
        phi2: phi2.to_vec(),
        c2,
    })
}

/// Adds `-mean(phi1)` to both potentials, leaving every overpotential unchanged.
pub fn shift_mean(problem: &Discretization, state: &mut DiscreteState) -> f64 {
    let shift = -problem.mean_phi1(&state.phi1);
    for v in state.phi1.iter_mut().chain(state.phi2.iter_mut()) {
        *v += shift;
    }
    shift
}

/// Solves one backward Euler step from `step.c1_prev` / `step.c2_prev`, starting at `guess`.
pub fn solve_step(
    kind: SolverKind,
    problem: &Discretization,
    step: &StepData,
    guess: &DiscreteState,
    cfg: &SolverConfig,
) -> Result<(DiscreteState, SolverReport)> {
    let started = Instant::now();
    let (layout, stages) = kind.recipe();
    let mut x = match layout {
        Layout::Reduced => reduced_vector(guess),
        Layout::Full => guess.flatten(),
    };
    let ranges = all_ranges(problem, layout);
    let mut report = SolverReport::default();
    let micro = group_range(problem, layout, Group::Micro);
    let surface_of = |x: &[f64]| -> Vec<f64> {
        match layout {
            Layout::Reduced => x[micro.clone()].to_vec(),
            Layout::Full => (0..problem.dofs.n_slots())
                .map(|s| x[problem.dofs.full_surface(s)])
                .collect(),
        }
    };
    let mut converged = false;
    for outer in 1..=cfg.max_outer {
        let before = x.clone();
        let lagged = surface_of(&x);
        for stage in &stages {
            let mut sys = BlockSystem::new(
                problem,
                step,
                layout,
                x.clone(),
                &stage.groups,
                stage.eliminate,
                cfg.pin,
            )?;
            if stage.lagged_prefactor {
                sys = sys.with_prefactor(lagged.clone());
            }
            let x0 = sys.block_values();
            let (xb, r) = newton_solve(&mut sys, &x0, cfg).map_err(|e| match e {
                Error::Convergence(m) => Error::Convergence(format!(
                    "{kind} stage {:?} at t = {}, outer iteration {outer}: {m}",
                    stage.groups, step.time
                )),
                other => other,
            })?;
            x = sys.scatter(&xb);
            report.absorb(&r);
        }
        report.outer_iterations = outer;
        if stages.len() == 1 {
            converged = true;
            break;
        }
        let d: Vec<f64> = x.iter().zip(&before).map(|(a, b)| a - b).collect();
        if relative_update(&d, &update_scales(&before, &ranges, cfg.update_norm_floor)) < cfg.outer_rtol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence(format!(
            "{kind} outer loop did not converge in {} iterations at t = {}",
            cfg.max_outer, step.time
        )));
    }
    let mut state = match layout {
        Layout::Reduced => recover_state(problem, step, &x)?,
        Layout::Full => state_from_full(problem, &x),
    };
    shift_mean(problem, &mut state);
    report.wall_time = started.elapsed().as_secs_f64();
    Ok((state, report))
}
