//! Error norms against nested reference solutions, convergence studies and solver benchmarks.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{DiscreteState, Discretization};
use crate::error::{Error, Result};
use crate::mesh::{CellMesh, RadialGrid, RadialSpec};
use crate::quadrature::{gauss_legendre, quadrature_rules, QuadratureRule};
use crate::solvers::{SolverConfig, SolverKind};
use crate::timeloop::{load_config, relative_state_distance, run, CaseConfig, SimulationPlan};

/// A norm paired with the variable it measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorNormKind {
    #[serde(rename = "c1_H1")]
    C1H1,
    #[serde(rename = "phi1_H1")]
    Phi1H1,
    /// Over the electrodes only.
    #[serde(rename = "phi2_H1")]
    Phi2H1,
    /// Particle-surface concentration, piecewise constant over the electrodes.
    #[serde(rename = "c2surf_L2")]
    SurfaceL2,
    /// `L2` in x of the `r^2`-weighted `L2` norm in r.
    #[serde(rename = "c2_L2L2r")]
    L2L2r,
    /// `L2` in x of the `r^2`-weighted `H1` norm in r.
    #[serde(rename = "c2_L2H1r")]
    L2H1r,
}

impl ErrorNormKind {
    pub const ALL: [ErrorNormKind; 6] = [
        ErrorNormKind::C1H1,
        ErrorNormKind::Phi1H1,
        ErrorNormKind::Phi2H1,
        ErrorNormKind::SurfaceL2,
        ErrorNormKind::L2L2r,
        ErrorNormKind::L2H1r,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorNormKind::C1H1 => "c1_H1",
            ErrorNormKind::Phi1H1 => "phi1_H1",
            ErrorNormKind::Phi2H1 => "phi2_H1",
            ErrorNormKind::SurfaceL2 => "c2surf_L2",
            ErrorNormKind::L2L2r => "c2_L2L2r",
            ErrorNormKind::L2H1r => "c2_L2H1r",
        }
    }
}

impl std::fmt::Display for ErrorNormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// P1 basis gradients with the orientation of the stored vertex order.
fn p1_gradients(mesh: &CellMesh, e: usize) -> Vec<[f64; 2]> {
    let cell = mesh.element(e);
    if mesh.dim() == 1 {
        let h = mesh.vertex(cell[1])[0] - mesh.vertex(cell[0])[0];
        return vec![[-1.0 / h, 0.0], [1.0 / h, 0.0]];
    }
    let (p0, p1, p2) = (mesh.vertex(cell[0]), mesh.vertex(cell[1]), mesh.vertex(cell[2]));
    let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    vec![
        [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
        [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
        [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
    ]
}

fn barycentric(mesh: &CellMesh, e: usize, p: &[f64]) -> [f64; 3] {
    let cell = mesh.element(e);
    let p0 = mesh.vertex(cell[0]);
    let g = p1_gradients(mesh, e);
    let dx = [p[0] - p0[0], if mesh.dim() == 2 { p[1] - p0[1] } else { 0.0 }];
    let l1 = g[1][0] * dx[0] + g[1][1] * dx[1];
    if mesh.dim() == 1 {
        return [1.0 - l1, l1, 0.0];
    }
    let l2 = g[2][0] * dx[0] + g[2][1] * dx[1];
    [1.0 - l1 - l2, l1, l2]
}

fn physical_point(mesh: &CellMesh, e: usize, lambda: &[f64; 3]) -> [f64; 2] {
    let mut x = [0.0; 2];
    for (a, &v) in mesh.element(e).iter().enumerate() {
        for (k, xk) in mesh.vertex(v).iter().enumerate() {
            x[k] += lambda[a] * xk;
        }
    }
    x
}

/// Finds the coarse element containing a point: sorted intervals in 1D, a bucket grid in 2D.
struct Locator<'a> {
    mesh: &'a CellMesh,
    sorted: Vec<(f64, usize)>,
    origin: [f64; 2],
    cell_size: [f64; 2],
    buckets: usize,
    grid: Vec<Vec<usize>>,
}

impl<'a> Locator<'a> {
    fn new(mesh: &'a CellMesh) -> Self {
        let mut loc = Locator {
            mesh,
            sorted: Vec::new(),
            origin: [0.0; 2],
            cell_size: [1.0; 2],
            buckets: 0,
            grid: Vec::new(),
        };
        if mesh.dim() == 1 {
            loc.sorted = (0..mesh.n_elements())
                .map(|e| {
                    let c = mesh.element(e);
                    (mesh.vertex(c[0])[0].min(mesh.vertex(c[1])[0]), e)
                })
                .collect();
            loc.sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            return loc;
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for v in 0..mesh.n_vertices() {
            for k in 0..2 {
                lo[k] = lo[k].min(mesh.vertex(v)[k]);
                hi[k] = hi[k].max(mesh.vertex(v)[k]);
            }
        }
        let n = ((mesh.n_elements() as f64).sqrt().ceil() as usize).max(1);
        loc.origin = lo;
        loc.cell_size = [
            ((hi[0] - lo[0]) / n as f64).max(f64::MIN_POSITIVE),
            ((hi[1] - lo[1]) / n as f64).max(f64::MIN_POSITIVE),
        ];
        loc.buckets = n;
        loc.grid = vec![Vec::new(); n * n];
        for e in 0..mesh.n_elements() {
            let (mut a, mut b) = ([usize::MAX; 2], [0usize; 2]);
            for &v in mesh.element(e) {
                let idx = loc.bucket(mesh.vertex(v));
                for k in 0..2 {
                    a[k] = a[k].min(idx[k]);
                    b[k] = b[k].max(idx[k]);
                }
            }
            for i in a[0]..=b[0] {
                for j in a[1]..=b[1] {
                    loc.grid[i * n + j].push(e);
                }
            }
        }
        loc
    }

    fn bucket(&self, p: &[f64]) -> [usize; 2] {
        let f =
            |k: usize| (((p[k] - self.origin[k]) / self.cell_size[k]).floor().max(0.0) as usize).min(self.buckets - 1);
        [f(0), f(1)]
    }

    /// Element whose smallest barycentric coordinate at `p` is largest.
    fn find(&self, p: &[f64]) -> (usize, f64) {
        let candidates: Vec<usize> = if self.mesh.dim() == 1 {
            let i = self.sorted.partition_point(|&(x, _)| x <= p[0]).max(1) - 1;
            [i.saturating_sub(1), i, (i + 1).min(self.sorted.len() - 1)]
                .iter()
                .map(|&k| self.sorted[k].1)
                .collect()
        } else {
            let [i, j] = self.bucket(p);
            self.grid[i * self.buckets + j].clone()
        };
        candidates
            .into_iter()
            .map(|e| {
                let l = barycentric(self.mesh, e, p);
                let m = l[..self.mesh.dim() + 1].iter().copied().fold(f64::INFINITY, f64::min);
                (e, m)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((usize::MAX, f64::NEG_INFINITY))
    }
}

/// Coarse element containing each fine element, checking that every fine vertex lies inside it.
fn nest(coarse: &CellMesh, fine: &CellMesh) -> Result<Vec<usize>> {
    if coarse.dim() != fine.dim() {
        return Err(Error::Mesh("meshes of different dimension are not nested".into()));
    }
    let loc = Locator::new(coarse);
    let tol = 1e-9;
    (0..fine.n_elements())
        .map(|e| {
            let (parent, m) = loc.find(&fine.centroid(e));
            if m < -tol || coarse.tag(parent) != fine.tag(e) {
                return Err(Error::Mesh(format!("fine element {e} lies in no coarse element")));
            }
            for &v in fine.element(e) {
                let l = barycentric(coarse, parent, fine.vertex(v));
                if l[..coarse.dim() + 1].iter().any(|&x| x < -tol) {
                    return Err(Error::Mesh(format!("fine element {e} straddles coarse elements")));
                }
            }
            Ok(parent)
        })
        .collect()
}

fn check_radial_nesting(coarse: &RadialGrid, fine: &RadialGrid) -> Result<()> {
    let tol = 1e-9 * fine.radius();
    if (coarse.radius() - fine.radius()).abs() > tol
        || coarse.nodes.iter().any(|&r| {
            let i = fine.nodes.partition_point(|&x| x < r - tol);
            i >= fine.nodes.len() || (fine.nodes[i] - r).abs() > tol
        })
    {
        return Err(Error::Mesh("radial grids are not nested".into()));
    }
    Ok(())
}

fn interpolate(nodes: &[f64], values: &[f64], i: usize, r: f64) -> (f64, f64) {
    let slope = (values[i + 1] - values[i]) / (nodes[i + 1] - nodes[i]);
    (values[i] + slope * (r - nodes[i]), slope)
}

/// Squared `r^2`-weighted `L2` and `H1` seminorm contributions of `fine - coarse` profiles.
fn radial_error_sq(
    fine: &RadialGrid,
    cf: &[f64],
    coarse: &RadialGrid,
    cc: &[f64],
    gauss: &(Vec<f64>, Vec<f64>),
) -> (f64, f64) {
    let (mut l2, mut semi) = (0.0, 0.0);
    for i in 0..fine.n_intervals() {
        let (a, b) = (fine.nodes[i], fine.nodes[i + 1]);
        let j = coarse.locate(0.5 * (a + b));
        let mut slope_diff = 0.0;
        let mut r2 = 0.0;
        for (x, w) in gauss.0.iter().zip(&gauss.1) {
            let r = a + (b - a) * x;
            let (vf, sf) = interpolate(&fine.nodes, cf, i, r);
            let (vc, sc) = interpolate(&coarse.nodes, cc, j, r);
            let wr = w * (b - a) * r * r;
            l2 += wr * (vf - vc).powi(2);
            r2 += wr;
            slope_diff = sf - sc;
        }
        semi += r2 * slope_diff * slope_diff;
    }
    (l2, semi)
}

/// Errors of `coarse` against `fine`, integrated on the fine mesh with the coarse
/// solution evaluated exactly through its own interpolant.
///
/// The fine mesh must be a uniform refinement of the coarse one and each fine radial
/// grid must contain the nodes of the coarse grid.
pub fn error_norms(
    coarse: (&Discretization, &DiscreteState),
    fine: (&Discretization, &DiscreteState),
    kinds: &[ErrorNormKind],
) -> Result<Vec<f64>> {
    let (pc, sc) = coarse;
    let (pf, sf) = fine;
    let parents = nest(&pc.mesh, &pf.mesh)?;
    for k in 0..2 {
        check_radial_nesting(&pc.radial[k], &pf.radial[k])?;
    }
    let dim = pf.mesh.dim();
    let rule: QuadratureRule = quadrature_rules(dim, 2)?;
    let weights = rule.normalized_weights();
    let gauss = gauss_legendre(3);

    // squared contributions: c1, phi1, phi2 (value + gradient), surface, radial L2, radial H1 seminorm
    let mut acc = [0.0f64; 6];
    for e in 0..pf.mesh.n_elements() {
        let parent = parents[e];
        let measure = pf.mesh.element_measure(e);
        let (cell_f, cell_c) = (pf.mesh.element(e), pc.mesh.element(parent));
        let (gf, gc) = (p1_gradients(&pf.mesh, e), p1_gradients(&pc.mesh, parent));
        let coincident = cell_f
            .iter()
            .zip(cell_c)
            .all(|(&a, &b)| pf.mesh.vertex(a) == pc.mesh.vertex(b));
        let coarse_lambda: Vec<[f64; 3]> = (0..rule.len())
            .map(|q| {
                if coincident {
                    rule.barycentric(q)
                } else {
                    barycentric(&pc.mesh, parent, &physical_point(&pf.mesh, e, &rule.barycentric(q)))
                }
            })
            .collect();
        let electrode = pf.mesh.tag(e).is_electrode();
        let mut field = |slot: usize, vf: &dyn Fn(usize) -> f64, vc: &dyn Fn(usize) -> f64| {
            let mut grad = [0.0; 2];
            for (a, &v) in cell_f.iter().enumerate() {
                grad[0] += vf(v) * gf[a][0];
                grad[1] += vf(v) * gf[a][1];
            }
            for (a, &v) in cell_c.iter().enumerate() {
                grad[0] -= vc(v) * gc[a][0];
                grad[1] -= vc(v) * gc[a][1];
            }
            let mut l2 = 0.0;
            for q in 0..rule.len() {
                let lf = rule.barycentric(q);
                let d: f64 = cell_f.iter().enumerate().map(|(a, &v)| lf[a] * vf(v)).sum::<f64>()
                    - cell_c
                        .iter()
                        .enumerate()
                        .map(|(a, &v)| coarse_lambda[q][a] * vc(v))
                        .sum::<f64>();
                l2 += weights[q] * d * d;
            }
            acc[slot] += measure * (l2 + grad[0] * grad[0] + grad[1] * grad[1]);
        };
        field(0, &|v| sf.c1[v], &|v| sc.c1[v]);
        field(1, &|v| sf.phi1[v], &|v| sc.phi1[v]);
        if electrode {
            let phi2f = |v: usize| sf.phi2[pf.dofs.phi2_of_vertex[v].expect("electrode vertex")];
            let phi2c = |v: usize| sc.phi2[pc.dofs.phi2_of_vertex[v].expect("electrode vertex")];
            field(2, &phi2f, &phi2c);
            let slot_f = pf.dofs.slot_of_element[e].expect("electrode slot");
            let slot_c = pc.dofs.slot_of_element[parent].expect("electrode slot");
            let (cf, cc) = (&sf.c2[slot_f], &sc.c2[slot_c]);
            acc[3] += measure * (cf.last().unwrap() - cc.last().unwrap()).powi(2);
            let k = crate::assembly::electrode_index(pf.mesh.tag(e));
            let (l2, semi) = radial_error_sq(&pf.radial[k], cf, &pc.radial[k], cc, &gauss);
            acc[4] += measure * l2;
            acc[5] += measure * semi;
        }
    }
    Ok(kinds
        .iter()
        .map(|k| match k {
            ErrorNormKind::C1H1 => acc[0].sqrt(),
            ErrorNormKind::Phi1H1 => acc[1].sqrt(),
            ErrorNormKind::Phi2H1 => acc[2].sqrt(),
            ErrorNormKind::SurfaceL2 => acc[3].sqrt(),
            ErrorNormKind::L2L2r => acc[4].sqrt(),
            ErrorNormKind::L2H1r => (acc[4] + acc[5]).sqrt(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyAxis {
    H,
    Dr,
    Tau,
}

impl StudyAxis {
    pub fn name(self) -> &'static str {
        match self {
            StudyAxis::H => "h",
            StudyAxis::Dr => "dr",
            StudyAxis::Tau => "tau",
        }
    }

    fn default_norms(self) -> Vec<ErrorNormKind> {
        use ErrorNormKind::*;
        match self {
            StudyAxis::H | StudyAxis::Tau => vec![Phi1H1, Phi2H1, C1H1, SurfaceL2],
            StudyAxis::Dr => vec![L2L2r, SurfaceL2, L2H1r],
        }
    }
}

/// Refinement applied to the axes a study holds fixed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedLevels {
    #[serde(default)]
    pub h: usize,
    #[serde(default)]
    pub dr: usize,
    #[serde(default)]
    pub tau: usize,
}

/// A convergence study around a base case.
///
/// Level `k` refines the base mesh `k` times (axis `h`), bisects the base radial grid
/// `k` times (axis `dr`) or divides the base time step by `2^k` (axis `tau`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub case: CaseConfig,
    pub axis: StudyAxis,
    pub levels: Vec<usize>,
    #[serde(default = "default_reference_offset")]
    pub reference_offset: usize,
    #[serde(default)]
    pub fixed: FixedLevels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norms: Option<Vec<ErrorNormKind>>,
    /// Evaluation times; defaults to the final time.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<f64>,
    /// Number of finest levels entering the order fit.
    #[serde(default = "default_fit_levels")]
    pub fit_levels: usize,
}

fn default_reference_offset() -> usize {
    2
}

fn default_fit_levels() -> usize {
    3
}

impl StudyConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut study: StudyConfig = load_config(path)?;
        study.case.resolve_paths(path);
        study.validate()?;
        Ok(study)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(
                "study levels must be non-empty and strictly ascending".into(),
            ));
        }
        if self.reference_offset == 0 {
            return Err(Error::Validation(
                "reference must be finer than every tested level".into(),
            ));
        }
        if self.fit_levels < 2 {
            return Err(Error::Validation("an order fit needs at least two levels".into()));
        }
        self.case.plan.validate()?;
        self.case.solver.validate()?;
        for &t in &self.evaluation_times() {
            if !(t > 0.0 && t <= self.case.plan.t_end * (1.0 + 1e-12)) {
                return Err(Error::Validation(format!("evaluation time {t} outside (0, t_end]")));
            }
        }
        let finest = self.reference_level();
        let tau_levels = match self.axis {
            StudyAxis::Tau => self.levels.iter().copied().chain([finest]).collect(),
            _ => vec![self.fixed.tau],
        };
        for lvl in tau_levels {
            let tau = self.case.plan.tau / 2f64.powi(lvl as i32);
            for &t in &self.evaluation_times() {
                step_index(t, tau)?;
            }
        }
        Ok(())
    }

    pub fn norms(&self) -> Vec<ErrorNormKind> {
        self.norms.clone().unwrap_or_else(|| self.axis.default_norms())
    }

    pub fn evaluation_times(&self) -> Vec<f64> {
        if self.times.is_empty() {
            vec![self.case.plan.t_end]
        } else {
            self.times.clone()
        }
    }

    pub fn reference_level(&self) -> usize {
        self.levels.last().unwrap() + self.reference_offset
    }

    /// The case run at `level` along the study axis.
    pub fn level_case(&self, level: usize) -> CaseConfig {
        let (h, dr, tau) = match self.axis {
            StudyAxis::H => (level, self.fixed.dr, self.fixed.tau),
            StudyAxis::Dr => (self.fixed.h, level, self.fixed.tau),
            StudyAxis::Tau => (self.fixed.h, self.fixed.dr, level),
        };
        let mut case = self.case.clone();
        case.mesh.refine += h;
        if dr > 0 {
            let grid = RadialGrid {
                nodes: case.radial.unit_nodes(),
                tag: crate::params::SubdomainTag::Negative,
            };
            case.radial = RadialSpec::Nodes {
                nodes: grid.refine(dr).nodes,
            };
        }
        case.plan.tau /= 2f64.powi(tau as i32);
        case.plan.snapshot_every = 0;
        case
    }
}

fn step_index(t: f64, tau: f64) -> Result<usize> {
    let k = (t / tau).round();
    if (k * tau - t).abs() > 1e-9 * t.max(tau) {
        return Err(Error::Validation(format!(
            "evaluation time {t} is not a multiple of tau = {tau}"
        )));
    }
    Ok(k as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub level: usize,
    /// Mesh diameter, largest radial spacing or time step, depending on the axis.
    pub size: f64,
    /// One entry per norm, maximal over the evaluation times.
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub axis: StudyAxis,
    pub norms: Vec<ErrorNormKind>,
    pub rows: Vec<ConvergenceRow>,
    pub reference_level: usize,
    pub fit_levels: usize,
    pub wall_time: f64,
}

/// Least-squares slope of `-log2(error)` against level.
pub fn fitted_order(levels: &[usize], errors: &[f64]) -> f64 {
    let n = levels.len() as f64;
    let xs: Vec<f64> = levels.iter().map(|&l| l as f64).collect();
    let ys: Vec<f64> = errors.iter().map(|e| -e.log2()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

impl ConvergenceTable {
    /// Fitted order per norm over the last `fit_levels` rows.
    pub fn orders(&self) -> Vec<f64> {
        self.orders_over(self.fit_levels.min(self.rows.len()))
    }

    pub fn orders_over(&self, last: usize) -> Vec<f64> {
        let rows = &self.rows[self.rows.len() - last..];
        let levels: Vec<usize> = rows.iter().map(|r| r.level).collect();
        (0..self.norms.len())
            .map(|i| fitted_order(&levels, &rows.iter().map(|r| r.errors[i]).collect::<Vec<_>>()))
            .collect()
    }

    /// Order between each row and the one before it; `None` on the first row.
    pub fn pairwise_orders(&self) -> Vec<Vec<Option<f64>>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (0..self.norms.len())
                    .map(|n| {
                        (i > 0).then(|| {
                            let p = &self.rows[i - 1];
                            fitted_order(&[p.level, r.level], &[p.errors[n], r.errors[n]])
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = "axis,level,size".to_string();
        for n in &self.norms {
            let _ = write!(out, ",{n},{n}_order");
        }
        out.push('\n');
        let pairwise = self.pairwise_orders();
        for (row, orders) in self.rows.iter().zip(&pairwise) {
            let _ = write!(out, "{},{},{:e}", self.axis.name(), row.level, row.size);
            for (e, o) in row.errors.iter().zip(orders) {
                let _ = write!(out, ",{e:e},{}", o.map(|o| format!("{o:.4}")).unwrap_or_default());
            }
            out.push('\n');
        }
        let _ = write!(out, "{},fit,", self.axis.name());
        for o in self.orders() {
            let _ = write!(out, ",,{o:.4}");
        }
        out.push('\n');
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "Error and convergence order for {} (reference level {})\n",
            self.axis.name(),
            self.reference_level
        );
        let _ = write!(out, "{:>6} {:>11}", "level", "size");
        for n in &self.norms {
            let _ = write!(out, " {:>11} {:>6}", n.name(), "order");
        }
        out.push('\n');
        for (row, orders) in self.rows.iter().zip(self.pairwise_orders()) {
            let _ = write!(out, "{:>6} {:>11.3e}", row.level, row.size);
            for (e, o) in row.errors.iter().zip(orders) {
                let o = o.map(|o| format!("{o:.2}")).unwrap_or_else(|| "-".into());
                let _ = write!(out, " {e:>11.3e} {o:>6}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:>6} {:>11}", "fit", "");
        for o in self.orders() {
            let _ = write!(out, " {:>11} {o:>6.2}", "");
        }
        out.push('\n');
        out
    }
}

struct LevelRun {
    problem: Discretization,
    states: Vec<DiscreteState>,
    size: f64,
}

fn run_level(study: &StudyConfig, level: usize) -> Result<LevelRun> {
    let case = study.level_case(level);
    let problem = case.discretization()?;
    let wanted: Vec<usize> = study
        .evaluation_times()
        .iter()
        .map(|&t| step_index(t, case.plan.tau))
        .collect::<Result<_>>()?;
    let mut plan = case.plan.clone();
    plan.t_end = plan.tau * *wanted.iter().max().unwrap() as f64;
    let mut states = vec![None; wanted.len()];
    let out = run(&problem, &plan, &case.solver, |k, s| {
        for (i, &w) in wanted.iter().enumerate() {
            if w == k {
                states[i] = Some(s.clone());
            }
        }
    })?;
    if let Some(f) = out.failure {
        return Err(Error::Convergence(format!(
            "{} level {level}: step {} failed: {}",
            study.axis.name(),
            f.step,
            f.error
        )));
    }
    let size = match study.axis {
        StudyAxis::H => problem.mesh.max_diameter(),
        StudyAxis::Dr => problem.radial.iter().map(|g| g.max_spacing()).fold(0.0, f64::max),
        StudyAxis::Tau => case.plan.tau,
    };
    let states = states
        .into_iter()
        .map(|s| s.expect("every evaluation step is visited"))
        .collect();
    Ok(LevelRun { problem, states, size })
}

/// Runs every level and the reference (in parallel) and tabulates errors against the reference.
pub fn convergence_study(study: &StudyConfig) -> Result<ConvergenceTable> {
    study.validate()?;
    let started = Instant::now();
    let reference_level = study.reference_level();
    let all: Vec<usize> = study.levels.iter().copied().chain([reference_level]).collect();
    let mut runs: Vec<LevelRun> = all.par_iter().map(|&l| run_level(study, l)).collect::<Result<_>>()?;
    let reference = runs.pop().unwrap();
    let norms = study.norms();
    let rows = study
        .levels
        .iter()
        .zip(&runs)
        .map(|(&level, r)| {
            let mut errors = vec![0.0f64; norms.len()];
            for (coarse, fine) in r.states.iter().zip(&reference.states) {
                let e = error_norms((&r.problem, coarse), (&reference.problem, fine), &norms)?;
                for (acc, v) in errors.iter_mut().zip(e) {
                    *acc = acc.max(v);
                }
            }
            Ok(ConvergenceRow {
                level,
                size: r.size,
                errors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceTable {
        axis: study.axis,
        norms,
        rows,
        reference_level,
        fit_levels: study.fit_levels,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// A benchmark: one case run with every listed solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub case: CaseConfig,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<SolverKind>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
}

fn default_kinds() -> Vec<SolverKind> {
    SolverKind::ALL.to_vec()
}

fn default_repetitions() -> usize {
    1
}

impl BenchConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bench: BenchConfig = load_config(path)?;
        bench.case.resolve_paths(path);
        bench.case.validate()?;
        if bench.kinds.is_empty() {
            return Err(Error::Validation("bench needs at least one solver kind".into()));
        }
        Ok(bench)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: SolverKind,
    /// Failure message when the run did not finish.
    pub dnf: Option<String>,
    /// Fastest repetition.
    pub wall_time: f64,
    pub newton_total: usize,
    pub avg_outer: f64,
    pub peak_matrix_order: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Largest pairwise relative state distance among finished kinds.
    pub agreement: f64,
    pub agreement_tol: f64,
}

impl BenchReport {
    pub fn row(&self, kind: SolverKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("solver,status,wall_s,newton_total,avg_outer,peak_matrix_order,steps\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:e},{},{:.4},{},{}",
                r.kind,
                if r.dnf.is_some() { "DNF" } else { "ok" },
                r.wall_time,
                r.newton_total,
                r.avg_outer,
                r.peak_matrix_order,
                r.steps
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>10} {:>8} {:>9} {:>8}\n",
            "solver", "wall (s)", "newton", "avg outer", "order"
        );
        for r in &self.rows {
            match &r.dnf {
                Some(msg) => {
                    let _ = writeln!(out, "{:<10} {:>10} ({msg})", r.kind.name(), "DNF");
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<10} {:>10.4} {:>8} {:>9.2} {:>8}",
                        r.kind.name(),
                        r.wall_time,
                        r.newton_total,
                        r.avg_outer,
                        r.peak_matrix_order
                    );
                }
            }
        }
        let _ = writeln!(
            out,
            "max pairwise relative distance {:.3e} (tolerance {:.1e})",
            self.agreement, self.agreement_tol
        );
        out
    }
}

/// Runs `plan` once per kind and repetition, sequentially so timings do not compete.
///
/// Fails when finished kinds disagree by more than ten times the outer tolerance.
pub fn benchmark_solvers(
    problem: &Discretization,
    plan: &SimulationPlan,
    cfg: &SolverConfig,
    kinds: &[SolverKind],
    repetitions: usize,
) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut finals: Vec<(SolverKind, DiscreteState)> = Vec::new();
    for &kind in kinds {
        let plan = SimulationPlan {
            solver: kind,
            ..plan.clone()
        };
        let mut best = f64::INFINITY;
        let mut row = None;
        for _ in 0..repetitions.max(1) {
            let started = Instant::now();
            let out = run(problem, &plan, cfg, |_, _| {})?;
            let wall = started.elapsed().as_secs_f64();
            if let Some(f) = &out.failure {
                log::warn!("{kind} did not finish: step {} failed: {}", f.step, f.error);
                row = Some(BenchRow {
                    kind,
                    dnf: Some(format!("step {}: {}", f.step, f.error)),
                    wall_time: f64::NAN,
                    newton_total: 0,
                    avg_outer: f64::NAN,
                    peak_matrix_order: 0,
                    steps: out.reports.len(),
                });
                break;
            }
            if wall < best {
                best = wall;
                let steps = out.reports.len();
                row = Some(BenchRow {
                    kind,
                    dnf: None,
                    wall_time: wall,
                    newton_total: out.reports.iter().map(|r| r.newton_iterations_total).sum(),
                    avg_outer: out.reports.iter().map(|r| r.outer_iterations as f64).sum::<f64>() / steps.max(1) as f64,
                    peak_matrix_order: out.reports.iter().map(|r| r.peak_matrix_order).max().unwrap_or(0),
                    steps,
                });
                if finals.last().map(|f| f.0) != Some(kind) {
                    finals.push((kind, out.state));
                }
            }
        }
        rows.push(row.expect("at least one repetition"));
    }
    let mut agreement = 0.0f64;
    for (i, a) in finals.iter().enumerate() {
        for b in &finals[i + 1..] {
            agreement = agreement.max(relative_state_distance(&a.1, &b.1));
        }
    }
    let agreement_tol = 10.0 * cfg.outer_rtol.max(cfg.newton_rel_tol);
    if agreement > agreement_tol {
        return Err(Error::Convergence(format!(
            "solvers reached different states: relative distance {agreement:.3e} exceeds {agreement_tol:.1e}"
        )));
    }
    Ok(BenchReport {
        rows,
        agreement,
        agreement_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_laminate, build_radial, Geometry, Resolution};
    use crate::params::{ParameterSet, SubdomainTag};

    fn problem(dim: usize, refine: usize, radial: RadialSpec) -> Discretization {
        let ps = ParameterSet::preset("marquis2019").unwrap();
        let g = Geometry {
            negative: 100e-6,
            separator: 25e-6,
            positive: 100e-6,
            height: (dim == 2).then_some(50e-6),
        };
        let r = Resolution {
            negative: 2,
            separator: 1,
            positive: 2,
            vertical: 2,
        };
        let mesh = build_laminate(&g, &r).unwrap().refine_uniform(refine);
        let grids = [
            build_radial(&ps, SubdomainTag::Negative, &radial).unwrap(),
            build_radial(&ps, SubdomainTag::Positive, &radial).unwrap(),
        ];
        Discretization::new(ps, mesh, grids).unwrap()
    }

    /// Every field set to an affine function of position (and of r for particles).
    fn affine_state(p: &Discretization, shift: f64) -> DiscreteState {
        let mut s = p.initial_concentrations();
        let f = |x: &[f64]| 1.0 + 2e3 * x[0] + x.get(1).map_or(0.0, |y| 5e3 * y) + shift;
        for v in 0..p.mesh.n_vertices() {
            s.c1[v] = 1000.0 * f(p.mesh.vertex(v));
            s.phi1[v] = -0.1 * f(p.mesh.vertex(v));
        }
        for (i, &v) in p.dofs.phi2_vertices.iter().enumerate() {
            s.phi2[i] = 3.0 * f(p.mesh.vertex(v));
        }
        for (slot, &e) in p.dofs.electrode_elements.iter().enumerate() {
            let grid = &p.radial[crate::assembly::electrode_index(p.mesh.tag(e))];
            let x = f(&p.mesh.centroid(e));
            s.c2[slot] = grid.nodes.iter().map(|r| 1e4 * x + 3e8 * r).collect();
        }
        s
    }

    #[test]
    fn identical_states_have_zero_error() {
        for dim in [1, 2] {
            let p = problem(dim, 1, RadialSpec::Uniform { intervals: 4 });
            let s = affine_state(&p, 0.0);
            let e = error_norms((&p, &s), (&p, &s), &ErrorNormKind::ALL).unwrap();
            assert!(e.iter().all(|&v| v == 0.0), "{e:?}");
        }
    }

    #[test]
    fn affine_fields_transfer_exactly_to_refined_meshes() {
        for dim in [1, 2] {
            let pc = problem(dim, 0, RadialSpec::Graded { levels: 3 });
            let grid = RadialGrid {
                nodes: RadialSpec::Graded { levels: 3 }.unit_nodes(),
                tag: SubdomainTag::Negative,
            }
            .refine(2);
            let pf = problem(dim, 2, RadialSpec::Nodes { nodes: grid.nodes });
            let (sc, sf) = (affine_state(&pc, 0.0), affine_state(&pf, 0.0));
            let e = error_norms((&pc, &sc), (&pf, &sf), &ErrorNormKind::ALL).unwrap();
            // the particle profile is constant per coarse element, not affine in x across it
            for (k, v) in ErrorNormKind::ALL.iter().zip(&e) {
                match k {
                    ErrorNormKind::C1H1 => assert!(*v < 1e-9 * 1e3, "{dim}D {k} {v}"),
                    ErrorNormKind::Phi1H1 | ErrorNormKind::Phi2H1 => assert!(*v < 1e-11, "{dim}D {k} {v}"),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn constant_offset_gives_closed_form_norms() {
        let p = problem(1, 1, RadialSpec::Uniform { intervals: 5 });
        let (a, b) = (affine_state(&p, 0.0), affine_state(&p, 0.5));
        let e = error_norms((&p, &a), (&p, &b), &ErrorNormKind::ALL).unwrap();
        let length: f64 = 225e-6;
        let electrodes: f64 = 200e-6;
        let rs = [p.radial[0].radius(), p.radial[1].radius()];
        assert!((e[0] - 500.0 * length.sqrt()).abs() < 1e-9 * e[0]);
        assert!((e[1] - 0.05 * length.sqrt()).abs() < 1e-9 * e[1]);
        assert!((e[2] - 1.5 * electrodes.sqrt()).abs() < 1e-9 * e[2]);
        assert!((e[3] - 5e3 * electrodes.sqrt()).abs() < 1e-9 * e[3]);
        // radial offset 5e3 integrated with weight r^2 over each electrode's particles
        let exact = (100e-6 * (rs[0].powi(3) + rs[1].powi(3)) / 3.0).sqrt() * 5e3;
        assert!((e[4] - exact).abs() < 1e-9 * exact, "{} {exact}", e[4]);
        assert!((e[5] - exact).abs() < 1e-9 * exact);
    }

    #[test]
    fn single_hat_perturbation_matches_hand_energy() {
        let p = problem(1, 1, RadialSpec::Uniform { intervals: 2 });
        let a = affine_state(&p, 0.0);
        let mut b = a.clone();
        let v = (0..p.mesh.n_vertices())
            .find(|&v| {
                let x = p.mesh.vertex(v)[0];
                x > 1e-7 && x < 99e-6
            })
            .unwrap();
        let delta = 0.25;
        b.c1[v] += delta;
        let adjacent: Vec<f64> = (0..p.mesh.n_elements())
            .filter(|&e| p.mesh.element(e).contains(&v))
            .map(|e| p.mesh.element_measure(e))
            .collect();
        assert_eq!(adjacent.len(), 2);
        let energy: f64 = adjacent.iter().map(|h| h / 3.0 + 1.0 / h).sum::<f64>() * delta * delta;
        let e = error_norms((&p, &a), (&p, &b), &[ErrorNormKind::C1H1]).unwrap();
        assert!((e[0] - energy.sqrt()).abs() < 1e-12 * energy.sqrt());
    }

    #[test]
    fn linear_radial_profile_matches_symbolic_integral() {
        let p = problem(1, 0, RadialSpec::Graded { levels: 4 });
        let zero = {
            let mut s = affine_state(&p, 0.0);
            s.c2.iter_mut().for_each(|c| c.iter_mut().for_each(|x| *x = 0.0));
            s
        };
        let mut lin = zero.clone();
        for (slot, c) in lin.c2.iter_mut().enumerate() {
            let grid = &p.radial[crate::assembly::electrode_index(p.slot_tag(slot))];
            *c = grid.nodes.clone();
        }
        let e = error_norms((&p, &zero), (&p, &lin), &[ErrorNormKind::L2L2r, ErrorNormKind::L2H1r]).unwrap();
        let rs = [p.radial[0].radius(), p.radial[1].radius()];
        let l2: f64 = rs.iter().map(|r| 100e-6 * r.powi(5) / 5.0).sum();
        let semi: f64 = rs.iter().map(|r| 100e-6 * r.powi(3) / 3.0).sum();
        assert!((e[0] - l2.sqrt()).abs() < 1e-12 * l2.sqrt());
        assert!((e[1] - (l2 + semi).sqrt()).abs() < 1e-12 * (l2 + semi).sqrt());
    }

    #[test]
    fn norms_are_symmetric() {
        for dim in [1, 2] {
            let p = problem(dim, 1, RadialSpec::Uniform { intervals: 3 });
            let a = affine_state(&p, 0.0);
            let mut b = affine_state(&p, 0.1);
            b.c1[1] += 7.0;
            b.c2[0][1] -= 30.0;
            let ab = error_norms((&p, &a), (&p, &b), &ErrorNormKind::ALL).unwrap();
            let ba = error_norms((&p, &b), (&p, &a), &ErrorNormKind::ALL).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                assert!((x - y).abs() <= 1e-14 * x.abs());
            }
        }
    }

    #[test]
    fn non_nested_meshes_are_rejected() {
        let pc = problem(1, 1, RadialSpec::Uniform { intervals: 2 });
        let pf = problem(1, 0, RadialSpec::Uniform { intervals: 2 });
        let (sc, sf) = (affine_state(&pc, 0.0), affine_state(&pf, 0.0));
        assert!(error_norms((&pc, &sc), (&pf, &sf), &[ErrorNormKind::C1H1]).is_err());
        let pr = problem(1, 1, RadialSpec::Uniform { intervals: 3 });
        let pr2 = problem(1, 1, RadialSpec::Uniform { intervals: 4 });
        let (a, b) = (affine_state(&pr, 0.0), affine_state(&pr2, 0.0));
        assert!(error_norms((&pr, &a), (&pr2, &b), &[ErrorNormKind::L2L2r]).is_err());
    }

    #[test]
    fn fitted_order_recovers_exact_power_laws() {
        let levels = [1, 2, 3];
        let errors: Vec<f64> = levels.iter().map(|&l| 3.0 * 0.25f64.powi(l as i32)).collect();
        assert!((fitted_order(&levels, &errors) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn table_renderings_list_every_level() {
        let table = ConvergenceTable {
            axis: StudyAxis::H,
            norms: vec![ErrorNormKind::C1H1, ErrorNormKind::SurfaceL2],
            rows: (0..3)
                .map(|l| ConvergenceRow {
                    level: l,
                    size: 0.5f64.powi(l as i32),
                    errors: vec![0.5f64.powi(l as i32), 0.25f64.powi(l as i32)],
                })
                .collect(),
            reference_level: 4,
            fit_levels: 3,
            wall_time: 0.0,
        };
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("axis,level,size,c1_H1,c1_H1_order,c2surf_L2,c2surf_L2_order"));
        let orders = table.orders();
        assert!((orders[0] - 1.0).abs() < 1e-12 && (orders[1] - 2.0).abs() < 1e-12);
        assert!(table.to_text().contains("fit"));
    }
}
