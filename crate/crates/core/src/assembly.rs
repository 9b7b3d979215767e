//! P1 macro spaces, P0⊗P1 particle space, and assembly of the backward Euler
//! residuals with their exact Jacobian blocks.
//!
//! Global ordering of the reduced unknowns is `[c1 | phi1 | phi2 | c2 surface]`:
//! one `c1` and `phi1` value per vertex, one `phi2` value per vertex touching an
//! electrode, one surface concentration per electrode element.

use rayon::prelude::*;

use crate::error::{DomainError, Error, Result};
use crate::linalg::TripletMatrix;
use crate::mesh::{BoundaryTag, CellMesh, RadialGrid};
use crate::microsolver::RadialOperator;
use crate::params::{ParameterSet, SubdomainTag};
use crate::quadrature::{quadrature_rules, QuadratureRule};

const PARALLEL_THRESHOLD: usize = 512;

/// Degree of the rule used for every term that contains a chemistry closure.
pub const CHEMISTRY_DEGREE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub n_vertices: usize,
    pub phi2_of_vertex: Vec<Option<usize>>,
    pub phi2_vertices: Vec<usize>,
    /// Electrode elements in ascending order; position is the element's slot.
    pub electrode_elements: Vec<usize>,
    pub slot_of_element: Vec<Option<usize>>,
    /// Radial node count of each slot.
    pub radial_nodes: Vec<usize>,
    /// First radial unknown of each slot in the full ordering.
    pub radial_offsets: Vec<usize>,
}

impl DofMap {
    pub fn new(mesh: &CellMesh, radial: &[RadialGrid; 2]) -> Self {
        let nv = mesh.n_vertices();
        let mut touches = vec![false; nv];
        let mut electrode_elements = Vec::new();
        let mut slot_of_element = vec![None; mesh.n_elements()];
        let mut radial_nodes = Vec::new();
        for e in 0..mesh.n_elements() {
            let tag = mesh.tag(e);
            if tag.is_electrode() {
                slot_of_element[e] = Some(electrode_elements.len());
                electrode_elements.push(e);
                radial_nodes.push(radial[electrode_index(tag)].n_nodes());
                for &v in mesh.element(e) {
                    touches[v] = true;
                }
            }
        }
        let mut phi2_of_vertex = vec![None; nv];
        let mut phi2_vertices = Vec::new();
        for v in 0..nv {
            if touches[v] {
                phi2_of_vertex[v] = Some(phi2_vertices.len());
                phi2_vertices.push(v);
            }
        }
        let base = 2 * nv + phi2_vertices.len();
        let radial_offsets = radial_nodes
            .iter()
            .scan(base, |next, &n| {
                let at = *next;
                *next += n;
                Some(at)
            })
            .collect();
        Self {
            n_vertices: nv,
            phi2_of_vertex,
            phi2_vertices,
            electrode_elements,
            slot_of_element,
            radial_nodes,
            radial_offsets,
        }
    }

    pub fn n_phi2(&self) -> usize {
        self.phi2_vertices.len()
    }

    pub fn n_slots(&self) -> usize {
        self.electrode_elements.len()
    }

    pub fn c1(&self, v: usize) -> usize {
        v
    }

    pub fn phi1(&self, v: usize) -> usize {
        self.n_vertices + v
    }

    pub fn phi2(&self, v: usize) -> Option<usize> {
        self.phi2_of_vertex[v].map(|i| 2 * self.n_vertices + i)
    }

    pub fn surface(&self, slot: usize) -> usize {
        self.n_macro() + slot
    }

    /// Order of `[c1 | phi1 | phi2]`.
    pub fn n_macro(&self) -> usize {
        2 * self.n_vertices + self.n_phi2()
    }

    /// Order of `[c1 | phi1 | phi2 | c2 surface]`.
    pub fn n_reduced(&self) -> usize {
        self.n_macro() + self.n_slots()
    }

    pub fn n_radial_total(&self) -> usize {
        self.radial_nodes.iter().sum()
    }

    /// Radial unknowns strictly below the particle surface.
    pub fn n_interior_radial(&self) -> usize {
        self.n_radial_total() - self.n_slots()
    }

    /// Order of `[c1 | phi1 | phi2 | every radial node]`.
    pub fn n_full(&self) -> usize {
        self.n_macro() + self.n_radial_total()
    }

    /// Global index of the surface node of `slot` in the full ordering.
    pub fn full_surface(&self, slot: usize) -> usize {
        self.radial_offsets[slot] + self.radial_nodes[slot] - 1
    }

    /// The default pinned unknown: the `phi2` entry of smallest global index.
    pub fn default_pin(&self) -> usize {
        2 * self.n_vertices
    }
}

pub fn electrode_index(tag: SubdomainTag) -> usize {
    match tag {
        SubdomainTag::Negative => 0,
        SubdomainTag::Positive => 1,
        SubdomainTag::Separator => panic!("separator has no particles"),
    }
}

/// Nodal values of every unknown at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteState {
    pub c1: Vec<f64>,
    pub phi1: Vec<f64>,
    /// Indexed by `DofMap::phi2_vertices` position.
    pub phi2: Vec<f64>,
    /// Radial profile per electrode slot; the last entry is the surface value.
    pub c2: Vec<Vec<f64>>,
}

impl DiscreteState {
    pub fn surface(&self) -> Vec<f64> {
        self.c2.iter().map(|c| *c.last().unwrap()).collect()
    }

    /// `c1 > 0` and `0 < c2 < c2max` everywhere.
    pub fn within_bounds(&self, problem: &Discretization) -> bool {
        self.c1.iter().all(|&c| c > 0.0)
            && self.c2.iter().enumerate().all(|(slot, c)| {
                let cmax = problem.electrode_of_slot(slot).c2max;
                c.iter().all(|&v| v > 0.0 && v < cmax)
            })
    }

    /// `[c1 | phi1 | phi2 | c2 radial]` concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        let mut x = Vec::new();
        x.extend_from_slice(&self.c1);
        x.extend_from_slice(&self.phi1);
        x.extend_from_slice(&self.phi2);
        for c in &self.c2 {
            x.extend_from_slice(c);
        }
        x
    }
}

/// Borrowed macro unknowns plus one surface concentration per slot.
#[derive(Debug, Clone, Copy)]
pub struct Fields<'a> {
    pub c1: &'a [f64],
    pub phi1: &'a [f64],
    pub phi2: &'a [f64],
    pub c2s: &'a [f64],
}

/// Test and solver hooks altering what the kernel treats as unknown.
#[derive(Debug, Clone, Copy, Default)]
pub struct KernelOptions<'a> {
    /// Surface concentrations used in the Butler–Volmer prefactor instead of
    /// the current ones; the open-circuit potential still uses the current ones.
    pub prefactor_c2s: Option<&'a [f64]>,
    /// `c1` at which `kappa1`, `kappa2` and `1/c1` are evaluated in the `phi1` equation.
    pub coefficient_c1: Option<&'a [f64]>,
    /// Drops the reaction term entirely.
    pub no_kinetics: bool,
}

#[derive(Debug, Clone)]
struct ElementGeometry {
    measure: f64,
    /// `measure * grad(lambda_a) . grad(lambda_b)`, row-major `nv x nv`.
    gram: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GammaFacet {
    pub vertices: Vec<usize>,
    pub measure: f64,
    pub tag: BoundaryTag,
}

/// Mesh, parameters, radial grids and cached element data for one resolution.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub params: ParameterSet,
    pub mesh: CellMesh,
    pub radial: [RadialGrid; 2],
    pub dofs: DofMap,
    pub gamma: Vec<GammaFacet>,
    geometry: Vec<ElementGeometry>,
    chem_rule: QuadratureRule,
    chem_weights: Vec<f64>,
}

impl Discretization {
    pub fn new(params: ParameterSet, mesh: CellMesh, radial: [RadialGrid; 2]) -> Result<Self> {
        if radial[0].tag != SubdomainTag::Negative || radial[1].tag != SubdomainTag::Positive {
            return Err(Error::Validation(
                "radial grids must be given as [negative, positive]".into(),
            ));
        }
        for grid in &radial {
            let rs = params.electrode_of(grid.tag).radius;
            if (grid.radius() - rs).abs() > 1e-12 * rs {
                return Err(Error::Validation(format!(
                    "{} radial grid ends at {} but the particle radius is {rs}",
                    grid.tag,
                    grid.radius()
                )));
            }
        }
        let dofs = DofMap::new(&mesh, &radial);
        let geometry = (0..mesh.n_elements()).map(|e| element_geometry(&mesh, e)).collect();
        let gamma: Vec<GammaFacet> = mesh
            .boundary_facets()
            .iter()
            .filter(|f| f.tag != BoundaryTag::Insulated)
            .map(|f| GammaFacet {
                vertices: f.vertices.clone(),
                measure: f.measure,
                tag: f.tag,
            })
            .collect();
        if gamma.is_empty() {
            return Err(Error::Mesh("mesh has no current-collector facets".into()));
        }
        for f in &gamma {
            if f.vertices.iter().any(|&v| dofs.phi2_of_vertex[v].is_none()) {
                return Err(Error::Mesh("current collector must lie on an electrode".into()));
            }
        }
        let chem_rule = quadrature_rules(mesh.dim(), CHEMISTRY_DEGREE)?;
        let chem_weights = chem_rule.normalized_weights();
        Ok(Self {
            params,
            mesh,
            radial,
            dofs,
            gamma,
            geometry,
            chem_rule,
            chem_weights,
        })
    }

    pub fn radial_grid(&self, tag: SubdomainTag) -> &RadialGrid {
        &self.radial[electrode_index(tag)]
    }

    pub fn slot_tag(&self, slot: usize) -> SubdomainTag {
        self.mesh.tag(self.dofs.electrode_elements[slot])
    }

    pub fn electrode_of_slot(&self, slot: usize) -> &crate::params::ElectrodeParams {
        self.params.electrode_of(self.slot_tag(slot))
    }

    pub fn element_measure(&self, e: usize) -> f64 {
        self.geometry[e].measure
    }

    pub fn domain_measure(&self) -> f64 {
        self.geometry.iter().map(|g| g.measure).sum()
    }

    /// `|Gamma|`: total facet measure of both current collectors.
    pub fn gamma_measure(&self) -> f64 {
        self.gamma.iter().map(|f| f.measure).sum()
    }

    /// Galvanostatic facet currents: `+I` on the positive collector, and the
    /// measure-balanced opposite value on the negative one.
    pub fn galvanostatic_currents(&self, current: f64) -> Vec<f64> {
        let mp: f64 = self
            .gamma
            .iter()
            .filter(|f| f.tag == BoundaryTag::GammaP)
            .map(|f| f.measure)
            .sum();
        let mn: f64 = self
            .gamma
            .iter()
            .filter(|f| f.tag == BoundaryTag::GammaN)
            .map(|f| f.measure)
            .sum();
        self.gamma
            .iter()
            .map(|f| match f.tag {
                BoundaryTag::GammaP => current,
                _ => -current * mp / mn,
            })
            .collect()
    }

    /// Initial data: constant concentrations, potentials to be solved for.
    pub fn initial_concentrations(&self) -> DiscreteState {
        let nv = self.mesh.n_vertices();
        let mut c1 = vec![f64::NAN; nv];
        for e in 0..self.mesh.n_elements() {
            let c = self.params.c1_init(self.mesh.tag(e));
            for &v in self.mesh.element(e) {
                if c1[v].is_nan() {
                    c1[v] = c;
                }
            }
        }
        let c2 = (0..self.dofs.n_slots())
            .map(|slot| vec![self.electrode_of_slot(slot).c2_init; self.dofs.radial_nodes[slot]])
            .collect();
        DiscreteState {
            c1,
            phi1: vec![0.0; nv],
            phi2: vec![0.0; self.dofs.n_phi2()],
            c2,
        }
    }

    /// `∫_Omega phi1 dx` divided by `|Omega|`.
    pub fn mean_phi1(&self, phi1: &[f64]) -> f64 {
        let mut total = 0.0;
        for e in 0..self.mesh.n_elements() {
            let cell = self.mesh.element(e);
            let avg = cell.iter().map(|&v| phi1[v]).sum::<f64>() / cell.len() as f64;
            total += self.geometry[e].measure * avg;
        }
        total / self.domain_measure()
    }

    /// Measure-weighted mean of `phi2` over the facets carrying `tag`.
    pub fn collector_potential(&self, phi2: &[f64], tag: BoundaryTag) -> f64 {
        let mut total = 0.0;
        let mut measure = 0.0;
        for f in self.gamma.iter().filter(|f| f.tag == tag) {
            let avg = f
                .vertices
                .iter()
                .map(|&v| phi2[self.dofs.phi2_of_vertex[v].unwrap()])
                .sum::<f64>()
                / f.vertices.len() as f64;
            total += f.measure * avg;
            measure += f.measure;
        }
        total / measure
    }

    pub fn cell_voltage(&self, phi2: &[f64]) -> f64 {
        self.collector_potential(phi2, BoundaryTag::GammaP) - self.collector_potential(phi2, BoundaryTag::GammaN)
    }

    /// Per-element contributions at `fields`.
    pub fn element_blocks(
        &self,
        fields: &Fields<'_>,
        step: &StepData,
        opts: &KernelOptions<'_>,
        with_jacobian: bool,
    ) -> std::result::Result<Vec<ElementBlock>, DomainError> {
        let n = self.mesh.n_elements();
        if n >= PARALLEL_THRESHOLD {
            (0..n)
                .into_par_iter()
                .map(|e| self.element_kernel(e, fields, step, opts, with_jacobian))
                .collect()
        } else {
            (0..n)
                .map(|e| self.element_kernel(e, fields, step, opts, with_jacobian))
                .collect()
        }
    }

    /// Macro residual `[F_c1 | F_phi1 | F_phi2]` and the element blocks it was summed from.
    pub fn assemble(
        &self,
        fields: &Fields<'_>,
        step: &StepData,
        opts: &KernelOptions<'_>,
        with_jacobian: bool,
    ) -> std::result::Result<Assembled, DomainError> {
        let blocks = self.element_blocks(fields, step, opts, with_jacobian)?;
        let mut residual = vec![0.0; self.dofs.n_macro()];
        for b in &blocks {
            for (i, &row) in b.dofs.iter().enumerate() {
                residual[row] += b.res[i];
            }
        }
        for (f, &current) in self.gamma.iter().zip(&step.facet_current) {
            let share = f.measure / f.vertices.len() as f64;
            for &v in &f.vertices {
                residual[self.dofs.phi2(v).unwrap()] += current * share;
            }
        }
        Ok(Assembled { residual, blocks })
    }

    fn element_kernel(
        &self,
        e: usize,
        x: &Fields<'_>,
        step: &StepData,
        opts: &KernelOptions<'_>,
        with_jacobian: bool,
    ) -> std::result::Result<ElementBlock, DomainError> {
        let ps = &self.params;
        let tag = self.mesh.tag(e);
        let cell = self.mesh.element(e);
        let nv = cell.len();
        let geo = &self.geometry[e];
        let meas = geo.measure;
        let slot = self.dofs.slot_of_element[e];
        let nl = if slot.is_some() { 3 * nv } else { 2 * nv };

        let mut dofs = Vec::with_capacity(nl);
        dofs.extend(cell.iter().map(|&v| self.dofs.c1(v)));
        dofs.extend(cell.iter().map(|&v| self.dofs.phi1(v)));
        if slot.is_some() {
            dofs.extend(cell.iter().map(|&v| self.dofs.phi2(v).unwrap()));
        }

        let c1: Vec<f64> = cell.iter().map(|&v| x.c1[v]).collect();
        let c1_prev: Vec<f64> = cell.iter().map(|&v| step.c1_prev[v]).collect();
        let phi1: Vec<f64> = cell.iter().map(|&v| x.phi1[v]).collect();
        let coef_c1: Option<Vec<f64>> = opts.coefficient_c1.map(|c| cell.iter().map(|&v| c[v]).collect());
        let g = |a: usize, b: usize| geo.gram[a * nv + b];
        // rows of the Gram matrix sum to zero, so differences keep round-off at the size of the variation
        let gdot = |a: usize, vals: &[f64]| (0..nv).map(|b| g(a, b) * (vals[b] - vals[a])).sum::<f64>();

        // exact P1 mass matrix: |e| (1 + delta_ab) / ((d + 1)(d + 2))
        let mass_scale = meas / ((nv * (nv + 1)) as f64);
        let mass = |a: usize, b: usize| if a == b { 2.0 * mass_scale } else { mass_scale };

        // conductivity integrals over the element
        let mut kap1 = 0.0;
        let mut kln = 0.0;
        let mut dkap1 = vec![0.0; nv];
        let mut dkln = vec![0.0; nv];
        for q in 0..self.chem_rule.len() {
            let lam = self.chem_rule.barycentric(q);
            let w = self.chem_weights[q] * meas;
            let src = coef_c1.as_deref().unwrap_or(&c1);
            let cq: f64 = (0..nv).map(|a| lam[a] * src[a]).sum();
            let (k1v, dk1) = ps.kappa1_of(tag, cq).map_err(|d| d.at_element(e))?;
            let (k2v, dk2) = ps.kappa2_of(tag, cq).map_err(|d| d.at_element(e))?;
            kap1 += w * k1v;
            kln += w * k2v / cq;
            if coef_c1.is_none() {
                for b in 0..nv {
                    dkap1[b] += w * dk1 * lam[b];
                    dkln[b] += w * (dk2 / cq - k2v / (cq * cq)) * lam[b];
                }
            }
        }

        let eps = ps.eps1(tag);
        let k1 = ps.k1(tag);
        let tau = step.tau;
        let mut res = vec![0.0; nl];
        let gphi1: Vec<f64> = (0..nv).map(|a| gdot(a, &phi1)).collect();
        let gc1: Vec<f64> = (0..nv).map(|a| gdot(a, &c1)).collect();
        for a in 0..nv {
            let m: f64 = (0..nv).map(|b| mass(a, b) * (c1[b] - c1_prev[b])).sum();
            res[a] = eps / tau * m + k1 * gc1[a];
            res[nv + a] = kap1 / meas * gphi1[a] - kln / meas * gc1[a];
        }
        let mut jac = if with_jacobian { vec![0.0; nl * nl] } else { Vec::new() };
        if with_jacobian {
            for a in 0..nv {
                for b in 0..nv {
                    jac[a * nl + b] = eps / tau * mass(a, b) + k1 * g(a, b);
                    jac[(nv + a) * nl + b] =
                        gphi1[a] / meas * dkap1[b] - gc1[a] / meas * dkln[b] - kln / meas * g(a, b);
                    jac[(nv + a) * nl + nv + b] = kap1 / meas * g(a, b);
                }
            }
        }

        let mut block = ElementBlock {
            element: e,
            slot,
            dofs,
            res,
            jac,
            u: Vec::new(),
            jbar: 0.0,
            djbar: Vec::new(),
            djbar_dcs: 0.0,
        };
        let Some(slot) = slot else {
            return Ok(block);
        };

        let electrode = ps.electrode_of(tag);
        let sigma = electrode.sigma;
        let (a1, a2) = (electrode.a1, electrode.a2);
        let phi2: Vec<f64> = cell
            .iter()
            .map(|&v| x.phi2[self.dofs.phi2_of_vertex[v].unwrap()])
            .collect();
        let gphi2: Vec<f64> = (0..nv).map(|a| gdot(a, &phi2)).collect();
        for a in 0..nv {
            block.res[2 * nv + a] = sigma * gphi2[a];
        }
        if with_jacobian {
            for a in 0..nv {
                for b in 0..nv {
                    block.jac[(2 * nv + a) * nl + 2 * nv + b] = sigma * g(a, b);
                }
            }
            block.u = vec![0.0; nl];
            block.djbar = vec![0.0; nl];
        }
        if opts.no_kinetics {
            return Ok(block);
        }

        let cs = x.c2s[slot];
        let cs_pre = opts.prefactor_c2s.map_or(cs, |p| p[slot]);
        let (u_ocp, du_ocp) = ps.ocp(tag, cs).map_err(|d| d.at_element(e))?;
        // JI_a = ∫ J λ_a, Jc_ab = ∫ J_c1 λ_a λ_b, Je_ab = ∫ J_eta λ_a λ_b, Js_a = ∫ dJ/dcs λ_a
        let mut ji = vec![0.0; nv];
        let mut jc = vec![0.0; nv * nv];
        let mut je = vec![0.0; nv * nv];
        let mut js = vec![0.0; nv];
        for q in 0..self.chem_rule.len() {
            let lam = self.chem_rule.barycentric(q);
            let w = self.chem_weights[q] * meas;
            let c1q: f64 = (0..nv).map(|a| lam[a] * c1[a]).sum();
            let p1q: f64 = (0..nv).map(|a| lam[a] * phi1[a]).sum();
            let p2q: f64 = (0..nv).map(|a| lam[a] * phi2[a]).sum();
            let eta = p2q - p1q - u_ocp;
            let r = ps.butler_volmer(tag, c1q, cs_pre, eta).map_err(|d| d.at_element(e))?;
            let d_cs = if opts.prefactor_c2s.is_some() { 0.0 } else { r.d_c2s } - r.d_eta * du_ocp;
            for a in 0..nv {
                ji[a] += w * r.value * lam[a];
                js[a] += w * d_cs * lam[a];
                if with_jacobian {
                    for b in 0..nv {
                        jc[a * nv + b] += w * r.d_c1 * lam[a] * lam[b];
                        je[a * nv + b] += w * r.d_eta * lam[a] * lam[b];
                    }
                }
            }
        }
        for a in 0..nv {
            block.res[a] -= a1 * ji[a];
            block.res[nv + a] -= a2 * ji[a];
            block.res[2 * nv + a] += a2 * ji[a];
        }
        block.jbar = ji.iter().sum::<f64>() / meas;
        block.djbar_dcs = js.iter().sum::<f64>() / meas;
        if with_jacobian {
            let jac = &mut block.jac;
            for a in 0..nv {
                for b in 0..nv {
                    let (c, h) = (jc[a * nv + b], je[a * nv + b]);
                    // rows c1
                    jac[a * nl + b] -= a1 * c;
                    jac[a * nl + nv + b] += a1 * h;
                    jac[a * nl + 2 * nv + b] -= a1 * h;
                    // rows phi1
                    jac[(nv + a) * nl + b] -= a2 * c;
                    jac[(nv + a) * nl + nv + b] += a2 * h;
                    jac[(nv + a) * nl + 2 * nv + b] -= a2 * h;
                    // rows phi2
                    jac[(2 * nv + a) * nl + b] += a2 * c;
                    jac[(2 * nv + a) * nl + nv + b] -= a2 * h;
                    jac[(2 * nv + a) * nl + 2 * nv + b] += a2 * h;
                    // element-averaged rate
                    block.djbar[b] += c / meas;
                    block.djbar[nv + b] -= h / meas;
                    block.djbar[2 * nv + b] += h / meas;
                }
                block.u[a] = -a1 * js[a];
                block.u[nv + a] = -a2 * js[a];
                block.u[2 * nv + a] = a2 * js[a];
            }
        }
        Ok(block)
    }

    /// `∫_{Omega_2} a2 J_h dx` with the assembly quadrature.
    pub fn discrete_source_balance(&self, state: &DiscreteState) -> std::result::Result<f64, DomainError> {
        let c2s = state.surface();
        let fields = Fields {
            c1: &state.c1,
            phi1: &state.phi1,
            phi2: &state.phi2,
            c2s: &c2s,
        };
        let mut total = 0.0;
        for (slot, &e) in self.dofs.electrode_elements.iter().enumerate() {
            let tag = self.mesh.tag(e);
            total += self.params.electrode_of(tag).a2 * self.element_rate(e, slot, &fields)? * self.geometry[e].measure;
        }
        Ok(total)
    }

    /// Element-averaged reaction rate `(1/|e|) ∫_e J dx`.
    pub fn element_rate(&self, e: usize, slot: usize, x: &Fields<'_>) -> std::result::Result<f64, DomainError> {
        let ps = &self.params;
        let tag = self.mesh.tag(e);
        let cell = self.mesh.element(e);
        let cs = x.c2s[slot];
        let (u, _) = ps.ocp(tag, cs).map_err(|d| d.at_element(e))?;
        let mut total = 0.0;
        for q in 0..self.chem_rule.len() {
            let lam = self.chem_rule.barycentric(q);
            let mut c1q = 0.0;
            let mut eta = -u;
            for (a, &v) in cell.iter().enumerate() {
                c1q += lam[a] * x.c1[v];
                eta += lam[a] * (x.phi2[self.dofs.phi2_of_vertex[v].unwrap()] - x.phi1[v]);
            }
            total += self.chem_weights[q] * ps.butler_volmer(tag, c1q, cs, eta).map_err(|d| d.at_element(e))?.value;
        }
        Ok(total)
    }

    /// Element-averaged rates at every slot.
    pub fn element_rates(&self, x: &Fields<'_>) -> std::result::Result<Vec<f64>, DomainError> {
        self.dofs
            .electrode_elements
            .iter()
            .enumerate()
            .map(|(slot, &e)| self.element_rate(e, slot, x))
            .collect()
    }

    /// Total lithium `∫ eps1 c1 + sum_e (a1 F |e| / R²) 1^T M C_e`, conserved by the scheme.
    pub fn lithium_inventory(&self, state: &DiscreteState, ops: &[RadialOperator; 2]) -> f64 {
        let mut total = 0.0;
        for e in 0..self.mesh.n_elements() {
            let cell = self.mesh.element(e);
            let avg = cell.iter().map(|&v| state.c1[v]).sum::<f64>() / cell.len() as f64;
            total += self.params.eps1(self.mesh.tag(e)) * self.geometry[e].measure * avg;
        }
        for (slot, &e) in self.dofs.electrode_elements.iter().enumerate() {
            let tag = self.mesh.tag(e);
            let el = self.params.electrode_of(tag);
            let op = &ops[electrode_index(tag)];
            let m: f64 = op.mass.matvec(&state.c2[slot]).iter().sum();
            total += el.a1 * self.params.cell.faraday * self.geometry[e].measure / (el.radius * el.radius) * m;
        }
        total
    }
}

fn element_geometry(mesh: &CellMesh, e: usize) -> ElementGeometry {
    let measure = mesh.element_measure(e);
    let cell = mesh.element(e);
    let grads: Vec<[f64; 2]> = match mesh.dim() {
        1 => {
            let h = measure;
            vec![[-1.0 / h, 0.0], [1.0 / h, 0.0]]
        }
        _ => {
            let (p0, p1, p2) = (mesh.vertex(cell[0]), mesh.vertex(cell[1]), mesh.vertex(cell[2]));
            let det = 2.0 * measure;
            vec![
                [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
                [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
                [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
            ]
        }
    };
    let nv = cell.len();
    let mut gram = vec![0.0; nv * nv];
    for a in 0..nv {
        for b in 0..nv {
            if a != b {
                gram[a * nv + b] = measure * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
            }
        }
        gram[a * nv + a] = -(0..nv).filter(|&b| b != a).map(|b| gram[a * nv + b]).sum::<f64>();
    }
    ElementGeometry { measure, gram }
}

/// Local residual and derivatives of one element.
///
/// Local ordering is `[c1 at vertices | phi1 at vertices | phi2 at vertices]`,
/// the last group present on electrode elements only.
#[derive(Debug, Clone)]
pub struct ElementBlock {
    pub element: usize,
    pub slot: Option<usize>,
    pub dofs: Vec<usize>,
    pub res: Vec<f64>,
    /// Row-major `d res / d dofs`.
    pub jac: Vec<f64>,
    /// `d res / d c2s` of the element's own surface unknown.
    pub u: Vec<f64>,
    /// Element-averaged reaction rate.
    pub jbar: f64,
    /// `d jbar / d dofs`.
    pub djbar: Vec<f64>,
    pub djbar_dcs: f64,
}

#[derive(Debug, Clone)]
pub struct Assembled {
    pub residual: Vec<f64>,
    pub blocks: Vec<ElementBlock>,
}

/// Data fixed during one time step.
#[derive(Debug, Clone)]
pub struct StepData {
    pub tau: f64,
    pub time: f64,
    pub current: f64,
    /// Projected current `I*` per `Discretization::gamma` facet.
    pub facet_current: Vec<f64>,
    pub ops: [RadialOperator; 2],
    pub c1_prev: Vec<f64>,
    pub c2_prev: Vec<Vec<f64>>,
    /// `e_N^T A^{-1} M C_prev` per slot.
    pub history: Vec<f64>,
}

impl StepData {
    pub fn new(problem: &Discretization, prev: &DiscreteState, tau: f64, time: f64, current: f64) -> Result<Self> {
        let ops = operators(problem, tau)?;
        Self::with_operators(problem, prev, tau, time, current, ops)
    }

    pub fn with_operators(
        problem: &Discretization,
        prev: &DiscreteState,
        tau: f64,
        time: f64,
        current: f64,
        ops: [RadialOperator; 2],
    ) -> Result<Self> {
        let raw = problem.galvanostatic_currents(current);
        let measures: Vec<f64> = problem.gamma.iter().map(|f| f.measure).collect();
        let facet_current = project_current(&raw, &measures)?;
        let history = (0..problem.dofs.n_slots())
            .map(|slot| ops[electrode_index(problem.slot_tag(slot))].history(&prev.c2[slot]))
            .collect();
        Ok(Self {
            tau,
            time,
            current,
            facet_current,
            ops,
            c1_prev: prev.c1.clone(),
            c2_prev: prev.c2.clone(),
            history,
        })
    }

    pub fn op(&self, problem: &Discretization, slot: usize) -> &RadialOperator {
        &self.ops[electrode_index(problem.slot_tag(slot))]
    }
}

pub fn operators(problem: &Discretization, tau: f64) -> Result<[RadialOperator; 2]> {
    let f = problem.params.cell.faraday;
    let make =
        |tag: SubdomainTag| RadialOperator::new(problem.radial_grid(tag), problem.params.electrode_of(tag).k2, tau, f);
    Ok([make(SubdomainTag::Negative)?, make(SubdomainTag::Positive)?])
}

/// `I* = I - (1/|Gamma|) ∫_Gamma I ds` for facet-wise constant `I`.
pub fn project_current(values: &[f64], measures: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = measures.iter().sum();
    if values.is_empty() || !(total > 0.0) {
        return Err(Error::Mesh("empty current-collector boundary".into()));
    }
    let mean = values.iter().zip(measures).map(|(v, m)| v * m).sum::<f64>() / total;
    Ok(values.iter().map(|v| v - mean).collect())
}

/// `∫_Gamma I ds` of facet-wise constant values.
pub fn boundary_integral(values: &[f64], measures: &[f64]) -> f64 {
    values.iter().zip(measures).map(|(v, m)| v * m).sum()
}

/// The 2x2 block Jacobian of the reduced system
/// `[J_macro, U_src; V_bdry, D_micro]` over `[c1 | phi1 | phi2 | c2 surface]`.
#[derive(Debug, Clone)]
pub struct BlockJacobian {
    pub macro_part: TripletMatrix,
    /// Per slot: `(macro dofs, column entries)`.
    pub u_src: Vec<(Vec<usize>, Vec<f64>)>,
    /// Per slot: `(macro dofs, row entries)`.
    pub v_bdry: Vec<(Vec<usize>, Vec<f64>)>,
    pub d_micro: Vec<f64>,
}

impl BlockJacobian {
    pub fn from_blocks(problem: &Discretization, step: &StepData, blocks: &[ElementBlock]) -> Self {
        let n = problem.dofs.n_macro();
        let nnz: usize = blocks.iter().map(|b| b.dofs.len() * b.dofs.len()).sum();
        let mut macro_part = TripletMatrix::with_capacity(n, nnz);
        let ns = problem.dofs.n_slots();
        let mut u_src = vec![(Vec::new(), Vec::new()); ns];
        let mut v_bdry = vec![(Vec::new(), Vec::new()); ns];
        let mut d_micro = vec![1.0; ns];
        for b in blocks {
            let nl = b.dofs.len();
            for i in 0..nl {
                for j in 0..nl {
                    macro_part.push(b.dofs[i], b.dofs[j], b.jac[i * nl + j]);
                }
            }
            if let Some(slot) = b.slot {
                let op = step.op(problem, slot);
                let sb = op.surface_response * op.beta;
                u_src[slot] = (b.dofs.clone(), b.u.clone());
                v_bdry[slot] = (b.dofs.clone(), b.djbar.iter().map(|d| sb * d).collect());
                d_micro[slot] = 1.0 + sb * b.djbar_dcs;
            }
        }
        Self {
            macro_part,
            u_src,
            v_bdry,
            d_micro,
        }
    }

    /// The unreduced matrix over `[c1 | phi1 | phi2 | c2 surface]`.
    pub fn full_matrix(&self, dofs: &DofMap) -> TripletMatrix {
        let mut m = self.macro_part.clone();
        m.n = dofs.n_reduced();
        for (slot, ((ur, uv), (vr, vv))) in self.u_src.iter().zip(&self.v_bdry).enumerate() {
            let s = dofs.surface(slot);
            for (&r, &v) in ur.iter().zip(uv) {
                m.push(r, s, v);
            }
            for (&c, &v) in vr.iter().zip(vv) {
                m.push(s, c, v);
            }
            m.push(s, s, self.d_micro[slot]);
        }
        m
    }

    /// `J_macro - U_src D_micro^{-1} V_bdry`, eliminated element by element.
    pub fn schur_complement(&self, problem: &Discretization) -> Result<TripletMatrix> {
        let mut s = self.macro_part.clone();
        for (slot, ((ur, uv), (vr, vv))) in self.u_src.iter().zip(&self.v_bdry).enumerate() {
            let w = self.d_micro[slot];
            if !(w.abs() > f64::EPSILON) {
                return Err(Error::Linear(format!(
                    "singular surface block at element {}",
                    problem.dofs.electrode_elements[slot]
                )));
            }
            for (&r, &a) in ur.iter().zip(uv) {
                for (&c, &b) in vr.iter().zip(vv) {
                    s.push(r, c, -a * b / w);
                }
            }
        }
        Ok(s)
    }
}

/// Residual of the scalar surface equation
/// `c2s + s beta jbar - e_N^T A^{-1} M C_prev` per slot.
pub fn surface_residual(problem: &Discretization, step: &StepData, c2s: &[f64], jbar: &[f64]) -> Vec<f64> {
    (0..problem.dofs.n_slots())
        .map(|slot| {
            let op = step.op(problem, slot);
            c2s[slot] + op.surface_response * op.beta * jbar[slot] - step.history[slot]
        })
        .collect()
}

/// Full reduced residual over `[c1 | phi1 | phi2 | c2 surface]`.
pub fn assemble_residual(
    problem: &Discretization,
    step: &StepData,
    macro_fields: (&[f64], &[f64], &[f64]),
    c2s: &[f64],
) -> std::result::Result<Vec<f64>, DomainError> {
    let fields = Fields {
        c1: macro_fields.0,
        phi1: macro_fields.1,
        phi2: macro_fields.2,
        c2s,
    };
    let asm = problem.assemble(&fields, step, &KernelOptions::default(), false)?;
    let jbar = slot_rates(problem, &asm.blocks);
    let mut r = asm.residual;
    r.extend(surface_residual(problem, step, c2s, &jbar));
    Ok(r)
}

/// Block Jacobian of [`assemble_residual`].
pub fn assemble_jacobian(
    problem: &Discretization,
    step: &StepData,
    macro_fields: (&[f64], &[f64], &[f64]),
    c2s: &[f64],
) -> std::result::Result<BlockJacobian, DomainError> {
    let fields = Fields {
        c1: macro_fields.0,
        phi1: macro_fields.1,
        phi2: macro_fields.2,
        c2s,
    };
    let asm = problem.assemble(&fields, step, &KernelOptions::default(), true)?;
    Ok(BlockJacobian::from_blocks(problem, step, &asm.blocks))
}

/// Borrows `[c1 | phi1 | phi2]` out of a reduced or full vector.
pub fn split_macro<'a>(dofs: &DofMap, x: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
    let nv = dofs.n_vertices;
    (&x[..nv], &x[nv..2 * nv], &x[2 * nv..dofs.n_macro()])
}

/// Residual over `[c1 | phi1 | phi2 | c2 surface]` and, on request, its block Jacobian.
pub fn assemble_reduced(
    problem: &Discretization,
    step: &StepData,
    x: &[f64],
    opts: &KernelOptions<'_>,
    with_jacobian: bool,
) -> std::result::Result<(Vec<f64>, Option<BlockJacobian>), DomainError> {
    let (c1, phi1, phi2) = split_macro(&problem.dofs, x);
    let c2s = &x[problem.dofs.n_macro()..];
    let fields = Fields { c1, phi1, phi2, c2s };
    let asm = problem.assemble(&fields, step, opts, with_jacobian)?;
    let jbar = slot_rates(problem, &asm.blocks);
    let jac = with_jacobian.then(|| BlockJacobian::from_blocks(problem, step, &asm.blocks));
    let mut r = asm.residual;
    r.extend(surface_residual(problem, step, c2s, &jbar));
    Ok((r, jac))
}

/// Row scaling of the radial equations, `3 / R³`, so that they read as concentrations.
pub fn radial_row_scale(radius: f64) -> f64 {
    3.0 / (radius * radius * radius)
}

/// Residual over `[c1 | phi1 | phi2 | every radial node]` and, on request, its Jacobian.
///
/// The particle rows are `(3/R³) (A C - M C_prev + beta jbar e_N)`.
pub fn assemble_full(
    problem: &Discretization,
    step: &StepData,
    x: &[f64],
    opts: &KernelOptions<'_>,
    with_jacobian: bool,
) -> std::result::Result<(Vec<f64>, Option<TripletMatrix>), DomainError> {
    let dofs = &problem.dofs;
    let (c1, phi1, phi2) = split_macro(dofs, x);
    let c2s: Vec<f64> = (0..dofs.n_slots()).map(|s| x[dofs.full_surface(s)]).collect();
    let fields = Fields {
        c1,
        phi1,
        phi2,
        c2s: &c2s,
    };
    let asm = problem.assemble(&fields, step, opts, with_jacobian)?;
    let mut r = asm.residual;
    r.resize(dofs.n_full(), 0.0);
    let mut jac = with_jacobian.then(|| {
        let nnz: usize = asm.blocks.iter().map(|b| b.dofs.len() * (b.dofs.len() + 2)).sum();
        TripletMatrix::with_capacity(dofs.n_full(), nnz + 3 * dofs.n_radial_total())
    });
    for b in &asm.blocks {
        let nl = b.dofs.len();
        if let Some(m) = jac.as_mut() {
            for i in 0..nl {
                for j in 0..nl {
                    m.push(b.dofs[i], b.dofs[j], b.jac[i * nl + j]);
                }
            }
        }
        let Some(slot) = b.slot else { continue };
        let op = step.op(problem, slot);
        let off = dofs.radial_offsets[slot];
        let n = dofs.radial_nodes[slot];
        let surf = off + n - 1;
        let gamma = radial_row_scale(op.radius());
        let c = &x[off..off + n];
        let ac = op.system.matvec(c);
        let mp = op.mass.matvec(&step.c2_prev[slot]);
        for j in 0..n {
            r[off + j] = gamma * (ac[j] - mp[j]);
        }
        r[surf] += gamma * op.beta * b.jbar;
        if let Some(m) = jac.as_mut() {
            for (i, &row) in b.dofs.iter().enumerate() {
                m.push(row, surf, b.u[i]);
                m.push(surf, row, gamma * op.beta * b.djbar[i]);
            }
            for j in 0..n {
                m.push(off + j, off + j, gamma * op.system.diag[j]);
                if j + 1 < n {
                    m.push(off + j, off + j + 1, gamma * op.system.off[j]);
                    m.push(off + j + 1, off + j, gamma * op.system.off[j]);
                }
            }
            m.push(surf, surf, gamma * op.beta * b.djbar_dcs);
        }
    }
    Ok((r, jac))
}

pub fn slot_rates(problem: &Discretization, blocks: &[ElementBlock]) -> Vec<f64> {
    let mut jbar = vec![0.0; problem.dofs.n_slots()];
    for b in blocks {
        if let Some(slot) = b.slot {
            jbar[slot] = b.jbar;
        }
    }
    jbar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_laminate, build_radial, Geometry, RadialSpec, Resolution};
    use crate::params::OcpCurve;

    pub(crate) fn small_problem(counts: [usize; 3], radial: usize) -> Discretization {
        let ps = ParameterSet::preset("marquis2019").unwrap();
        let g = Geometry {
            negative: 100e-6,
            separator: 25e-6,
            positive: 100e-6,
            height: None,
        };
        let r = Resolution {
            negative: counts[0],
            separator: counts[1],
            positive: counts[2],
            vertical: 1,
        };
        let mesh = build_laminate(&g, &r).unwrap();
        let spec = RadialSpec::Uniform { intervals: radial };
        let grids = [
            build_radial(&ps, SubdomainTag::Negative, &spec).unwrap(),
            build_radial(&ps, SubdomainTag::Positive, &spec).unwrap(),
        ];
        Discretization::new(ps, mesh, grids).unwrap()
    }

    fn equilibrium(problem: &Discretization) -> DiscreteState {
        let mut s = problem.initial_concentrations();
        for (i, &v) in problem.dofs.phi2_vertices.iter().enumerate() {
            let e = (0..problem.mesh.n_elements())
                .find(|&e| problem.mesh.tag(e).is_electrode() && problem.mesh.element(e).contains(&v))
                .unwrap();
            let tag = problem.mesh.tag(e);
            s.phi2[i] = problem
                .params
                .ocp(tag, problem.params.electrode_of(tag).c2_init)
                .unwrap()
                .0;
        }
        s
    }

    #[test]
    fn dof_counts_one_dimensional() {
        let p = small_problem([4, 1, 4], 3);
        assert_eq!(p.dofs.n_vertices, 10);
        assert_eq!(p.dofs.n_phi2(), 10);
        assert_eq!(p.dofs.n_slots(), 8);
        assert_eq!(p.dofs.n_macro(), 30);
        assert_eq!(p.dofs.n_reduced(), 38);
        assert_eq!(p.dofs.n_full(), 30 + 8 * 4);
        assert_eq!(p.dofs.n_interior_radial(), 8 * 3);
    }

    #[test]
    fn equilibrium_state_has_zero_residual() {
        let p = small_problem([3, 2, 3], 4);
        let s = equilibrium(&p);
        let step = StepData::new(&p, &s, 0.1, 0.1, 0.0).unwrap();
        let r = assemble_residual(&p, &step, (&s.c1, &s.phi1, &s.phi2), &s.surface()).unwrap();
        let scale = 1000.0;
        assert!(r.iter().all(|v| v.abs() <= 1e-12 * scale), "{r:?}");
    }

    #[test]
    fn point_load_on_single_element_collector() {
        let p = small_problem([1, 1, 1], 1);
        let mut ps = p.params.clone();
        ps.negative.ocp = OcpCurve::Constant { value: 0.0 };
        ps.positive.ocp = OcpCurve::Constant { value: 0.0 };
        let p = Discretization::new(ps, p.mesh.clone(), p.radial.clone()).unwrap();
        let s = p.initial_concentrations();
        let step = StepData::new(&p, &s, 0.1, 0.1, 7.5).unwrap();
        let r = assemble_residual(&p, &step, (&s.c1, &s.phi1, &s.phi2), &s.surface()).unwrap();
        let last_vertex = p.mesh.n_vertices() - 1;
        let row = p.dofs.phi2(last_vertex).unwrap();
        assert_eq!(r[row], 7.5);
        assert_eq!(r[p.dofs.phi2(0).unwrap()], -7.5);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_current(&[2.0, 4.0], &[1.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(project_current(&[-3.0, 3.0], &[1.0, 1.0]).unwrap(), vec![-3.0, 3.0]);
        assert!(project_current(&[], &[]).is_err());
    }

    #[test]
    fn source_balance_signs() {
        let p = small_problem([2, 1, 2], 2);
        let mut s = equilibrium(&p);
        assert!(p.discrete_source_balance(&s).unwrap().abs() < 1e-9);
        for (i, &v) in p.dofs.phi2_vertices.iter().enumerate() {
            if p.mesh.vertex(v)[0] > 125e-6 - 1e-12 {
                s.phi2[i] += 0.01;
            }
        }
        // the shared positive/separator vertex also touches a positive element
        let b = p.discrete_source_balance(&s).unwrap();
        assert!(b > 0.0);
    }

    pub(crate) fn random_state(p: &Discretization, seed: u64) -> DiscreteState {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut s = equilibrium(p);
        for c in &mut s.c1 {
            *c *= 1.0 + 0.3 * (rng.random::<f64>() - 0.5);
        }
        for v in &mut s.phi1 {
            *v = 0.02 * (rng.random::<f64>() - 0.5);
        }
        for v in &mut s.phi2 {
            *v += 0.02 * (rng.random::<f64>() - 0.5);
        }
        for (slot, c) in s.c2.iter_mut().enumerate() {
            let cmax = p.electrode_of_slot(slot).c2max;
            for v in c.iter_mut() {
                *v = cmax * (0.3 + 0.4 * rng.random::<f64>());
            }
        }
        s
    }

    fn reduced_vector(p: &Discretization, s: &DiscreteState) -> Vec<f64> {
        let mut x = Vec::with_capacity(p.dofs.n_reduced());
        x.extend_from_slice(&s.c1);
        x.extend_from_slice(&s.phi1);
        x.extend_from_slice(&s.phi2);
        x.extend(s.surface());
        x
    }

    /// Largest entrywise mismatch between `jac` and central differences of `f`,
    /// relative to the largest entry of the same row.
    fn fd_mismatch(jac: &[Vec<f64>], x: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
        let n = x.len();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for i in 0..n {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let row = jac[i].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if row > 0.0 {
                    let e = (fd - jac[i][j]).abs() / row;
                    if e > worst && std::env::var("FD_DEBUG").is_ok() {
                        eprintln!("i={i} j={j} jac={} fd={fd} row={row} h={h}", jac[i][j]);
                    }
                    worst = worst.max(e);
                }
            }
        }
        worst
    }

    #[test]
    fn reduced_jacobian_matches_finite_differences() {
        for (counts, seed) in [([2, 1, 2], 1), ([1, 2, 3], 7)] {
            let p = small_problem(counts, 3);
            let prev = random_state(&p, seed + 100);
            let s = random_state(&p, seed);
            let step = StepData::new(&p, &prev, 0.1, 0.1, 24.0).unwrap();
            let x = reduced_vector(&p, &s);
            let opts = KernelOptions::default();
            let (_, jac) = assemble_reduced(&p, &step, &x, &opts, true).unwrap();
            let dense = jac.unwrap().full_matrix(&p.dofs).to_dense();
            let err = fd_mismatch(&dense, &x, |y| assemble_reduced(&p, &step, y, &opts, false).unwrap().0);
            assert!(err < 1e-6, "mismatch {err}");
        }
    }

    #[test]
    fn full_jacobian_matches_finite_differences() {
        let p = small_problem([2, 1, 2], 3);
        let prev = random_state(&p, 3);
        let s = random_state(&p, 4);
        let step = StepData::new(&p, &prev, 0.1, 0.1, 24.0).unwrap();
        let x = s.flatten();
        let opts = KernelOptions::default();
        let (_, jac) = assemble_full(&p, &step, &x, &opts, true).unwrap();
        let dense = jac.unwrap().to_dense();
        let err = fd_mismatch(&dense, &x, |y| assemble_full(&p, &step, y, &opts, false).unwrap().0);
        assert!(err < 1e-6, "mismatch {err}");
    }

    #[test]
    fn frozen_prefactor_jacobian_matches_finite_differences() {
        let p = small_problem([2, 1, 2], 2);
        let prev = random_state(&p, 5);
        let s = random_state(&p, 6);
        let frozen: Vec<f64> = prev.surface();
        let step = StepData::new(&p, &prev, 0.1, 0.1, 24.0).unwrap();
        let x = s.flatten();
        let opts = KernelOptions {
            prefactor_c2s: Some(&frozen),
            ..Default::default()
        };
        let (_, jac) = assemble_full(&p, &step, &x, &opts, true).unwrap();
        let err = fd_mismatch(&jac.unwrap().to_dense(), &x, |y| {
            assemble_full(&p, &step, y, &opts, false).unwrap().0
        });
        assert!(err < 1e-6, "mismatch {err}");
    }

    #[test]
    fn diffusion_blocks_symmetric_without_kinetics() {
        let p = small_problem([2, 2, 2], 2);
        let s = random_state(&p, 11);
        let step = StepData::new(&p, &s, 0.1, 0.1, 0.0).unwrap();
        let x = reduced_vector(&p, &s);
        let opts = KernelOptions {
            no_kinetics: true,
            coefficient_c1: Some(&s.c1),
            ..Default::default()
        };
        let a = assemble_reduced(&p, &step, &x, &opts, true)
            .unwrap()
            .1
            .unwrap()
            .macro_part
            .to_dense();
        let nv = p.dofs.n_vertices;
        let groups = [0..nv, nv..2 * nv, 2 * nv..p.dofs.n_macro()];
        for g in groups {
            for i in g.clone() {
                for j in g.clone() {
                    let scale = a[i][i].abs().max(a[j][j].abs());
                    assert!((a[i][j] - a[j][i]).abs() <= 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn frozen_chemistry_residual_is_affine() {
        let p = small_problem([2, 1, 2], 2);
        let (s1, s2) = (random_state(&p, 21), random_state(&p, 22));
        let frozen = random_state(&p, 23).c1;
        let step = StepData::new(&p, &s1, 0.1, 0.1, 10.0).unwrap();
        let opts = KernelOptions {
            no_kinetics: true,
            coefficient_c1: Some(&frozen),
            ..Default::default()
        };
        let (x1, x2) = (reduced_vector(&p, &s1), reduced_vector(&p, &s2));
        let r = |x: &[f64]| assemble_reduced(&p, &step, x, &opts, false).unwrap().0;
        let (r1, r2) = (r(&x1), r(&x2));
        let alpha = 0.3;
        let xm: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let rm = r(&xm);
        let n = p.dofs.n_macro();
        for i in 0..n {
            let expect = alpha * r1[i] + (1.0 - alpha) * r2[i];
            let scale = r1[i].abs().max(r2[i].abs()).max(1e-30);
            assert!((rm[i] - expect).abs() <= 1e-12 * scale.max(1.0), "row {i}");
        }
    }

    #[test]
    fn surface_block_on_one_interval_grid() {
        let p = small_problem([1, 1, 1], 1);
        let s = random_state(&p, 31);
        let step = StepData::new(&p, &s, 0.5, 0.5, 0.0).unwrap();
        let x = reduced_vector(&p, &s);
        let jac = assemble_reduced(&p, &step, &x, &KernelOptions::default(), true)
            .unwrap()
            .1
            .unwrap();
        let asm = p
            .assemble(
                &Fields {
                    c1: &s.c1,
                    phi1: &s.phi1,
                    phi2: &s.phi2,
                    c2s: &s.surface(),
                },
                &step,
                &KernelOptions::default(),
                true,
            )
            .unwrap();
        for (slot, &e) in p.dofs.electrode_elements.iter().enumerate() {
            let tag = p.mesh.tag(e);
            let el = p.params.electrode_of(tag);
            let (r, k2) = (el.radius, el.k2);
            let tau = 0.5;
            // exact 2x2 radial matrices on [0, R]
            let m = [
                [r.powi(3) / 30.0, r.powi(3) / 20.0],
                [r.powi(3) / 20.0, r.powi(3) / 5.0],
            ];
            let k = [[k2 * r / 3.0, -k2 * r / 3.0], [-k2 * r / 3.0, k2 * r / 3.0]];
            let a: Vec<Vec<f64>> = (0..2)
                .map(|i| (0..2).map(|j| m[i][j] + tau * k[i][j]).collect())
                .collect();
            let w = crate::linalg::dense_solve(&a, &[0.0, 1.0]).unwrap();
            let beta = tau * r * r / p.params.cell.faraday;
            let djbar_dcs = asm.blocks[e].djbar_dcs;
            let expect = 1.0 + w[1] * beta * djbar_dcs;
            assert!((jac.d_micro[slot] - expect).abs() <= 1e-12 * expect.abs());
        }
    }
}
