//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use dfn_fem::analysis::{benchmark_solvers, convergence_study, BenchConfig, ErrorNormKind, StudyConfig};
use dfn_fem::assembly::{
    assemble_full, assemble_reduced, boundary_integral, operators, DiscreteState, Discretization, Fields,
    KernelOptions, StepData,
};
use dfn_fem::linalg::{dense_solve, TripletMatrix};
use dfn_fem::mesh::{build_laminate, build_radial, Geometry, RadialGrid, RadialSpec, Resolution};
use dfn_fem::microsolver::{RadialOperator, Tridiagonal};
use dfn_fem::params::{ParameterSet, SubdomainTag};
use dfn_fem::solvers::{fix_nullspace, reduced_vector, solve_step, SolverConfig, SolverKind};
use dfn_fem::timeloop::{initialize_state, relative_state_distance, run, SimulationPlan};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn laminate(counts: [usize; 3], vertical: Option<usize>, radial: &RadialSpec) -> Discretization {
    let ps = ParameterSet::preset("marquis2019").unwrap();
    let g = Geometry {
        negative: 100e-6,
        separator: 25e-6,
        positive: 100e-6,
        height: vertical.map(|_| 40e-6),
    };
    let r = Resolution {
        negative: counts[0],
        separator: counts[1],
        positive: counts[2],
        vertical: vertical.unwrap_or(1),
    };
    let grids = [
        build_radial(&ps, SubdomainTag::Negative, radial).unwrap(),
        build_radial(&ps, SubdomainTag::Positive, radial).unwrap(),
    ];
    Discretization::new(ps, build_laminate(&g, &r).unwrap(), grids).unwrap()
}

/// Concentrations inside their bounds, potentials near their open-circuit values.
fn random_state(p: &Discretization, rng: &mut StdRng) -> DiscreteState {
    let mut s = p.initial_concentrations();
    for c in &mut s.c1 {
        *c *= 0.7 + 0.6 * rng.random::<f64>();
    }
    for v in &mut s.phi1 {
        *v = 0.02 * (rng.random::<f64>() - 0.5);
    }
    for (i, &v) in p.dofs.phi2_vertices.iter().enumerate() {
        let e = (0..p.mesh.n_elements())
            .find(|&e| p.mesh.tag(e).is_electrode() && p.mesh.element(e).contains(&v))
            .unwrap();
        let tag = p.mesh.tag(e);
        let ocp = p.params.ocp(tag, p.params.electrode_of(tag).c2_init).unwrap().0;
        s.phi2[i] = ocp + 0.02 * (rng.random::<f64>() - 0.5);
    }
    for (slot, c) in s.c2.iter_mut().enumerate() {
        let cmax = p.electrode_of_slot(slot).c2max;
        for v in c.iter_mut() {
            *v = cmax * (0.2 + 0.6 * rng.random::<f64>());
        }
    }
    s
}

fn study_orders(name: &str) -> (Vec<ErrorNormKind>, Vec<f64>, f64) {
    let study = StudyConfig::load(configs().join(name)).unwrap();
    let table = convergence_study(&study).unwrap();
    eprint!("{}", table.to_text());
    (table.norms.clone(), table.orders(), table.wall_time)
}

fn describe(norms: &[ErrorNormKind], orders: &[f64]) -> String {
    norms
        .iter()
        .zip(orders)
        .map(|(n, o)| format!("{n} {o:.2}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn spatial_order() -> Verdict {
    let (norms, orders, wall) = study_orders("converge_h.toml");
    let pass = orders.iter().all(|o| (0.9..=1.3).contains(o)) && wall < 600.0;
    verdict(
        pass,
        format!("{} in [0.9, 1.3], {wall:.1} s", describe(&norms, &orders)),
    )
}

fn radial_order() -> Verdict {
    let (norms, orders, wall) = study_orders("converge_dr.toml");
    let pass = norms.iter().zip(&orders).all(|(n, o)| match n {
        ErrorNormKind::L2H1r => (0.9..=1.3).contains(o),
        _ => (1.8..=2.3).contains(o),
    }) && wall < 600.0;
    verdict(
        pass,
        format!(
            "{} (L2 bands [1.8, 2.3], H1r band [0.9, 1.3]), {wall:.1} s",
            describe(&norms, &orders)
        ),
    )
}

fn temporal_order() -> Verdict {
    let (norms, orders, wall) = study_orders("converge_tau.toml");
    let pass = orders.iter().all(|o| (0.9..=1.4).contains(o)) && wall < 600.0;
    verdict(
        pass,
        format!("{} in [0.9, 1.4], {wall:.1} s", describe(&norms, &orders)),
    )
}

struct BenchOutcome {
    report: dfn_fem::analysis::BenchReport,
}

fn desk_bench() -> BenchOutcome {
    let cfg = BenchConfig::load(configs().join("bench.toml")).unwrap();
    let problem = cfg.case.discretization().unwrap();
    let report = benchmark_solvers(
        &problem,
        &cfg.case.plan,
        &cfg.case.solver,
        &SolverKind::ALL,
        cfg.repetitions,
    )
    .unwrap();
    eprint!("{}", report.to_text());
    BenchOutcome { report }
}

fn solver_equivalence(b: &BenchOutcome) -> Verdict {
    let r = &b.report;
    let finished = r.rows.iter().all(|row| row.dnf.is_none() && row.steps == 20);
    verdict(
        finished && r.agreement <= r.agreement_tol,
        format!(
            "7 solvers, 20 steps, max pairwise relative distance {:.2e} <= {:.1e}",
            r.agreement, r.agreement_tol
        ),
    )
}

fn iteration_ranking(b: &BenchOutcome) -> Verdict {
    let row = |k| b.report.row(k).unwrap();
    use SolverKind::*;
    let outer = |k| row(k).avg_outer;
    let one = outer(TwoDsFc) == 1.0 && outer(GsnFc) == 1.0;
    let eta = outer(TwoDsEta).max(outer(OneDsEta)) < outer(GsnPhi).min(outer(GsnMacro));
    let fd_most = SolverKind::ALL
        .iter()
        .filter(|&&k| k != GsnFd)
        .all(|&k| outer(k) < outer(GsnFd));
    let wall = row(TwoDsFc).wall_time < row(GsnFd).wall_time;
    let order = SolverKind::ALL
        .iter()
        .filter(|&&k| k != GsnFc)
        .all(|&k| row(k).peak_matrix_order < row(GsnFc).peak_matrix_order);
    let listing = SolverKind::ALL
        .iter()
        .map(|&k| format!("{k} {:.2}", outer(k)))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        one && eta && fd_most && wall && order,
        format!(
            "outer {listing}; wall 2DS-FC {:.3} s < GSN-FD {:.3} s; GSN-FC order {} largest",
            row(TwoDsFc).wall_time,
            row(GsnFd).wall_time,
            row(GsnFc).peak_matrix_order
        ),
    )
}

fn group_relative(a: &[f64], b: &[f64], groups: &[std::ops::Range<usize>]) -> f64 {
    groups
        .iter()
        .map(|g| {
            let scale = a[g.clone()]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(f64::MIN_POSITIVE);
            a[g.clone()]
                .iter()
                .zip(&b[g.clone()])
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
                / scale
        })
        .fold(0.0, f64::max)
}

fn schur_correctness() -> Verdict {
    let p = laminate([1, 1, 1], None, &RadialSpec::Uniform { intervals: 4 });
    let mut rng = StdRng::seed_from_u64(5);
    let d = &p.dofs;
    let (nv, nm, n) = (d.n_vertices, d.n_macro(), d.n_reduced());
    let pin = d.default_pin();
    let groups = [0..nv, nv..nm, nm..n];
    let (mut worst, mut pattern_ok) = (0.0f64, true);
    let trials = 25;
    for _ in 0..trials {
        let prev = random_state(&p, &mut rng);
        let s = random_state(&p, &mut rng);
        let tau = 10f64.powf(rng.random_range(-2.0..1.0));
        let step = StepData::new(&p, &prev, tau, tau, rng.random_range(-50.0..50.0)).unwrap();
        let x = reduced_vector(&s);
        let (f, jac) = assemble_reduced(&p, &step, &x, &KernelOptions::default(), true).unwrap();
        let jac = jac.unwrap();

        let mut full = jac.full_matrix(d);
        let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        fix_nullspace(&mut full, &mut rhs, pin).unwrap();
        let direct = dense_solve(&full.to_dense(), &rhs).unwrap();

        let mut schur = jac.schur_complement(&p).unwrap();
        let mut rhs_m: Vec<f64> = f[..nm].iter().map(|v| -v).collect();
        for (slot, (rows, vals)) in jac.u_src.iter().enumerate() {
            let fs = -f[nm + slot];
            for (&r, &u) in rows.iter().zip(vals) {
                rhs_m[r] -= u * fs / jac.d_micro[slot];
            }
        }
        fix_nullspace(&mut schur, &mut rhs_m, pin).unwrap();
        let mut eliminated = schur.solve(&rhs_m).unwrap();
        for (slot, (cols, vals)) in jac.v_bdry.iter().enumerate() {
            let coupling: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * eliminated[c]).sum();
            eliminated.push((-f[nm + slot] - coupling) / jac.d_micro[slot]);
        }
        worst = worst.max(group_relative(&direct, &eliminated, &groups));

        let correction = TripletMatrix {
            n: nm,
            rows: schur.rows[jac.macro_part.nnz()..].to_vec(),
            cols: schur.cols[jac.macro_part.nnz()..].to_vec(),
            vals: schur.vals[jac.macro_part.nnz()..].to_vec(),
        };
        pattern_ok &= correction.pattern().is_subset(&jac.macro_part.pattern());
    }
    verdict(
        worst <= 1e-11 && pattern_ok,
        format!(
            "{trials} trials on 3 elements, direction mismatch {worst:.2e} <= 1e-11, pattern contained: {pattern_ok}"
        ),
    )
}

/// Entrywise mismatch against central differences, relative to each row's largest entry.
fn fd_mismatch(jac: &[Vec<f64>], x: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let h = 1e-7 * x[j].abs().max(1.0);
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..x.len() {
            let row = jac[i].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if row > 0.0 {
                worst = worst.max(((fp[i] - fm[i]) / (2.0 * h) - jac[i][j]).abs() / row);
            }
        }
    }
    worst
}

fn jacobian_fidelity() -> Verdict {
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let meshes = [([2, 1, 2], None), ([1, 2, 3], None), ([2, 1, 2], Some(1))];
    for (counts, vertical) in meshes {
        let p = laminate(counts, vertical, &RadialSpec::Graded { levels: 3 });
        for _ in 0..2 {
            let prev = random_state(&p, &mut rng);
            let s = random_state(&p, &mut rng);
            let step = StepData::new(&p, &prev, 0.1, 0.1, 24.0).unwrap();
            let plain = KernelOptions::default();

            let x = reduced_vector(&s);
            let jac = assemble_reduced(&p, &step, &x, &plain, true).unwrap().1.unwrap();
            worst = worst.max(fd_mismatch(&jac.full_matrix(&p.dofs).to_dense(), &x, |y| {
                assemble_reduced(&p, &step, y, &plain, false).unwrap().0
            }));

            let x = s.flatten();
            let jac = assemble_full(&p, &step, &x, &plain, true).unwrap().1.unwrap();
            worst = worst.max(fd_mismatch(&jac.to_dense(), &x, |y| {
                assemble_full(&p, &step, y, &plain, false).unwrap().0
            }));

            let frozen = prev.surface();
            let lagged = KernelOptions {
                prefactor_c2s: Some(&frozen),
                ..Default::default()
            };
            let jac = assemble_full(&p, &step, &x, &lagged, true).unwrap().1.unwrap();
            worst = worst.max(fd_mismatch(&jac.to_dense(), &x, |y| {
                assemble_full(&p, &step, y, &lagged, false).unwrap().0
            }));
            checked += 3;
        }
    }
    verdict(
        worst <= 1e-6,
        format!("{checked} Jacobians (reduced, full, lagged prefactor; 1D and 2D), worst relative mismatch {worst:.2e} <= 1e-6"),
    )
}

fn conservation() -> Verdict {
    let p = laminate([10, 5, 10], None, &RadialSpec::Uniform { intervals: 10 });
    let cfg = SolverConfig::default();
    let tau = 0.1;
    let ops = operators(&p, tau).unwrap();
    let measures: Vec<f64> = p.gamma.iter().map(|g| g.measure).collect();
    let mut state = initialize_state(&p, &cfg).unwrap();
    let (mut flux, mut balance, mut particle) = (0.0f64, 0.0f64, 0.0f64);
    for k in 1..=20 {
        let t = k as f64 * tau;
        let current = p.params.operating.current_at(t);
        let step = StepData::with_operators(&p, &state, tau, t, current, ops.clone()).unwrap();
        flux = flux.max(boundary_integral(&step.facet_current, &measures).abs());
        let (next, _) = solve_step(SolverKind::TwoDsFc, &p, &step, &state, &cfg).unwrap();
        let surface = next.surface();
        let fields = Fields {
            c1: &next.c1,
            phi1: &next.phi1,
            phi2: &next.phi2,
            c2s: &surface,
        };
        let rates = p.element_rates(&fields).unwrap();
        let scale: f64 = p
            .dofs
            .electrode_elements
            .iter()
            .enumerate()
            .map(|(slot, &e)| p.electrode_of_slot(slot).a2 * p.element_measure(e) * rates[slot].abs())
            .sum();
        balance = balance.max(p.discrete_source_balance(&next).unwrap().abs() / scale);
        for (slot, rate) in rates.iter().enumerate() {
            let op = step.op(&p, slot);
            let before: f64 = op.mass.matvec(&state.c2[slot]).iter().sum();
            let change = op.mass.matvec(&next.c2[slot]).iter().sum::<f64>() - before;
            particle = particle.max((change + op.beta * rate).abs() / before);
        }
        state = next;
    }

    let mut rest = p.params.clone();
    rest.operating = dfn_fem::params::OperatingParams::constant(0.0);
    let q = Discretization::new(rest, p.mesh.clone(), p.radial.clone()).unwrap();
    let plan = SimulationPlan {
        t_end: 2.0,
        tau,
        solver: SolverKind::TwoDsFc,
        snapshot_every: 0,
    };
    let out = run(&q, &plan, &cfg, |_, _| {}).unwrap();
    let drift = relative_state_distance(&out.initial, &out.state);
    let drift_tol = 10.0 * cfg.outer_rtol.max(cfg.newton_rel_tol);

    let pass = flux == 0.0 && balance <= 1e-13 && particle <= 1e-11 && out.failure.is_none() && drift <= drift_tol;
    verdict(
        pass,
        format!(
            "|int I*| = {flux:.1e}, source balance {balance:.2e} <= 1e-13 of scale, particle balance {particle:.2e} <= 1e-11 of content, zero-current drift {drift:.2e} <= {drift_tol:.0e}"
        ),
    )
}

/// Exact `int_a^b r^2 p(r) q(r) dr` for linear `p`, `q` given by endpoint values,
/// integrated in the local coordinate `r = a + h s`.
fn weighted_product(a: f64, b: f64, p: (f64, f64), q: (f64, f64)) -> f64 {
    let h = b - a;
    let mul = |x: &[f64], y: &[f64]| {
        let mut z = vec![0.0; x.len() + y.len() - 1];
        for (i, u) in x.iter().enumerate() {
            for (j, v) in y.iter().enumerate() {
                z[i + j] += u * v;
            }
        }
        z
    };
    let poly = mul(&mul(&[a, h], &[a, h]), &mul(&[p.0, p.1 - p.0], &[q.0, q.1 - q.0]));
    h * poly.iter().enumerate().map(|(k, c)| c / (k + 1) as f64).sum::<f64>()
}

fn dense_radial(nodes: &[f64], k2: f64, tau: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = nodes.len();
    let mut m = vec![vec![0.0; n]; n];
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n - 1 {
        let (l, r) = (nodes[i], nodes[i + 1]);
        let h = r - l;
        let basis = [(1.0, 0.0), (0.0, 1.0)];
        let slopes = [-1.0 / h, 1.0 / h];
        for x in 0..2 {
            for y in 0..2 {
                let mass = weighted_product(l, r, basis[x], basis[y]);
                let stiff = k2 * slopes[x] * slopes[y] * h * (r * r + r * l + l * l) / 3.0;
                m[i + x][i + y] += mass;
                a[i + x][i + y] += mass + tau * stiff;
            }
        }
    }
    (m, a)
}

/// Dense LU followed by refinement against residuals in compensated arithmetic.
fn dense_oracle(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = dense_solve(a, b).unwrap();
    for _ in 0..3 {
        let r: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(row, &bi)| {
                let (mut sum, mut carry) = (bi, 0.0f64);
                for (&aij, &xj) in row.iter().zip(&x) {
                    let p = -aij * xj;
                    let p_err = (-aij).mul_add(xj, -p);
                    let next = sum + p;
                    let z = next - sum;
                    carry += p_err + ((sum - (next - z)) + (p - z));
                    sum = next;
                }
                sum + carry
            })
            .collect();
        for (xi, di) in x.iter_mut().zip(dense_solve(a, &r).unwrap()) {
            *xi += di;
        }
    }
    x
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn micro_oracle() -> Verdict {
    let mut rng = StdRng::seed_from_u64(9);
    let (mut entries, mut tdma, mut scalars) = (0.0f64, 0.0f64, 0.0f64);
    let mut trials = 0;
    for t in 0..60 {
        let radius = 10f64.powf(rng.random_range(-6.5..-4.5));
        let unit = match t % 3 {
            0 => RadialSpec::Graded {
                levels: rng.random_range(1..12),
            }
            .unit_nodes(),
            1 => RadialSpec::Uniform {
                intervals: rng.random_range(1..40),
            }
            .unit_nodes(),
            _ => {
                let mut v: Vec<f64> = (0..rng.random_range(1..30)).map(|_| rng.random::<f64>()).collect();
                v.sort_by(|a, b| a.total_cmp(b));
                v.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
                let mut nodes = vec![0.0];
                nodes.extend(v.into_iter().filter(|&x| x > 1e-6 && x < 1.0 - 1e-6));
                nodes.push(1.0);
                nodes
            }
        };
        let grid = RadialGrid::new(unit.iter().map(|x| x * radius).collect(), SubdomainTag::Negative).unwrap();
        let k2 = 10f64.powf(rng.random_range(-15.0..-12.0));
        let tau = 10f64.powf(rng.random_range(-3.0..2.0));
        let op = RadialOperator::new(&grid, k2, tau, 96485.33212).unwrap();
        let (m, a) = dense_radial(&grid.nodes, k2, tau);
        let n = grid.n_nodes();

        let (op_m, op_a) = (op.mass.to_dense(), op.system.to_dense());
        for i in 0..n {
            entries = entries.max(max_rel(&m[i], &op_m[i])).max(max_rel(&a[i], &op_a[i]));
        }

        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tri = Tridiagonal {
            diag: (0..n).map(|i| a[i][i]).collect(),
            off: (0..n - 1).map(|i| a[i][i + 1]).collect(),
        };
        tdma = tdma.max(max_rel(&dense_oracle(&a, &rhs), &tri.solve(&rhs).unwrap()));
        tdma = tdma.max(max_rel(&dense_oracle(&op_a, &rhs), &op.system.solve(&rhs).unwrap()));

        let mut e_n = vec![0.0; n];
        e_n[n - 1] = 1.0;
        let w = dense_oracle(&op_a, &e_n);
        let history: Vec<f64> = (0..n).map(|j| (0..n).map(|i| w[i] * op_m[i][j]).sum()).collect();
        scalars = scalars.max(((op.surface_response - w[n - 1]) / w[n - 1]).abs());
        scalars = scalars.max(max_rel(&history, &op.history_map));
        trials += 1;
    }
    verdict(
        entries <= 1e-12 && tdma <= 1e-12 && scalars <= 1e-12,
        format!(
            "{trials} radial systems incl. graded grids, matrix entries {entries:.2e}, TDMA vs dense {tdma:.2e}, surface scalars {scalars:.2e} (<= 1e-12)"
        ),
    )
}

fn main() -> ExitCode {
    let bench = desk_bench();
    let results = [
        ("1 spatial order", spatial_order()),
        ("2 radial order", radial_order()),
        ("3 temporal order", temporal_order()),
        ("4 solver equivalence", solver_equivalence(&bench)),
        ("5 Schur correctness", schur_correctness()),
        ("6 iteration ranking", iteration_ranking(&bench)),
        ("7 Jacobian fidelity", jacobian_fidelity()),
        ("8 conservation", conservation()),
        ("9 micro kernel oracles", micro_oracle()),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!(
            "criterion {name}: {} ({})",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
