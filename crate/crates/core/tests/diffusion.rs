//! Manufactured-solution check of the transient transport path through the full
//! solver stack. With omega = 0 the mechanical coupling vanishes identically and the
//! c-equation reduces to linear diffusion, so on the unit square with homogeneous
//! Dirichlet walls
//!
//!   c(x, y, t) = exp(-2 pi^2 D t) sin(pi x) sin(pi y)
//!
//! is exact. Everything below runs in abstract units (length scale 1).

use std::f64::consts::PI;

use pfcrack::assembly::{DofMap, FeMesh, ModelParams};
use pfcrack::material::{Formulation, MixtureEndpoints, PlaneMode};
use pfcrack::mesh::{structured_rectangle, CrackSeed};
use pfcrack::solver::{
    benchmark_constraints, BoundaryCondition, FieldState, Solver, StepControl,
};
use pfcrack::Real;

fn decoupled_params() -> ModelParams<Real> {
    ModelParams {
        mixture: MixtureEndpoints { e_a: 1.0, nu_a: 0.3, e_b: 1.0, nu_b: 0.3, c_max: 1.0 },
        omega: 0.0,
        mkbt: 1.0,
        momega_na: 0.0,
        chi: 1.0,
        g_cr: 1.0,
        l0: 0.1,
        eta: 1e-3,
        mode: PlaneMode::Stress,
        formulation: Formulation::Isotropic,
        frozen_moduli: None,
    }
}

struct GridRun {
    c: Vec<Real>,
    areas: Vec<Real>,
    coords: Vec<[Real; 2]>,
}

fn run_grid(n: usize, dt: Real, t_end: Real) -> GridRun {
    let mesh = structured_rectangle(n, n, 1.0, 1.0).unwrap();
    let fe = FeMesh::from_mesh(&mesh, 1.0).unwrap();
    let nn = fe.dof.n_nodes;
    let dof = DofMap { n_nodes: nn };
    let fixed = benchmark_constraints(&fe, BoundaryCondition::Saturated, &CrackSeed::none());

    let mut state = FieldState::zeros(nn);
    for (i, p) in fe.coords.iter().enumerate() {
        state.q[dof.c(i)] = (PI * p[0]).sin() * (PI * p[1]).sin();
        state.q[dof.phi(i)] = 1.0;
    }
    for &b in &fe.boundary_nodes {
        state.q[dof.c(b as usize)] = 0.0;
    }

    let ctrl = StepControl { dt, ..Default::default() };
    let mut solver = Solver::from_parts(fe, decoupled_params(), ctrl, fixed, state).unwrap();
    solver.initialize_rates().unwrap();

    let n_steps = (t_end / dt).round() as usize;
    for _ in 0..n_steps {
        let stats = solver.step().unwrap();
        assert!(
            stats.newton_iters <= 3,
            "linear problem should converge almost immediately, took {}",
            stats.newton_iters
        );
    }

    let fe = solver.fe();
    GridRun {
        c: (0..nn).map(|i| solver.state.q[dof.c(i)]).collect(),
        areas: fe.lumped_area.clone(),
        coords: fe.coords.clone(),
    }
}

/// Relative area-weighted nodal L2 distance between a run and a reference field.
fn rel_l2(run: &GridRun, reference: impl Fn(usize) -> Real) -> Real {
    let mut err2 = 0.0;
    let mut ref2 = 0.0;
    for i in 0..run.c.len() {
        let r = reference(i);
        err2 += run.areas[i] * (run.c[i] - r) * (run.c[i] - r);
        ref2 += run.areas[i] * r * r;
    }
    (err2 / ref2).sqrt()
}

fn error_vs_exact(run: &GridRun, t: Real) -> Real {
    let decay = (-2.0 * PI * PI * t).exp();
    let coords = run.coords.clone();
    rel_l2(run, move |i| decay * (PI * coords[i][0]).sin() * (PI * coords[i][1]).sin())
}

#[test]
fn transient_diffusion_matches_separated_solution() {
    // one third of an e-fold: decay factor ~0.72
    let t_end = 1.0 / 60.0;
    let dt = t_end / 64.0;
    let coarse = error_vs_exact(&run_grid(12, dt, t_end), t_end);
    let fine = error_vs_exact(&run_grid(24, dt, t_end), t_end);
    assert!(fine < 0.01, "24x24 error {fine:.4} should be under 1%");
    let rate = (coarse / fine).log2();
    assert!(
        rate > 1.8,
        "spatial convergence rate {rate:.2} (errors {coarse:.2e} -> {fine:.2e})"
    );
}

/// Halving dt must cut the time-integration error by about four. Comparing against a
/// tiny-dt run on the same grid isolates the temporal error from the spatial one.
#[test]
fn time_stepping_is_second_order() {
    let t_end = 1.0 / 60.0;
    let n = 16;
    let reference = run_grid(n, t_end / 256.0, t_end);
    let err = |dt: Real| {
        let run = run_grid(n, dt, t_end);
        let c_ref = reference.c.clone();
        rel_l2(&run, move |i| c_ref[i])
    };
    let e1 = err(t_end / 4.0);
    let e2 = err(t_end / 8.0);
    let e3 = err(t_end / 16.0);
    let r12 = (e1 / e2).log2();
    let r23 = (e2 / e3).log2();
    assert!(
        r12 > 1.6 && r23 > 1.6,
        "temporal rates {r12:.2}, {r23:.2} (errors {e1:.2e}, {e2:.2e}, {e3:.2e})"
    );
}
