//! Short full-physics run on a coarse disk: saturated rim, centered seed crack,
//! default silicon constants. Checks the step loop converges, irreversibility holds
//! pointwise, lithium flows inward, and the rigid-body pins carry no load.

use pfcrack::assembly::{assemble_global, element_system, gather_element_state};
use pfcrack::material::MaterialParams;
use pfcrack::mesh::{generate_disk_mesh, CrackSeed, Mesh};
use pfcrack::solver::{build_solver, si_trace_record, RunSetup, SolverConfig, StepControl};
use pfcrack::Real;

fn coarse_disk() -> (Mesh, CrackSeed) {
    let crack = CrackSeed { length: 60e-9, half_width: 5e-9 };
    let mesh = generate_disk_mesh(60e-9, &crack, 5e-9, 12e-9).unwrap();
    (mesh, crack)
}

#[test]
fn short_lithiation_run_behaves() {
    let (mesh, crack) = coarse_disk();
    let material = MaterialParams::default();
    let config = SolverConfig {
        step: StepControl { dt: 0.0025, ..Default::default() },
        total_time: 0.02,
        ..Default::default()
    };
    let setup = RunSetup { mesh: &mesh, material: &material, config: &config, crack, c0: 1000.0 };
    let mut solver = build_solver(&setup, None).unwrap();

    let nn = solver.fe().dof.n_nodes;
    let mut phi_prev: Vec<Real> = solver.state.phi().to_vec();
    let mut li_prev = -1.0;
    let mut any_clamped = false;
    for _ in 0..8 {
        let stats = solver.step().unwrap();
        assert!(stats.newton_iters < 25, "newton took {} iterations", stats.newton_iters);
        any_clamped |= stats.clamped_nodes > 0;

        let phi = solver.state.phi();
        for i in 0..nn {
            assert!(
                phi[i] <= phi_prev[i] + 1e-14,
                "phi grew at node {i}: {} -> {}",
                phi_prev[i],
                phi[i]
            );
        }
        phi_prev = phi.to_vec();

        let rec = si_trace_record(&solver, &mesh, &stats).unwrap();
        assert!(rec.total_li > li_prev, "lithium content must grow during lithiation");
        li_prev = rec.total_li;
        assert!(rec.crack_length >= 55e-9 && rec.crack_length < 120e-9, "length {:e}", rec.crack_length);
        assert!(rec.sigma_p_max > 0.0, "somewhere the hydrostatic stress must be tensile");
        assert!(rec.sigma_p_min < 0.0, "the lithiated rim must be compressed");
    }
    assert!(any_clamped, "the seed band must be held by the irreversibility clamp");

    // The pins exist to remove rigid-body modes, not to carry load: their reaction
    // (the unconstrained residual at the pinned rows) must be negligible against the
    // element-level internal force scale.
    let fe = solver.fe();
    let (residual, _k, _d) =
        assemble_global(fe, solver.params(), &solver.state.q, &solver.state.qdot).unwrap();
    let mut char_force = 0.0 as Real;
    for e in 0..fe.quads.len() {
        let st = gather_element_state(fe, &solver.state.q, Some(&solver.state.qdot), e);
        let sys = element_system(&fe.ops[e], &st, solver.params()).unwrap();
        for v in &sys.r[..8] {
            char_force = char_force.max(v.abs());
        }
    }
    assert!(char_force > 0.0);
    let fixed = pfcrack::solver::benchmark_constraints(fe, config.boundary, &setup.crack);
    let mut n_pins = 0;
    for d in 0..2 * nn {
        if fixed[d] {
            n_pins += 1;
            assert!(
                residual[d].abs() <= 1e-8 * char_force,
                "pin dof {d} carries reaction {:e} vs scale {:e}",
                residual[d],
                char_force
            );
        }
    }
    assert_eq!(n_pins, 3);
}
