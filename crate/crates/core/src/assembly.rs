//! Element kernels (residual, consistent tangent, damping) and global sparse assembly.
//!
//! Nodal unknowns per node: u_x, u_y, c, phi. Global dof numbering is blocked — all
//! displacements first (node i at 2i, 2i+1), then all concentrations, then all order
//! parameters. Element-local vectors use the same blocking: u 0..8, c 8..12, phi 12..16.
//!
//! The residual splits into a rate part (consistent "mass" terms on c and phi) and a
//! static part:
//!   R_u   = int B_u^T g(phi) sigma dV
//!   R_c   = int N c_dot dV + int MkT B_c^T grad c dV - mu int c B_c^T grad(g sigma_p) dV
//!   R_phi = int (1/chi) phi_dot N dV + int G l0 B_phi^T grad phi dV
//!           - int N (G/l0 (1 - phi) - g' xi) dV
//! with mu = M Omega / N_A and xi the crack driving energy of the chosen formulation.
//! All tangent blocks below are hand-derived and pinned by a finite-difference oracle in
//! the tests; moduli are treated as frozen with respect to c in the tangent (their
//! concentration dependence enters the residual only).

use crate::element::{gauss_rule, ElementGeometry, OperatorMatrices};
use crate::error::{CoreError, Result};
use crate::material::{
    coupling_matrices, degradation, moduli_of_concentration, stress_of, tensile_energy,
    Formulation, MixtureEndpoints, Moduli, PlaneMode,
};
use crate::mesh::Mesh;
use crate::scalar::Scalar;
use crate::Real;

/// Physical and model parameters for the element kernels, in any one consistent unit
/// system (the solver feeds its internal scaled units, many tests feed SI).
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub mixture: MixtureEndpoints<T>,
    /// Partial molar volume (chemical strain per unit concentration is omega/3).
    pub omega: T,
    /// Fickian diffusivity M k_B T.
    pub mkbt: T,
    /// Stress-drift flux coefficient M Omega / N_A.
    pub momega_na: T,
    /// Crack relaxation coefficient; the rate term is (1/chi) phi_dot.
    pub chi: T,
    /// Critical energy release rate.
    pub g_cr: T,
    /// Crack regularization length.
    pub l0: T,
    /// Residual stiffness in the degradation function.
    pub eta: T,
    pub mode: PlaneMode,
    pub formulation: Formulation,
    /// When set, bypasses the concentration-dependent mixture rule everywhere. Used by
    /// the consistency tests and by decoupled verification problems.
    pub frozen_moduli: Option<Moduli<T>>,
}

impl<T: Scalar> ModelParams<T> {
    fn moduli_at(&self, c: T) -> (Moduli<T>, bool) {
        match self.frozen_moduli {
            Some(m) => (m, false),
            None => moduli_of_concentration(c, &self.mixture),
        }
    }
}

/// Element-local state gathered from the global vectors. `stab` is extra isotropic
/// diffusivity added to `mkbt` for this element: the stress-drift velocity across the
/// diffuse crack faces reaches cell Peclet numbers in the tens, where plain Galerkin
/// transport is wildly oscillatory, so the solver limits the local Peclet to 2 with a
/// lagged artificial-diffusion coefficient (see [`drift_stabilization`]). Lagged means
/// constant within a step, which keeps the tangent exactly consistent.
#[derive(Debug, Clone, Copy, Default)]
pub struct ElementState<T> {
    pub u: [T; 8],
    pub c: [T; 4],
    pub phi: [T; 4],
    pub c_dot: [T; 4],
    pub phi_dot: [T; 4],
    pub stab: T,
}

/// Residual, static tangent and damping matrix of one element, plus the number of gauss
/// points whose concentration had to be clamped for the moduli evaluation.
#[derive(Debug, Clone)]
pub struct ElementSystem<T> {
    pub r: [T; 16],
    pub k: [[T; 16]; 16],
    pub d: [[T; 16]; 16],
    pub clamped: u32,
}

/// Evaluate the element kernels on precomputed operator matrices (one entry per gauss
/// point, integration weight baked into `det_j_w`).
pub fn element_system<T: Scalar>(
    ops: &[OperatorMatrices<T>],
    state: &ElementState<T>,
    p: &ModelParams<T>,
) -> Result<ElementSystem<T>> {
    let mut out = ElementSystem {
        r: [T::zero(); 16],
        k: [[T::zero(); 16]; 16],
        d: [[T::zero(); 16]; 16],
        clamped: 0,
    };
    let third = T::lit(1.0 / 3.0);
    let inv_chi = T::one() / p.chi;
    let g_over_l0 = p.g_cr / p.l0;
    let g_l0 = p.g_cr * p.l0;

    for op in ops {
        let dv = op.det_j_w;

        // field values and gradients at the gauss point
        let mut c_gp = T::zero();
        let mut phi_gp = T::zero();
        let mut grad_c = [T::zero(); 2];
        let mut grad_phi = [T::zero(); 2];
        for i in 0..4 {
            c_gp += op.n[i] * state.c[i];
            phi_gp += op.n[i] * state.phi[i];
            for d in 0..2 {
                grad_c[d] += op.b_c[d][i] * state.c[i];
                grad_phi[d] += op.b_c[d][i] * state.phi[i];
            }
        }
        let mut eps = [T::zero(); 3];
        for r in 0..3 {
            for k in 0..8 {
                eps[r] += op.b_u[r][k] * state.u[k];
            }
        }
        let mut geps_star = [T::zero(); 4];
        for r in 0..4 {
            for k in 0..8 {
                geps_star[r] += op.b_u_star[r][k] * state.u[k];
            }
        }

        let (moduli, clamped) = p.moduli_at(c_gp);
        if clamped {
            out.clamped += 1;
        }
        let cm = coupling_matrices(moduli, p.omega, p.mode)?;
        let st = stress_of(&eps, c_gp, &cm);
        let (g, dg, ddg) = degradation(phi_gp, p.eta);

        // crack driving energy and its state derivatives
        let (xi_drive, dxi_row_u, dxi_dc): (T, [T; 8], T) = match p.formulation {
            Formulation::Hybrid => {
                let (xi, dxi_dsig) = tensile_energy(&st.sigma, cm.e);
                // d xi / du = (d xi/d sigma) D1 B_u
                let mut v = [T::zero(); 3];
                for r in 0..3 {
                    for k in 0..3 {
                        v[r] += cm.d1[r][k] * dxi_dsig[k];
                    }
                }
                let mut row = [T::zero(); 8];
                for j in 0..8 {
                    for r in 0..3 {
                        row[j] += v[r] * op.b_u[r][j];
                    }
                }
                let dc = dxi_dsig[0] * cm.d2[0] + dxi_dsig[1] * cm.d2[1] + dxi_dsig[2] * cm.d2[2];
                (xi, row, dc)
            }
            Formulation::Isotropic => {
                // xi_u = 1/2 eps_e^T D1 eps_e, so d xi/du = sigma^T B_u and
                // d xi/dc = eps_e^T D2
                let mut row = [T::zero(); 8];
                for j in 0..8 {
                    for r in 0..3 {
                        row[j] += st.sigma[r] * op.b_u[r][j];
                    }
                }
                let dc = st.eps_e[0] * cm.d2[0] + st.eps_e[1] * cm.d2[1] + st.eps_e[2] * cm.d2[2];
                (st.xi_u, row, dc)
            }
        };

        // grad sigma_p and grad (g sigma_p)
        let f3 = cm.d3_star_factor * third;
        let grad_sp = [
            f3 * (geps_star[0] + geps_star[1]) + cm.d4 * third * grad_c[0],
            f3 * (geps_star[2] + geps_star[3]) + cm.d4 * third * grad_c[1],
        ];
        let grad_gsp = [
            g * grad_sp[0] + dg * st.sigma_p * grad_phi[0],
            g * grad_sp[1] + dg * st.sigma_p * grad_phi[1],
        ];

        // ---- residual
        for j in 0..8 {
            let mut acc = T::zero();
            for r in 0..3 {
                acc += op.b_u[r][j] * st.sigma[r];
            }
            out.r[j] += dv * g * acc;
        }
        // Rate terms use the row-sum lumped mass (N_i q_dot_i instead of N_i N_j
        // q_dot_j). At the Fourier numbers of these runs (D dt / h^2 ~ 1e-4 at the
        // rim) a consistent mass loses the discrete maximum principle and rings
        // node-to-node on the saturation front; lumping restores monotone fronts and
        // makes the lumped-area Li total the exactly conserved discrete quantity.
        for i in 0..4 {
            let bc = [op.b_c[0][i], op.b_c[1][i]];
            let fick = (p.mkbt + state.stab) * (bc[0] * grad_c[0] + bc[1] * grad_c[1]);
            let drift = p.momega_na * c_gp * (bc[0] * grad_gsp[0] + bc[1] * grad_gsp[1]);
            out.r[8 + i] += dv * (op.n[i] * state.c_dot[i] + fick - drift);

            let grad_term = g_l0 * (bc[0] * grad_phi[0] + bc[1] * grad_phi[1]);
            let local = g_over_l0 * (T::one() - phi_gp) - dg * xi_drive;
            out.r[12 + i] +=
                dv * (inv_chi * state.phi_dot[i] * op.n[i] + grad_term - op.n[i] * local);
        }

        // ---- tangent
        // u-u: g B_u^T D1 B_u
        let mut d1b = [[T::zero(); 8]; 3];
        for r in 0..3 {
            for j in 0..8 {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc += cm.d1[r][k] * op.b_u[k][j];
                }
                d1b[r][j] = acc;
            }
        }
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = T::zero();
                for r in 0..3 {
                    acc += op.b_u[r][i] * d1b[r][j];
                }
                out.k[i][j] += dv * g * acc;
            }
        }
        // u-c: g B_u^T D2 N, u-phi: g' (B_u^T sigma) N
        let mut bu_d2 = [T::zero(); 8];
        let mut bu_sig = [T::zero(); 8];
        for i in 0..8 {
            for r in 0..3 {
                bu_d2[i] += op.b_u[r][i] * cm.d2[r];
                bu_sig[i] += op.b_u[r][i] * st.sigma[r];
            }
        }
        for i in 0..8 {
            for j in 0..4 {
                out.k[i][8 + j] += dv * g * bu_d2[i] * op.n[j];
                out.k[i][12 + j] += dv * dg * bu_sig[i] * op.n[j];
            }
        }
        // c-u: -mu c B_c^T [ g/3 D3* B* + g'/3 (grad phi) (D3^T B_u) ]
        let mut d3bu = [T::zero(); 8]; // D3^T B_u (row)
        for j in 0..8 {
            d3bu[j] = cm.d3[0] * op.b_u[0][j] + cm.d3[1] * op.b_u[1][j] + cm.d3[2] * op.b_u[2][j];
        }
        let mut d3sb = [[T::zero(); 8]; 2]; // D3* B* (2 rows)
        for j in 0..8 {
            d3sb[0][j] = cm.d3_star_factor * (op.b_u_star[0][j] + op.b_u_star[1][j]);
            d3sb[1][j] = cm.d3_star_factor * (op.b_u_star[2][j] + op.b_u_star[3][j]);
        }
        let mu_c = p.momega_na * c_gp;
        for i in 0..4 {
            let bc = [op.b_c[0][i], op.b_c[1][i]];
            let bc_gphi = bc[0] * grad_phi[0] + bc[1] * grad_phi[1];
            for j in 0..8 {
                let t = g * third * (bc[0] * d3sb[0][j] + bc[1] * d3sb[1][j])
                    + dg * third * bc_gphi * d3bu[j];
                out.k[8 + i][j] -= dv * mu_c * t;
            }
        }
        // c-c, c-phi
        for i in 0..4 {
            let bc = [op.b_c[0][i], op.b_c[1][i]];
            let bc_gphi = bc[0] * grad_phi[0] + bc[1] * grad_phi[1];
            let bc_gsp = bc[0] * grad_sp[0] + bc[1] * grad_sp[1];
            let bc_ggsp = bc[0] * grad_gsp[0] + bc[1] * grad_gsp[1];
            for j in 0..4 {
                let bcbc = bc[0] * op.b_c[0][j] + bc[1] * op.b_c[1][j];
                out.k[8 + i][8 + j] += dv
                    * ((p.mkbt + state.stab) * bcbc
                        - p.momega_na * bc_ggsp * op.n[j]
                        - mu_c * cm.d4 * third * (g * bcbc + dg * bc_gphi * op.n[j]));
                out.k[8 + i][12 + j] -= dv
                    * mu_c
                    * (dg * op.n[j] * bc_gsp + st.sigma_p * (ddg * op.n[j] * bc_gphi + dg * bcbc));
            }
        }
        // phi-u, phi-c, phi-phi
        for i in 0..4 {
            let bc = [op.b_c[0][i], op.b_c[1][i]];
            for j in 0..8 {
                out.k[12 + i][j] += dv * op.n[i] * dg * dxi_row_u[j];
            }
            for j in 0..4 {
                out.k[12 + i][8 + j] += dv * op.n[i] * dg * dxi_dc * op.n[j];
                let bcbc = bc[0] * op.b_c[0][j] + bc[1] * op.b_c[1][j];
                out.k[12 + i][12 + j] +=
                    dv * (g_l0 * bcbc + op.n[i] * op.n[j] * (g_over_l0 + ddg * xi_drive));
            }
        }
        // ---- damping (lumped, matching the rate terms above)
        for i in 0..4 {
            let nl = dv * op.n[i];
            out.d[8 + i][8 + i] += nl;
            out.d[12 + i][12 + i] += nl * inv_chi;
        }
    }
    Ok(out)
}

/// Stored free energy density integral of the current state (elastic + crack surface),
/// used by the relaxation-decay checks. The chemical free energy is omitted: it is
/// constant whenever c is frozen, which is the only situation the check runs in.
pub fn stored_energy(fe: &FeMesh, p: &ModelParams<Real>, q: &[Real]) -> Result<Real> {
    let mut total = 0.0;
    let half = 0.5;
    for (e, ops) in fe.ops.iter().enumerate() {
        let st = gather_element_state(fe, q, None, e);
        for op in ops {
            let mut c_gp = 0.0;
            let mut phi_gp = 0.0;
            let mut grad_phi = [0.0; 2];
            for i in 0..4 {
                c_gp += op.n[i] * st.c[i];
                phi_gp += op.n[i] * st.phi[i];
                grad_phi[0] += op.b_c[0][i] * st.phi[i];
                grad_phi[1] += op.b_c[1][i] * st.phi[i];
            }
            let mut eps = [0.0; 3];
            for r in 0..3 {
                for k in 0..8 {
                    eps[r] += op.b_u[r][k] * st.u[k];
                }
            }
            let (moduli, _) = p.moduli_at(c_gp);
            let cm = coupling_matrices(moduli, p.omega, p.mode)?;
            let s = stress_of(&eps, c_gp, &cm);
            let (g, _, _) = degradation(phi_gp, p.eta);
            let one_m = 1.0 - phi_gp;
            let surf = p.g_cr / (2.0 * p.l0) * one_m * one_m
                + half * p.g_cr * p.l0 * (grad_phi[0] * grad_phi[0] + grad_phi[1] * grad_phi[1]);
            total += op.det_j_w * (g * s.xi_u + surf);
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// global structures

/// Blocked dof numbering over the mesh nodes.
#[derive(Debug, Clone, Copy)]
pub struct DofMap {
    pub n_nodes: usize,
}

impl DofMap {
    #[inline]
    pub fn ux(&self, node: usize) -> usize {
        2 * node
    }
    #[inline]
    pub fn uy(&self, node: usize) -> usize {
        2 * node + 1
    }
    #[inline]
    pub fn c(&self, node: usize) -> usize {
        2 * self.n_nodes + node
    }
    #[inline]
    pub fn phi(&self, node: usize) -> usize {
        3 * self.n_nodes + node
    }
    #[inline]
    pub fn n_dofs(&self) -> usize {
        4 * self.n_nodes
    }

    /// Global dofs of one element in local order (u pairs, then c, then phi).
    pub fn element_dofs(&self, quad: &[u32; 4]) -> [usize; 16] {
        let mut dofs = [0usize; 16];
        for (i, &node) in quad.iter().enumerate() {
            let n = node as usize;
            dofs[2 * i] = self.ux(n);
            dofs[2 * i + 1] = self.uy(n);
            dofs[8 + i] = self.c(n);
            dofs[12 + i] = self.phi(n);
        }
        dofs
    }
}

/// Solver-side mesh: coordinates rescaled to the working unit system, cached operator
/// matrices per element, and lumped nodal areas.
pub struct FeMesh {
    pub coords: Vec<[Real; 2]>,
    pub quads: Vec<[u32; 4]>,
    pub boundary_nodes: Vec<u32>,
    pub dof: DofMap,
    pub ops: Vec<[OperatorMatrices<Real>; 4]>,
    /// int N_i dV per node; sums to the mesh area.
    pub lumped_area: Vec<Real>,
}

impl FeMesh {
    /// Build from an SI mesh, scaling coordinates by `length_scale` (1e9 turns meters
    /// into the solver's nanometers; tests pass 1.0 to work in mesh units directly).
    pub fn from_mesh(mesh: &Mesh, length_scale: Real) -> Result<Self> {
        let coords: Vec<[Real; 2]> = mesh
            .node_coords
            .iter()
            .map(|p| [p[0] * length_scale, p[1] * length_scale])
            .collect();
        let gps = gauss_rule::<Real>(2)?;
        let mut ops = Vec::with_capacity(mesh.quads.len());
        let mut lumped = vec![0.0; coords.len()];
        for q in &mesh.quads {
            let geom = ElementGeometry::new([
                coords[q[0] as usize],
                coords[q[1] as usize],
                coords[q[2] as usize],
                coords[q[3] as usize],
            ]);
            let mut elem_ops: Vec<OperatorMatrices<Real>> = Vec::with_capacity(4);
            for &gp in &gps {
                elem_ops.push(geom.operator_matrices(gp)?);
            }
            for (i, &node) in q.iter().enumerate() {
                for op in &elem_ops {
                    lumped[node as usize] += op.det_j_w * op.n[i];
                }
            }
            let arr: [OperatorMatrices<Real>; 4] =
                elem_ops.try_into().map_err(|_| CoreError::Assembly("gauss rule size".into()))?;
            ops.push(arr);
        }
        Ok(FeMesh {
            coords,
            quads: mesh.quads.clone(),
            boundary_nodes: mesh.boundary_nodes.clone(),
            dof: DofMap { n_nodes: mesh.node_coords.len() },
            ops,
            lumped_area: lumped,
        })
    }
}

/// Gather one element's state from the global vectors (rates optional).
pub fn gather_element_state(
    fe: &FeMesh,
    q: &[Real],
    qdot: Option<&[Real]>,
    elem: usize,
) -> ElementState<Real> {
    let dofs = fe.dof.element_dofs(&fe.quads[elem]);
    let mut st = ElementState::default();
    for i in 0..4 {
        st.u[2 * i] = q[dofs[2 * i]];
        st.u[2 * i + 1] = q[dofs[2 * i + 1]];
        st.c[i] = q[dofs[8 + i]];
        st.phi[i] = q[dofs[12 + i]];
        if let Some(v) = qdot {
            st.c_dot[i] = v[dofs[8 + i]];
            st.phi_dot[i] = v[dofs[12 + i]];
        }
    }
    st
}

// ---------------------------------------------------------------------------
// sparse matrices

/// Minimal CSC matrix for the test/verification assembly route.
#[derive(Debug, Clone)]
pub struct CscMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<Real>,
}

impl CscMatrix {
    /// Deterministic triplet assembly: entries are sorted by (column, row) with a stable
    /// sort and accumulated left to right, so the result is independent of the order the
    /// triplets were produced in, up to roundoff.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, Real)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&i| (triplets[i].1, triplets[i].0));
        let mut col_ptr = vec![0usize; n_cols + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for &i in &order {
            let (r, c, v) = triplets[i];
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..n_cols {
            col_ptr[c + 1] += col_ptr[c];
        }
        CscMatrix { n_rows, n_cols, col_ptr, row_idx, values }
    }

    pub fn matvec(&self, x: &[Real]) -> Vec<Real> {
        let mut y = vec![0.0; self.n_rows];
        for c in 0..self.n_cols {
            let xc = x[c];
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.values[k] * xc;
            }
        }
        y
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        for k in self.col_ptr[c]..self.col_ptr[c + 1] {
            if self.row_idx[k] == r {
                return self.values[k];
            }
        }
        0.0
    }

    pub fn row_sums(&self) -> Vec<Real> {
        let mut s = vec![0.0; self.n_rows];
        for c in 0..self.n_cols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                s[self.row_idx[k]] += self.values[k];
            }
        }
        s
    }
}

/// Reference global assembly via triplets: returns the full residual (rate + static),
/// the static tangent K and the damping matrix D, without boundary conditions. Used by
/// verification tests and the self-check command; the stepping loop uses the fused
/// scatter path below.
pub fn assemble_global(
    fe: &FeMesh,
    p: &ModelParams<Real>,
    q: &[Real],
    qdot: &[Real],
) -> Result<(Vec<Real>, CscMatrix, CscMatrix)> {
    let n = fe.dof.n_dofs();
    let mut residual = vec![0.0; n];
    let mut k_trips = Vec::with_capacity(fe.quads.len() * 256);
    let mut d_trips = Vec::with_capacity(fe.quads.len() * 64);
    for e in 0..fe.quads.len() {
        let st = gather_element_state(fe, q, Some(qdot), e);
        let sys = element_system(&fe.ops[e], &st, p)?;
        let dofs = fe.dof.element_dofs(&fe.quads[e]);
        for i in 0..16 {
            residual[dofs[i]] += sys.r[i];
            for j in 0..16 {
                if sys.k[i][j] != 0.0 {
                    k_trips.push((dofs[i], dofs[j], sys.k[i][j]));
                }
                if sys.d[i][j] != 0.0 {
                    d_trips.push((dofs[i], dofs[j], sys.d[i][j]));
                }
            }
        }
    }
    Ok((
        residual,
        CscMatrix::from_triplets(n, n, &k_trips),
        CscMatrix::from_triplets(n, n, &d_trips),
    ))
}

// ---------------------------------------------------------------------------
// fused fast path

const SKIP: u32 = u32::MAX;

/// Precomputed sparsity pattern, per-element scatter slots, and constrained-dof
/// bookkeeping for the stepping loop. Constrained rows and columns are dropped at
/// scatter time and replaced by an identity diagonal.
pub struct SystemPattern {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    /// 256 slots per element: value index for local (i, j), or SKIP.
    slots: Vec<u32>,
    /// (dof, value slot) of each constrained diagonal.
    diag_slots: Vec<(usize, u32)>,
}

impl SystemPattern {
    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn build(fe: &FeMesh, fixed: &[bool]) -> Result<Self> {
        let n = fe.dof.n_dofs();
        if fixed.len() != n {
            return Err(CoreError::Assembly("constraint mask length mismatch".into()));
        }
        // collect (row, col) pairs: all unconstrained element couplings + full diagonal
        let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(fe.quads.len() * 256 + n);
        for q in &fe.quads {
            let dofs = fe.dof.element_dofs(q);
            for &di in &dofs {
                if fixed[di] {
                    continue;
                }
                for &dj in &dofs {
                    if fixed[dj] {
                        continue;
                    }
                    pairs.push((dj as u32, di as u32)); // (col, row) for CSC order
                }
            }
        }
        for d in 0..n {
            pairs.push((d as u32, d as u32));
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(pairs.len());
        for &(c, r) in &pairs {
            col_ptr[c as usize + 1] += 1;
            row_idx.push(r as usize);
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }

        let find_slot = |r: usize, c: usize| -> u32 {
            let lo = col_ptr[c];
            let hi = col_ptr[c + 1];
            match row_idx[lo..hi].binary_search(&r) {
                Ok(k) => (lo + k) as u32,
                Err(_) => SKIP,
            }
        };

        let mut slots = vec![SKIP; fe.quads.len() * 256];
        for (e, q) in fe.quads.iter().enumerate() {
            let dofs = fe.dof.element_dofs(q);
            for i in 0..16 {
                if fixed[dofs[i]] {
                    continue;
                }
                for j in 0..16 {
                    if fixed[dofs[j]] {
                        continue;
                    }
                    slots[e * 256 + i * 16 + j] = find_slot(dofs[i], dofs[j]);
                }
            }
        }
        let diag_slots = (0..n)
            .filter(|&d| fixed[d])
            .map(|d| (d, find_slot(d, d)))
            .collect();
        Ok(SystemPattern { n, col_ptr, row_idx, slots, diag_slots })
    }
}

pub struct AssemblyStats {
    pub clamped_gauss_points: u64,
}

/// Assemble the Newton system matrix `fac * D + K` and the full residual in one pass.
/// Constrained rows/columns become identity rows with zero residual.
pub fn assemble_system(
    fe: &FeMesh,
    p: &ModelParams<Real>,
    q: &[Real],
    qdot: &[Real],
    fac: Real,
    pat: &SystemPattern,
    values: &mut [Real],
    residual: &mut [Real],
) -> Result<AssemblyStats> {
    debug_assert_eq!(values.len(), pat.nnz());
    debug_assert_eq!(residual.len(), pat.n);
    values.iter_mut().for_each(|v| *v = 0.0);
    residual.iter_mut().for_each(|v| *v = 0.0);
    let mut clamped = 0u64;
    for e in 0..fe.quads.len() {
        let st = gather_element_state(fe, q, Some(qdot), e);
        let sys = element_system(&fe.ops[e], &st, p)?;
        clamped += sys.clamped as u64;
        let dofs = fe.dof.element_dofs(&fe.quads[e]);
        let base = e * 256;
        for i in 0..16 {
            let slot_row = &pat.slots[base + i * 16..base + i * 16 + 16];
            for j in 0..16 {
                let s = slot_row[j];
                if s != SKIP {
                    values[s as usize] += sys.k[i][j] + fac * sys.d[i][j];
                }
            }
            residual[dofs[i]] += sys.r[i];
        }
    }
    for &(dof, slot) in &pat.diag_slots {
        values[slot as usize] = 1.0;
        residual[dof] = 0.0;
    }
    Ok(AssemblyStats { clamped_gauss_points: clamped })
}

/// Range of the degraded hydrostatic stress g(phi) sigma_p over all gauss points.
pub fn degraded_sigma_p_range(fe: &FeMesh, p: &ModelParams<Real>, q: &[Real]) -> Result<(Real, Real)> {
    let mut lo = Real::INFINITY;
    let mut hi = Real::NEG_INFINITY;
    for e in 0..fe.quads.len() {
        let st = gather_element_state(fe, q, None, e);
        for op in &fe.ops[e] {
            let v = gauss_degraded_sigma_p(op, &st, p)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok((lo, hi))
}

/// Nodal field of g(phi) sigma_p by lumped-mass averaging of the gauss values; the
/// area-weighted mean of the result equals the gauss-point mean exactly.
pub fn nodal_degraded_sigma_p(fe: &FeMesh, p: &ModelParams<Real>, q: &[Real]) -> Result<Vec<Real>> {
    let mut acc = vec![0.0; fe.coords.len()];
    for (e, quad) in fe.quads.iter().enumerate() {
        let st = gather_element_state(fe, q, None, e);
        for op in &fe.ops[e] {
            let v = gauss_degraded_sigma_p(op, &st, p)?;
            for (i, &node) in quad.iter().enumerate() {
                acc[node as usize] += v * op.det_j_w * op.n[i];
            }
        }
    }
    for (a, &m) in acc.iter_mut().zip(fe.lumped_area.iter()) {
        *a /= m;
    }
    Ok(acc)
}

fn gauss_degraded_sigma_p(
    op: &OperatorMatrices<Real>,
    st: &ElementState<Real>,
    p: &ModelParams<Real>,
) -> Result<Real> {
    let mut c_gp = 0.0;
    let mut phi_gp = 0.0;
    for i in 0..4 {
        c_gp += op.n[i] * st.c[i];
        phi_gp += op.n[i] * st.phi[i];
    }
    let mut eps = [0.0; 3];
    for r in 0..3 {
        for k in 0..8 {
            eps[r] += op.b_u[r][k] * st.u[k];
        }
    }
    let (moduli, _) = p.moduli_at(c_gp);
    let cm = coupling_matrices(moduli, p.omega, p.mode)?;
    let s = stress_of(&eps, c_gp, &cm);
    let (g, _, _) = degradation(phi_gp, p.eta);
    Ok(g * s.sigma_p)
}
