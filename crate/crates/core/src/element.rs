//! Bilinear quad element: shape functions, quadrature, operator matrices.
//!
//! Node order is counter-clockwise starting at the (-1,-1) corner of the reference
//! square. All operator matrices are evaluated per Gauss point in physical coordinates.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Reference-square corners, matching the connectivity convention.
const XI_SIGN: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];
const ETA_SIGN: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

/// Single quadrature point on the reference square.
#[derive(Debug, Clone, Copy)]
pub struct GaussPoint<T> {
    pub xi: T,
    pub eta: T,
    pub weight: T,
}

/// Tensor-product Gauss rule. Only order 2 (2x2, the rule used everywhere) is provided;
/// other orders are rejected rather than silently approximated.
pub fn gauss_rule<T: Scalar>(order: usize) -> Result<Vec<GaussPoint<T>>> {
    if order != 2 {
        return Err(CoreError::Element(format!(
            "unsupported quadrature order {order} (only 2 is implemented)"
        )));
    }
    let g = T::lit(1.0 / f64::sqrt(3.0));
    let w = T::one();
    let mut pts = Vec::with_capacity(4);
    for &eta in &[-g, g] {
        for &xi in &[-g, g] {
            pts.push(GaussPoint { xi, eta, weight: w * w });
        }
    }
    Ok(pts)
}

/// Shape functions and their reference-coordinate derivatives at (xi, eta).
#[derive(Debug, Clone)]
pub struct ShapeEval<T> {
    pub n: [T; 4],
    pub dn_dxi: [T; 4],
    pub dn_deta: [T; 4],
}

pub fn shape_eval<T: Scalar>(xi: T, eta: T) -> ShapeEval<T> {
    let quarter = T::lit(0.25);
    let mut n = [T::zero(); 4];
    let mut dxi = [T::zero(); 4];
    let mut deta = [T::zero(); 4];
    for i in 0..4 {
        let sx = T::lit(XI_SIGN[i]);
        let se = T::lit(ETA_SIGN[i]);
        n[i] = quarter * (T::one() + sx * xi) * (T::one() + se * eta);
        dxi[i] = quarter * sx * (T::one() + se * eta);
        deta[i] = quarter * se * (T::one() + sx * xi);
    }
    ShapeEval { n, dn_dxi: dxi, dn_deta: deta }
}

/// Physical-space operator matrices at one quadrature point.
///
/// `b_u` maps the 8 nodal displacements to (eps_xx, eps_yy, 2 eps_xy); `b_c` maps 4 nodal
/// scalars to their gradient (shared by c and phi); `b_u_star` maps displacements to the
/// stacked second gradients (u_x,xx ; u_y,yx ; u_x,xy ; u_y,yy) used by the stress-drift
/// flux term.
#[derive(Debug, Clone)]
pub struct OperatorMatrices<T> {
    pub n: [T; 4],
    pub b_u: [[T; 8]; 3],
    pub b_c: [[T; 4]; 2],
    pub b_u_star: [[T; 8]; 4],
    /// Integration factor: det(J) * weight (unit thickness).
    pub det_j_w: T,
}

/// Geometry of one quad: physical corner coordinates, node order as in connectivity.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry<T> {
    pub coords: [[T; 2]; 4],
}

impl<T: Scalar> ElementGeometry<T> {
    pub fn new(coords: [[T; 2]; 4]) -> Self {
        Self { coords }
    }

    /// Isoparametric map x(xi), evaluated for tests and point location.
    pub fn map(&self, xi: T, eta: T) -> [T; 2] {
        let sh = shape_eval(xi, eta);
        let mut x = [T::zero(); 2];
        for i in 0..4 {
            x[0] += sh.n[i] * self.coords[i][0];
            x[1] += sh.n[i] * self.coords[i][1];
        }
        x
    }

    /// Jacobian J[i][a] = d x_i / d xi_a.
    pub fn jacobian(&self, xi: T, eta: T) -> [[T; 2]; 2] {
        let sh = shape_eval(xi, eta);
        let mut j = [[T::zero(); 2]; 2];
        for i in 0..4 {
            j[0][0] += sh.dn_dxi[i] * self.coords[i][0];
            j[0][1] += sh.dn_deta[i] * self.coords[i][0];
            j[1][0] += sh.dn_dxi[i] * self.coords[i][1];
            j[1][1] += sh.dn_deta[i] * self.coords[i][1];
        }
        j
    }

    /// Operator matrices at a quadrature point. Errors on non-positive `det J`.
    pub fn operator_matrices(&self, gp: GaussPoint<T>) -> Result<OperatorMatrices<T>> {
        let sh = shape_eval(gp.xi, gp.eta);
        let j = self.jacobian(gp.xi, gp.eta);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !(det > T::zero()) || !det.is_finite() {
            return Err(CoreError::Element(format!(
                "non-positive jacobian determinant {det:?} at gauss point"
            )));
        }
        let inv_det = T::one() / det;
        // G[a][i] = d xi_a / d x_i.
        let g = [
            [j[1][1] * inv_det, -j[0][1] * inv_det],
            [-j[1][0] * inv_det, j[0][0] * inv_det],
        ];

        let mut dn_dx = [T::zero(); 4];
        let mut dn_dy = [T::zero(); 4];
        for i in 0..4 {
            dn_dx[i] = sh.dn_dxi[i] * g[0][0] + sh.dn_deta[i] * g[1][0];
            dn_dy[i] = sh.dn_dxi[i] * g[0][1] + sh.dn_deta[i] * g[1][1];
        }

        // Second derivatives of N in physical coordinates. For a bilinear quad the only
        // nonzero reference Hessian entry is the mixed one, d2N/dxi deta = s_I/4, and J
        // varies linearly: dJ/dxi has the column vector q in its eta-slot, dJ/deta in its
        // xi-slot, with q_i = 1/4 sum_I s_I X_i^I. Chain rule:
        //   N_,ij = sum_ab N_,ab G[a][i] G[b][j] + sum_a N_,a dG[a][i]/dx_j,
        //   dG/dx_j = -sum_g G (dJ/dxi_g) G * G[g][j].
        let quarter = T::lit(0.25);
        let mut q = [T::zero(); 2];
        for i in 0..4 {
            let s = T::lit(XI_SIGN[i] * ETA_SIGN[i]);
            q[0] += quarter * s * self.coords[i][0];
            q[1] += quarter * s * self.coords[i][1];
        }
        // dJ/dxi = [[0, q0], [0, q1]], dJ/deta = [[q0, 0], [q1, 0]].
        let dj = [
            [[T::zero(), q[0]], [T::zero(), q[1]]],
            [[q[0], T::zero()], [q[1], T::zero()]],
        ];
        // m[g] = G * dJ[g] * G
        let mut m = [[[T::zero(); 2]; 2]; 2];
        for gi in 0..2 {
            let mut tmp = [[T::zero(); 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    for k in 0..2 {
                        tmp[a][b] += g[a][k] * dj[gi][k][b];
                    }
                }
            }
            for a in 0..2 {
                for b in 0..2 {
                    for k in 0..2 {
                        m[gi][a][b] += tmp[a][k] * g[k][b];
                    }
                }
            }
        }
        // h[a][i][j] = dG[a][i]/dx_j
        let mut h = [[[T::zero(); 2]; 2]; 2];
        for a in 0..2 {
            for i in 0..2 {
                for jj in 0..2 {
                    let mut acc = T::zero();
                    for gi in 0..2 {
                        acc += m[gi][a][i] * g[gi][jj];
                    }
                    h[a][i][jj] = -acc;
                }
            }
        }

        let mut n_xx = [T::zero(); 4];
        let mut n_xy = [T::zero(); 4];
        let mut n_yy = [T::zero(); 4];
        for i in 0..4 {
            let s = T::lit(XI_SIGN[i] * ETA_SIGN[i]) * quarter;
            // sum_ab N_,ab G[a][i'] G[b][j'] with N_,12 = N_,21 = s
            let t1_xx = s * (g[0][0] * g[1][0] + g[1][0] * g[0][0]);
            let t1_xy = s * (g[0][0] * g[1][1] + g[1][0] * g[0][1]);
            let t1_yy = s * (g[0][1] * g[1][1] + g[1][1] * g[0][1]);
            let t2 = |ii: usize, jj: usize, sh: &ShapeEval<T>, idx: usize| {
                sh.dn_dxi[idx] * h[0][ii][jj] + sh.dn_deta[idx] * h[1][ii][jj]
            };
            n_xx[i] = t1_xx + t2(0, 0, &sh, i);
            n_xy[i] = t1_xy + t2(0, 1, &sh, i);
            n_yy[i] = t1_yy + t2(1, 1, &sh, i);
        }

        let mut b_u = [[T::zero(); 8]; 3];
        let mut b_c = [[T::zero(); 4]; 2];
        let mut b_star = [[T::zero(); 8]; 4];
        for i in 0..4 {
            b_u[0][2 * i] = dn_dx[i];
            b_u[1][2 * i + 1] = dn_dy[i];
            b_u[2][2 * i] = dn_dy[i];
            b_u[2][2 * i + 1] = dn_dx[i];

            b_c[0][i] = dn_dx[i];
            b_c[1][i] = dn_dy[i];

            b_star[0][2 * i] = n_xx[i];
            b_star[1][2 * i + 1] = n_xy[i];
            b_star[2][2 * i] = n_xy[i];
            b_star[3][2 * i + 1] = n_yy[i];
        }

        Ok(OperatorMatrices {
            n: sh.n,
            b_u,
            b_c,
            b_u_star: b_star,
            det_j_w: det * gp.weight,
        })
    }

    /// Inverse isoparametric map by Newton iteration; used by tests and sampling.
    pub fn inverse_map(&self, x: [T; 2]) -> Option<[T; 2]> {
        let mut xi = T::zero();
        let mut eta = T::zero();
        for _ in 0..30 {
            let pos = self.map(xi, eta);
            let rx = pos[0] - x[0];
            let ry = pos[1] - x[1];
            let j = self.jacobian(xi, eta);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det == T::zero() {
                return None;
            }
            let dxi = (j[1][1] * rx - j[0][1] * ry) / det;
            let deta = (-j[1][0] * rx + j[0][0] * ry) / det;
            xi = xi - dxi;
            eta = eta - deta;
            if dxi.abs() + deta.abs() < T::lit(1e-14) {
                return Some([xi, eta]);
            }
        }
        Some([xi, eta])
    }
}
