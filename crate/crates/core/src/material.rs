//! Constitutive layer: mixture moduli, crack degradation, chemo-elastic coupling
//! matrices in plane stress / plane strain, stress evaluation and the crack driving
//! energies.
//!
//! Every function here is a pure formula and therefore unit-agnostic: feed SI values and
//! get SI back, or feed the solver's internal scaled units. The only requirement is that
//! all arguments share one consistent system.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneMode {
    Stress,
    Strain,
}

/// Crack formulation selector: the isotropic model degrades and drives with the full
/// elastic energy; the hybrid model keeps the momentum balance isotropic but drives the
/// crack with the tensile part only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    Isotropic,
    Hybrid,
}

#[derive(Debug, Clone, Copy)]
pub struct Moduli<T> {
    pub e: T,
    pub nu: T,
}

/// Endpoints of the linear rule of mixtures between the pristine and fully lithiated
/// phases, plus the saturation concentration that parameterizes it.
#[derive(Debug, Clone, Copy)]
pub struct MixtureEndpoints<T> {
    pub e_a: T,
    pub nu_a: T,
    pub e_b: T,
    pub nu_b: T,
    pub c_max: T,
}

/// Full physical parameter set in SI units. Defaults are the silicon-nanowire values
/// used throughout: mechanical endpoints of the mixture rule, transport constants, and
/// the fracture pair (G_cr, l0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    /// Young's moduli of the pristine and saturated phases, Pa.
    pub e_si: Real,
    pub e_lisi: Real,
    pub nu_si: Real,
    pub nu_lisi: Real,
    /// Partial molar volume, m^3/mol.
    pub omega: Real,
    /// Molecular mobility, m^2/(J s).
    pub mobility: Real,
    /// Boltzmann constant, J/K.
    pub k_b: Real,
    /// Absolute temperature, K.
    pub temperature: Real,
    /// Avogadro's number, 1/mol.
    pub n_a: Real,
    /// Saturation concentration, mol/m^3.
    pub c_max: Real,
    /// Crack relaxation constant, m^3/(J s).
    pub chi: Real,
    /// Critical energy release rate, N/m.
    pub g_cr: Real,
    /// Crack regularization length, m.
    pub l0: Real,
    /// Residual stiffness of the degradation function.
    pub eta: Real,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            e_si: 80e9,
            e_lisi: 41e9,
            nu_si: 0.22,
            nu_lisi: 0.24,
            omega: 8.5e-6,
            mobility: 500.0,
            k_b: 1.38e-23,
            temperature: 298.15,
            n_a: 6.02e23,
            c_max: 88.67e3,
            chi: 1.25e-10,
            g_cr: 7.0,
            l0: 10e-9,
            eta: 1e-3,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, Real); 10] = [
            ("E_si", self.e_si),
            ("E_lisi", self.e_lisi),
            ("omega", self.omega),
            ("mobility", self.mobility),
            ("k_B", self.k_b),
            ("T", self.temperature),
            ("N_A", self.n_a),
            ("c_max", self.c_max),
            ("chi", self.chi),
            ("G_cr", self.g_cr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CoreError::Material(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.l0 > 0.0) || !self.l0.is_finite() {
            return Err(CoreError::Material(format!("l0 must be positive, got {}", self.l0)));
        }
        for (name, nu) in [("nu_si", self.nu_si), ("nu_lisi", self.nu_lisi)] {
            if !(nu > 0.0 && nu < 0.5) {
                return Err(CoreError::Material(format!("{name} must lie in (0, 0.5), got {nu}")));
            }
        }
        if !(self.eta > 0.0 && self.eta <= 0.01) {
            return Err(CoreError::Material(format!(
                "eta must lie in (0, 0.01], got {}",
                self.eta
            )));
        }
        Ok(())
    }

    /// Mixture-rule endpoints in SI.
    pub fn mixture(&self) -> MixtureEndpoints<Real> {
        MixtureEndpoints {
            e_a: self.e_si,
            nu_a: self.nu_si,
            e_b: self.e_lisi,
            nu_b: self.nu_lisi,
            c_max: self.c_max,
        }
    }
}

/// Moduli at concentration `c`, linearly interpolated from the `a` endpoint (c = 0) to
/// the `b` endpoint (c = c_max). `c` outside [0, c_max] is clamped; the returned flag
/// reports that so callers can count and log instead of silently clipping.
pub fn moduli_of_concentration<T: Scalar>(c: T, mix: &MixtureEndpoints<T>) -> (Moduli<T>, bool) {
    let mut clamped = false;
    let mut cc = c;
    if cc < T::zero() {
        cc = T::zero();
        clamped = true;
    } else if cc > mix.c_max {
        cc = mix.c_max;
        clamped = true;
    }
    let frac_a = T::one() - cc / mix.c_max;
    let e = mix.e_b + frac_a * (mix.e_a - mix.e_b);
    let nu = mix.nu_b + frac_a * (mix.nu_a - mix.nu_b);
    (Moduli { e, nu }, clamped)
}

/// Quartic degradation g(phi) = 4 phi^3 - 3 phi^4 + eta and its first two derivatives.
/// phi is clamped to [0,1] before evaluation.
pub fn degradation<T: Scalar>(phi: T, eta: T) -> (T, T, T) {
    let p = phi.max(T::zero()).min(T::one());
    let p2 = p * p;
    let p3 = p2 * p;
    let g = T::lit(4.0) * p3 - T::lit(3.0) * p3 * p + eta;
    let dg = T::lit(12.0) * p2 * (T::one() - p);
    let ddg = T::lit(24.0) * p - T::lit(36.0) * p2;
    (g, dg, ddg)
}

/// Plane-reduced coupling matrices of the chemo-elastic constitutive law
///   sigma = D1 eps + D2 c,        sigma_p = (D3^T eps + D4 c) / 3.
///
/// `d3_star_factor` reproduces D3 applied to the stacked second gradients
/// (u_x,xx ; u_y,yx ; u_x,xy ; u_y,yy): rows are factor * [1,1,0,0] and factor * [0,0,1,1].
/// `chem_strain_coeff` is the effective in-plane stress-free strain per unit
/// concentration, defined through D1^-1 D2 so that sigma = D1 (eps - chem_strain_coeff *
/// c * [1,1,0]) holds exactly in both plane modes.
#[derive(Debug, Clone, Copy)]
pub struct CouplingMatrices<T> {
    pub d1: [[T; 3]; 3],
    pub d2: [T; 3],
    pub d3: [T; 3],
    pub d4: T,
    pub d3_star_factor: T,
    pub chem_strain_coeff: T,
    pub e: T,
    pub nu: T,
}

pub fn coupling_matrices<T: Scalar>(
    moduli: Moduli<T>,
    omega: T,
    mode: PlaneMode,
) -> Result<CouplingMatrices<T>> {
    let (e, nu) = (moduli.e, moduli.nu);
    if !(e > T::zero()) {
        return Err(CoreError::Material(format!("non-positive Young's modulus {e}")));
    }
    let half = T::lit(0.5);
    let one = T::one();
    let three = T::lit(3.0);
    match mode {
        PlaneMode::Stress => {
            let denom = one - nu * nu;
            if denom <= T::zero() {
                return Err(CoreError::Material(format!("invalid Poisson ratio {nu} for plane stress")));
            }
            let f = e / denom;
            let d1 = [
                [f, f * nu, T::zero()],
                [f * nu, f, T::zero()],
                [T::zero(), T::zero(), f * (one - nu) * half],
            ];
            let s = e / (one - nu);
            let d2c = -e * omega / (three * (one - nu));
            Ok(CouplingMatrices {
                d1,
                d2: [d2c, d2c, T::zero()],
                d3: [s, s, T::zero()],
                d4: -T::lit(2.0) * e * omega / (three * (one - nu)),
                d3_star_factor: s,
                chem_strain_coeff: omega / three,
                e,
                nu,
            })
        }
        PlaneMode::Strain => {
            let om2 = one - nu - nu;
            if om2 <= T::lit(1e-9) {
                return Err(CoreError::Material(format!(
                    "Poisson ratio {nu} too close to 0.5 for plane strain"
                )));
            }
            let f = e / ((one + nu) * om2);
            let d1 = [
                [f * (one - nu), f * nu, T::zero()],
                [f * nu, f * (one - nu), T::zero()],
                [T::zero(), T::zero(), f * om2 * half],
            ];
            let s = e / om2;
            let d2c = -e * omega / (three * om2);
            Ok(CouplingMatrices {
                d1,
                d2: [d2c, d2c, T::zero()],
                d3: [s, s, T::zero()],
                d4: -e * omega / om2,
                d3_star_factor: s,
                chem_strain_coeff: (one + nu) * omega / three,
                e,
                nu,
            })
        }
    }
}

/// Stress and scalar measures at one material point.
#[derive(Debug, Clone, Copy)]
pub struct StressState<T> {
    /// Effective (undegraded) stress (sigma_xx, sigma_yy, sigma_xy).
    pub sigma: [T; 3],
    /// Effective hydrostatic stress.
    pub sigma_p: T,
    /// Elastic strain energy density, 1/2 sigma^T D1^-1 sigma, evaluated through the
    /// effective elastic strain so that stress-free swelling stores nothing.
    pub xi_u: T,
    /// Elastic strain (eps - chemical eigenstrain), engineering shear convention.
    pub eps_e: [T; 3],
}

pub fn stress_of<T: Scalar>(eps: &[T; 3], c: T, cm: &CouplingMatrices<T>) -> StressState<T> {
    let ec = cm.chem_strain_coeff * c;
    let eps_e = [eps[0] - ec, eps[1] - ec, eps[2]];
    let mut sigma = [T::zero(); 3];
    for r in 0..3 {
        for k in 0..3 {
            sigma[r] += cm.d1[r][k] * eps[k];
        }
        sigma[r] += cm.d2[r] * c;
    }
    let sigma_p = (cm.d3[0] * eps[0] + cm.d3[1] * eps[1] + cm.d3[2] * eps[2] + cm.d4 * c) / T::lit(3.0);
    let half = T::lit(0.5);
    let xi_u = half * (sigma[0] * eps_e[0] + sigma[1] * eps_e[1] + sigma[2] * eps_e[2]);
    StressState { sigma, sigma_p, xi_u, eps_e }
}

/// Largest principal value of a plane stress tensor together with the rotation vector
/// T_k such that sigma_1 = T_k . sigma, which is also d sigma_1 / d sigma.
///
/// The angle comes from tan(2 theta) = 2 sigma_xy / (sigma_xx - sigma_yy) via atan2, which
/// covers the equal-normal-stress case (theta = pi/4) without special-casing.
pub fn max_principal<T: Scalar>(sigma: &[T; 3]) -> (T, [T; 3]) {
    let two = T::lit(2.0);
    let theta = T::lit(0.5) * T::atan2(two * sigma[2], sigma[0] - sigma[1]);
    let (s, c) = (theta.sin(), theta.cos());
    let t1 = [c * c, s * s, two * s * c];
    let t2 = [s * s, c * c, -two * s * c];
    let v1 = t1[0] * sigma[0] + t1[1] * sigma[1] + t1[2] * sigma[2];
    let v2 = t2[0] * sigma[0] + t2[1] * sigma[1] + t2[2] * sigma[2];
    if v1 >= v2 {
        (v1, t1)
    } else {
        (v2, t2)
    }
}

/// Tensile crack driving energy <sigma_1>^2 / (2E) and its stress gradient.
pub fn tensile_energy<T: Scalar>(sigma: &[T; 3], e: T) -> (T, [T; 3]) {
    let (s1, t) = max_principal(sigma);
    if s1 <= T::zero() {
        return (T::zero(), [T::zero(); 3]);
    }
    let xi = s1 * s1 / (T::lit(2.0) * e);
    let f = s1 / e;
    (xi, [f * t[0], f * t[1], f * t[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn si_mixture() -> MixtureEndpoints<f64> {
        MixtureEndpoints {
            e_a: 80e9,
            nu_a: 0.22,
            e_b: 41e9,
            nu_b: 0.24,
            c_max: 88.67e3,
        }
    }

    #[test]
    fn moduli_interpolate_linearly() {
        let mix = si_mixture();
        let (m, clamped) = moduli_of_concentration(mix.c_max / 2.0, &mix);
        assert!(!clamped);
        assert_relative_eq!(m.e, 60.5e9, max_relative = 1e-12);
        assert_relative_eq!(m.nu, 0.23, max_relative = 1e-12);
        let (m0, _) = moduli_of_concentration(0.0, &mix);
        assert_relative_eq!(m0.e, 80e9);
        let (m1, _) = moduli_of_concentration(mix.c_max, &mix);
        assert_relative_eq!(m1.e, 41e9);
    }

    #[test]
    fn default_params_validate_and_match_mixture() {
        let p = MaterialParams::default();
        p.validate().unwrap();
        let mix = p.mixture();
        assert_relative_eq!(mix.e_a, 80e9);
        assert_relative_eq!(mix.c_max, 88.67e3);

        let bad = MaterialParams { g_cr: -1.0, ..Default::default() };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("G_cr"), "error must name the field: {err}");
        let bad_nu = MaterialParams { nu_si: 0.5, ..Default::default() };
        assert!(bad_nu.validate().is_err());
        let bad_eta = MaterialParams { eta: 0.5, ..Default::default() };
        assert!(bad_eta.validate().is_err());
    }

    #[test]
    fn moduli_clamp_is_reported() {
        let mix = si_mixture();
        let (m, clamped) = moduli_of_concentration(-5.0, &mix);
        assert!(clamped);
        assert_relative_eq!(m.e, 80e9);
        let (m, clamped) = moduli_of_concentration(1e6, &mix);
        assert!(clamped);
        assert_relative_eq!(m.e, 41e9);
    }

    #[test]
    fn degradation_reference_values() {
        let eta = 0.0;
        let (g, dg, ddg) = degradation(0.5, eta);
        assert_relative_eq!(g, 0.3125, max_relative = 1e-14);
        assert_relative_eq!(dg, 1.5, max_relative = 1e-14);
        assert_relative_eq!(ddg, 3.0, max_relative = 1e-14);
        let (g1, dg1, _) = degradation(1.0f64, 1e-3);
        assert_relative_eq!(g1, 1.0 + 1e-3, max_relative = 1e-14);
        assert!(dg1.abs() < 1e-14);
        let (g0, dg0, _) = degradation(0.0f64, 1e-3);
        assert_relative_eq!(g0, 1e-3, max_relative = 1e-14);
        assert!(dg0.abs() < 1e-14);
    }

    #[test]
    fn degradation_monotone_on_grid() {
        let eta = 1e-3;
        let mut prev = degradation(0.0f64, eta).0;
        let n = 1000;
        for i in 1..=n {
            let phi = i as f64 / n as f64;
            let g = degradation(phi, eta).0;
            assert!(g >= prev - 1e-15, "g not monotone at phi={phi}");
            prev = g;
        }
    }

    #[test]
    fn coupling_matrix_reference_values_plane_strain() {
        let cm = coupling_matrices(Moduli { e: 80e9, nu: 0.22 }, 8.5e-6, PlaneMode::Strain).unwrap();
        assert_relative_eq!(cm.d2[0], -4.047619047619047e5, max_relative = 1e-12);
        assert_relative_eq!(cm.d2[1], cm.d2[0]);
        assert_eq!(cm.d2[2], 0.0);
        assert_relative_eq!(cm.d4, -1.2142857142857143e6, max_relative = 1e-12);
        assert_relative_eq!(cm.d3[0], 80e9 / 0.56, max_relative = 1e-12);
    }

    #[test]
    fn coupling_matrix_reference_values_plane_stress() {
        let cm = coupling_matrices(Moduli { e: 80e9, nu: 0.22 }, 8.5e-6, PlaneMode::Stress).unwrap();
        assert_relative_eq!(cm.d2[0], -80e9 * 8.5e-6 / (3.0 * 0.78), max_relative = 1e-12);
        assert_relative_eq!(cm.d4, -2.0 * 80e9 * 8.5e-6 / (3.0 * 0.78), max_relative = 1e-12);
        assert_relative_eq!(cm.d3[0], 80e9 / 0.78, max_relative = 1e-12);
    }

    #[test]
    fn plane_strain_rejects_incompressible() {
        assert!(coupling_matrices(Moduli { e: 1.0, nu: 0.5 }, 0.0, PlaneMode::Strain).is_err());
    }

    #[test]
    fn uniaxial_strain_stress_value() {
        let cm = coupling_matrices(Moduli { e: 80e9, nu: 0.22 }, 8.5e-6, PlaneMode::Strain).unwrap();
        let st = stress_of(&[1e-3, 0.0, 0.0], 0.0, &cm);
        assert_relative_eq!(st.sigma[0], 9.1335e7, max_relative = 2e-5);
        assert_relative_eq!(st.sigma[1], st.sigma[0] * 0.22 / 0.78, max_relative = 1e-12);
        assert_eq!(st.sigma[2], 0.0);
    }

    /// sigma = D1 (eps - eps_c_eff) must hold exactly in both plane modes; that identity
    /// is what makes xi_u a true stress energy.
    #[test]
    fn effective_chemical_strain_reproduces_d2() {
        for mode in [PlaneMode::Strain, PlaneMode::Stress] {
            let cm = coupling_matrices(Moduli { e: 75e9, nu: 0.27 }, 8.5e-6, mode).unwrap();
            let c = 5.0e4;
            let ec = cm.chem_strain_coeff * c;
            // D1 * (-ec, -ec, 0) should equal D2 * c
            for r in 0..3 {
                let lhs = -(cm.d1[r][0] + cm.d1[r][1]) * ec;
                assert_relative_eq!(lhs, cm.d2[r] * c, max_relative = 1e-12, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn stress_free_swelling_stores_no_energy() {
        for mode in [PlaneMode::Strain, PlaneMode::Stress] {
            let cm = coupling_matrices(Moduli { e: 60e9, nu: 0.3 }, 8.5e-6, mode).unwrap();
            let c = 7.0e4_f64;
            let ec = cm.chem_strain_coeff * c;
            let st = stress_of(&[ec, ec, 0.0], c, &cm);
            assert!(st.sigma.iter().all(|s| s.abs() < 1e-3), "sigma = {:?}", st.sigma);
            assert!(st.xi_u.abs() < 1e-8);
        }
    }

    #[test]
    fn principal_stress_reference_and_degenerate_cases() {
        let (s1, t) = max_principal(&[3.0, 1.0, 2.0]);
        assert_relative_eq!(s1, 2.0 + 5.0f64.sqrt(), max_relative = 1e-14);
        // rotation vector reproduces the value
        assert_relative_eq!(t[0] * 3.0 + t[1] * 1.0 + t[2] * 2.0, s1, max_relative = 1e-14);
        // equal normal stresses: sigma_1 = sigma_xx + |sigma_xy|
        let (s1, _) = max_principal(&[2.0, 2.0, -0.7]);
        assert_relative_eq!(s1, 2.7, max_relative = 1e-14);
        let (s1, _) = max_principal(&[5.0, 5.0, 0.0]);
        assert_relative_eq!(s1, 5.0, max_relative = 1e-14);
    }

    #[test]
    fn tensile_energy_reference_value() {
        let (xi, grad) = tensile_energy(&[1e8, 0.0, 0.0], 80e9);
        assert_relative_eq!(xi, 6.25e4, max_relative = 1e-12);
        assert_relative_eq!(grad[0], 1e8 / 80e9, max_relative = 1e-12);
        let (xi, grad) = tensile_energy(&[-1e8, -2e7, 0.0], 80e9);
        assert_eq!(xi, 0.0);
        assert_eq!(grad, [0.0; 3]);
    }

    #[test]
    fn kernels_run_at_f32() {
        let (g, dg, _) = degradation(0.5f32, 1e-3);
        assert_relative_eq!(g, 0.3135f32, max_relative = 1e-5);
        assert_relative_eq!(dg, 1.5f32, max_relative = 1e-5);
        let cm = coupling_matrices(Moduli { e: 80.0f32, nu: 0.22 }, 8.5e-3, PlaneMode::Strain).unwrap();
        let st = stress_of(&[1e-3f32, 0.0, 0.0], 0.0, &cm);
        assert_relative_eq!(st.sigma[0], 0.091335f32, max_relative = 1e-4);
    }

    proptest! {
        /// sigma_1 from the rotation-angle route matches the 2x2 eigenvalue formula.
        #[test]
        fn principal_matches_eigen_oracle(sx in -1e9f64..1e9, sy in -1e9f64..1e9, sxy in -1e9f64..1e9) {
            let (s1, t) = max_principal(&[sx, sy, sxy]);
            let mean = 0.5 * (sx + sy);
            let rad = (0.25 * (sx - sy) * (sx - sy) + sxy * sxy).sqrt();
            let oracle = mean + rad;
            let scale = sx.abs().max(sy.abs()).max(sxy.abs()).max(1.0);
            prop_assert!((s1 - oracle).abs() <= 1e-10 * scale);
            prop_assert!((t[0] * sx + t[1] * sy + t[2] * sxy - s1).abs() <= 1e-10 * scale);
        }

        /// xi_u_plus is nonnegative and vanishes exactly when sigma_1 <= 0.
        #[test]
        fn tensile_energy_sign_property(sx in -5e9f64..5e9, sy in -5e9f64..5e9, sxy in -5e9f64..5e9) {
            let (s1, _) = max_principal(&[sx, sy, sxy]);
            let (xi, _) = tensile_energy(&[sx, sy, sxy], 80e9);
            prop_assert!(xi >= 0.0);
            prop_assert_eq!(xi == 0.0, s1 <= 0.0);
        }

        /// xi_u >= 0 for any strain/concentration state in both plane modes.
        #[test]
        fn strain_energy_nonnegative(
            e0 in -0.3f64..0.3, e1 in -0.3f64..0.3, e2 in -0.3f64..0.3,
            c in 0.0f64..88.67e3, strain_mode in proptest::bool::ANY,
        ) {
            let mode = if strain_mode { PlaneMode::Strain } else { PlaneMode::Stress };
            let cm = coupling_matrices(Moduli { e: 80e9, nu: 0.22 }, 8.5e-6, mode).unwrap();
            let st = stress_of(&[e0, e1, e2], c, &cm);
            prop_assert!(st.xi_u >= -1e-6);
        }
    }
}
