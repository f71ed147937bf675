//! Quantities of interest as space-time functionals of the transient
//! solution, and the right-hand-side vectors they contribute to the
//! adjoint system.
//!
//! The Joule-heat functional integrates sigma |E|^2 over the domain (or a
//! region subset) and over time with the right-endpoint rectangle rule that
//! matches implicit Euler. Point values are Dirac functionals realized as a
//! nodal injection at the nearest node of the containing triangle and the
//! nearest grid step, with weight 1/dt of the containing step so the time
//! quadrature integrates them back to the plain point value.

use crate::error::{CoreError, Result};
use crate::forward::{Discretization, Scenario, TransientSolution};
use crate::materials::ParamField;
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq)]
pub enum QoiKind {
    JouleHeat,
    PointTemperature { location: [f64; 2], time: f64 },
    PointPotential { location: [f64; 2], time: f64 },
}

#[derive(Debug, Clone)]
pub struct Qoi {
    pub name: String,
    pub kind: QoiKind,
    /// Region-tag restriction of the integral kinds; None = whole domain.
    pub regions: Option<Vec<i32>>,
}

impl Qoi {
    pub fn joule_heat(name: impl Into<String>, regions: Option<Vec<i32>>) -> Qoi {
        Qoi {
            name: name.into(),
            kind: QoiKind::JouleHeat,
            regions,
        }
    }

    /// Nearest node of the triangle containing the point.
    pub fn resolve_point(mesh: &Mesh, location: [f64; 2]) -> Result<u32> {
        let (t, bary) = mesh.locate(location).ok_or_else(|| {
            CoreError::Qoi(format!(
                "QoI location ({}, {}) is outside the mesh",
                location[0], location[1]
            ))
        })?;
        let imax = (0..3).max_by(|&a, &b| bary[a].total_cmp(&bary[b])).unwrap();
        Ok(mesh.triangles[t].nodes[imax])
    }

    fn check_time(&self, sol: &TransientSolution) -> Result<()> {
        if let QoiKind::PointTemperature { time, .. } | QoiKind::PointPotential { time, .. } =
            self.kind
        {
            let t0 = sol.grids.t_start;
            let t1 = sol.grids.t_el(sol.grids.n_el);
            if time < t0 - 1e-12 || time > t1 + 1e-12 {
                return Err(CoreError::Qoi(format!(
                    "QoI time {time} outside the simulated span [{t0}, {t1}]"
                )));
            }
        }
        Ok(())
    }

    /// Nearest electric step of a point-potential QoI.
    pub(crate) fn electric_step(&self, sol: &TransientSolution) -> Option<usize> {
        match self.kind {
            QoiKind::PointPotential { time, .. } => {
                let n = ((time - sol.grids.t_start) / sol.grids.dt_el).round() as usize;
                Some(n.min(sol.grids.n_el))
            }
            _ => None,
        }
    }

    /// Nearest thermal step of a point-temperature QoI.
    pub(crate) fn thermal_step(&self, sol: &TransientSolution) -> Option<usize> {
        match self.kind {
            QoiKind::PointTemperature { time, .. } => {
                let m = ((time - sol.grids.t_start) / sol.grids.dt_th()).round() as usize;
                Some(m.min(sol.grids.n_th()))
            }
            _ => None,
        }
    }

    pub(crate) fn element_mask(&self, disc: &Discretization) -> Option<Vec<bool>> {
        self.regions.as_ref().map(|r| disc.region_mask(r))
    }
}

/// Value of the functional on a stored solution.
pub fn evaluate_qoi(scenario: &Scenario, qoi: &Qoi, sol: &TransientSolution) -> Result<f64> {
    let disc = Discretization::new(scenario)?;
    evaluate_qoi_with(&disc, qoi, sol)
}

pub(crate) fn evaluate_qoi_with(
    disc: &Discretization,
    qoi: &Qoi,
    sol: &TransientSolution,
) -> Result<f64> {
    qoi.check_time(sol)?;
    match qoi.kind {
        QoiKind::JouleHeat => {
            let mask = qoi.element_mask(disc);
            let dt = sol.grids.dt_el;
            let mut total = 0.0;
            for n in 1..=sol.grids.n_el {
                let th = sol.theta_at_micro(n);
                let load = disc.joule_load_masked(&sol.u[n], &th, mask.as_deref())?;
                total += dt * load.iter().sum::<f64>();
            }
            Ok(total)
        }
        QoiKind::PointTemperature { location, .. } => {
            let node = Qoi::resolve_point(disc.mesh, location)?;
            let m = qoi.thermal_step(sol).unwrap();
            Ok(sol.v[m][node as usize])
        }
        QoiKind::PointPotential { location, .. } => {
            let node = Qoi::resolve_point(disc.mesh, location)?;
            let n = qoi.electric_step(sol).unwrap();
            Ok(sol.u[n][node as usize])
        }
    }
}

/// QoI-dependent adjoint sources at electric step n:
/// x_el = dg/du_n and the temperature-gradient density s_th = dg/dtheta_n
/// (distributed onto the thermal grid by the time-interpolation weights).
/// For the Joule functional x_el = (K_sigma + K_{sigma_d}) u on the QoI
/// elements.
pub(crate) fn electric_rhs(
    disc: &Discretization,
    qoi: &Qoi,
    sol: &TransientSolution,
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nn = disc.n();
    match qoi.kind {
        QoiKind::JouleHeat => {
            let mask = qoi.element_mask(disc);
            let th = sol.theta_at_micro(n);
            let u = &sol.u[n];
            let k_s = disc.k_sigma_masked(u, &th, mask.as_deref())?;
            let k_sd = disc.k_sigma_d_masked(u, &th, mask.as_deref())?;
            let mut x_el = k_s.mul_vec(u);
            let x2 = k_sd.mul_vec(u);
            for i in 0..nn {
                x_el[i] += x2[i];
            }
            // mass row sums give int (dsigma/dtheta) E^2 N_r dOmega
            let s_th = disc
                .m_dsig_dth_e2(u, &th, mask.as_deref())?
                .mul_vec(&vec![1.0; nn]);
            Ok((x_el, s_th))
        }
        QoiKind::PointPotential { location, .. } => {
            let mut x_el = vec![0.0; nn];
            if qoi.electric_step(sol) == Some(n) {
                let node = Qoi::resolve_point(disc.mesh, location)?;
                x_el[node as usize] = 1.0 / sol.grids.dt_el;
            }
            Ok((x_el, vec![0.0; nn]))
        }
        QoiKind::PointTemperature { .. } => Ok((vec![0.0; nn], vec![0.0; nn])),
    }
}

/// Direct thermal-grid adjoint source at thermal step m (point-temperature
/// injection, weight 1/dt_th).
pub(crate) fn thermal_rhs(
    disc: &Discretization,
    qoi: &Qoi,
    sol: &TransientSolution,
    m: usize,
) -> Result<Vec<f64>> {
    let mut x_th = vec![0.0; disc.n()];
    if let QoiKind::PointTemperature { location, .. } = qoi.kind {
        if qoi.thermal_step(sol) == Some(m) {
            let node = Qoi::resolve_point(disc.mesh, location)?;
            x_th[node as usize] = 1.0 / sol.grids.dt_th();
        }
    }
    Ok(x_th)
}

/// Public wrapper for the adjoint sources at one electric step.
pub fn qoi_rhs(
    scenario: &Scenario,
    qoi: &Qoi,
    sol: &TransientSolution,
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let disc = Discretization::new(scenario)?;
    qoi.check_time(sol)?;
    electric_rhs(&disc, qoi, sol, n)
}

/// Explicit parameter derivative of the functional at frozen fields,
/// integrated over time: for the Joule functional
/// sum_n dt int (dsigma/dp) |E_n|^2 dOmega over the QoI elements.
pub fn qoi_partial_p(
    scenario: &Scenario,
    qoi: &Qoi,
    sol: &TransientSolution,
    region: i32,
    field: ParamField,
) -> Result<f64> {
    let disc = Discretization::new(scenario)?;
    qoi_partial_p_with(&disc, qoi, sol, region, field)
}

pub(crate) fn qoi_partial_p_with(
    disc: &Discretization,
    qoi: &Qoi,
    sol: &TransientSolution,
    region: i32,
    field: ParamField,
) -> Result<f64> {
    match qoi.kind {
        QoiKind::JouleHeat => {
            let mask = qoi.element_mask(disc);
            let dt = sol.grids.dt_el;
            let mut total = 0.0;
            for n in 1..=sol.grids.n_el {
                let th = sol.theta_at_micro(n);
                let s = disc.s_dsigma_dp_e2(&sol.u[n], &th, region, field, mask.as_deref())?;
                total += dt * s.iter().sum::<f64>();
            }
            Ok(total)
        }
        _ => Ok(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::test_fixtures::{annulus_scenario, grading_impulse};
    use crate::forward::{solve_transient, TimeConfig, Waveform};
    use crate::materials::{FgmParams, SigmaLaw};
    use approx::assert_relative_eq;

    fn dc_time() -> TimeConfig {
        TimeConfig {
            t_start: 0.0,
            t_end: 1.0,
            dt_el_max: 0.25,
            dt_th_max: 0.5,
        }
    }

    #[test]
    fn zero_excitation_gives_zero_joule_heat() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(0.0),
            dc_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let g = evaluate_qoi(&sc, &q, &sol).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn coaxial_dc_joule_heat_matches_analytic() {
        let u = 100.0;
        let sc = annulus_scenario(
            0.0005,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(u),
            dc_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let g = evaluate_qoi(&sc, &q, &sol).unwrap();
        // G = T U^2 2 pi L sigma / ln(ro/ri), T = 1 s
        let exact = 1.0 * u * u * 2.0 * std::f64::consts::PI * 0.01 * 1e-10 / 2.0f64.ln();
        assert_relative_eq!(g, exact, max_relative = 2e-3);
    }

    #[test]
    fn point_temperature_at_dirichlet_node_returns_boundary_value() {
        let mut sc = annulus_scenario(
            0.002,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(10.0),
            dc_time(),
        );
        sc.thermal_bc[0].theta = 338.15;
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi {
            name: "tpoint".into(),
            kind: QoiKind::PointTemperature {
                location: [0.01, 0.005],
                time: 1.0,
            },
            regions: None,
        };
        let g = evaluate_qoi(&sc, &q, &sol).unwrap();
        assert_relative_eq!(g, 338.15, max_relative = 1e-12);
    }

    #[test]
    fn point_outside_mesh_is_an_error() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(10.0),
            dc_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi {
            name: "bad".into(),
            kind: QoiKind::PointTemperature {
                location: [0.5, 0.5],
                time: 1.0,
            },
            regions: None,
        };
        let err = evaluate_qoi(&sc, &q, &sol).unwrap_err();
        assert!(err.to_string().contains("outside the mesh"));
    }

    #[test]
    fn linear_material_x_el_is_twice_k_sigma_u() {
        let sc = annulus_scenario(
            0.001,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(50.0),
            dc_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let n = sol.grids.n_el;
        let (x_el, x_th) = qoi_rhs(&sc, &q, &sol, n).unwrap();
        let disc = Discretization::new(&sc).unwrap();
        let th = sol.theta_at_micro(n);
        let k = disc.k_sigma(&sol.u[n], &th).unwrap();
        let ku = k.mul_vec(&sol.u[n]);
        for i in 0..x_el.len() {
            assert_relative_eq!(x_el[i], 2.0 * ku[i], max_relative = 1e-13, epsilon = 1e-300);
        }
        // temperature-independent sigma: no thermal source
        assert!(x_th.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn euler_identity_for_linear_materials() {
        // sum_r x_el,r u_r = 2 * u^T K_sigma u (instantaneous Joule power)
        let sc = annulus_scenario(
            0.001,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(80.0),
            dc_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let n = 2;
        let (x_el, _) = qoi_rhs(&sc, &q, &sol, n).unwrap();
        let disc = Discretization::new(&sc).unwrap();
        let th = sol.theta_at_micro(n);
        let k = disc.k_sigma(&sol.u[n], &th).unwrap();
        let lhs: f64 = x_el.iter().zip(&sol.u[n]).map(|(a, b)| a * b).sum();
        let rhs = 2.0 * k.quadratic_form(&sol.u[n], &sol.u[n]);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn x_el_is_the_directional_derivative_of_the_joule_integrand() {
        // Perturbing one nodal potential by delta changes the instantaneous
        // Joule integral by x_el[j] * delta + O(delta^2); Richardson check.
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Fgm(FgmParams::reference()),
            grading_impulse(),
            TimeConfig {
                t_start: 0.0,
                t_end: 1e-3,
                dt_el_max: 0.25e-3,
                dt_th_max: 0.5e-3,
            },
        );
        let sol = solve_transient(&sc).unwrap();
        let disc = Discretization::new(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let n = sol.grids.n_el;
        let (x_el, _) = qoi_rhs(&sc, &q, &sol, n).unwrap();
        let th = sol.theta_at_micro(n);

        let instantaneous =
            |u: &[f64]| -> f64 { disc.joule_load(u, &th).unwrap().iter().sum::<f64>() };
        let j = (0..disc.n())
            .max_by(|&a, &b| x_el[a].abs().total_cmp(&x_el[b].abs()))
            .unwrap();
        let base = sol.u[n].clone();
        let scale = base.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
        let fd = |delta: f64| -> f64 {
            let mut up = base.clone();
            up[j] += delta;
            let mut dn = base.clone();
            dn[j] -= delta;
            (instantaneous(&up) - instantaneous(&dn)) / (2.0 * delta)
        };
        let d1 = fd(1e-5 * scale);
        let d2 = fd(5e-6 * scale);
        assert_relative_eq!(d1, x_el[j], max_relative = 1e-6);
        let e1 = (d1 - x_el[j]).abs();
        let e2 = (d2 - x_el[j]).abs();
        assert!(e2 <= e1 * 0.5 + 1e-13 * x_el[j].abs(), "e1={e1:e}, e2={e2:e}");
    }

    #[test]
    fn partial_p_of_foreign_region_is_zero() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Fgm(FgmParams::reference()),
            Waveform::Constant(10e3),
            dc_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        // region tag 999 does not exist -> derivative is exactly zero
        let dp = qoi_partial_p(&sc, &q, &sol, 999, ParamField::FgmP1).unwrap();
        assert_eq!(dp, 0.0);
    }

    #[test]
    fn homogeneous_resistor_explicit_part_is_g_over_sigma() {
        let sigma = 1e-10;
        let sc = annulus_scenario(
            0.0008,
            SigmaLaw::Constant(sigma),
            Waveform::Constant(100.0),
            dc_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let g = evaluate_qoi(&sc, &q, &sol).unwrap();
        let region = sc.mesh.region_tag("bulk").unwrap();
        let dp = qoi_partial_p(&sc, &q, &sol, region, ParamField::Sigma).unwrap();
        assert_relative_eq!(dp, g / sigma, max_relative = 1e-12);
    }

    #[test]
    fn fgm_explicit_part_matches_frozen_field_finite_differences() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Fgm(FgmParams::reference()),
            grading_impulse(),
            TimeConfig {
                t_start: 0.0,
                t_end: 1e-3,
                dt_el_max: 0.25e-3,
                dt_th_max: 0.5e-3,
            },
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let region = sc.mesh.region_tag("bulk").unwrap();

        // frozen-field FD: re-evaluate the functional on the same stored
        // trajectory with perturbed parameters
        let eval_frozen = |p2: f64| -> f64 {
            let mut sc2 = sc.clone();
            if let Some(mat) = sc2.materials.regions.get_mut(&region) {
                if let SigmaLaw::Fgm(p) = &mut mat.sigma {
                    p.p2 = p2;
                }
            }
            evaluate_qoi(&sc2, &q, &sol).unwrap()
        };
        let p2 = FgmParams::reference().p2;
        let h = 1e-6 * p2;
        let fd = (eval_frozen(p2 + h) - eval_frozen(p2 - h)) / (2.0 * h);
        let dp = qoi_partial_p(&sc, &q, &sol, region, ParamField::FgmP2).unwrap();
        assert_relative_eq!(dp, fd, max_relative = 1e-6);
    }

    #[test]
    fn region_mask_restricts_the_functional() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(100.0),
            dc_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let region = sc.mesh.region_tag("bulk").unwrap();
        let whole = evaluate_qoi(&sc, &Qoi::joule_heat("g", None), &sol).unwrap();
        let masked = evaluate_qoi(&sc, &Qoi::joule_heat("g", Some(vec![region])), &sol).unwrap();
        assert_relative_eq!(whole, masked, max_relative = 1e-15);
        let empty = evaluate_qoi(&sc, &Qoi::joule_heat("g", Some(vec![999])), &sol).unwrap();
        assert_eq!(empty, 0.0);
    }
}
