//! Backward-in-time adjoint solver for the coupled EQST system.
//!
//! The adjoint is built by the discretize-then-optimize route: the backward
//! step operators are the exact transposes of the forward linearization
//! blocks at the stored trajectory, so the adjoint sensitivity equals the
//! direct-sensitivity value of the same fully discrete system to solver
//! precision. With w_el and w_th the adjoint trajectories stored on the
//! forward grids (terminal values zero), one electric step inside macro
//! step m reads
//!
//!   (K_{sigma_d} + K_eps/dt) w_el(t_{n-1}) = x_el,n
//!       + (K_eps/dt) w_el(t_n) - A^T_{J+sigma_d E} w_th(t_{m-1})
//!
//! and the thermal macro equation collects the transposed coupling blocks
//! of every micro step weighted by the time-interpolation coefficients.
//! The electro-thermal coupling is resolved by successive substitution per
//! macro step, mirroring the forward solver. All operators are evaluated
//! at the nominal trajectory.

use crate::assembly::{apply_dirichlet, SparseOperator};
use crate::error::{CoreError, Result};
use crate::forward::{Discretization, Scenario, TransientSolution};
use crate::linalg::{norm2, SpdSolver};
use crate::qoi::{electric_rhs, thermal_rhs, Qoi};

/// Adjoint trajectories on the forward grids. `w_el[n]` lives at electric
/// grid point t_n, `w_th[m]` at thermal grid point t_m; the terminal
/// entries are exactly zero, and Dirichlet-tagged rows are exactly zero at
/// all times.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub qoi: Qoi,
    pub w_el: Vec<Vec<f64>>,
    pub w_th: Vec<Vec<f64>>,
}

/// Assembled operator bundle of one backward electric step: the forward
/// linearization blocks at the stored step n, which the adjoint consumes
/// transposed.
pub struct AdjointStepOperators {
    /// d(electric residual)/d(u_n) = K_{sigma_d} + K_eps/dt; symmetric.
    pub j_el: SparseOperator,
    /// A_{J+sigma_d E}: d(-Joule load)/d(u_n); rows thermal, cols electric.
    pub a_j_sigd_e: SparseOperator,
    /// d(electric residual)/d(theta_n); rows electric, cols thermal.
    pub j_el_th: SparseOperator,
    /// M_{dsigma/dtheta E^2}: d(Joule load)/d(theta_n); symmetric.
    pub m_dsig_dth_e2: SparseOperator,
    /// Thermal diagonal block M_cv/dt_th + K_lambda; symmetric.
    pub j_th: SparseOperator,
}

/// Forward-linearization blocks at stored electric step n.
pub fn adjoint_step_operators(
    scenario: &Scenario,
    sol: &TransientSolution,
    n: usize,
) -> Result<AdjointStepOperators> {
    let disc = Discretization::new(scenario)?;
    step_operators(&disc, sol, n)
}

pub(crate) fn step_operators(
    disc: &Discretization,
    sol: &TransientSolution,
    n: usize,
) -> Result<AdjointStepOperators> {
    let th = sol.theta_at_micro(n);
    let u = &sol.u[n];
    let dt = sol.grids.dt_el;
    let j_el = disc.k_sigma_d(u, &th)?.add_scaled(&disc.k_eps, 1.0 / dt);
    Ok(AdjointStepOperators {
        j_el,
        a_j_sigd_e: disc.a_j_sigd_e(u, &th)?,
        j_el_th: disc.j_el_th(u, &th)?,
        m_dsig_dth_e2: disc.m_dsig_dth_e2(u, &th, None)?,
        j_th: disc
            .k_lambda
            .add_scaled(&disc.m_cv, 1.0 / sol.grids.dt_th()),
    })
}

/// Per-micro-step data cached while a macro step is being solved.
struct ElStep {
    ops: AdjointStepOperators,
    solver: SpdSolver,
    x_el: Vec<f64>,
    s_th: Vec<f64>,
    /// Interpolation weight of the macro-right temperature.
    alpha: f64,
}

/// Solve the coupled adjoint system backward from t_f with homogeneous
/// terminal conditions, for one quantity of interest.
pub fn solve_adjoint(
    scenario: &Scenario,
    sol: &TransientSolution,
    qoi: &Qoi,
) -> Result<AdjointSolution> {
    let disc = Discretization::new(scenario)?;
    solve_adjoint_with(&disc, scenario, sol, qoi, 1.0)
}

/// Internal variant with a source scaling (the adjoint is linear in the
/// QoI sources; tests use the scaling to check it).
pub(crate) fn solve_adjoint_with(
    disc: &Discretization,
    scenario: &Scenario,
    sol: &TransientSolution,
    qoi: &Qoi,
    source_scale: f64,
) -> Result<AdjointSolution> {
    let g = sol.grids;
    let n_dof = disc.n();
    let ratio = g.ratio;
    let cfg = &scenario.solver;
    let el_bc = disc.electric_bc_homogeneous();
    let th_bc = disc.th_bc.homogeneous();

    let mut w_el = vec![vec![0.0; n_dof]; g.n_el + 1];
    let mut w_th = vec![vec![0.0; n_dof]; g.n_th() + 1];

    // Thermal matrix is constant; factor once.
    let th_matrix = disc.k_lambda.add_scaled(&disc.m_cv, 1.0 / g.dt_th());
    let th_solver = SpdSolver::factor(&th_matrix, &th_bc.free_mask())?;

    // Carry from the already-solved macro step m+1 into the thermal
    // equation of macro step m: (1/R) sum_{n in m+1} beta_n
    // [s_th,n + M^n w_th(t_m) - (J_el_th^n)^T w_el(t_{n-1})].
    let mut carry = vec![0.0; n_dof];

    for m in (1..=g.n_th()).rev() {
        // Per-micro-step operators depend only on the stored trajectory;
        // assemble and factor them once per macro step.
        let mut steps: Vec<ElStep> = Vec::with_capacity(ratio);
        for k in 1..=ratio {
            let n = (m - 1) * ratio + k;
            let ops = step_operators(disc, sol, n)?;
            let solver = SpdSolver::factor(&ops.j_el, &el_bc.free_mask())?;
            let (mut x_el, mut s_th) = electric_rhs(disc, qoi, sol, n)?;
            for v in x_el.iter_mut().chain(s_th.iter_mut()) {
                *v *= source_scale;
            }
            steps.push(ElStep {
                ops,
                solver,
                x_el,
                s_th,
                alpha: k as f64 / ratio as f64,
            });
        }
        let mut x_th_direct = thermal_rhs(disc, qoi, sol, m)?;
        for v in x_th_direct.iter_mut() {
            *v *= source_scale;
        }

        let mut w_th_m = vec![0.0; n_dof]; // iterate for w_th(t_{m-1})
        let mut converged = false;
        let mut prev_update = f64::INFINITY;
        let mut last_update = f64::NAN;

        for _couple in 0..cfg.max_couple.max(200) {
            // Backward electric sweep through the macro step.
            for k in (1..=ratio).rev() {
                let n = (m - 1) * ratio + k;
                let step = &steps[k - 1];
                // rhs = x_el + K_eps/dt w_el(t_n) - A^T w_th(t_{m-1})
                let mut rhs = step.x_el.clone();
                let cap = disc.k_eps.mul_vec(&w_el[n]);
                let coup = step.ops.a_j_sigd_e.mul_vec_transpose(&w_th_m);
                for i in 0..n_dof {
                    rhs[i] += cap[i] / g.dt_el - coup[i];
                }
                let sys = apply_dirichlet(&step.ops.j_el, &rhs, &el_bc);
                w_el[n - 1] = sys.solve_with(&step.solver);
            }

            // Thermal solve for w_th(t_{m-1}).
            let mut rhs = x_th_direct.clone();
            let hist = disc.m_cv.mul_vec(&w_th[m]);
            for i in 0..n_dof {
                rhs[i] += hist[i] / g.dt_th() + carry[i];
            }
            for k in 1..=ratio {
                let n = (m - 1) * ratio + k;
                let step = &steps[k - 1];
                let scale = step.alpha / ratio as f64;
                let jt = step.ops.j_el_th.mul_vec_transpose(&w_el[n - 1]);
                let diag = step.ops.m_dsig_dth_e2.mul_vec(&w_th_m);
                for i in 0..n_dof {
                    rhs[i] += scale * (step.s_th[i] + diag[i] - jt[i]);
                }
            }
            let sys = apply_dirichlet(&th_matrix, &rhs, &th_bc);
            let w_new = sys.solve_with(&th_solver);

            let mut diff = 0.0;
            let mut mag = 0.0f64;
            for i in 0..n_dof {
                diff += (w_new[i] - w_th_m[i]).powi(2);
                mag += w_new[i].powi(2);
            }
            let update = diff.sqrt();
            let scale = mag.sqrt().max(1e-300);
            last_update = update / scale;
            if std::env::var("EQST_DEBUG_ADJ").is_ok() {
                eprintln!(
                    "macro {m} couple {_couple}: rel update {:.3e}  |w_th|={:.3e} |w_el[lo]|={:.3e}",
                    update / scale,
                    mag.sqrt(),
                    norm2(&w_el[(m - 1) * ratio])
                );
            }
            w_th_m = w_new;
            // Stop at the tolerance or at the linear-solver roundoff floor
            // (update well converged but no longer contracting).
            let at_floor =
                update >= 0.5 * prev_update && update <= cfg.tol_couple_lin.sqrt() * scale;
            if update <= cfg.tol_couple_lin * scale || update == 0.0 || at_floor {
                converged = true;
                break;
            }
            prev_update = update;
        }
        if !converged {
            return Err(CoreError::CouplingDiverged {
                macro_step: m,
                update: last_update,
                tol: cfg.tol_couple_lin,
            });
        }
        w_th[m - 1] = w_th_m;

        // Carry the beta-weighted coupling of this macro step's micro steps
        // into the next (earlier) thermal equation.
        carry = vec![0.0; n_dof];
        for k in 1..=ratio {
            let n = (m - 1) * ratio + k;
            let step = &steps[k - 1];
            let beta = 1.0 - step.alpha;
            if beta == 0.0 {
                continue;
            }
            let scale = beta / ratio as f64;
            let jt = step.ops.j_el_th.mul_vec_transpose(&w_el[n - 1]);
            let diag = step.ops.m_dsig_dth_e2.mul_vec(&w_th[m - 1]);
            for i in 0..n_dof {
                carry[i] += scale * (step.s_th[i] + diag[i] - jt[i]);
            }
        }
    }

    Ok(AdjointSolution {
        qoi: qoi.clone(),
        w_el,
        w_th,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::test_fixtures::{annulus_scenario, grading_impulse};
    use crate::forward::{solve_transient, TimeConfig, Waveform};
    use crate::materials::{FgmParams, SigmaLaw};
    use crate::qoi::QoiKind;
    use approx::assert_relative_eq;

    fn impulse_time() -> TimeConfig {
        TimeConfig {
            t_start: 0.0,
            t_end: 2e-3,
            dt_el_max: 0.5e-3,
            dt_th_max: 1e-3,
        }
    }

    #[test]
    fn qoi_without_sources_gives_identically_zero_adjoint() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Fgm(FgmParams::reference()),
            grading_impulse(),
            impulse_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        // Joule QoI masked to a region absent from the mesh: x_el = x_th = 0
        let q = Qoi::joule_heat("null", Some(vec![999]));
        let adj = solve_adjoint(&sc, &sol, &q).unwrap();
        for w in adj.w_el.iter().chain(adj.w_th.iter()) {
            assert!(w.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn adjoint_is_linear_in_the_sources() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Fgm(FgmParams::reference()),
            grading_impulse(),
            impulse_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let disc = Discretization::new(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let a1 = solve_adjoint_with(&disc, &sc, &sol, &q, 1.0).unwrap();
        let a3 = solve_adjoint_with(&disc, &sc, &sol, &q, 3.0).unwrap();
        for (w1, w3) in a1.w_el.iter().zip(&a3.w_el) {
            for i in 0..w1.len() {
                assert_relative_eq!(w3[i], 3.0 * w1[i], max_relative = 1e-9, epsilon = 1e-280);
            }
        }
        for (w1, w3) in a1.w_th.iter().zip(&a3.w_th) {
            for i in 0..w1.len() {
                assert_relative_eq!(w3[i], 3.0 * w1[i], max_relative = 1e-9, epsilon = 1e-280);
            }
        }
    }

    #[test]
    fn terminal_and_dirichlet_rows_are_exactly_zero() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Fgm(FgmParams::reference()),
            grading_impulse(),
            impulse_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let adj = solve_adjoint(&sc, &sol, &q).unwrap();
        assert!(adj.w_el.last().unwrap().iter().all(|&x| x == 0.0));
        assert!(adj.w_th.last().unwrap().iter().all(|&x| x == 0.0));
        let disc = Discretization::new(&sc).unwrap();
        let el_bc = disc.electric_bc_homogeneous();
        for w in &adj.w_el {
            for i in 0..w.len() {
                if el_bc.is_fixed(i) {
                    assert_eq!(w[i], 0.0);
                }
            }
        }
        for w in &adj.w_th {
            for i in 0..w.len() {
                if disc.th_bc.is_fixed(i) {
                    assert_eq!(w[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn negligible_capacitance_limit_reduces_to_transposed_stationary_solve() {
        // With eps so small that K_eps/dt is negligible against K_sigma and
        // temperature-independent linear sigma, each backward electric step
        // decouples into K_sigma w = x_el, the transpose of a direct solve.
        let mut sc = annulus_scenario(
            0.002,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(100.0),
            TimeConfig {
                t_start: 0.0,
                t_end: 1.0,
                dt_el_max: 0.5,
                dt_th_max: 0.5,
            },
        );
        for mat in sc.materials.regions.values_mut() {
            mat.epsilon = 1e-28;
        }
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let adj = solve_adjoint(&sc, &sol, &q).unwrap();

        let disc = Discretization::new(&sc).unwrap();
        let n = sol.grids.n_el;
        let th = sol.theta_at_micro(n);
        let k = disc.k_sigma(&sol.u[n], &th).unwrap();
        let (x_el, _) = crate::qoi::qoi_rhs(&sc, &q, &sol, n).unwrap();
        let direct = apply_dirichlet(&k, &x_el, &disc.electric_bc_homogeneous())
            .solve()
            .unwrap();
        let scale = direct.iter().map(|x| x.abs()).fold(1e-300, f64::max);
        for i in 0..direct.len() {
            assert!(
                (adj.w_el[n - 1][i] - direct[i]).abs() / scale < 1e-8,
                "node {i}: {} vs {}",
                adj.w_el[n - 1][i],
                direct[i]
            );
        }
    }

    #[test]
    fn linear_material_bundle_reduces_to_plain_operators() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(100.0),
            impulse_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let n = sol.grids.n_el;
        let ops = adjoint_step_operators(&sc, &sol, n).unwrap();
        let disc = Discretization::new(&sc).unwrap();
        let th = sol.theta_at_micro(n);

        // j_el = K_sigma + K_eps/dt exactly (sigma_d = sigma I)
        let expected = disc
            .k_sigma(&sol.u[n], &th)
            .unwrap()
            .add_scaled(&disc.k_eps, 1.0 / sol.grids.dt_el);
        for r in 0..disc.n() {
            for (c, v) in expected.iter_row(r) {
                assert_relative_eq!(ops.j_el.get(r, c), v, max_relative = 1e-13, epsilon = 1e-300);
            }
        }
        // coupling block reduces to A_{2 sigma E} since sigma_d E + J = 2 sigma E
        let e = disc.element_e(&sol.u[n]);
        let a2se = crate::assembly::assemble_vector_weighted(&sc.mesh, disc.rule, |t, _| {
            [2.0 * 1e-10 * e[t][0], 2.0 * 1e-10 * e[t][1]]
        })
        .unwrap();
        for r in 0..disc.n() {
            for (c, v) in a2se.iter_row(r) {
                assert_relative_eq!(
                    ops.a_j_sigd_e.get(r, c),
                    v,
                    max_relative = 1e-12,
                    epsilon = 1e-300
                );
            }
        }
        // temperature-independent: theta blocks vanish
        for r in 0..disc.n() {
            assert!(ops.j_el_th.iter_row(r).all(|(_, v)| v == 0.0));
            assert!(ops.m_dsig_dth_e2.iter_row(r).all(|(_, v)| v == 0.0));
        }
    }

    #[test]
    fn step_operators_match_finite_differences_of_the_residuals() {
        // The bundle must be the exact linearization of the discrete
        // residuals; probe a random direction with central differences.
        // Drive level keeps the FGM in its grading zone.
        let sc = annulus_scenario(
            0.003,
            SigmaLaw::Fgm(FgmParams::reference()),
            grading_impulse(),
            impulse_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let disc = Discretization::new(&sc).unwrap();
        let n = sol.grids.n_el;
        let ops = step_operators(&disc, &sol, n).unwrap();
        let th = sol.theta_at_micro(n);
        let u = sol.u[n].clone();
        let nd = disc.n();

        // deterministic pseudo-random direction
        let dir: Vec<f64> = (0..nd)
            .map(|i| ((i.wrapping_mul(2654435761) % 1000) as f64 / 500.0) - 1.0)
            .collect();

        // d(electric residual)/du in direction dir vs j_el * dir
        let res_el = |u: &[f64]| -> Vec<f64> {
            disc.electric_residual(u, &sol.u[n - 1], &th, sol.grids.dt_el)
                .unwrap()
        };
        let uscale = u.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
        let h = 1e-7 * uscale;
        let mut up = u.clone();
        let mut dn = u.clone();
        for i in 0..nd {
            up[i] += h * dir[i];
            dn[i] -= h * dir[i];
        }
        let (rp, rm) = (res_el(&up), res_el(&dn));
        let fd: Vec<f64> = rp
            .iter()
            .zip(&rm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let mut jv = ops.j_el.mul_vec(&dir);
        disc.electric_bc_homogeneous().zero_fixed(&mut jv);
        let scale = norm2(&jv).max(1e-300);
        let err: f64 = fd
            .iter()
            .zip(&jv)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / scale;
        assert!(err < 1e-5, "d(res_el)/du mismatch {err}");

        // d(-joule load)/du vs A_{J+sigma_d E}
        let (lp, lm) = (
            disc.joule_load(&up, &th).unwrap(),
            disc.joule_load(&dn, &th).unwrap(),
        );
        let fd2: Vec<f64> = lp
            .iter()
            .zip(&lm)
            .map(|(a, b)| -(a - b) / (2.0 * h))
            .collect();
        let av = ops.a_j_sigd_e.mul_vec(&dir);
        let scale2 = norm2(&av).max(1e-300);
        let err2: f64 = fd2
            .iter()
            .zip(&av)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / scale2;
        assert!(err2 < 1e-5, "d(-joule)/du mismatch {err2}");

        // d(electric residual)/dtheta vs j_el_th
        let hth = 1e-4;
        let mut tp = th.clone();
        let mut tm = th.clone();
        for i in 0..nd {
            tp[i] += hth * dir[i];
            tm[i] -= hth * dir[i];
        }
        let rp = disc
            .electric_residual(&u, &sol.u[n - 1], &tp, sol.grids.dt_el)
            .unwrap();
        let rm = disc
            .electric_residual(&u, &sol.u[n - 1], &tm, sol.grids.dt_el)
            .unwrap();
        let fd3: Vec<f64> = rp
            .iter()
            .zip(&rm)
            .map(|(a, b)| (a - b) / (2.0 * hth))
            .collect();
        let mut jv3 = ops.j_el_th.mul_vec(&dir);
        disc.electric_bc_homogeneous().zero_fixed(&mut jv3);
        let scale3 = norm2(&jv3).max(1e-300);
        let err3: f64 = fd3
            .iter()
            .zip(&jv3)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / scale3;
        assert!(err3 < 1e-5, "d(res_el)/dtheta mismatch {err3}");

        // transpose consistency of the assembled coupling block
        let at = ops.a_j_sigd_e.transpose();
        for r in 0..nd {
            for (c, v) in ops.a_j_sigd_e.iter_row(r) {
                assert_eq!(at.get(c, r), v);
            }
        }
    }

    #[test]
    fn thermal_adjoint_vanishes_for_joule_qoi_with_theta_independent_sigma() {
        // With temperature-independent sigma and a Joule QoI, x_th = 0 and
        // no theta-coupling feeds the thermal adjoint: w_th stays zero and
        // the electric adjoint decouples.
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(100.0),
            impulse_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi::joule_heat("g", None);
        let adj = solve_adjoint(&sc, &sol, &q).unwrap();
        for w in &adj.w_th {
            assert!(w.iter().all(|&x| x == 0.0));
        }
        assert!(norm2(&adj.w_el[0]) > 0.0);
    }

    #[test]
    fn point_temperature_qoi_drives_the_thermal_adjoint() {
        let sc = annulus_scenario(
            0.002,
            SigmaLaw::Constant(1e-10),
            Waveform::Constant(100.0),
            impulse_time(),
        );
        let sol = solve_transient(&sc).unwrap();
        let q = Qoi {
            name: "tp".into(),
            kind: QoiKind::PointTemperature {
                location: [0.015, 0.005],
                time: 2e-3,
            },
            regions: None,
        };
        let adj = solve_adjoint(&sc, &sol, &q).unwrap();
        // thermal adjoint nonzero before the QoI time; the electric
        // adjoint is driven through the Joule coupling A_{J+sigma_d E}
        assert!(norm2(&adj.w_th[0]) > 0.0);
        assert!(norm2(&adj.w_el[0]) > 0.0);
    }
}
