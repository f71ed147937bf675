//! Parameter sensitivities dG/dp by three routes: the adjoint variable
//! method (AVM), the direct sensitivity method (DSM) and central finite
//! differences (FD).
//!
//! AVM and DSM are exact derivatives of the same fully discrete system,
//! evaluated on the same stored trajectory, so they agree to linear-solver
//! precision; that duality is asserted by the tests rather than assumed.
//! The time quadrature of the adjoint accumulation is the right-endpoint
//! rectangle rule matching implicit Euler, with the adjoint time
//! derivative discretized by the transpose of the forward stencil.
//! Initial-condition terms come from one small stationary linearized solve
//! per parameter, which keeps the adjoint route free of per-parameter
//! transient solves.

use crate::adjoint::AdjointSolution;
use crate::error::{CoreError, Result};
use crate::forward::{solve_transient, Discretization, Scenario, TransientSolution};
use crate::linalg::{dot, norm2, SpdSolver};
use crate::materials::{param_value, set_param_value, ParamField};
use crate::qoi::{
    electric_rhs, evaluate_qoi_with, qoi_partial_p_with, thermal_rhs, Qoi, QoiKind,
};

/// A designated material parameter: one field of one region's law.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterHandle {
    pub region: i32,
    pub field: ParamField,
    /// Display label, e.g. "fgm.p2".
    pub label: String,
}

impl ParameterHandle {
    pub fn new(region: i32, field: ParamField, label: impl Into<String>) -> ParameterHandle {
        ParameterHandle {
            region,
            field,
            label: label.into(),
        }
    }

    /// The parameter must address an existing region and a field its law
    /// actually has.
    pub fn validate(&self, scenario: &Scenario) -> Result<f64> {
        let mat = scenario.materials.region(self.region)?;
        param_value(mat, self.field)
    }

    pub fn nominal(&self, scenario: &Scenario) -> Result<f64> {
        self.validate(scenario)
    }

    /// Scenario with this parameter set to `value`.
    pub fn perturbed(&self, scenario: &Scenario, value: f64) -> Result<Scenario> {
        let mut sc = scenario.clone();
        let mat = sc
            .materials
            .regions
            .get_mut(&self.region)
            .ok_or_else(|| CoreError::Material(format!("no region {}", self.region)))?;
        set_param_value(mat, self.field, value)?;
        Ok(sc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityMethod {
    Avm,
    Dsm,
    Fd,
}

impl SensitivityMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SensitivityMethod::Avm => "AVM",
            SensitivityMethod::Dsm => "DSM",
            SensitivityMethod::Fd => "FD",
        }
    }
}

/// One row of the sensitivity report.
#[derive(Debug, Clone)]
pub struct SensitivityEntry {
    pub qoi: String,
    pub parameter: String,
    pub method: SensitivityMethod,
    pub value: f64,
    pub unit: String,
    pub nominal_qoi: f64,
    pub normalized_pct: Option<f64>,
    pub relerr_vs_reference: Option<f64>,
}

/// Relative QoI change, in percent, predicted by a first-order step of
/// +1% in the parameter. Undefined when the nominal QoI is zero.
pub fn normalize(dg_dp: f64, g0: f64, p0: f64) -> Option<f64> {
    if g0 == 0.0 {
        None
    } else {
        Some(dg_dp * 0.01 * p0 / g0 * 100.0)
    }
}

pub fn qoi_unit(kind: &QoiKind) -> &'static str {
    match kind {
        QoiKind::JouleHeat => "J",
        QoiKind::PointTemperature { .. } => "K",
        QoiKind::PointPotential { .. } => "V",
    }
}

// ---------------------------------------------------------------------------
// Initial-condition derivatives
// ---------------------------------------------------------------------------

/// Derivatives (du0/dp, dv0/dp) of the coupled stationary initial state,
/// from one linearized stationary solve per parameter (block Gauss-Seidel
/// over the electric and thermal blocks, iterated to stagnation).
pub fn initial_condition_derivatives(
    scenario: &Scenario,
    handle: &ParameterHandle,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let disc = Discretization::new(scenario)?;
    let (u0, v0) = crate::forward::solve_stationary(scenario)?;
    let work = IcWorkspace::new(&disc, scenario, &u0, &v0)?;
    work.derivatives(&disc, handle)
}

/// Factorizations and operators of the linearized stationary system,
/// shared across parameters.
pub(crate) struct IcWorkspace {
    u0: Vec<f64>,
    v0: Vec<f64>,
    k_sd: crate::assembly::SparseOperator,
    el_solver: SpdSolver,
    th_solver: SpdSolver,
    j_el_th: crate::assembly::SparseOperator,
    a_jsde: crate::assembly::SparseOperator,
    m_sig: crate::assembly::SparseOperator,
    tol: f64,
    max_iter: usize,
}

impl IcWorkspace {
    pub(crate) fn new(
        disc: &Discretization,
        scenario: &Scenario,
        u0: &[f64],
        v0: &[f64],
    ) -> Result<IcWorkspace> {
        let k_sd = disc.k_sigma_d(u0, v0)?;
        let el_solver = SpdSolver::factor(&k_sd, &disc.electric_bc_homogeneous().free_mask())?;
        let th_solver = SpdSolver::factor(&disc.k_lambda, &disc.th_bc.free_mask())?;
        Ok(IcWorkspace {
            u0: u0.to_vec(),
            v0: v0.to_vec(),
            k_sd,
            el_solver,
            th_solver,
            j_el_th: disc.j_el_th(u0, v0)?,
            a_jsde: disc.a_j_sigd_e(u0, v0)?,
            m_sig: disc.m_dsig_dth_e2(u0, v0, None)?,
            tol: scenario.solver.tol_couple_lin,
            max_iter: 200,
        })
    }

    pub(crate) fn derivatives(
        &self,
        disc: &Discretization,
        handle: &ParameterHandle,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.u0.len();
        let el_bc = disc.electric_bc_homogeneous();
        let th_bc = disc.th_bc.homogeneous();

        // Explicit parameter derivatives of the stationary residuals.
        let k_psig = disc.k_dsigma_dp(&self.u0, &self.v0, handle.region, handle.field)?;
        let dcel_dp = k_psig.mul_vec(&self.u0);
        let k_plam = disc.k_dlambda_dp(handle.region, handle.field)?;
        let s_psig = disc.s_dsigma_dp_e2(&self.u0, &self.v0, handle.region, handle.field, None)?;
        let mut dcth_dp = k_plam.mul_vec(&self.v0);
        for i in 0..n {
            dcth_dp[i] -= s_psig[i];
        }

        let mut du = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut prev_update = f64::INFINITY;
        for _ in 0..self.max_iter {
            // electric block: K_sigma_d du = -dcel_dp - J_el_th dv
            let coup = self.j_el_th.mul_vec(&dv);
            let mut rhs = vec![0.0; n];
            for i in 0..n {
                rhs[i] = -dcel_dp[i] - coup[i];
            }
            let sys = apply_dirichlet_matrixless(&rhs, &el_bc);
            du = self.el_solver.solve_refined(&self.k_sd, &sys);

            // thermal block: K_lambda dv = -dcth_dp - A du + M_sig dv_prev
            let a_du = self.a_jsde.mul_vec(&du);
            let m_dv = self.m_sig.mul_vec(&dv);
            let mut rhs = vec![0.0; n];
            for i in 0..n {
                rhs[i] = -dcth_dp[i] - a_du[i] + m_dv[i];
            }
            let sys = apply_dirichlet_matrixless(&rhs, &th_bc);
            let dv_new = self.th_solver.solve_refined(&disc.k_lambda, &sys);

            let mut diff = 0.0;
            let mut mag = 0.0f64;
            for i in 0..n {
                diff += (dv_new[i] - dv[i]).powi(2);
                mag += dv_new[i].powi(2);
            }
            let update = diff.sqrt();
            let scale = mag.sqrt().max(1e-300);
            dv = dv_new;
            let at_floor = update >= 0.5 * prev_update && update <= self.tol.sqrt() * scale;
            if update <= self.tol * scale || update == 0.0 || at_floor {
                return Ok((du, dv));
            }
            prev_update = update;
        }
        Err(CoreError::Sensitivity(
            "initial-condition derivative iteration did not stagnate".into(),
        ))
    }
}

/// Homogeneous Dirichlet right-hand side restriction (the matrices carry
/// no Dirichlet data here because the boundary values are parameter
/// independent).
fn apply_dirichlet_matrixless(rhs: &[f64], bc: &crate::assembly::DirichletBc) -> Vec<f64> {
    let mut out = rhs.to_vec();
    bc.zero_fixed(&mut out);
    out
}

// ---------------------------------------------------------------------------
// Adjoint route
// ---------------------------------------------------------------------------

/// dG/dp for every handle from one stored forward solution and one adjoint
/// solution of the matching QoI. Cost per parameter: cheap per-step
/// assemblies plus one stationary linearized solve, no transient solves.
pub fn avm_sensitivity(
    scenario: &Scenario,
    sol: &TransientSolution,
    adj: &AdjointSolution,
    handles: &[ParameterHandle],
) -> Result<Vec<f64>> {
    if sol.u.len() != adj.w_el.len() || sol.v.len() != adj.w_th.len() {
        return Err(CoreError::Sensitivity(
            "forward and adjoint solutions live on different grids".into(),
        ));
    }
    let disc = Discretization::new(scenario)?;
    for h in handles {
        h.validate(scenario)?;
    }
    let g = sol.grids;
    let n_dof = disc.n();
    let qoi = &adj.qoi;

    let mut dg = vec![0.0; handles.len()];

    // Explicit QoI parameter derivative at frozen fields.
    for (j, h) in handles.iter().enumerate() {
        dg[j] += qoi_partial_p_with(&disc, qoi, sol, h.region, h.field)?;
    }

    // Constant parameter-derivative operators.
    let mut k_peps = Vec::with_capacity(handles.len());
    let mut k_plam = Vec::with_capacity(handles.len());
    let mut m_pcv = Vec::with_capacity(handles.len());
    for h in handles {
        k_peps.push(disc.k_deps_dp(h.region, h.field)?);
        k_plam.push(disc.k_dlambda_dp(h.region, h.field)?);
        m_pcv.push(disc.m_dcv_dp(h.region, h.field)?);
    }

    // Electric-chain terms, one pass over the trajectory.
    for n in 1..=g.n_el {
        let th = sol.theta_at_micro(n);
        let w = &adj.w_el[n - 1];
        if norm2(w) == 0.0 {
            continue;
        }
        for (j, h) in handles.iter().enumerate() {
            let k_psig = disc.k_dsigma_dp(&sol.u[n], &th, h.region, h.field)?;
            let mut term = dot(w, &k_psig.mul_vec(&sol.u[n]));
            let cap_now = k_peps[j].mul_vec(&sol.u[n]);
            let cap_prev = k_peps[j].mul_vec(&sol.u[n - 1]);
            let mut cap = 0.0;
            for i in 0..n_dof {
                cap += w[i] * (cap_now[i] - cap_prev[i]);
            }
            term += cap / g.dt_el;
            dg[j] -= g.dt_el * term;
        }
    }

    // Thermal-chain terms.
    for m in 1..=g.n_th() {
        let w = &adj.w_th[m - 1];
        if norm2(w) == 0.0 {
            continue;
        }
        for (j, h) in handles.iter().enumerate() {
            let mut term = 0.0;
            let cv_now = m_pcv[j].mul_vec(&sol.v[m]);
            let cv_prev = m_pcv[j].mul_vec(&sol.v[m - 1]);
            for i in 0..n_dof {
                term += w[i] * (cv_now[i] - cv_prev[i]) / g.dt_th();
            }
            term += dot(w, &k_plam[j].mul_vec(&sol.v[m]));
            let mut src = 0.0;
            for k in 1..=g.ratio {
                let n = (m - 1) * g.ratio + k;
                let th = sol.theta_at_micro(n);
                let s = disc.s_dsigma_dp_e2(&sol.u[n], &th, h.region, h.field, None)?;
                src += dot(w, &s) / g.ratio as f64;
            }
            term -= src;
            dg[j] -= g.dt_th() * term;
        }
    }

    // Initial-condition terms: weight vectors from the adjoint state at
    // t_start, dotted with the stationary derivatives per parameter.
    let g_u0 = disc.k_eps.mul_vec(&adj.w_el[0]);
    let mut g_v0 = disc.m_cv.mul_vec(&adj.w_th[0]);
    for k in 1..=g.ratio {
        let n = k; // macro step 1
        let beta = 1.0 - g.alpha(n);
        if beta == 0.0 {
            continue;
        }
        let ops = crate::adjoint::step_operators(&disc, sol, n)?;
        let (_, s_th) = electric_rhs(&disc, qoi, sol, n)?;
        let m_w = ops.m_dsig_dth_e2.mul_vec(&adj.w_th[0]);
        let j_w = ops.j_el_th.mul_vec_transpose(&adj.w_el[n - 1]);
        for i in 0..n_dof {
            g_v0[i] += g.dt_el * beta * (s_th[i] + m_w[i] - j_w[i]);
        }
    }
    // Direct thermal QoI source at the initial grid point.
    let x_th0 = thermal_rhs(&disc, qoi, sol, 0)?;
    for i in 0..n_dof {
        g_v0[i] += g.dt_th() * x_th0[i];
    }

    let needs_ic = norm2(&g_u0) > 0.0 || norm2(&g_v0) > 0.0;
    if needs_ic {
        let work = IcWorkspace::new(&disc, scenario, &sol.u[0], &sol.v[0])?;
        for (j, h) in handles.iter().enumerate() {
            let (du0, dv0) = work.derivatives(&disc, h)?;
            dg[j] += dot(&g_u0, &du0) + dot(&g_v0, &dv0);
        }
    }

    Ok(dg)
}

// ---------------------------------------------------------------------------
// Direct route
// ---------------------------------------------------------------------------

/// dG/dp for one parameter by the direct sensitivity method: one linear
/// coupled transient solve for (du/dp, dv/dp) forward in time on the
/// nominal grids, then the chain rule for each requested QoI.
pub fn dsm_sensitivity(
    scenario: &Scenario,
    sol: &TransientSolution,
    qois: &[Qoi],
    handle: &ParameterHandle,
) -> Result<Vec<f64>> {
    let disc = Discretization::new(scenario)?;
    handle.validate(scenario)?;
    let g = sol.grids;
    let n_dof = disc.n();
    let ratio = g.ratio;
    let cfg = &scenario.solver;
    let el_bc = disc.electric_bc_homogeneous();
    let th_bc = disc.th_bc.homogeneous();

    // Initial-condition derivatives.
    let work = IcWorkspace::new(&disc, scenario, &sol.u[0], &sol.v[0])?;
    let (du0, dv0) = work.derivatives(&disc, handle)?;

    let mut du: Vec<Vec<f64>> = Vec::with_capacity(g.n_el + 1);
    let mut dv: Vec<Vec<f64>> = Vec::with_capacity(g.n_th() + 1);
    du.push(du0);
    dv.push(dv0);

    let k_peps = disc.k_deps_dp(handle.region, handle.field)?;
    let k_plam = disc.k_dlambda_dp(handle.region, handle.field)?;
    let m_pcv = disc.m_dcv_dp(handle.region, handle.field)?;

    let th_matrix = disc.k_lambda.add_scaled(&disc.m_cv, 1.0 / g.dt_th());
    let th_solver = SpdSolver::factor(&th_matrix, &th_bc.free_mask())?;

    struct StepOps {
        j_el: crate::assembly::SparseOperator,
        solver: SpdSolver,
        j_el_th: crate::assembly::SparseOperator,
        a_jsde: crate::assembly::SparseOperator,
        m_sig: crate::assembly::SparseOperator,
        /// explicit parameter derivative of the electric residual
        dcel_dp: Vec<f64>,
        /// explicit parameter derivative of the Joule load
        ds_dp: Vec<f64>,
        alpha: f64,
    }

    for m in 1..=g.n_th() {
        // Assemble per-micro-step operators at the stored trajectory.
        let mut steps: Vec<StepOps> = Vec::with_capacity(ratio);
        for k in 1..=ratio {
            let n = (m - 1) * ratio + k;
            let th = sol.theta_at_micro(n);
            let j_el = disc
                .k_sigma_d(&sol.u[n], &th)?
                .add_scaled(&disc.k_eps, 1.0 / g.dt_el);
            let solver = SpdSolver::factor(&j_el, &el_bc.free_mask())?;
            let j_el_mat = j_el;
            let k_psig = disc.k_dsigma_dp(&sol.u[n], &th, handle.region, handle.field)?;
            let mut dcel_dp = k_psig.mul_vec(&sol.u[n]);
            let cap_now = k_peps.mul_vec(&sol.u[n]);
            let cap_prev = k_peps.mul_vec(&sol.u[n - 1]);
            for i in 0..n_dof {
                dcel_dp[i] += (cap_now[i] - cap_prev[i]) / g.dt_el;
            }
            steps.push(StepOps {
                j_el: j_el_mat,
                solver,
                j_el_th: disc.j_el_th(&sol.u[n], &th)?,
                a_jsde: disc.a_j_sigd_e(&sol.u[n], &th)?,
                m_sig: disc.m_dsig_dth_e2(&sol.u[n], &th, None)?,
                dcel_dp,
                ds_dp: disc.s_dsigma_dp_e2(&sol.u[n], &th, handle.region, handle.field, None)?,
                alpha: k as f64 / ratio as f64,
            });
        }

        let dv_left = dv[m - 1].clone();
        let mut dv_right = vec![0.0; n_dof];
        let mut sweep: Vec<Vec<f64>> = Vec::new();
        let mut converged = false;
        let mut prev_update = f64::INFINITY;
        let mut last_update = f64::NAN;

        for _couple in 0..cfg.max_couple.max(200) {
            // Electric forward sweep of the linearized equations.
            let mut new_sweep: Vec<Vec<f64>> = Vec::with_capacity(ratio);
            for k in 1..=ratio {
                let step = &steps[k - 1];
                let du_prev = if k == 1 { &du[(m - 1) * ratio] } else { &new_sweep[k - 2] };
                // theta' at the micro step
                let beta = 1.0 - step.alpha;
                let mut theta_p = vec![0.0; n_dof];
                for i in 0..n_dof {
                    theta_p[i] = beta * dv_left[i] + step.alpha * dv_right[i];
                }
                let coup = step.j_el_th.mul_vec(&theta_p);
                let hist = disc.k_eps.mul_vec(du_prev);
                let mut rhs = vec![0.0; n_dof];
                for i in 0..n_dof {
                    rhs[i] = -step.dcel_dp[i] - coup[i] + hist[i] / g.dt_el;
                }
                el_bc.zero_fixed(&mut rhs);
                new_sweep.push(step.solver.solve_refined(&step.j_el, &rhs));
            }
            sweep = new_sweep;

            // Thermal macro equation for dv_m.
            let mut rhs = disc.m_cv.mul_vec(&dv_left);
            for i in 0..n_dof {
                rhs[i] /= g.dt_th();
            }
            let cv_now = m_pcv.mul_vec(&sol.v[m]);
            let cv_prev = m_pcv.mul_vec(&sol.v[m - 1]);
            let lam = k_plam.mul_vec(&sol.v[m]);
            for i in 0..n_dof {
                rhs[i] -= (cv_now[i] - cv_prev[i]) / g.dt_th() + lam[i];
            }
            for k in 1..=ratio {
                let step = &steps[k - 1];
                let beta = 1.0 - step.alpha;
                let a_du = step.a_jsde.mul_vec(&sweep[k - 1]);
                let mut theta_p = vec![0.0; n_dof];
                for i in 0..n_dof {
                    theta_p[i] = beta * dv_left[i] + step.alpha * dv_right[i];
                }
                let m_dth = step.m_sig.mul_vec(&theta_p);
                for i in 0..n_dof {
                    rhs[i] += (step.ds_dp[i] + m_dth[i] - a_du[i]) / ratio as f64;
                }
            }
            th_bc.zero_fixed(&mut rhs);
            let dv_new = th_solver.solve_refined(&th_matrix, &rhs);

            let mut diff = 0.0;
            let mut mag = 0.0f64;
            for i in 0..n_dof {
                diff += (dv_new[i] - dv_right[i]).powi(2);
                mag += dv_new[i].powi(2);
            }
            let update = diff.sqrt();
            let scale = mag.sqrt().max(1e-300);
            last_update = update / scale;
            dv_right = dv_new;
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
        du.extend(sweep);
        dv.push(dv_right);
    }

    // Chain rule per QoI.
    let mut out = Vec::with_capacity(qois.len());
    for qoi in qois {
        let mut dgdp = qoi_partial_p_with(&disc, qoi, sol, handle.region, handle.field)?;
        for n in 1..=g.n_el {
            let (x_el, s_th) = electric_rhs(&disc, qoi, sol, n)?;
            dgdp += g.dt_el * dot(&x_el, &du[n]);
            let m = g.macro_of(n);
            let a = g.alpha(n);
            let mut chain = 0.0;
            for i in 0..n_dof {
                chain += s_th[i] * ((1.0 - a) * dv[m - 1][i] + a * dv[m][i]);
            }
            dgdp += g.dt_el * chain;
        }
        for m in 0..=g.n_th() {
            let x_th = thermal_rhs(&disc, qoi, sol, m)?;
            dgdp += g.dt_th() * dot(&x_th, &dv[m]);
        }
        out.push(dgdp);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central finite difference (G(p+d) - G(p-d)) / (2d) with d = rel_step *
/// nominal; two full forward solves.
pub fn fd_sensitivity(
    scenario: &Scenario,
    qoi: &Qoi,
    handle: &ParameterHandle,
    rel_step: f64,
) -> Result<f64> {
    if !(rel_step > 0.0) {
        return Err(CoreError::Sensitivity(format!(
            "relative FD step must be positive, got {rel_step}"
        )));
    }
    let p0 = handle.nominal(scenario)?;
    let d = rel_step * p0.abs().max(1e-300);
    let eval = |value: f64| -> Result<f64> {
        let sc = handle.perturbed(scenario, value)?;
        let sol = solve_transient(&sc)?;
        let disc = Discretization::new(&sc)?;
        evaluate_qoi_with(&disc, qoi, &sol)
    };
    Ok((eval(p0 + d)? - eval(p0 - d)?) / (2.0 * d))
}
