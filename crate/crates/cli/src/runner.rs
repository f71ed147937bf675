//! Subcommand orchestration: each run loads a scenario, executes solver
//! stages, and leaves CSV artifacts plus a JSON manifest in the output
//! directory.

use crate::config::LoadedScenario;
use crate::error::{CliError, Result};
use crate::output::{element_scalars, fmt_f64, fmt_opt, write_vtk_snapshot, CsvTable, Manifest};
use eqst_core::forward::{solve_transient, Scenario, TransientSolution};
use eqst_core::qoi::{evaluate_qoi, Qoi};
use eqst_core::sensitivity::{
    avm_sensitivity, dsm_sensitivity, normalize, qoi_unit, ParameterHandle, SensitivityEntry,
    SensitivityMethod,
};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone)]
pub enum Command {
    Forward { vtk: bool },
    Avm,
    Dsm,
    FdCheck { rel_step: f64 },
    Convergence { axis: ConvergenceAxis, levels: usize },
    Sweep { parameter: Option<String>, span: f64, points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceAxis {
    MeshH,
    Dt,
    DtThermalRatio,
}

impl ConvergenceAxis {
    pub fn parse(s: &str) -> Result<ConvergenceAxis> {
        Ok(match s {
            "mesh_h" => ConvergenceAxis::MeshH,
            "dt" => ConvergenceAxis::Dt,
            "dt_thermal_ratio" => ConvergenceAxis::DtThermalRatio,
            other => {
                return Err(CliError::Config(format!(
                    "unknown convergence axis '{other}' (mesh_h | dt | dt_thermal_ratio)"
                )))
            }
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            ConvergenceAxis::MeshH => "mesh_h",
            ConvergenceAxis::Dt => "dt",
            ConvergenceAxis::DtThermalRatio => "dt_thermal_ratio",
        }
    }
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: Vec<String>,
    /// Observed convergence order, when the subcommand measures one.
    pub observed_order: Option<f64>,
    pub entries: Vec<SensitivityEntry>,
}

pub fn run(
    cmd: &Command,
    loaded: &LoadedScenario,
    out_dir: &Path,
    threads: usize,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir).map_err(crate::error::io_err(out_dir))?;
    match cmd {
        Command::Forward { vtk } => run_forward(loaded, out_dir, *vtk),
        Command::Avm => run_avm(loaded, out_dir),
        Command::Dsm => run_dsm(loaded, out_dir),
        Command::FdCheck { rel_step } => run_fd_check(loaded, out_dir, *rel_step),
        Command::Convergence { axis, levels } => {
            run_convergence(loaded, out_dir, *axis, *levels, threads)
        }
        Command::Sweep {
            parameter,
            span,
            points,
        } => run_sweep(loaded, out_dir, parameter.as_deref(), *span, *points, threads),
    }
}

fn write_manifest(
    loaded: &LoadedScenario,
    subcommand: &str,
    sol: &TransientSolution,
    wall: f64,
    observed_order: Option<f64>,
    out_dir: &Path,
) -> Result<()> {
    let mut manifest = Manifest::new(
        &loaded.name,
        subcommand,
        &loaded.config_path,
        &loaded.config_sha256,
        &loaded.scenario.mesh,
        &sol.grids,
        loaded.scenario.solver.tol_newton,
        loaded.scenario.solver.tol_couple,
        &sol.stats,
        wall,
    );
    manifest.observed_order = observed_order;
    manifest.write(&out_dir.join("manifest.json"))
}

fn qoi_values(scenario: &Scenario, qois: &[Qoi], sol: &TransientSolution) -> Result<Vec<f64>> {
    qois.iter()
        .map(|q| Ok(evaluate_qoi(scenario, q, sol)?))
        .collect()
}

fn write_qoi_csv(
    out_dir: &Path,
    qois: &[Qoi],
    values: &[f64],
) -> Result<()> {
    let mut table = CsvTable::new(&["qoi", "kind", "value", "unit"]);
    for (q, v) in qois.iter().zip(values) {
        let kind = match q.kind {
            eqst_core::qoi::QoiKind::JouleHeat => "joule_heat",
            eqst_core::qoi::QoiKind::PointTemperature { .. } => "point_temperature",
            eqst_core::qoi::QoiKind::PointPotential { .. } => "point_potential",
        };
        table.row(vec![
            q.name.clone(),
            kind.into(),
            fmt_f64(*v),
            qoi_unit(&q.kind).into(),
        ]);
    }
    table.write(&out_dir.join("qoi.csv"))
}

fn run_forward(loaded: &LoadedScenario, out_dir: &Path, vtk: bool) -> Result<RunOutcome> {
    let t0 = Instant::now();
    let sc = &loaded.scenario;
    let sol = solve_transient(sc)?;
    let values = qoi_values(sc, &loaded.qois, &sol)?;
    write_qoi_csv(out_dir, &loaded.qois, &values)?;

    // probe time series: boundary drives, total Joule power, temperature range
    let disc = eqst_core::forward::Discretization::new(sc)?;
    let mut header: Vec<String> = vec!["time_s".into()];
    for (i, _) in sc.electric_bc.iter().enumerate() {
        header.push(format!("drive_{i}_V"));
    }
    header.extend([
        "total_joule_power_W".to_string(),
        "theta_max_K".to_string(),
        "theta_min_K".to_string(),
    ]);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = CsvTable::new(&header_refs);
    for n in 0..=sol.grids.n_el {
        let t = sol.grids.t_el(n);
        let th = sol.theta_at_micro(n);
        let mut row = vec![fmt_f64(t)];
        for bc in &sc.electric_bc {
            row.push(fmt_f64(bc.waveform.eval(t - sc.time.t_start)));
        }
        let power: f64 = disc.joule_load(&sol.u[n], &th)?.iter().sum();
        let tmax = th.iter().cloned().fold(f64::MIN, f64::max);
        let tmin = th.iter().cloned().fold(f64::MAX, f64::min);
        row.extend([fmt_f64(power), fmt_f64(tmax), fmt_f64(tmin)]);
        table.row(row);
    }
    table.write(&out_dir.join("timeseries.csv"))?;

    if vtk {
        for m in 0..=sol.grids.n_th() {
            let n = m * sol.grids.ratio;
            let (e_mag, q) = element_scalars(&sc.mesh, &sc.materials, &sol, n)?;
            let th = sol.theta_at_micro(n);
            write_vtk_snapshot(
                &out_dir.join(format!("snapshot_{m:04}.vtk")),
                &sc.mesh,
                &sol.u[n],
                &th,
                &e_mag,
                &q,
                &format!("{} t={}", loaded.name, sol.grids.t_el(n)),
            )?;
        }
    }

    let mut summary = Vec::new();
    for (q, v) in loaded.qois.iter().zip(&values) {
        summary.push(format!("{} = {} {}", q.name, fmt_f64(*v), qoi_unit(&q.kind)));
    }
    write_manifest(loaded, "forward", &sol, t0.elapsed().as_secs_f64(), None, out_dir)?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        summary,
        observed_order: None,
        entries: Vec::new(),
    })
}

fn sensitivity_table(entries: &[SensitivityEntry]) -> CsvTable {
    let mut table = CsvTable::new(&[
        "qoi",
        "parameter",
        "method",
        "value",
        "unit",
        "normalized_pct",
        "relerr_vs_reference",
    ]);
    for e in entries {
        table.row(vec![
            e.qoi.clone(),
            e.parameter.clone(),
            e.method.as_str().into(),
            fmt_f64(e.value),
            e.unit.clone(),
            fmt_opt(e.normalized_pct),
            fmt_opt(e.relerr_vs_reference),
        ]);
    }
    table
}

fn make_entry(
    scenario: &Scenario,
    qoi: &Qoi,
    handle: &ParameterHandle,
    method: SensitivityMethod,
    value: f64,
    g0: f64,
    reference: Option<f64>,
) -> Result<SensitivityEntry> {
    let p0 = handle.nominal(scenario)?;
    Ok(SensitivityEntry {
        qoi: qoi.name.clone(),
        parameter: handle.label.clone(),
        method,
        value,
        unit: format!("{}/({})", qoi_unit(&qoi.kind), handle.field.unit()),
        nominal_qoi: g0,
        normalized_pct: normalize(value, g0, p0),
        relerr_vs_reference: reference.map(|r| (value - r).abs() / r.abs().max(1e-300)),
    })
}

/// Forward + one adjoint per QoI + cheap accumulation per parameter.
pub fn avm_entries(loaded: &LoadedScenario) -> Result<(TransientSolution, Vec<SensitivityEntry>)> {
    let sc = &loaded.scenario;
    let sol = solve_transient(sc)?;
    let g0s = qoi_values(sc, &loaded.qois, &sol)?;
    let mut entries = Vec::new();
    for (qoi, g0) in loaded.qois.iter().zip(&g0s) {
        let adj = eqst_core::adjoint::solve_adjoint(sc, &sol, qoi)?;
        let values = avm_sensitivity(sc, &sol, &adj, &loaded.parameters)?;
        for (h, v) in loaded.parameters.iter().zip(values) {
            entries.push(make_entry(sc, qoi, h, SensitivityMethod::Avm, v, *g0, None)?);
        }
    }
    Ok((sol, entries))
}

fn run_avm(loaded: &LoadedScenario, out_dir: &Path) -> Result<RunOutcome> {
    let t0 = Instant::now();
    require_parameters(loaded)?;
    let (sol, entries) = avm_entries(loaded)?;
    sensitivity_table(&entries).write(&out_dir.join("sensitivities.csv"))?;
    write_qoi_csv(out_dir, &loaded.qois, &qoi_values(&loaded.scenario, &loaded.qois, &sol)?)?;
    write_manifest(loaded, "avm", &sol, t0.elapsed().as_secs_f64(), None, out_dir)?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        summary: summarize(&entries),
        observed_order: None,
        entries,
    })
}

pub fn dsm_entries(loaded: &LoadedScenario) -> Result<(TransientSolution, Vec<SensitivityEntry>)> {
    let sc = &loaded.scenario;
    let sol = solve_transient(sc)?;
    let g0s = qoi_values(sc, &loaded.qois, &sol)?;
    let mut entries = Vec::new();
    for h in &loaded.parameters {
        let values = dsm_sensitivity(sc, &sol, &loaded.qois, h)?;
        for ((qoi, g0), v) in loaded.qois.iter().zip(&g0s).zip(values) {
            entries.push(make_entry(sc, qoi, h, SensitivityMethod::Dsm, v, *g0, None)?);
        }
    }
    Ok((sol, entries))
}

fn run_dsm(loaded: &LoadedScenario, out_dir: &Path) -> Result<RunOutcome> {
    let t0 = Instant::now();
    require_parameters(loaded)?;
    let (sol, entries) = dsm_entries(loaded)?;
    sensitivity_table(&entries).write(&out_dir.join("sensitivities.csv"))?;
    write_manifest(loaded, "dsm", &sol, t0.elapsed().as_secs_f64(), None, out_dir)?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        summary: summarize(&entries),
        observed_order: None,
        entries,
    })
}

/// Central finite differences of all QoIs for one parameter: two full
/// forward solves, both QoIs evaluated on each.
pub fn fd_entries_multi(
    scenario: &Scenario,
    qois: &[Qoi],
    handle: &ParameterHandle,
    rel_step: f64,
) -> Result<Vec<f64>> {
    let p0 = handle.nominal(scenario)?;
    let d = rel_step * p0.abs();
    let eval = |value: f64| -> Result<Vec<f64>> {
        let sc = handle.perturbed(scenario, value)?;
        let sol = solve_transient(&sc)?;
        qois.iter().map(|q| Ok(evaluate_qoi(&sc, q, &sol)?)).collect()
    };
    let up = eval(p0 + d)?;
    let dn = eval(p0 - d)?;
    Ok(up
        .iter()
        .zip(&dn)
        .map(|(a, b)| (a - b) / (2.0 * d))
        .collect())
}

fn run_fd_check(loaded: &LoadedScenario, out_dir: &Path, rel_step: f64) -> Result<RunOutcome> {
    let t0 = Instant::now();
    require_parameters(loaded)?;
    let sc = &loaded.scenario;
    let (sol, avm) = avm_entries(loaded)?;
    let (_, dsm) = dsm_entries(loaded)?;
    let g0s = qoi_values(sc, &loaded.qois, &sol)?;

    let mut entries = Vec::new();
    let find_avm = |qoi: &str, param: &str| -> f64 {
        avm.iter()
            .find(|e| e.qoi == qoi && e.parameter == param)
            .map(|e| e.value)
            .unwrap()
    };
    for e in &avm {
        entries.push(e.clone());
    }
    for e in &dsm {
        let mut e = e.clone();
        let reference = find_avm(&e.qoi, &e.parameter);
        e.relerr_vs_reference = Some((e.value - reference).abs() / reference.abs().max(1e-300));
        entries.push(e);
    }
    for h in &loaded.parameters {
        let fds = fd_entries_multi(sc, &loaded.qois, h, rel_step)?;
        for ((qoi, g0), v) in loaded.qois.iter().zip(&g0s).zip(fds) {
            let reference = find_avm(&qoi.name, &h.label);
            entries.push(make_entry(
                sc,
                qoi,
                h,
                SensitivityMethod::Fd,
                v,
                *g0,
                Some(reference),
            )?);
        }
    }
    sensitivity_table(&entries).write(&out_dir.join("sensitivities.csv"))?;
    write_manifest(loaded, "fd-check", &sol, t0.elapsed().as_secs_f64(), None, out_dir)?;

    let worst = entries
        .iter()
        .filter_map(|e| e.relerr_vs_reference)
        .fold(0.0f64, f64::max);
    let mut summary = summarize(&entries);
    summary.push(format!("max relative error vs AVM: {}", fmt_f64(worst)));
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        summary,
        observed_order: None,
        entries,
    })
}

fn require_parameters(loaded: &LoadedScenario) -> Result<()> {
    if loaded.parameters.is_empty() {
        return Err(CliError::Config(
            "this subcommand needs at least one [[parameters]] entry in the scenario".into(),
        ));
    }
    if loaded.qois.is_empty() {
        return Err(CliError::Config(
            "this subcommand needs at least one [[qoi] ] entry in the scenario".into(),
        ));
    }
    Ok(())
}

/// First QoI / first parameter sensitivity of one scenario variant; used
/// by the convergence and sweep studies.
fn level_sensitivity(loaded: &LoadedScenario) -> Result<f64> {
    let sc = &loaded.scenario;
    let sol = solve_transient(sc)?;
    let qoi = &loaded.qois[0];
    let adj = eqst_core::adjoint::solve_adjoint(sc, &sol, qoi)?;
    let v = avm_sensitivity(sc, &sol, &adj, std::slice::from_ref(&loaded.parameters[0]))?;
    Ok(v[0])
}

fn with_scenario(loaded: &LoadedScenario, scenario: Scenario) -> LoadedScenario {
    LoadedScenario {
        name: loaded.name.clone(),
        scenario,
        qois: loaded.qois.clone(),
        parameters: loaded.parameters.clone(),
        config_sha256: loaded.config_sha256.clone(),
        config_path: loaded.config_path.clone(),
    }
}

/// Run the per-level closures, optionally on threads.
fn run_levels<T: Send>(
    jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send>>,
    threads: usize,
) -> Result<Vec<T>> {
    if threads <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let mut out: Vec<Option<Result<T>>> = jobs.iter().map(|_| None).collect();
    let mut slots: Vec<&mut Option<Result<T>>> = out.iter_mut().collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for job in jobs {
            let slot = slots.remove(0);
            handles.push(scope.spawn(move || {
                *slot = Some(job());
            }));
            while handles.len() >= threads {
                handles.remove(0).join().expect("level thread panicked");
            }
        }
        for h in handles {
            h.join().expect("level thread panicked");
        }
    });
    out.into_iter().map(|r| r.expect("slot filled")).collect()
}

/// Least-squares slope of log(err) against log(x).
pub fn fitted_order(xs: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(errs)
        .filter(|&(_, &e)| e > 0.0)
        .map(|(&x, &e)| (x.ln(), e.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn run_convergence(
    loaded: &LoadedScenario,
    out_dir: &Path,
    axis: ConvergenceAxis,
    levels: usize,
    threads: usize,
) -> Result<RunOutcome> {
    require_parameters(loaded)?;
    if levels < 3 {
        return Err(CliError::Config("convergence study needs >= 3 levels".into()));
    }
    let t0 = Instant::now();
    let base = &loaded.scenario;

    // Per-level scenario variants plus the reference level.
    let mut axis_values = Vec::new();
    let mut variants: Vec<Scenario> = Vec::new();
    match axis {
        ConvergenceAxis::MeshH => {
            let h0 = base.mesh.max_edge_length() / 2f64.sqrt();
            for k in 0..levels {
                let h = h0 / 2f64.powi(k as i32);
                axis_values.push(h);
                let rebuilt = crate::config::load_scenario(
                    &loaded.config_path,
                    &crate::config::Overrides {
                        h_target: Some(h),
                        ..Default::default()
                    },
                )?;
                variants.push(rebuilt.scenario);
            }
        }
        ConvergenceAxis::Dt => {
            let dt0 = base.time.dt_el_max;
            for k in 0..levels {
                let dt = dt0 / 2f64.powi(k as i32);
                axis_values.push(dt);
                let mut sc = base.clone();
                sc.time.dt_el_max = dt;
                sc.time.dt_th_max = dt; // equal-rate on this axis
                variants.push(sc);
            }
            // 4x-finer reference beyond the finest level
            let dt_ref = dt0 / 2f64.powi(levels as i32 - 1) / 4.0;
            let mut sc = base.clone();
            sc.time.dt_el_max = dt_ref;
            sc.time.dt_th_max = dt_ref;
            axis_values.push(dt_ref);
            variants.push(sc);
        }
        ConvergenceAxis::DtThermalRatio => {
            let dt_el = base.time.dt_el_max;
            let ratios = [1usize, 2, 5, 10, 20, 40];
            for &r in ratios.iter().take(levels) {
                axis_values.push(r as f64 * dt_el);
                let mut sc = base.clone();
                sc.time.dt_th_max = r as f64 * dt_el;
                variants.push(sc);
            }
        }
    }

    let jobs: Vec<Box<dyn FnOnce() -> Result<f64> + Send>> = variants
        .into_iter()
        .map(|sc| {
            let l = with_scenario(loaded, sc);
            Box::new(move || level_sensitivity(&l)) as Box<dyn FnOnce() -> Result<f64> + Send>
        })
        .collect();
    let values = run_levels(jobs, threads)?;

    // Reference value: finest mesh level, 4x-finer dt run, or ratio-1 run.
    let (reference, compare_count) = match axis {
        ConvergenceAxis::MeshH => (values[levels - 1], levels - 1),
        ConvergenceAxis::Dt => (values[levels], levels),
        ConvergenceAxis::DtThermalRatio => (values[0], values.len()),
    };
    let mut errs = Vec::new();
    for k in 0..compare_count {
        errs.push((values[k] - reference).abs() / reference.abs().max(1e-300));
    }

    let order = match axis {
        // skip the ratio axis reference point itself when fitting
        ConvergenceAxis::DtThermalRatio => {
            fitted_order(&axis_values[1..], &errs[1..])
        }
        _ => fitted_order(&axis_values[..compare_count], &errs[..compare_count]),
    };

    let mut table = CsvTable::new(&["axis", "level", "axis_value", "dg_dp", "rel_err_vs_reference"]);
    for (k, v) in values.iter().enumerate() {
        let err = if k < errs.len() { Some(errs[k]) } else { None };
        table.row(vec![
            axis.as_str().into(),
            k.to_string(),
            fmt_f64(axis_values[k]),
            fmt_f64(*v),
            fmt_opt(err),
        ]);
    }
    table.write(&out_dir.join("convergence.csv"))?;

    // manifest from a fresh nominal solve (grids of the base config)
    let sol = solve_transient(base)?;
    write_manifest(
        loaded,
        &format!("convergence-{}", axis.as_str()),
        &sol,
        t0.elapsed().as_secs_f64(),
        Some(order),
        out_dir,
    )?;

    let summary = vec![
        format!(
            "{} study, {} levels, parameter {}: observed order {:.3}",
            axis.as_str(),
            levels,
            loaded.parameters[0].label,
            order
        ),
        format!("errors vs reference: {:?}", errs),
    ];
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        summary,
        observed_order: Some(order),
        entries: Vec::new(),
    })
}

fn run_sweep(
    loaded: &LoadedScenario,
    out_dir: &Path,
    parameter: Option<&str>,
    span: f64,
    points: usize,
    threads: usize,
) -> Result<RunOutcome> {
    require_parameters(loaded)?;
    if points < 5 {
        return Err(CliError::Config("sweep needs at least 5 points".into()));
    }
    let t0 = Instant::now();
    let sc = &loaded.scenario;
    let handle = match parameter {
        Some(label) => loaded
            .parameters
            .iter()
            .find(|h| h.label == label)
            .ok_or_else(|| CliError::Config(format!("unknown parameter '{label}'")))?
            .clone(),
        None => loaded.parameters[0].clone(),
    };
    let qoi = loaded.qois[0].clone();
    let p0 = handle.nominal(sc)?;

    // nominal value and AVM tangent slope
    let sol = solve_transient(sc)?;
    let g0 = evaluate_qoi(sc, &qoi, &sol)?;
    let adj = eqst_core::adjoint::solve_adjoint(sc, &sol, &qoi)?;
    let slope = avm_sensitivity(sc, &sol, &adj, std::slice::from_ref(&handle))?[0];
    let slope_norm = slope * p0 / g0;

    let rels: Vec<f64> = (0..points)
        .map(|k| 1.0 + span * (2.0 * k as f64 / (points - 1) as f64 - 1.0))
        .collect();
    let jobs: Vec<Box<dyn FnOnce() -> Result<f64> + Send>> = rels
        .iter()
        .map(|&rel| {
            let sc2 = handle.perturbed(sc, rel * p0);
            let qoi = qoi.clone();
            Box::new(move || {
                let sc2 = sc2?;
                let sol = solve_transient(&sc2)?;
                Ok(evaluate_qoi(&sc2, &qoi, &sol)?)
            }) as Box<dyn FnOnce() -> Result<f64> + Send>
        })
        .collect();
    let gs = run_levels(jobs, threads)?;

    let mut table = CsvTable::new(&["p_rel", "g_rel", "tangent"]);
    for (rel, g) in rels.iter().zip(&gs) {
        table.row(vec![
            fmt_f64(*rel),
            fmt_f64(g / g0),
            fmt_f64(1.0 + slope_norm * (rel - 1.0)),
        ]);
    }
    table.write(&out_dir.join("sweep.csv"))?;
    write_manifest(loaded, "sweep", &sol, t0.elapsed().as_secs_f64(), None, out_dir)?;

    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        summary: vec![format!(
            "sweep of {} over +-{}%, {} points; AVM tangent slope {} (normalized {})",
            handle.label,
            span * 100.0,
            points,
            fmt_f64(slope),
            fmt_f64(slope_norm)
        )],
        observed_order: None,
        entries: Vec::new(),
    })
}

fn summarize(entries: &[SensitivityEntry]) -> Vec<String> {
    entries
        .iter()
        .map(|e| {
            format!(
                "{} d({})/d({}) = {} {}{}",
                e.method.as_str(),
                e.qoi,
                e.parameter,
                fmt_f64(e.value),
                e.unit,
                e.normalized_pct
                    .map(|p| format!(" ({}% per 1% step)", fmt_f64(p)))
                    .unwrap_or_default()
            )
        })
        .collect()
}
