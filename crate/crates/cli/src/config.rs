//! Scenario configuration: a single TOML document describing geometry,
//! materials, boundaries, time span, quantities of interest and designated
//! sensitivity parameters.
//!
//! Every physical value accepts either a bare SI number or a string with a
//! unit suffix ("0.7 kV/mm", "30 ms", "65 degC"); units are converted on
//! ingestion.

use crate::error::{CliError, Result};
use crate::units::{from_toml, Dimension};
use eqst_core::forward::{ElectricBc, Scenario, SolverConfig, ThermalBc, TimeConfig, Waveform};
use eqst_core::materials::{FgmParams, MaterialModel, ParamField, RegionMaterial, SigmaLaw};
use eqst_core::mesh::{
    generate_layered_mesh, import_msh, Axis, BoundaryRule, GeometrySpec, Mesh, MeshMode,
    Rectangle,
};
use eqst_core::qoi::{Qoi, QoiKind};
use eqst_core::sensitivity::ParameterHandle;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    mode: String,
    geometry: RawGeometry,
    materials: BTreeMap<String, RawMaterial>,
    boundaries: RawBoundaries,
    time: RawTime,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    qoi: Vec<RawQoi>,
    #[serde(default)]
    parameters: Vec<RawParameter>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    /// Layered-rectangle description...
    #[serde(default)]
    h_target: Option<toml::Value>,
    #[serde(default)]
    rectangles: Vec<RawRectangle>,
    #[serde(default)]
    boundaries: Vec<RawBoundaryRule>,
    /// ...or an external mesh file (.msh or native format).
    #[serde(default)]
    mesh_file: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRectangle {
    region: String,
    #[serde(default)]
    rho: Option<[toml::Value; 2]>,
    #[serde(default)]
    x: Option<[toml::Value; 2]>,
    #[serde(default)]
    z: Option<[toml::Value; 2]>,
    #[serde(default)]
    y: Option<[toml::Value; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBoundaryRule {
    tag: String,
    /// "rho" | "x" (radial/horizontal line) or "z" | "y" (vertical line)
    axis: String,
    at: toml::Value,
    #[serde(default)]
    span: Option<[toml::Value; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMaterial {
    sigma: RawLaw,
    epsilon: RawLaw,
    lambda: RawLaw,
    c_v: RawLaw,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLaw {
    law: String,
    #[serde(default)]
    value: Option<toml::Value>,
    #[serde(default)]
    p1: Option<toml::Value>,
    #[serde(default)]
    p2: Option<toml::Value>,
    #[serde(default)]
    p3: Option<toml::Value>,
    #[serde(default)]
    p4: Option<toml::Value>,
    #[serde(default)]
    p5: Option<toml::Value>,
    #[serde(default)]
    theta0: Option<toml::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBoundaries {
    electric: BTreeMap<String, RawElectricBc>,
    thermal: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawElectricBc {
    // Order matters: toml::Value also matches tables, so the structured
    // variant must be tried first.
    Waveform {
        kind: String,
        #[serde(default)]
        value: Option<toml::Value>,
        #[serde(default)]
        u_dc: Option<toml::Value>,
        #[serde(default)]
        u_hat: Option<toml::Value>,
        #[serde(default)]
        tau1: Option<toml::Value>,
        #[serde(default)]
        tau2: Option<toml::Value>,
    },
    Constant(toml::Value),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTime {
    #[serde(default)]
    t_start: Option<toml::Value>,
    t_end: toml::Value,
    dt_el_max: toml::Value,
    dt_th_max: toml::Value,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tol_newton: Option<f64>,
    tol_couple: Option<f64>,
    tol_couple_lin: Option<f64>,
    max_newton: Option<usize>,
    max_couple: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQoi {
    name: String,
    kind: String,
    #[serde(default)]
    regions: Option<Vec<String>>,
    #[serde(default)]
    location: Option<[toml::Value; 2]>,
    #[serde(default)]
    time: Option<toml::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParameter {
    region: String,
    field: String,
}

/// A fully resolved scenario plus its QoIs and designated parameters.
pub struct LoadedScenario {
    pub name: String,
    pub scenario: Scenario,
    pub qois: Vec<Qoi>,
    pub parameters: Vec<ParameterHandle>,
    /// sha256 of the raw config bytes (hex), for the run manifest.
    pub config_sha256: String,
    pub config_path: PathBuf,
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub dt_el_max: Option<f64>,
    pub dt_th_max: Option<f64>,
    pub h_target: Option<f64>,
}

pub fn load_scenario(path: &Path, ovr: &Overrides) -> Result<LoadedScenario> {
    let bytes = std::fs::read(path).map_err(crate::error::io_err(path))?;
    let sha = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    };
    let text = String::from_utf8(bytes)
        .map_err(|e| CliError::Config(format!("{}: not utf-8: {e}", path.display())))?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| CliError::Toml {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    build(raw, path, ovr).map_err(|e| match e {
        CliError::Config(message) => CliError::ConfigIn {
            file: path.display().to_string(),
            message,
        },
        other => other,
    })
    .map(|mut loaded| {
        loaded.config_sha256 = sha;
        loaded.config_path = path.to_path_buf();
        loaded
    })
}

fn build(raw: RawConfig, path: &Path, ovr: &Overrides) -> Result<LoadedScenario> {
    let mode = match raw.mode.as_str() {
        "axisymmetric" => MeshMode::Axisymmetric,
        "planar" => MeshMode::Planar,
        other => {
            return Err(CliError::Config(format!(
                "mode: expected 'axisymmetric' or 'planar', got '{other}'"
            )))
        }
    };

    let mesh = build_mesh(&raw.geometry, mode, path, ovr)?;
    let mesh = Arc::new(mesh);

    // materials keyed by resolved region tag
    let mut regions = BTreeMap::new();
    for (name, m) in &raw.materials {
        let tag = mesh
            .region_tag(name)
            .map_err(|_| CliError::Config(format!("materials.{name}: unknown region")))?;
        regions.insert(tag, build_material(name, m)?);
    }
    let materials = MaterialModel::new(regions)?;

    // electric boundaries
    let mut electric_bc = Vec::new();
    for (name, bc) in &raw.boundaries.electric {
        let tag = mesh.boundary_tag(name).map_err(|_| {
            CliError::Config(format!("boundaries.electric.{name}: unknown boundary"))
        })?;
        let key = format!("boundaries.electric.{name}");
        let waveform = match bc {
            RawElectricBc::Constant(v) => {
                Waveform::Constant(from_toml(v, Dimension::Voltage, &key)?)
            }
            RawElectricBc::Waveform {
                kind,
                value,
                u_dc,
                u_hat,
                tau1,
                tau2,
            } => match kind.as_str() {
                "constant" => {
                    let v = value.as_ref().ok_or_else(|| {
                        CliError::Config(format!("{key}: constant waveform needs 'value'"))
                    })?;
                    Waveform::Constant(from_toml(v, Dimension::Voltage, &key)?)
                }
                "switching_impulse" => {
                    let get = |field: &Option<toml::Value>, fname: &str, dim| -> Result<f64> {
                        let v = field.as_ref().ok_or_else(|| {
                            CliError::Config(format!("{key}: switching impulse needs '{fname}'"))
                        })?;
                        from_toml(v, dim, &format!("{key}.{fname}"))
                    };
                    Waveform::SwitchingImpulse {
                        u_dc: get(u_dc, "u_dc", Dimension::Voltage)?,
                        u_hat: get(u_hat, "u_hat", Dimension::Voltage)?,
                        tau1: get(tau1, "tau1", Dimension::Time)?,
                        tau2: get(tau2, "tau2", Dimension::Time)?,
                    }
                }
                other => {
                    return Err(CliError::Config(format!(
                        "{key}: unknown waveform kind '{other}'"
                    )))
                }
            },
        };
        electric_bc.push(ElectricBc { tag, waveform });
    }

    // thermal boundaries
    let mut thermal_bc = Vec::new();
    for (name, v) in &raw.boundaries.thermal {
        let tag = mesh.boundary_tag(name).map_err(|_| {
            CliError::Config(format!("boundaries.thermal.{name}: unknown boundary"))
        })?;
        let theta = from_toml(
            v,
            Dimension::Temperature,
            &format!("boundaries.thermal.{name}"),
        )?;
        thermal_bc.push(ThermalBc { tag, theta });
    }

    let time = TimeConfig {
        t_start: raw
            .time
            .t_start
            .as_ref()
            .map(|v| from_toml(v, Dimension::Time, "time.t_start"))
            .transpose()?
            .unwrap_or(0.0),
        t_end: from_toml(&raw.time.t_end, Dimension::Time, "time.t_end")?,
        dt_el_max: ovr
            .dt_el_max
            .map(Ok)
            .unwrap_or_else(|| from_toml(&raw.time.dt_el_max, Dimension::Time, "time.dt_el_max"))?,
        dt_th_max: ovr
            .dt_th_max
            .map(Ok)
            .unwrap_or_else(|| from_toml(&raw.time.dt_th_max, Dimension::Time, "time.dt_th_max"))?,
    };
    if ovr.dt_el_max.is_some() && ovr.dt_th_max.is_none() && time.dt_th_max < time.dt_el_max {
        return Err(CliError::Config(
            "--dt-el override exceeds the configured dt_th_max; pass --dt-th as well".into(),
        ));
    }

    let defaults = SolverConfig::default();
    let solver = SolverConfig {
        tol_newton: raw.solver.tol_newton.unwrap_or(defaults.tol_newton),
        tol_couple: raw.solver.tol_couple.unwrap_or(defaults.tol_couple),
        tol_couple_lin: raw.solver.tol_couple_lin.unwrap_or(defaults.tol_couple_lin),
        max_newton: raw.solver.max_newton.unwrap_or(defaults.max_newton),
        max_couple: raw.solver.max_couple.unwrap_or(defaults.max_couple),
    };

    // QoIs
    let mut qois = Vec::new();
    for q in &raw.qoi {
        let key = format!("qoi.{}", q.name);
        let regions = q
            .regions
            .as_ref()
            .map(|names| {
                names
                    .iter()
                    .map(|n| {
                        mesh.region_tag(n)
                            .map_err(|_| CliError::Config(format!("{key}: unknown region '{n}'")))
                    })
                    .collect::<Result<Vec<i32>>>()
            })
            .transpose()?;
        let kind = match q.kind.as_str() {
            "joule_heat" => QoiKind::JouleHeat,
            "point_temperature" | "point_potential" => {
                let loc = q.location.as_ref().ok_or_else(|| {
                    CliError::Config(format!("{key}: point QoI needs 'location'"))
                })?;
                let location = [
                    from_toml(&loc[0], Dimension::Length, &format!("{key}.location[0]"))?,
                    from_toml(&loc[1], Dimension::Length, &format!("{key}.location[1]"))?,
                ];
                let time_v = q.time.as_ref().ok_or_else(|| {
                    CliError::Config(format!("{key}: point QoI needs 'time'"))
                })?;
                let time = from_toml(time_v, Dimension::Time, &format!("{key}.time"))?;
                if q.kind == "point_temperature" {
                    QoiKind::PointTemperature { location, time }
                } else {
                    QoiKind::PointPotential { location, time }
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "{key}: unknown QoI kind '{other}'"
                )))
            }
        };
        qois.push(Qoi {
            name: q.name.clone(),
            kind,
            regions,
        });
    }

    // parameters
    let mut parameters = Vec::new();
    for p in &raw.parameters {
        let tag = mesh.region_tag(&p.region).map_err(|_| {
            CliError::Config(format!("parameters: unknown region '{}'", p.region))
        })?;
        let field = ParamField::parse(&p.field)?;
        parameters.push(ParameterHandle::new(
            tag,
            field,
            format!("{}.{}", p.region, p.field),
        ));
    }

    let scenario = Scenario {
        mesh,
        materials,
        electric_bc,
        thermal_bc,
        time,
        solver,
    };
    scenario.validate()?;
    for h in &parameters {
        h.validate(&scenario)?;
    }

    Ok(LoadedScenario {
        name: raw.name,
        scenario,
        qois,
        parameters,
        config_sha256: String::new(),
        config_path: PathBuf::new(),
    })
}

fn build_mesh(
    geo: &RawGeometry,
    mode: MeshMode,
    config_path: &Path,
    ovr: &Overrides,
) -> Result<Mesh> {
    if let Some(file) = &geo.mesh_file {
        if !geo.rectangles.is_empty() || geo.h_target.is_some() {
            return Err(CliError::Config(
                "geometry: give either mesh_file or rectangles, not both".into(),
            ));
        }
        let mesh_path = config_path.parent().unwrap_or(Path::new(".")).join(file);
        let text = std::fs::read_to_string(&mesh_path).map_err(crate::error::io_err(&mesh_path))?;
        let mesh = if file.ends_with(".msh") {
            import_msh(&text, mode)?
        } else {
            Mesh::from_native(&text)?
        };
        return Ok(mesh);
    }

    let h_value = geo.h_target.as_ref().ok_or_else(|| {
        CliError::Config("geometry: missing h_target (or mesh_file)".into())
    })?;
    let h_target = ovr
        .h_target
        .map(Ok)
        .unwrap_or_else(|| from_toml(h_value, Dimension::Length, "geometry.h_target"))?;

    let mut rectangles = Vec::new();
    for (i, r) in geo.rectangles.iter().enumerate() {
        let key = format!("geometry.rectangles[{i}]");
        let h_range = match (&r.rho, &r.x) {
            (Some(v), None) | (None, Some(v)) => [
                from_toml(&v[0], Dimension::Length, &key)?,
                from_toml(&v[1], Dimension::Length, &key)?,
            ],
            _ => {
                return Err(CliError::Config(format!(
                    "{key}: give exactly one of 'rho' (axisymmetric) or 'x' (planar)"
                )))
            }
        };
        let v_range = match (&r.z, &r.y) {
            (Some(v), None) | (None, Some(v)) => [
                from_toml(&v[0], Dimension::Length, &key)?,
                from_toml(&v[1], Dimension::Length, &key)?,
            ],
            _ => {
                return Err(CliError::Config(format!(
                    "{key}: give exactly one of 'z' (axisymmetric) or 'y' (planar)"
                )))
            }
        };
        rectangles.push(Rectangle {
            region: r.region.clone(),
            h_range,
            v_range,
        });
    }

    let mut boundary_rules = Vec::new();
    for (i, b) in geo.boundaries.iter().enumerate() {
        let key = format!("geometry.boundaries[{i}] ('{}')", b.tag);
        let axis = match b.axis.as_str() {
            "rho" | "x" => Axis::Horizontal,
            "z" | "y" => Axis::Vertical,
            other => {
                return Err(CliError::Config(format!(
                    "{key}: axis must be rho/x or z/y, got '{other}'"
                )))
            }
        };
        let span = b
            .span
            .as_ref()
            .map(|s| {
                Ok::<[f64; 2], CliError>([
                    from_toml(&s[0], Dimension::Length, &key)?,
                    from_toml(&s[1], Dimension::Length, &key)?,
                ])
            })
            .transpose()?;
        boundary_rules.push(BoundaryRule {
            tag: b.tag.clone(),
            axis,
            at: from_toml(&b.at, Dimension::Length, &key)?,
            span,
        });
    }

    let spec = GeometrySpec {
        mode,
        rectangles,
        h_target,
        boundary_rules,
    };
    Ok(generate_layered_mesh(&spec)?)
}

fn build_material(name: &str, raw: &RawMaterial) -> Result<RegionMaterial> {
    let key = |f: &str| format!("materials.{name}.{f}");
    let sigma = match raw.sigma.law.as_str() {
        "constant" => {
            let v = raw.sigma.value.as_ref().ok_or_else(|| {
                CliError::Config(format!("{}: constant law needs 'value'", key("sigma")))
            })?;
            SigmaLaw::Constant(from_toml(v, Dimension::Conductivity, &key("sigma"))?)
        }
        "fgm" => {
            let get = |v: &Option<toml::Value>, f: &str, dim| -> Result<f64> {
                let v = v.as_ref().ok_or_else(|| {
                    CliError::Config(format!("{}: fgm law needs '{f}'", key("sigma")))
                })?;
                from_toml(v, dim, &format!("{}.{f}", key("sigma")))
            };
            SigmaLaw::Fgm(FgmParams {
                p1: get(&raw.sigma.p1, "p1", Dimension::Conductivity)?,
                p2: get(&raw.sigma.p2, "p2", Dimension::ElectricField)?,
                p3: get(&raw.sigma.p3, "p3", Dimension::ElectricField)?,
                p4: get(&raw.sigma.p4, "p4", Dimension::Dimensionless)?,
                p5: get(&raw.sigma.p5, "p5", Dimension::Temperature)?,
                theta0: get(&raw.sigma.theta0, "theta0", Dimension::Temperature)?,
            })
        }
        other => {
            return Err(CliError::Config(format!(
                "{}: unknown law '{other}' (constant | fgm)",
                key("sigma")
            )))
        }
    };
    let constant = |law: &RawLaw, f: &str, dim: Dimension| -> Result<f64> {
        if law.law != "constant" {
            return Err(CliError::Config(format!(
                "{}: only 'constant' is supported, got '{}'",
                key(f),
                law.law
            )));
        }
        let v = law.value.as_ref().ok_or_else(|| {
            CliError::Config(format!("{}: constant law needs 'value'", key(f)))
        })?;
        from_toml(v, dim, &key(f))
    };
    Ok(RegionMaterial {
        sigma,
        epsilon: constant(&raw.epsilon, "epsilon", Dimension::Permittivity)?,
        lambda: constant(&raw.lambda, "lambda", Dimension::ThermalConductivity)?,
        c_v: constant(&raw.c_v, "c_v", Dimension::HeatCapacity)?,
    })
}
