//! Run artifacts: RFC-4180 CSV tables, VTK legacy snapshots and the JSON
//! run manifest.
//!
//! Floats are written with Rust's shortest round-trip formatting, so two
//! runs with identical inputs produce byte-identical CSV files.

use crate::error::{io_err, Result};
use eqst_core::forward::{SolveStats, TimeGrids, TransientSolution};
use eqst_core::mesh::Mesh;
use std::fmt::Write as _;
use std::path::Path;

/// Minimal RFC-4180 writer: CRLF line endings, quoting only when needed.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> CsvTable {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn to_string(&self) -> String {
        let mut s = String::new();
        let escape = |cell: &str| -> String {
            if cell.contains(',') || cell.contains('"') || cell.contains('\n') {
                format!("\"{}\"", cell.replace('"', "\"\""))
            } else {
                cell.to_string()
            }
        };
        let _ = write!(
            s,
            "{}\r\n",
            self.header.iter().map(|c| escape(c)).collect::<Vec<_>>().join(",")
        );
        for row in &self.rows {
            let _ = write!(
                s,
                "{}\r\n",
                row.iter().map(|c| escape(c)).collect::<Vec<_>>().join(",")
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(io_err(path))
    }
}

pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// VTK legacy ASCII snapshot of one stored step: nodal potential and
/// temperature plus per-element field magnitude and Joule density.
pub fn write_vtk_snapshot(
    path: &Path,
    mesh: &Mesh,
    u: &[f64],
    theta: &[f64],
    e_mag: &[f64],
    q_joule: &[f64],
    title: &str,
) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.nodes.len());
    for p in &mesh.nodes {
        let _ = writeln!(s, "{} {} 0", fmt_f64(p[0]), fmt_f64(p[1]));
    }
    let nt = mesh.triangles.len();
    let _ = writeln!(s, "CELLS {nt} {}", 4 * nt);
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t.nodes[0], t.nodes[1], t.nodes[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        let _ = writeln!(s, "5");
    }
    let _ = writeln!(s, "POINT_DATA {}", mesh.nodes.len());
    let _ = writeln!(s, "SCALARS potential double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for v in u {
        let _ = writeln!(s, "{}", fmt_f64(*v));
    }
    let _ = writeln!(s, "SCALARS temperature double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for v in theta {
        let _ = writeln!(s, "{}", fmt_f64(*v));
    }
    let _ = writeln!(s, "CELL_DATA {nt}");
    let _ = writeln!(s, "SCALARS e_magnitude double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for v in e_mag {
        let _ = writeln!(s, "{}", fmt_f64(*v));
    }
    let _ = writeln!(s, "SCALARS joule_density double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for v in q_joule {
        let _ = writeln!(s, "{}", fmt_f64(*v));
    }
    std::fs::write(path, s).map_err(io_err(path))
}

/// Everything needed to reproduce and audit a run.
#[derive(serde::Serialize)]
pub struct Manifest {
    pub scenario: String,
    pub subcommand: String,
    pub config_path: String,
    pub config_sha256: String,
    pub mesh_nodes: usize,
    pub mesh_triangles: usize,
    pub max_edge_length: f64,
    pub dt_el: f64,
    pub dt_th: f64,
    pub n_el_steps: usize,
    pub thermal_ratio: usize,
    pub tol_newton: f64,
    pub tol_couple: f64,
    pub newton_iterations: usize,
    pub electric_factorizations: usize,
    pub thermal_solves: usize,
    pub max_charge_residual: f64,
    pub wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_order: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new(
        scenario: &str,
        subcommand: &str,
        config_path: &Path,
        config_sha256: &str,
        mesh: &Mesh,
        grids: &TimeGrids,
        tol_newton: f64,
        tol_couple: f64,
        stats: &SolveStats,
        wall_seconds: f64,
    ) -> Manifest {
        Manifest {
            scenario: scenario.to_string(),
            subcommand: subcommand.to_string(),
            config_path: config_path.display().to_string(),
            config_sha256: config_sha256.to_string(),
            mesh_nodes: mesh.n_nodes(),
            mesh_triangles: mesh.triangles.len(),
            max_edge_length: mesh.max_edge_length(),
            dt_el: grids.dt_el,
            dt_th: grids.dt_th(),
            n_el_steps: grids.n_el,
            thermal_ratio: grids.ratio,
            tol_newton,
            tol_couple,
            newton_iterations: stats.newton_iterations,
            electric_factorizations: stats.electric_factorizations,
            thermal_solves: stats.thermal_solves,
            max_charge_residual: stats.max_charge_residual,
            wall_seconds,
            observed_order: None,
            notes: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(path, json).map_err(io_err(path))
    }
}

/// Per-element |E| and Joule density of one stored step, for VTK export.
pub fn element_scalars(
    mesh: &Mesh,
    materials: &eqst_core::materials::MaterialModel,
    sol: &TransientSolution,
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let fields = sol.element_fields(mesh, materials, n)?;
    let e_mag = fields
        .iter()
        .map(|f| (f.e[0] * f.e[0] + f.e[1] * f.e[1]).sqrt())
        .collect();
    let q = fields.iter().map(|f| f.q_joule).collect();
    Ok((e_mag, q))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_is_rfc4180_with_crlf() {
        let mut t = CsvTable::new(&["a", "b"]);
        t.row(vec!["1".into(), "x,y".into()]);
        t.row(vec!["2".into(), "say \"hi\"".into()]);
        let s = t.to_string();
        assert_eq!(s, "a,b\r\n1,\"x,y\"\r\n2,\"say \"\"hi\"\"\"\r\n");
    }

    #[test]
    fn float_formatting_round_trips() {
        for x in [1.5e-3, 0.1 + 0.2, -7.25e11, 3.5] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(0.0), "0");
    }
}
