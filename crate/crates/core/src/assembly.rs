//! Element assembly of the sparse operators appearing in the semi-discrete
//! forward and adjoint systems, on first-order (P1) triangles.
//!
//! Four operator shapes cover everything the solvers need:
//!
//! * stiffness `K`: integrand (coeff * grad Ns) . grad Nr, coeff scalar or
//!   2x2 tensor,
//! * mass `M`: integrand coeff * Ns * Nr,
//! * convection-like `A`: integrand (b . grad Ns) * Nr for a vector field b,
//! * load `s`: integrand f * Nr.
//!
//! In axisymmetric mode every integrand carries the 2*pi*rho volume weight
//! with rho evaluated at the quadrature points; nodes on the axis rho = 0
//! are fine because the weight vanishes there.

use crate::error::{CoreError, Result};
use crate::linalg::{CooBuilder, CsrMatrix, SpdSolver};
use crate::materials::{Tensor2, Vec2};
use crate::mesh::{Mesh, MeshMode};
use std::collections::BTreeMap;

pub type SparseOperator = CsrMatrix;
pub type LoadVector = Vec<f64>;

/// Triangle quadrature rules in barycentric coordinates.
///
/// The degree-2 rule is enough for constant and linear coefficients on
/// planar meshes; anything involving a nonlinear law or the axisymmetric
/// rho-weight uses the degree-5 rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadRule {
    Degree2,
    Degree5,
}

const RULE_D2: [([f64; 3], f64); 3] = [
    ([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0], 1.0 / 3.0),
];

// 7-point degree-5 rule; a/b groups and weights from the standard tables.
const QA: f64 = 0.101_286_507_323_456_34;
const QB: f64 = 0.470_142_064_105_115_1;
const WA: f64 = 0.125_939_180_544_827_14;
const WB: f64 = 0.132_394_152_788_506_17;
const RULE_D5: [([f64; 3], f64); 7] = [
    ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
    ([1.0 - 2.0 * QA, QA, QA], WA),
    ([QA, 1.0 - 2.0 * QA, QA], WA),
    ([QA, QA, 1.0 - 2.0 * QA], WA),
    ([1.0 - 2.0 * QB, QB, QB], WB),
    ([QB, 1.0 - 2.0 * QB, QB], WB),
    ([QB, QB, 1.0 - 2.0 * QB], WB),
];

impl QuadRule {
    pub fn points(self) -> &'static [([f64; 3], f64)] {
        match self {
            QuadRule::Degree2 => &RULE_D2,
            QuadRule::Degree5 => &RULE_D5,
        }
    }

    /// Rule selection policy: degree 5 whenever a nonlinear coefficient or
    /// the axisymmetric weight is in play.
    pub fn select(mode: MeshMode, nonlinear: bool) -> QuadRule {
        if nonlinear || mode == MeshMode::Axisymmetric {
            QuadRule::Degree5
        } else {
            QuadRule::Degree2
        }
    }
}

/// Evaluation point handed to coefficient closures.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub bary: [f64; 3],
    pub coords: Vec2,
}

/// Constant P1 gradients and area of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub area: f64,
    pub grads: [Vec2; 3],
    pub coords: [Vec2; 3],
}

pub fn element_geometry(mesh: &Mesh, t: usize) -> ElementGeometry {
    let c = mesh.tri_coords(t);
    let area = mesh.tri_area(t);
    let inv = 1.0 / (2.0 * area);
    let grads = [
        [(c[1][1] - c[2][1]) * inv, (c[2][0] - c[1][0]) * inv],
        [(c[2][1] - c[0][1]) * inv, (c[0][0] - c[2][0]) * inv],
        [(c[0][1] - c[1][1]) * inv, (c[1][0] - c[0][0]) * inv],
    ];
    ElementGeometry {
        area,
        grads,
        coords: c,
    }
}

#[inline]
fn volume_weight(mode: MeshMode, p: Vec2) -> f64 {
    match mode {
        MeshMode::Axisymmetric => 2.0 * std::f64::consts::PI * p[0],
        MeshMode::Planar => 1.0,
    }
}

#[inline]
fn qp_coords(geo: &ElementGeometry, bary: [f64; 3]) -> Vec2 {
    [
        bary[0] * geo.coords[0][0] + bary[1] * geo.coords[1][0] + bary[2] * geo.coords[2][0],
        bary[0] * geo.coords[0][1] + bary[1] * geo.coords[1][1] + bary[2] * geo.coords[2][1],
    ]
}

fn check_finite(v: f64, element: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Assembly {
            element,
            message: format!("non-finite coefficient {v}"),
        })
    }
}

/// Stiffness operator with a scalar coefficient:
/// entries int coeff * grad Ns . grad Nr dOmega.
pub fn assemble_stiffness(
    mesh: &Mesh,
    rule: QuadRule,
    coeff: impl Fn(usize, &QuadPoint) -> f64,
) -> Result<SparseOperator> {
    assemble_stiffness_tensor(mesh, rule, |t, qp| {
        let c = coeff(t, qp);
        [[c, 0.0], [0.0, c]]
    })
}

/// Stiffness operator with a 2x2 tensor coefficient:
/// entries int (coeff grad Ns) . grad Nr dOmega.
pub fn assemble_stiffness_tensor(
    mesh: &Mesh,
    rule: QuadRule,
    coeff: impl Fn(usize, &QuadPoint) -> Tensor2,
) -> Result<SparseOperator> {
    let n = mesh.n_nodes();
    let mut coo = CooBuilder::with_capacity(n, 9 * mesh.triangles.len());
    for t in 0..mesh.triangles.len() {
        let geo = element_geometry(mesh, t);
        let nodes = mesh.triangles[t].nodes;
        let mut k = [[0.0f64; 3]; 3];
        for &(bary, w) in rule.points() {
            let qp = QuadPoint {
                bary,
                coords: qp_coords(&geo, bary),
            };
            let c = coeff(t, &qp);
            for v in [c[0][0], c[0][1], c[1][0], c[1][1]] {
                check_finite(v, t)?;
            }
            let scale = w * geo.area * volume_weight(mesh.mode, qp.coords);
            for s in 0..3 {
                let cg = [
                    c[0][0] * geo.grads[s][0] + c[0][1] * geo.grads[s][1],
                    c[1][0] * geo.grads[s][0] + c[1][1] * geo.grads[s][1],
                ];
                for r in 0..3 {
                    k[r][s] += scale * (cg[0] * geo.grads[r][0] + cg[1] * geo.grads[r][1]);
                }
            }
        }
        for r in 0..3 {
            for s in 0..3 {
                coo.push(nodes[r] as usize, nodes[s] as usize, k[r][s]);
            }
        }
    }
    Ok(coo.build(true))
}

/// Mass operator: entries int coeff * Ns * Nr dOmega.
pub fn assemble_mass(
    mesh: &Mesh,
    rule: QuadRule,
    coeff: impl Fn(usize, &QuadPoint) -> f64,
) -> Result<SparseOperator> {
    let n = mesh.n_nodes();
    let mut coo = CooBuilder::with_capacity(n, 9 * mesh.triangles.len());
    for t in 0..mesh.triangles.len() {
        let geo = element_geometry(mesh, t);
        let nodes = mesh.triangles[t].nodes;
        let mut m = [[0.0f64; 3]; 3];
        for &(bary, w) in rule.points() {
            let qp = QuadPoint {
                bary,
                coords: qp_coords(&geo, bary),
            };
            let c = check_finite(coeff(t, &qp), t)?;
            let scale = w * geo.area * volume_weight(mesh.mode, qp.coords) * c;
            for r in 0..3 {
                for s in 0..3 {
                    m[r][s] += scale * bary[r] * bary[s];
                }
            }
        }
        for r in 0..3 {
            for s in 0..3 {
                coo.push(nodes[r] as usize, nodes[s] as usize, m[r][s]);
            }
        }
    }
    Ok(coo.build(true))
}

/// Vector-weighted operator: entries int (b . grad Ns) * Nr dOmega.
/// Generally nonsymmetric; its transpose appears in the adjoint equations.
pub fn assemble_vector_weighted(
    mesh: &Mesh,
    rule: QuadRule,
    b: impl Fn(usize, &QuadPoint) -> Vec2,
) -> Result<SparseOperator> {
    let n = mesh.n_nodes();
    let mut coo = CooBuilder::with_capacity(n, 9 * mesh.triangles.len());
    for t in 0..mesh.triangles.len() {
        let geo = element_geometry(mesh, t);
        let nodes = mesh.triangles[t].nodes;
        let mut a = [[0.0f64; 3]; 3];
        for &(bary, w) in rule.points() {
            let qp = QuadPoint {
                bary,
                coords: qp_coords(&geo, bary),
            };
            let bv = b(t, &qp);
            check_finite(bv[0], t)?;
            check_finite(bv[1], t)?;
            let scale = w * geo.area * volume_weight(mesh.mode, qp.coords);
            for s in 0..3 {
                let bg = bv[0] * geo.grads[s][0] + bv[1] * geo.grads[s][1];
                for r in 0..3 {
                    a[r][s] += scale * bg * bary[r];
                }
            }
        }
        for r in 0..3 {
            for s in 0..3 {
                coo.push(nodes[r] as usize, nodes[s] as usize, a[r][s]);
            }
        }
    }
    Ok(coo.build(false))
}

/// Load vector: entries int f * Nr dOmega.
pub fn assemble_load(
    mesh: &Mesh,
    rule: QuadRule,
    f: impl Fn(usize, &QuadPoint) -> f64,
) -> Result<LoadVector> {
    let mut out = vec![0.0; mesh.n_nodes()];
    for t in 0..mesh.triangles.len() {
        let geo = element_geometry(mesh, t);
        let nodes = mesh.triangles[t].nodes;
        for &(bary, w) in rule.points() {
            let qp = QuadPoint {
                bary,
                coords: qp_coords(&geo, bary),
            };
            let fv = check_finite(f(t, &qp), t)?;
            let scale = w * geo.area * volume_weight(mesh.mode, qp.coords) * fv;
            for r in 0..3 {
                out[nodes[r] as usize] += scale * bary[r];
            }
        }
    }
    Ok(out)
}

/// Prescribed nodal values of one physics (electric or thermal).
#[derive(Debug, Clone)]
pub struct DirichletBc {
    n: usize,
    values: BTreeMap<u32, f64>,
}

impl DirichletBc {
    pub fn new(n: usize) -> Self {
        DirichletBc {
            n,
            values: BTreeMap::new(),
        }
    }

    /// Fix all nodes on the given boundary tags at per-tag values.
    pub fn from_tags(mesh: &Mesh, tags: &[(i32, f64)]) -> Result<DirichletBc> {
        let mut bc = DirichletBc::new(mesh.n_nodes());
        for &(tag, value) in tags {
            let nodes = mesh.nodes_on_boundary(tag);
            if nodes.is_empty() {
                return Err(CoreError::BoundaryCondition(format!(
                    "boundary tag {tag} has no edges in the mesh"
                )));
            }
            for node in nodes {
                bc.set(node, value)?;
            }
        }
        Ok(bc)
    }

    /// Fix individual nodes; each must lie on some tagged boundary edge.
    pub fn from_nodes(mesh: &Mesh, pairs: &[(u32, f64)]) -> Result<DirichletBc> {
        let mut bc = DirichletBc::new(mesh.n_nodes());
        for &(node, value) in pairs {
            if !mesh.node_on_any_tagged_boundary(node) {
                return Err(CoreError::BoundaryCondition(format!(
                    "node {node} is not on any tagged boundary"
                )));
            }
            bc.set(node, value)?;
        }
        Ok(bc)
    }

    pub fn set(&mut self, node: u32, value: f64) -> Result<()> {
        if node as usize >= self.n {
            return Err(CoreError::BoundaryCondition(format!(
                "node {node} out of bounds"
            )));
        }
        if let Some(&old) = self.values.get(&node) {
            if old != value {
                return Err(CoreError::BoundaryCondition(format!(
                    "node {node} prescribed twice with different values {old} and {value}"
                )));
            }
        }
        self.values.insert(node, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_fixed(&self, node: usize) -> bool {
        self.values.contains_key(&(node as u32))
    }

    pub fn free_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.n];
        for &node in self.values.keys() {
            mask[node as usize] = false;
        }
        mask
    }

    /// Full-length vector with prescribed values at fixed nodes, 0 elsewhere.
    pub fn fixed_values(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        for (&node, &val) in &self.values {
            v[node as usize] = val;
        }
        v
    }

    /// Overwrite fixed entries of `x` with the prescribed values.
    pub fn impose(&self, x: &mut [f64]) {
        for (&node, &val) in &self.values {
            x[node as usize] = val;
        }
    }

    /// Zero the fixed entries of `x` (used for residuals and adjoints).
    pub fn zero_fixed(&self, x: &mut [f64]) {
        for &node in self.values.keys() {
            x[node as usize] = 0.0;
        }
    }

    /// Same constrained nodes, all values zero.
    pub fn homogeneous(&self) -> DirichletBc {
        DirichletBc {
            n: self.n,
            values: self.values.keys().map(|&k| (k, 0.0)).collect(),
        }
    }

    /// Same constrained nodes, values from a time-dependent source.
    pub fn with_values(&self, f: impl Fn(u32) -> f64) -> DirichletBc {
        DirichletBc {
            n: self.n,
            values: self.values.keys().map(|&k| (k, f(k))).collect(),
        }
    }
}

/// System after Dirichlet elimination: fixed DoFs removed from the matrix
/// and their coupling moved to the right-hand side.
pub struct ReducedSystem<'a> {
    pub matrix: &'a SparseOperator,
    pub rhs: Vec<f64>,
    pub bc: &'a DirichletBc,
}

/// Eliminate constrained DoFs: free rows of the right-hand side receive
/// `-K_{free,fixed} * values`, fixed rows are dropped from the solve.
pub fn apply_dirichlet<'a>(
    matrix: &'a SparseOperator,
    rhs: &[f64],
    bc: &'a DirichletBc,
) -> ReducedSystem<'a> {
    let fixed = bc.fixed_values();
    let coupling = matrix.mul_vec(&fixed);
    let mut reduced = rhs.to_vec();
    for i in 0..reduced.len() {
        reduced[i] -= coupling[i];
    }
    bc.zero_fixed(&mut reduced);
    ReducedSystem {
        matrix,
        rhs: reduced,
        bc,
    }
}

impl ReducedSystem<'_> {
    /// Factor and solve; prescribed values are reproduced exactly.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let solver = SpdSolver::factor(self.matrix, &self.bc.free_mask())?;
        Ok(self.solve_with(&solver))
    }

    /// Solve with an existing factorization of the same matrix, applying
    /// iterative refinement; prescribed values are reproduced exactly.
    pub fn solve_with(&self, solver: &SpdSolver) -> Vec<f64> {
        let mut x = solver.solve_refined(self.matrix, &self.rhs);
        self.bc.impose(&mut x);
        x
    }
}
