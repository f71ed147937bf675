//! Triangular meshes in planar (x, y) or axisymmetric (rho, z) mode, with
//! region tags on triangles and boundary tags on edges.
//!
//! Meshes come from three sources: the built-in layered-rectangle generator,
//! the native text format (round-trip safe, used for fixtures), and a subset
//! of the Gmsh MSH 2.2 ASCII format.

use crate::error::{CoreError, Result};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshMode {
    /// Coordinates are (rho, z); integrals carry the 2*pi*rho weight.
    Axisymmetric,
    /// Coordinates are (x, y); integrals are per unit depth.
    Planar,
}

impl MeshMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MeshMode::Axisymmetric => "axisymmetric",
            MeshMode::Planar => "planar",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Triangle {
    pub nodes: [u32; 3],
    pub region: i32,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    pub nodes: [u32; 2],
    pub tag: i32,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<Triangle>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub mode: MeshMode,
    /// Optional symbolic names for region tags (generator fills these).
    pub region_names: BTreeMap<String, i32>,
    /// Optional symbolic names for boundary tags.
    pub boundary_names: BTreeMap<String, i32>,
}

impl Mesh {
    /// Validates invariants and fixes triangle orientation so that every
    /// signed area is positive.
    pub fn new(
        nodes: Vec<[f64; 2]>,
        mut triangles: Vec<Triangle>,
        boundary_edges: Vec<BoundaryEdge>,
        mode: MeshMode,
    ) -> Result<Mesh> {
        let n = nodes.len();
        if mode == MeshMode::Axisymmetric {
            for (i, p) in nodes.iter().enumerate() {
                if p[0] < 0.0 {
                    return Err(CoreError::Mesh(format!(
                        "node {i} has negative radial coordinate {} in axisymmetric mode",
                        p[0]
                    )));
                }
            }
        }
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &v in &tri.nodes {
                if v as usize >= n {
                    return Err(CoreError::Mesh(format!(
                        "triangle {t} references node {v} out of bounds"
                    )));
                }
            }
            let a = signed_area(&nodes, tri.nodes);
            if a == 0.0 || !a.is_finite() {
                return Err(CoreError::Mesh(format!("triangle {t} is degenerate")));
            }
            if a < 0.0 {
                tri.nodes.swap(1, 2);
            }
        }
        for (e, edge) in boundary_edges.iter().enumerate() {
            if edge.nodes[0] == edge.nodes[1] {
                return Err(CoreError::Mesh(format!("boundary edge {e} is degenerate")));
            }
            for &v in &edge.nodes {
                if v as usize >= n {
                    return Err(CoreError::Mesh(format!(
                        "boundary edge {e} references node {v} out of bounds"
                    )));
                }
            }
        }
        Ok(Mesh {
            nodes,
            triangles,
            boundary_edges,
            mode,
            region_names: BTreeMap::new(),
            boundary_names: BTreeMap::new(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn tri_coords(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = &self.triangles[t];
        [
            self.nodes[tri.nodes[0] as usize],
            self.nodes[tri.nodes[1] as usize],
            self.nodes[tri.nodes[2] as usize],
        ]
    }

    pub fn tri_area(&self, t: usize) -> f64 {
        signed_area(&self.nodes, self.triangles[t].nodes)
    }

    /// Longest edge over all triangles.
    pub fn max_edge_length(&self) -> f64 {
        let mut worst = 0.0f64;
        for tri in &self.triangles {
            for k in 0..3 {
                let a = self.nodes[tri.nodes[k] as usize];
                let b = self.nodes[tri.nodes[(k + 1) % 3] as usize];
                worst = worst.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        worst
    }

    /// Resolve a region identifier: symbolic name first, then a numeric tag.
    pub fn region_tag(&self, name: &str) -> Result<i32> {
        if let Some(&t) = self.region_names.get(name) {
            return Ok(t);
        }
        if let Ok(t) = name.parse::<i32>() {
            if self.triangles.iter().any(|tri| tri.region == t) {
                return Ok(t);
            }
        }
        Err(CoreError::Mesh(format!("unknown region '{name}'")))
    }

    /// Resolve a boundary identifier: symbolic name first, then numeric.
    pub fn boundary_tag(&self, name: &str) -> Result<i32> {
        if let Some(&t) = self.boundary_names.get(name) {
            return Ok(t);
        }
        if let Ok(t) = name.parse::<i32>() {
            if self.boundary_edges.iter().any(|e| e.tag == t) {
                return Ok(t);
            }
        }
        Err(CoreError::Mesh(format!("unknown boundary '{name}'")))
    }

    /// Sorted node indices lying on edges with the given boundary tag.
    pub fn nodes_on_boundary(&self, tag: i32) -> Vec<u32> {
        let mut set = BTreeSet::new();
        for e in &self.boundary_edges {
            if e.tag == tag {
                set.insert(e.nodes[0]);
                set.insert(e.nodes[1]);
            }
        }
        set.into_iter().collect()
    }

    pub fn node_on_any_tagged_boundary(&self, node: u32) -> bool {
        self.boundary_edges
            .iter()
            .any(|e| e.nodes[0] == node || e.nodes[1] == node)
    }

    /// Containing triangle and barycentric coordinates of a point, if any.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let tol = -1e-12 * self.max_extent();
        for t in 0..self.triangles.len() {
            let c = self.tri_coords(t);
            let area = self.tri_area(t);
            let l0 = cross(sub(c[1], p), sub(c[2], p)) / (2.0 * area);
            let l1 = cross(sub(c[2], p), sub(c[0], p)) / (2.0 * area);
            let l2 = 1.0 - l0 - l1;
            if l0 >= tol && l1 >= tol && l2 >= tol {
                return Some((t, [l0, l1, l2]));
            }
        }
        None
    }

    fn max_extent(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|p| p.iter())
            .fold(1.0f64, |m, &c| m.max(c.abs()))
    }

    /// Serialize to the native text format (see the repository README for
    /// the grammar). The output re-parses bit-identically.
    pub fn to_native(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "eqstmesh 1");
        let _ = writeln!(s, "mode {}", self.mode.as_str());
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{} {}", p[0], p[1]);
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {} {}", t.nodes[0], t.nodes[1], t.nodes[2], t.region);
        }
        let _ = writeln!(s, "edges {}", self.boundary_edges.len());
        for e in &self.boundary_edges {
            let _ = writeln!(s, "{} {} {}", e.nodes[0], e.nodes[1], e.tag);
        }
        let names = self.region_names.len() + self.boundary_names.len();
        let _ = writeln!(s, "names {names}");
        for (name, tag) in &self.region_names {
            let _ = writeln!(s, "region {name} {tag}");
        }
        for (name, tag) in &self.boundary_names {
            let _ = writeln!(s, "boundary {name} {tag}");
        }
        s
    }

    pub fn from_native(text: &str) -> Result<Mesh> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            for (i, raw) in lines.by_ref() {
                let t = raw.trim();
                if !t.is_empty() {
                    return Ok((i + 1, t));
                }
            }
            Err(CoreError::MeshParse {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let perr = |line: usize, message: String| CoreError::MeshParse { line, message };

        let (l, header) = next("header")?;
        if header != "eqstmesh 1" {
            return Err(perr(l, format!("bad header '{header}'")));
        }
        let (l, mode_line) = next("mode")?;
        let mode = match mode_line.strip_prefix("mode ").map(str::trim) {
            Some("axisymmetric") => MeshMode::Axisymmetric,
            Some("planar") => MeshMode::Planar,
            _ => return Err(perr(l, format!("bad mode line '{mode_line}'"))),
        };

        let section_count = |line: usize, s: &str, key: &str| -> Result<usize> {
            s.strip_prefix(key)
                .and_then(|rest| rest.trim().parse::<usize>().ok())
                .ok_or_else(|| perr(line, format!("expected '{key} <count>', got '{s}'")))
        };

        let (l, s) = next("nodes")?;
        let n_nodes = section_count(l, s, "nodes")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (l, s) = next("node coordinates")?;
            let mut it = s.split_whitespace();
            let x: f64 = parse_field(&mut it, l, "x")?;
            let y: f64 = parse_field(&mut it, l, "y")?;
            nodes.push([x, y]);
        }

        let (l, s) = next("triangles")?;
        let n_tri = section_count(l, s, "triangles")?;
        let mut triangles = Vec::with_capacity(n_tri);
        for _ in 0..n_tri {
            let (l, s) = next("triangle")?;
            let mut it = s.split_whitespace();
            let a: u32 = parse_field(&mut it, l, "node index")?;
            let b: u32 = parse_field(&mut it, l, "node index")?;
            let c: u32 = parse_field(&mut it, l, "node index")?;
            let region: i32 = parse_field(&mut it, l, "region tag")?;
            triangles.push(Triangle {
                nodes: [a, b, c],
                region,
            });
        }

        let (l, s) = next("edges")?;
        let n_edges = section_count(l, s, "edges")?;
        let mut boundary_edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let (l, s) = next("edge")?;
            let mut it = s.split_whitespace();
            let a: u32 = parse_field(&mut it, l, "node index")?;
            let b: u32 = parse_field(&mut it, l, "node index")?;
            let tag: i32 = parse_field(&mut it, l, "boundary tag")?;
            boundary_edges.push(BoundaryEdge { nodes: [a, b], tag });
        }

        let mut mesh = Mesh::new(nodes, triangles, boundary_edges, mode)?;

        let (l, s) = next("names")?;
        let n_names = section_count(l, s, "names")?;
        for _ in 0..n_names {
            let (l, s) = next("name entry")?;
            let mut it = s.split_whitespace();
            let kind = it.next().ok_or_else(|| perr(l, "missing name kind".into()))?;
            let name = it
                .next()
                .ok_or_else(|| perr(l, "missing name".into()))?
                .to_string();
            let tag: i32 = parse_field(&mut it, l, "tag")?;
            match kind {
                "region" => mesh.region_names.insert(name, tag),
                "boundary" => mesh.boundary_names.insert(name, tag),
                other => return Err(perr(l, format!("unknown name kind '{other}'"))),
            };
        }
        Ok(mesh)
    }
}

fn parse_field<T: std::str::FromStr>(
    it: &mut std::str::SplitWhitespace<'_>,
    line: usize,
    what: &str,
) -> Result<T> {
    it.next()
        .and_then(|tok| tok.parse::<T>().ok())
        .ok_or_else(|| CoreError::MeshParse {
            line,
            message: format!("missing or malformed {what}"),
        })
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn signed_area(nodes: &[[f64; 2]], tri: [u32; 3]) -> f64 {
    let a = nodes[tri[0] as usize];
    let b = nodes[tri[1] as usize];
    let c = nodes[tri[2] as usize];
    0.5 * cross(sub(b, a), sub(c, a))
}

// ---------------------------------------------------------------------------
// Layered-rectangle generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// rho in axisymmetric mode, x in planar mode.
    Horizontal,
    /// z in axisymmetric mode, y in planar mode.
    Vertical,
}

/// Axis-aligned subregion of a layered geometry.
#[derive(Debug, Clone)]
pub struct Rectangle {
    pub region: String,
    /// [min, max] along the horizontal axis (rho or x).
    pub h_range: [f64; 2],
    /// [min, max] along the vertical axis (z or y).
    pub v_range: [f64; 2],
}

/// Rule assigning a boundary tag to mesh edges lying on an axis-aligned
/// line. Applies to outer-boundary edges and region interfaces.
#[derive(Debug, Clone)]
pub struct BoundaryRule {
    pub tag: String,
    pub axis: Axis,
    pub at: f64,
    /// Optional restriction on the other coordinate.
    pub span: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct GeometrySpec {
    pub mode: MeshMode,
    pub rectangles: Vec<Rectangle>,
    pub h_target: f64,
    pub boundary_rules: Vec<BoundaryRule>,
}

impl GeometrySpec {
    fn validate(&self) -> Result<()> {
        if !(self.h_target > 0.0) {
            return Err(CoreError::Mesh(format!(
                "h_target must be positive, got {}",
                self.h_target
            )));
        }
        if self.rectangles.is_empty() {
            return Err(CoreError::Mesh("geometry has no rectangles".into()));
        }
        for (i, r) in self.rectangles.iter().enumerate() {
            if !(r.h_range[1] > r.h_range[0]) || !(r.v_range[1] > r.v_range[0]) {
                return Err(CoreError::Mesh(format!(
                    "rectangle {i} ('{}') has empty extent",
                    r.region
                )));
            }
            if self.mode == MeshMode::Axisymmetric && r.h_range[0] < 0.0 {
                return Err(CoreError::Mesh(format!(
                    "rectangle {i} ('{}') extends to negative radius",
                    r.region
                )));
            }
        }
        for i in 0..self.rectangles.len() {
            for j in i + 1..self.rectangles.len() {
                let (a, b) = (&self.rectangles[i], &self.rectangles[j]);
                let overlap_h = a.h_range[0] < b.h_range[1] && b.h_range[0] < a.h_range[1];
                let overlap_v = a.v_range[0] < b.v_range[1] && b.v_range[0] < a.v_range[1];
                if overlap_h && overlap_v {
                    return Err(CoreError::Mesh(format!(
                        "rectangles {i} ('{}') and {j} ('{}') overlap",
                        a.region, b.region
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Structured triangulation of a layered-rectangle geometry.
///
/// Every rectangle edge coordinate becomes a global breakpoint, and each
/// breakpoint span is subdivided uniformly with steps at most `h_target`,
/// so adjacent rectangles share their interface nodes exactly.
pub fn generate_layered_mesh(spec: &GeometrySpec) -> Result<Mesh> {
    spec.validate()?;
    let h = spec.h_target;

    let xs = grid_coords(spec.rectangles.iter().flat_map(|r| r.h_range), h);
    let ys = grid_coords(spec.rectangles.iter().flat_map(|r| r.v_range), h);
    let nx = xs.len();
    let ny = ys.len();

    // region of each fine cell, by cell midpoint; -1 = outside
    let mut region_names = BTreeMap::new();
    let mut cell_region = vec![-1i32; (nx - 1) * (ny - 1)];
    let cell_at = |a: usize, b: usize| b * (nx - 1) + a;
    for b in 0..ny - 1 {
        for a in 0..nx - 1 {
            let cx = 0.5 * (xs[a] + xs[a + 1]);
            let cy = 0.5 * (ys[b] + ys[b + 1]);
            for r in &spec.rectangles {
                if cx > r.h_range[0] && cx < r.h_range[1] && cy > r.v_range[0] && cy < r.v_range[1]
                {
                    let next_tag = region_names.len() as i32 + 1;
                    let tag = *region_names.entry(r.region.clone()).or_insert(next_tag);
                    cell_region[cell_at(a, b)] = tag;
                    break;
                }
            }
        }
    }

    // connectivity of the covered cells
    let covered: Vec<usize> = (0..cell_region.len())
        .filter(|&c| cell_region[c] >= 0)
        .collect();
    if covered.is_empty() {
        return Err(CoreError::Mesh("geometry covers no cells".into()));
    }
    let mut seen = vec![false; cell_region.len()];
    let mut queue = VecDeque::from([covered[0]]);
    seen[covered[0]] = true;
    let mut reached = 1usize;
    while let Some(c) = queue.pop_front() {
        let (a, b) = (c % (nx - 1), c / (nx - 1));
        let mut push = |a2: usize, b2: usize| {
            let c2 = cell_at(a2, b2);
            if cell_region[c2] >= 0 && !seen[c2] {
                seen[c2] = true;
                reached += 1;
                queue.push_back(c2);
            }
        };
        if a > 0 {
            push(a - 1, b);
        }
        if a + 1 < nx - 1 {
            push(a + 1, b);
        }
        if b > 0 {
            push(a, b - 1);
        }
        if b + 1 < ny - 1 {
            push(a, b + 1);
        }
    }
    if reached != covered.len() {
        return Err(CoreError::Mesh(
            "rectangles do not tile a connected domain".into(),
        ));
    }

    // nodes used by covered cells
    let mut node_id = vec![u32::MAX; nx * ny];
    let mut nodes: Vec<[f64; 2]> = Vec::new();
    let lattice = |a: usize, b: usize| b * nx + a;
    for b in 0..ny - 1 {
        for a in 0..nx - 1 {
            if cell_region[cell_at(a, b)] < 0 {
                continue;
            }
            for (da, db) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let l = lattice(a + da, b + db);
                if node_id[l] == u32::MAX {
                    node_id[l] = nodes.len() as u32;
                    nodes.push([xs[a + da], ys[b + db]]);
                }
            }
        }
    }

    // triangles: split each covered quad along the ll-ur diagonal
    let mut triangles = Vec::new();
    for b in 0..ny - 1 {
        for a in 0..nx - 1 {
            let region = cell_region[cell_at(a, b)];
            if region < 0 {
                continue;
            }
            let ll = node_id[lattice(a, b)];
            let lr = node_id[lattice(a + 1, b)];
            let ul = node_id[lattice(a, b + 1)];
            let ur = node_id[lattice(a + 1, b + 1)];
            triangles.push(Triangle {
                nodes: [ll, lr, ur],
                region,
            });
            triangles.push(Triangle {
                nodes: [ll, ur, ul],
                region,
            });
        }
    }

    // boundary edges: outer edges and region interfaces matched by rules
    let mut boundary_names = BTreeMap::new();
    let mut boundary_edges = Vec::new();
    let scale = xs
        .iter()
        .chain(ys.iter())
        .fold(1.0f64, |m, &c| m.max(c.abs()));
    let tol = 1e-12 * scale;
    let region_at = |a: i64, b: i64| -> i32 {
        if a < 0 || b < 0 || a >= (nx - 1) as i64 || b >= (ny - 1) as i64 {
            return -1;
        }
        cell_region[cell_at(a as usize, b as usize)]
    };
    let mut tag_edge = |n0: usize, n1: usize, mid: [f64; 2], axis: Axis| {
        for rule in &spec.boundary_rules {
            if rule.axis != axis {
                continue;
            }
            let (along, across) = match axis {
                Axis::Horizontal => (mid[0], mid[1]),
                Axis::Vertical => (mid[1], mid[0]),
            };
            if (along - rule.at).abs() > tol {
                continue;
            }
            if let Some(span) = rule.span {
                if across < span[0] - tol || across > span[1] + tol {
                    continue;
                }
            }
            let next_tag = boundary_names.len() as i32 + 101;
            let tag = *boundary_names.entry(rule.tag.clone()).or_insert(next_tag);
            boundary_edges.push(BoundaryEdge {
                nodes: [node_id[n0], node_id[n1]],
                tag,
            });
            return;
        }
    };
    // vertical lattice edges separate horizontally adjacent cells
    for a in 0..nx {
        for b in 0..ny - 1 {
            let left = region_at(a as i64 - 1, b as i64);
            let right = region_at(a as i64, b as i64);
            if left == right || (left < 0 && right < 0) {
                continue;
            }
            let mid = [xs[a], 0.5 * (ys[b] + ys[b + 1])];
            tag_edge(lattice(a, b), lattice(a, b + 1), mid, Axis::Horizontal);
        }
    }
    // horizontal lattice edges separate vertically adjacent cells
    for b in 0..ny {
        for a in 0..nx - 1 {
            let below = region_at(a as i64, b as i64 - 1);
            let above = region_at(a as i64, b as i64);
            if below == above || (below < 0 && above < 0) {
                continue;
            }
            let mid = [0.5 * (xs[a] + xs[a + 1]), ys[b]];
            tag_edge(lattice(a, b), lattice(a + 1, b), mid, Axis::Vertical);
        }
    }

    for rule in &spec.boundary_rules {
        if !boundary_names.contains_key(&rule.tag) {
            return Err(CoreError::Mesh(format!(
                "boundary rule '{}' matched no mesh edges",
                rule.tag
            )));
        }
    }

    let mut mesh = Mesh::new(nodes, triangles, boundary_edges, spec.mode)?;
    mesh.region_names = region_names;
    mesh.boundary_names = boundary_names;
    Ok(mesh)
}

/// Global grid coordinates: breakpoints from the rectangle bounds, each span
/// subdivided uniformly with step <= h.
fn grid_coords(bounds: impl Iterator<Item = f64>, h: f64) -> Vec<f64> {
    let mut breaks: Vec<f64> = bounds.collect();
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300));
    let mut coords = vec![breaks[0]];
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let n = ((hi - lo) / h).ceil().max(1.0) as usize;
        for k in 1..=n {
            coords.push(lo + (hi - lo) * k as f64 / n as f64);
        }
    }
    coords
}

// ---------------------------------------------------------------------------
// Gmsh MSH 2.2 import
// ---------------------------------------------------------------------------

/// Parse the ASCII Gmsh MSH 2.2 subset: `$MeshFormat`, `$Nodes` and
/// `$Elements` blocks with element types 1 (2-node line, boundary edge) and
/// 2 (3-node triangle). The first physical tag becomes the region or
/// boundary tag. Unreferenced nodes are dropped.
pub fn import_msh(text: &str, mode: MeshMode) -> Result<Mesh> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .collect();
    let perr = |line: usize, message: String| CoreError::MeshParse { line, message };

    let mut i = 0usize;
    let mut node_map: BTreeMap<u64, usize> = BTreeMap::new();
    let mut raw_nodes: Vec<[f64; 2]> = Vec::new();
    let mut triangles: Vec<Triangle> = Vec::new();
    let mut boundary_edges: Vec<BoundaryEdge> = Vec::new();
    let mut saw_format = false;

    while i < lines.len() {
        let (ln, line) = lines[i];
        if line == "$MeshFormat" {
            let (ln2, fmt) = *lines
                .get(i + 1)
                .ok_or_else(|| perr(ln, "truncated $MeshFormat".into()))?;
            let version = fmt.split_whitespace().next().unwrap_or("");
            if version != "2.2" {
                return Err(perr(ln2, format!("unsupported MSH version '{version}'")));
            }
            saw_format = true;
            i = skip_to_end(&lines, i, "$EndMeshFormat")?;
        } else if line == "$Nodes" {
            let (ln2, cnt) = *lines
                .get(i + 1)
                .ok_or_else(|| perr(ln, "truncated $Nodes".into()))?;
            let count: usize = cnt
                .parse()
                .map_err(|_| perr(ln2, format!("bad node count '{cnt}'")))?;
            for k in 0..count {
                let (ln3, s) = *lines
                    .get(i + 2 + k)
                    .ok_or_else(|| perr(ln2, "truncated node list".into()))?;
                let mut it = s.split_whitespace();
                let id: u64 = parse_tok(&mut it, ln3, "node id")?;
                let x: f64 = parse_tok(&mut it, ln3, "x coordinate")?;
                let y: f64 = parse_tok(&mut it, ln3, "y coordinate")?;
                node_map.insert(id, raw_nodes.len());
                raw_nodes.push([x, y]);
            }
            i = skip_to_end(&lines, i, "$EndNodes")?;
        } else if line == "$Elements" {
            let (ln2, cnt) = *lines
                .get(i + 1)
                .ok_or_else(|| perr(ln, "truncated $Elements".into()))?;
            let count: usize = cnt
                .parse()
                .map_err(|_| perr(ln2, format!("bad element count '{cnt}'")))?;
            for k in 0..count {
                let (ln3, s) = *lines
                    .get(i + 2 + k)
                    .ok_or_else(|| perr(ln2, "truncated element list".into()))?;
                let mut it = s.split_whitespace();
                let _id: u64 = parse_tok(&mut it, ln3, "element id")?;
                let etype: u32 = parse_tok(&mut it, ln3, "element type")?;
                let ntags: usize = parse_tok(&mut it, ln3, "tag count")?;
                let mut tags = Vec::with_capacity(ntags);
                for _ in 0..ntags {
                    let t: i32 = parse_tok(&mut it, ln3, "tag")?;
                    tags.push(t);
                }
                let tag = tags.first().copied().unwrap_or(0);
                let mut node = |what| -> Result<u32> {
                    let id: u64 = parse_tok(&mut it, ln3, what)?;
                    node_map
                        .get(&id)
                        .map(|&k| k as u32)
                        .ok_or_else(|| perr(ln3, format!("element references unknown node {id}")))
                };
                match etype {
                    1 => {
                        let a = node("edge node")?;
                        let b = node("edge node")?;
                        boundary_edges.push(BoundaryEdge { nodes: [a, b], tag });
                    }
                    2 => {
                        let a = node("triangle node")?;
                        let b = node("triangle node")?;
                        let c = node("triangle node")?;
                        triangles.push(Triangle {
                            nodes: [a, b, c],
                            region: tag,
                        });
                    }
                    other => {
                        return Err(perr(ln3, format!("unsupported element type {other}")));
                    }
                }
            }
            i = skip_to_end(&lines, i, "$EndElements")?;
        } else if line.starts_with('$') && !line.starts_with("$End") {
            // unknown section; skip to its matching end marker
            let end = format!("$End{}", &line[1..]);
            i = skip_to_end(&lines, i, &end)?;
        } else {
            i += 1;
        }
    }

    if !saw_format {
        return Err(perr(1, "missing $MeshFormat section".into()));
    }

    // Drop unreferenced nodes.
    let mut used = vec![false; raw_nodes.len()];
    for t in &triangles {
        for &v in &t.nodes {
            used[v as usize] = true;
        }
    }
    for e in &boundary_edges {
        for &v in &e.nodes {
            used[v as usize] = true;
        }
    }
    let mut remap = vec![u32::MAX; raw_nodes.len()];
    let mut nodes = Vec::new();
    for (k, &u) in used.iter().enumerate() {
        if u {
            remap[k] = nodes.len() as u32;
            nodes.push(raw_nodes[k]);
        }
    }
    for t in &mut triangles {
        for v in &mut t.nodes {
            *v = remap[*v as usize];
        }
    }
    for e in &mut boundary_edges {
        for v in &mut e.nodes {
            *v = remap[*v as usize];
        }
    }

    Mesh::new(nodes, triangles, boundary_edges, mode)
}

fn parse_tok<T: std::str::FromStr>(
    it: &mut std::str::SplitWhitespace<'_>,
    line: usize,
    what: &str,
) -> Result<T> {
    it.next()
        .and_then(|tok| tok.parse::<T>().ok())
        .ok_or_else(|| CoreError::MeshParse {
            line,
            message: format!("missing or malformed {what}"),
        })
}

fn skip_to_end(lines: &[(usize, &str)], from: usize, end: &str) -> Result<usize> {
    for (k, (_, l)) in lines.iter().enumerate().skip(from + 1) {
        if *l == end {
            return Ok(k + 1);
        }
    }
    Err(CoreError::MeshParse {
        line: lines[from].0,
        message: format!("missing {end}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_square_spec(h: f64) -> GeometrySpec {
        GeometrySpec {
            mode: MeshMode::Planar,
            rectangles: vec![Rectangle {
                region: "bulk".into(),
                h_range: [1.0, 2.0],
                v_range: [0.0, 1.0],
            }],
            h_target: h,
            boundary_rules: vec![
                BoundaryRule {
                    tag: "left".into(),
                    axis: Axis::Horizontal,
                    at: 1.0,
                    span: None,
                },
                BoundaryRule {
                    tag: "right".into(),
                    axis: Axis::Horizontal,
                    at: 2.0,
                    span: None,
                },
            ],
        }
    }

    #[test]
    fn minimal_tiling() {
        let mesh = generate_layered_mesh(&unit_square_spec(1.0)).unwrap();
        assert_eq!(mesh.triangles.len(), 2);
        assert_eq!(mesh.nodes.len(), 4);
    }

    #[test]
    fn half_h_gives_eight_triangles() {
        let mesh = generate_layered_mesh(&unit_square_spec(0.5)).unwrap();
        assert_eq!(mesh.triangles.len(), 8);
        assert_eq!(mesh.nodes.len(), 9);
    }

    #[test]
    fn stacked_rectangles_share_interface_nodes() {
        let spec = GeometrySpec {
            mode: MeshMode::Planar,
            rectangles: vec![
                Rectangle {
                    region: "lower".into(),
                    h_range: [0.0, 1.0],
                    v_range: [0.0, 1.0],
                },
                Rectangle {
                    region: "upper".into(),
                    h_range: [0.0, 1.0],
                    v_range: [1.0, 2.0],
                },
            ],
            h_target: 0.5,
            boundary_rules: vec![BoundaryRule {
                tag: "interface".into(),
                axis: Axis::Vertical,
                at: 1.0,
                span: None,
            }],
        };
        let mesh = generate_layered_mesh(&spec).unwrap();
        // 2x2 quads per rectangle, 3x3 nodes each, 3 shared on z=1
        assert_eq!(mesh.triangles.len(), 16);
        assert_eq!(mesh.nodes.len(), 15);
        assert_eq!(mesh.nodes_on_boundary(mesh.boundary_tag("interface").unwrap()).len(), 3);
    }

    #[test]
    fn overlap_is_rejected_naming_the_pair() {
        let spec = GeometrySpec {
            mode: MeshMode::Planar,
            rectangles: vec![
                Rectangle {
                    region: "a".into(),
                    h_range: [0.0, 1.0],
                    v_range: [0.0, 1.0],
                },
                Rectangle {
                    region: "b".into(),
                    h_range: [0.5, 1.5],
                    v_range: [0.0, 1.0],
                },
            ],
            h_target: 0.5,
            boundary_rules: vec![],
        };
        let err = generate_layered_mesh(&spec).unwrap_err().to_string();
        assert!(err.contains("overlap"), "{err}");
        assert!(err.contains('a') && err.contains('b'), "{err}");
    }

    #[test]
    fn disconnected_tiling_is_rejected() {
        let spec = GeometrySpec {
            mode: MeshMode::Planar,
            rectangles: vec![
                Rectangle {
                    region: "a".into(),
                    h_range: [0.0, 1.0],
                    v_range: [0.0, 1.0],
                },
                Rectangle {
                    region: "b".into(),
                    h_range: [2.0, 3.0],
                    v_range: [0.0, 1.0],
                },
            ],
            h_target: 0.5,
            boundary_rules: vec![],
        };
        let err = generate_layered_mesh(&spec).unwrap_err().to_string();
        assert!(err.contains("connected"), "{err}");
    }

    #[test]
    fn max_edge_length_values() {
        // single right triangle, legs 1
        let mesh = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![Triangle {
                nodes: [0, 1, 2],
                region: 1,
            }],
            vec![],
            MeshMode::Planar,
        )
        .unwrap();
        assert_relative_eq!(mesh.max_edge_length(), 2f64.sqrt());

        let m1 = generate_layered_mesh(&unit_square_spec(0.5)).unwrap();
        assert_relative_eq!(m1.max_edge_length(), 2f64.sqrt() / 2.0);
        let m2 = generate_layered_mesh(&unit_square_spec(0.25)).unwrap();
        assert_relative_eq!(m2.max_edge_length(), m1.max_edge_length() / 2.0);
    }

    #[test]
    fn halving_h_quadruples_triangle_count() {
        for h in [0.5, 0.25, 0.125] {
            let coarse = generate_layered_mesh(&unit_square_spec(h)).unwrap();
            let fine = generate_layered_mesh(&unit_square_spec(h / 2.0)).unwrap();
            assert_eq!(fine.triangles.len(), 4 * coarse.triangles.len());
            assert_relative_eq!(fine.max_edge_length(), coarse.max_edge_length() / 2.0);
        }
    }

    #[test]
    fn native_round_trip_is_bit_identical() {
        let mesh = generate_layered_mesh(&unit_square_spec(0.3)).unwrap();
        let text = mesh.to_native();
        let reread = Mesh::from_native(&text).unwrap();
        assert_eq!(reread.to_native(), text);
    }

    #[test]
    fn triangle_orientation_is_fixed_up() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![Triangle {
                nodes: [0, 2, 1], // clockwise on purpose
                region: 1,
            }],
            vec![],
            MeshMode::Planar,
        )
        .unwrap();
        assert!(mesh.tri_area(0) > 0.0);
    }

    #[test]
    fn negative_radius_rejected_in_axisymmetric_mode() {
        let err = Mesh::new(
            vec![[-0.1, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![Triangle {
                nodes: [0, 1, 2],
                region: 1,
            }],
            vec![],
            MeshMode::Axisymmetric,
        )
        .unwrap_err();
        assert!(err.to_string().contains("negative radial"));
    }

    const MSH_FIXTURE: &str = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
5
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
17 9 9 0
$EndNodes
$Elements
6
1 2 2 10 1 1 2 3
2 2 2 10 1 1 3 4
3 1 2 101 1 1 2
4 1 2 102 2 2 3
5 1 2 103 3 3 4
6 1 2 104 4 4 1
$EndElements
";

    #[test]
    fn msh_fixture_imports_with_expected_counts() {
        let mesh = import_msh(MSH_FIXTURE, MeshMode::Planar).unwrap();
        // node 17 is unreferenced and gets dropped
        assert_eq!(mesh.nodes.len(), 4);
        assert_eq!(mesh.triangles.len(), 2);
        assert_eq!(mesh.boundary_edges.len(), 4);
        assert_eq!(mesh.triangles[0].region, 10);
        assert_eq!(mesh.boundary_edges[1].tag, 102);
    }

    #[test]
    fn msh_version_41_is_rejected() {
        let text = MSH_FIXTURE.replace("2.2 0 8", "4.1 0 8");
        let err = import_msh(&text, MeshMode::Planar).unwrap_err().to_string();
        assert!(err.contains("unsupported MSH version"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn msh_quad_element_is_rejected_naming_the_type() {
        let text = MSH_FIXTURE.replace("1 2 2 10 1 1 2 3", "1 3 2 10 1 1 2 3 4");
        let err = import_msh(&text, MeshMode::Planar).unwrap_err().to_string();
        assert!(err.contains("unsupported element type 3"), "{err}");
    }

    #[test]
    fn msh_negative_radius_rejected_in_axisymmetric_mode() {
        let text = MSH_FIXTURE.replace("1 0 0 0", "1 -0.5 0 0");
        let err = import_msh(&text, MeshMode::Axisymmetric).unwrap_err().to_string();
        assert!(err.contains("negative radial"), "{err}");
    }

    #[test]
    fn locate_finds_containing_triangle() {
        let mesh = generate_layered_mesh(&unit_square_spec(0.5)).unwrap();
        let (t, bary) = mesh.locate([1.3, 0.4]).unwrap();
        assert!(t < mesh.triangles.len());
        let c = mesh.tri_coords(t);
        let x = bary[0] * c[0][0] + bary[1] * c[1][0] + bary[2] * c[2][0];
        let y = bary[0] * c[0][1] + bary[1] * c[1][1] + bary[2] * c[2][1];
        assert_relative_eq!(x, 1.3, epsilon = 1e-12);
        assert_relative_eq!(y, 0.4, epsilon = 1e-12);
        assert!(mesh.locate([5.0, 5.0]).is_none());
    }
}
