//! Sparse matrices and a direct solver for the symmetric positive definite
//! systems produced by the FE discretization.
//!
//! Every linear system in this crate (forward Newton steps, thermal steps,
//! adjoint steps, direct-sensitivity steps) is symmetric positive definite
//! after Dirichlet elimination, so a single factorization kernel suffices:
//! reverse Cuthill-McKee reordering followed by a skyline LDL^T
//! factorization without pivoting.

use crate::error::{CoreError, Result};

/// Compressed sparse row matrix with summed duplicates.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    symmetric: bool,
}

/// Triplet accumulator used by the assembly routines.
#[derive(Debug, Clone)]
pub struct CooBuilder {
    n: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl CooBuilder {
    pub fn new(n: usize) -> Self {
        CooBuilder {
            n,
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        CooBuilder {
            n,
            rows: Vec::with_capacity(nnz),
            cols: Vec::with_capacity(nnz),
            vals: Vec::with_capacity(nnz),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        self.rows.push(row as u32);
        self.cols.push(col as u32);
        self.vals.push(value);
    }

    /// Compress to CSR, summing duplicate entries.
    pub fn build(self, symmetric: bool) -> CsrMatrix {
        let n = self.n;
        let mut order: Vec<usize> = (0..self.vals.len()).collect();
        order.sort_unstable_by_key(|&k| (self.rows[k], self.cols[k]));

        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx: Vec<u32> = Vec::with_capacity(self.vals.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.vals.len());

        for &k in &order {
            let (r, c, v) = (self.rows[k], self.cols[k], self.vals[k]);
            // Sorted order keeps each row contiguous, so a duplicate can only
            // be the entry pushed immediately before.
            if row_ptr[r as usize + 1] > 0 && *col_idx.last().unwrap() == c {
                *values.last_mut().unwrap() += v;
                continue;
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r as usize + 1] += 1;
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
            symmetric,
        }
    }
}

impl CsrMatrix {
    pub fn zeros(n: usize) -> Self {
        CsrMatrix {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
            symmetric: true,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_symmetric_flag(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[row], self.row_ptr[row + 1]);
        match self.col_idx[lo..hi].binary_search(&(col as u32)) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k] as usize];
            }
            y[r] = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// y = A^T x.
    pub fn matvec_transpose(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.fill(0.0);
        for r in 0..self.n {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k] as usize] += self.values[k] * xr;
            }
        }
    }

    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_transpose(x, &mut y);
        y
    }

    /// x^T A y.
    pub fn quadratic_form(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.n {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row += self.values[k] * y[self.col_idx[k] as usize];
            }
            acc += xr * row;
        }
        acc
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut coo = CooBuilder::with_capacity(self.n, self.nnz());
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                coo.push(self.col_idx[k] as usize, r, self.values[k]);
            }
        }
        coo.build(self.symmetric)
    }

    /// self + alpha * other, merging sparsity patterns.
    pub fn add_scaled(&self, other: &CsrMatrix, alpha: f64) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let mut coo = CooBuilder::with_capacity(self.n, self.nnz() + other.nnz());
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                coo.push(r, self.col_idx[k] as usize, self.values[k]);
            }
            for k in other.row_ptr[r]..other.row_ptr[r + 1] {
                coo.push(r, other.col_idx[k] as usize, alpha * other.values[k]);
            }
        }
        coo.build(self.symmetric && other.symmetric)
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn max_abs_offdiagonal_asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut worst = 0.0f64;
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k] as usize;
                worst = worst.max((self.values[k] - t.get(r, c)).abs());
            }
        }
        worst
    }

    pub fn iter_row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.col_idx[k] as usize, self.values[k]))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Reverse Cuthill-McKee ordering of the graph given by a CSR pattern
/// restricted to the listed vertices. Returns `perm` with
/// `perm[new] = old` (indices into `verts`).
fn reverse_cuthill_mckee(adj: &[Vec<u32>]) -> Vec<u32> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order: Vec<u32> = Vec::with_capacity(n);

    let degree = |v: usize| adj[v].len();

    // Process each connected component from a pseudo-peripheral vertex.
    loop {
        let Some(seed) = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| degree(v)) else {
            break;
        };
        // Two BFS passes push the seed towards the component boundary.
        let mut start = seed as u32;
        for _ in 0..2 {
            let mut level = vec![u32::MAX; n];
            level[start as usize] = 0;
            let mut queue = std::collections::VecDeque::from([start]);
            let mut last = start;
            while let Some(v) = queue.pop_front() {
                last = v;
                for &w in &adj[v as usize] {
                    if !visited[w as usize] && level[w as usize] == u32::MAX {
                        level[w as usize] = level[v as usize] + 1;
                        queue.push_back(w);
                    }
                }
            }
            start = last;
        }

        let mut queue = std::collections::VecDeque::from([start]);
        visited[start as usize] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut neigh: Vec<u32> = adj[v as usize]
                .iter()
                .copied()
                .filter(|&w| !visited[w as usize])
                .collect();
            neigh.sort_unstable_by_key(|&w| (degree(w as usize), w));
            for w in neigh {
                visited[w as usize] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Skyline (envelope) LDL^T factorization.
#[derive(Debug)]
struct SkylineLdl {
    n: usize,
    /// First stored column of each row.
    first: Vec<usize>,
    /// Start of each row's strictly-lower entries in `vals`.
    start: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl SkylineLdl {
    /// `rows[i]` holds the (column, value) pairs of row i (lower triangle
    /// including diagonal) of the permuted reduced matrix.
    fn factor(rows: &[Vec<(usize, f64)>]) -> Result<SkylineLdl> {
        let n = rows.len();
        let mut first = vec![0usize; n];
        for (i, row) in rows.iter().enumerate() {
            let f = row.iter().map(|&(c, _)| c).min().unwrap_or(i);
            first[i] = f.min(i);
        }
        let mut start = vec![0usize; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i]);
        }
        let mut vals = vec![0.0; start[n]];
        let mut diag = vec![0.0; n];
        for (i, row) in rows.iter().enumerate() {
            for &(c, v) in row {
                if c == i {
                    diag[i] += v;
                } else {
                    vals[start[i] + (c - first[i])] += v;
                }
            }
        }

        // In-place factorization: row i of L overwrites row i of A.
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut sum = vals[start[i] + (j - first[i])];
                for k in lo..j {
                    sum -= vals[start[i] + (k - fi)] * vals[start[j] + (k - fj)] * diag[k];
                }
                if diag[j] == 0.0 {
                    return Err(CoreError::Linear(format!("zero pivot at row {j}")));
                }
                vals[start[i] + (j - fi)] = sum / diag[j];
            }
            let mut d = diag[i];
            for k in fi..i {
                let l = vals[start[i] + (k - fi)];
                d -= l * l * diag[k];
            }
            if !d.is_finite() || d == 0.0 {
                return Err(CoreError::Linear(format!(
                    "singular or non-finite pivot {d:e} at row {i}"
                )));
            }
            diag[i] = d;
        }
        Ok(SkylineLdl {
            n,
            first,
            start,
            vals,
            diag,
        })
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        // L z = b
        for i in 0..n {
            let fi = self.first[i];
            let mut sum = b[i];
            for k in fi..i {
                sum -= self.vals[self.start[i] + (k - fi)] * b[k];
            }
            b[i] = sum;
        }
        // D y = z
        for i in 0..n {
            b[i] /= self.diag[i];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let fi = self.first[i];
            let bi = b[i];
            for k in fi..i {
                b[k] -= self.vals[self.start[i] + (k - fi)] * bi;
            }
        }
    }
}

/// Direct solver for the free-DoF block of a symmetric system.
///
/// Factors once; solves support many right-hand sides. All vectors at the
/// public interface are full-length; fixed DoFs pass through untouched.
#[derive(Debug)]
pub struct SpdSolver {
    n_full: usize,
    free: Vec<u32>,
    /// full index -> reduced index, or u32::MAX when fixed
    reduced_of: Vec<u32>,
    /// perm[new] = reduced-old
    perm: Vec<u32>,
    ldl: SkylineLdl,
}

impl SpdSolver {
    /// Factor the free-rows/free-columns block of `a`.
    /// `is_free[i]` marks unconstrained DoFs.
    pub fn factor(a: &CsrMatrix, is_free: &[bool]) -> Result<SpdSolver> {
        let n_full = a.n();
        assert_eq!(is_free.len(), n_full);
        let free: Vec<u32> = (0..n_full as u32).filter(|&i| is_free[i as usize]).collect();
        let nf = free.len();
        let mut reduced_of = vec![u32::MAX; n_full];
        for (k, &i) in free.iter().enumerate() {
            reduced_of[i as usize] = k as u32;
        }

        // Adjacency of the reduced pattern (symmetrized).
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); nf];
        for r in 0..n_full {
            let rr = reduced_of[r];
            if rr == u32::MAX {
                continue;
            }
            for (c, v) in a.iter_row(r) {
                if v == 0.0 && r != c {
                    continue;
                }
                let rc = reduced_of[c];
                if rc != u32::MAX && rc != rr {
                    adj[rr as usize].push(rc);
                    adj[rc as usize].push(rr);
                }
            }
        }
        for l in &mut adj {
            l.sort_unstable();
            l.dedup();
        }

        let perm = reverse_cuthill_mckee(&adj);
        let mut inv_perm = vec![0u32; nf];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old as usize] = new as u32;
        }

        // Lower-triangle rows of the permuted reduced matrix.
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nf];
        for r in 0..n_full {
            let rr = reduced_of[r];
            if rr == u32::MAX {
                continue;
            }
            let pi = inv_perm[rr as usize] as usize;
            for (c, v) in a.iter_row(r) {
                if !v.is_finite() {
                    return Err(CoreError::Linear(format!(
                        "non-finite matrix entry at ({r}, {c})"
                    )));
                }
                let rc = reduced_of[c];
                if rc == u32::MAX {
                    continue;
                }
                let pj = inv_perm[rc as usize] as usize;
                if pj <= pi {
                    rows[pi].push((pj, v));
                }
            }
        }

        let ldl = SkylineLdl::factor(&rows).map_err(|e| {
            CoreError::Linear(format!("{e} (free system of dimension {nf})"))
        })?;
        Ok(SpdSolver {
            n_full,
            free,
            reduced_of,
            perm,
            ldl,
        })
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// Solve A_ff x_f = rhs_f where `rhs` is full-length and read on free
    /// rows only. Returns a full-length vector, zero at fixed DoFs.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n_full);
        let nf = self.free.len();
        let mut b = vec![0.0; nf];
        for (new, &old) in self.perm.iter().enumerate() {
            b[new] = rhs[self.free[old as usize] as usize];
        }
        self.ldl.solve_in_place(&mut b);
        let mut x = vec![0.0; self.n_full];
        for (new, &old) in self.perm.iter().enumerate() {
            x[self.free[old as usize] as usize] = b[new];
        }
        x
    }

    pub fn is_free(&self, i: usize) -> bool {
        self.reduced_of[i] != u32::MAX
    }

    /// Solve with one or two passes of iterative refinement against the
    /// full matrix. The factorization's forward error grows with the
    /// condition number; refinement in working precision buys several
    /// orders of residual accuracy for one matvec and one back-solve per
    /// pass.
    pub fn solve_refined(&self, a: &CsrMatrix, rhs: &[f64]) -> Vec<f64> {
        let mut x = self.solve(rhs);
        for _ in 0..2 {
            let ax = a.mul_vec(&x);
            let mut r = vec![0.0; self.n_full];
            for (i, ri) in r.iter_mut().enumerate() {
                if self.reduced_of[i] != u32::MAX {
                    *ri = rhs[i] - ax[i];
                }
            }
            let corr = self.solve(&r);
            let xn = norm2(&x).max(1e-300);
            let cn = norm2(&corr);
            for (xi, ci) in x.iter_mut().zip(&corr) {
                *xi += ci;
            }
            if cn <= 1e-16 * xn {
                break;
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dense_laplace_1d(n: usize) -> CsrMatrix {
        let mut coo = CooBuilder::new(n);
        for i in 0..n {
            coo.push(i, i, 2.0);
            if i > 0 {
                coo.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                coo.push(i, i + 1, -1.0);
            }
        }
        coo.build(true)
    }

    #[test]
    fn duplicates_are_summed() {
        let mut coo = CooBuilder::new(2);
        coo.push(0, 0, 1.0);
        coo.push(0, 0, 2.5);
        coo.push(1, 0, -1.0);
        let a = coo.build(false);
        assert_eq!(a.get(0, 0), 3.5);
        assert_eq!(a.get(1, 0), -1.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn matvec_and_transpose() {
        let mut coo = CooBuilder::new(3);
        coo.push(0, 1, 2.0);
        coo.push(2, 0, -1.0);
        coo.push(1, 1, 4.0);
        let a = coo.build(false);
        let x = [1.0, 2.0, 3.0];
        let mut y = vec![0.0; 3];
        a.matvec(&x, &mut y);
        assert_eq!(y, vec![4.0, 8.0, -1.0]);
        a.matvec_transpose(&x, &mut y);
        assert_eq!(y, vec![-3.0, 10.0, 0.0]);
        let t = a.transpose();
        assert_eq!(t.get(1, 0), 2.0);
        assert_eq!(t.get(0, 2), -1.0);
    }

    #[test]
    fn solve_tridiagonal_against_exact() {
        let n = 50;
        let a = dense_laplace_1d(n);
        let is_free = vec![true; n];
        let solver = SpdSolver::factor(&a, &is_free).unwrap();
        // Manufactured solution
        let x_exact: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        let rhs = a.mul_vec(&x_exact);
        let x = solver.solve(&rhs);
        for i in 0..n {
            assert_relative_eq!(x[i], x_exact[i], max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn solve_with_fixed_dofs() {
        let n = 20;
        let a = dense_laplace_1d(n);
        let mut is_free = vec![true; n];
        is_free[0] = false;
        is_free[n - 1] = false;
        let solver = SpdSolver::factor(&a, &is_free).unwrap();
        assert_eq!(solver.n_free(), n - 2);
        let mut rhs = vec![0.0; n];
        rhs[1] = 1.0; // as if a fixed value of 1.0 at node 0 were eliminated
        let x = solver.solve(&rhs);
        assert_eq!(x[0], 0.0);
        assert_eq!(x[n - 1], 0.0);
        // Discrete Laplace with u(0)=1, u(n-1)=0 -> linear profile
        for i in 1..n - 1 {
            let expected = 1.0 - i as f64 / (n - 1) as f64;
            assert_relative_eq!(x[i], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut coo = CooBuilder::new(2);
        coo.push(0, 0, 1.0);
        coo.push(0, 1, 1.0);
        coo.push(1, 0, 1.0);
        coo.push(1, 1, 1.0);
        let a = coo.build(true);
        let err = SpdSolver::factor(&a, &[true, true]).unwrap_err();
        assert!(matches!(err, CoreError::Linear(_)));
    }

    #[test]
    fn empty_free_set_is_allowed() {
        let a = dense_laplace_1d(4);
        let solver = SpdSolver::factor(&a, &[false; 4]).unwrap();
        let x = solver.solve(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x, vec![0.0; 4]);
    }

    #[test]
    fn rcm_reduces_bandwidth_on_grid_graph() {
        // 2D 5-point grid numbered randomly would have bandwidth ~n; RCM
        // should bring it down to ~grid width.
        let nx = 12;
        let n = nx * nx;
        let idx = |i: usize, j: usize| i * nx + j;
        let mut coo = CooBuilder::new(n);
        for i in 0..nx {
            for j in 0..nx {
                coo.push(idx(i, j), idx(i, j), 4.0);
                if i > 0 {
                    coo.push(idx(i, j), idx(i - 1, j), -1.0);
                    coo.push(idx(i - 1, j), idx(i, j), -1.0);
                }
                if j > 0 {
                    coo.push(idx(i, j), idx(i, j - 1), -1.0);
                    coo.push(idx(i, j - 1), idx(i, j), -1.0);
                }
            }
        }
        let a = coo.build(true);
        let solver = SpdSolver::factor(&a, &vec![true; n]).unwrap();
        let rhs = vec![1.0; n];
        let x = solver.solve(&rhs);
        // Residual check
        let r = a.mul_vec(&x);
        for i in 0..n {
            assert_relative_eq!(r[i], 1.0, max_relative = 1e-10);
        }
    }
}
