//! Compressed sparse column storage and a left-looking sparse LU.
//!
//! The LU follows the Gilbert-Peierls scheme: each column is obtained by a
//! sparse triangular solve against the already computed part of `L`, with
//! the nonzero pattern found by a depth-first search. Rows are pivoted with
//! a threshold that prefers the diagonal; columns are pre-ordered by a
//! greedy minimum-degree heuristic on the pattern of `A + A^T`.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Coordinate-format builder. Duplicate entries are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            ..Default::default()
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(val);
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn to_csc(&self) -> Csc {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.cols {
            counts[c + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let nnz = self.vals.len();
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut next = counts.clone();
        for k in 0..nnz {
            let c = self.cols[k];
            let dst = next[c];
            row_idx[dst] = self.rows[k];
            values[dst] = self.vals[k];
            next[c] += 1;
        }
        // sort each column by row and merge duplicates
        let mut col_ptr = vec![0usize; self.ncols + 1];
        let mut out_rows = Vec::with_capacity(nnz);
        let mut out_vals = Vec::with_capacity(nnz);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..self.ncols {
            scratch.clear();
            scratch.extend((counts[c]..counts[c + 1]).map(|p| (row_idx[p], values[p])));
            scratch.sort_by_key(|e| e.0);
            let mut last = NONE;
            for &(r, v) in &scratch {
                if r == last {
                    *out_vals.last_mut().unwrap() += v;
                } else {
                    out_rows.push(r);
                    out_vals.push(v);
                    last = r;
                }
            }
            col_ptr[c + 1] = out_rows.len();
        }
        Csc {
            nrows: self.nrows,
            ncols: self.ncols,
            col_ptr,
            row_idx: out_rows,
            values: out_vals,
        }
    }
}

/// Compressed sparse column matrix with sorted, unique row indices per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Csc {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csc {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |p| (self.row_idx[p], self.values[p]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let rows = &self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]];
        match rows.binary_search(&i) {
            Ok(p) => self.values[self.col_ptr[j] + p],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            let xj = x[j];
            if xj != 0.0 {
                for (i, v) in self.col(j) {
                    y[i] += v * xj;
                }
            }
        }
        y
    }

    /// `y = A^T x`
    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.ncols)
            .map(|j| self.col(j).map(|(i, v)| v * x[i]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                d[i][j] = v;
            }
        }
        d
    }
}

/// Greedy minimum-degree ordering of the symmetric pattern `A + A^T`.
///
/// Ties are broken by the lower index so the result is deterministic.
pub fn minimum_degree_order(a: &Csc) -> Vec<usize> {
    let n = a.ncols;
    assert_eq!(a.nrows, n, "minimum degree ordering needs a square matrix");
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for j in 0..n {
        for (i, _) in a.col(j) {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut eliminated = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != adj[v].len() {
            continue;
        }
        eliminated[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        for (k, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[k + 1..] {
                if adj[u].insert(w) {
                    adj[w].insert(u);
                }
            }
        }
        for &u in &nbrs {
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    order
}

/// Sparse LU factors `L U = P A Q`.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    up: Vec<usize>,
    ui: Vec<usize>,
    ux: Vec<f64>,
    /// row permutation: original row -> pivot position
    pinv: Vec<usize>,
    /// column permutation: pivot position -> original column
    q: Vec<usize>,
}

impl SparseLu {
    /// Relative pivot threshold; the diagonal is kept when it is at least this
    /// fraction of the largest candidate in its column.
    pub const PIVOT_THRESHOLD: f64 = 0.1;

    pub fn factor(a: &Csc) -> Result<Self> {
        let q = minimum_degree_order(a);
        Self::factor_ordered(a, &q)
    }

    pub fn factor_ordered(a: &Csc, q: &[usize]) -> Result<Self> {
        let n = a.ncols;
        if a.nrows != n || q.len() != n {
            return Err(Error::Dimension(format!(
                "LU of a {}x{} matrix with an ordering of length {}",
                a.nrows,
                a.ncols,
                q.len()
            )));
        }
        let cap = 4 * a.nnz() + n;
        let mut lp = vec![0usize; n + 1];
        let mut li = Vec::with_capacity(cap);
        let mut lx = Vec::with_capacity(cap);
        let mut up = vec![0usize; n + 1];
        let mut ui = Vec::with_capacity(cap);
        let mut ux = Vec::with_capacity(cap);
        let mut pinv = vec![NONE; n];
        let mut x = vec![0.0; n];
        let mut xi = vec![0usize; n];
        let mut pstack = vec![0usize; n];
        let mut mark = vec![NONE; n];

        for k in 0..n {
            lp[k] = li.len();
            up[k] = ui.len();
            let col = q[k];

            // nonzero pattern of L \ A[:, col], topologically ordered in xi[top..]
            let mut top = n;
            for p in a.col_ptr[col]..a.col_ptr[col + 1] {
                let i = a.row_idx[p];
                if mark[i] != k {
                    top = dfs(i, k, &lp, &li, &pinv, &mut mark, &mut xi, &mut pstack, top);
                }
            }
            for &i in &xi[top..] {
                x[i] = 0.0;
            }
            for (i, v) in a.col(col) {
                x[i] = v;
            }
            for p in top..n {
                let j = xi[p];
                let jn = pinv[j];
                if jn == NONE {
                    continue;
                }
                let xj = x[j];
                for t in lp[jn] + 1..lp[jn + 1] {
                    x[li[t]] -= lx[t] * xj;
                }
            }

            let mut ipiv = NONE;
            let mut amax = -1.0;
            for &i in &xi[top..] {
                if pinv[i] == NONE {
                    let t = x[i].abs();
                    if t > amax {
                        amax = t;
                        ipiv = i;
                    }
                } else {
                    ui.push(pinv[i]);
                    ux.push(x[i]);
                }
            }
            if ipiv == NONE || amax <= 0.0 || !amax.is_finite() {
                return Err(Error::Singular(format!(
                    "no acceptable pivot in column {col} (step {k} of {n})"
                )));
            }
            if pinv[col] == NONE && x[col].abs() >= amax * Self::PIVOT_THRESHOLD {
                ipiv = col;
            }
            let pivot = x[ipiv];
            ui.push(k);
            ux.push(pivot);
            pinv[ipiv] = k;
            li.push(ipiv);
            lx.push(1.0);
            for &i in &xi[top..] {
                if pinv[i] == NONE {
                    li.push(i);
                    lx.push(x[i] / pivot);
                }
                x[i] = 0.0;
            }
        }
        lp[n] = li.len();
        up[n] = ui.len();
        for r in li.iter_mut() {
            *r = pinv[*r];
        }
        Ok(Self {
            n,
            lp,
            li,
            lx,
            up,
            ui,
            ux,
            pinv,
            q: q.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.lx.len() + self.ux.len()
    }

    /// Column ordering used by this factorization, reusable for matrices with
    /// the same pattern.
    pub fn ordering(&self) -> &[usize] {
        &self.q
    }

    /// Cheap reciprocal condition estimate: smallest over largest `|U_kk|`.
    pub fn rcond_estimate(&self) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for k in 0..self.n {
            let d = self.ux[self.up[k + 1] - 1].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if hi == 0.0 {
            0.0
        } else {
            lo / hi
        }
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[self.pinv[i]] = b[i];
        }
        for j in 0..n {
            let yj = y[j];
            if yj != 0.0 {
                for p in self.lp[j] + 1..self.lp[j + 1] {
                    y[self.li[p]] -= self.lx[p] * yj;
                }
            }
        }
        for j in (0..n).rev() {
            let last = self.up[j + 1] - 1;
            y[j] /= self.ux[last];
            let yj = y[j];
            if yj != 0.0 {
                for p in self.up[j]..last {
                    y[self.ui[p]] -= self.ux[p] * yj;
                }
            }
        }
        for k in 0..n {
            b[self.q[k]] = y[k];
        }
    }

    /// Solves `A^T x = b` in place.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = (0..n).map(|k| b[self.q[k]]).collect();
        for j in 0..n {
            let last = self.up[j + 1] - 1;
            let mut s = y[j];
            for p in self.up[j]..last {
                s -= self.ux[p] * y[self.ui[p]];
            }
            y[j] = s / self.ux[last];
        }
        for j in (0..n).rev() {
            let mut s = y[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                s -= self.lx[p] * y[self.li[p]];
            }
            y[j] = s;
        }
        for i in 0..n {
            b[i] = y[self.pinv[i]];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_transpose_in_place(&mut x);
        x
    }
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    start: usize,
    stamp: usize,
    lp: &[usize],
    li: &[usize],
    pinv: &[usize],
    mark: &mut [usize],
    xi: &mut [usize],
    pstack: &mut [usize],
    mut top: usize,
) -> usize {
    let mut head: isize = 0;
    xi[0] = start;
    while head >= 0 {
        let h = head as usize;
        let j = xi[h];
        let jn = pinv[j];
        if mark[j] != stamp {
            mark[j] = stamp;
            pstack[h] = if jn == NONE { 0 } else { lp[jn] };
        }
        let end = if jn == NONE { 0 } else { lp[jn + 1] };
        let mut done = true;
        let mut p = pstack[h];
        while p < end {
            let i = li[p];
            if mark[i] != stamp {
                pstack[h] = p;
                head += 1;
                xi[head as usize] = i;
                done = false;
                break;
            }
            p += 1;
        }
        if done {
            head -= 1;
            top -= 1;
            xi[top] = j;
        }
    }
    top
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(n: usize, density: f64, seed: u64) -> Csc {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 4.0 + rng.gen::<f64>());
            for j in 0..n {
                if i != j && rng.gen::<f64>() < density {
                    t.push(i, j, rng.gen_range(-1.0..1.0));
                }
            }
        }
        t.to_csc()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 0, -1.0);
        let a = t.to_csc();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(1, 1), 0.0);
    }

    #[test]
    fn solve_matches_product() {
        for seed in 0..5 {
            let a = random_sparse(40, 0.08, seed);
            let lu = SparseLu::factor(&a).unwrap();
            let x_true: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
            let b = a.mul_vec(&x_true);
            let x = lu.solve(&b);
            for (u, v) in x.iter().zip(&x_true) {
                assert!((u - v).abs() < 1e-10);
            }
            let bt = a.mul_transpose_vec(&x_true);
            let xt = lu.solve_transpose(&bt);
            for (u, v) in xt.iter().zip(&x_true) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_diagonal_needs_row_pivoting() {
        // [[0, 1], [1, 0]] (saddle-point style)
        let mut t = Triplets::new(3, 3);
        t.push(0, 1, 1.0);
        t.push(1, 0, 1.0);
        t.push(2, 2, 2.0);
        t.push(0, 2, 0.5);
        let a = t.to_csc();
        let lu = SparseLu::factor(&a).unwrap();
        let x = lu.solve(&[1.0, 2.0, 4.0]);
        let back = a.mul_vec(&x);
        assert!((back[0] - 1.0).abs() < 1e-14);
        assert!((back[1] - 2.0).abs() < 1e-14);
        assert!((back[2] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(1, 0, 1.0);
        let a = t.to_csc();
        assert!(matches!(SparseLu::factor(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn ordering_is_a_permutation() {
        let a = random_sparse(60, 0.05, 11);
        let mut q = minimum_degree_order(&a);
        q.sort_unstable();
        assert_eq!(q, (0..60).collect::<Vec<_>>());
    }
}
