//! Derivatives of the power-flow map: exact and linearized nodal Jacobians,
//! branch-flow Jacobians, the implicit `J_z1`/`J_y` partition, the adjoint
//! (`k`) solve and the batch-mean gradient engine used by the trainer.
//!
//! Nodal Jacobian blocks are stored as value arrays aligned with the CSR
//! pattern of the admittance matrix (diagonal included), so they share its
//! sparsity by construction.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Admittance, BusPartition, Network};
use crate::powerflow::{injections, BranchFlows};
use crate::sparse::{minimum_degree_order, Csc, SparseLu, Triplets};

const NONE: usize = usize::MAX;

/// Reciprocal condition estimate below which `J_z1` counts as singular.
pub const SINGULAR_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    PTheta,
    PV,
    QTheta,
    QV,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodalJacobian {
    pub pt: Vec<f64>,
    pub pv: Vec<f64>,
    pub qt: Vec<f64>,
    pub qv: Vec<f64>,
}

impl NodalJacobian {
    pub fn zeros(nnz: usize) -> Self {
        Self {
            pt: vec![0.0; nnz],
            pv: vec![0.0; nnz],
            qt: vec![0.0; nnz],
            qv: vec![0.0; nnz],
        }
    }

    pub fn block(&self, b: Block) -> &[f64] {
        match b {
            Block::PTheta => &self.pt,
            Block::PV => &self.pv,
            Block::QTheta => &self.qt,
            Block::QV => &self.qv,
        }
    }

    pub fn get(&self, y: &Admittance, b: Block, i: usize, j: usize) -> f64 {
        let cols = &y.col_idx[y.row_ptr[i]..y.row_ptr[i + 1]];
        match cols.binary_search(&j) {
            Ok(p) => self.block(b)[y.row_ptr[i] + p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self, y: &Admittance, b: Block) -> Vec<Vec<f64>> {
        let n = y.n();
        let vals = self.block(b);
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for e in y.row_ptr[i]..y.row_ptr[i + 1] {
                out[i][y.col_idx[e]] = vals[e];
            }
        }
        out
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: f64, other: &NodalJacobian) {
        for (dst, src) in [
            (&mut self.pt, &other.pt),
            (&mut self.pv, &other.pv),
            (&mut self.qt, &other.qt),
            (&mut self.qv, &other.qv),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &NodalJacobian) -> f64 {
        let pairs = [
            (&self.pt, &other.pt),
            (&self.pv, &other.pv),
            (&self.qt, &other.qt),
            (&self.qv, &other.qv),
        ];
        pairs
            .iter()
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max)
    }
}

/// Exact derivatives of the injections with respect to `[theta; V]`.
pub fn nodal_jacobian(net: &Network, theta: &[f64], vmag: &[f64]) -> NodalJacobian {
    let y = net.admittance();
    let (p, q) = injections(net, theta, vmag);
    let mut jac = NodalJacobian::zeros(y.nnz());
    for i in 0..y.n() {
        let vi = vmag[i];
        for e in y.row_ptr[i]..y.row_ptr[i + 1] {
            let j = y.col_idx[e];
            let (g, b) = (y.g[e], y.b[e]);
            if j == i {
                jac.pt[e] = -q[i] - b * vi * vi;
                jac.pv[e] = p[i] / vi + g * vi;
                jac.qt[e] = p[i] - g * vi * vi;
                jac.qv[e] = q[i] / vi - b * vi;
            } else {
                let vj = vmag[j];
                let (s, c) = (theta[i] - theta[j]).sin_cos();
                let gs_bc = g * s - b * c;
                let gc_bs = g * c + b * s;
                jac.pt[e] = vi * vj * gs_bc;
                jac.pv[e] = vi * gc_bs;
                jac.qt[e] = -vi * vj * gc_bs;
                jac.qv[e] = vi * gs_bc;
            }
        }
    }
    jac
}

/// Per-branch from-end flow sensitivities. Each row has the four entries
/// `[d/dtheta_f, d/dtheta_t, d/dV_f, d/dV_t]`; `rows` lists the branches
/// covered (all of them unless a subset was requested).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchJacobian {
    pub rows: Vec<usize>,
    pub jab: Vec<[f64; 4]>,
    pub jrb: Vec<[f64; 4]>,
    pub s2_grad: Vec<[f64; 4]>,
}

impl BranchJacobian {
    /// Dense `M x 2N` view of one of the three row sets.
    pub fn to_dense(&self, net: &Network, which: &[[f64; 4]]) -> Vec<Vec<f64>> {
        let n = net.n_bus();
        let mut out = vec![vec![0.0; 2 * n]; net.n_branch()];
        for (k, &m) in self.rows.iter().enumerate() {
            let br = &net.branches[m];
            let cols = [br.from, br.to, n + br.from, n + br.to];
            for (c, v) in cols.iter().zip(which[k]) {
                out[m][*c] += v;
            }
        }
        out
    }
}

fn s2_rows(jab: &[[f64; 4]], jrb: &[[f64; 4]], rows: &[usize], flows: &BranchFlows) -> Vec<[f64; 4]> {
    rows.iter()
        .enumerate()
        .map(|(k, &m)| {
            let (p2, q2) = (2.0 * flows.p[m], 2.0 * flows.q[m]);
            let mut r = [0.0; 4];
            for c in 0..4 {
                r[c] = p2 * jab[k][c] + q2 * jrb[k][c];
            }
            r
        })
        .collect()
}

fn exact_branch_rows(net: &Network, theta: &[f64], vmag: &[f64], rows: &[usize]) -> (Vec<[f64; 4]>, Vec<[f64; 4]>) {
    let stamps = &net.admittance().stamps;
    let mut jab = Vec::with_capacity(rows.len());
    let mut jrb = Vec::with_capacity(rows.len());
    for &m in rows {
        let br = &net.branches[m];
        let st = &stamps[m];
        let (f, t) = (br.from, br.to);
        let (vf, vt) = (vmag[f], vmag[t]);
        let (s, c) = (theta[f] - theta[t]).sin_cos();
        let (gff, bff) = st.ff;
        let (gft, bft) = st.ft;
        let a = gft * c + bft * s;
        let r = gft * s - bft * c;
        let dp_dth = vf * vt * (-gft * s + bft * c);
        let dq_dth = vf * vt * a;
        jab.push([dp_dth, -dp_dth, 2.0 * gff * vf + vt * a, vf * a]);
        jrb.push([dq_dth, -dq_dth, -2.0 * bff * vf + vt * r, vf * r]);
    }
    (jab, jrb)
}

/// Exact branch Jacobian for all branches.
pub fn branch_jacobian(net: &Network, theta: &[f64], vmag: &[f64], flows: &BranchFlows) -> BranchJacobian {
    let rows: Vec<usize> = (0..net.n_branch()).collect();
    branch_jacobian_subset(net, theta, vmag, flows, &rows)
}

pub fn branch_jacobian_subset(
    net: &Network,
    theta: &[f64],
    vmag: &[f64],
    flows: &BranchFlows,
    rows: &[usize],
) -> BranchJacobian {
    let (jab, jrb) = exact_branch_rows(net, theta, vmag, rows);
    let s2_grad = s2_rows(&jab, &jrb, rows, flows);
    BranchJacobian {
        rows: rows.to_vec(),
        jab,
        jrb,
        s2_grad,
    }
}

/// Precomputed layout of `J_z1` (and its two diagonal blocks) with scatter
/// maps from the nodal value arrays and cached fill-reducing orderings.
#[derive(Debug, Clone)]
pub struct Z1Assembly {
    full: Csc,
    map: [Vec<usize>; 4],
    order: Vec<usize>,
    pt: Csc,
    pt_map: Vec<usize>,
    pt_order: Vec<usize>,
    qv: Csc,
    qv_map: Vec<usize>,
    qv_order: Vec<usize>,
}

fn csc_position(a: &Csc, i: usize, j: usize) -> usize {
    let rows = &a.row_idx[a.col_ptr[j]..a.col_ptr[j + 1]];
    a.col_ptr[j] + rows.binary_search(&i).expect("entry in template")
}

impl Z1Assembly {
    pub fn new(net: &Network) -> Self {
        let y = net.admittance();
        let part = net.partition();
        let nz = part.z1_len();
        let nr = part.nonref.len();
        let nd = part.n_load();
        // (block, e) -> (row, col) in z1 coordinates
        let mut coords: [Vec<Option<(usize, usize)>>; 4] = Default::default();
        for c in coords.iter_mut() {
            c.resize(y.nnz(), None);
        }
        for i in 0..y.n() {
            for e in y.row_ptr[i]..y.row_ptr[i + 1] {
                let j = y.col_idx[e];
                if let Some(r) = part.nonref_pos[i] {
                    if let Some(c) = part.nonref_pos[j] {
                        coords[0][e] = Some((r, c));
                    }
                    if let Some(c) = part.load_pos[j] {
                        coords[1][e] = Some((r, nr + c));
                    }
                }
                if let Some(r) = part.load_pos[i] {
                    if let Some(c) = part.nonref_pos[j] {
                        coords[2][e] = Some((nr + r, c));
                    }
                    if let Some(c) = part.load_pos[j] {
                        coords[3][e] = Some((nr + r, nr + c));
                    }
                }
            }
        }
        let mut t = Triplets::new(nz, nz);
        for c in &coords {
            for &(r, col) in c.iter().flatten() {
                t.push(r, col, 0.0);
            }
        }
        let full = t.to_csc();
        let map = coords
            .clone()
            .map(|c| c.iter().map(|rc| rc.map_or(NONE, |(r, col)| csc_position(&full, r, col))).collect());
        let order = minimum_degree_order(&full);

        let mut t = Triplets::new(nr, nr);
        for &(r, c) in coords[0].iter().flatten() {
            t.push(r, c, 0.0);
        }
        let pt = t.to_csc();
        let pt_map = coords[0]
            .iter()
            .map(|rc| rc.map_or(NONE, |(r, c)| csc_position(&pt, r, c)))
            .collect();
        let pt_order = minimum_degree_order(&pt);

        let mut t = Triplets::new(nd, nd);
        for &(r, c) in coords[3].iter().flatten() {
            t.push(r - nr, c - nr, 0.0);
        }
        let qv = t.to_csc();
        let qv_map = coords[3]
            .iter()
            .map(|rc| rc.map_or(NONE, |(r, c)| csc_position(&qv, r - nr, c - nr)))
            .collect();
        let qv_order = minimum_degree_order(&qv);
        Self {
            full,
            map,
            order,
            pt,
            pt_map,
            pt_order,
            qv,
            qv_map,
            qv_order,
        }
    }

    pub fn j_z1(&self, jac: &NodalJacobian) -> Csc {
        let mut a = self.full.clone();
        for (m, vals) in self.map.iter().zip([&jac.pt, &jac.pv, &jac.qt, &jac.qv]) {
            for (e, &p) in m.iter().enumerate() {
                if p != NONE {
                    a.values[p] = vals[e];
                }
            }
        }
        a
    }

    fn fill(template: &Csc, map: &[usize], vals: &[f64]) -> Csc {
        let mut a = template.clone();
        for (e, &p) in map.iter().enumerate() {
            if p != NONE {
                a.values[p] = vals[e];
            }
        }
        a
    }

    /// `J^{P theta}` restricted to the angle unknowns.
    pub fn j_pt(&self, jac: &NodalJacobian) -> Csc {
        Self::fill(&self.pt, &self.pt_map, &jac.pt)
    }

    /// `J^{QV}` restricted to the load voltages.
    pub fn j_qv(&self, jac: &NodalJacobian) -> Csc {
        Self::fill(&self.qv, &self.qv_map, &jac.qv)
    }

    fn checked(lu: Result<SparseLu>, what: &str) -> Result<SparseLu> {
        let lu = lu.map_err(|e| Error::Singular(format!("{what}: {e}")))?;
        let rc = lu.rcond_estimate();
        if !(rc >= SINGULAR_RCOND) {
            return Err(Error::Singular(format!("{what}: reciprocal condition estimate {rc:.3e}")));
        }
        Ok(lu)
    }

    pub fn factor(&self, jac: &NodalJacobian) -> Result<SparseLu> {
        Self::checked(SparseLu::factor_ordered(&self.j_z1(jac), &self.order), "J_z1")
    }

    pub fn factor_decoupled(&self, jac: &NodalJacobian) -> Result<(SparseLu, Option<SparseLu>)> {
        let pt = Self::checked(SparseLu::factor_ordered(&self.j_pt(jac), &self.pt_order), "J_z1 P-theta block")?;
        let qv = if self.qv.ncols == 0 {
            None
        } else {
            Some(Self::checked(
                SparseLu::factor_ordered(&self.j_qv(jac), &self.qv_order),
                "J_z1 Q-V block",
            )?)
        };
        Ok((pt, qv))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitPartition {
    pub j_z1: Csc,
    pub j_y: Csc,
}

/// `J_y = [C | df/dV_gen_ref]` with `C = -1` where a generator output enters
/// its own active-power row.
pub fn j_y(net: &Network, jac: &NodalJacobian) -> Csc {
    let y = net.admittance();
    let part = net.partition();
    let nr = part.nonref.len();
    let ng = part.n_gen();
    let mut t = Triplets::new(part.z1_len(), part.y_len());
    for (k, &i) in part.gen.iter().enumerate() {
        t.push(part.nonref_pos[i].unwrap(), k, -1.0);
    }
    for i in 0..y.n() {
        for e in y.row_ptr[i]..y.row_ptr[i + 1] {
            let Some(c) = part.gen_ref_pos[y.col_idx[e]] else {
                continue;
            };
            if let Some(r) = part.nonref_pos[i] {
                t.push(r, ng + c, jac.pv[e]);
            }
            if let Some(r) = part.load_pos[i] {
                t.push(nr + r, ng + c, jac.qv[e]);
            }
        }
    }
    t.to_csc()
}

pub fn implicit_partition(net: &Network, jac: &NodalJacobian) -> Result<ImplicitPartition> {
    let asm = Z1Assembly::new(net);
    asm.factor(jac)?;
    Ok(ImplicitPartition {
        j_z1: asm.j_z1(jac),
        j_y: j_y(net, jac),
    })
}

/// Solves the two decoupled adjoint systems `(J^{P theta}_z1)^T k_p = rhs_p`
/// and `(J^{QV}_z1)^T k_q = rhs_q`.
pub fn decoupled_solve(asm: &Z1Assembly, jac: &NodalJacobian, rhs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (pt, qv) = asm.factor_decoupled(jac)?;
    let nr = pt.dim();
    let kp = pt.solve_transpose(&rhs[..nr]);
    let kq = match qv {
        Some(lu) => lu.solve_transpose(&rhs[nr..]),
        None => Vec::new(),
    };
    Ok((kp, kq))
}

/// Writes `row col value` lines (zero-based) after a `rows cols nnz` header.
pub fn write_triplets<W: Write>(a: &Csc, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{} {} {}", a.nrows, a.ncols, a.nnz())?;
    for j in 0..a.ncols {
        for (i, v) in a.col(j) {
            writeln!(out, "{i} {j} {v:.17e}")?;
        }
    }
    Ok(())
}

/// Coefficients of the Jacobian linearized around `theta = 0`, `V = vbar`.
///
/// For an off-diagonal entry `(i, j)` the four blocks are
/// `A_(ij) [theta_i, theta_j, V_i, V_j]`; a diagonal entry collects
/// `A_(i)`'s own columns on `[theta_i, V_i]` and one 4x2 neighbour block on
/// `[theta_j, V_j]` per adjacent bus.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoeffs {
    pub vbar: Vec<f64>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Per CSR entry; zero on diagonal entries.
    pub a_offdiag: Vec<[[f64; 4]; 4]>,
    /// Per bus: columns `[theta_i, V_i]` of `A_(i)`.
    pub a_diag_self: Vec<[[f64; 2]; 4]>,
    /// Per CSR off-diagonal entry `(i, j)`: columns `[theta_j, V_j]` of `A_(i)`.
    pub a_diag_nbr: Vec<[[f64; 2]; 4]>,
    /// Per branch: from-end flow Jacobian rows, affine in
    /// `[theta_f - theta_t, V_f, V_t]`. Rows: dp/dtheta_f, dp/dV_f, dp/dV_t,
    /// dq/dtheta_f, dq/dV_f, dq/dV_t.
    pub branch: Vec<[[f64; 3]; 6]>,
}

pub fn linear_coeffs(net: &Network, vbar: &[f64]) -> LinearCoeffs {
    let y = net.admittance();
    let n = y.n();
    let nnz = y.nnz();
    let mut a_offdiag = vec![[[0.0; 4]; 4]; nnz];
    let mut a_diag_self = vec![[[0.0; 2]; 4]; n];
    let mut a_diag_nbr = vec![[[0.0; 2]; 4]; nnz];
    for i in 0..n {
        let vi = vbar[i];
        let (mut sum_g, mut sum_b) = (0.0, 0.0);
        let (mut gii, mut bii) = (0.0, 0.0);
        for e in y.row_ptr[i]..y.row_ptr[i + 1] {
            let j = y.col_idx[e];
            let (g, b) = (y.g[e], y.b[e]);
            if j == i {
                gii = g;
                bii = b;
                continue;
            }
            let vj = vbar[j];
            sum_g += vj * g;
            sum_b += vj * b;
            a_offdiag[e] = [
                [vi * vj * g, -vi * vj * g, 0.0, -vi * b],
                [vi * b, -vi * b, g, 0.0],
                [-vi * vj * b, vi * vj * b, 0.0, -vi * g],
                [vi * g, -vi * g, -b, 0.0],
            ];
            a_diag_nbr[e] = [[vi * vj * g, vi * b], [-vj * b, g], [-vi * vj * b, vi * g], [-vj * g, -b]];
        }
        a_diag_self[i] = [
            [-vi * sum_g, 0.0],
            [sum_b, 2.0 * gii],
            [vi * sum_b, 0.0],
            [sum_g, -2.0 * bii],
        ];
    }
    let branch = net
        .branches
        .iter()
        .zip(&y.stamps)
        .map(|(br, st)| {
            let (vf, vt) = (vbar[br.from], vbar[br.to]);
            let (gff, bff) = st.ff;
            let (gft, bft) = st.ft;
            [
                [-gft * vf * vt, 0.0, bft * vf],
                [bft * vt, 2.0 * gff, gft],
                [bft * vf, gft, 0.0],
                [bft * vf * vt, 0.0, gft * vf],
                [gft * vt, -2.0 * bff, -bft],
                [gft * vf, -bft, 0.0],
            ]
        })
        .collect();
    LinearCoeffs {
        vbar: vbar.to_vec(),
        row_ptr: y.row_ptr.clone(),
        col_idx: y.col_idx.clone(),
        a_offdiag,
        a_diag_self,
        a_diag_nbr,
        branch,
    }
}

/// Jacobian from the linear model, affine in `(theta, V)`.
pub fn linearized_nodal(coeffs: &LinearCoeffs, theta: &[f64], vmag: &[f64]) -> NodalJacobian {
    let n = coeffs.vbar.len();
    let mut jac = NodalJacobian::zeros(coeffs.col_idx.len());
    for i in 0..n {
        let mut diag = [0.0; 4];
        let own = &coeffs.a_diag_self[i];
        for r in 0..4 {
            diag[r] = own[r][0] * theta[i] + own[r][1] * vmag[i];
        }
        let mut d_at = NONE;
        for e in coeffs.row_ptr[i]..coeffs.row_ptr[i + 1] {
            let j = coeffs.col_idx[e];
            if j == i {
                d_at = e;
                continue;
            }
            let v4 = [theta[i], theta[j], vmag[i], vmag[j]];
            let a = &coeffs.a_offdiag[e];
            let nb = &coeffs.a_diag_nbr[e];
            let mut out = [0.0; 4];
            for r in 0..4 {
                out[r] = a[r][0] * v4[0] + a[r][1] * v4[1] + a[r][2] * v4[2] + a[r][3] * v4[3];
                diag[r] += nb[r][0] * theta[j] + nb[r][1] * vmag[j];
            }
            jac.pt[e] = out[0];
            jac.pv[e] = out[1];
            jac.qt[e] = out[2];
            jac.qv[e] = out[3];
        }
        jac.pt[d_at] = diag[0];
        jac.pv[d_at] = diag[1];
        jac.qt[d_at] = diag[2];
        jac.qv[d_at] = diag[3];
    }
    jac
}

fn linearized_branch_rows(
    net: &Network,
    coeffs: &LinearCoeffs,
    theta: &[f64],
    vmag: &[f64],
    rows: &[usize],
) -> (Vec<[f64; 4]>, Vec<[f64; 4]>) {
    let mut jab = Vec::with_capacity(rows.len());
    let mut jrb = Vec::with_capacity(rows.len());
    for &m in rows {
        let br = &net.branches[m];
        let u = [theta[br.from] - theta[br.to], vmag[br.from], vmag[br.to]];
        let c = &coeffs.branch[m];
        let dot = |r: usize| c[r][0] * u[0] + c[r][1] * u[1] + c[r][2] * u[2];
        let (pth, pvf, pvt) = (dot(0), dot(1), dot(2));
        let (qth, qvf, qvt) = (dot(3), dot(4), dot(5));
        jab.push([pth, -pth, pvf, pvt]);
        jrb.push([qth, -qth, qvf, qvt]);
    }
    (jab, jrb)
}

/// Linearized branch Jacobian over `rows`.
pub fn linearized_branch(
    net: &Network,
    coeffs: &LinearCoeffs,
    theta: &[f64],
    vmag: &[f64],
    flows: &BranchFlows,
    rows: &[usize],
) -> BranchJacobian {
    let (jab, jrb) = linearized_branch_rows(net, coeffs, theta, vmag, rows);
    let s2_grad = s2_rows(&jab, &jrb, rows, flows);
    BranchJacobian {
        rows: rows.to_vec(),
        jab,
        jrb,
        s2_grad,
    }
}

/// Phasor vectors of a batch (one `[theta; V]` per sample) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensors {
    pub t: Vec<Vec<f64>>,
    pub t_mean: Vec<f64>,
}

impl BatchTensors {
    pub fn new(t: Vec<Vec<f64>>) -> Result<Self> {
        let first = t
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let len = first.len();
        if t.iter().any(|v| v.len() != len) {
            return Err(Error::Dimension("batch phasor vectors differ in length".into()));
        }
        let t_mean = mean_rows(t.iter().map(|v| v.as_slice()), len);
        Ok(Self { t, t_mean })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn mean_split(&self) -> (&[f64], &[f64]) {
        self.t_mean.split_at(self.t_mean.len() / 2)
    }
}

/// Column means as `x_0 + sum_k (x_k - x_0) / b`, so a batch of identical
/// rows returns that row bit for bit.
fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, len: usize) -> Vec<f64> {
    let mut it = rows.clone();
    let Some(first) = it.next() else {
        return vec![0.0; len];
    };
    let b = rows.count() as f64;
    let mut acc = vec![0.0; len];
    for r in it {
        for ((a, x), f) in acc.iter_mut().zip(r).zip(first) {
            *a += x - f;
        }
    }
    first.iter().zip(&acc).map(|(f, a)| f + a / b).collect()
}

/// One linearized Jacobian for the whole batch, from the batch-mean phasors.
pub fn batch_mean_estimate(coeffs: &LinearCoeffs, batch: &BatchTensors) -> NodalJacobian {
    let (th, v) = batch.mean_split();
    linearized_nodal(coeffs, th, v)
}

/// Per-sample deviations of the diagonal Jacobian entries from their
/// batch-mean estimate, next to the sums of off-diagonal deviations that
/// bound them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    /// `[sample][bus]`
    pub pt_diag: Vec<Vec<f64>>,
    pub pt_bound: Vec<Vec<f64>>,
    pub qv_diag: Vec<Vec<f64>>,
    pub qv_bound: Vec<Vec<f64>>,
    /// Largest off-diagonal deviation of either block.
    pub max_offdiag: f64,
    /// Largest deviation over all entries relative to the largest magnitude
    /// of the batch-mean Jacobian.
    pub max_relative: f64,
    pub holds: bool,
}

pub fn error_bound_check(batch: &BatchTensors, coeffs: &LinearCoeffs) -> ErrorBoundReport {
    let n = coeffs.vbar.len();
    let mean = batch_mean_estimate(coeffs, batch);
    let scale = mean
        .pt
        .iter()
        .chain(&mean.qv)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let (tm, vm) = batch.mean_split();
    let vbar = &coeffs.vbar;
    let mut rep = ErrorBoundReport {
        pt_diag: Vec::new(),
        pt_bound: Vec::new(),
        qv_diag: Vec::new(),
        qv_bound: Vec::new(),
        max_offdiag: 0.0,
        max_relative: 0.0,
        holds: true,
    };
    for t in &batch.t {
        let (th, v) = t.split_at(n);
        let jac = linearized_nodal(coeffs, th, v);
        let (mut pd, mut pb, mut qd, mut qb) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let d_vi = v[i] - vm[i];
            for e in coeffs.row_ptr[i]..coeffs.row_ptr[i + 1] {
                let j = coeffs.col_idx[e];
                let a = &coeffs.a_offdiag[e];
                if j == i {
                    pd[i] = (jac.pt[e] - mean.pt[e]).abs();
                    qd[i] = (jac.qv[e] - mean.qv[e]).abs();
                    // own term of the Q-V diagonal: -2 B_ii (V_i - V̄_i)
                    qb[i] += (coeffs.a_diag_self[i][3][1] * d_vi).abs();
                    continue;
                }
                // A_(ij) rows evaluated on the deviation from the batch mean
                let d_th = (th[i] - th[j]) - (tm[i] - tm[j]);
                let d_vj = v[j] - vm[j];
                let e_pt = (a[0][0] * d_th + a[0][3] * d_vj).abs();
                let e_qv = (a[3][0] * d_th + a[3][2] * d_vi).abs();
                pb[i] += e_pt;
                rep.max_offdiag = rep.max_offdiag.max(e_pt).max(e_qv);
                // Q-V diagonal neighbour terms: vbar_j G d_theta_ij - B d_V_j
                let nb = &coeffs.a_diag_nbr[e];
                qb[i] += (vbar[j] * a[1][2] * d_th).abs() + (nb[3][1] * d_vj).abs();
            }
            let slack = 1e-12 * scale;
            if pd[i] > pb[i] + slack || qd[i] > qb[i] + slack {
                rep.holds = false;
            }
        }
        rep.max_relative = rep.max_relative.max(jac.max_abs_diff(&mean) / scale);
        rep.pt_diag.push(pd);
        rep.pt_bound.push(pb);
        rep.qv_diag.push(qd);
        rep.qv_bound.push(qb);
    }
    rep
}

/// Gradient-estimation scheme used in the full-loss phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Per-sample exact Jacobians and factorizations (reference oracle).
    #[serde(rename = "EXACT")]
    Exact,
    M0,
    M1,
    M2,
    M3,
    M4,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Exact, Mode::M0, Mode::M1, Mode::M2, Mode::M3, Mode::M4];

    pub fn linearized(self) -> bool {
        matches!(self, Mode::M2 | Mode::M4)
    }

    pub fn decoupled(self) -> bool {
        matches!(self, Mode::M3 | Mode::M4)
    }

    /// Whether flow terms are restricted to the reduced branch set.
    pub fn reduced(self) -> bool {
        matches!(self, Mode::M1 | Mode::M2 | Mode::M3 | Mode::M4)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Exact => "EXACT",
            Mode::M0 => "M0",
            Mode::M1 => "M1",
            Mode::M2 => "M2",
            Mode::M3 => "M3",
            Mode::M4 => "M4",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}` (expected EXACT or M0..M4)")))
    }
}

/// Partial derivatives of one sample's loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossPartials {
    pub gy: Vec<f64>,
    pub gz1: Vec<f64>,
    pub gz2: Vec<f64>,
}

/// One operating point of a batch as seen by the gradient engine.
#[derive(Debug, Clone, Copy)]
pub struct GradSample<'a> {
    pub theta: &'a [f64],
    pub vmag: &'a [f64],
    pub flows: &'a BranchFlows,
    pub partials: &'a LossPartials,
}

/// Wall time spent in the two gradient stages of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    /// Nodal and branch Jacobian evaluation.
    pub jacobian_s: f64,
    /// Factorization and adjoint solves.
    pub ksolve_s: f64,
}

enum KSolver {
    Full(SparseLu),
    Decoupled(SparseLu, Option<SparseLu>),
}

impl KSolver {
    fn solve_transpose(&self, nr: usize, rhs: &mut [f64]) {
        match self {
            KSolver::Full(lu) => lu.solve_transpose_in_place(rhs),
            KSolver::Decoupled(pt, qv) => {
                let (a, b) = rhs.split_at_mut(nr);
                pt.solve_transpose_in_place(a);
                if let Some(qv) = qv {
                    qv.solve_transpose_in_place(b);
                }
            }
        }
    }
}

/// Computes `dl/dy` for every sample of a batch under one [`Mode`].
///
/// With `J_z1^T k = dl/dz1 + (dl/dz2)(dz2/dz1)`, the total derivative is
/// `dl/dy = dl/dy + (dl/dz2)(dz2/dy) - J_y^T k`; `(dl/dz2)(dz2/dv)` is formed
/// matrix-free from rows of the nodal and branch Jacobians.
#[derive(Debug, Clone)]
pub struct GradientEngine {
    pub mode: Mode,
    part: BusPartition,
    asm: Z1Assembly,
    coeffs: Option<LinearCoeffs>,
    branches: Vec<usize>,
}

impl GradientEngine {
    /// `branches` is the set whose flow terms enter the loss; `coeffs` is
    /// required by the linearized modes.
    pub fn new(net: &Network, mode: Mode, branches: Vec<usize>, coeffs: Option<LinearCoeffs>) -> Result<Self> {
        if mode.linearized() && coeffs.is_none() {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} needs linearization coefficients"
            )));
        }
        if let Some(&m) = branches.iter().find(|&&m| m >= net.n_branch()) {
            return Err(Error::InvalidArgument(format!("branch index {m} out of range")));
        }
        Ok(Self {
            mode,
            part: net.partition().clone(),
            asm: Z1Assembly::new(net),
            coeffs,
            branches,
        })
    }

    pub fn branches(&self) -> &[usize] {
        &self.branches
    }

    pub fn assembly(&self) -> &Z1Assembly {
        &self.asm
    }

    fn factor(&self, jac: &NodalJacobian) -> Result<KSolver> {
        if self.mode.decoupled() {
            let (pt, qv) = self.asm.factor_decoupled(jac)?;
            Ok(KSolver::Decoupled(pt, qv))
        } else {
            Ok(KSolver::Full(self.asm.factor(jac)?))
        }
    }

    pub fn gradients(&self, net: &Network, batch: &[GradSample<'_>]) -> Result<(Vec<Vec<f64>>, StageTimes)> {
        if batch.is_empty() {
            return Ok((Vec::new(), StageTimes::default()));
        }
        let mut times = StageTimes::default();
        if self.mode == Mode::Exact {
            let mut out = Vec::with_capacity(batch.len());
            for s in batch {
                let t0 = Instant::now();
                let jac = nodal_jacobian(net, s.theta, s.vmag);
                let (jab, jrb) = exact_branch_rows(net, s.theta, s.vmag, &self.branches);
                let t1 = Instant::now();
                let solver = self.factor(&jac)?;
                times.jacobian_s += (t1 - t0).as_secs_f64();
                out.push(self.sample_gradient(net, &jac, &solver, &jab, &jrb, s, &mut times));
            }
            return Ok((out, times));
        }

        let t0 = Instant::now();
        let n = net.n_bus();
        let th = mean_rows(batch.iter().map(|s| s.theta), n);
        let vm = mean_rows(batch.iter().map(|s| s.vmag), n);
        let (jac, (jab, jrb)) = if self.mode.linearized() {
            let c = self.coeffs.as_ref().unwrap();
            (
                linearized_nodal(c, &th, &vm),
                linearized_branch_rows(net, c, &th, &vm, &self.branches),
            )
        } else {
            (
                nodal_jacobian(net, &th, &vm),
                exact_branch_rows(net, &th, &vm, &self.branches),
            )
        };
        times.jacobian_s += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let solver = self.factor(&jac)?;
        times.ksolve_s += t1.elapsed().as_secs_f64();
        let out = batch
            .iter()
            .map(|s| self.sample_gradient(net, &jac, &solver, &jab, &jrb, s, &mut times))
            .collect();
        Ok((out, times))
    }

    #[allow(clippy::too_many_arguments)]
    fn sample_gradient(
        &self,
        net: &Network,
        jac: &NodalJacobian,
        solver: &KSolver,
        jab: &[[f64; 4]],
        jrb: &[[f64; 4]],
        s: &GradSample<'_>,
        times: &mut StageTimes,
    ) -> Vec<f64> {
        let part = &self.part;
        let y = net.admittance();
        let n = part.n_bus();
        let nr = part.nonref.len();
        let ng = part.n_gen();
        let gz2 = &s.partials.gz2;

        let t0 = Instant::now();
        // w = (dl/dz2)(dz2/dv) over the full phasor vector
        let mut w = vec![0.0; 2 * n];
        let add_row = |w: &mut [f64], i: usize, p_coef: f64, q_coef: f64| {
            if p_coef == 0.0 && q_coef == 0.0 {
                return;
            }
            for e in y.row_ptr[i]..y.row_ptr[i + 1] {
                let j = y.col_idx[e];
                w[j] += p_coef * jac.pt[e] + q_coef * jac.qt[e];
                w[n + j] += p_coef * jac.pv[e] + q_coef * jac.qv[e];
            }
        };
        add_row(&mut w, part.reference, gz2[0], gz2[1]);
        for (k, &i) in part.gen.iter().enumerate() {
            add_row(&mut w, i, 0.0, gz2[2 + k]);
        }
        let off = part.z2_s2_offset();
        for (k, &m) in self.branches.iter().enumerate() {
            let d = gz2[off + m];
            let (p2, q2) = (2.0 * s.flows.p[m], 2.0 * s.flows.q[m]);
            let br = &net.branches[m];
            let cols = [br.from, br.to, n + br.from, n + br.to];
            for c in 0..4 {
                w[cols[c]] += d * (p2 * jab[k][c] + q2 * jrb[k][c]);
            }
        }

        let mut rhs = s.partials.gz1.clone();
        for (k, &i) in part.nonref.iter().enumerate() {
            rhs[k] += w[i];
        }
        for (k, &i) in part.load.iter().enumerate() {
            rhs[nr + k] += w[n + i];
        }
        let t1 = Instant::now();
        solver.solve_transpose(nr, &mut rhs);
        let t2 = Instant::now();
        let k = rhs;

        let mut g = s.partials.gy.clone();
        for (c, &i) in part.gen.iter().enumerate() {
            g[c] += k[part.nonref_pos[i].unwrap()];
        }
        for (c, &i) in part.gen_ref.iter().enumerate() {
            g[ng + c] += w[n + i];
        }
        for i in 0..n {
            let kp = part.nonref_pos[i].map_or(0.0, |r| k[r]);
            let kq = part.load_pos[i].map_or(0.0, |r| k[nr + r]);
            if kp == 0.0 && kq == 0.0 {
                continue;
            }
            for e in y.row_ptr[i]..y.row_ptr[i + 1] {
                if let Some(c) = part.gen_ref_pos[y.col_idx[e]] {
                    g[ng + c] -= kp * jac.pv[e] + kq * jac.qv[e];
                }
            }
        }
        times.ksolve_s += (t2 - t1).as_secs_f64();
        times.jacobian_s += (t1 - t0).as_secs_f64() + t2.elapsed().as_secs_f64();
        g
    }
}

/// `dl/dy` for a single sample with exact Jacobians.
pub fn loss_gradient_exact(
    net: &Network,
    theta: &[f64],
    vmag: &[f64],
    flows: &BranchFlows,
    partials: &LossPartials,
    branches: &[usize],
) -> Result<Vec<f64>> {
    let engine = GradientEngine::new(net, Mode::Exact, branches.to_vec(), None)?;
    let s = GradSample {
        theta,
        vmag,
        flows,
        partials,
    };
    Ok(engine.gradients(net, &[s])?.0.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::two_bus;
    use crate::powerflow::{branch_flows, fdpf_solve};

    fn fd_injections(net: &Network, theta: &[f64], vmag: &[f64], h: f64) -> NodalJacobian {
        let y = net.admittance();
        let n = net.n_bus();
        let mut jac = NodalJacobian::zeros(y.nnz());
        for j in 0..n {
            for is_v in [false, true] {
                let (mut tp, mut vp) = (theta.to_vec(), vmag.to_vec());
                let (mut tm, mut vmm) = (theta.to_vec(), vmag.to_vec());
                if is_v {
                    vp[j] += h;
                    vmm[j] -= h;
                } else {
                    tp[j] += h;
                    tm[j] -= h;
                }
                let (pp, qp) = injections(net, &tp, &vp);
                let (pm, qm) = injections(net, &tm, &vmm);
                for i in 0..n {
                    let cols = &y.col_idx[y.row_ptr[i]..y.row_ptr[i + 1]];
                    if let Ok(p) = cols.binary_search(&j) {
                        let e = y.row_ptr[i] + p;
                        let dp = (pp[i] - pm[i]) / (2.0 * h);
                        let dq = (qp[i] - qm[i]) / (2.0 * h);
                        if is_v {
                            jac.pv[e] = dp;
                            jac.qv[e] = dq;
                        } else {
                            jac.pt[e] = dp;
                            jac.qt[e] = dq;
                        }
                    }
                }
            }
        }
        jac
    }

    #[test]
    fn two_bus_flat_entries() {
        let net = two_bus();
        let y = net.admittance();
        let jac = nodal_jacobian(&net, &[0.0, 0.0], &[1.0, 1.0]);
        assert!((jac.get(y, Block::PTheta, 1, 0) + 10.0).abs() < 1e-12);
        assert!((jac.get(y, Block::PTheta, 1, 1) - 10.0).abs() < 1e-12);
        assert!((jac.get(y, Block::QV, 1, 1) - 10.0).abs() < 1e-12);
        let fd = fd_injections(&net, &[0.0, 0.0], &[1.0, 1.0], 1e-6);
        assert!(jac.max_abs_diff(&fd) < 1e-6);
    }

    #[test]
    fn two_bus_partition_matches_fd() {
        let net = two_bus();
        let x = net.nominal_demand();
        let st = fdpf_solve(&net, &x, &[1.0], None).unwrap();
        let jac = nodal_jacobian(&net, &st.theta, &st.vmag);
        let ip = implicit_partition(&net, &jac).unwrap();
        let d = ip.j_z1.to_dense();
        let fd = fd_injections(&net, &st.theta, &st.vmag, 1e-6);
        let y = net.admittance();
        assert!((d[0][0] - fd.get(y, Block::PTheta, 1, 1)).abs() < 1e-6);
        assert!((d[0][1] - fd.get(y, Block::PV, 1, 1)).abs() < 1e-6);
        assert!((d[1][0] - fd.get(y, Block::QTheta, 1, 1)).abs() < 1e-6);
        assert!((d[1][1] - fd.get(y, Block::QV, 1, 1)).abs() < 1e-6);
        // J_y has the single V_ref column
        assert_eq!(ip.j_y.ncols, 1);
    }

    #[test]
    fn linear_coeffs_two_bus_qv_row() {
        let net = two_bus();
        let c = linear_coeffs(&net, &[1.0, 1.0]);
        let y = net.admittance();
        let e = y.row_ptr[0] + 1;
        let row = c.a_offdiag[e][3];
        assert!(row[0].abs() < 1e-12 && row[1].abs() < 1e-12);
        assert!((row[2] + 10.0).abs() < 1e-12);
        assert_eq!(row[3], 0.0);
    }

    #[test]
    fn linearized_matches_exact_at_linearization_point() {
        let net = two_bus();
        let vbar = [1.0, 0.97];
        let c = linear_coeffs(&net, &vbar);
        let lin = linearized_nodal(&c, &[0.0, 0.0], &vbar);
        let ex = nodal_jacobian(&net, &[0.0, 0.0], &vbar);
        assert!(lin.max_abs_diff(&ex) < 1e-12);
    }

    #[test]
    fn linearized_small_angle_error() {
        let net = two_bus();
        let vbar = [1.0, 1.0];
        let c = linear_coeffs(&net, &vbar);
        let th = [0.0, -0.05];
        let lin = linearized_nodal(&c, &th, &vbar);
        let ex = nodal_jacobian(&net, &th, &vbar);
        for (a, b) in [(&lin.pt, &ex.pt), (&lin.pv, &ex.pv), (&lin.qt, &ex.qt), (&lin.qv, &ex.qv)] {
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() <= (0.02 * v.abs()).max(1e-4) + 0.02, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn decoupled_equals_full_without_coupling() {
        let net = two_bus();
        // flat state on a lossless network: the P-V and Q-theta blocks vanish
        let jac = nodal_jacobian(&net, &[0.0, 0.0], &[1.0, 1.0]);
        let asm = Z1Assembly::new(&net);
        let rhs = [0.3, -0.7];
        let (kp, kq) = decoupled_solve(&asm, &jac, &rhs).unwrap();
        let full = asm.factor(&jac).unwrap().solve_transpose(&rhs);
        assert!((kp[0] - full[0]).abs() < 1e-10);
        assert!((kq[0] - full[1]).abs() < 1e-10);
        assert!((kq[0] - rhs[1] / jac.get(net.admittance(), Block::QV, 1, 1)).abs() < 1e-12);
    }

    #[test]
    fn zero_flow_branch_has_zero_s2_row() {
        let net = two_bus();
        let fl = branch_flows(&net, &[0.0, 0.0], &[1.0, 1.0]);
        let bj = branch_jacobian(&net, &[0.0, 0.0], &[1.0, 1.0], &fl);
        assert_eq!(bj.s2_grad[0], [0.0; 4]);
    }

    #[test]
    fn identical_batch_reproduces_single_sample() {
        let net = two_bus();
        let c = linear_coeffs(&net, &[1.0, 1.0]);
        let v = vec![0.0, -0.01, 1.0, 0.99];
        let batch = BatchTensors::new(vec![v.clone(); 5]).unwrap();
        let est = batch_mean_estimate(&c, &batch);
        let single = linearized_nodal(&c, &v[..2], &v[2..]);
        assert_eq!(est, single);
        let rep = error_bound_check(&batch, &c);
        assert!(rep.holds);
        assert!(rep.pt_diag.iter().flatten().all(|&e| e == 0.0));
    }

    #[test]
    fn mode_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("M9".parse::<Mode>().is_err());
    }

    #[test]
    fn triplet_dump_format() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.5);
        t.push(1, 0, -2.0);
        let mut buf = Vec::new();
        write_triplets(&t.to_csc(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "2 2 2");
        assert!(lines[1].starts_with("0 0 1.5"));
    }
}
