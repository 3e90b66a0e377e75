//! Reference AC-OPF solver: a primal-dual interior-point method on the
//! slack reformulation `min f(x) s.t. g(x) = 0, h(x) + z = 0, z > 0`.
//!
//! Variables are `x = [theta; V; P_g; Q_g]` (one entry per aggregated
//! generator). Equalities are the nodal balances plus `theta_ref = 0`;
//! inequalities are from-end flow limits in squared form and the variable
//! boxes.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Network;
use crate::jacobian::nodal_jacobian;
use crate::powerflow::{branch_flows, injections, PFState};
use crate::sparse::{minimum_degree_order, SparseLu, Triplets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpfStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpfOptions {
    /// Tolerance on the scaled feasibility, stationarity, complementarity
    /// and cost-change conditions, and on [`kkt_residual`].
    pub tol: f64,
    /// Absolute tolerance on the power balance mismatch (p.u.).
    pub balance_tol: f64,
    pub max_iter: usize,
    /// Objective scaling used inside the iteration.
    pub cost_mult: f64,
    /// Centering parameter.
    pub sigma: f64,
    /// Fraction-to-boundary factor.
    pub xi: f64,
}

impl Default for OpfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            balance_tol: 1e-8,
            max_iter: 150,
            cost_mult: 1e-4,
            sigma: 0.1,
            xi: 0.99995,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub status: OpfStatus,
    pub state: PFState,
    /// Per aggregated generator, p.u.
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    /// $/h
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_time_s: f64,
    pub demand: Vec<f64>,
    /// Equality multipliers (P rows, Q rows, reference angle).
    pub lambda: Vec<f64>,
    /// Inequality multipliers (flow limits then variable bounds).
    pub mu: Vec<f64>,
}

impl OpfSolution {
    /// Prediction vector `y = [P_g; V_gen_ref]` of this solution.
    pub fn y(&self, net: &Network) -> Vec<f64> {
        let part = net.partition();
        part.gen
            .iter()
            .map(|&i| self.pg[part.generator_at[i].unwrap()])
            .chain(part.gen_ref.iter().map(|&i| self.state.vmag[i]))
            .collect()
    }
}

/// Sum of generator costs, `$ / h`.
pub fn generation_cost(net: &Network, pg_all: &[f64]) -> f64 {
    net.generators.iter().zip(pg_all).map(|(g, &p)| g.cost.eval(p)).sum()
}

type SparseRow = Vec<(usize, f64)>;

/// Index layout and constraint bookkeeping for one network.
struct Layout {
    n: usize,
    ng: usize,
    nx: usize,
    neq: usize,
    limited: Vec<usize>,
    /// (variable, bound, is_upper)
    bounds: Vec<(usize, f64, bool)>,
}

impl Layout {
    fn new(net: &Network) -> Self {
        let n = net.n_bus();
        let ng = net.generators.len();
        let limited: Vec<usize> = (0..net.n_branch()).filter(|&m| net.branches[m].s_max.is_some()).collect();
        let mut bounds = Vec::new();
        for (i, b) in net.buses.iter().enumerate() {
            bounds.push((n + i, b.v_max, true));
            bounds.push((n + i, b.v_min, false));
        }
        for (k, g) in net.generators.iter().enumerate() {
            bounds.push((2 * n + k, g.p_max, true));
            bounds.push((2 * n + k, g.p_min, false));
            bounds.push((2 * n + ng + k, g.q_max, true));
            bounds.push((2 * n + ng + k, g.q_min, false));
        }
        Self {
            n,
            ng,
            nx: 2 * n + 2 * ng,
            neq: 2 * n + 1,
            limited,
            bounds,
        }
    }

    fn niq(&self) -> usize {
        self.limited.len() + self.bounds.len()
    }
}

struct Eval {
    f: f64,
    df: Vec<f64>,
    g: Vec<f64>,
    jg: Vec<SparseRow>,
    h: Vec<f64>,
    jh: Vec<SparseRow>,
    /// Per limited branch: p, q and their gradients over (tf, tt, vf, vt).
    flows: Vec<(f64, f64, [f64; 4], [f64; 4])>,
}

fn evaluate(net: &Network, lay: &Layout, demand: &[f64], x: &[f64], cost_mult: f64) -> Eval {
    let n = lay.n;
    let ng = lay.ng;
    let (theta, rest) = x.split_at(n);
    let (vm, rest) = rest.split_at(n);
    let (pg, qg) = rest.split_at(ng);

    let mut f = 0.0;
    let mut df = vec![0.0; lay.nx];
    for (k, gen) in net.generators.iter().enumerate() {
        f += cost_mult * gen.cost.eval(pg[k]);
        df[2 * n + k] = cost_mult * gen.cost.derivative(pg[k]);
    }

    let (p, q) = injections(net, theta, vm);
    let jac = nodal_jacobian(net, theta, vm);
    let y = net.admittance();
    let mut g = vec![0.0; lay.neq];
    let mut jg: Vec<SparseRow> = vec![Vec::new(); lay.neq];
    for i in 0..n {
        g[i] = p[i] + demand[i];
        g[n + i] = q[i] + demand[n + i];
        for e in y.row_ptr[i]..y.row_ptr[i + 1] {
            let j = y.col_idx[e];
            jg[i].push((j, jac.pt[e]));
            jg[i].push((n + j, jac.pv[e]));
            jg[n + i].push((j, jac.qt[e]));
            jg[n + i].push((n + j, jac.qv[e]));
        }
    }
    for (k, gen) in net.generators.iter().enumerate() {
        g[gen.bus] -= pg[k];
        g[n + gen.bus] -= qg[k];
        jg[gen.bus].push((2 * n + k, -1.0));
        jg[n + gen.bus].push((2 * n + ng + k, -1.0));
    }
    let r = net.partition().reference;
    g[2 * n] = theta[r];
    jg[2 * n].push((r, 1.0));

    let fl = branch_flows(net, theta, vm);
    let stamps = &y.stamps;
    let mut h = Vec::with_capacity(lay.niq());
    let mut jh = Vec::with_capacity(lay.niq());
    let mut flows = Vec::with_capacity(lay.limited.len());
    for &m in &lay.limited {
        let br = &net.branches[m];
        let st = &stamps[m];
        let (fb, tb) = (br.from, br.to);
        let (s, c) = (theta[fb] - theta[tb]).sin_cos();
        let (vf, vt) = (vm[fb], vm[tb]);
        let (gff, bff) = st.ff;
        let (gft, bft) = st.ft;
        let a = gft * c + bft * s;
        let rr = gft * s - bft * c;
        let dp_dth = vf * vt * (-gft * s + bft * c);
        let dq_dth = vf * vt * a;
        let gp = [dp_dth, -dp_dth, 2.0 * gff * vf + vt * a, vf * a];
        let gq = [dq_dth, -dq_dth, -2.0 * bff * vf + vt * rr, vf * rr];
        let (pm, qm) = (fl.p[m], fl.q[m]);
        h.push(fl.s2[m] - br.s_max_sq());
        let cols = [fb, tb, n + fb, n + tb];
        jh.push((0..4).map(|c| (cols[c], 2.0 * pm * gp[c] + 2.0 * qm * gq[c])).collect());
        flows.push((pm, qm, gp, gq));
    }
    for &(v, b, upper) in &lay.bounds {
        if upper {
            h.push(x[v] - b);
            jh.push(vec![(v, 1.0)]);
        } else {
            h.push(b - x[v]);
            jh.push(vec![(v, -1.0)]);
        }
    }
    Eval {
        f,
        df,
        g,
        jg,
        h,
        jh,
        flows,
    }
}

/// Hessian of `T = V_i V_j f(theta_i - theta_j)` with `f'' = -f`, over
/// `(theta_i, theta_j, V_i, V_j)`, scaled into `t`.
fn push_pair_hessian(t: &mut Triplets, idx: [usize; 4], f: f64, fp: f64, vi: f64, vj: f64) {
    let h = [
        [-vi * vj * f, vi * vj * f, vj * fp, vi * fp],
        [vi * vj * f, -vi * vj * f, -vj * fp, -vi * fp],
        [vj * fp, -vj * fp, 0.0, f],
        [vi * fp, -vi * fp, f, 0.0],
    ];
    for a in 0..4 {
        for b in 0..4 {
            t.push(idx[a], idx[b], h[a][b]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn push_lagrangian_hessian(
    t: &mut Triplets,
    net: &Network,
    lay: &Layout,
    x: &[f64],
    ev: &Eval,
    lam: &[f64],
    mu: &[f64],
    cost_mult: f64,
) {
    let n = lay.n;
    let theta = &x[..n];
    let vm = &x[n..2 * n];
    for (k, gen) in net.generators.iter().enumerate() {
        t.push(2 * n + k, 2 * n + k, cost_mult * 2.0 * gen.cost.c2);
    }
    let y = net.admittance();
    for i in 0..n {
        let (lp, lq) = (lam[i], lam[n + i]);
        for e in y.row_ptr[i]..y.row_ptr[i + 1] {
            let j = y.col_idx[e];
            let (gij, bij) = (y.g[e], y.b[e]);
            if j == i {
                t.push(n + i, n + i, 2.0 * (lp * gij - lq * bij));
                continue;
            }
            let (s, c) = (theta[i] - theta[j]).sin_cos();
            let f = lp * (gij * c + bij * s) + lq * (gij * s - bij * c);
            let fp = lp * (-gij * s + bij * c) + lq * (gij * c + bij * s);
            push_pair_hessian(t, [i, j, n + i, n + j], f, fp, vm[i], vm[j]);
        }
    }
    for (r, &m) in lay.limited.iter().enumerate() {
        let w = mu[r];
        let br = &net.branches[m];
        let st = &y.stamps[m];
        let (fb, tb) = (br.from, br.to);
        let (s, c) = (theta[fb] - theta[tb]).sin_cos();
        let (gff, bff) = st.ff;
        let (gft, bft) = st.ft;
        let (p, q, gp, gq) = &ev.flows[r];
        let idx = [fb, tb, n + fb, n + tb];
        let f = 2.0 * w * (p * (gft * c + bft * s) + q * (gft * s - bft * c));
        let fp = 2.0 * w * (p * (-gft * s + bft * c) + q * (gft * c + bft * s));
        push_pair_hessian(t, idx, f, fp, vm[fb], vm[tb]);
        t.push(n + fb, n + fb, 2.0 * w * (2.0 * p * gff - 2.0 * q * bff));
        for a in 0..4 {
            for b in 0..4 {
                t.push(idx[a], idx[b], 2.0 * w * (gp[a] * gp[b] + gq[a] * gq[b]));
            }
        }
    }
}

fn mul_t(rows: &[SparseRow], v: &[f64], nx: usize) -> Vec<f64> {
    let mut out = vec![0.0; nx];
    for (r, row) in rows.iter().enumerate() {
        if v[r] != 0.0 {
            for &(c, a) in row {
                out[c] += a * v[r];
            }
        }
    }
    out
}

fn mul(rows: &[SparseRow], v: &[f64]) -> Vec<f64> {
    rows.iter().map(|row| row.iter().map(|&(c, a)| a * v[c]).sum()).collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, a| m.max(a.abs()))
}

struct Residuals {
    feas: f64,
    grad: f64,
    comp: f64,
    balance: f64,
    kkt: f64,
}

fn residuals(ev: &Eval, lay: &Layout, x: &[f64], z: Option<&[f64]>, lam: &[f64], mu: &[f64]) -> Residuals {
    let mut lx = ev.df.clone();
    for (a, b) in lx.iter_mut().zip(mul_t(&ev.jg, lam, lay.nx)) {
        *a += b;
    }
    for (a, b) in lx.iter_mut().zip(mul_t(&ev.jh, mu, lay.nx)) {
        *a += b;
    }
    let balance = inf_norm(&ev.g);
    let hmax = ev.h.iter().fold(0.0f64, |m, &v| m.max(v));
    let xnorm = inf_norm(x);
    let dual_scale = 1.0 + inf_norm(lam).max(inf_norm(mu));
    let grad = inf_norm(&lx) / dual_scale;
    let zmu: f64 = match z {
        Some(z) => z.iter().zip(mu).map(|(a, b)| a * b).sum(),
        None => ev.h.iter().zip(mu).map(|(a, b)| -a * b).sum(),
    };
    let znorm = z.map_or(0.0, inf_norm);
    let comp_each = ev.h.iter().zip(mu).fold(0.0f64, |m, (h, u)| m.max((h * u).abs()));
    let mu_neg = mu.iter().fold(0.0f64, |m, &u| m.max(-u));
    Residuals {
        feas: balance.max(hmax) / (1.0 + xnorm.max(znorm)),
        grad,
        comp: zmu / (1.0 + xnorm),
        balance,
        kkt: balance.max(hmax).max(mu_neg).max(grad).max(comp_each),
    }
}

/// Max-norm of stationarity (scaled by the multiplier size), primal
/// feasibility, dual feasibility and componentwise complementarity at the
/// solution's primal/dual point, with the objective in solver scaling.
pub fn kkt_residual(net: &Network, sol: &OpfSolution) -> f64 {
    kkt_residual_with(net, sol, OpfOptions::default().cost_mult)
}

pub fn kkt_residual_with(net: &Network, sol: &OpfSolution, cost_mult: f64) -> f64 {
    let lay = Layout::new(net);
    let x = pack(net, &sol.state, &sol.pg, &sol.qg);
    if sol.lambda.len() != lay.neq || sol.mu.len() != lay.niq() {
        return f64::INFINITY;
    }
    let ev = evaluate(net, &lay, &sol.demand, &x, cost_mult);
    residuals(&ev, &lay, &x, None, &sol.lambda, &sol.mu).kkt
}

fn pack(net: &Network, st: &PFState, pg: &[f64], qg: &[f64]) -> Vec<f64> {
    let _ = net;
    st.theta
        .iter()
        .chain(&st.vmag)
        .chain(pg)
        .chain(qg)
        .copied()
        .collect()
}

/// Reusable solver for one network; caches the KKT fill-reducing ordering.
pub struct OpfSolver<'a> {
    net: &'a Network,
    lay: Layout,
    pub options: OpfOptions,
    order: std::sync::OnceLock<Vec<usize>>,
}

impl<'a> OpfSolver<'a> {
    pub fn new(net: &'a Network, options: OpfOptions) -> Self {
        Self {
            net,
            lay: Layout::new(net),
            options,
            order: std::sync::OnceLock::new(),
        }
    }

    fn initial_point(&self) -> Vec<f64> {
        let net = self.net;
        let n = self.lay.n;
        let mut x = vec![0.0; self.lay.nx];
        for (i, b) in net.buses.iter().enumerate() {
            x[n + i] = 1.0f64.clamp(b.v_min, b.v_max);
        }
        for (k, g) in net.generators.iter().enumerate() {
            x[2 * n + k] = 0.5 * (g.p_min + g.p_max);
            x[2 * n + self.lay.ng + k] = 0.5 * (g.q_min + g.q_max);
        }
        x
    }

    pub fn solve(&self, demand: &[f64]) -> Result<OpfSolution> {
        let net = self.net;
        let lay = &self.lay;
        let opt = &self.options;
        if demand.len() != 2 * lay.n {
            return Err(Error::Dimension(format!(
                "demand has length {}, expected {}",
                demand.len(),
                2 * lay.n
            )));
        }
        let start = Instant::now();
        let nx = lay.nx;
        let neq = lay.neq;
        let niq = lay.niq();
        let cm = opt.cost_mult;

        let mut x = self.initial_point();
        let mut ev = evaluate(net, lay, demand, &x, cm);
        let z0 = 1.0;
        let mut gamma = 1.0;
        let mut lam = vec![0.0; neq];
        let mut z: Vec<f64> = ev.h.iter().map(|&h| if h < -z0 { -h } else { z0 }).collect();
        let mut mu: Vec<f64> = z.iter().map(|&zi| if gamma / zi > z0 { gamma / zi } else { z0 }).collect();
        let mut f0 = ev.f;
        let mut status = OpfStatus::IterationLimit;
        let mut it = 0;

        loop {
            let res = residuals(&ev, lay, &x, Some(&z), &lam, &mu);
            let cost_change = if it == 0 { f64::INFINITY } else { (ev.f - f0).abs() / (1.0 + f0.abs()) };
            if res.feas <= opt.tol
                && res.grad <= opt.tol
                && res.comp <= opt.tol
                && cost_change <= opt.tol
                && res.balance <= opt.balance_tol
                && res.kkt <= opt.tol
            {
                status = OpfStatus::Optimal;
                break;
            }
            if it >= opt.max_iter {
                break;
            }
            if !x.iter().all(|v| v.is_finite()) || res.feas > 1e10 {
                status = OpfStatus::Infeasible;
                break;
            }
            it += 1;

            // Newton system
            let mut lx = ev.df.clone();
            for (a, b) in lx.iter_mut().zip(mul_t(&ev.jg, &lam, nx)) {
                *a += b;
            }
            for (a, b) in lx.iter_mut().zip(mul_t(&ev.jh, &mu, nx)) {
                *a += b;
            }
            let mut t = Triplets::with_capacity(nx + neq, nx + neq, 64 * nx);
            push_lagrangian_hessian(&mut t, net, lay, &x, &ev, &lam, &mu, cm);
            let mut nvec = lx.clone();
            for (r, row) in ev.jh.iter().enumerate() {
                let d = mu[r] / z[r];
                let s = (gamma + mu[r] * ev.h[r]) / z[r];
                for &(a, va) in row {
                    nvec[a] += va * s;
                    for &(b, vb) in row {
                        t.push(a, b, d * va * vb);
                    }
                }
            }
            for (r, row) in ev.jg.iter().enumerate() {
                for &(c, v) in row {
                    t.push(nx + r, c, v);
                    t.push(c, nx + r, v);
                }
                // keeps the pattern of the zero block explicit
                t.push(nx + r, nx + r, 0.0);
            }
            let kkt = t.to_csc();
            let order = self.order.get_or_init(|| minimum_degree_order(&kkt));
            let lu = match SparseLu::factor_ordered(&kkt, order) {
                Ok(lu) => lu,
                Err(e) => {
                    log::debug!("opf: KKT factorization failed at iteration {it}: {e}");
                    status = OpfStatus::Infeasible;
                    break;
                }
            };
            let mut rhs: Vec<f64> = nvec.iter().map(|v| -v).chain(ev.g.iter().map(|v| -v)).collect();
            lu.solve_in_place(&mut rhs);
            if !rhs.iter().all(|v| v.is_finite()) {
                status = OpfStatus::Infeasible;
                break;
            }
            let (dx, dlam) = rhs.split_at(nx);
            let jdx = mul(&ev.jh, dx);
            let dz: Vec<f64> = (0..niq).map(|r| -ev.h[r] - z[r] - jdx[r]).collect();
            let dmu: Vec<f64> = (0..niq).map(|r| -mu[r] + (gamma - mu[r] * dz[r]) / z[r]).collect();

            let step = |v: &[f64], dv: &[f64]| {
                let mut a = 1.0f64;
                for (vi, di) in v.iter().zip(dv) {
                    if *di < 0.0 {
                        a = a.min(opt.xi * (-vi / di));
                    }
                }
                a
            };
            let ap = step(&z, &dz);
            let ad = step(&mu, &dmu);
            for (xi, d) in x.iter_mut().zip(dx) {
                *xi += ap * d;
            }
            for (zi, d) in z.iter_mut().zip(&dz) {
                *zi += ap * d;
            }
            for (li, d) in lam.iter_mut().zip(dlam) {
                *li += ad * d;
            }
            for (mi, d) in mu.iter_mut().zip(&dmu) {
                *mi += ad * d;
            }
            gamma = opt.sigma * z.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>() / niq as f64;
            f0 = ev.f;
            ev = evaluate(net, lay, demand, &x, cm);
        }

        let n = lay.n;
        let ng = lay.ng;
        let state = PFState {
            theta: x[..n].to_vec(),
            vmag: x[n..2 * n].to_vec(),
            converged: status == OpfStatus::Optimal,
            iterations: it,
            max_mismatch: inf_norm(&ev.g),
            newton: false,
        };
        let pg = x[2 * n..2 * n + ng].to_vec();
        let qg = x[2 * n + ng..].to_vec();
        let kkt = residuals(&ev, lay, &x, None, &lam, &mu).kkt;
        Ok(OpfSolution {
            status,
            objective: generation_cost(net, &pg),
            state,
            pg,
            qg,
            kkt_residual: kkt,
            iterations: it,
            solve_time_s: start.elapsed().as_secs_f64(),
            demand: demand.to_vec(),
            lambda: lam,
            mu,
        })
    }
}

pub fn solve_opf(net: &Network, demand: &[f64], options: OpfOptions) -> Result<OpfSolution> {
    OpfSolver::new(net, options).solve(demand)
}

/// Solves many demand vectors on the current rayon pool, preserving order.
pub fn solve_batch(net: &Network, demands: &[Vec<f64>], options: OpfOptions) -> Vec<Result<OpfSolution>> {
    let solver = OpfSolver::new(net, options);
    // the first solve fixes the cached ordering before the parallel section
    if let Some(first) = demands.first() {
        let r0 = solver.solve(first);
        let mut out = vec![r0];
        out.extend(demands[1..].par_iter().map(|d| solver.solve(d)).collect::<Vec<_>>());
        return out;
    }
    Vec::new()
}
