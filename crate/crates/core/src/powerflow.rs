//! Inner power-flow problem: fast-decoupled (XB) iteration with a Newton
//! fallback, and reconstruction of the dependent quantities.
//!
//! The split residual is `f = injections - scheduled` over the angle rows
//! (generator and load buses) and the voltage rows (load buses).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Branch, BusPartition, Network, NetworkData};
use crate::jacobian::{nodal_jacobian, Z1Assembly};
use crate::sparse::{SparseLu, Triplets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PFState {
    pub theta: Vec<f64>,
    pub vmag: Vec<f64>,
    pub converged: bool,
    /// FDPF iteration pairs, or Newton steps when `newton` is set.
    pub iterations: usize,
    pub max_mismatch: f64,
    pub newton: bool,
}

impl PFState {
    pub fn flat(n: usize) -> Self {
        Self {
            theta: vec![0.0; n],
            vmag: vec![1.0; n],
            converged: false,
            iterations: 0,
            max_mismatch: f64::INFINITY,
            newton: false,
        }
    }

    pub fn from_phasors(theta: Vec<f64>, vmag: Vec<f64>) -> Self {
        Self {
            theta,
            vmag,
            ..Self::flat(0)
        }
    }

    /// `v = [theta; V]`
    pub fn phasors(&self) -> Vec<f64> {
        self.theta.iter().chain(self.vmag.iter()).copied().collect()
    }

    pub fn z1(&self, part: &BusPartition) -> Vec<f64> {
        part.nonref
            .iter()
            .map(|&i| self.theta[i])
            .chain(part.load.iter().map(|&i| self.vmag[i]))
            .collect()
    }

    pub fn set_z1(&mut self, part: &BusPartition, z1: &[f64]) {
        for (k, &i) in part.nonref.iter().enumerate() {
            self.theta[i] = z1[k];
        }
        let off = part.z1_v_offset();
        for (k, &i) in part.load.iter().enumerate() {
            self.vmag[i] = z1[off + k];
        }
    }
}

/// From-end branch flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFlows {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub s2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitVectors {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

impl SplitVectors {
    /// Reads `y` off a solved state (generator outputs from the injections).
    pub fn from_state(net: &Network, state: &PFState, x: &[f64]) -> Self {
        let part = net.partition();
        let n = net.n_bus();
        let (p, _) = injections(net, &state.theta, &state.vmag);
        let mut y = Vec::with_capacity(part.y_len());
        y.extend(part.gen.iter().map(|&i| p[i] + x[i]));
        y.extend(part.gen_ref.iter().map(|&i| state.vmag[i]));
        let (z2, _) = reconstruct(net, state, x);
        debug_assert_eq!(x.len(), 2 * n);
        Self {
            x: x.to_vec(),
            y,
            z1: state.z1(part),
            z2,
        }
    }
}

/// Net injections `P_i + jQ_i = V_i sum_j V_j (G_ij + jB_ij)^* e^{j theta_ij}`.
pub fn injections(net: &Network, theta: &[f64], vmag: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let y = net.admittance();
    let n = y.n();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let (mut sp, mut sq) = (0.0, 0.0);
        for (j, g, b) in y.row(i) {
            let (s, c) = (theta[i] - theta[j]).sin_cos();
            sp += vmag[j] * (g * c + b * s);
            sq += vmag[j] * (g * s - b * c);
        }
        p[i] = vmag[i] * sp;
        q[i] = vmag[i] * sq;
    }
    (p, q)
}

/// Scheduled net injections on the residual rows for demand `x` and
/// prediction `y`.
fn scheduled(part: &BusPartition, x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = part.n_bus();
    let mut s = Vec::with_capacity(part.z1_len());
    for &i in &part.nonref {
        let pg = part.gen_pos[i].map_or(0.0, |k| y[k]);
        s.push(pg - x[i]);
    }
    s.extend(part.load.iter().map(|&i| -x[n + i]));
    s
}

fn residual_from(part: &BusPartition, p: &[f64], q: &[f64], sched: &[f64], out: &mut [f64]) {
    let nr = part.nonref.len();
    for (k, &i) in part.nonref.iter().enumerate() {
        out[k] = p[i] - sched[k];
    }
    for (k, &i) in part.load.iter().enumerate() {
        out[nr + k] = q[i] - sched[nr + k];
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &a| if a.is_nan() { f64::NAN } else { m.max(a.abs()) })
}

/// `f(y, z1)` at the given state, length `2 N_d + N_g`.
pub fn pf_residual(net: &Network, state: &PFState, x: &[f64], y: &[f64]) -> Vec<f64> {
    let part = net.partition();
    let (p, q) = injections(net, &state.theta, &state.vmag);
    let sched = scheduled(part, x, y);
    let mut out = vec![0.0; part.z1_len()];
    residual_from(part, &p, &q, &sched, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfOptions {
    /// Max absolute mismatch (p.u.) accepted as converged.
    pub tol: f64,
    /// FDPF iteration pairs before falling back to Newton.
    pub max_iter: usize,
    pub newton_max_iter: usize,
    pub newton_fallback: bool,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            newton_max_iter: 20,
            newton_fallback: true,
        }
    }
}

/// Prefactored XB fast-decoupled solver for one network.
#[derive(Debug, Clone)]
pub struct FdpfSolver {
    part: BusPartition,
    bp: SparseLu,
    bpp: Option<SparseLu>,
    z1: Z1Assembly,
    pub options: PfOptions,
}

impl FdpfSolver {
    pub fn new(net: &Network) -> Result<Self> {
        Self::with_options(net, PfOptions::default())
    }

    pub fn with_options(net: &Network, options: PfOptions) -> Result<Self> {
        let part = net.partition().clone();
        // B': series reactance only, no charging, shunts or taps
        let mut d: NetworkData = net.data();
        for b in &mut d.buses {
            b.shunt_g = 0.0;
            b.shunt_b = 0.0;
        }
        d.branches = d
            .branches
            .iter()
            .map(|br| Branch {
                r: 0.0,
                charging_b: 0.0,
                tap: 1.0,
                ..br.clone()
            })
            .collect();
        let bp_net = Network::new(d)?;
        let bp = Self::minus_b(&bp_net, &part.nonref, &part.nonref_pos)?;
        // B'': full susceptance including charging, taps and shunts
        let bpp = if part.load.is_empty() {
            None
        } else {
            Some(Self::minus_b(net, &part.load, &part.load_pos)?)
        };
        Ok(Self {
            z1: Z1Assembly::new(net),
            part,
            bp,
            bpp,
            options,
        })
    }

    fn minus_b(net: &Network, rows: &[usize], pos: &[Option<usize>]) -> Result<SparseLu> {
        let y = net.admittance();
        let mut t = Triplets::new(rows.len(), rows.len());
        for (r, &i) in rows.iter().enumerate() {
            for (j, _, b) in y.row(i) {
                if let Some(c) = pos[j] {
                    t.push(r, c, -b);
                }
            }
        }
        SparseLu::factor(&t.to_csc())
    }

    pub fn z1_assembly(&self) -> &Z1Assembly {
        &self.z1
    }

    /// Initial state: `init` (or flat) with `y`'s voltages imposed and the
    /// reference angle zeroed.
    fn start(&self, y: &[f64], init: Option<&PFState>) -> PFState {
        let part = &self.part;
        let mut s = match init {
            Some(st) => PFState::from_phasors(st.theta.clone(), st.vmag.clone()),
            None => PFState::flat(part.n_bus()),
        };
        let off = part.y_v_offset();
        for (k, &i) in part.gen_ref.iter().enumerate() {
            s.vmag[i] = y[off + k];
        }
        s.theta[part.reference] = 0.0;
        s
    }

    pub fn solve(&self, net: &Network, x: &[f64], y: &[f64], init: Option<&PFState>) -> Result<PFState> {
        let part = &self.part;
        if x.len() != 2 * part.n_bus() || y.len() != part.y_len() {
            return Err(Error::Dimension(format!(
                "power flow expects |x| = {} and |y| = {}, got {} and {}",
                2 * part.n_bus(),
                part.y_len(),
                x.len(),
                y.len()
            )));
        }
        let fd = self.fdpf(net, x, y, init);
        if fd.converged || !self.options.newton_fallback {
            return if fd.converged {
                Ok(fd)
            } else {
                Err(Error::Diverged {
                    iterations: fd.iterations,
                    max_mismatch: fd.max_mismatch,
                })
            };
        }
        log::debug!(
            "fdpf stalled after {} iterations (mismatch {:.3e}), trying newton",
            fd.iterations,
            fd.max_mismatch
        );
        let nr = self.newton(net, x, y, init);
        if nr.converged {
            Ok(nr)
        } else {
            let best = if nr.max_mismatch.is_nan() {
                fd.max_mismatch
            } else {
                nr.max_mismatch.min(fd.max_mismatch)
            };
            Err(Error::Diverged {
                iterations: fd.iterations + nr.iterations,
                max_mismatch: best,
            })
        }
    }

    /// Plain FDPF iteration; never errors, the returned state tells whether
    /// it converged.
    pub fn fdpf(&self, net: &Network, x: &[f64], y: &[f64], init: Option<&PFState>) -> PFState {
        let part = &self.part;
        let nr = part.nonref.len();
        let sched = scheduled(part, x, y);
        let mut st = self.start(y, init);
        let mut f = vec![0.0; part.z1_len()];
        let mut rhs_p = vec![0.0; nr];
        let mut rhs_q = vec![0.0; part.n_load()];
        let tol = self.options.tol;

        let mismatch = |st: &PFState, f: &mut [f64]| {
            let (p, q) = injections(net, &st.theta, &st.vmag);
            residual_from(part, &p, &q, &sched, f);
            max_abs(f)
        };

        let mut mis = mismatch(&st, &mut f);
        let mut it = 0;
        while it < self.options.max_iter {
            if mis <= tol || !mis.is_finite() {
                break;
            }
            it += 1;
            for (k, &i) in part.nonref.iter().enumerate() {
                rhs_p[k] = f[k] / st.vmag[i];
            }
            self.bp.solve_in_place(&mut rhs_p);
            for (k, &i) in part.nonref.iter().enumerate() {
                st.theta[i] -= rhs_p[k];
            }
            mis = mismatch(&st, &mut f);
            if mis <= tol || !mis.is_finite() {
                break;
            }
            if let Some(bpp) = &self.bpp {
                for (k, &i) in part.load.iter().enumerate() {
                    rhs_q[k] = f[nr + k] / st.vmag[i];
                }
                bpp.solve_in_place(&mut rhs_q);
                for (k, &i) in part.load.iter().enumerate() {
                    st.vmag[i] -= rhs_q[k];
                }
                mis = mismatch(&st, &mut f);
            }
        }
        st.iterations = it;
        st.max_mismatch = mis;
        st.converged = mis <= tol;
        st
    }

    /// Full Newton on the split system, started from `init` (or flat).
    pub fn newton(&self, net: &Network, x: &[f64], y: &[f64], init: Option<&PFState>) -> PFState {
        let part = &self.part;
        let sched = scheduled(part, x, y);
        let mut st = self.start(y, init);
        st.newton = true;
        let mut f = vec![0.0; part.z1_len()];
        let tol = self.options.tol;
        let mut it = 0;
        loop {
            let (p, q) = injections(net, &st.theta, &st.vmag);
            residual_from(part, &p, &q, &sched, &mut f);
            let mis = max_abs(&f);
            st.max_mismatch = mis;
            if mis <= tol || !mis.is_finite() || mis > 1e6 || it >= self.options.newton_max_iter {
                break;
            }
            it += 1;
            let jac = nodal_jacobian(net, &st.theta, &st.vmag);
            let lu = match self.z1.factor(&jac) {
                Ok(lu) => lu,
                Err(_) => break,
            };
            lu.solve_in_place(&mut f);
            let mut z = st.z1(part);
            for (zi, di) in z.iter_mut().zip(&f) {
                *zi -= di;
            }
            st.set_z1(part, &z);
        }
        st.iterations = it;
        st.converged = st.max_mismatch <= tol;
        st
    }
}

/// One-shot convenience wrapper; prefer a reused [`FdpfSolver`] in loops.
pub fn fdpf_solve(net: &Network, x: &[f64], y: &[f64], init: Option<&PFState>) -> Result<PFState> {
    FdpfSolver::new(net)?.solve(net, x, y, init)
}

/// From-end flows of every branch (pi model with tap on the from side).
pub fn branch_flows(net: &Network, theta: &[f64], vmag: &[f64]) -> BranchFlows {
    let m = net.n_branch();
    let mut out = BranchFlows {
        p: Vec::with_capacity(m),
        q: Vec::with_capacity(m),
        s2: Vec::with_capacity(m),
    };
    for (br, st) in net.branches.iter().zip(&net.admittance().stamps) {
        let (f, t) = (br.from, br.to);
        let (s, c) = (theta[f] - theta[t]).sin_cos();
        let (vf, vt) = (vmag[f], vmag[t]);
        let (gff, bff) = st.ff;
        let (gft, bft) = st.ft;
        let p = gff * vf * vf + vf * vt * (gft * c + bft * s);
        let q = -bff * vf * vf + vf * vt * (gft * s - bft * c);
        out.p.push(p);
        out.q.push(q);
        out.s2.push(p * p + q * q);
    }
    out
}

/// To-end flows, for monitoring only.
pub fn branch_flows_to(net: &Network, theta: &[f64], vmag: &[f64]) -> BranchFlows {
    let m = net.n_branch();
    let mut out = BranchFlows {
        p: Vec::with_capacity(m),
        q: Vec::with_capacity(m),
        s2: Vec::with_capacity(m),
    };
    for (br, st) in net.branches.iter().zip(&net.admittance().stamps) {
        let (f, t) = (br.from, br.to);
        let (s, c) = (theta[t] - theta[f]).sin_cos();
        let (vf, vt) = (vmag[f], vmag[t]);
        let (gtt, btt) = st.tt;
        let (gtf, btf) = st.tf;
        let p = gtt * vt * vt + vt * vf * (gtf * c + btf * s);
        let q = -btt * vt * vt + vt * vf * (gtf * s - btf * c);
        out.p.push(p);
        out.q.push(q);
        out.s2.push(p * p + q * q);
    }
    out
}

/// `z2 = [P_g,ref; Q_g,ref; Q_g; s^2]` and the branch flows behind `s^2`.
pub fn reconstruct(net: &Network, state: &PFState, x: &[f64]) -> (Vec<f64>, BranchFlows) {
    let part = net.partition();
    let n = net.n_bus();
    let (p, q) = injections(net, &state.theta, &state.vmag);
    let flows = branch_flows(net, &state.theta, &state.vmag);
    let r = part.reference;
    let mut z2 = Vec::with_capacity(part.z2_len());
    z2.push(p[r] + x[r]);
    z2.push(q[r] + x[n + r]);
    z2.extend(part.gen.iter().map(|&i| q[i] + x[n + i]));
    z2.extend_from_slice(&flows.s2);
    (z2, flows)
}

/// Demand implied at the load buses by a phasor state, `[P_d; Q_d]` over
/// all buses with non-load entries copied from `x`.
pub fn implied_demand(net: &Network, state: &PFState, x: &[f64]) -> Vec<f64> {
    let n = net.n_bus();
    let (p, q) = injections(net, &state.theta, &state.vmag);
    let mut out = x.to_vec();
    for &i in &net.partition().load {
        out[i] = -p[i];
        out[n + i] = -q[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::two_bus;

    /// Scalar oracle for the lossless two-bus line: with `V_1 = 1`,
    /// `P_2 = -10 V_2 sin(d)`, `Q_2 = 10 V_2^2 - 10 V_2 cos(d)` where
    /// `d = theta_1 - theta_2`. Solved by nested bisection.
    pub(crate) fn two_bus_oracle(pd: f64) -> (f64, f64) {
        // Q_2 = 0 gives V_2 = cos(d); P_2 = -pd gives 10 cos(d) sin(d) = pd
        let (mut lo, mut hi) = (0.0f64, 0.7f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 10.0 * mid.cos() * mid.sin() < pd {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let d = 0.5 * (lo + hi);
        (-d, d.cos())
    }

    #[test]
    fn flat_injections_are_zero() {
        let net = two_bus();
        let (p, q) = injections(&net, &[0.0, 0.0], &[1.0, 1.0]);
        assert!(p.iter().chain(&q).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_bus_matches_bisection() {
        let net = two_bus();
        let x = net.nominal_demand();
        let st = fdpf_solve(&net, &x, &[1.0], None).unwrap();
        let (th, v) = two_bus_oracle(0.1);
        assert!(st.converged);
        assert!((st.theta[1] - th).abs() < 1e-8, "{} vs {th}", st.theta[1]);
        assert!((st.vmag[1] - v).abs() < 1e-8);
        assert!((th + 0.0100007).abs() < 1e-6);
        assert!((v - 0.99995).abs() < 1e-6);
        assert_eq!(st.theta[0], 0.0);
        let r = pf_residual(&net, &st, &x, &[1.0]);
        assert!(max_abs(&r) <= 1e-8);
    }

    #[test]
    fn zero_demand_is_flat() {
        let net = two_bus();
        let st = fdpf_solve(&net, &[0.0; 4], &[1.0], None).unwrap();
        assert!(st.iterations <= 1);
        assert_eq!(st.theta, vec![0.0, 0.0]);
        assert_eq!(st.vmag, vec![1.0, 1.0]);
        let (z2, _) = reconstruct(&net, &st, &[0.0; 4]);
        assert!(z2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_residual_is_demand() {
        let net = two_bus();
        let x = net.nominal_demand();
        let r = pf_residual(&net, &PFState::flat(2), &x, &[1.0]);
        // injections are zero at flat start, so f = 0 - (-P_d) = P_d
        assert!((r[0] - 0.1).abs() < 1e-15);
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn two_bus_reconstruction_is_lossless() {
        let net = two_bus();
        let x = net.nominal_demand();
        let st = fdpf_solve(&net, &x, &[1.0], None).unwrap();
        let (z2, flows) = reconstruct(&net, &st, &x);
        assert!((z2[0] - 0.1).abs() < 1e-8);
        // p = 0.1 plus a small reactive loss term
        assert!((flows.s2[0] - 0.01).abs() < 1e-5);
        assert_eq!(flows.s2[0], flows.p[0] * flows.p[0] + flows.q[0] * flows.q[0]);
    }

    #[test]
    fn newton_agrees_with_fdpf() {
        let net = two_bus();
        let x = net.nominal_demand();
        let solver = FdpfSolver::new(&net).unwrap();
        let a = solver.fdpf(&net, &x, &[1.0], None);
        let b = solver.newton(&net, &x, &[1.0], None);
        assert!(a.converged && b.converged);
        for (u, v) in a.phasors().iter().zip(b.phasors()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn unsolvable_demand_diverges() {
        let net = two_bus();
        // beyond the nose point of a 10 p.u. line
        let x = vec![0.0, 8.0, 0.0, 0.0];
        match fdpf_solve(&net, &x, &[1.0], None) {
            Err(Error::Diverged { max_mismatch, .. }) => assert!(max_mismatch > 1e-8 || max_mismatch.is_nan()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
