//! Test-set metrics: optimality gap, inequality violations, load mismatch
//! and inference timing against the reference OPF.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Network;
use crate::opf::generation_cost;
use crate::powerflow::{implied_demand, reconstruct, BranchFlows, FdpfSolver, PFState};
use crate::trainer::Fcnn;

/// `(C - C_o) / C_o * 100`
pub fn optimality_gap(cost: f64, cost_ref: f64) -> Result<f64> {
    if !(cost_ref > 0.0) {
        return Err(Error::InvalidArgument(format!("reference cost must be positive, got {cost_ref}")));
    }
    Ok((cost - cost_ref) / cost_ref * 100.0)
}

/// `z_a = [P_g; P_g,ref; Q_g; Q_g,ref; V; s^2]` with its bounds; `s^2` has
/// lower bound 0 and no upper bound on unrated branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Za {
    pub value: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn assemble_za(net: &Network, y: &[f64], state: &PFState, z2: &[f64]) -> Za {
    let part = net.partition();
    let ng = part.n_gen();
    let gen_of = |bus: usize| &net.generators[part.generator_at[bus].unwrap()];
    let rg = net.reference_generator();
    let cap = 2 * ng + 2 + net.n_bus() + net.n_branch();
    let mut za = Za {
        value: Vec::with_capacity(cap),
        lo: Vec::with_capacity(cap),
        hi: Vec::with_capacity(cap),
    };
    let mut push = |v: f64, lo: f64, hi: f64| {
        za.value.push(v);
        za.lo.push(lo);
        za.hi.push(hi);
    };
    for (k, &i) in part.gen.iter().enumerate() {
        let g = gen_of(i);
        push(y[k], g.p_min, g.p_max);
    }
    push(z2[0], rg.p_min, rg.p_max);
    for (k, &i) in part.gen.iter().enumerate() {
        let g = gen_of(i);
        push(z2[2 + k], g.q_min, g.q_max);
    }
    push(z2[1], rg.q_min, rg.q_max);
    for (i, b) in net.buses.iter().enumerate() {
        push(state.vmag[i], b.v_min, b.v_max);
    }
    let off = part.z2_s2_offset();
    for (m, br) in net.branches.iter().enumerate() {
        push(z2[off + m], 0.0, br.s_max_sq());
    }
    za
}

/// Elementwise `ReLU(z - z_max) + ReLU(z_min - z)`.
pub fn violations(za: &Za) -> Vec<f64> {
    za.value
        .iter()
        .zip(za.lo.iter().zip(&za.hi))
        .map(|(&v, (&lo, &hi))| (v - hi).max(0.0) + (lo - v).max(0.0))
        .collect()
}

/// `(max, mean)` of the violations over every component of every sample.
pub fn violation_stats(samples: &[Za]) -> (f64, f64) {
    let (mut mx, mut sum, mut count) = (0.0f64, 0.0, 0usize);
    for za in samples {
        for v in violations(za) {
            mx = mx.max(v);
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0.0)
    } else {
        (mx, sum / count as f64)
    }
}

/// `sum |d_implied - d| / sum |d| * 100` over the load-bus entries of
/// `x = [P_d; Q_d]`.
pub fn load_mismatch(net: &Network, state: &PFState, x: &[f64]) -> f64 {
    let n = net.n_bus();
    let implied = implied_demand(net, state, x);
    let (mut num, mut den) = (0.0, 0.0);
    for &i in &net.partition().load {
        for k in [i, n + i] {
            num += (implied[k] - x[k]).abs();
            den += x[k].abs();
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den * 100.0
    }
}

/// Cost of the dispatch `y` plus the reconstructed reference output.
pub fn dispatch_cost(net: &Network, y: &[f64], z2: &[f64]) -> f64 {
    let part = net.partition();
    let mut pg = vec![0.0; net.generators.len()];
    pg[part.generator_at[part.reference].unwrap()] = z2[0];
    for (c, &i) in part.gen.iter().enumerate() {
        pg[part.generator_at[i].unwrap()] = y[c];
    }
    generation_cost(net, &pg)
}

/// Model output completed through the power flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub y: Vec<f64>,
    pub state: PFState,
    pub z2: Vec<f64>,
    pub flows: BranchFlows,
    pub cost: f64,
}

pub fn infer(net: &Network, model: &Fcnn, solver: &FdpfSolver, x: &[f64]) -> Result<Inference> {
    let (_, y) = model.forward(x);
    let state = solver.solve(net, x, &y, None)?;
    let (z2, flows) = reconstruct(net, &state, x);
    let cost = dispatch_cost(net, &y, &z2);
    Ok(Inference {
        y,
        state,
        z2,
        flows,
        cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_samples: usize,
    /// Samples whose power flow failed; excluded from every metric.
    pub n_failed: usize,
    /// Converged samples without a usable reference cost.
    pub n_no_reference: usize,
    /// Mean optimality gap, percent.
    pub l_cost: f64,
    pub l_cost_max: f64,
    pub l_v_max: f64,
    pub l_v_mean: f64,
    /// Mean load mismatch, percent.
    pub e_l: f64,
    pub e_l_max: f64,
    /// Forward + power flow + reconstruction, all samples, serial.
    pub t_prop_s: f64,
    pub t_infer_per_sample_s: f64,
    pub t_opt_s: Option<f64>,
    pub speedup: Option<f64>,
}

/// Runs the model over `xs` (serially, so the total is a wall-clock figure)
/// and compares against `ref_costs` where present.
pub fn evaluate(
    net: &Network,
    model: &Fcnn,
    solver: &FdpfSolver,
    xs: &[Vec<f64>],
    ref_costs: &[Option<f64>],
    label: &str,
) -> Result<EvalReport> {
    if ref_costs.len() != xs.len() {
        return Err(Error::Dimension(format!("{} reference costs for {} samples", ref_costs.len(), xs.len())));
    }
    let t0 = Instant::now();
    let out: Vec<Result<Inference>> = xs.iter().map(|x| infer(net, model, solver, x)).collect();
    let t_prop_s = t0.elapsed().as_secs_f64();

    let done: Vec<(usize, Inference)> = out
        .into_iter()
        .enumerate()
        .filter_map(|(k, r)| r.ok().map(|inf| (k, inf)))
        .collect();
    let metrics: Vec<(Za, f64, Option<f64>)> = done
        .par_iter()
        .map(|(k, inf)| {
            let za = assemble_za(net, &inf.y, &inf.state, &inf.z2);
            let el = load_mismatch(net, &inf.state, &xs[*k]);
            let gap = ref_costs[*k].and_then(|c| optimality_gap(inf.cost, c).ok());
            (za, el, gap)
        })
        .collect();
    let zas: Vec<Za> = metrics.iter().map(|m| m.0.clone()).collect();
    let (l_v_max, l_v_mean) = violation_stats(&zas);
    let gaps: Vec<f64> = metrics.iter().filter_map(|m| m.2).collect();
    let nd = done.len().max(1) as f64;
    Ok(EvalReport {
        label: label.to_string(),
        n_samples: xs.len(),
        n_failed: xs.len() - done.len(),
        n_no_reference: done.len() - gaps.len(),
        l_cost: if gaps.is_empty() { f64::NAN } else { gaps.iter().sum::<f64>() / gaps.len() as f64 },
        l_cost_max: gaps.iter().copied().fold(f64::NAN, f64::max),
        l_v_max,
        l_v_mean,
        e_l: metrics.iter().map(|m| m.1).sum::<f64>() / nd,
        e_l_max: metrics.iter().map(|m| m.1).fold(0.0, f64::max),
        t_prop_s,
        t_infer_per_sample_s: if xs.is_empty() { 0.0 } else { t_prop_s / xs.len() as f64 },
        t_opt_s: None,
        speedup: None,
    })
}

/// `(T_prop, T_opt, T_opt / T_prop)`; the ratio is `None` when undefined.
pub fn timing_report(t_prop_s: f64, t_opt_s: f64) -> (f64, f64, Option<f64>) {
    let ratio = (t_prop_s > 0.0).then(|| t_opt_s / t_prop_s);
    (t_prop_s, t_opt_s, ratio)
}

impl EvalReport {
    pub fn with_reference_time(mut self, t_opt_s: f64) -> Self {
        let (_, t, r) = timing_report(self.t_prop_s, t_opt_s);
        self.t_opt_s = Some(t);
        self.speedup = r;
        self
    }
}

/// Markdown table with one row per report.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "| method | l_cost (%) | l_v max | l_v mean (1e-4) | e_l (%) | failed | T_prop (s) | speedup |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        let speed = r.speedup.map_or("n/a".to_string(), |v| format!("{v:.1}x"));
        s.push_str(&format!(
            "| {} | {:.3} | {:.4} | {:.3} | {:.2e} | {} | {:.3} | {} |\n",
            r.label,
            r.l_cost,
            r.l_v_max,
            r.l_v_mean * 1e4,
            r.e_l,
            r.n_failed,
            r.t_prop_s,
            speed
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_arithmetic() {
        assert_eq!(optimality_gap(5.0, 5.0).unwrap(), 0.0);
        assert!((optimality_gap(1.01 * 7.0, 7.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(optimality_gap(1.0, 0.0).is_err());
    }

    #[test]
    fn violation_arithmetic() {
        let mut za = Za {
            value: vec![0.5; 10],
            lo: vec![0.0; 10],
            hi: vec![1.0; 10],
        };
        assert_eq!(violation_stats(std::slice::from_ref(&za)), (0.0, 0.0));
        za.value[3] = 1.3;
        let (mx, mean) = violation_stats(&[za]);
        assert!((mx - 0.3).abs() < 1e-12);
        assert!((mean - 0.03).abs() < 1e-12);
    }

    #[test]
    fn empty_timing_has_no_ratio() {
        assert_eq!(timing_report(0.0, 0.0), (0.0, 0.0, None));
        assert_eq!(timing_report(1.0, 10.0).2, Some(10.0));
    }
}
