//! Shared fixtures for the benchmarks: IEEE-118 operating points around
//! nominal demand, completed through the power flow.

use semiopf::augment::sample_demands;
use semiopf::jacobian::LossPartials;
use semiopf::powerflow::branch_flows;
use semiopf::{BranchFlows, FdpfSolver, Network, PFState};

pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub state: PFState,
    pub flows: BranchFlows,
    pub partials: LossPartials,
}

/// Generator set-points from the case, demands scaled in [0.9, 1.1].
pub fn operating_points(net: &Network, count: usize, seed: u64) -> Vec<Sample> {
    let part = net.partition();
    let solver = FdpfSolver::new(net).expect("solver");
    let (lo, hi) = net.y_bounds();
    let mut y: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let off = part.y_v_offset();
    for (k, &i) in part.gen_ref.iter().enumerate() {
        y[off + k] = net.generators[part.generator_at[i].unwrap()].v_set.clamp(lo[off + k], hi[off + k]);
    }
    for (k, &i) in part.gen.iter().enumerate() {
        let g = &net.generators[part.generator_at[i].unwrap()];
        y[k] = (0.5 * (g.p_min + g.p_max)).min(g.p_min + 0.5);
    }
    sample_demands(net, count, (0.9, 1.1), seed)
        .expect("demands")
        .into_iter()
        .map(|x| {
            let state = solver.solve(net, &x, &y, None).expect("operating point converges");
            let flows = branch_flows(net, &state.theta, &state.vmag);
            let partials = LossPartials {
                gy: vec![0.3; part.y_len()],
                gz1: (0..part.z1_len()).map(|k| ((k % 7) as f64 - 3.0) * 0.1).collect(),
                gz2: (0..part.z2_len()).map(|k| ((k % 5) as f64) * 0.05).collect(),
            };
            Sample {
                x,
                y: y.clone(),
                state,
                flows,
                partials,
            }
        })
        .collect()
}
