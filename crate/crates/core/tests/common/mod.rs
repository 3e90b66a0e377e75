#![allow(dead_code)]

use semiopf::augment::{fit_ridge_y, pseudo_label, sample_demands, Dataset, Label, Provenance};
use semiopf::opf::{solve_batch, solve_opf, OpfOptions, OpfStatus};
use semiopf::powerflow::{reconstruct, PfOptions};
use semiopf::trainer::{full_loss, Fcnn, FullSample, LossWeights};
use semiopf::{BranchFlows, FdpfSolver, Network, PFState};

pub fn all_nets() -> Vec<(&'static str, Network)> {
    vec![
        ("two-bus", semiopf::cases::two_bus().unwrap()),
        ("ieee118", semiopf::cases::ieee118().unwrap()),
        ("ieee118-plain", semiopf::cases::ieee118_plain().unwrap()),
    ]
}

/// Power flow converged far below the training tolerance, for finite
/// differences through the solver.
pub fn tight_solver(net: &Network) -> FdpfSolver {
    FdpfSolver::with_options(
        net,
        PfOptions {
            tol: 1e-12,
            max_iter: 200,
            ..PfOptions::default()
        },
    )
    .unwrap()
}

/// OPF dispatch and label at nominal demand.
pub fn nominal_opf(net: &Network) -> (Vec<f64>, Label) {
    let x = net.nominal_demand();
    let s = solve_opf(net, &x, OpfOptions::default()).unwrap();
    assert_eq!(s.status, OpfStatus::Optimal);
    let y = s.y(net);
    let label = Label::from_state(net, &s.state, y.clone(), &x, Some(s.objective));
    (y, label)
}

#[derive(Clone)]
pub struct Point {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub state: PFState,
    pub z2: Vec<f64>,
    pub flows: BranchFlows,
}

pub fn complete(net: &Network, solver: &FdpfSolver, x: &[f64], y: &[f64]) -> Point {
    let state = solver.solve(net, x, y, None).unwrap();
    let (z2, flows) = reconstruct(net, &state, x);
    Point {
        x: x.to_vec(),
        y: y.to_vec(),
        state,
        z2,
        flows,
    }
}

/// Operating points for random demands in `range` at dispatch `y`.
pub fn random_points(net: &Network, y: &[f64], count: usize, range: (f64, f64), seed: u64) -> Vec<Point> {
    let solver = FdpfSolver::new(net).unwrap();
    sample_demands(net, count, range, seed)
        .unwrap()
        .iter()
        .map(|x| complete(net, &solver, x, y))
        .collect()
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x0: &[f64], idx: usize, h: f64) -> f64 {
    let mut xp = x0.to_vec();
    let mut xm = x0.to_vec();
    xp[idx] += h;
    xm[idx] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`
pub fn rel_close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Semi-supervised training set: reference OPF labels on the first `labeled`
/// demands, ridge pseudo labels completed through the power flow on the rest.
pub fn semi_supervised_set(net: &Network, demands: Vec<Vec<f64>>, labeled: usize) -> Dataset {
    let mut data = Dataset::unlabeled(demands);
    let sols = solve_batch(net, &data.demands[..labeled], OpfOptions::default());
    for (k, s) in sols.into_iter().enumerate() {
        if let Ok(s) = s {
            if s.status == OpfStatus::Optimal {
                data.labels[k] = Some(Label::from_state(net, &s.state, s.y(net), &data.demands[k], Some(s.objective)));
                data.provenance[k] = Provenance::GroundTruth;
            }
        }
    }
    let mut fit = Dataset::default();
    for (x, l) in data.labeled() {
        fit.push(x.clone(), Some(l.clone()), Provenance::GroundTruth);
    }
    let model = fit_ridge_y(net, &fit, 0.01, 0.1).unwrap();
    pseudo_label(&model, &mut data, net, &FdpfSolver::new(net).unwrap());
    data
}

pub struct GradFixture {
    pub net: Network,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub label: Label,
}

/// Operating point off the OPF optimum with some flow, voltage and reactive
/// limits tightened so every loss term is active and away from its kinks.
pub fn grad_fixture(net: Network) -> GradFixture {
    let (y_opf, label) = nominal_opf(&net);
    let part = net.partition().clone();
    let x: Vec<f64> = net.nominal_demand().iter().map(|d| 1.04 * d).collect();
    let mut y = y_opf.clone();
    for (k, v) in y.iter_mut().enumerate() {
        let s = if k % 2 == 0 { 1.0 } else { -1.0 };
        *v += if k < part.n_gen() { 0.02 * s * v.abs().max(0.1) } else { 0.004 * s };
    }
    let solver = tight_solver(&net);
    let p = complete(&net, &solver, &x, &y);
    let mut net = net;
    for (m, b) in net.branches.iter_mut().enumerate() {
        if m % 3 == 0 && p.flows.s2[m] > 1e-4 {
            b.s_max = Some(0.9 * p.flows.s2[m].sqrt());
        }
    }
    for (k, &i) in part.load.iter().enumerate() {
        if k % 4 == 0 {
            net.buses[i].v_max = p.state.vmag[i] - 0.003;
        }
    }
    let qr = p.z2[1];
    let rb = part.reference;
    let rg = net.generators.iter().position(|g| g.bus == rb).unwrap();
    net.generators[rg].q_max = qr - 0.05 * qr.abs().max(0.1);
    GradFixture { net, x, y, label }
}

pub fn full_loss_at(s: &GradFixture, solver: &FdpfSolver, y: &[f64], branches: &[usize], w: &LossWeights) -> f64 {
    let state = solver.solve(&s.net, &s.x, y, None).unwrap();
    let (z2, _) = reconstruct(&s.net, &state, &s.x);
    let fs = FullSample {
        y,
        state: &state,
        z2: &z2,
        pseudo: &s.label,
    };
    full_loss(&s.net, fs, w, branches, 1e5).0.total
}

/// Small network with input scaling fitted around nominal demand.
pub fn small_model(net: &Network, seed: u64) -> Fcnn {
    let (lo, hi) = net.y_bounds();
    let mut m = Fcnn::new(2 * net.n_bus(), &[6], lo, hi, seed).unwrap();
    m.fit_input_scaling(&[net.nominal_demand().iter().map(|d| 0.9 * d).collect(), net.nominal_demand()]);
    m
}
