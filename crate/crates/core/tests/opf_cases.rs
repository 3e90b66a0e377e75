mod common;

use semiopf::opf::{generation_cost, kkt_residual, solve_opf, OpfOptions, OpfStatus};
use semiopf::{parse_case, FdpfSolver, Network};

/// Offline cross-check value for the tap-free, charging-free IEEE-118 case at
/// nominal demand ($/h).
const IEEE118_PLAIN_OBJECTIVE: f64 = 129688.8693;

/// Ref at bus 1 (20 $/MWh), a cheaper unit at bus 2 (10 $/MWh) capped at
/// `pmax2` MW, 100 MW load at bus 3, lossless lines.
fn three_bus(pmax2: f64) -> Network {
    let text = format!(
        "\
function mpc = three_bus
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0   0  0 0 1 1 0 1 1 1.06 0.94;
  2 2 0   0  0 0 1 1 0 1 1 1.06 0.94;
  3 1 100 20 0 0 1 1 0 1 1 1.06 0.94;
];
mpc.gen = [
  1 0 0 100 -100 1 100 1 200   0;
  2 0 0 100 -100 1 100 1 {pmax2} 0;
];
mpc.branch = [
  1 2 0 0.05 0 0 0 0 0 0 1 -360 360;
  1 3 0 0.08 0 0 0 0 0 0 1 -360 360;
  2 3 0 0.06 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
  2 0 0 2 20 0;
  2 0 0 2 10 0;
];
"
    );
    parse_case(&text).unwrap()
}

/// Cost-minimal (ref, unit 2) split of a lossless 1 p.u. load on a 1e-4 grid.
fn enumerate_dispatch(pmax2: f64) -> (f64, f64) {
    let (pd, pmax1) = (1.0, 2.0);
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=10_000 {
        let p2 = k as f64 * 1e-4 * (pmax2 / 100.0).min(pd);
        let p1 = pd - p2;
        if !(0.0..=pmax1).contains(&p1) {
            continue;
        }
        let cost = 20.0 * 100.0 * p1 + 10.0 * 100.0 * p2;
        if cost < best.0 {
            best = (cost, p2);
        }
    }
    best
}

#[test]
fn three_bus_dispatch_matches_enumeration() {
    for pmax2 in [60.0, 150.0] {
        let net = three_bus(pmax2);
        let s = solve_opf(&net, &net.nominal_demand(), OpfOptions::default()).unwrap();
        assert_eq!(s.status, OpfStatus::Optimal);
        let (cost, p2) = enumerate_dispatch(pmax2);
        let g2 = net.generators.iter().position(|g| net.buses[g.bus].id == 2).unwrap();
        assert!((s.pg[g2] - p2).abs() < 1e-4, "pmax2 {pmax2}: pg2 {} vs {p2}", s.pg[g2]);
        assert!((s.objective - cost).abs() <= 1e-4 * cost, "{} vs {cost}", s.objective);
    }
}

#[test]
fn relaxing_a_binding_bound_never_raises_cost() {
    let tight = solve_opf(&three_bus(60.0), &three_bus(60.0).nominal_demand(), OpfOptions::default()).unwrap();
    let loose = solve_opf(&three_bus(80.0), &three_bus(80.0).nominal_demand(), OpfOptions::default()).unwrap();
    assert!(loose.objective < tight.objective - 1.0);

    let base_net = semiopf::cases::ieee118_plain().unwrap();
    let x = base_net.nominal_demand();
    let base = solve_opf(&base_net, &x, OpfOptions::default()).unwrap().objective;
    let relaxations: [fn(&mut Network); 3] = [
        |n| n.generators.iter_mut().for_each(|g| g.p_max *= 1.2),
        |n| n.buses.iter_mut().for_each(|b| b.v_max += 0.02),
        |n| n.branches.iter_mut().for_each(|b| b.s_max = b.s_max.map(|s| 1.5 * s)),
    ];
    for (k, relax) in relaxations.iter().enumerate() {
        let mut net = base_net.clone();
        relax(&mut net);
        let s = solve_opf(&net, &x, OpfOptions::default()).unwrap();
        assert_eq!(s.status, OpfStatus::Optimal);
        assert!(s.objective <= base * (1.0 + 1e-6), "relaxation {k}: {} > {base}", s.objective);
    }
}

#[test]
fn ieee118_plain_matches_cross_check() {
    let net = semiopf::cases::ieee118_plain().unwrap();
    let s = solve_opf(&net, &net.nominal_demand(), OpfOptions::default()).unwrap();
    assert_eq!(s.status, OpfStatus::Optimal);
    let rel = (s.objective - IEEE118_PLAIN_OBJECTIVE).abs() / IEEE118_PLAIN_OBJECTIVE;
    assert!(rel <= 1e-3, "objective {} ({:.4}% off)", s.objective, 100.0 * rel);
    assert!(kkt_residual(&net, &s) <= 1e-6);
    assert_eq!(generation_cost(&net, &s.pg), s.objective);
}

#[test]
fn optimal_dispatch_reproduces_its_state() {
    for (name, net) in common::all_nets() {
        let s = solve_opf(&net, &net.nominal_demand(), OpfOptions::default()).unwrap();
        let pf = FdpfSolver::new(&net).unwrap().solve(&net, &s.demand, &s.y(&net), None).unwrap();
        let d = pf
            .theta
            .iter()
            .zip(&s.state.theta)
            .chain(pf.vmag.iter().zip(&s.state.vmag))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d <= 1e-6, "{name}: {d}");
    }
}

#[test]
fn overloaded_case_is_never_reported_optimal() {
    let net = semiopf::cases::two_bus().unwrap();
    let x: Vec<f64> = net.nominal_demand().iter().map(|d| 30.0 * d).collect();
    match solve_opf(&net, &x, OpfOptions::default()) {
        Ok(s) => {
            assert_ne!(s.status, OpfStatus::Optimal);
            assert!(kkt_residual(&net, &s).is_finite());
        }
        Err(e) => assert!(e.is_numerical(), "{e}"),
    }
}
