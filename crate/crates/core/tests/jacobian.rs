mod common;

use proptest::prelude::*;
use semiopf::jacobian::{
    batch_mean_estimate, branch_jacobian, error_bound_check, implicit_partition, linear_coeffs, linearized_nodal,
    nodal_jacobian, Block, BatchTensors,
};
use semiopf::powerflow::{branch_flows, injections};
use semiopf::sparse::SparseLu;

use common::*;

const BLOCKS: [Block; 4] = [Block::PTheta, Block::PV, Block::QTheta, Block::QV];

fn spread(n: usize, seed: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * (((i + 3) * (seed + 7) * 2654435761usize) % 1000) as f64 / 1000.0).collect()
}

#[test]
fn nodal_jacobian_matches_finite_differences() {
    for (name, net) in all_nets() {
        let n = net.n_bus();
        let theta = spread(n, 1, -0.3, 0.3);
        let vmag = spread(n, 2, 0.94, 1.06);
        let jac = nodal_jacobian(&net, &theta, &vmag);
        let y = net.admittance();
        let h = 1e-6;
        for j in (0..n).step_by(7) {
            for (is_v, (bp, bq)) in [(false, (Block::PTheta, Block::QTheta)), (true, (Block::PV, Block::QV))] {
                let f = |k: usize, sgn: f64| {
                    let (mut t, mut v) = (theta.clone(), vmag.clone());
                    if is_v { v[j] += sgn * h } else { t[j] += sgn * h }
                    let (p, q) = injections(&net, &t, &v);
                    if k == 0 { p } else { q }
                };
                for (k, blk) in [(0, bp), (1, bq)] {
                    let (plus, minus) = (f(k, 1.0), f(k, -1.0));
                    for i in 0..n {
                        let fd = (plus[i] - minus[i]) / (2.0 * h);
                        let an = jac.get(y, blk, i, j);
                        assert!(rel_close(fd, an, 1e-6, 1e-6), "{name} {blk:?} ({i},{j}): fd {fd} vs {an}");
                    }
                }
            }
        }
    }
}

#[test]
fn branch_jacobian_matches_finite_differences() {
    for (name, net) in all_nets() {
        let n = net.n_bus();
        let theta = spread(n, 3, -0.2, 0.2);
        let vmag = spread(n, 4, 0.95, 1.05);
        let fl = branch_flows(&net, &theta, &vmag);
        let bj = branch_jacobian(&net, &theta, &vmag, &fl);
        let dense = [bj.to_dense(&net, &bj.jab), bj.to_dense(&net, &bj.jrb), bj.to_dense(&net, &bj.s2_grad)];
        let h = 1e-6;
        for c in (0..2 * n).step_by(5) {
            let eval = |sgn: f64| {
                let (mut t, mut v) = (theta.clone(), vmag.clone());
                if c < n { t[c] += sgn * h } else { v[c - n] += sgn * h }
                branch_flows(&net, &t, &v)
            };
            let (fp, fm) = (eval(1.0), eval(-1.0));
            for m in 0..net.n_branch() {
                let fds = [
                    (fp.p[m] - fm.p[m]) / (2.0 * h),
                    (fp.q[m] - fm.q[m]) / (2.0 * h),
                    (fp.s2[m] - fm.s2[m]) / (2.0 * h),
                ];
                for k in 0..3 {
                    assert!(rel_close(fds[k], dense[k][m][c], 1e-6, 1e-6), "{name} row {k} branch {m} col {c}");
                }
            }
        }
    }
}

#[test]
fn implicit_sensitivity_matches_power_flow_resolves() {
    let net = semiopf::cases::ieee118().unwrap();
    let (y0, _) = nominal_opf(&net);
    let x = net.nominal_demand();
    let solver = tight_solver(&net);
    let base = solver.solve(&net, &x, &y0, None).unwrap();
    let part = net.partition();
    let jac = nodal_jacobian(&net, &base.theta, &base.vmag);
    let ip = implicit_partition(&net, &jac).unwrap();
    let lu = SparseLu::factor(&ip.j_z1).unwrap();
    let jy = ip.j_y.to_dense();
    let h = 1e-6;
    for col in [0usize, 9, 40, 60, 106] {
        let rhs: Vec<f64> = (0..part.z1_len()).map(|r| -jy[r][col]).collect();
        let dz = lu.solve(&rhs);
        let z1_at = |d: f64| {
            let mut y = y0.clone();
            y[col] += d;
            solver.solve(&net, &x, &y, None).unwrap().z1(part)
        };
        let (zp, zm) = (z1_at(h), z1_at(-h));
        for r in 0..part.z1_len() {
            let fd = (zp[r] - zm[r]) / (2.0 * h);
            assert!(rel_close(fd, dz[r], 1e-4, 1e-7), "y{col} z1[{r}]: fd {fd} vs {}", dz[r]);
        }
    }
}

#[test]
fn linearization_is_exact_at_its_point() {
    for (name, net) in all_nets() {
        let n = net.n_bus();
        let vbar = spread(n, 5, 0.95, 1.05);
        let c = linear_coeffs(&net, &vbar);
        let zero = vec![0.0; n];
        let lin = linearized_nodal(&c, &zero, &vbar);
        let ex = nodal_jacobian(&net, &zero, &vbar);
        let d = lin.max_abs_diff(&ex);
        assert!(d <= 1e-12, "{name}: {d}");
    }
}

#[test]
fn linearization_error_grows_with_angle() {
    let net = semiopf::cases::ieee118().unwrap();
    let n = net.n_bus();
    let vbar = spread(n, 6, 0.97, 1.03);
    let dir = spread(n, 7, -1.0, 1.0);
    let c = linear_coeffs(&net, &vbar);
    let mut prev = -1.0;
    for k in 0..=20 {
        let s = 0.1 * k as f64 / 20.0;
        let th: Vec<f64> = dir.iter().map(|d| s * d).collect();
        let e = linearized_nodal(&c, &th, &vbar).max_abs_diff(&nodal_jacobian(&net, &th, &vbar));
        assert!(e >= prev, "scale {s}: {e} < {prev}");
        prev = e;
    }
    assert!(prev > 0.0);
}

#[test]
fn identical_batch_mean_is_the_sample() {
    let net = semiopf::cases::ieee118().unwrap();
    let n = net.n_bus();
    let vbar = spread(n, 8, 0.97, 1.03);
    let c = linear_coeffs(&net, &vbar);
    let mut t = spread(n, 9, -0.2, 0.2);
    t.extend(spread(n, 10, 0.95, 1.05));
    for b in [1usize, 3, 7, 32] {
        let batch = BatchTensors::new(vec![t.clone(); b]).unwrap();
        let est = batch_mean_estimate(&c, &batch);
        let single = linearized_nodal(&c, &t[..n], &t[n..]);
        for blk in BLOCKS {
            assert_eq!(est.block(blk), single.block(blk), "b = {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn diagonal_error_bound_holds(seed in 0u64..1_000_000, b in 2usize..16) {
        let net = semiopf::cases::ieee118().unwrap();
        let y = nominal_y118();
        let pts = random_points(&net, &y, b, (0.8, 1.2), seed);
        let t: Vec<Vec<f64>> = pts.iter().map(|p| p.state.phasors()).collect();
        let n = net.n_bus();
        let vbar: Vec<f64> = (0..n).map(|i| t.iter().map(|v| v[n + i]).sum::<f64>() / b as f64).collect();
        let c = linear_coeffs(&net, &vbar);
        let rep = error_bound_check(&BatchTensors::new(t).unwrap(), &c);
        prop_assert!(rep.holds);
    }
}

fn nominal_y118() -> Vec<f64> {
    use std::sync::OnceLock;
    static Y: OnceLock<Vec<f64>> = OnceLock::new();
    Y.get_or_init(|| nominal_opf(&semiopf::cases::ieee118().unwrap()).0).clone()
}
