mod common;

use semiopf::jacobian::{linear_coeffs, loss_gradient_exact, GradSample, GradientEngine, LossPartials};
use semiopf::trainer::{
    active_branches, batch_gradient, batch_loss, full_loss, warmup_loss, Fcnn, FullSample, LossWeights, Phase,
    TrainContext,
};
use semiopf::{FdpfSolver, Mode, Network};

use common::*;

fn partials_at(s: &GradFixture, solver: &FdpfSolver, branches: &[usize], w: &LossWeights) -> (Point, LossPartials) {
    let p = complete(&s.net, solver, &s.x, &s.y);
    let fs = FullSample {
        y: &s.y,
        state: &p.state,
        z2: &p.z2,
        pseudo: &s.label,
    };
    let (lb, partials) = full_loss(&s.net, fs, w, branches, 1e5);
    assert!(lb.l_c_z2 > 0.0 && lb.l_c_vd > 0.0, "constraint terms inactive: {lb:?}");
    (p, partials)
}

#[test]
fn exact_dl_dy_matches_end_to_end_differences() {
    for name in ["two-bus", "ieee118"] {
        let net = all_nets().into_iter().find(|(n, _)| *n == name).unwrap().1;
        let s = grad_fixture(net);
        let solver = tight_solver(&s.net);
        let w = LossWeights::default();
        let branches = active_branches(&s.net, Mode::Exact, None).unwrap();
        let (p, partials) = partials_at(&s, &solver, &branches, &w);
        let g = loss_gradient_exact(&s.net, &p.state.theta, &p.state.vmag, &p.flows, &partials, &branches).unwrap();
        let f = |y: &[f64]| full_loss_at(&s, &solver, y, &branches, &w);
        let step = if name == "two-bus" { 1 } else { 5 };
        for k in (0..s.y.len()).step_by(step) {
            let fd = central_diff(f, &s.y, k, 1e-6);
            assert!(rel_close(fd, g[k], 1e-3, 1e-7), "{name} y[{k}]: fd {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn exact_dl_dw_matches_end_to_end_differences() {
    for name in ["two-bus", "ieee118"] {
        let net = all_nets().into_iter().find(|(n, _)| *n == name).unwrap().1;
        let s = grad_fixture(net);
        let solver = tight_solver(&s.net);
        let branches = active_branches(&s.net, Mode::Exact, None).unwrap();
        let ctx = TrainContext::new(&s.net, &solver, Mode::Exact, branches, None, LossWeights::default(), 1e5).unwrap();
        let model = small_model(&s.net, 3);
        let x2: Vec<f64> = s.x.iter().map(|v| 0.97 * v).collect();
        let xs: Vec<&[f64]> = vec![&s.x, &x2];
        let labels = vec![&s.label, &s.label];
        for phase in [Phase::Warmup, Phase::Full] {
            let res = batch_gradient(&ctx, &model, &xs, &labels, phase).unwrap();
            assert_eq!(res.dropped, 0);
            let g = res.grads.flat();
            let loss = |m: &Fcnn| batch_loss(&ctx, m, &xs, &labels, phase).0.unwrap().total;
            let n_par = model.param_count();
            for idx in (0..n_par).step_by((n_par / 25).max(1)) {
                let h = 1e-6;
                let mut mp = model.clone();
                *mp.params_mut().nth(idx).unwrap() += h;
                let mut mm = model.clone();
                *mm.params_mut().nth(idx).unwrap() -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                assert!(rel_close(fd, g[idx], 1e-3, 1e-7), "{name} {phase:?} w[{idx}]: fd {fd} vs {}", g[idx]);
            }
        }
    }
}

#[test]
fn warmup_gradient_is_analytic() {
    let y = [1.0, 2.0, 1.0, 1.0];
    let t = [0.0, 0.0, 1.0, 1.0];
    let (lb, g) = warmup_loss(2, &y, &t, 10.0);
    let n = 5f64.sqrt();
    assert!((lb.total - n).abs() < 1e-15);
    assert_eq!(g, vec![1.0 / n, 2.0 / n, 0.0, 0.0]);
}

fn batch_118(b: usize) -> (Network, Vec<Point>, Vec<LossPartials>, Vec<usize>) {
    let s = grad_fixture(semiopf::cases::ieee118().unwrap());
    let branches = active_branches(&s.net, Mode::Exact, None).unwrap();
    let solver = FdpfSolver::new(&s.net).unwrap();
    let w = LossWeights::default();
    let pts: Vec<Point> = semiopf::augment::sample_demands(&s.net, b, (0.95, 1.1), 17)
        .unwrap()
        .iter()
        .map(|x| complete(&s.net, &solver, x, &s.y))
        .collect();
    let partials = pts
        .iter()
        .map(|p| {
            let fs = FullSample {
                y: &p.y,
                state: &p.state,
                z2: &p.z2,
                pseudo: &s.label,
            };
            full_loss(&s.net, fs, &w, &branches, 1e5).1
        })
        .collect();
    (s.net, pts, partials, branches)
}

fn run_mode(net: &Network, mode: Mode, pts: &[Point], partials: &[LossPartials], branches: &[usize]) -> Vec<Vec<f64>> {
    let n = net.n_bus();
    let coeffs = mode.linearized().then(|| {
        let vbar: Vec<f64> = (0..n).map(|i| pts.iter().map(|p| p.state.vmag[i]).sum::<f64>() / pts.len() as f64).collect();
        linear_coeffs(net, &vbar)
    });
    let engine = GradientEngine::new(net, mode, branches.to_vec(), coeffs).unwrap();
    let samples: Vec<GradSample<'_>> = pts
        .iter()
        .zip(partials)
        .map(|(p, q)| GradSample {
            theta: &p.state.theta,
            vmag: &p.state.vmag,
            flows: &p.flows,
            partials: q,
        })
        .collect();
    engine.gradients(net, &samples).unwrap().0
}

#[test]
fn approximate_modes_align_with_exact() {
    let (net, pts, partials, branches) = batch_118(32);
    let exact = run_mode(&net, Mode::Exact, &pts, &partials, &branches);
    for mode in [Mode::M0, Mode::M1, Mode::M2, Mode::M3, Mode::M4] {
        let g = run_mode(&net, mode, &pts, &partials, &branches);
        let worst = exact.iter().zip(&g).map(|(a, b)| cosine(a, b)).fold(f64::INFINITY, f64::min);
        assert!(worst >= 0.8, "{mode:?}: worst cosine {worst}");
    }
}

#[test]
fn identical_batch_reproduces_single_sample() {
    let (net, pts, partials, branches) = batch_118(1);
    for mode in [Mode::M0, Mode::M2] {
        let one = run_mode(&net, mode, &pts, &partials, &branches);
        let rep: Vec<Point> = vec![pts[0].clone(); 8];
        let many = run_mode(&net, mode, &rep, &vec![partials[0].clone(); 8], &branches);
        for g in &many {
            for (a, b) in g.iter().zip(&one[0]) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{mode:?}: {a} vs {b}");
            }
        }
    }
}
