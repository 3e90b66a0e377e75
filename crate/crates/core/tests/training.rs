mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use semiopf::augment::{sample_demands, Dataset};
use semiopf::powerflow::reconstruct;
use semiopf::trainer::{full_loss, train, Fcnn, FullSample, LossWeights, TrainConfig, TrainInputs};
use semiopf::{Mode, Network};

fn net118() -> &'static Network {
    static NET: OnceLock<Network> = OnceLock::new();
    NET.get_or_init(|| semiopf::cases::ieee118().unwrap())
}

fn data118() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let net = net118();
        common::semi_supervised_set(net, sample_demands(net, 256, (0.8, 1.2), 11).unwrap(), 24)
    })
}

fn small_config() -> TrainConfig {
    TrainConfig {
        mode: Mode::M0,
        hidden: vec![32],
        epochs: 20,
        warmup_epochs: 20,
        lr: 2e-3,
        milestones: vec![],
        deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn pure_supervised_loss_mostly_decreases() {
    let run = train(net118(), data118(), &small_config(), TrainInputs::default(), |_| {}).unwrap();
    let losses: Vec<f64> = run.epochs.iter().map(|e| e.loss.total).collect();
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down * 5 >= 4 * (losses.len() - 1), "{down}/{} decreasing: {losses:?}", losses.len() - 1);
    assert!(run.epochs.iter().all(|e| e.loss.l_o == 0.0 && e.fdpf_failures == 0));
}

#[test]
fn same_seed_gives_identical_runs() {
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        ..small_config()
    };
    let a = train(net118(), data118(), &cfg, TrainInputs::default(), |_| {}).unwrap();
    let b = train(net118(), data118(), &cfg, TrainInputs::default(), |_| {}).unwrap();
    let la: Vec<_> = a.epochs.iter().map(|e| e.loss).collect();
    let lb: Vec<_> = b.epochs.iter().map(|e| e.loss).collect();
    assert_eq!(la, lb);
    assert_eq!(a.model, b.model);
    assert_eq!(a.epochs[1].fdpf_failures, 0);
}

#[test]
fn feasible_label_loss_is_the_cost_term() {
    let net = net118();
    let (_, label) = common::nominal_opf(net);
    let x = net.nominal_demand();
    let state = semiopf::FdpfSolver::new(net).unwrap().solve(net, &x, &label.y, None).unwrap();
    let (z2, _) = reconstruct(net, &state, &x);
    let exact = semiopf::augment::Label::from_state(net, &state, label.y.clone(), &x, None);
    let w = LossWeights::default();
    let all: Vec<usize> = (0..net.n_branch()).collect();
    let s = FullSample {
        y: &label.y,
        state: &state,
        z2: &z2,
        pseudo: &exact,
    };
    let (lb, _) = full_loss(net, s, &w, &all, 1e5);
    assert_eq!(lb.l_s, 0.0);
    assert!(lb.l_c_z2 < 1e-6 && lb.l_c_vd < 1e-6, "{lb:?}");
    let cost = label.objective.unwrap() / 1e5;
    assert!((lb.l_o - cost).abs() <= 1e-6 * cost, "{} vs {cost}", lb.l_o);
    let composed = lb.l_c_z2 + w.w_v * lb.l_c_vd + w.w_o * lb.l_o + w.w_s * lb.l_s;
    assert_eq!(lb.total, composed);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_stay_in_the_box(seed in any::<u64>(), xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 236), 1..8)) {
        let net = net118();
        let (lo, hi) = net.y_bounds();
        let mut m = Fcnn::new(236, &[50, 236], lo.clone(), hi.clone(), seed).unwrap();
        for w in m.params_mut() {
            *w *= 20.0;
        }
        for x in &xs {
            let (yt, y) = m.forward(x);
            prop_assert!(yt.iter().all(|v| v.abs() <= 1.0));
            for k in 0..y.len() {
                prop_assert!(y[k] >= lo[k] && y[k] <= hi[k], "y[{}] = {} outside [{}, {}]", k, y[k], lo[k], hi[k]);
            }
        }
    }
}
