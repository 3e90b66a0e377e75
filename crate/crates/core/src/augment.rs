//! Data augmentation: demand sampling, ridge-regression pseudo labels
//! completed through the power flow, and the reduced branch set.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BusPartition, Network};
use crate::powerflow::{reconstruct, FdpfSolver, PFState};

/// Version tag written into persisted datasets.
pub const DATASET_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
    Unlabeled,
}

/// Completed operating point of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub y: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    /// Generation cost ($/h), when known.
    pub objective: Option<f64>,
}

impl Label {
    /// Full phasor vector `[theta; V]` assembled from `y` and `z1`.
    pub fn phasors(&self, part: &BusPartition) -> Vec<f64> {
        let n = part.n_bus();
        let mut v = vec![0.0; 2 * n];
        for (k, &i) in part.nonref.iter().enumerate() {
            v[i] = self.z1[k];
        }
        let off = part.z1_v_offset();
        for (k, &i) in part.load.iter().enumerate() {
            v[n + i] = self.z1[off + k];
        }
        let yo = part.y_v_offset();
        for (k, &i) in part.gen_ref.iter().enumerate() {
            v[n + i] = self.y[yo + k];
        }
        v
    }

    pub fn from_state(net: &Network, state: &PFState, y: Vec<f64>, x: &[f64], objective: Option<f64>) -> Self {
        let (z2, _) = reconstruct(net, state, x);
        Self {
            y,
            z1: state.z1(net.partition()),
            z2,
            objective,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub demands: Vec<Vec<f64>>,
    pub labels: Vec<Option<Label>>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn unlabeled(demands: Vec<Vec<f64>>) -> Self {
        let n = demands.len();
        Self {
            demands,
            labels: vec![None; n],
            provenance: vec![Provenance::Unlabeled; n],
        }
    }

    pub fn len(&self) -> usize {
        self.demands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demands.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, label: Option<Label>, tag: Provenance) {
        self.demands.push(x);
        self.labels.push(label);
        self.provenance.push(tag);
    }

    /// Samples that carry a label, in order.
    pub fn labeled(&self) -> impl Iterator<Item = (&Vec<f64>, &Label)> {
        self.demands
            .iter()
            .zip(&self.labels)
            .filter_map(|(x, l)| l.as_ref().map(|l| (x, l)))
    }

    pub fn check_dimensions(&self, net: &Network) -> Result<()> {
        let part = net.partition();
        if self.labels.len() != self.len() || self.provenance.len() != self.len() {
            return Err(Error::Dimension("dataset columns differ in length".into()));
        }
        for (k, x) in self.demands.iter().enumerate() {
            if x.len() != 2 * net.n_bus() {
                return Err(Error::Dimension(format!("sample {k}: demand length {}", x.len())));
            }
        }
        for (k, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                if l.y.len() != part.y_len() || l.z1.len() != part.z1_len() || l.z2.len() != part.z2_len() {
                    return Err(Error::Dimension(format!("sample {k}: label dimensions do not match the network")));
                }
            }
        }
        Ok(())
    }
}

/// Independent uniform scaling per bus, shared by `P_d` and `Q_d`.
pub fn sample_demands(net: &Network, count: usize, range: (f64, f64), seed: u64) -> Result<Vec<Vec<f64>>> {
    let (lo, hi) = range;
    if !(lo <= hi) || lo < 0.0 {
        return Err(Error::InvalidArgument(format!("bad scaling range [{lo}, {hi}]")));
    }
    let nominal = net.nominal_demand();
    let n = net.n_bus();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut x = nominal.clone();
            for i in 0..n {
                let s = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
                x[i] *= s;
                x[n + i] *= s;
            }
            x
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeOptions {
    pub standardize: bool,
    pub fit_intercept: bool,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        Self {
            standardize: true,
            fit_intercept: true,
        }
    }
}

/// Affine map `y = W^T x + c` in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `[feature][target]`
    pub weights: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    /// Regularization per target column.
    pub alphas: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.intercept.clone();
        for (f, &xf) in x.iter().enumerate() {
            if xf == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&self.weights[f]) {
                *o += w * xf;
            }
        }
        out
    }
}

fn column_stats(rows: &[Vec<f64>], center: bool, scale: bool) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let p = rows[0].len();
    let mut mean = vec![0.0; p];
    if center {
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
    }
    let mut sd = vec![1.0; p];
    if scale {
        for (j, s) in sd.iter_mut().enumerate() {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            let v = var.sqrt();
            // constant columns are left unscaled
            *s = if v > 1e-12 * (1.0 + mean[j].abs()) { v } else { 1.0 };
        }
    }
    (mean, sd)
}

/// Closed-form ridge fit; columns sharing a regularization strength are
/// solved together. The intercept (when fitted) is not penalized.
pub fn fit_ridge(xs: &[Vec<f64>], ys: &[Vec<f64>], alphas: &[f64], opts: RidgeOptions) -> Result<RidgeModel> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return Err(Error::InsufficientData(format!(
            "ridge fit needs at least 2 labeled samples, got {n}"
        )));
    }
    let p = xs[0].len();
    let t = ys[0].len();
    if alphas.len() != t {
        return Err(Error::Dimension(format!("{} alphas for {t} targets", alphas.len())));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::InvalidArgument(format!("ridge alpha must be positive, got {a}")));
    }
    let (x_mean, x_scale) = column_stats(xs, opts.fit_intercept, opts.standardize);
    let (y_mean, y_scale) = column_stats(ys, opts.fit_intercept, opts.standardize);
    let xm = DMatrix::from_fn(n, p, |i, j| (xs[i][j] - x_mean[j]) / x_scale[j]);
    let ym = DMatrix::from_fn(n, t, |i, j| (ys[i][j] - y_mean[j]) / y_scale[j]);

    let mut weights = vec![vec![0.0; t]; p];
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for (j, &a) in alphas.iter().enumerate() {
        match groups.iter_mut().find(|g| g.0 == a) {
            Some(g) => g.1.push(j),
            None => groups.push((a, vec![j])),
        }
    }
    for (alpha, cols) in groups {
        let yg = DMatrix::from_fn(n, cols.len(), |i, c| ym[(i, cols[c])]);
        // primal (p x p) or dual (n x n) normal equations, whichever is smaller
        let w = if p <= n {
            let mut a = xm.transpose() * &xm;
            for d in 0..p {
                a[(d, d)] += alpha;
            }
            let rhs = xm.transpose() * &yg;
            a.cholesky()
                .ok_or_else(|| Error::Numerical("ridge normal matrix not positive definite".into()))?
                .solve(&rhs)
        } else {
            let mut k = &xm * xm.transpose();
            for d in 0..n {
                k[(d, d)] += alpha;
            }
            let dual = k
                .cholesky()
                .ok_or_else(|| Error::Numerical("ridge kernel matrix not positive definite".into()))?
                .solve(&yg);
            xm.transpose() * dual
        };
        for (c, &j) in cols.iter().enumerate() {
            for f in 0..p {
                weights[f][j] = w[(f, c)] * y_scale[j] / x_scale[f];
            }
        }
    }
    let intercept = (0..t)
        .map(|j| y_mean[j] - (0..p).map(|f| x_mean[f] * weights[f][j]).sum::<f64>())
        .collect();
    Ok(RidgeModel {
        weights,
        intercept,
        alphas: alphas.to_vec(),
        x_mean,
        x_scale,
        y_mean,
        y_scale,
    })
}

/// Per-target regularization: `alpha_p` on the `P_g` block, `alpha_v` on the
/// voltage block of `y`.
pub fn y_alphas(part: &BusPartition, alpha_p: f64, alpha_v: f64) -> Vec<f64> {
    let ng = part.n_gen();
    (0..part.y_len()).map(|k| if k < ng { alpha_p } else { alpha_v }).collect()
}

pub fn fit_ridge_y(net: &Network, data: &Dataset, alpha_p: f64, alpha_v: f64) -> Result<RidgeModel> {
    let (xs, ys): (Vec<Vec<f64>>, Vec<Vec<f64>>) = data.labeled().map(|(x, l)| (x.clone(), l.y.clone())).unzip();
    fit_ridge(&xs, &ys, &y_alphas(net.partition(), alpha_p, alpha_v), RidgeOptions::default())
}

/// Mean per-sample l2 errors of the `P_g` and voltage blocks.
pub fn ridge_errors(net: &Network, model: &RidgeModel, data: &Dataset) -> (f64, f64) {
    let ng = net.partition().n_gen();
    let (mut ep, mut ev, mut k) = (0.0, 0.0, 0usize);
    for (x, l) in data.labeled() {
        let pred = model.predict(x);
        ep += pred[..ng].iter().zip(&l.y[..ng]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        ev += pred[ng..].iter().zip(&l.y[ng..]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        k += 1;
    }
    let k = k.max(1) as f64;
    (ep / k, ev / k)
}

pub fn clamp_to_box(y: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in y.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub labeled: usize,
    pub diverged: Vec<usize>,
    pub clamped_components: usize,
}

/// Completes every unlabeled sample of `data` with a clamped ridge
/// prediction, the power-flow state and the reconstructed `z2`. Samples on
/// which the power flow fails stay unlabeled and are listed in the report.
pub fn pseudo_label(model: &RidgeModel, data: &mut Dataset, net: &Network, solver: &FdpfSolver) -> PseudoLabelReport {
    let (lo, hi) = net.y_bounds();
    let todo: Vec<usize> = (0..data.len()).filter(|&k| data.labels[k].is_none()).collect();
    let results: Vec<(usize, usize, Option<Label>)> = todo
        .par_iter()
        .map(|&k| {
            let x = &data.demands[k];
            let raw = model.predict(x);
            let mut y = raw.clone();
            clamp_to_box(&mut y, &lo, &hi);
            let clamped = raw.iter().zip(&y).filter(|(a, b)| a != b).count();
            let label = solver
                .solve(net, x, &y, None)
                .ok()
                .map(|st| Label::from_state(net, &st, y, x, None));
            (k, clamped, label)
        })
        .collect();
    let mut rep = PseudoLabelReport {
        labeled: 0,
        diverged: Vec::new(),
        clamped_components: 0,
    };
    for (k, clamped, label) in results {
        rep.clamped_components += clamped;
        match label {
            Some(l) => {
                data.labels[k] = Some(l);
                data.provenance[k] = Provenance::Pseudo;
                rep.labeled += 1;
            }
            None => rep.diverged.push(k),
        }
    }
    rep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedBranchSet {
    pub beta: f64,
    pub members: Vec<usize>,
    pub scores: Vec<f64>,
}

/// `l_p(m) = sum_samples ReLU(s2_m - beta s_max_m^2)`; members have `l_p > 0`.
/// `s2_samples` holds one length-`M` vector per sample.
pub fn reduced_branch_set<'a, I>(s2_samples: I, s_max_sq: &[f64], beta: f64) -> Result<ReducedBranchSet>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    let m = s_max_sq.len();
    let mut scores = vec![0.0; m];
    for s2 in s2_samples {
        if s2.len() != m {
            return Err(Error::Dimension(format!("s2 sample of length {} for {m} branches", s2.len())));
        }
        for k in 0..m {
            scores[k] += (s2[k] - beta * s_max_sq[k]).max(0.0);
        }
    }
    let members = (0..m).filter(|&k| scores[k] > 0.0).collect();
    Ok(ReducedBranchSet { beta, members, scores })
}

/// Reduced set from the `s^2` block of every labeled sample.
pub fn branch_set_from_labels(net: &Network, data: &Dataset, beta: f64) -> Result<ReducedBranchSet> {
    let off = net.partition().z2_s2_offset();
    let smax: Vec<f64> = net.branches.iter().map(|b| b.s_max_sq()).collect();
    reduced_branch_set(data.labeled().map(|(_, l)| &l.z2[off..]), &smax, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn ridge_toy_closed_form() {
        let xs = vec![vec![1.0], vec![2.0]];
        let ys = vec![vec![1.0], vec![2.0]];
        let opts = RidgeOptions {
            standardize: false,
            fit_intercept: false,
        };
        let m = fit_ridge(&xs, &ys, &[1.0], opts).unwrap();
        assert!((m.weights[0][0] - 5.0 / 6.0).abs() < 1e-14);
        assert_eq!(m.intercept, vec![0.0]);
        // alpha -> 0 recovers least squares
        let m = fit_ridge(&xs, &ys, &[1e-12], opts).unwrap();
        assert!((m.weights[0][0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ridge_large_alpha_predicts_mean() {
        let xs = vec![vec![1.0, 0.5], vec![2.0, -1.0], vec![4.0, 0.0]];
        let ys = vec![vec![1.0], vec![3.0], vec![5.0]];
        let m = fit_ridge(&xs, &ys, &[1e12], RidgeOptions::default()).unwrap();
        let pred = m.predict(&[10.0, 10.0]);
        assert!((pred[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn ridge_dual_matches_primal() {
        // more features than samples exercises the dual form
        let xs: Vec<Vec<f64>> = (0..4).map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 5) as f64).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = fit_ridge(&xs, &ys, &[0.5, 0.5], RidgeOptions::default()).unwrap();
        // check normal equations in standardized space: (X^T X + a I) w = X^T y
        let p = 6;
        let xm = DMatrix::from_fn(4, p, |i, j| (xs[i][j] - m.x_mean[j]) / m.x_scale[j]);
        let w = DVector::from_fn(p, |f, _| m.weights[f][0] * m.x_scale[f] / m.y_scale[0]);
        let yv = DVector::from_fn(4, |i, _| (ys[i][0] - m.y_mean[0]) / m.y_scale[0]);
        let lhs = xm.transpose() * &xm * &w + &w * 0.5;
        let rhs = xm.transpose() * yv;
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let r = fit_ridge(&[vec![1.0]], &[vec![1.0]], &[1.0], RidgeOptions::default());
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn branch_set_formula() {
        let s: Vec<Vec<f64>> = vec![vec![0.8], vec![0.9]];
        let set = reduced_branch_set(s.iter().map(|v| v.as_slice()), &[1.0], 0.7).unwrap();
        assert!((set.scores[0] - 0.3).abs() < 1e-12);
        assert_eq!(set.members, vec![0]);
        let set = reduced_branch_set(s.iter().map(|v| v.as_slice()), &[1.0], 0.95).unwrap();
        assert!(set.members.is_empty());
    }

    #[test]
    fn unit_range_returns_nominal() {
        let net = crate::cases::two_bus().unwrap();
        let d = sample_demands(&net, 3, (1.0, 1.0), 7).unwrap();
        assert!(d.iter().all(|x| *x == net.nominal_demand()));
    }

    #[test]
    fn clamp_hits_upper_bound() {
        let mut y = vec![0.5, 3.0];
        clamp_to_box(&mut y, &[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(y, vec![0.5, 2.0]);
    }
}
