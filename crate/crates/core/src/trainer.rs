//! Fully-connected predictor of `y`, the semi-supervised training losses and
//! the training loop that feeds `dl/dy` from the gradient engine into
//! ordinary backpropagation.

use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{Dataset, Label, ReducedBranchSet};
use crate::error::{Error, Result};
use crate::grid::Network;
use crate::jacobian::{linear_coeffs, GradSample, GradientEngine, LinearCoeffs, LossPartials, Mode, StageTimes};
use crate::opf::generation_cost;
use crate::powerflow::{reconstruct, BranchFlows, FdpfSolver, PFState};

const CHECKPOINT_MAGIC: &[u8; 8] = b"SOPFNN\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.b);
        for (o, row) in out.iter_mut().zip(self.w.chunks_exact(self.n_in)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// `x -> standardize -> (Dense, ReLU)* -> Dense -> tanh -> box projection`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fcnn {
    pub layers: Vec<Dense>,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_lo: Vec<f64>,
    pub y_hi: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Input of every layer (standardized `x` first).
    pub inputs: Vec<Vec<f64>>,
    pub y_tilde: Vec<f64>,
    pub y: Vec<f64>,
}

/// Parameter-shaped gradient (or optimizer moment) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(net: &Fcnn) -> Self {
        Self {
            w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.w.iter().zip(&self.b).flat_map(|(w, b)| w.iter().chain(b)).copied().collect()
    }
}

/// `y = lambda y_max + (1 - lambda) y_min` with `lambda = (1 + y_tilde) / 2`.
pub fn project(y_tilde: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    y_tilde
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&t, (&l, &h))| {
            let lam = 0.5 * (1.0 + t);
            (lam * h + (1.0 - lam) * l).clamp(l, h)
        })
        .collect()
}

impl Fcnn {
    /// Uniform fan-in initialization `U(-1/sqrt(n_in), 1/sqrt(n_in))`.
    pub fn new(n_in: usize, hidden: &[usize], lo: Vec<f64>, hi: Vec<f64>, seed: u64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Dimension("output box is empty or ragged".into()));
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i])) {
            return Err(Error::InvalidArgument(format!("output box {i} has min > max")));
        }
        if n_in == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![n_in];
        widths.extend_from_slice(hidden);
        widths.push(lo.len());
        let layers = widths
            .windows(2)
            .map(|w| {
                let k = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    n_in: w[0],
                    n_out: w[1],
                    w: (0..w[0] * w[1]).map(|_| rng.gen_range(-k..k)).collect(),
                    b: (0..w[1]).map(|_| rng.gen_range(-k..k)).collect(),
                }
            })
            .collect();
        Ok(Self {
            layers,
            x_mean: vec![0.0; n_in],
            x_scale: vec![1.0; n_in],
            y_lo: lo,
            y_hi: hi,
        })
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.n_in()];
        w.extend(self.layers.iter().map(|l| l.n_out));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Sets the input standardization from training demands; constant
    /// inputs keep unit scale.
    pub fn fit_input_scaling(&mut self, xs: &[Vec<f64>]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let p = self.n_in();
        for j in 0..p {
            let m = xs.iter().map(|x| x[j]).sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            self.x_mean[j] = m;
            self.x_scale[j] = if sd > 1e-12 { sd } else { 1.0 };
        }
    }

    pub fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h: Vec<f64> = x
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let last = self.layers.len() - 1;
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.apply(&h, &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut h, std::mem::take(&mut out)));
        }
        let y = project(&h, &self.y_lo, &self.y_hi);
        ForwardCache { inputs, y_tilde: h, y }
    }

    /// `(y_tilde, y)`
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = self.forward_cached(x);
        (c.y_tilde, c.y)
    }

    /// Accumulates `dl/dW` into `grads` given `dl/dy` for one sample.
    pub fn backward(&self, cache: &ForwardCache, dl_dy: &[f64], grads: &mut ParamGrads) {
        // through the projection and tanh
        let mut delta: Vec<f64> = dl_dy
            .iter()
            .enumerate()
            .map(|(i, g)| g * 0.5 * (self.y_hi[i] - self.y_lo[i]) * (1.0 - cache.y_tilde[i] * cache.y_tilde[i]))
            .collect();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            let gw = &mut grads.w[k];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads.b[k][o] += d;
                for (g, &a) in gw[o * layer.n_in..(o + 1) * layer.n_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(&layer.w[o * layer.n_in..(o + 1) * layer.n_in]) {
                    *p += d * w;
                }
            }
            // ReLU: the stored input of layer k is the activation of layer k-1
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let u32w = |out: &mut W, v: usize| -> Result<()> {
            let v = u32::try_from(v).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
            out.write_all(&v.to_le_bytes())?;
            Ok(())
        };
        let f64s = |out: &mut W, v: &[f64]| -> Result<()> {
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        out.write_all(CHECKPOINT_MAGIC)?;
        u32w(&mut out, CHECKPOINT_VERSION as usize)?;
        u32w(&mut out, self.layers.len())?;
        for l in &self.layers {
            u32w(&mut out, l.n_in)?;
            u32w(&mut out, l.n_out)?;
        }
        f64s(&mut out, &self.x_mean)?;
        f64s(&mut out, &self.x_scale)?;
        f64s(&mut out, &self.y_lo)?;
        f64s(&mut out, &self.y_hi)?;
        for l in &self.layers {
            f64s(&mut out, &l.w)?;
            f64s(&mut out, &l.b)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Validation("not a model checkpoint".into()));
        }
        let mut u32r = || -> Result<usize> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = u32r()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Validation(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let nl = u32r()?;
        if nl == 0 || nl > 64 {
            return Err(Error::Validation(format!("implausible layer count {nl}")));
        }
        let mut shapes = Vec::with_capacity(nl);
        for _ in 0..nl {
            shapes.push((u32r()?, u32r()?));
        }
        if shapes.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(Error::Validation("checkpoint layer shapes do not chain".into()));
        }
        let mut f64r = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            input.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let (n_in, n_out) = (shapes[0].0, shapes[nl - 1].1);
        let x_mean = f64r(n_in)?;
        let x_scale = f64r(n_in)?;
        let y_lo = f64r(n_out)?;
        let y_hi = f64r(n_out)?;
        let mut layers = Vec::with_capacity(nl);
        for &(a, b) in &shapes {
            layers.push(Dense {
                n_in: a,
                n_out: b,
                w: f64r(a * b)?,
                b: f64r(b)?,
            });
        }
        Ok(Self {
            layers,
            x_mean,
            x_scale,
            y_lo,
            y_hi,
        })
    }
}

/// Adam with the usual decay constants.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamGrads,
    v: ParamGrads,
    t: i32,
}

impl Adam {
    pub fn new(net: &Fcnn, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: ParamGrads::zeros(net),
            v: ParamGrads::zeros(net),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Fcnn, g: &ParamGrads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        };
        for (k, layer) in net.layers.iter_mut().enumerate() {
            upd(&mut layer.w, &g.w[k], &mut self.m.w[k], &mut self.v.w[k]);
            upd(&mut layer.b, &g.b[k], &mut self.m.b[k], &mut self.v.b[k]);
        }
    }
}

/// Step decay: `lr0 * gamma^(number of milestones <= epoch)`, epochs from 0.
pub fn multistep_lr(lr0: f64, milestones: &[usize], gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_o: f64,
    pub w_s: f64,
    pub w_v: f64,
    pub w_wp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_o: 0.1,
            w_s: 0.1,
            w_v: 10.0,
            w_wp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_o, self.w_s, self.w_v, self.w_wp];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Batch-mean loss terms; `l_o` is the generation cost divided by the cost
/// scale, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_o: f64,
    pub l_s: f64,
    pub l_c_z2: f64,
    pub l_c_vd: f64,
    pub l_wp: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, a: f64) {
        self.total += a * o.total;
        self.l_o += a * o.l_o;
        self.l_s += a * o.l_s;
        self.l_c_z2 += a * o.l_c_z2;
        self.l_c_vd += a * o.l_c_vd;
        self.l_wp += a * o.l_wp;
    }
}

fn norm2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `||ReLU(c - c_max)||_2 + ||ReLU(c_min - c)||_2` over `(c, c_min, c_max)`
/// triples, with its subgradient (0 where a norm vanishes).
pub fn box_violation(items: &[(f64, f64, f64)]) -> (f64, Vec<f64>) {
    let up: Vec<f64> = items.iter().map(|&(c, _, hi)| (c - hi).max(0.0)).collect();
    let dn: Vec<f64> = items.iter().map(|&(c, lo, _)| (lo - c).max(0.0)).collect();
    let nu = norm2(up.iter().copied());
    let nd = norm2(dn.iter().copied());
    let grad = up
        .iter()
        .zip(&dn)
        .map(|(&u, &d)| {
            let mut g = 0.0;
            if nu > 0.0 {
                g += u / nu;
            }
            if nd > 0.0 {
                g -= d / nd;
            }
            g
        })
        .collect();
    (nu + nd, grad)
}

/// `||P_g - P~_g||_2 + w_wp ||V_gen_ref - V~_gen_ref||_2` and `dl/dy`.
pub fn warmup_loss(n_gen: usize, y: &[f64], pseudo_y: &[f64], w_wp: f64) -> (LossBreakdown, Vec<f64>) {
    let e: Vec<f64> = y.iter().zip(pseudo_y).map(|(a, b)| a - b).collect();
    let np = norm2(e[..n_gen].iter().copied());
    let nv = norm2(e[n_gen..].iter().copied());
    let mut g = vec![0.0; y.len()];
    if np > 0.0 {
        for k in 0..n_gen {
            g[k] = e[k] / np;
        }
    }
    if nv > 0.0 {
        for k in n_gen..y.len() {
            g[k] = w_wp * e[k] / nv;
        }
    }
    let l_wp = np + w_wp * nv;
    (
        LossBreakdown {
            total: l_wp,
            l_wp,
            ..Default::default()
        },
        g,
    )
}

/// One completed sample for the full loss.
#[derive(Debug, Clone, Copy)]
pub struct FullSample<'a> {
    pub y: &'a [f64],
    pub state: &'a PFState,
    pub z2: &'a [f64],
    pub pseudo: &'a Label,
}

/// `L_c + w_o L_o + w_s L_s` for one sample and its partials.
///
/// Assignment of the terms: `gy` gets the cost of the non-reference units,
/// the `P_g` part of `L_s` and the `L_s` entries of generator/reference
/// voltages; `gz1` gets the angle and load-voltage entries of `L_s` and the
/// load-voltage violation; `gz2` gets the reference-unit cost and the `z2`
/// violation over `branches`.
pub fn full_loss(
    net: &Network,
    s: FullSample<'_>,
    weights: &LossWeights,
    branches: &[usize],
    cost_scale: f64,
) -> (LossBreakdown, LossPartials) {
    let part = net.partition();
    let n = part.n_bus();
    let ng = part.n_gen();
    let mut gy = vec![0.0; part.y_len()];
    let mut gz1 = vec![0.0; part.z1_len()];
    let mut gz2 = vec![0.0; part.z2_len()];
    let gen_of = |bus: usize| &net.generators[part.generator_at[bus].unwrap()];

    // cost
    let ref_gen = net.reference_generator();
    let mut cost = ref_gen.cost.eval(s.z2[0]);
    gz2[0] += weights.w_o * ref_gen.cost.derivative(s.z2[0]) / cost_scale;
    for (k, &i) in part.gen.iter().enumerate() {
        let g = gen_of(i);
        cost += g.cost.eval(s.y[k]);
        gy[k] += weights.w_o * g.cost.derivative(s.y[k]) / cost_scale;
    }
    let l_o = cost / cost_scale;

    // supervised term
    let ep: Vec<f64> = (0..ng).map(|k| s.y[k] - s.pseudo.y[k]).collect();
    let np = norm2(ep.iter().copied());
    if np > 0.0 {
        for k in 0..ng {
            gy[k] += weights.w_s * ep[k] / np;
        }
    }
    let vt = s.pseudo.phasors(part);
    let ev: Vec<f64> = (0..n)
        .map(|i| s.state.theta[i] - vt[i])
        .chain((0..n).map(|i| s.state.vmag[i] - vt[n + i]))
        .collect();
    let nv = norm2(ev.iter().copied());
    if nv > 0.0 {
        let a = weights.w_s / nv;
        for (k, &i) in part.nonref.iter().enumerate() {
            gz1[k] += a * ev[i];
        }
        let off = part.z1_v_offset();
        for (k, &i) in part.load.iter().enumerate() {
            gz1[off + k] += a * ev[n + i];
        }
        let yo = part.y_v_offset();
        for (k, &i) in part.gen_ref.iter().enumerate() {
            gy[yo + k] += a * ev[n + i];
        }
    }
    let l_s = np + nv;

    // z2 violations
    let mut items = Vec::with_capacity(2 + ng + branches.len());
    items.push((s.z2[0], ref_gen.p_min, ref_gen.p_max));
    items.push((s.z2[1], ref_gen.q_min, ref_gen.q_max));
    for (k, &i) in part.gen.iter().enumerate() {
        let g = gen_of(i);
        items.push((s.z2[2 + k], g.q_min, g.q_max));
    }
    let s2o = part.z2_s2_offset();
    for &m in branches {
        items.push((s.z2[s2o + m], f64::NEG_INFINITY, net.branches[m].s_max_sq()));
    }
    let (l_c_z2, g) = box_violation(&items);
    for k in 0..2 + ng {
        gz2[k] += g[k];
    }
    for (k, &m) in branches.iter().enumerate() {
        gz2[s2o + m] += g[2 + ng + k];
    }

    // load voltage violations
    let vitems: Vec<(f64, f64, f64)> = part
        .load
        .iter()
        .map(|&i| (s.state.vmag[i], net.buses[i].v_min, net.buses[i].v_max))
        .collect();
    let (l_c_vd, g) = box_violation(&vitems);
    let off = part.z1_v_offset();
    for k in 0..part.n_load() {
        gz1[off + k] += weights.w_v * g[k];
    }

    let total = l_c_z2 + weights.w_v * l_c_vd + weights.w_o * l_o + weights.w_s * l_s;
    (
        LossBreakdown {
            total,
            l_o,
            l_s,
            l_c_z2,
            l_c_vd,
            l_wp: 0.0,
        },
        LossPartials { gy, gz1, gz2 },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Full,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
    pub beta: f64,
    pub weights: LossWeights,
    /// Serial per-sample work instead of the thread pool.
    pub deterministic: bool,
    /// Evaluate the full loss on the validation set after every epoch.
    pub validate_full: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::M1,
            hidden: vec![50, 236],
            batch_size: 32,
            warmup_epochs: 1,
            epochs: 100,
            lr: 5e-4,
            milestones: vec![90],
            gamma: 0.2,
            seed: 0,
            beta: 0.7,
            weights: LossWeights::default(),
            deterministic: false,
            validate_full: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warm-up epochs ({}) exceed total epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        Ok(())
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Full
        }
    }
}

/// Branches whose flow limits enter the loss: every rated branch for EXACT
/// and M0, the reduced set otherwise.
pub fn active_branches(net: &Network, mode: Mode, reduced: Option<&ReducedBranchSet>) -> Result<Vec<usize>> {
    let rated = |m: &usize| net.branches[*m].s_max.is_some();
    if mode.reduced() {
        let set = reduced.ok_or_else(|| Error::InvalidArgument(format!("mode {mode} needs a reduced branch set")))?;
        Ok(set.members.iter().copied().filter(rated).collect())
    } else {
        Ok((0..net.n_branch()).filter(rated).collect())
    }
}

/// Mean voltage magnitude of the labels, the linearization point.
pub fn mean_label_voltage(net: &Network, data: &Dataset) -> Vec<f64> {
    let part = net.partition();
    let n = net.n_bus();
    let mut acc = vec![0.0; n];
    let mut k = 0usize;
    for (_, l) in data.labeled() {
        let v = l.phasors(part);
        for i in 0..n {
            acc[i] += v[n + i];
        }
        k += 1;
    }
    if k == 0 {
        return vec![1.0; n];
    }
    acc.iter().map(|a| a / k as f64).collect()
}

/// Mean generation cost of the labels, used to normalize `L_o`.
pub fn label_cost_scale(net: &Network, data: &Dataset) -> f64 {
    let part = net.partition();
    let (mut s, mut k) = (0.0, 0usize);
    for (_, l) in data.labeled() {
        let mut pg = vec![0.0; net.generators.len()];
        pg[part.generator_at[part.reference].unwrap()] = l.z2[0];
        for (c, &i) in part.gen.iter().enumerate() {
            pg[part.generator_at[i].unwrap()] = l.y[c];
        }
        s += l.objective.unwrap_or_else(|| generation_cost(net, &pg));
        k += 1;
    }
    if k == 0 || !(s > 0.0) {
        1.0
    } else {
        s / k as f64
    }
}

/// Everything the per-batch loss and gradient need besides the model.
pub struct TrainContext<'a> {
    pub net: &'a Network,
    pub solver: &'a FdpfSolver,
    pub engine: GradientEngine,
    pub weights: LossWeights,
    pub cost_scale: f64,
    pub deterministic: bool,
}

impl<'a> TrainContext<'a> {
    pub fn new(
        net: &'a Network,
        solver: &'a FdpfSolver,
        mode: Mode,
        branches: Vec<usize>,
        coeffs: Option<LinearCoeffs>,
        weights: LossWeights,
        cost_scale: f64,
    ) -> Result<Self> {
        Ok(Self {
            net,
            solver,
            engine: GradientEngine::new(net, mode, branches, coeffs)?,
            weights,
            cost_scale,
            deterministic: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchTimes {
    pub forward_s: f64,
    pub fdpf_s: f64,
    pub jacobian_s: f64,
    pub ksolve_s: f64,
    pub backward_s: f64,
}

impl BatchTimes {
    fn add(&mut self, o: &BatchTimes) {
        self.forward_s += o.forward_s;
        self.fdpf_s += o.fdpf_s;
        self.jacobian_s += o.jacobian_s;
        self.ksolve_s += o.ksolve_s;
        self.backward_s += o.backward_s;
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: ParamGrads,
    /// Samples whose power flow failed; they are left out of loss and gradient.
    pub dropped: usize,
    pub retained: usize,
    pub times: BatchTimes,
}

struct Completed {
    state: PFState,
    z2: Vec<f64>,
    flows: BranchFlows,
}

fn map_samples<T: Send, F>(deterministic: bool, n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    if deterministic {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Mean loss and `dl/dW` over a batch. Fails only when every sample's power
/// flow diverges.
pub fn batch_gradient(
    ctx: &TrainContext<'_>,
    model: &Fcnn,
    xs: &[&[f64]],
    labels: &[&Label],
    phase: Phase,
) -> Result<BatchResult> {
    let net = ctx.net;
    let ng = net.partition().n_gen();
    let mut times = BatchTimes::default();
    let t0 = Instant::now();
    let caches: Vec<ForwardCache> = map_samples(ctx.deterministic, xs.len(), |k| model.forward_cached(xs[k]));
    times.forward_s = t0.elapsed().as_secs_f64();

    let mut grads = ParamGrads::zeros(model);
    let mut loss = LossBreakdown::default();
    let (dl_dy, dropped) = match phase {
        Phase::Warmup => {
            let b = xs.len() as f64;
            let out: Vec<Vec<f64>> = caches
                .iter()
                .zip(labels)
                .map(|(c, l)| {
                    let (lb, g) = warmup_loss(ng, &c.y, &l.y, ctx.weights.w_wp);
                    loss.add_scaled(&lb, 1.0 / b);
                    g.iter().map(|v| v / b).collect()
                })
                .collect();
            (out.into_iter().map(Some).collect::<Vec<_>>(), 0)
        }
        Phase::Full => {
            let t1 = Instant::now();
            let done: Vec<Option<Completed>> = map_samples(ctx.deterministic, xs.len(), |k| {
                ctx.solver.solve(net, xs[k], &caches[k].y, None).ok().map(|state| {
                    let (z2, flows) = reconstruct(net, &state, xs[k]);
                    Completed { state, z2, flows }
                })
            });
            times.fdpf_s = t1.elapsed().as_secs_f64();
            let retained = done.iter().filter(|d| d.is_some()).count();
            let dropped = xs.len() - retained;
            if retained == 0 {
                return Err(Error::Diverged {
                    iterations: ctx.solver.options.max_iter,
                    max_mismatch: f64::NAN,
                });
            }
            let b = retained as f64;
            let mut partials = Vec::with_capacity(retained);
            let mut keep = Vec::with_capacity(retained);
            for (k, d) in done.iter().enumerate() {
                if let Some(c) = d {
                    let s = FullSample {
                        y: &caches[k].y,
                        state: &c.state,
                        z2: &c.z2,
                        pseudo: labels[k],
                    };
                    let (lb, p) = full_loss(net, s, &ctx.weights, ctx.engine.branches(), ctx.cost_scale);
                    loss.add_scaled(&lb, 1.0 / b);
                    partials.push(p);
                    keep.push(k);
                }
            }
            let samples: Vec<GradSample<'_>> = keep
                .iter()
                .zip(&partials)
                .map(|(&k, p)| {
                    let c = done[k].as_ref().unwrap();
                    GradSample {
                        theta: &c.state.theta,
                        vmag: &c.state.vmag,
                        flows: &c.flows,
                        partials: p,
                    }
                })
                .collect();
            let (gs, st): (Vec<Vec<f64>>, StageTimes) = ctx.engine.gradients(net, &samples)?;
            times.jacobian_s = st.jacobian_s;
            times.ksolve_s = st.ksolve_s;
            let mut out: Vec<Option<Vec<f64>>> = vec![None; xs.len()];
            for (&k, g) in keep.iter().zip(gs) {
                out[k] = Some(g.iter().map(|v| v / b).collect());
            }
            (out, dropped)
        }
    };
    let t2 = Instant::now();
    for (c, g) in caches.iter().zip(&dl_dy) {
        if let Some(g) = g {
            model.backward(c, g, &mut grads);
        }
    }
    times.backward_s = t2.elapsed().as_secs_f64();
    Ok(BatchResult {
        loss,
        grads,
        dropped,
        retained: xs.len() - dropped,
        times,
    })
}

/// Mean loss without gradients; `None` when every power flow failed.
pub fn batch_loss(
    ctx: &TrainContext<'_>,
    model: &Fcnn,
    xs: &[&[f64]],
    labels: &[&Label],
    phase: Phase,
) -> (Option<LossBreakdown>, usize) {
    let net = ctx.net;
    let ng = net.partition().n_gen();
    let per: Vec<Option<LossBreakdown>> = map_samples(ctx.deterministic, xs.len(), |k| {
        let (_, y) = model.forward(xs[k]);
        match phase {
            Phase::Warmup => Some(warmup_loss(ng, &y, &labels[k].y, ctx.weights.w_wp).0),
            Phase::Full => ctx.solver.solve(net, xs[k], &y, None).ok().map(|state| {
                let (z2, _) = reconstruct(net, &state, xs[k]);
                let s = FullSample {
                    y: &y,
                    state: &state,
                    z2: &z2,
                    pseudo: labels[k],
                };
                full_loss(net, s, &ctx.weights, ctx.engine.branches(), ctx.cost_scale).0
            }),
        }
    });
    let ok: Vec<&LossBreakdown> = per.iter().flatten().collect();
    let dropped = xs.len() - ok.len();
    if ok.is_empty() {
        return (None, dropped);
    }
    let mut out = LossBreakdown::default();
    for l in &ok {
        out.add_scaled(l, 1.0 / ok.len() as f64);
    }
    (Some(out), dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Wall time of the optimization pass (validation excluded).
    pub wall_s: f64,
    pub times: BatchTimes,
    pub fdpf_failures: usize,
    pub batches: usize,
    /// Supervised loss against the validation labels.
    pub val_sup: Option<f64>,
    pub val_full: Option<f64>,
    pub val_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub model: Fcnn,
    pub epochs: Vec<EpochLog>,
    pub branches: Vec<usize>,
    pub cost_scale: f64,
    pub param_count: usize,
}

/// Resources prepared before training.
#[derive(Debug, Clone, Default)]
pub struct TrainInputs<'a> {
    pub reduced: Option<&'a ReducedBranchSet>,
    pub validation: Option<&'a Dataset>,
}

/// Warm-up epochs on the supervised loss, then the full loss with the
/// configured gradient mode. Each finished epoch is passed to `on_epoch`
/// before the next starts, so logs survive a later failure.
pub fn train<F>(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    inputs: TrainInputs<'_>,
    mut on_epoch: F,
) -> Result<TrainRun>
where
    F: FnMut(&EpochLog),
{
    cfg.validate()?;
    data.check_dimensions(net)?;
    let train_idx: Vec<usize> = (0..data.len()).filter(|&k| data.labels[k].is_some()).collect();
    if train_idx.is_empty() {
        return Err(Error::InsufficientData("no labeled training samples".into()));
    }
    let part = net.partition();
    let (lo, hi) = net.y_bounds();
    let mut model = Fcnn::new(2 * net.n_bus(), &cfg.hidden, lo, hi, cfg.seed)?;
    let xs_train: Vec<Vec<f64>> = train_idx.iter().map(|&k| data.demands[k].clone()).collect();
    model.fit_input_scaling(&xs_train);
    debug_assert_eq!(model.n_out(), part.y_len());

    let solver = FdpfSolver::new(net)?;
    let branches = active_branches(net, cfg.mode, inputs.reduced)?;
    let coeffs = cfg
        .mode
        .linearized()
        .then(|| linear_coeffs(net, &mean_label_voltage(net, data)));
    let cost_scale = label_cost_scale(net, data);
    let mut ctx = TrainContext::new(net, &solver, cfg.mode, branches.clone(), coeffs, cfg.weights, cost_scale)?;
    ctx.deterministic = cfg.deterministic;
    log::info!(
        "training {} params, mode {}, {} samples, {} active branches",
        model.param_count(),
        cfg.mode,
        train_idx.len(),
        branches.len()
    );

    let val: Option<(Vec<&[f64]>, Vec<&Label>)> = inputs.validation.map(|v| {
        v.labeled().map(|(x, l)| (x.as_slice(), l)).unzip()
    });

    let mut adam = Adam::new(&model, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order = train_idx.clone();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let phase = cfg.phase(epoch);
        adam.lr = multistep_lr(cfg.lr, &cfg.milestones, cfg.gamma, epoch);
        order.shuffle(&mut rng);
        let t0 = Instant::now();
        let mut loss = LossBreakdown::default();
        let mut times = BatchTimes::default();
        let mut failures = 0;
        let mut seen = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&k| data.demands[k].as_slice()).collect();
            let ls: Vec<&Label> = chunk.iter().map(|&k| data.labels[k].as_ref().unwrap()).collect();
            let res = batch_gradient(&ctx, &model, &xs, &ls, phase).map_err(|e| {
                log::error!("epoch {epoch}: batch {batches} failed: {e}");
                e
            })?;
            adam.step(&mut model, &res.grads);
            loss.add_scaled(&res.loss, res.retained as f64);
            seen += res.retained;
            failures += res.dropped;
            times.add(&res.times);
            batches += 1;
        }
        let wall_s = t0.elapsed().as_secs_f64();
        let mut mean = LossBreakdown::default();
        mean.add_scaled(&loss, 1.0 / seen.max(1) as f64);

        let (mut val_sup, mut val_full, mut val_failures) = (None, None, 0);
        if let Some((vx, vl)) = &val {
            if !vx.is_empty() {
                val_sup = batch_loss(&ctx, &model, vx, vl, Phase::Warmup).0.map(|l| l.total);
                if cfg.validate_full && phase == Phase::Full {
                    let (l, d) = batch_loss(&ctx, &model, vx, vl, Phase::Full);
                    val_full = l.map(|l| l.total);
                    val_failures = d;
                }
            }
        }
        let entry = EpochLog {
            epoch,
            phase,
            lr: adam.lr,
            loss: mean,
            wall_s,
            times,
            fdpf_failures: failures,
            batches,
            val_sup,
            val_full,
            val_failures,
        };
        log::info!(
            "epoch {epoch} [{}] loss {:.6} failures {failures} {:.2}s",
            phase.name(),
            mean.total,
            wall_s
        );
        on_epoch(&entry);
        epochs.push(entry);
    }
    Ok(TrainRun {
        config: cfg.clone(),
        param_count: model.param_count(),
        model,
        epochs,
        branches,
        cost_scale,
    })
}
