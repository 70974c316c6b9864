//! Central-difference verification of the analytic gradients.

use rand::Rng;

use crate::data::{Bag, BagView, LabelMask, MiplDataset};
use crate::error::{Error, Result};
use crate::losses::{bag_objective, DisambiguationWeights, LossCoefficients, PROB_EPS};
use crate::model::{ModelParams, Psi1Kind};
use crate::network::{forward, relu_margin, BagForward};
use crate::rng;
use crate::trainer::{batch_backward, TrainConfig};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `block[index]` of the worst parameter.
    pub worst: String,
    pub num_params: usize,
}

/// Batch-mean weighted loss with the disambiguation weights held fixed.
pub fn batch_loss(params: &ModelParams, batch: &[BagView<'_>], weights: &DisambiguationWeights, coef: LossCoefficients) -> f64 {
    let total: f64 = batch
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let fwd = forward(v.instances, params);
            let ([ma, sp, inh], _) = bag_objective(&fwd.probs, weights.row(i), v.candidates, v.non_candidates, coef);
            coef.ma * ma + coef.mu * sp + coef.gamma * inh
        })
        .sum();
    total / batch.len() as f64
}

pub fn batch_gradient(
    params: &ModelParams,
    batch: &[BagView<'_>],
    weights: &DisambiguationWeights,
    coef: LossCoefficients,
) -> ModelParams {
    let forwards: Vec<BagForward> = batch.iter().map(|v| forward(v.instances, params)).collect();
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut grads = params.zeros_like();
    batch_backward(params, &forwards, batch, weights, &rows, coef, &mut grads);
    grads
}

/// Rounding budget of one central difference, in units of `eps * max(1, |L|) / step`.
pub const ROUNDOFF_UNITS: f64 = 4.0;

/// Absolute rounding noise of a central difference of step `fd_step` on a loss of size `loss`.
pub fn fd_noise(loss: f64, fd_step: f64) -> f64 {
    ROUNDOFF_UNITS * f64::EPSILON * loss.abs().max(1.0) / fd_step
}

/// Relative error `|a - b| / max(|a|, |b|, noise / tol)`.
///
/// Below the floor the numeric value is mostly rounding, so a disagreement of
/// up to `noise` scores under `GRAD_CHECK_TOL` instead of blowing up.
pub fn relative_error(analytic: f64, numeric: f64, noise: f64) -> f64 {
    let floor = (noise / GRAD_CHECK_TOL).max(f64::MIN_POSITIVE);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares every analytic partial derivative with a central difference of step `fd_step`.
pub fn grad_check_with(
    params: &ModelParams,
    batch: &[BagView<'_>],
    weights: &DisambiguationWeights,
    coef: LossCoefficients,
    fd_step: f64,
) -> GradCheckReport {
    let analytic = batch_gradient(params, batch, weights, coef);
    let noise = fd_noise(batch_loss(params, batch, weights, coef), fd_step);
    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new());
    let mut count = 0usize;
    let n_blocks = probe.blocks_mut().len();
    for b in 0..n_blocks {
        let len = probe.blocks()[b].1.len();
        for j in 0..len {
            let orig = probe.blocks()[b].1[j];
            probe.blocks_mut()[b].values[j] = orig + fd_step;
            let plus = batch_loss(&probe, batch, weights, coef);
            probe.blocks_mut()[b].values[j] = orig - fd_step;
            let minus = batch_loss(&probe, batch, weights, coef);
            probe.blocks_mut()[b].values[j] = orig;
            let numeric = (plus - minus) / (2.0 * fd_step);
            let (name, g) = analytic.blocks()[b];
            let err = relative_error(g[j], numeric, noise);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{name}[{j}]"));
            }
            count += 1;
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        num_params: count,
    }
}

/// Checks the fused loss of `cfg`'s variant on `batch`, with uniform weights.
pub fn grad_check(params: &ModelParams, batch: &MiplDataset, cfg: &TrainConfig, fd_step: f64) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Dataset("gradient check needs at least one bag".into()));
    }
    if !(fd_step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {fd_step}")));
    }
    let weights = DisambiguationWeights::uniform(&batch.candidate_masks())?;
    let views: Vec<BagView<'_>> = batch.bags().iter().map(Bag::view).collect();
    Ok(grad_check_with(params, &views, &weights, cfg.coefficients(), fd_step))
}

/// A random small problem: model, batch, and non-uniform weights on the candidate simplex.
#[derive(Clone, Debug)]
pub struct CheckCase {
    pub params: ModelParams,
    pub batch: MiplDataset,
    pub weights: DisambiguationWeights,
}

/// Distance from a kink below which a case is redrawn: central differences
/// straddling a ReLU corner or the probability clamp are not derivatives.
const KINK_MARGIN: f64 = 1e-3;

/// `k <= 4`, `l <= 3`, `a <= 3`, `n_i <= 3`, up to three bags; all parameters
/// (biases included) random so that no activation sits at a special point.
/// Values stay in `[-1, 1]` to keep the gates out of deep saturation.
pub fn random_case(seed: u64) -> Result<CheckCase> {
    let mut r = rng::stream(seed, "gradcheck", 0);
    loop {
        let case = draw_case(&mut r, seed)?;
        if case.is_smooth() {
            return Ok(case);
        }
    }
}

fn draw_case(r: &mut impl Rng, seed: u64) -> Result<CheckCase> {
    let k = r.gen_range(2..=4);
    let d = r.gen_range(1..=3);
    let l = r.gen_range(1..=3);
    let a = r.gen_range(1..=3);
    let mut params = ModelParams::init(k, d, l, a, Psi1Kind::Identity, seed)?;
    for block in params.blocks_mut() {
        for v in block.values.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    let m = r.gen_range(1..=3);
    let mut bags = Vec::with_capacity(m);
    for i in 0..m {
        let n = r.gen_range(1..=3);
        let x = ndarray::Array2::from_shape_fn((n, d), |_| r.gen_range(-1.0..1.0));
        let n_cand = r.gen_range(1..k);
        let mut labels: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), r);
        let mut cands = labels[..n_cand].to_vec();
        cands.sort_unstable();
        bags.push(Bag::new(format!("g{i}"), x, LabelMask::from_indices(k, &cands)?, None)?);
    }
    let batch = MiplDataset::new("gradcheck", k, d, None, bags)?;
    let masks = batch.candidate_masks();
    let mut weights = DisambiguationWeights::uniform(&masks)?;
    for (i, mask) in masks.iter().enumerate() {
        let mut target = ndarray::Array1::zeros(k);
        for c in mask.indices() {
            target[c] = r.gen_range(0.05..1.0);
        }
        target /= target.sum();
        weights.update_row(i, &target, r.gen_range(0.0..1.0))?;
    }
    Ok(CheckCase { params, batch, weights })
}

impl CheckCase {
    /// No ReLU input or probability within `KINK_MARGIN` of a kink.
    pub fn is_smooth(&self) -> bool {
        self.batch.bags().iter().all(|b| {
            let probs = forward(b.instances(), &self.params).probs;
            relu_margin(b.instances(), &self.params) >= KINK_MARGIN
                && probs.iter().all(|&p| p >= PROB_EPS + KINK_MARGIN && p <= 1.0 - PROB_EPS - KINK_MARGIN)
        })
    }

    pub fn check(&self, coef: LossCoefficients, fd_step: f64) -> GradCheckReport {
        let views: Vec<BagView<'_>> = self.batch.bags().iter().map(Bag::view).collect();
        grad_check_with(&self.params, &views, &self.weights, coef, fd_step)
    }
}
