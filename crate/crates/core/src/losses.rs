//! Conjugate-label-information loss.
//!
//! Three terms over the class probabilities `P_i` of each bag:
//!
//! * mapping: `-sum_{c in S_i} w_ic log P_ic`, with disambiguation weights `w`
//!   that start uniform over the candidates and drift toward the model's own
//!   renormalized candidate probabilities as training progresses;
//! * sparsity: `sum_{c in S_i} P_ic`, the l1 surrogate of the l0 norm of the
//!   candidate-masked prediction;
//! * inhibition: `-sum_{c in Sbar_i} log(1 - P_ic)` over the non-candidates.
//!
//! Each is averaged over the bags passed in; the total is
//! `mapping + mu * sparsity + gamma * inhibition`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Tolerance on the per-bag weight sum.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Clamped probability and whether the clamp was inactive (derivative 1).
fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, false)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, false)
    } else {
        (p, true)
    }
}

/// Per-bag weights over candidate labels, stored sparsely as `(label, weight)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisambiguationWeights {
    rows: Vec<Vec<(usize, f64)>>,
}

impl DisambiguationWeights {
    pub fn uniform(masks: &[LabelMask]) -> Result<Self> {
        let rows = masks
            .iter()
            .enumerate()
            .map(|(i, mask)| {
                if !mask.is_proper() {
                    return Err(Error::Dataset(format!(
                        "bag {i}: candidate mask must have at least one candidate and one non-candidate"
                    )));
                }
                let w = 1.0 / mask.count() as f64;
                Ok(mask.indices().map(|c| (c, w)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Dense weight vector of bag `i` over `k` labels.
    pub fn dense(&self, i: usize, k: usize) -> Array1<f64> {
        let mut out = Array1::zeros(k);
        for &(c, w) in &self.rows[i] {
            out[c] = w;
        }
        out
    }

    /// Weights of the given bags, in the given order.
    pub fn select(&self, indices: &[usize]) -> DisambiguationWeights {
        DisambiguationWeights {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Moving-average update of bag `i` toward its renormalized candidate
    /// probabilities: `w <- rho w + (1 - rho) P_c / sum_{c' in S} P_c'`.
    pub fn update_row(&mut self, i: usize, probs: &Array1<f64>, rho: f64) -> Result<()> {
        let row = &mut self.rows[i];
        let mass: f64 = row.iter().map(|&(c, _)| clamp_prob(probs[c]).0).sum();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::NonFinite(format!("candidate probability mass of bag {i}")));
        }
        for (c, w) in row.iter_mut() {
            *w = rho * *w + (1.0 - rho) * clamp_prob(probs[*c]).0 / mass;
        }
        Ok(())
    }

    /// Largest `|sum_c w_ic - 1|` over bags.
    pub fn max_simplex_deviation(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| (row.iter().map(|&(_, w)| w).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Every weight is nonnegative, sits on a candidate, and each row sums to one.
    pub fn on_simplex(&self, masks: &[LabelMask]) -> bool {
        self.rows.len() == masks.len()
            && self
                .rows
                .iter()
                .zip(masks)
                .all(|(row, m)| row.iter().all(|&(c, w)| m.contains(c) && w >= 0.0) && row.len() == m.count())
            && self.max_simplex_deviation() <= SIMPLEX_TOL
    }
}

/// Uniform `1/|S_i|` weights over each candidate set.
pub fn init_weights(masks: &[LabelMask]) -> Result<DisambiguationWeights> {
    DisambiguationWeights::uniform(masks)
}

/// Mixing coefficient `(T - t) / T` for epoch `t` in `1..=T`.
pub fn rho(t: usize, epochs: usize) -> f64 {
    (epochs - t) as f64 / epochs as f64
}

pub fn update_weights(
    weights: &DisambiguationWeights,
    probs: &[Array1<f64>],
    masks: &[LabelMask],
    t: usize,
    epochs: usize,
) -> Result<DisambiguationWeights> {
    if epochs == 0 || t == 0 || t > epochs {
        return Err(Error::Config(format!("epoch {t} outside 1..={epochs}")));
    }
    check_aligned(probs, weights, masks)?;
    let rho = rho(t, epochs);
    let mut out = weights.clone();
    for (i, p) in probs.iter().enumerate() {
        out.update_row(i, p, rho)?;
    }
    Ok(out)
}

fn check_probs(probs: &[Array1<f64>], masks: &[LabelMask]) -> Result<()> {
    if probs.len() != masks.len() {
        return Err(Error::Shape(format!("{} probability vectors for {} masks", probs.len(), masks.len())));
    }
    for (i, (p, m)) in probs.iter().zip(masks).enumerate() {
        if p.len() != m.len() {
            return Err(Error::Shape(format!("bag {i}: {} probabilities for {} labels", p.len(), m.len())));
        }
    }
    Ok(())
}

fn check_aligned(probs: &[Array1<f64>], weights: &DisambiguationWeights, masks: &[LabelMask]) -> Result<()> {
    check_probs(probs, masks)?;
    if weights.len() != masks.len() {
        return Err(Error::Shape(format!("{} weight rows for {} masks", weights.len(), masks.len())));
    }
    for (i, m) in masks.iter().enumerate() {
        if weights.row(i).iter().any(|&(c, _)| !m.contains(c)) {
            return Err(Error::Shape(format!("bag {i}: weight on a non-candidate label")));
        }
    }
    Ok(())
}

fn mean(total: f64, m: usize) -> f64 {
    if m == 0 {
        0.0
    } else {
        total / m as f64
    }
}

fn bag_mapping(p: &Array1<f64>, row: &[(usize, f64)]) -> f64 {
    -row.iter().map(|&(c, w)| w * clamp_prob(p[c]).0.ln()).sum::<f64>()
}

fn bag_sparsity(p: &Array1<f64>, mask: &LabelMask) -> f64 {
    mask.indices().map(|c| p[c]).sum()
}

fn bag_inhibition(p: &Array1<f64>, non_candidates: &LabelMask) -> f64 {
    -non_candidates.indices().map(|c| (1.0 - clamp_prob(p[c]).0).ln()).sum::<f64>()
}

pub fn mapping_loss(probs: &[Array1<f64>], weights: &DisambiguationWeights, masks: &[LabelMask]) -> Result<f64> {
    check_aligned(probs, weights, masks)?;
    let total: f64 = probs.iter().enumerate().map(|(i, p)| bag_mapping(p, weights.row(i))).sum();
    Ok(mean(total, probs.len()))
}

pub fn sparsity_loss(probs: &[Array1<f64>], masks: &[LabelMask]) -> Result<f64> {
    check_probs(probs, masks)?;
    let total: f64 = probs.iter().zip(masks).map(|(p, m)| bag_sparsity(p, m)).sum();
    Ok(mean(total, probs.len()))
}

pub fn inhibition_loss(probs: &[Array1<f64>], non_candidates: &[LabelMask]) -> Result<f64> {
    check_probs(probs, non_candidates)?;
    let total: f64 = probs.iter().zip(non_candidates).map(|(p, m)| bag_inhibition(p, m)).sum();
    Ok(mean(total, probs.len()))
}

/// Cross-entropy against the uniform distribution over each candidate set.
pub fn ce_loss(probs: &[Array1<f64>], masks: &[LabelMask]) -> Result<f64> {
    let uniform = DisambiguationWeights::uniform(masks)?;
    mapping_loss(probs, &uniform, masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ma: f64,
    pub sp: f64,
    pub in_: f64,
    pub total: f64,
    pub mu: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn new(ma: f64, sp: f64, in_: f64, mu: f64, gamma: f64) -> Self {
        Self {
            ma,
            sp,
            in_,
            total: ma + mu * sp + gamma * in_,
            mu,
            gamma,
        }
    }
}

fn check_coefficients(mu: f64, gamma: f64) -> Result<()> {
    if !(mu >= 0.0 && gamma >= 0.0 && mu.is_finite() && gamma.is_finite()) {
        return Err(Error::Config(format!("loss coefficients must be finite and >= 0 (mu={mu}, gamma={gamma})")));
    }
    Ok(())
}

/// The fused loss with each component reported separately.
pub fn cli_loss(
    probs: &[Array1<f64>],
    weights: &DisambiguationWeights,
    masks: &[LabelMask],
    mu: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    check_coefficients(mu, gamma)?;
    let ma = mapping_loss(probs, weights, masks)?;
    let sp = sparsity_loss(probs, masks)?;
    let non: Vec<LabelMask> = masks.iter().map(LabelMask::complement).collect();
    let in_ = inhibition_loss(probs, &non)?;
    Ok(LossBreakdown::new(ma, sp, in_, mu, gamma))
}

/// Loss variants sharing one trainer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// mapping + sparsity + inhibition
    #[default]
    Cli,
    MaSp,
    MaIn,
    Ma,
    /// frozen-uniform cross-entropy + sparsity + inhibition
    CeSpIn,
    Ce,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Cli,
        Variant::MaSp,
        Variant::MaIn,
        Variant::Ma,
        Variant::CeSpIn,
        Variant::Ce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cli => "cli",
            Variant::MaSp => "ma_sp",
            Variant::MaIn => "ma_in",
            Variant::Ma => "ma",
            Variant::CeSpIn => "ce_sp_in",
            Variant::Ce => "ce",
        }
    }

    /// Effective `(mu, gamma)` after switching components off.
    pub fn coefficients(self, mu: f64, gamma: f64) -> (f64, f64) {
        match self {
            Variant::Cli | Variant::CeSpIn => (mu, gamma),
            Variant::MaSp => (mu, 0.0),
            Variant::MaIn => (0.0, gamma),
            Variant::Ma | Variant::Ce => (0.0, 0.0),
        }
    }

    /// CE variants keep the initial uniform weights instead of updating them.
    pub fn freezes_weights(self) -> bool {
        matches!(self, Variant::CeSpIn | Variant::Ce)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (cli|ma_sp|ma_in|ma|ce_sp_in|ce)")))
    }
}

/// Multipliers on the three loss terms. `ma` is 1 in training; the gradient
/// checker sets it to 0 to isolate the other components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub ma: f64,
    pub mu: f64,
    pub gamma: f64,
}

impl LossCoefficients {
    pub fn fused(mu: f64, gamma: f64) -> Self {
        Self { ma: 1.0, mu, gamma }
    }
}

/// Loss terms of a single bag and the derivative of the weighted sum with
/// respect to its class probabilities. The disambiguation weights are treated
/// as constants.
pub(crate) fn bag_objective(
    p: &Array1<f64>,
    row: &[(usize, f64)],
    candidates: &LabelMask,
    non_candidates: &LabelMask,
    coef: LossCoefficients,
) -> ([f64; 3], Array1<f64>) {
    let mut dp = Array1::zeros(p.len());
    let mut ma = 0.0;
    for &(c, w) in row {
        let (pc, live) = clamp_prob(p[c]);
        ma -= w * pc.ln();
        if live {
            dp[c] -= coef.ma * w / pc;
        }
    }
    let mut sp = 0.0;
    for c in candidates.indices() {
        sp += p[c];
        dp[c] += coef.mu;
    }
    let mut inh = 0.0;
    for c in non_candidates.indices() {
        let (pc, live) = clamp_prob(p[c]);
        inh -= (1.0 - pc).ln();
        if live {
            dp[c] += coef.gamma / (1.0 - pc);
        }
    }
    ([ma, sp, inh], dp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mask(bits: &[u8]) -> LabelMask {
        LabelMask::from_bits(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn uniform_init() {
        let w = init_weights(&[mask(&[1, 1, 0]), mask(&[0, 0, 1, 0]), mask(&[1, 1, 1, 0, 0])]).unwrap();
        assert_eq!(w.row(0), &[(0, 0.5), (1, 0.5)]);
        assert_eq!(w.row(1), &[(2, 1.0)]);
        assert!((w.row(2).iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(init_weights(&[mask(&[1, 1])]).is_err());
        assert!(init_weights(&[mask(&[0, 0])]).is_err());
    }

    #[test]
    fn rho_schedule() {
        assert_eq!(rho(1, 100), 0.99);
        assert_eq!(rho(100, 100), 0.0);
        for t in 1..100 {
            assert!(rho(t + 1, 100) < rho(t, 100));
        }
    }

    #[test]
    fn update_examples() {
        let m = [mask(&[1, 1, 0])];
        let p = [array![0.5, 0.25, 0.25]];
        let w0 = init_weights(&m).unwrap();
        let full = update_weights(&w0, &p, &m, 100, 100).unwrap();
        assert!((full.row(0)[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((full.row(0)[1].1 - 1.0 / 3.0).abs() < 1e-15);

        let first = update_weights(&w0, &p, &m, 1, 100).unwrap();
        assert!((first.row(0)[0].1 - (0.99 * 0.5 + 0.01 * 2.0 / 3.0)).abs() < 1e-15);
        assert!((first.row(0)[0].1 - 0.50167).abs() < 1e-5);

        assert!(update_weights(&w0, &p, &m, 0, 100).is_err());
        assert!(update_weights(&w0, &p, &m, 101, 100).is_err());
    }

    #[test]
    fn loss_errors() {
        let m = [mask(&[1, 1, 0])];
        let w = init_weights(&m).unwrap();
        assert!(mapping_loss(&[array![0.5, 0.5]], &w, &m).is_err());
        assert!(cli_loss(&[array![0.5, 0.25, 0.25]], &w, &m, -1.0, 0.0).is_err());
        let other = init_weights(&[mask(&[0, 1, 1])]).unwrap();
        assert!(mapping_loss(&[array![0.5, 0.25, 0.25]], &other, &m).is_err());
    }

    #[test]
    fn degenerate_values() {
        let m = [mask(&[1, 0, 0])];
        let w = init_weights(&m).unwrap();
        let confident = [array![1.0 - 2e-7, 1e-7, 1e-7]];
        assert!(mapping_loss(&confident, &w, &m).unwrap() < 1e-6);
        assert!(ce_loss(&confident, &m).unwrap() < 1e-6);
        let non = [m[0].complement()];
        assert!(inhibition_loss(&confident, &non).unwrap() < 1e-6);

        let all_on_non = [array![0.0, 0.5, 0.5]];
        assert_eq!(sparsity_loss(&all_on_non, &m).unwrap(), 0.0);

        let saturated = [array![0.0, 1.0, 0.0]];
        let v = inhibition_loss(&saturated, &non).unwrap();
        assert!((v - (-(1e-7f64).ln() - (1.0 - 1e-7f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn variant_lattice() {
        assert_eq!(Variant::Cli.coefficients(2.0, 3.0), (2.0, 3.0));
        assert_eq!(Variant::MaSp.coefficients(2.0, 3.0), (2.0, 0.0));
        assert_eq!(Variant::MaIn.coefficients(2.0, 3.0), (0.0, 3.0));
        assert_eq!(Variant::Ma.coefficients(2.0, 3.0), (0.0, 0.0));
        assert_eq!(Variant::CeSpIn.coefficients(2.0, 3.0), (2.0, 3.0));
        assert_eq!(Variant::Ce.coefficients(2.0, 3.0), (0.0, 0.0));
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("ma+sp".parse::<Variant>().is_err());
    }

    #[test]
    fn bag_objective_matches_public_losses() {
        let m = mask(&[1, 0, 1, 0]);
        let non = m.complement();
        let p = array![0.4, 0.3, 0.2, 0.1];
        let row = vec![(0, 0.7), (2, 0.3)];
        let ([ma, sp, inh], _) = bag_objective(&p, &row, &m, &non, LossCoefficients::fused(1.0, 1.0));
        let weights = DisambiguationWeights { rows: vec![row] };
        let b = cli_loss(&[p], &weights, &[m], 1.0, 1.0).unwrap();
        assert!((b.ma - ma).abs() < 1e-15 && (b.sp - sp).abs() < 1e-15 && (b.in_ - inh).abs() < 1e-15);
    }
}
