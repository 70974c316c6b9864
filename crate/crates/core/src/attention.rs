//! Scaled additive attention pooling.
//!
//! Each embedded instance `h` gets a gated score
//! `xi(h) = w . (tanh(Wt^T h + bt) * sigm(Ws^T h + bs))`; scores are normalized
//! with a softmax at temperature `sqrt(l)` (the embedding width), and the bag
//! representation is the attention-weighted sum of the instance embeddings.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// Output projection, length `a`.
    pub w: Array1<f64>,
    /// `l x a`
    pub wt: Array2<f64>,
    /// `l x a`
    pub ws: Array2<f64>,
    pub bt: Array1<f64>,
    pub bs: Array1<f64>,
}

impl AttentionParams {
    pub fn zeros(l: usize, a: usize) -> Self {
        Self {
            w: Array1::zeros(a),
            wt: Array2::zeros((l, a)),
            ws: Array2::zeros((l, a)),
            bt: Array1::zeros(a),
            bs: Array1::zeros(a),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.wt.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (l, a) = self.wt.dim();
        if self.ws.dim() != (l, a) || self.w.len() != a || self.bt.len() != a || self.bs.len() != a {
            return Err(Error::Shape(format!(
                "attention parameters inconsistent: wt {:?}, ws {:?}, w {}, bt {}, bs {}",
                self.wt.dim(),
                self.ws.dim(),
                self.w.len(),
                self.bt.len(),
                self.bs.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// Normalized attention score per instance.
    pub scores: Array1<f64>,
    /// Bag-level representation.
    pub z: Array1<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// Gated score of a single embedded instance.
pub fn gated_score(h: ArrayView1<'_, f64>, params: &AttentionParams) -> Result<f64> {
    params.check_shapes()?;
    if h.len() != params.embed_dim() {
        return Err(Error::Shape(format!(
            "instance embedding has length {}, attention expects {}",
            h.len(),
            params.embed_dim()
        )));
    }
    let t = (params.wt.t().dot(&h) + &params.bt).mapv(f64::tanh);
    let s = (params.ws.t().dot(&h) + &params.bs).mapv(sigmoid);
    Ok(params.w.dot(&(t * s)))
}

/// Intermediate activations of the gated scoring for a whole bag.
#[derive(Clone, Debug)]
pub(crate) struct GateActivations {
    /// `tanh` branch, `n x a`.
    pub tanh: Array2<f64>,
    /// `sigm` branch, `n x a`.
    pub sigm: Array2<f64>,
    /// Raw scores, length `n`.
    pub scores: Array1<f64>,
}

pub(crate) fn gate_forward(h: ArrayView2<'_, f64>, params: &AttentionParams) -> GateActivations {
    let mut tanh = h.dot(&params.wt);
    tanh += &params.bt;
    tanh.mapv_inplace(f64::tanh);
    let mut sigm = h.dot(&params.ws);
    sigm += &params.bs;
    sigm.mapv_inplace(sigmoid);
    let scores = (&tanh * &sigm).dot(&params.w);
    GateActivations { tanh, sigm, scores }
}

/// Gated scores for every row of `h` (`n x l`).
pub fn gated_scores(h: ArrayView2<'_, f64>, params: &AttentionParams) -> Result<Array1<f64>> {
    params.check_shapes()?;
    if h.ncols() != params.embed_dim() {
        return Err(Error::Shape(format!(
            "instance embeddings have width {}, attention expects {}",
            h.ncols(),
            params.embed_dim()
        )));
    }
    Ok(gate_forward(h, params).scores)
}

/// Softmax of `scores / sqrt(l)`.
pub fn attention_weights(scores: ArrayView1<'_, f64>, l: usize) -> Array1<f64> {
    let scale = (l as f64).sqrt();
    softmax(scores.mapv(|s| s / scale).view())
}

/// Weighted sum of instance rows.
pub fn aggregate(h: ArrayView2<'_, f64>, weights: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if h.nrows() != weights.len() {
        return Err(Error::Shape(format!(
            "{} attention weights for {} instances",
            weights.len(),
            h.nrows()
        )));
    }
    Ok(h.t().dot(&weights))
}

/// Full attention pass over a bag of embeddings.
pub fn attend(h: ArrayView2<'_, f64>, params: &AttentionParams) -> Result<AttentionOutput> {
    let raw = gated_scores(h, params)?;
    let scores = attention_weights(raw.view(), h.ncols());
    let z = aggregate(h, scores.view())?;
    Ok(AttentionOutput { scores, z })
}

/// Column-wise extrema of `h`, used for the convex-hull check.
pub fn row_bounds(h: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let lo = h.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b));
    let hi = h.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
    (lo, hi)
}
