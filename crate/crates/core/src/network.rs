//! Forward pass with cached activations and the matching reverse pass for one bag.
//!
//! The chain is `X -> psi1 -> affine+ReLU (H) -> gated scores -> scaled softmax (a)
//! -> z = a^T H -> logits -> softmax (P)`. The backward pass takes `dL/dP` and
//! accumulates `dL/dtheta` into a gradient buffer shaped like the model.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::attention::{attention_weights, gate_forward, softmax, GateActivations};
use crate::conv::{self, ConvCache};
use crate::model::{logits, psi1_forward, psi2_preactivation, ModelParams, Psi1};

#[derive(Clone, Debug)]
pub struct BagForward {
    /// `psi1` output, `n x d'`.
    u: Array2<f64>,
    conv: Option<Vec<ConvCache>>,
    /// Embedded instances, `n x l`.
    pub h: Array2<f64>,
    gate: GateActivations,
    /// Normalized attention scores.
    pub attention: Array1<f64>,
    pub z: Array1<f64>,
    pub probs: Array1<f64>,
}

impl BagForward {
    pub fn raw_scores(&self) -> &Array1<f64> {
        &self.gate.scores
    }
}

/// Smallest `|pre-activation|` of the embedding ReLU: the distance to its kink.
pub(crate) fn relu_margin(x: ArrayView2<'_, f64>, params: &ModelParams) -> f64 {
    let (u, _) = psi1_forward(x, params);
    psi2_preactivation(u.view(), params).fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

pub fn forward(x: ArrayView2<'_, f64>, params: &ModelParams) -> BagForward {
    let (u, conv) = psi1_forward(x, params);
    let h = psi2_preactivation(u.view(), params).mapv(|v| v.max(0.0));
    let gate = gate_forward(h.view(), &params.attention);
    let attention = attention_weights(gate.scores.view(), params.embed_dim());
    let z = h.t().dot(&attention);
    let probs = softmax(logits(z.view(), params).view());
    BagForward {
        u,
        conv,
        h,
        gate,
        attention,
        z,
        probs,
    }
}

/// Accumulates into `grads` the gradient of a scalar loss whose derivative with
/// respect to this bag's class probabilities is `dprobs`.
pub fn backward(fwd: &BagForward, dprobs: ArrayView1<'_, f64>, params: &ModelParams, grads: &mut ModelParams) {
    let p = &fwd.probs;
    // softmax Jacobian-vector product
    let inner = p.dot(&dprobs);
    let dlogits = Array1::from_shape_fn(p.len(), |c| p[c] * (dprobs[c] - inner));

    // classifier
    grads.cls_b += &dlogits;
    grads
        .cls_w
        .zip_mut_with(&outer(fwd.z.view(), dlogits.view()), |g, &v| *g += v);
    let dz = params.cls_w.dot(&dlogits);

    // z = H^T a
    let a = &fwd.attention;
    let mut dh = outer(a.view(), dz.view());
    let da = fwd.h.dot(&dz);

    // a = softmax(xi / sqrt(l))
    let inv_scale = 1.0 / (params.embed_dim() as f64).sqrt();
    let inner = a.dot(&da);
    let dxi = Array1::from_shape_fn(a.len(), |j| inv_scale * a[j] * (da[j] - inner));

    // xi = (T * S) w
    let att = &params.attention;
    let gate = &fwd.gate;
    let gated = &gate.tanh * &gate.sigm;
    grads.attention.w += &gated.t().dot(&dxi);
    let dgated = outer(dxi.view(), att.w.view());
    let mut dt_pre = &dgated * &gate.sigm;
    dt_pre.zip_mut_with(&gate.tanh, |d, &t| *d *= 1.0 - t * t);
    let mut ds_pre = &dgated * &gate.tanh;
    ds_pre.zip_mut_with(&gate.sigm, |d, &s| *d *= s * (1.0 - s));

    grads.attention.wt += &fwd.h.t().dot(&dt_pre);
    grads.attention.bt += &dt_pre.sum_axis(Axis(0));
    grads.attention.ws += &fwd.h.t().dot(&ds_pre);
    grads.attention.bs += &ds_pre.sum_axis(Axis(0));
    dh += &dt_pre.dot(&att.wt.t());
    dh += &ds_pre.dot(&att.ws.t());

    // H = relu(U W2 + b2); the cached H is zero exactly where the ReLU is inactive
    dh.zip_mut_with(&fwd.h, |d, &hv| {
        if hv <= 0.0 {
            *d = 0.0
        }
    });
    grads.psi2_w += &fwd.u.t().dot(&dh);
    grads.psi2_b += &dh.sum_axis(Axis(0));

    if let (Psi1::Conv(cp), Psi1::Conv(cg), Some(caches)) = (&params.psi1, &mut grads.psi1, &fwd.conv) {
        let du = dh.dot(&params.psi2_w.t());
        for (row, cache) in du.outer_iter().zip(caches) {
            conv::backward_instance(row, cache, cp, cg);
        }
    }
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}
