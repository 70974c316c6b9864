//! Mini-batch training: per batch, forward every bag, refresh its
//! disambiguation weights from the current predictions, evaluate the fused loss,
//! backpropagate, and take one SGD step. The learning rate follows a cosine
//! schedule over epochs.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::data::{BagView, MiplDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::losses::{bag_objective, rho, DisambiguationWeights, LossBreakdown, LossCoefficients, Variant, SIMPLEX_TOL};
use crate::model::{ModelParams, Psi1Kind, DEFAULT_EMBED_DIM};
use crate::network::{backward, forward, BagForward};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mu: f64,
    pub gamma: f64,
    /// Embedding width `l`.
    pub embed_dim: usize,
    /// Attention hidden width; `None` means equal to `embed_dim`.
    pub attention_dim: Option<usize>,
    pub psi1: Psi1Kind,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            mu: 0.1,
            gamma: 0.5,
            embed_dim: DEFAULT_EMBED_DIM,
            attention_dim: None,
            psi1: Psi1Kind::Identity,
            variant: Variant::Cli,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.mu >= 0.0 && self.gamma >= 0.0 && self.mu.is_finite() && self.gamma.is_finite()) {
            return bad(format!("mu and gamma must be >= 0 (mu={}, gamma={})", self.mu, self.gamma));
        }
        if self.embed_dim == 0 || self.attention_dim == Some(0) {
            return bad("embedding and attention widths must be >= 1".into());
        }
        Ok(())
    }

    pub fn attention_width(&self) -> usize {
        self.attention_dim.unwrap_or(self.embed_dim)
    }

    /// Coefficients actually applied, after the variant switches terms off.
    pub fn coefficients(&self) -> LossCoefficients {
        let (mu, gamma) = self.variant.coefficients(self.mu, self.gamma);
        LossCoefficients::fused(mu, gamma)
    }

    /// Fresh model for `dataset` with this config's shapes, seeded from `seed`.
    pub fn init_model(&self, dataset: &MiplDataset, seed: u64) -> Result<ModelParams> {
        ModelParams::init(dataset.k(), dataset.d(), self.embed_dim, self.attention_width(), self.psi1, seed)
    }
}

/// `lr0 * (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(t: usize, epochs: usize, lr0: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (PI * t as f64 / epochs as f64).cos())
}

/// One SGD update with L2 weight decay on weight matrices and heavy-ball momentum:
/// `g' = g + wd p`, `v <- momentum v + g'`, `p <- p - lr v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    velocity: &mut ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    if let Some((name, _)) = grad_blocks.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    for ((block, (_, g)), vel) in params.blocks_mut().into_iter().zip(grad_blocks).zip(velocity.blocks_mut()) {
        let wd = if block.decay { weight_decay } else { 0.0 };
        for ((p, &g), v) in block.values.iter_mut().zip(g).zip(vel.values.iter_mut()) {
            let g = g + wd * *p;
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Sum over the batch of `[ma, sp, in]` terms, with the gradient of the batch-mean
/// weighted loss accumulated into `grads`.
pub(crate) fn batch_backward(
    params: &ModelParams,
    forwards: &[BagForward],
    views: &[BagView<'_>],
    weights: &DisambiguationWeights,
    rows: &[usize],
    coef: LossCoefficients,
    grads: &mut ModelParams,
) -> [f64; 3] {
    let scale = 1.0 / forwards.len() as f64;
    let mut sums = [0.0; 3];
    for ((fwd, view), &i) in forwards.iter().zip(views).zip(rows) {
        let (terms, mut dp) = bag_objective(&fwd.probs, weights.row(i), view.candidates, view.non_candidates, coef);
        for (s, t) in sums.iter_mut().zip(terms) {
            *s += t;
        }
        dp *= scale;
        backward(fwd, dp.view(), params, grads);
    }
    sums
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Means over the bags seen this epoch.
    pub loss: LossBreakdown,
    pub train: Option<Evaluation>,
    pub test: Option<Evaluation>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub params: ModelParams,
    pub weights: DisambiguationWeights,
    pub optimizer_steps: usize,
    /// Largest deviation of any bag's weight sum from 1 observed after any update.
    pub max_simplex_deviation: f64,
    pub elapsed: Duration,
    pub seed: u64,
}

pub const LOG_HEADER: &str = "epoch,lr,loss_total,loss_ma,loss_sp,loss_in,train_acc,test_acc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainReport {
    pub fn write_log<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{LOG_HEADER}")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.loss.total,
                e.loss.ma,
                e.loss.sp,
                e.loss.in_,
                opt(e.train.as_ref().map(|x| x.accuracy)),
                opt(e.test.as_ref().map(|x| x.accuracy)),
            )?;
        }
        out.flush()
    }

    pub fn save_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::write(path, e))?;
        self.write_log(std::io::BufWriter::new(file)).map_err(|e| Error::write(path, e))
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

pub fn train(dataset: &MiplDataset, model: ModelParams, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_eval(dataset, model, cfg, None)
}

/// Trains on `dataset`; when `test` is given it is evaluated after every epoch.
/// Training-set accuracy is recorded when the training bags carry ground truth.
pub fn train_with_eval(
    dataset: &MiplDataset,
    mut params: ModelParams,
    cfg: &TrainConfig,
    test: Option<&MiplDataset>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if params.input_dim() != dataset.d() || params.num_classes() != dataset.k() {
        return Err(Error::Shape(format!(
            "model expects d={} k={}, dataset has d={} k={}",
            params.input_dim(),
            params.num_classes(),
            dataset.d(),
            dataset.k()
        )));
    }
    let start = Instant::now();
    let masks = dataset.candidate_masks();
    let mut weights = DisambiguationWeights::uniform(&masks)?;
    let views: Vec<BagView<'_>> = dataset.bags().iter().map(|b| b.view()).collect();
    let coef = cfg.coefficients();
    let frozen = cfg.variant.freezes_weights();
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let track_train = dataset.has_true_labels();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    let mut max_dev = weights.max_simplex_deviation();

    for t in 1..=cfg.epochs {
        let lr = cosine_lr(t - 1, cfg.epochs, cfg.lr0);
        let rho_t = rho(t, cfg.epochs);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, rng::STREAM_SHUFFLE, t as u64));

        let mut sums = [0.0; 3];
        for batch in order.chunks(cfg.batch_size) {
            let batch_views: Vec<BagView<'_>> = batch.iter().map(|&i| views[i]).collect();
            let forwards: Vec<BagForward> = batch_views.iter().map(|v| forward(v.instances, &params)).collect();

            if !frozen {
                for (fwd, &i) in forwards.iter().zip(batch) {
                    weights.update_row(i, &fwd.probs, rho_t)?;
                }
                let dev = weights.select(batch).max_simplex_deviation();
                debug_assert!(dev <= SIMPLEX_TOL, "weight simplex violated by {dev}");
                max_dev = max_dev.max(dev);
            }

            let mut grads = params.zeros_like();
            let batch_sums = batch_backward(&params, &forwards, &batch_views, &weights, batch, coef, &mut grads);
            let batch_total = coef.ma * batch_sums[0] + coef.mu * batch_sums[1] + coef.gamma * batch_sums[2];
            if !batch_total.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {t}")));
            }
            for (s, b) in sums.iter_mut().zip(batch_sums) {
                *s += b;
            }
            sgd_step(&mut params, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            steps += 1;
        }

        let m = dataset.len() as f64;
        let loss = LossBreakdown::new(sums[0] / m, sums[1] / m, sums[2] / m, coef.mu, coef.gamma);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {t}")));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {t}")));
        }
        let train_eval = if track_train { Some(evaluate(&params, dataset)?) } else { None };
        let test_eval = match test {
            Some(ds) if !ds.is_empty() && ds.has_true_labels() => Some(evaluate(&params, ds)?),
            _ => None,
        };
        records.push(EpochRecord {
            epoch: t,
            lr,
            loss,
            train: train_eval,
            test: test_eval,
        });
    }

    Ok(TrainReport {
        epochs: records,
        params,
        weights,
        optimizer_steps: steps,
        max_simplex_deviation: max_dev,
        elapsed: start.elapsed(),
        seed: cfg.seed,
    })
}
