//! Instance feature extractor `psi = psi2 . psi1`, the softmax classifier, and
//! model checkpoints.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{softmax, AttentionParams};
use crate::conv::{self, ConvParams};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_FORMAT: &str = "elimipl-ckpt-v1";
pub const DEFAULT_EMBED_DIM: usize = 128;

/// Which `psi1` front end to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Psi1Kind {
    #[default]
    Identity,
    Conv,
}

impl FromStr for Psi1Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Psi1Kind::Identity),
            "conv" => Ok(Psi1Kind::Conv),
            other => Err(Error::Config(format!("unknown feature extractor {other:?} (identity|conv)"))),
        }
    }
}

impl fmt::Display for Psi1Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Psi1Kind::Identity => "identity",
            Psi1Kind::Conv => "conv",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Psi1 {
    Identity,
    Conv(ConvParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub psi1: Psi1,
    /// `d' x l`
    pub psi2_w: Array2<f64>,
    pub psi2_b: Array1<f64>,
    pub attention: AttentionParams,
    /// `l x k`
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    input_dim: usize,
}

/// Embedded instances of one bag, `n_i x l`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeatures {
    pub h: Array2<f64>,
}

/// A named, flat view of one parameter tensor.
pub struct ParamBlock<'a> {
    pub name: &'static str,
    pub values: &'a mut [f64],
    /// Weight decay applies to weight matrices, not biases.
    pub decay: bool,
}

fn uniform_fill<R: Rng>(rng: &mut R, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl ModelParams {
    /// All-zero parameters with the given shapes.
    pub fn zeros(k: usize, d: usize, l: usize, a: usize, psi1: Psi1Kind) -> Result<Self> {
        if k < 2 || d == 0 || l == 0 || a == 0 {
            return Err(Error::Config(format!(
                "invalid model dimensions k={k} d={d} l={l} a={a} (need k>=2, d,l,a>=1)"
            )));
        }
        let (psi1, feat_dim) = match psi1 {
            Psi1Kind::Identity => (Psi1::Identity, d),
            Psi1Kind::Conv => {
                let side = conv::square_side(d)
                    .ok_or_else(|| Error::Config(format!("conv extractor needs a square image, d={d}")))?;
                let p = ConvParams::zeros(side)?;
                let out = p.output_dim();
                (Psi1::Conv(p), out)
            }
        };
        Ok(Self {
            psi1,
            psi2_w: Array2::zeros((feat_dim, l)),
            psi2_b: Array1::zeros(l),
            attention: AttentionParams::zeros(l, a),
            cls_w: Array2::zeros((l, k)),
            cls_b: Array1::zeros(k),
            input_dim: d,
        })
    }

    /// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init(k: usize, d: usize, l: usize, a: usize, psi1: Psi1Kind, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(k, d, l, a, psi1)?;
        let mut r = rng::stream(seed, rng::STREAM_INIT, 0);
        if let Psi1::Conv(c) = &mut p.psi1 {
            c.w1 = uniform_fill(&mut r, c.w1.dim(), c.w1.ncols());
            c.w2 = uniform_fill(&mut r, c.w2.dim(), c.w2.ncols());
        }
        p.psi2_w = uniform_fill(&mut r, p.psi2_w.dim(), p.psi2_w.nrows());
        p.attention.wt = uniform_fill(&mut r, (l, a), l);
        p.attention.ws = uniform_fill(&mut r, (l, a), l);
        p.attention.w = uniform_fill(&mut r, (1, a), a).into_shape_with_order(a).expect("row vector");
        p.cls_w = uniform_fill(&mut r, (l, k), l);
        Ok(p)
    }

    pub fn num_classes(&self) -> usize {
        self.cls_b.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.psi2_b.len()
    }

    pub fn attention_dim(&self) -> usize {
        self.attention.hidden_dim()
    }

    pub fn psi1_kind(&self) -> Psi1Kind {
        match self.psi1 {
            Psi1::Identity => Psi1Kind::Identity,
            Psi1::Conv(_) => Psi1Kind::Conv,
        }
    }

    /// Same shapes, all zeros. Used for gradients and momentum buffers.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.num_classes(),
            self.input_dim,
            self.embed_dim(),
            self.attention_dim(),
            self.psi1_kind(),
        )
        .expect("shapes of an existing model are valid")
    }

    pub fn blocks_mut(&mut self) -> Vec<ParamBlock<'_>> {
        fn blk<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a mut ndarray::Array<f64, D>,
            decay: bool,
        ) -> ParamBlock<'a> {
            ParamBlock {
                name,
                values: a.as_slice_mut().expect("parameters are contiguous"),
                decay,
            }
        }
        let mut out = Vec::with_capacity(13);
        if let Psi1::Conv(c) = &mut self.psi1 {
            out.push(blk("psi1.conv1.weight", &mut c.w1, true));
            out.push(blk("psi1.conv1.bias", &mut c.b1, false));
            out.push(blk("psi1.conv2.weight", &mut c.w2, true));
            out.push(blk("psi1.conv2.bias", &mut c.b2, false));
        }
        out.push(blk("psi2.weight", &mut self.psi2_w, true));
        out.push(blk("psi2.bias", &mut self.psi2_b, false));
        let att = &mut self.attention;
        out.push(blk("attention.w", &mut att.w, true));
        out.push(blk("attention.wt", &mut att.wt, true));
        out.push(blk("attention.ws", &mut att.ws, true));
        out.push(blk("attention.bt", &mut att.bt, false));
        out.push(blk("attention.bs", &mut att.bs, false));
        out.push(blk("classifier.weight", &mut self.cls_w, true));
        out.push(blk("classifier.bias", &mut self.cls_b, false));
        out
    }

    /// Read-only counterpart of [`ModelParams::blocks_mut`], same order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        fn blk<'a, D: ndarray::Dimension>(name: &'static str, a: &'a ndarray::Array<f64, D>) -> (&'static str, &'a [f64]) {
            (name, a.as_slice().expect("parameters are contiguous"))
        }
        let mut out = Vec::with_capacity(13);
        if let Psi1::Conv(c) = &self.psi1 {
            out.push(blk("psi1.conv1.weight", &c.w1));
            out.push(blk("psi1.conv1.bias", &c.b1));
            out.push(blk("psi1.conv2.weight", &c.w2));
            out.push(blk("psi1.conv2.bias", &c.b2));
        }
        out.push(blk("psi2.weight", &self.psi2_w));
        out.push(blk("psi2.bias", &self.psi2_b));
        out.push(blk("attention.w", &self.attention.w));
        out.push(blk("attention.wt", &self.attention.wt));
        out.push(blk("attention.ws", &self.attention.ws));
        out.push(blk("attention.bt", &self.attention.bt));
        out.push(blk("attention.bs", &self.attention.bs));
        out.push(blk("classifier.weight", &self.cls_w));
        out.push(blk("classifier.bias", &self.cls_b));
        out
    }

    /// Block names and shapes in checkpoint order.
    fn block_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut out = Vec::new();
        if let Psi1::Conv(c) = &self.psi1 {
            out.push(("psi1.conv1.weight", c.w1.shape().to_vec()));
            out.push(("psi1.conv1.bias", c.b1.shape().to_vec()));
            out.push(("psi1.conv2.weight", c.w2.shape().to_vec()));
            out.push(("psi1.conv2.bias", c.b2.shape().to_vec()));
        }
        out.push(("psi2.weight", self.psi2_w.shape().to_vec()));
        out.push(("psi2.bias", self.psi2_b.shape().to_vec()));
        out.push(("attention.w", self.attention.w.shape().to_vec()));
        out.push(("attention.wt", self.attention.wt.shape().to_vec()));
        out.push(("attention.ws", self.attention.ws.shape().to_vec()));
        out.push(("attention.bt", self.attention.bt.shape().to_vec()));
        out.push(("attention.bs", self.attention.bs.shape().to_vec()));
        out.push(("classifier.weight", self.cls_w.shape().to_vec()));
        out.push(("classifier.bias", self.cls_b.shape().to_vec()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::write(path, e))?;
        self.write_checkpoint(BufWriter::new(file)).map_err(|e| Error::write(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(BufReader::new(file))
    }

    /// Layout: the format tag line, one JSON header line with dimensions and
    /// block shapes, then every block as little-endian `f64` in header order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = CheckpointHeader {
            k: self.num_classes(),
            d: self.input_dim,
            l: self.embed_dim(),
            a: self.attention_dim(),
            psi1: self.psi1_kind(),
            blocks: self
                .block_shapes()
                .into_iter()
                .map(|(name, shape)| BlockHeader {
                    name: name.to_string(),
                    shape,
                })
                .collect(),
        };
        writeln!(out, "{CHECKPOINT_FORMAT}")?;
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (_, values) in self.blocks() {
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut tag = String::new();
        input.read_line(&mut tag).map_err(|e| bad(e.to_string()))?;
        if tag.trim_end() != CHECKPOINT_FORMAT {
            return Err(bad(format!("expected format tag {CHECKPOINT_FORMAT:?}, found {:?}", tag.trim_end())));
        }
        let mut line = String::new();
        input.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut params = Self::zeros(header.k, header.d, header.l, header.a, header.psi1)?;
        let expected = params.block_shapes();
        if expected.len() != header.blocks.len()
            || expected
                .iter()
                .zip(&header.blocks)
                .any(|((name, shape), b)| *name != b.name || *shape != b.shape)
        {
            return Err(bad("block layout does not match the declared dimensions".into()));
        }
        let mut buf = [0u8; 8];
        for block in params.blocks_mut() {
            for v in block.values.iter_mut() {
                input
                    .read_exact(&mut buf)
                    .map_err(|e| bad(format!("truncated block {}: {e}", block.name)))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest).map_err(|e| bad(e.to_string()))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    k: usize,
    d: usize,
    l: usize,
    a: usize,
    psi1: Psi1Kind,
    blocks: Vec<BlockHeader>,
}

/// Fresh parameters with attention width equal to the embedding width.
pub fn init_params(k: usize, d: usize, l: usize, psi1: Psi1Kind, seed: u64) -> Result<ModelParams> {
    ModelParams::init(k, d, l, l, psi1, seed)
}

/// Output of `psi1` for every instance row.
pub(crate) fn psi1_forward(
    x: ArrayView2<'_, f64>,
    params: &ModelParams,
) -> (Array2<f64>, Option<Vec<conv::ConvCache>>) {
    match &params.psi1 {
        Psi1::Identity => (x.to_owned(), None),
        Psi1::Conv(c) => {
            let out_dim = c.output_dim();
            let mut u = Array2::zeros((x.nrows(), out_dim));
            let mut caches = Vec::with_capacity(x.nrows());
            for (j, row) in x.outer_iter().enumerate() {
                let (feat, cache) = conv::forward_instance(row, c);
                u.row_mut(j).assign(&feat);
                caches.push(cache);
            }
            (u, Some(caches))
        }
    }
}

/// `psi2` pre-activation `u W + b`.
pub(crate) fn psi2_preactivation(u: ArrayView2<'_, f64>, params: &ModelParams) -> Array2<f64> {
    let mut pre = u.dot(&params.psi2_w);
    pre += &params.psi2_b;
    pre
}

/// `H = psi2(psi1(X))`, applied row by row.
pub fn extract_features(x: ArrayView2<'_, f64>, params: &ModelParams) -> Result<InstanceFeatures> {
    if x.ncols() != params.input_dim {
        return Err(Error::Shape(format!(
            "instances have dimension {}, model expects {}",
            x.ncols(),
            params.input_dim
        )));
    }
    let (u, _) = psi1_forward(x, params);
    let h = psi2_preactivation(u.view(), params).mapv(|v| v.max(0.0));
    Ok(InstanceFeatures { h })
}

pub fn logits(z: ArrayView1<'_, f64>, params: &ModelParams) -> Array1<f64> {
    params.cls_w.t().dot(&z) + &params.cls_b
}

/// Class probabilities `softmax(Wc^T z + bc)`.
pub fn classify(z: ArrayView1<'_, f64>, params: &ModelParams) -> Result<Array1<f64>> {
    if z.len() != params.embed_dim() {
        return Err(Error::Shape(format!(
            "bag feature has length {}, classifier expects {}",
            z.len(),
            params.embed_dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bag-level feature".into()));
    }
    Ok(softmax(logits(z, params).view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(5, 7, 4, Psi1Kind::Identity, 11).unwrap();
        let b = init_params(5, 7, 4, Psi1Kind::Identity, 11).unwrap();
        let c = init_params(5, 7, 4, Psi1Kind::Identity, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.psi2_b.iter().chain(&a.cls_b).chain(&a.attention.bt).chain(&a.attention.bs).all(|&v| v == 0.0));
        let bound = 1.0 / (7.0f64).sqrt();
        assert!(a.psi2_w.iter().all(|v| v.abs() < bound));
        assert_eq!(a.attention_dim(), 4);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_params(1, 3, 4, Psi1Kind::Identity, 0).is_err());
        assert!(init_params(3, 0, 4, Psi1Kind::Identity, 0).is_err());
        assert!(init_params(3, 3, 0, Psi1Kind::Identity, 0).is_err());
        assert!(init_params(3, 10, 4, Psi1Kind::Conv, 0).is_err());
    }

    #[test]
    fn classifier_at_init_is_a_distribution() {
        let p = init_params(4, 3, 6, Psi1Kind::Identity, 3).unwrap();
        let probs = classify(array![0.5, -1.0, 2.0, 0.0, 3.0, -0.2].view(), &p).unwrap();
        assert!((probs.sum() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn classify_examples() {
        let mut p = ModelParams::zeros(3, 2, 2, 2, Psi1Kind::Identity).unwrap();
        let probs = classify(array![1.0, 2.0].view(), &p).unwrap();
        assert!(probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut p2 = ModelParams::zeros(2, 1, 1, 1, Psi1Kind::Identity).unwrap();
        p2.cls_b = array![1.0, 0.0];
        let probs = classify(array![0.0].view(), &p2).unwrap();
        let e = std::f64::consts::E;
        assert!((probs[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((probs[0] - 0.7311).abs() < 1e-4 && (probs[1] - 0.2689).abs() < 1e-4);

        p.cls_w = array![[0.3, -0.7, 1.1], [2.0, 0.1, -0.4]];
        p.cls_b = array![0.2, 0.0, -0.5];
        let base = classify(array![0.4, -1.3].view(), &p).unwrap();
        p.cls_b += 17.0;
        let shifted = classify(array![0.4, -1.3].view(), &p).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(classify(array![f64::NAN, 0.0].view(), &p).is_err());
        assert!(classify(array![0.0].view(), &p).is_err());
    }

    #[test]
    fn identity_composition_reproduces_input() {
        let mut p = ModelParams::zeros(3, 2, 2, 2, Psi1Kind::Identity).unwrap();
        p.psi2_w = Array2::eye(2);
        let x = array![[0.5, 2.0], [3.0, 0.25]];
        assert_eq!(extract_features(x.view(), &p).unwrap().h, x);

        let single = extract_features(array![[1.0, 1.0]].view(), &p).unwrap();
        assert_eq!(single.h.dim(), (1, 2));
        assert!(extract_features(array![[1.0, 1.0, 1.0]].view(), &p).is_err());
    }

    #[test]
    fn features_are_row_local() {
        let p = init_params(3, 4, 5, Psi1Kind::Identity, 9).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4], [-1.0, 0.5, 2.0, 0.0], [3.0, -2.0, 1.0, 0.7]];
        let h = extract_features(x.view(), &p).unwrap().h;
        let perm = [2usize, 0, 1];
        let xp = x.select(Axis(0), &perm);
        let hp = extract_features(xp.view(), &p).unwrap().h;
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(hp.row(i), h.row(src));
        }
    }

    #[test]
    fn conv_features_have_expected_width() {
        let p = init_params(3, 100, 6, Psi1Kind::Conv, 1).unwrap();
        let x = Array2::from_shape_fn((2, 100), |(i, j)| ((i * 100 + j) as f64 * 0.37).sin());
        let h = extract_features(x.view(), &p).unwrap().h;
        assert_eq!(h.dim(), (2, 6));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        for kind in [Psi1Kind::Identity, Psi1Kind::Conv] {
            let p = init_params(3, 100, 4, kind, 5).unwrap();
            let mut first = Vec::new();
            p.write_checkpoint(&mut first).unwrap();
            let back = ModelParams::read_checkpoint(first.as_slice()).unwrap();
            assert_eq!(back, p);
            let mut second = Vec::new();
            back.write_checkpoint(&mut second).unwrap();
            assert_eq!(first, second);
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(ModelParams::read_checkpoint(&b"not-a-checkpoint\n"[..]).is_err());
        let p = init_params(3, 2, 2, Psi1Kind::Identity, 5).unwrap();
        let mut bytes = Vec::new();
        p.write_checkpoint(&mut bytes).unwrap();
        assert!(ModelParams::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        bytes.push(0);
        assert!(ModelParams::read_checkpoint(bytes.as_slice()).is_err());
    }
}
