//! Synthetic multi-instance partial-label datasets.
//!
//! Each class owns an isotropic Gaussian around a centroid. A bag draws a hidden
//! true label `y`, a candidate set made of `y` plus `r` distinct false positives,
//! at least one instance from class `y`, and fills the rest with instances from
//! the non-candidate classes only. False-positive classes never contribute
//! instances. The generating class of every instance is kept as provenance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Bag, LabelMask, MiplDataset};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub name: String,
    pub k: usize,
    pub d: usize,
    pub m: usize,
    /// False positives per bag, so `|S_i| = r + 1`.
    pub r: usize,
    pub bag_size: (usize, usize),
    /// Fraction of each bag drawn from the true class (floored, at least one).
    pub pos_fraction: f64,
    /// Minimum pairwise distance between class centroids.
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// Extra classes outside the label space. When nonzero, negative
    /// instances come from these instead of from the bag's non-candidate
    /// labels; their provenance ids are `k..k + background_classes`.
    pub background_classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            k: 5,
            d: 10,
            m: 500,
            r: 1,
            bag_size: (35, 48),
            pos_fraction: 0.5,
            cluster_separation: 8.0,
            noise_sigma: 1.0,
            background_classes: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 3 {
            return bad(format!("need k >= 3 so that 1 <= r <= k-2 is possible, got k={}", self.k));
        }
        if self.r < 1 || self.r > self.k - 2 {
            return bad(format!("r must lie in [1, k-2] = [1, {}], got {}", self.k - 2, self.r));
        }
        if self.d == 0 || self.m == 0 {
            return bad(format!("need d >= 1 and m >= 1 (d={}, m={})", self.d, self.m));
        }
        let (lo, hi) = self.bag_size;
        if lo < 1 || hi < lo {
            return bad(format!("bag size range [{lo}, {hi}] invalid"));
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction <= 1.0) {
            return bad(format!("pos_fraction must lie in (0, 1], got {}", self.pos_fraction));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad(format!("cluster separation must be > 0, got {}", self.cluster_separation));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be > 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Positive instance count for a bag of `n` instances.
    pub fn positives(&self, n: usize) -> usize {
        ((self.pos_fraction * n as f64).floor() as usize).clamp(1, n)
    }
}

/// Generating class of every instance, per bag.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Provenance {
    pub bags: Vec<ProvenanceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceRecord {
    pub bag_id: String,
    pub classes: Vec<usize>,
}

impl Provenance {
    pub fn by_bag(&self) -> HashMap<&str, &[usize]> {
        self.bags.iter().map(|r| (r.bag_id.as_str(), r.classes.as_slice())).collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.bags {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::write(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::write(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bags = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            bags.push(rec);
        }
        Ok(Self { bags })
    }
}

/// Sidecar path: `dir/name.jsonl` -> `dir/name.provenance.jsonl`.
pub fn provenance_path(dataset_path: &Path) -> PathBuf {
    let stem = dataset_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    dataset_path.with_file_name(format!("{stem}.provenance.jsonl"))
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: MiplDataset,
    pub provenance: Provenance,
    /// `(k + background_classes) x d`
    pub centroids: Array2<f64>,
}

fn gaussian_vector<R: Rng>(rng: &mut R, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

/// Class means with pairwise distance at least `separation`.
///
/// With `k <= d` the centroids are a random orthonormal frame scaled by
/// `separation / sqrt(2)` (every pair exactly `separation` apart). Otherwise
/// random Gaussian directions are rescaled so the closest pair sits at
/// `separation`.
pub fn class_centroids(k: usize, d: usize, separation: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, "centroids", 0);
    let mut c = Array2::zeros((k, d));
    if k <= d {
        let mut basis: Vec<Array1<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v = gaussian_vector(&mut rng, d);
            for b in &basis {
                let proj = v.dot(b);
                v.scaled_add(-proj, b);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                basis.push(v / norm);
            }
        }
        let scale = separation / 2f64.sqrt();
        for (i, b) in basis.iter().enumerate() {
            c.row_mut(i).assign(&(b * scale));
        }
    } else {
        for i in 0..k {
            c.row_mut(i).assign(&gaussian_vector(&mut rng, d));
        }
        let min = min_pairwise_distance(&c);
        c *= separation / min;
    }
    c
}

pub fn min_pairwise_distance(points: &Array2<f64>) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..points.nrows() {
        for j in i + 1..points.nrows() {
            let diff = &points.row(i) - &points.row(j);
            min = min.min(diff.dot(&diff).sqrt());
        }
    }
    min
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let centroids = class_centroids(cfg.k + cfg.background_classes, cfg.d, cfg.cluster_separation, cfg.seed);
    let background: Vec<usize> = (cfg.k..cfg.k + cfg.background_classes).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let width = cfg.m.to_string().len();

    let mut bags = Vec::with_capacity(cfg.m);
    let mut provenance = Vec::with_capacity(cfg.m);
    for i in 0..cfg.m {
        let mut rng = rng::stream(cfg.seed, rng::STREAM_DATAGEN, i as u64);
        let y = rng.gen_range(0..cfg.k);
        let others: Vec<usize> = (0..cfg.k).filter(|&c| c != y).collect();
        let mut candidates: Vec<usize> = others.choose_multiple(&mut rng, cfg.r).copied().collect();
        candidates.push(y);
        candidates.sort_unstable();
        let mask = LabelMask::from_indices(cfg.k, &candidates)?;
        let negatives: Vec<usize> = if background.is_empty() {
            mask.complement().indices().collect()
        } else {
            background.clone()
        };

        let n = rng.gen_range(cfg.bag_size.0..=cfg.bag_size.1);
        let n_pos = cfg.positives(n);
        let mut classes: Vec<usize> = std::iter::repeat_n(y, n_pos)
            .chain((n_pos..n).map(|_| *negatives.choose(&mut rng).expect("r <= k-2 leaves a negative source")))
            .collect();
        classes.shuffle(&mut rng);

        let mut x = Array2::zeros((n, cfg.d));
        for (j, &c) in classes.iter().enumerate() {
            for (v, &mu) in x.row_mut(j).iter_mut().zip(centroids.row(c)) {
                *v = mu + noise.sample(&mut rng);
            }
        }
        let bag_id = format!("{}-{:0width$}", cfg.name, i);
        bags.push(Bag::new(bag_id.clone(), x, mask, Some(y))?);
        provenance.push(ProvenanceRecord { bag_id, classes });
    }
    let dataset = MiplDataset::new(cfg.name.clone(), cfg.k, cfg.d, Some(cfg.r), bags)?;
    Ok(SynthOutput {
        dataset,
        provenance: Provenance { bags: provenance },
        centroids,
    })
}
