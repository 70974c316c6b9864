//! Bags, label masks, the `mipl-v1` JSON Lines format, splitting, and the
//! Mean / MaxMin bag reductions used by single-instance learners.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_FORMAT: &str = "mipl-v1";

/// Boolean membership vector over the label space `0..k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    bits: Vec<bool>,
}

impl LabelMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(k: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; k];
        for &c in indices {
            if c >= k {
                return Err(Error::Dataset(format!("label {c} outside label space of size {k}")));
            }
            bits[c] = true;
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Size of the label space.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of labels in the set.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.bits.get(label).copied().unwrap_or(false)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn complement(&self) -> LabelMask {
        complement(self)
    }

    /// At least one member and at least one non-member.
    pub fn is_proper(&self) -> bool {
        let c = self.count();
        c >= 1 && c < self.len()
    }
}

pub fn complement(mask: &LabelMask) -> LabelMask {
    LabelMask {
        bits: mask.bits.iter().map(|b| !b).collect(),
    }
}

/// One multi-instance sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    bag_id: String,
    instances: Array2<f64>,
    candidates: LabelMask,
    non_candidates: LabelMask,
    true_label: Option<usize>,
}

impl Bag {
    pub fn new(
        bag_id: impl Into<String>,
        instances: Array2<f64>,
        candidates: LabelMask,
        true_label: Option<usize>,
    ) -> Result<Self> {
        let bag_id = bag_id.into();
        let invalid = |msg: &str| Error::InvalidBag {
            bag_id: bag_id.clone(),
            msg: msg.to_string(),
        };
        if instances.nrows() == 0 {
            return Err(invalid("bag has no instances"));
        }
        if instances.ncols() == 0 {
            return Err(invalid("instances have zero dimension"));
        }
        if instances.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite instance feature"));
        }
        match candidates.count() {
            0 => return Err(invalid("empty candidate set")),
            c if c == candidates.len() => return Err(invalid("no non-candidate labels")),
            _ => {}
        }
        if let Some(y) = true_label {
            if !candidates.contains(y) {
                return Err(invalid("true label not in candidate set"));
            }
        }
        let instances = instances.as_standard_layout().into_owned();
        let non_candidates = candidates.complement();
        Ok(Self {
            bag_id,
            instances,
            candidates,
            non_candidates,
            true_label,
        })
    }

    pub fn bag_id(&self) -> &str {
        &self.bag_id
    }

    pub fn instances(&self) -> ArrayView2<'_, f64> {
        self.instances.view()
    }

    pub fn num_instances(&self) -> usize {
        self.instances.nrows()
    }

    pub fn dim(&self) -> usize {
        self.instances.ncols()
    }

    pub fn candidates(&self) -> &LabelMask {
        &self.candidates
    }

    pub fn non_candidates(&self) -> &LabelMask {
        &self.non_candidates
    }

    /// Hidden ground truth. Only evaluation code reads this.
    pub fn true_label(&self) -> Option<usize> {
        self.true_label
    }

    /// What the losses are allowed to see: features and label masks.
    pub fn view(&self) -> BagView<'_> {
        BagView {
            instances: self.instances.view(),
            candidates: &self.candidates,
            non_candidates: &self.non_candidates,
        }
    }
}

/// Training-facing view of a bag. Carries no ground truth.
#[derive(Clone, Copy, Debug)]
pub struct BagView<'a> {
    pub instances: ArrayView2<'a, f64>,
    pub candidates: &'a LabelMask,
    pub non_candidates: &'a LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiplDataset {
    name: String,
    k: usize,
    d: usize,
    r: Option<usize>,
    bags: Vec<Bag>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    k: usize,
    d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    bag_id: String,
    instances: Vec<Vec<f64>>,
    candidate_labels: Vec<usize>,
    true_label: Option<usize>,
}

impl MiplDataset {
    pub fn new(name: impl Into<String>, k: usize, d: usize, r: Option<usize>, bags: Vec<Bag>) -> Result<Self> {
        if k < 2 {
            return Err(Error::Dataset(format!("label space needs k >= 2, got {k}")));
        }
        if d == 0 {
            return Err(Error::Dataset("feature dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(bags.len());
        for bag in &bags {
            if bag.dim() != d {
                return Err(Error::Dataset(format!(
                    "bag {} has dimension {}, expected {d}",
                    bag.bag_id(),
                    bag.dim()
                )));
            }
            if bag.candidates().len() != k {
                return Err(Error::Dataset(format!(
                    "bag {} has candidate mask of length {}, expected {k}",
                    bag.bag_id(),
                    bag.candidates().len()
                )));
            }
            if !seen.insert(bag.bag_id()) {
                return Err(Error::Dataset(format!("duplicate bag_id {}", bag.bag_id())));
            }
        }
        Ok(Self {
            name: name.into(),
            k,
            d,
            r,
            bags,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// False-positive count per bag, when known from generation.
    pub fn r(&self) -> Option<usize> {
        self.r
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn candidate_masks(&self) -> Vec<LabelMask> {
        self.bags.iter().map(|b| b.candidates().clone()).collect()
    }

    pub fn has_true_labels(&self) -> bool {
        self.bags.iter().all(|b| b.true_label().is_some())
    }

    fn subset(&self, indices: &[usize], suffix: &str) -> MiplDataset {
        MiplDataset {
            name: format!("{}{suffix}", self.name),
            k: self.k,
            d: self.d,
            r: self.r,
            bags: indices.iter().map(|&i| self.bags[i].clone()).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let fmt_err = |line: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            line,
            msg,
        };

        let header: Header = loop {
            match lines.next() {
                None => return Err(fmt_err(1, "missing header line".into())),
                Some((i, line)) => {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| fmt_err(i + 1, format!("bad header: {e}")))?;
                }
            }
        };
        if header.format != DATASET_FORMAT {
            return Err(fmt_err(1, format!("unsupported format {:?}, expected {DATASET_FORMAT:?}", header.format)));
        }

        let mut bags = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let rec: Record = serde_json::from_str(&line).map_err(|e| fmt_err(lineno, format!("malformed record: {e}")))?;
            let bag = record_to_bag(rec, header.k, header.d).map_err(|e| fmt_err(lineno, e.to_string()))?;
            bags.push(bag);
        }
        let name = header.name.unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        MiplDataset::new(name, header.k, header.d, header.r, bags)
    }

    fn write_records<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = Header {
            format: DATASET_FORMAT.to_string(),
            k: self.k,
            d: self.d,
            name: Some(self.name.clone()),
            r: self.r,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for bag in &self.bags {
            let rec = Record {
                bag_id: bag.bag_id.clone(),
                instances: bag.instances.outer_iter().map(|row| row.to_vec()).collect(),
                candidate_labels: bag.candidates.indices().collect(),
                true_label: bag.true_label,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        self.write_records(out).map_err(|e| Error::write("<writer>", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::write(path, e))?;
        self.write_records(BufWriter::new(file)).map_err(|e| Error::write(path, e))
    }

    /// Seeded random partition into `(train, test)` with `round(ratio * m)`
    /// training bags. Both halves keep the original file order.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(MiplDataset, MiplDataset)> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
        }
        if self.bags.is_empty() {
            return Err(Error::Dataset("cannot split an empty dataset".into()));
        }
        let m = self.bags.len();
        let n_train = (ratio * m as f64).round() as usize;
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT, 0));
        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut test: Vec<usize> = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train, "-train"), self.subset(&test, "-test")))
    }
}

fn record_to_bag(rec: Record, k: usize, d: usize) -> Result<Bag> {
    let invalid = |msg: String| Error::InvalidBag {
        bag_id: rec.bag_id.clone(),
        msg,
    };
    if rec.instances.is_empty() {
        return Err(invalid("bag has no instances".into()));
    }
    if let Some(row) = rec.instances.iter().find(|row| row.len() != d) {
        return Err(invalid(format!("instance of dimension {}, expected {d}", row.len())));
    }
    if rec.candidate_labels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("candidate_labels must be strictly increasing".into()));
    }
    if let Some(&c) = rec.candidate_labels.iter().find(|&&c| c >= k) {
        return Err(invalid(format!("candidate label {c} outside [0, {k})")));
    }
    if let Some(y) = rec.true_label {
        if y >= k {
            return Err(invalid(format!("true label {y} outside [0, {k})")));
        }
    }
    let n = rec.instances.len();
    let flat: Vec<f64> = rec.instances.iter().flatten().copied().collect();
    let instances = Array2::from_shape_vec((n, d), flat).map_err(|e| invalid(e.to_string()))?;
    let mask = LabelMask::from_indices(k, &rec.candidate_labels)?;
    Bag::new(rec.bag_id.clone(), instances, mask, rec.true_label)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<MiplDataset> {
    MiplDataset::load(path)
}

/// Mean strategy: componentwise average of the instance rows.
pub fn reduce_bag_mean(bag: &Bag) -> Array1<f64> {
    bag.instances
        .mean_axis(Axis(0))
        .expect("bags hold at least one instance")
}

/// MaxMin strategy: `[max per dimension || min per dimension]`.
pub fn reduce_bag_maxmin(bag: &Bag) -> Array1<f64> {
    let d = bag.dim();
    let mut out = Array1::zeros(2 * d);
    for (j, col) in bag.instances.axis_iter(Axis(1)).enumerate() {
        out[j] = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        out[d + j] = col.fold(f64::INFINITY, |a, &b| a.min(b));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn bag(id: &str, x: Array2<f64>, cands: &[usize], k: usize, y: Option<usize>) -> Bag {
        Bag::new(id, x, LabelMask::from_indices(k, cands).unwrap(), y).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = r#"{"format":"mipl-v1","k":3,"d":2}"#;

    #[test]
    fn complement_of_worked_example() {
        let s = LabelMask::from_bits([1, 1, 0, 0, 1, 0, 1].iter().map(|&b| b == 1).collect());
        let expected: Vec<bool> = [0, 0, 1, 1, 0, 1, 0].iter().map(|&b| b == 1).collect();
        assert_eq!(complement(&s).bits(), expected.as_slice());
        assert_eq!(complement(&s).count(), 7 - s.count());

        let s = LabelMask::from_bits(vec![true, false, false]);
        assert_eq!(complement(&s).bits(), &[false, true, true]);
    }

    proptest! {
        #[test]
        fn complement_is_involution(bits in proptest::collection::vec(any::<bool>(), 1..32)) {
            let s = LabelMask::from_bits(bits);
            let c = complement(&s);
            prop_assert_eq!(complement(&c), s.clone());
            prop_assert_eq!(s.count() + c.count(), s.len());
            for i in 0..s.len() {
                prop_assert_ne!(s.contains(i), c.contains(i));
            }
        }

        #[test]
        fn mean_lies_between_extrema(rows in 1usize..8, cols in 1usize..5, seed in any::<u64>()) {
            use rand::Rng;
            let mut r = rng::stream(seed, "test", 0);
            let x = Array2::from_shape_fn((rows, cols), |_| r.gen_range(-10.0..10.0));
            let b = bag("b", x, &[0], 2, None);
            let mean = reduce_bag_mean(&b);
            let mm = reduce_bag_maxmin(&b);
            prop_assert_eq!(mm.len(), 2 * cols);
            for j in 0..cols {
                prop_assert!(mean[j] <= mm[j] + 1e-12 && mean[j] >= mm[cols + j] - 1e-12);
            }
        }
    }

    #[test]
    fn load_two_records() {
        let f = write_tmp(&format!(
            "{HEADER}\n{}\n{}\n",
            r#"{"bag_id":"a","instances":[[0.0,1.0],[2.0,3.0]],"candidate_labels":[0,2],"true_label":2}"#,
            r#"{"bag_id":"b","instances":[[1.5,-1.0]],"candidate_labels":[1],"true_label":null}"#,
        ));
        let ds = load_dataset(f.path()).unwrap();
        assert_eq!((ds.len(), ds.k(), ds.d()), (2, 3, 2));
        assert_eq!(ds.bags()[0].candidates().bits(), &[true, false, true]);
        assert_eq!(ds.bags()[0].non_candidates().bits(), &[false, true, false]);
        assert_eq!(ds.bags()[0].true_label(), Some(2));
        assert_eq!(ds.bags()[1].true_label(), None);
        assert_eq!(ds.bags()[1].num_instances(), 1);
    }

    #[test]
    fn load_rejects_all_candidate_mask() {
        let f = write_tmp(&format!(
            "{HEADER}\n{}\n",
            r#"{"bag_id":"a","instances":[[0.0,1.0]],"candidate_labels":[0,1,2],"true_label":0}"#
        ));
        let err = load_dataset(f.path()).unwrap_err().to_string();
        assert!(err.contains("no non-candidate labels"), "{err}");
    }

    #[test]
    fn load_rejects_empty_candidate_set() {
        let f = write_tmp(&format!(
            "{HEADER}\n{}\n",
            r#"{"bag_id":"a","instances":[[0.0,1.0]],"candidate_labels":[],"true_label":null}"#
        ));
        let err = load_dataset(f.path()).unwrap_err().to_string();
        assert!(err.contains("empty candidate set"), "{err}");
    }

    #[test]
    fn load_rejects_true_label_outside_candidates() {
        let f = write_tmp(&format!(
            "{HEADER}\n{}\n",
            r#"{"bag_id":"a","instances":[[0.0,1.0]],"candidate_labels":[0],"true_label":1}"#
        ));
        let err = load_dataset(f.path()).unwrap_err().to_string();
        assert!(err.contains("true label not in candidate set"), "{err}");
    }

    #[test]
    fn load_rejects_inconsistent_dimension() {
        let f = write_tmp(&format!(
            "{HEADER}\n{}\n",
            r#"{"bag_id":"a","instances":[[0.0,1.0],[1.0]],"candidate_labels":[0],"true_label":null}"#
        ));
        let err = load_dataset(f.path()).unwrap_err().to_string();
        assert!(err.contains("dimension"), "{err}");
        assert!(err.contains(":2:"), "error should carry the line number: {err}");
    }

    #[test]
    fn load_rejects_malformed_and_missing() {
        let f = write_tmp(&format!("{HEADER}\n{{\"bag_id\": 3}}\n"));
        assert!(matches!(load_dataset(f.path()), Err(Error::Format { line: 2, .. })));

        let f = write_tmp(r#"{"format":"mipl-v0","k":3,"d":2}"#);
        assert!(matches!(load_dataset(f.path()), Err(Error::Format { .. })));

        match load_dataset("/nonexistent/nowhere.jsonl") {
            Err(Error::NotFound(p)) => assert!(p.ends_with("nowhere.jsonl")),
            other => panic!("expected NotFound, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_duplicate_ids() {
        let rec = r#"{"bag_id":"a","instances":[[0.0,1.0]],"candidate_labels":[0],"true_label":null}"#;
        let f = write_tmp(&format!("{HEADER}\n{rec}\n{rec}\n"));
        let err = load_dataset(f.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bags = vec![
            bag("x", array![[0.1, -2.5], [1e-9, 3.0]], &[0, 1], 3, Some(1)),
            bag("y", array![[0.3333333333333333, 7.0]], &[2], 3, None),
        ];
        let ds = MiplDataset::new("toy", 3, 2, Some(1), bags).unwrap();
        let mut first = Vec::new();
        ds.write_to(&mut first).unwrap();
        let f = write_tmp(std::str::from_utf8(&first).unwrap());
        let back = load_dataset(f.path()).unwrap();
        assert_eq!(back, ds);
        let mut second = Vec::new();
        back.write_to(&mut second).unwrap();
        assert_eq!(first, second);
    }

    fn numbered(m: usize) -> MiplDataset {
        let bags = (0..m)
            .map(|i| bag(&format!("b{i}"), array![[i as f64]], &[0], 2, Some(0)))
            .collect();
        MiplDataset::new("n", 2, 1, None, bags).unwrap()
    }

    #[test]
    fn split_seven_three() {
        let ds = numbered(10);
        let (train, test) = ds.split(0.7, 1).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));

        let (train2, test2) = ds.split(0.7, 1).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);

        let mut ids: Vec<&str> = train.bags().iter().chain(test.bags()).map(|b| b.bag_id()).collect();
        ids.sort_unstable();
        let mut all: Vec<&str> = ds.bags().iter().map(|b| b.bag_id()).collect();
        all.sort_unstable();
        assert_eq!(ids, all);
    }

    #[test]
    fn split_seeds_differ_and_ratio_checked() {
        let ds = numbered(40);
        let a = ds.split(0.7, 1).unwrap().0;
        let b = ds.split(0.7, 2).unwrap().0;
        assert_ne!(a, b);
        assert!(ds.split(0.0, 1).is_err());
        assert!(ds.split(1.0, 1).is_err());
        assert!(ds.split(f64::NAN, 1).is_err());
    }

    #[test]
    fn reductions() {
        let b = bag("m", array![[0.0, 0.0], [2.0, 4.0]], &[0], 2, None);
        assert_eq!(reduce_bag_mean(&b), array![1.0, 2.0]);

        let b = bag("mm", array![[0.0, 1.0], [2.0, -1.0]], &[0], 2, None);
        // brute force per-dimension extrema
        let rows = [[0.0, 1.0], [2.0, -1.0]];
        let expected: Vec<f64> = (0..2)
            .map(|j| rows.iter().map(|r| r[j]).fold(f64::MIN, f64::max))
            .chain((0..2).map(|j| rows.iter().map(|r| r[j]).fold(f64::MAX, f64::min)))
            .collect();
        assert_eq!(reduce_bag_maxmin(&b).to_vec(), expected);
        assert_eq!(expected, vec![2.0, 1.0, 0.0, -1.0]);

        let single = bag("s", array![[3.0, -4.0]], &[0], 2, None);
        assert_eq!(reduce_bag_mean(&single), array![3.0, -4.0]);
        assert_eq!(reduce_bag_maxmin(&single), array![3.0, -4.0, 3.0, -4.0]);

        let constant = bag("c", array![[5.0, 5.0], [5.0, 5.0], [5.0, 5.0]], &[0], 2, None);
        assert_eq!(reduce_bag_mean(&constant), array![5.0, 5.0]);
    }
}
