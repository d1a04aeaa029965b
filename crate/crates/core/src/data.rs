//! Paired (visual, semantic) embedding sets: synthetic generation, the `MREB`
//! file format, stratified splits and seeded batching.
//!
//! The synthetic generator models clean text and noisy images. Each class has a
//! semantic centroid; semantic rows sit tightly around it, while visual rows see
//! the centroid through a fixed random linear map plus isotropic noise plus one
//! of a few distractor directions shared across all classes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{put_f32, put_u32, read_file, to_u32, write_file, Reader};
use crate::error::{Error, Result};
use crate::seed::{derive_indexed, rng_from};
use crate::tensor::Tensor;

pub const MREB_MAGIC: &[u8; 4] = b"MREB";
pub const MREB_VERSION: u32 = 1;

/// Labeled embedding pairs, stored row-major in `f32` as on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedEmbeddingSet {
    visual: Vec<f32>,
    semantic: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    visual_dim: usize,
    semantic_dim: usize,
}

impl PairedEmbeddingSet {
    pub fn new(
        visual: Vec<f32>,
        semantic: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
        visual_dim: usize,
        semantic_dim: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if visual.len() != n * visual_dim || semantic.len() != n * semantic_dim {
            return Err(Error::DimMismatch(format!(
                "{n} labels but {} visual / {} semantic values for dims {visual_dim}/{semantic_dim}",
                visual.len(),
                semantic.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(PairedEmbeddingSet {
            visual,
            semantic,
            labels,
            classes,
            visual_dim,
            semantic_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn visual_row(&self, i: usize) -> &[f32] {
        &self.visual[i * self.visual_dim..(i + 1) * self.visual_dim]
    }

    pub fn semantic_row(&self, i: usize) -> &[f32] {
        &self.semantic[i * self.semantic_dim..(i + 1) * self.semantic_dim]
    }

    /// Visual rows at `indices` as an `f64` matrix.
    pub fn visual(&self, indices: &[usize]) -> Tensor {
        gather(&self.visual, self.visual_dim, indices)
    }

    pub fn semantic(&self, indices: &[usize]) -> Tensor {
        gather(&self.semantic, self.semantic_dim, indices)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> PairedEmbeddingSet {
        let mut visual = Vec::with_capacity(indices.len() * self.visual_dim);
        let mut semantic = Vec::with_capacity(indices.len() * self.semantic_dim);
        for &i in indices {
            visual.extend_from_slice(self.visual_row(i));
            semantic.extend_from_slice(self.semantic_row(i));
        }
        PairedEmbeddingSet {
            visual,
            semantic,
            labels: self.labels_at(indices),
            classes: self.classes,
            visual_dim: self.visual_dim,
            semantic_dim: self.semantic_dim,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Errors unless every class occurs at least once.
    pub fn ensure_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(c) => Err(Error::invalid(format!("class {c} has no rows"))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(
            24 + self.len() * 4 * (self.visual_dim + self.semantic_dim + 1),
        );
        out.extend_from_slice(MREB_MAGIC);
        put_u32(&mut out, MREB_VERSION);
        put_u32(&mut out, to_u32(self.len(), "N")?);
        put_u32(&mut out, to_u32(self.visual_dim, "d_v")?);
        put_u32(&mut out, to_u32(self.semantic_dim, "d_s")?);
        put_u32(&mut out, to_u32(self.classes, "C")?);
        for i in 0..self.len() {
            for &v in self.visual_row(i) {
                put_f32(&mut out, v);
            }
            for &v in self.semantic_row(i) {
                put_f32(&mut out, v);
            }
            put_u32(&mut out, self.labels[i] as u32);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "embedding file");
        r.magic(MREB_MAGIC)?;
        let version = r.u32()?;
        if version != MREB_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let dv = r.u32()? as usize;
        let ds = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let record = 4 * (dv + ds + 1);
        let expected = n.checked_mul(record).ok_or_else(|| {
            Error::DimMismatch(format!("header N={n}, d_v={dv}, d_s={ds} overflows"))
        })?;
        if r.remaining() < expected {
            return Err(Error::Truncated(format!(
                "embedding file: {n} records of {record} bytes need {expected}, {} present",
                r.remaining()
            )));
        }
        if r.remaining() > expected {
            return Err(Error::DimMismatch(format!(
                "embedding file has {} bytes after {n} records; header dims disagree with payload",
                r.remaining() - expected
            )));
        }
        let mut visual = Vec::with_capacity(n * dv);
        let mut semantic = Vec::with_capacity(n * ds);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..dv {
                visual.push(r.f32()?);
            }
            for _ in 0..ds {
                semantic.push(r.f32()?);
            }
            labels.push(r.u32()? as usize);
        }
        Self::new(visual, semantic, labels, classes, dv, ds)
    }
}

fn gather(data: &[f32], dim: usize, indices: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        out.extend(data[i * dim..(i + 1) * dim].iter().map(|&v| v as f64));
    }
    Tensor::new(vec![indices.len(), dim], out).expect("sized above")
}

pub fn write_embeddings(set: &PairedEmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &set.to_bytes()?)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<PairedEmbeddingSet> {
    PairedEmbeddingSet::from_bytes(&read_file(path.as_ref())?)
}

/// Loads and checks the file's dims against the ones a model expects.
pub fn load_embeddings_with_dims(
    path: impl AsRef<Path>,
    visual_dim: usize,
    semantic_dim: usize,
) -> Result<PairedEmbeddingSet> {
    let set = load_embeddings(path)?;
    if set.visual_dim != visual_dim || set.semantic_dim != semantic_dim {
        return Err(Error::DimMismatch(format!(
            "file has d_v={}, d_s={}; expected d_v={visual_dim}, d_s={semantic_dim}",
            set.visual_dim, set.semantic_dim
        )));
    }
    Ok(set)
}

/// How class centroids reach visual space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VisualMap {
    /// `gain * G / sqrt(d_s)` with `G` iid standard normal, drawn from the seed.
    Random { gain: f64 },
    /// Requires `d_v == d_s`.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub semantic_noise: f64,
    pub visual_noise: f64,
    pub distractors: usize,
    pub distractor_strength: f64,
    pub visual_map: VisualMap,
    pub seed: u64,
}

pub const DEFAULT_VISUAL_GAIN: f64 = 0.125;
const CENTROID_SCALE: f64 = 3.0;

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            per_class: 200,
            visual_dim: 64,
            semantic_dim: 64,
            semantic_noise: 0.1,
            visual_noise: 0.8,
            distractors: 5,
            distractor_strength: 1.0,
            visual_map: VisualMap::Random {
                gain: DEFAULT_VISUAL_GAIN,
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classes", self.classes),
            ("per_class", self.per_class),
            ("visual_dim", self.visual_dim),
            ("semantic_dim", self.semantic_dim),
            ("distractors", self.distractors),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("semantic_noise", self.semantic_noise),
            ("visual_noise", self.visual_noise),
            ("distractor_strength", self.distractor_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        match self.visual_map {
            VisualMap::Identity if self.visual_dim != self.semantic_dim => Err(Error::Config(
                "identity visual map needs visual_dim == semantic_dim".into(),
            )),
            VisualMap::Random { gain } if !gain.is_finite() => {
                Err(Error::Config(format!("visual gain must be finite, got {gain}")))
            }
            _ => Ok(()),
        }
    }
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Class-major synthetic pairs: exactly `per_class` rows for each class.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<PairedEmbeddingSet> {
    cfg.validate()?;
    let (c, n, dv, ds) = (cfg.classes, cfg.per_class, cfg.visual_dim, cfg.semantic_dim);
    let mut rng = rng_from(cfg.seed);

    let centroids: Vec<f64> = normals(&mut rng, c * ds)
        .into_iter()
        .map(|v| CENTROID_SCALE * v)
        .collect();
    // visual_map: [dv x ds]
    let map: Vec<f64> = match cfg.visual_map {
        VisualMap::Random { gain } => {
            let s = gain / (ds as f64).sqrt();
            normals(&mut rng, dv * ds).into_iter().map(|v| s * v).collect()
        }
        VisualMap::Identity => {
            let mut m = vec![0.0; dv * ds];
            for i in 0..dv {
                m[i * ds + i] = 1.0;
            }
            m
        }
    };
    let distractors = normals(&mut rng, cfg.distractors * dv);

    let mapped: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let mu = &centroids[k * ds..(k + 1) * ds];
            (0..dv)
                .map(|i| map[i * ds..(i + 1) * ds].iter().zip(mu).map(|(a, m)| a * m).sum())
                .collect()
        })
        .collect();

    let mut visual = Vec::with_capacity(c * n * dv);
    let mut semantic = Vec::with_capacity(c * n * ds);
    let mut labels = Vec::with_capacity(c * n);
    for k in 0..c {
        let mu = &centroids[k * ds..(k + 1) * ds];
        for _ in 0..n {
            for &m in mu {
                let e: f64 = rng.sample(StandardNormal);
                semantic.push((m + cfg.semantic_noise * e) as f32);
            }
            let which = rng.random_range(0..cfg.distractors);
            let d = &distractors[which * dv..(which + 1) * dv];
            for (i, &m) in mapped[k].iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                visual.push((m + cfg.visual_noise * e + cfg.distractor_strength * d[i]) as f32);
            }
            labels.push(k);
        }
    }
    PairedEmbeddingSet::new(visual, semantic, labels, c, dv, ds)
}

/// Per-class mean of `rows` (`[N x d]`); classes without rows get zeros.
pub fn class_means(rows: &Tensor, labels: &[usize], classes: usize) -> Tensor {
    let d = rows.cols();
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for (r, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(rows.row(r)) {
            *s += v;
        }
    }
    for (k, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            for s in &mut sums[k * d..(k + 1) * d] {
                *s /= cnt as f64;
            }
        }
    }
    Tensor::new(vec![classes, d], sums).expect("sized above")
}

/// Fraction of rows whose nearest centroid (Euclidean) is their own class.
/// Ties go to the lower class index.
pub fn nearest_centroid_accuracy(rows: &Tensor, labels: &[usize], centroids: &Tensor) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            let row = rows.row(*r);
            let mut best = (f64::INFINITY, 0);
            for k in 0..centroids.rows() {
                let d: f64 = row
                    .iter()
                    .zip(centroids.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1 == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Stratified split: per class, a seeded shuffle with `round(train_fraction * count)`
/// rows (at least one) going to training. Both index lists are sorted.
pub fn stratified_split(
    labels: &[usize],
    classes: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!(
            "train fraction must be in [0, 1], got {train_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if idx.is_empty() {
            continue;
        }
        let mut rng = rng_from(derive_indexed(seed, "split", k as u64));
        idx.shuffle(&mut rng);
        let n_train = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Seeded full-batch partition of `0..n` for one epoch. The short tail is dropped.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    Ok(BatchIterator::new(n, batch_size, seed, epoch)?.collect())
}

#[derive(Debug, Clone)]
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must be in 1..={n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(derive_indexed(seed, "epoch", epoch)));
        Ok(BatchIterator {
            order,
            batch_size,
            cursor: 0,
        })
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            per_class: 4,
            visual_dim: 5,
            semantic_dim: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_identity_makes_modalities_equal() {
        let cfg = SynthConfig {
            semantic_noise: 0.0,
            visual_noise: 0.0,
            distractor_strength: 0.0,
            visual_map: VisualMap::Identity,
            visual_dim: 8,
            semantic_dim: 8,
            ..small()
        };
        let set = generate_synthetic(&cfg).unwrap();
        for i in 0..set.len() {
            assert_eq!(set.visual_row(i), set.semantic_row(i));
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![4, 4, 4]);
        let c = generate_synthetic(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { classes: 0, ..small() }.validate().is_err());
        assert!(SynthConfig { distractors: 0, ..small() }.validate().is_err());
        assert!(SynthConfig { visual_noise: -1.0, ..small() }.validate().is_err());
        assert!(SynthConfig { visual_map: VisualMap::Identity, ..small() }.validate().is_err());
    }

    #[test]
    fn mreb_round_trip_and_errors() {
        let set = generate_synthetic(&small()).unwrap();
        let bytes = set.to_bytes().unwrap();
        assert_eq!(PairedEmbeddingSet::from_bytes(&bytes).unwrap(), set);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let err = PairedEmbeddingSet::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("bad magic"));

        let err = PairedEmbeddingSet::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(PairedEmbeddingSet::from_bytes(&long), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn empty_set_round_trips() {
        let empty = PairedEmbeddingSet::new(vec![], vec![], vec![], 3, 5, 4).unwrap();
        let bytes = empty.to_bytes().unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(PairedEmbeddingSet::from_bytes(&bytes).unwrap(), empty);
    }

    #[test]
    fn label_out_of_range_in_file() {
        let set = PairedEmbeddingSet::new(vec![0.0; 2], vec![0.0; 1], vec![1], 2, 2, 1).unwrap();
        let mut bytes = set.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            PairedEmbeddingSet::from_bytes(&bytes),
            Err(Error::LabelOutOfRange { label: 7, classes: 2 })
        ));
    }

    #[test]
    fn batches_partition_and_drop_last() {
        let b = batches(4, 2, 9, 0).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);

        assert_eq!(batches(5, 2, 9, 0).unwrap().len(), 2);
        assert_eq!(batches(5, 2, 9, 3).unwrap(), batches(5, 2, 9, 3).unwrap());
        assert!(batches(3, 4, 9, 0).is_err());
        assert!(batches(3, 0, 9, 0).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let set = generate_synthetic(&SynthConfig {
            per_class: 10,
            ..small()
        })
        .unwrap();
        let (train, test) = stratified_split(set.labels(), 3, 0.8, 4).unwrap();
        assert_eq!(train.len(), 24);
        assert_eq!(test.len(), 6);
        let tr = set.subset(&train);
        assert_eq!(tr.class_counts(), vec![8, 8, 8]);
        let (train2, _) = stratified_split(set.labels(), 3, 0.8, 4).unwrap();
        assert_eq!(train, train2);
        // a singleton class still lands in training
        let (tr1, te1) = stratified_split(&[0, 1, 1, 1, 1, 1], 2, 0.8, 0).unwrap();
        assert!(tr1.contains(&0));
        assert!(!te1.contains(&0));
    }
}
