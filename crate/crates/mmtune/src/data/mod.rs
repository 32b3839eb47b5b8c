//! Synthetic paired-modality data with controllable per-modality difficulty,
//! stratified splitting, and bit-exact checkpoint persistence.
//!
//! Every sample pairs a spectrogram-shaped tensor (modality A) with an
//! image-shaped tensor (modality V) under one label. Class templates are
//! orthogonal (disjoint support) and each modality's difficulty is set by its
//! signal-to-noise ratio: template amplitude over unit Gaussian noise.

pub mod checkpoint;
pub mod export;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// The two input modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "v")]
    V,
}

impl Modality {
    pub fn rng_tag(self) -> u64 {
        match self {
            Modality::A => tag::MODALITY_A,
            Modality::V => tag::MODALITY_V,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::A => "a",
            Modality::V => "v",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::V,
            Modality::V => Modality::A,
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "a" | "A" => Ok(Modality::A),
            "v" | "V" => Ok(Modality::V),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-class sample counts for the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Generator settings for a synthetic paired-modality dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: SplitCounts,
    /// 1 x F x T spectrogram-like shape.
    pub shape_a: [usize; 3],
    /// 1 x H x W image-like shape.
    pub shape_v: [usize; 3],
    /// Template amplitude over noise standard deviation, per modality.
    pub snr_a: f64,
    pub snr_v: f64,
    /// Signal pixels per class template (stripe length for A, patch area for V).
    #[serde(default = "default_support")]
    pub support_a: usize,
    #[serde(default = "default_support")]
    pub support_v: usize,
    pub seed: u64,
}

fn default_support() -> usize {
    4
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("synthetic: n_classes must be >= 2".into()));
        }
        let c = self.samples_per_class;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return Err(Error::Config(
                "synthetic: every split needs at least 1 sample per class".into(),
            ));
        }
        if self.snr_a <= 0.0 || self.snr_v <= 0.0 {
            return Err(Error::Config("synthetic: snr values must be > 0".into()));
        }
        if self.shape_a[0] != 1 || self.shape_v[0] != 1 {
            return Err(Error::Config("synthetic: single-channel shapes expected".into()));
        }
        if self.support_a == 0 || self.support_v == 0 {
            return Err(Error::Config("synthetic: template support must be >= 1".into()));
        }
        // stripe templates need one frequency band per class and room for the run
        if self.shape_a[1] < self.n_classes {
            return Err(Error::Config(format!(
                "synthetic: shape_a frequency dim {} < n_classes {}",
                self.shape_a[1], self.n_classes
            )));
        }
        if self.support_a > self.shape_a[2] {
            return Err(Error::Config("synthetic: support_a exceeds time dim".into()));
        }
        // patch templates live on a grid of g*g cells
        let g = (self.n_classes as f64).sqrt().ceil() as usize;
        let cell_h = self.shape_v[1] / g;
        let cell_w = self.shape_v[2] / g;
        let side = (self.support_v as f64).sqrt().ceil() as usize;
        if cell_h == 0 || cell_w == 0 || side > cell_h || side > cell_w {
            return Err(Error::Config(format!(
                "synthetic: support_v {} does not fit a {g}x{g} grid of {}x{} cells",
                self.support_v, cell_h, cell_w
            )));
        }
        Ok(())
    }

    pub fn totals(&self) -> (usize, usize, usize) {
        let c = self.samples_per_class;
        (
            c.train * self.n_classes,
            c.val * self.n_classes,
            c.test * self.n_classes,
        )
    }
}

/// One paired sample. Ids are globally unique and stable across the dataset.
#[derive(Debug, Clone)]
pub struct MultiModalSample {
    pub id: u64,
    pub label: usize,
    pub tensor_a: Tensor,
    pub tensor_v: Tensor,
}

impl MultiModalSample {
    pub fn tensor(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::A => &self.tensor_a,
            Modality::V => &self.tensor_v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub train: Vec<MultiModalSample>,
    pub val: Vec<MultiModalSample>,
    pub test: Vec<MultiModalSample>,
}

impl SyntheticDataset {
    pub fn split(&self, name: &str) -> Result<&[MultiModalSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::contract(format!("unknown split {other:?}"))),
        }
    }
}

/// Support pixels (row-major indices into H x W) of class `class`'s template.
fn template_support(spec: &SyntheticSpec, modality: Modality, class: usize) -> Vec<usize> {
    match modality {
        Modality::A => {
            // one frequency band per class, short run along time in the band center
            let (f_dim, t_dim) = (spec.shape_a[1], spec.shape_a[2]);
            let mut perm: Vec<usize> = (0..spec.n_classes).collect();
            let mut r = rng::stream(spec.seed, &[tag::SLOT_PERMUTATION, Modality::A.rng_tag()]);
            permute(&mut perm, &mut r);
            let band = perm[class];
            let band_h = f_dim / spec.n_classes;
            let row = band * band_h + band_h / 2;
            let start = (t_dim - spec.support_a) / 2;
            (0..spec.support_a).map(|i| row * t_dim + start + i).collect()
        }
        Modality::V => {
            // one grid cell per class, compact patch at the cell center
            let (h, w) = (spec.shape_v[1], spec.shape_v[2]);
            let g = (spec.n_classes as f64).sqrt().ceil() as usize;
            let mut perm: Vec<usize> = (0..g * g).collect();
            let mut r = rng::stream(spec.seed, &[tag::SLOT_PERMUTATION, Modality::V.rng_tag()]);
            permute(&mut perm, &mut r);
            let cell = perm[class];
            let (cell_h, cell_w) = (h / g, w / g);
            let (cy, cx) = (cell / g, cell % g);
            let side = (spec.support_v as f64).sqrt().ceil() as usize;
            let top = cy * cell_h + (cell_h - side) / 2;
            let left = cx * cell_w + (cell_w - side) / 2;
            let mut px = Vec::with_capacity(spec.support_v);
            'outer: for dy in 0..side {
                for dx in 0..side {
                    if px.len() == spec.support_v {
                        break 'outer;
                    }
                    px.push((top + dy) * w + left + dx);
                }
            }
            px
        }
    }
}

fn permute(xs: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// The template tensor of one class for one modality (amplitude 1 support).
pub fn class_template(spec: &SyntheticSpec, modality: Modality, class: usize) -> Tensor {
    let shape = match modality {
        Modality::A => spec.shape_a,
        Modality::V => spec.shape_v,
    };
    let mut t = Tensor::zeros(&shape);
    for idx in template_support(spec, modality, class) {
        t.data_mut()[idx] = 1.0;
    }
    t
}

/// One modality of one sample. Depends only on `(seed, sample_id, label,
/// modality)`, never on generation order.
pub fn sample_tensor(spec: &SyntheticSpec, id: u64, label: usize, modality: Modality) -> Tensor {
    let shape = match modality {
        Modality::A => spec.shape_a,
        Modality::V => spec.shape_v,
    };
    let snr = match modality {
        Modality::A => spec.snr_a,
        Modality::V => spec.snr_v,
    };
    let mut t = Tensor::zeros(&shape);
    let mut r = rng::stream(spec.seed, &[tag::NOISE, id, modality.rng_tag()]);
    for v in t.data_mut() {
        *v = rng::normal(&mut r);
    }
    for idx in template_support(spec, modality, label) {
        t.data_mut()[idx] += snr;
    }
    t
}

/// Generate the full dataset: class-balanced splits, stable ids assigned in
/// (train, val, test) x class x index order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut next_id = 0u64;
    let mut make_split = |count: usize| -> Vec<MultiModalSample> {
        let mut samples = Vec::with_capacity(count * spec.n_classes);
        for class in 0..spec.n_classes {
            for _ in 0..count {
                let id = next_id;
                next_id += 1;
                samples.push(MultiModalSample {
                    id,
                    label: class,
                    tensor_a: sample_tensor(spec, id, class, Modality::A),
                    tensor_v: sample_tensor(spec, id, class, Modality::V),
                });
            }
        }
        samples
    };
    let train = make_split(spec.samples_per_class.train);
    let val = make_split(spec.samples_per_class.val);
    let test = make_split(spec.samples_per_class.test);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// Stratified split of a flat sample list into train/val/test index views.
///
/// Fractions must sum to 1; per class, counts are apportioned by largest
/// remainder so every split is within one sample of its requested share.
pub fn split_dataset(
    samples: &[MultiModalSample],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::contract("split fractions must be non-negative"));
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();

    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut out: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class, mut idxs) in by_class {
        if idxs.len() < active {
            return Err(Error::contract(format!(
                "class {class} has {} samples, fewer than the {active} non-empty splits",
                idxs.len()
            )));
        }
        let mut r = rng::stream(seed, &[tag::SPLIT, class as u64]);
        permute(&mut idxs, &mut r);
        let n = idxs.len();
        let mut counts = [0usize; 3];
        let mut remainders: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0;
        for (si, &f) in fractions.iter().enumerate() {
            let exact = f * n as f64;
            counts[si] = exact.floor() as usize;
            assigned += counts[si];
            remainders.push((si, exact - exact.floor()));
        }
        // largest remainder first; ties toward the earlier split
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (si, _) in remainders.iter().take(n - assigned) {
            counts[*si] += 1;
        }
        let mut cursor = 0;
        for (si, &c) in counts.iter().enumerate() {
            out[si].extend_from_slice(&idxs[cursor..cursor + c]);
            cursor += c;
        }
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}
