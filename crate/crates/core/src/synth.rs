//! Synthetic multi-label feature maps with planted label contexts.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cbsf::{FeatureFile, FeatureHeader, FeatureRecord};
use crate::encoders::ClassDictionary;
use crate::error::{CbsaError, Result};
use crate::rng::{gaussian, gaussian_vec, indexed_stream, substream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub k_true: usize,
    pub d: usize,
    pub height: usize,
    pub width: usize,
    /// Labels of each planted context. Empty means contiguous, near-equal blocks.
    pub labels_per_context: Vec<Vec<usize>>,
    pub positives_range: [usize; 2],
    pub cross_context_leak: f64,
    pub noise_weak: f64,
    pub noise_strong: f64,
    pub mask_fraction: f64,
    /// Noise on class-name embeddings relative to the image prototypes.
    pub name_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 12,
            k_true: 3,
            d: 32,
            height: 4,
            width: 4,
            labels_per_context: Vec::new(),
            positives_range: [1, 3],
            cross_context_leak: 0.03,
            noise_weak: 0.05,
            noise_strong: 0.2,
            mask_fraction: 0.25,
            name_noise: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    /// The explicit blocks, or contiguous blocks when none are given.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        if !self.labels_per_context.is_empty() {
            return self.labels_per_context.clone();
        }
        let k = self.k_true.max(1);
        (0..k)
            .map(|b| (b * self.n_classes / k..(b + 1) * self.n_classes / k).collect())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CbsaError::Spec(m));
        if self.n_classes == 0 || self.d == 0 || self.hw() == 0 {
            return fail("C, d, H and W must be positive".into());
        }
        if self.k_true == 0 || self.k_true > self.n_classes {
            return fail(format!("K_true={} must lie in 1..={}", self.k_true, self.n_classes));
        }
        let blocks = self.blocks();
        if blocks.len() != self.k_true {
            return fail(format!("{} label blocks for K_true={}", blocks.len(), self.k_true));
        }
        let mut seen = vec![false; self.n_classes];
        for &l in blocks.iter().flatten() {
            if l >= self.n_classes || seen[l] {
                return fail(format!("label {l} is out of range or repeated in labels_per_context"));
            }
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return fail("labels_per_context must cover every label".into());
        }
        let [lo, hi] = self.positives_range;
        let smallest = blocks.iter().map(Vec::len).min().unwrap_or(0);
        if lo == 0 || lo > hi {
            return fail(format!("positives_range [{lo}, {hi}] must satisfy 1 <= min <= max"));
        }
        if hi > smallest {
            return fail(format!("positives_range max {hi} exceeds the smallest context block ({smallest} labels)"));
        }
        if hi > self.hw() {
            return fail(format!("positives_range max {hi} exceeds the {} feature rows", self.hw()));
        }
        if !(0.0..1.0).contains(&self.cross_context_leak) {
            return fail("cross_context_leak must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return fail("mask_fraction must lie in [0, 1)".into());
        }
        if !(self.noise_weak >= 0.0 && self.noise_weak < self.noise_strong) {
            return fail(format!(
                "need 0 <= noise_weak < noise_strong, got {} and {}",
                self.noise_weak, self.noise_strong
            ));
        }
        if self.name_noise < 0.0 {
            return fail("name_noise must be non-negative".into());
        }
        Ok(())
    }
}

/// Fixed, seed-determined parts of the synthetic world: class prototypes,
/// class-name embeddings and one background vector per context.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct World {
    pub dictionary: ClassDictionary,
    pub backgrounds: Tensor,
}

impl World {
    pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(seed, "world");
        let dictionary = ClassDictionary::generate(spec.n_classes, spec.d, spec.name_noise, &mut rng);
        let rows: Vec<Vec<f64>> = (0..spec.k_true)
            .map(|_| unit(gaussian_vec(&mut rng, spec.d, 1.0)))
            .collect();
        Ok(Self {
            dictionary,
            backgrounds: Tensor::from_rows(&rows)?,
        })
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn normalize_rows(t: &mut Tensor) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// Clean `HW x d` feature map with unit rows, rounded to `f32` precision.
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub true_context: usize,
}

fn generate_one(spec: &SyntheticSpec, world: &World, blocks: &[Vec<usize>], rng: &mut Rng) -> Instance {
    let (c, hw) = (spec.n_classes, spec.hw());
    let context = rng.random_range(0..spec.k_true);
    let block = &blocks[context];
    let count = rng.random_range(spec.positives_range[0]..=spec.positives_range[1]);
    let mut picks: Vec<usize> = block.choose_multiple(rng, count).copied().collect();
    let outside: Vec<usize> = (0..c).filter(|l| !block.contains(l)).collect();
    for i in 0..picks.len() {
        if rng.random::<f64>() < spec.cross_context_leak {
            let free: Vec<usize> = outside.iter().copied().filter(|l| !picks.contains(l)).collect();
            if let Some(&swap) = free.choose(rng) {
                picks[i] = swap;
            }
        }
    }
    let mut rows: Vec<usize> = (0..hw).collect();
    rows.shuffle(rng);
    let mut features = Tensor::zeros(&[hw, spec.d]);
    for r in 0..hw {
        features.row_mut(r).copy_from_slice(world.backgrounds.row(context));
    }
    let mut labels = vec![0u8; c];
    for (slot, &label) in picks.iter().enumerate() {
        labels[label] = 1;
        features
            .row_mut(rows[slot])
            .copy_from_slice(world.dictionary.prototypes.row(label));
    }
    normalize_rows(&mut features);
    Instance {
        features: crate::cbsf::quantize(&features),
        labels,
        true_context: context,
    }
}

/// Instances `0..n_total` of the stream `stream`; instance `i` draws only from
/// its own indexed RNG, so any prefix is stable.
pub fn generate(spec: &SyntheticSpec, world: &World, seed: u64, stream: &str, n_total: usize) -> Result<Vec<Instance>> {
    spec.validate()?;
    if n_total == 0 {
        return Err(CbsaError::Spec("n_total must be at least 1".into()));
    }
    let blocks = spec.blocks();
    Ok((0..n_total)
        .map(|i| generate_one(spec, world, &blocks, &mut indexed_stream(seed, stream, i as u64)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Gaussian noise on every coordinate, then unit rows. The strong view then
/// overwrites `floor(mask_fraction * HW)` random rows with `background`.
pub fn augment(
    features: &Tensor,
    kind: AugmentKind,
    spec: &SyntheticSpec,
    background: &[f64],
    rng: &mut Rng,
) -> Tensor {
    let sigma = match kind {
        AugmentKind::Weak => spec.noise_weak,
        AugmentKind::Strong => spec.noise_strong,
    };
    let mut out = features.clone();
    for v in out.data_mut() {
        *v += gaussian(rng, sigma);
    }
    normalize_rows(&mut out);
    if kind == AugmentKind::Strong {
        let hw = out.rows();
        let n_mask = (spec.mask_fraction * hw as f64 + 1e-9).floor() as usize;
        let mut rows: Vec<usize> = (0..hw).collect();
        rows.shuffle(rng);
        for &r in &rows[..n_mask.min(hw)] {
            out.row_mut(r).copy_from_slice(background);
        }
    }
    out
}

/// `ceil(p * n)` labeled indices drawn without replacement, sorted; the rest
/// are unlabeled.
pub fn split(n_total: usize, p: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CbsaError::Spec(format!("labeled proportion {p} must lie in (0, 1)")));
    }
    let m = ((p * n_total as f64 - 1e-9).ceil() as usize).clamp(1, n_total);
    let mut order: Vec<usize> = (0..n_total).collect();
    order.shuffle(&mut substream(seed, "split"));
    let mut labeled = order[..m].to_vec();
    let mut unlabeled = order[m..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

/// Side file written next to the feature files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub labeled_indices: Vec<usize>,
    pub labeled_fraction: f64,
    /// Planted context of each training instance (evaluation only).
    pub contexts: Vec<usize>,
    pub val_contexts: Vec<usize>,
}

/// A labeled/unlabeled training split plus a clean validation set.
///
/// Labels of unlabeled instances are kept for evaluation code only.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub world: World,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl SyntheticDataset {
    pub fn generate(spec: &SyntheticSpec, seed: u64, n_total: usize, n_val: usize, p: f64) -> Result<Self> {
        let world = World::generate(spec, seed)?;
        let train = generate(spec, &world, seed, "data", n_total)?;
        let val = generate(spec, &world, seed, "val", n_val.max(1))?;
        let (labeled, unlabeled) = split(n_total, p, seed)?;
        Ok(Self {
            spec: spec.clone(),
            seed,
            labeled_fraction: p,
            world,
            train,
            val,
            labeled,
            unlabeled,
        })
    }

    pub fn labels_of(instances: &[Instance], idx: &[usize]) -> Tensor {
        let c = instances.first().map_or(0, |i| i.labels.len());
        let mut y = Tensor::zeros(&[idx.len(), c]);
        for (r, &i) in idx.iter().enumerate() {
            for (k, &v) in instances[i].labels.iter().enumerate() {
                y.set(r, k, v as f64);
            }
        }
        y
    }

    pub fn y_labeled(&self) -> Tensor {
        Self::labels_of(&self.train, &self.labeled)
    }

    pub fn y_unlabeled_truth(&self) -> Tensor {
        Self::labels_of(&self.train, &self.unlabeled)
    }

    pub fn y_val(&self) -> Tensor {
        Self::labels_of(&self.val, &(0..self.val.len()).collect::<Vec<_>>())
    }

    pub fn background(&self, instance: &Instance) -> &[f64] {
        self.world.backgrounds.row(instance.true_context)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            seed: self.seed,
            spec: self.spec.clone(),
            labeled_indices: self.labeled.clone(),
            labeled_fraction: self.labeled_fraction,
            contexts: self.train.iter().map(|i| i.true_context).collect(),
            val_contexts: self.val.iter().map(|i| i.true_context).collect(),
        }
    }

    pub fn to_feature_files(&self) -> (FeatureFile, FeatureFile) {
        let to_file = |instances: &[Instance]| FeatureFile {
            header: FeatureHeader {
                count: instances.len(),
                n_classes: self.spec.n_classes,
                height: self.spec.height,
                width: self.spec.width,
                d: self.spec.d,
                has_labels: true,
            },
            records: instances
                .iter()
                .map(|i| FeatureRecord {
                    features: i.features.clone(),
                    labels: Some(i.labels.clone()),
                })
                .collect(),
        };
        (to_file(&self.train), to_file(&self.val))
    }

    /// Rebuilds a dataset from feature files and their manifest.
    pub fn from_parts(manifest: &Manifest, train: &FeatureFile, val: &FeatureFile) -> Result<Self> {
        let spec = &manifest.spec;
        let world = World::generate(spec, manifest.seed)?;
        let load = |file: &FeatureFile, contexts: &[usize], what: &str| -> Result<Vec<Instance>> {
            let h = &file.header;
            if (h.n_classes, h.height, h.width, h.d) != (spec.n_classes, spec.height, spec.width, spec.d) {
                return Err(CbsaError::Spec(format!("{what} features do not match the manifest spec")));
            }
            if !h.has_labels || contexts.len() != h.count {
                return Err(CbsaError::Spec(format!(
                    "{what} file needs labels and one context per instance"
                )));
            }
            Ok(file
                .records
                .iter()
                .zip(contexts)
                .map(|(r, &c)| Instance {
                    features: r.features.clone(),
                    labels: r.labels.clone().expect("has_labels"),
                    true_context: c,
                })
                .collect())
        };
        let train_instances = load(train, &manifest.contexts, "training")?;
        let n = train_instances.len();
        let labeled = manifest.labeled_indices.clone();
        if labeled.iter().any(|&i| i >= n) || labeled.windows(2).any(|w| w[0] >= w[1]) || labeled.is_empty() {
            return Err(CbsaError::Spec("labeled_indices must be sorted, unique, non-empty and in range".into()));
        }
        let unlabeled = (0..n).filter(|i| labeled.binary_search(i).is_err()).collect();
        Ok(Self {
            spec: spec.clone(),
            seed: manifest.seed,
            labeled_fraction: manifest.labeled_fraction,
            world,
            train: train_instances,
            val: load(val, &manifest.val_contexts, "validation")?,
            labeled,
            unlabeled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDataset {
        SyntheticDataset::generate(&SyntheticSpec::default(), 1, 120, 20, 0.1).unwrap()
    }

    #[test]
    fn no_leak_keeps_labels_in_one_block() {
        let spec = SyntheticSpec {
            cross_context_leak: 0.0,
            ..Default::default()
        };
        let world = World::generate(&spec, 4).unwrap();
        let blocks = spec.blocks();
        for inst in generate(&spec, &world, 4, "data", 200).unwrap() {
            let pos: Vec<usize> = (0..12).filter(|&k| inst.labels[k] == 1).collect();
            assert!(!pos.is_empty() && pos.len() <= 3);
            assert!(pos.iter().all(|k| blocks[inst.true_context].contains(k)));
        }
    }

    #[test]
    fn positives_have_prototype_rows() {
        let ds = small();
        for inst in &ds.train {
            for k in (0..12).filter(|&k| inst.labels[k] == 1) {
                let proto = ds.world.dictionary.prototypes.row(k);
                let best = (0..16)
                    .map(|r| inst.features.row(r).iter().zip(proto).map(|(a, b)| a * b).sum::<f64>())
                    .fold(f64::MIN, f64::max);
                assert!(best > 0.99);
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = small();
        let b = small();
        assert_eq!(a.train, b.train);
        assert_eq!(a.labeled, b.labeled);
        assert_ne!(a.train[0].features, a.val[0].features);
    }

    #[test]
    fn augmentation_examples() {
        let ds = small();
        let inst = &ds.train[3];
        let bg = ds.background(inst);
        let calm = SyntheticSpec {
            noise_weak: 0.0,
            noise_strong: 0.0,
            mask_fraction: 0.0,
            ..Default::default()
        };
        let mut rng = substream(1, "aug");
        let same = augment(&inst.features, AugmentKind::Strong, &calm, bg, &mut rng);
        assert!(same.max_abs_diff(&inst.features) < 1e-6);

        let masked_only = SyntheticSpec {
            noise_weak: 0.0,
            noise_strong: 0.0,
            ..Default::default()
        };
        // Use an instance whose rows are all prototypes to count masked rows.
        let protos = Tensor::matrix(16, 32, (0..16).flat_map(|r| ds.world.dictionary.prototypes.row(r % 12).to_vec()).collect()).unwrap();
        let fake_bg = vec![1.0 / (32f64).sqrt(); 32];
        let out = augment(&protos, AugmentKind::Strong, &masked_only, &fake_bg, &mut rng);
        let replaced = (0..16).filter(|&r| out.row(r) == fake_bg.as_slice()).count();
        assert_eq!(replaced, 4);

        for kind in [AugmentKind::Weak, AugmentKind::Strong] {
            let v = augment(&inst.features, kind, &ds.spec, bg, &mut rng);
            assert_eq!(v.dims(), (16, 32));
            for r in 0..16 {
                let n: f64 = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn split_examples() {
        let (l, u) = split(600, 0.05, 1).unwrap();
        assert_eq!((l.len(), u.len()), (30, 570));
        assert!(l.iter().all(|i| u.binary_search(i).is_err()));
        for p in [0.05, 0.10, 0.15, 0.20] {
            let (l, _) = split(600, p, 2).unwrap();
            assert_eq!(l.len(), (600.0 * p).round() as usize);
        }
        assert!(split(10, 0.0, 1).is_err());
        assert!(split(10, 1.0, 1).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SyntheticSpec {
            positives_range: [1, 5],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(CbsaError::Spec(_))));
        let bad = SyntheticSpec {
            noise_weak: 0.3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feature_files_round_trip_the_dataset() {
        let ds = small();
        let (train, val) = ds.to_feature_files();
        let back = SyntheticDataset::from_parts(&ds.manifest(), &train, &val).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.val, ds.val);
        assert_eq!(back.unlabeled, ds.unlabeled);
    }
}
