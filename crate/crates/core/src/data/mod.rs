//! Data ingestion and the sampling protocol: class balancing by
//! downsampling and a stratified train/validation/test split.

pub mod image;
pub mod loader;
pub mod pnm;
pub mod synthetic;
pub mod volume;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{param_err, validation_err, Error, Result};
use crate::tensor::Tensor;

pub use image::{normalize_minmax, resize_bilinear, to_model_channels, GrayImage};
pub use loader::{load_dataset_dir, read_manifest, write_manifest, LoadOptions, ManifestRecord};
pub use pnm::PnmImage;
pub use synthetic::{generate_synthetic_dataset, synthetic_images, SYNTHETIC_CLASSES};
pub use volume::{axial_slice_indices, extract_axial_slices, Volume};

/// Default split proportions: train, validation, test.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.2, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => {
                Err(Error::Config(format!("unknown split `{other}` (expected train, validation or test)")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Sample indices per split; empty until [`stratified_split`] runs.
    pub splits: BTreeMap<Split, Vec<usize>>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, seed: u64) -> Self {
        Self { samples, class_names, splits: BTreeMap::new(), seed }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn split_indices(&self, split: Split) -> Result<&[usize]> {
        self.splits
            .get(&split)
            .map(Vec::as_slice)
            .ok_or_else(|| validation_err!("dataset has no {split} split"))
    }

    pub fn split_samples(&self, split: Split) -> Result<Vec<&Sample>> {
        Ok(self.split_indices(split)?.iter().map(|&i| &self.samples[i]).collect())
    }

    /// Per-class sample counts within `split`.
    pub fn split_class_counts(&self, split: Split) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.num_classes()];
        for &i in self.split_indices(split)? {
            counts[self.samples[i].label] += 1;
        }
        Ok(counts)
    }

    /// Groups samples by label, preserving order within each class.
    pub fn into_groups(self) -> (Vec<Vec<Sample>>, Vec<String>, u64) {
        let mut groups: Vec<Vec<Sample>> = vec![Vec::new(); self.class_names.len()];
        for s in self.samples {
            groups[s.label].push(s);
        }
        (groups, self.class_names, self.seed)
    }

    pub fn from_groups(groups: Vec<Vec<Sample>>, class_names: Vec<String>, seed: u64) -> Self {
        Self::new(groups.into_iter().flatten().collect(), class_names, seed)
    }
}

/// Reduces every class to the minority-class size by uniform sampling
/// without replacement. Retained items keep their original order; classes
/// already at the minimum are untouched.
pub fn balance_downsample<T>(groups: Vec<Vec<T>>, rng: &mut impl Rng) -> Result<Vec<Vec<T>>> {
    if let Some(k) = groups.iter().position(Vec::is_empty) {
        return Err(validation_err!("class {k} has no samples"));
    }
    let Some(target) = groups.iter().map(Vec::len).min() else {
        return Ok(groups);
    };
    Ok(groups
        .into_iter()
        .map(|g| {
            if g.len() == target {
                return g;
            }
            let mut keep = index::sample(rng, g.len(), target).into_vec();
            keep.sort_unstable();
            let mut keep = keep.into_iter().peekable();
            g.into_iter()
                .enumerate()
                .filter_map(|(i, item)| {
                    if keep.peek() == Some(&i) {
                        keep.next();
                        Some(item)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect())
}

/// Balances a dataset's classes in place (see [`balance_downsample`]).
pub fn balance_dataset(d: Dataset, rng: &mut impl Rng) -> Result<Dataset> {
    let (groups, names, seed) = d.into_groups();
    let groups = balance_downsample(groups, rng)?;
    Ok(Dataset::from_groups(groups, names, seed))
}

fn validate_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(param_err!("split fractions must lie in [0, 1], got {fractions:?}"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(param_err!("split fractions must sum to 1, got {total}"));
    }
    Ok(())
}

/// Per-class allocation `[train, validation, test]`: validation and test get
/// `floor(f·n)`, train gets the rest.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    validate_fractions(fractions)?;
    // the epsilon absorbs representation error such as 0.7·10 = 7.000000000000001
    let floor = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let val = floor(fractions[1]);
    let test = floor(fractions[2]);
    let train = n.saturating_sub(val + test);
    Ok([train, val, test])
}

/// Stratified split: per class, shuffle then allocate the first
/// `counts[0]` to train, the next `counts[1]` to validation, the rest to test.
pub fn stratified_split(mut d: Dataset, fractions: [f64; 3], rng: &mut impl Rng) -> Result<Dataset> {
    validate_fractions(fractions)?;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes()];
    for (i, s) in d.samples.iter().enumerate() {
        per_class
            .get_mut(s.label)
            .ok_or_else(|| validation_err!("sample {i} has out-of-range label {}", s.label))?
            .push(i);
    }
    let mut splits: BTreeMap<Split, Vec<usize>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for mut idx in per_class {
        let [train, val, _] = split_counts(idx.len(), fractions)?;
        idx.shuffle(rng);
        let (tr, rest) = idx.split_at(train);
        let (va, te) = rest.split_at(val);
        splits.get_mut(&Split::Train).unwrap().extend_from_slice(tr);
        splits.get_mut(&Split::Validation).unwrap().extend_from_slice(va);
        splits.get_mut(&Split::Test).unwrap().extend_from_slice(te);
    }
    for v in splits.values_mut() {
        v.sort_unstable();
    }
    d.splits = splits;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dataset(sizes: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (label, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: Tensor::zeros(&[1, 1, 1]),
                    label,
                    source_id: format!("{label}/{i}"),
                });
            }
        }
        let names = (0..sizes.len()).map(|i| format!("c{i}")).collect();
        Dataset::new(samples, names, 0)
    }

    #[test]
    fn balance_to_minority() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let groups: Vec<Vec<usize>> = [800, 500, 1200].iter().map(|&n| (0..n).collect()).collect();
        let out = balance_downsample(groups, &mut rng).unwrap();
        assert_eq!(out.iter().map(Vec::len).collect::<Vec<_>>(), vec![500, 500, 500]);
        assert!(out[0].windows(2).all(|w| w[0] < w[1]));
        assert_eq!(out[1], (0..500).collect::<Vec<_>>());
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let groups = vec![vec![3, 1, 2], vec![9, 8, 7]];
        assert_eq!(balance_downsample(groups.clone(), &mut rng).unwrap(), groups);
    }

    #[test]
    fn balance_rejects_empty_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let groups: Vec<Vec<u8>> = vec![vec![1], vec![]];
        assert!(matches!(balance_downsample(groups, &mut rng), Err(Error::Validation(_))));
    }

    #[test]
    fn balance_is_seeded() {
        let groups: Vec<Vec<usize>> = vec![(0..50).collect(), (0..20).collect()];
        let a = balance_downsample(groups.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = balance_downsample(groups, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_counts_examples() {
        assert_eq!(split_counts(500, DEFAULT_FRACTIONS).unwrap(), [350, 100, 50]);
        assert_eq!(split_counts(10, DEFAULT_FRACTIONS).unwrap(), [7, 2, 1]);
        assert_eq!(split_counts(7, DEFAULT_FRACTIONS).unwrap(), [6, 1, 0]);
        assert!(matches!(split_counts(10, [1.2, -0.1, -0.1]), Err(Error::Parameter(_))));
        assert!(matches!(split_counts(10, [0.5, 0.2, 0.1]), Err(Error::Parameter(_))));
    }

    #[test]
    fn stratified_split_is_disjoint_and_seeded() {
        let d = dataset(&[10, 10, 10]);
        let a = stratified_split(d.clone(), DEFAULT_FRACTIONS, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = stratified_split(d, DEFAULT_FRACTIONS, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.splits, b.splits);
        assert_eq!(a.split_class_counts(Split::Train).unwrap(), vec![7, 7, 7]);
        assert_eq!(a.split_class_counts(Split::Validation).unwrap(), vec![2, 2, 2]);
        assert_eq!(a.split_class_counts(Split::Test).unwrap(), vec![1, 1, 1]);
        let mut all: Vec<usize> = a.splits.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }
}
