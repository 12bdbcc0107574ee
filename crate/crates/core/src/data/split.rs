use std::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{SplitKind, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Fractions for a train/val/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::Config(format!("split fractions must lie in (0,1): {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

/// A seeded ordering of sample indices in which every prefix is close to
/// stratified.
///
/// The order opens with one representative of each present class (larger
/// classes first, ties in seeded random order), so any prefix of length
/// `m >= #classes` touches every class. The remaining samples follow in
/// systematic-sampling order: the `j`-th shuffled member of class `c` gets
/// key `(j + 1/2) / n_c`, ties broken by class rank.
pub fn stratified_order(labels: &[usize], num_classes: usize, seed: u64, stream_tag: u64) -> Vec<usize> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng::stream(seed, &[stream_tag, c as u64]));
    }

    let mut classes: Vec<usize> = (0..num_classes).filter(|&c| !members[c].is_empty()).collect();
    classes.shuffle(&mut rng::stream(seed, &[stream_tag, u64::MAX]));
    // stable sort keeps the shuffled order among equal-sized classes
    classes.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()));
    let mut rank = vec![0usize; num_classes];
    for (r, &c) in classes.iter().enumerate() {
        rank[c] = r;
    }

    let mut order: Vec<usize> = classes.iter().map(|&c| members[c][0]).collect();
    let mut rest: Vec<(usize, usize)> = classes
        .iter()
        .flat_map(|&c| (1..members[c].len()).map(move |j| (c, j)))
        .collect();
    // compare (2j+1)/(2 n_c) exactly via cross-multiplication
    rest.sort_by(|&(c1, j1), &(c2, j2)| {
        let lhs = (2 * j1 as u128 + 1) * members[c2].len() as u128;
        let rhs = (2 * j2 as u128 + 1) * members[c1].len() as u128;
        match lhs.cmp(&rhs) {
            Ordering::Equal => rank[c1].cmp(&rank[c2]),
            o => o,
        }
    });
    order.extend(rest.into_iter().map(|(c, j)| members[c][j]));
    order
}

/// Index sets of a train/val/test partition, each sorted ascending.
///
/// Depends only on `(labels, num_classes, spec)`. Stratified when every
/// present class has at least five samples, otherwise a plain seeded shuffle.
pub fn split_indices(labels: &[usize], num_classes: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let stratify = counts.iter().all(|&c| c == 0 || c >= 5);
    let order = if stratify {
        stratified_order(labels, num_classes, spec.seed, tag::SPLIT)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(spec.seed, &[tag::SPLIT]));
        idx
    };

    let n_train = ((spec.train_frac * n as f64).round() as usize).min(n);
    let n_val = ((spec.val_frac * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split of {n} samples leaves an empty partition ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(parts)
}

pub fn split_dataset(
    ds: &TimeSeriesDataset,
    spec: &SplitSpec,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset)> {
    let [tr, va, te] = split_indices(&ds.labels, ds.num_classes, spec)?;
    Ok((
        ds.select(&tr).with_split(SplitKind::Train),
        ds.select(&va).with_split(SplitKind::Val),
        ds.select(&te).with_split(SplitKind::Test),
    ))
}

/// Result of label subsampling.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub dataset: TimeSeriesDataset,
    /// Selected rows of the source dataset, ascending.
    pub indices: Vec<usize>,
    /// Classes present in the source but absent from the subset.
    pub warnings: Vec<String>,
}

/// Stratified subset of `ceil(fraction * n)` samples.
///
/// Subsets are nested: for a fixed seed, a smaller fraction selects a subset
/// of the rows a larger fraction selects.
pub fn subsample_labels(ds: &TimeSeriesDataset, fraction: f64, seed: u64) -> Result<Subsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must lie in (0,1], got {fraction}")));
    }
    let n = ds.len();
    // tolerate representation error such as 0.3 * 10 = 3.0000000000000004
    let m = ((fraction * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n);
    let order = stratified_order(&ds.labels, ds.num_classes, seed, tag::SUBSAMPLE);
    let mut indices = order[..m].to_vec();
    indices.sort_unstable();

    let mut kept = vec![0usize; ds.num_classes];
    for &i in &indices {
        kept[ds.labels[i]] += 1;
    }
    let warnings = ds
        .class_counts()
        .iter()
        .enumerate()
        .filter(|&(c, &total)| total > 0 && kept[c] == 0)
        .map(|(c, &total)| {
            format!("class {c} has no labeled samples at fraction {fraction} ({total} available)")
        })
        .collect::<Vec<_>>();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Subsample {
        dataset: ds.select(&indices),
        indices,
        warnings,
    })
}
