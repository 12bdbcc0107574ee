use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which partition of a dataset directory a set of windows came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::NotFound(format!("unknown split '{other}'"))),
        }
    }
}

/// Labeled multichannel windows, `samples[n, channel, time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub samples: Array3<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Partition the windows were drawn from, if known. Pretraining refuses
    /// anything not tagged `Train`.
    pub split: Option<SplitKind>,
}

impl TimeSeriesDataset {
    pub fn new(
        name: impl Into<String>,
        samples: Array3<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = TimeSeriesDataset {
            name: name.into(),
            samples,
            labels,
            num_classes,
            split: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_split(mut self, split: SplitKind) -> Self {
        self.split = Some(split);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (n, c, t) = self.samples.dim();
        if n != self.labels.len() {
            return Err(Error::Format(format!(
                "{n} sample windows but {} labels",
                self.labels.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Format("num_classes must be positive".into()));
        }
        if c < 1 || t < 2 {
            return Err(Error::Format(format!(
                "need at least 1 channel and length 2, got {c} channels of length {t}"
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.dim().1
    }

    pub fn length(&self) -> usize {
        self.samples.dim().2
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        TimeSeriesDataset {
            name: self.name.clone(),
            samples: self.samples.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Concatenate datasets with identical channel/length/class layout.
    pub fn concat(parts: &[&TimeSeriesDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero datasets".into()))?;
        for p in parts {
            if p.channels() != first.channels()
                || p.length() != first.length()
                || p.num_classes != first.num_classes
            {
                return Err(Error::Format("cannot concatenate mismatched datasets".into()));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.samples.view()).collect();
        let samples = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(TimeSeriesDataset {
            name: first.name.clone(),
            samples,
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            num_classes: first.num_classes,
            split: None,
        })
    }

    /// Rows `indices` converted to an f64 batch `[B, C, T]`.
    pub fn batch(&self, indices: &[usize]) -> Array3<f64> {
        let (_, c, t) = self.samples.dim();
        let mut out = Array3::<f64>::zeros((indices.len(), c, t));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .zip_mut_with(&self.samples.index_axis(Axis(0), i), |o, &v| *o = v as f64);
        }
        out
    }
}

/// Per-channel mean and standard deviation used for z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over all windows and timesteps of `ds`.
    pub fn fit(ds: &TimeSeriesDataset) -> Self {
        let (n, c, t) = ds.samples.dim();
        let count = (n * t) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![1.0; c];
        if n == 0 {
            return ChannelStats { mean, std };
        }
        for ch in 0..c {
            let lane = ds.samples.index_axis(Axis(1), ch);
            let mu = lane.iter().map(|&v| v as f64).sum::<f64>() / count;
            let var = lane
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>()
                / count;
            mean[ch] = mu;
            // zero-variance channels are shifted but left unscaled
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        ChannelStats { mean, std }
    }

    pub fn apply(&self, ds: &mut TimeSeriesDataset) -> Result<()> {
        if ds.channels() != self.mean.len() {
            return Err(Error::Shape(format!(
                "statistics for {} channels applied to {} channels",
                self.mean.len(),
                ds.channels()
            )));
        }
        for (ch, mut lane) in ds.samples.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, sd) = (self.mean[ch], self.std[ch]);
            lane.mapv_inplace(|v| ((v as f64 - mu) / sd) as f32);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(values: Vec<f32>, labels: Vec<usize>, k: usize) -> Result<TimeSeriesDataset> {
        let n = labels.len();
        let t = values.len() / n;
        TimeSeriesDataset::new("t", Array3::from_shape_vec((n, 1, t), values).unwrap(), labels, k)
    }

    #[test]
    fn rejects_out_of_range_labels_and_nan() {
        assert!(matches!(tiny(vec![0.0; 4], vec![0, 2], 2), Err(Error::Data(_))));
        assert!(matches!(
            tiny(vec![0.0, f32::NAN, 0.0, 0.0], vec![0, 1], 2),
            Err(Error::Data(_))
        ));
        assert!(matches!(tiny(vec![0.0; 2], vec![0, 1], 2), Err(Error::Format(_))));
    }

    #[test]
    fn zscore_leaves_constant_channel_unscaled() {
        let mut ds = TimeSeriesDataset::new(
            "c",
            Array3::from_shape_vec((2, 2, 2), vec![3.0, 3.0, 1.0, 2.0, 3.0, 3.0, 3.0, 4.0]).unwrap(),
            vec![0, 0],
            1,
        )
        .unwrap();
        let stats = ChannelStats::fit(&ds);
        assert_eq!(stats.std[0], 1.0);
        stats.apply(&mut ds).unwrap();
        assert!(ds.samples.index_axis(Axis(1), 0).iter().all(|&v| v == 0.0));
        let lane = ds.samples.index_axis(Axis(1), 1);
        let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }
}
