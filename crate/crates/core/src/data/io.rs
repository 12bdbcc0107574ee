//! Dataset directory format.
//!
//! ```text
//! <dir>/meta.json        {"name", "channels", "length", "num_classes",
//!                         "splits": {"train": n, "val": n, "test": n}}
//! <dir>/<split>.bin      little-endian f32, row-major [n, channels, length]
//! <dir>/<split>.labels   little-endian i64, [n]
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::dataset::{ChannelStats, SplitKind, TimeSeriesDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    #[serde(default)]
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: SplitKind) -> usize {
        match split {
            SplitKind::Train => self.train,
            SplitKind::Val => self.val,
            SplitKind::Test => self.test,
        }
    }

    fn set(&mut self, split: SplitKind, n: usize) {
        match split {
            SplitKind::Train => self.train = n,
            SplitKind::Val => self.val = n,
            SplitKind::Test => self.test = n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub channels: usize,
    pub length: usize,
    pub num_classes: usize,
    pub splits: SplitCounts,
}

impl DatasetMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::NotFound(format!("dataset metadata {}", path.display()))
            }
            _ => Error::io(&path, e),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("{}", path.display())),
        _ => Error::io(path, e),
    })
}

/// Read one split exactly as stored, without normalization.
pub fn read_split_raw(dir: &Path, split: &str) -> Result<TimeSeriesDataset> {
    let split: SplitKind = split.parse()?;
    let meta = DatasetMeta::read(dir)?;
    let n = meta.splits.get(split);
    let (c, t) = (meta.channels, meta.length);
    if n == 0 {
        let ds = TimeSeriesDataset::new(meta.name, Array3::zeros((0, c, t)), Vec::new(), meta.num_classes)?;
        return Ok(ds.with_split(split));
    }

    let bin_path = dir.join(format!("{split}.bin"));
    let bytes = read_file(&bin_path)?;
    let expected = n * c * t * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: metadata declares {n}x{c}x{t} f32 values ({expected} bytes) but the file holds {} bytes",
            bin_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: NaN or infinite value", bin_path.display())));
    }

    let label_path = dir.join(format!("{split}.labels"));
    let bytes = read_file(&label_path)?;
    if bytes.len() != n * 8 {
        return Err(Error::Format(format!(
            "{}: expected {n} i64 labels, file holds {} bytes",
            label_path.display(),
            bytes.len()
        )));
    }
    let labels = bytes
        .chunks_exact(8)
        .map(|b| {
            let v = i64::from_le_bytes(b.try_into().expect("chunk of 8"));
            usize::try_from(v).map_err(|_| Error::Data(format!("negative label {v}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let samples = Array3::from_shape_vec((n, c, t), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(TimeSeriesDataset::new(meta.name, samples, labels, meta.num_classes)?.with_split(split))
}

/// Load a split, z-scored per channel with statistics of the train split.
pub fn load_dataset(dir: &Path, split: &str) -> Result<TimeSeriesDataset> {
    let mut ds = read_split_raw(dir, split)?;
    let stats = ChannelStats::fit(&read_split_raw(dir, "train")?);
    stats.apply(&mut ds)?;
    Ok(ds)
}

/// Load all three splits, normalized with one set of train statistics.
pub fn load_splits(dir: &Path) -> Result<[TimeSeriesDataset; 3]> {
    let mut splits = [
        read_split_raw(dir, "train")?,
        read_split_raw(dir, "val")?,
        read_split_raw(dir, "test")?,
    ];
    let stats = ChannelStats::fit(&splits[0]);
    for s in splits.iter_mut() {
        stats.apply(s)?;
    }
    Ok(splits)
}

/// Write the given splits plus `meta.json`. Splits not listed get a zero count.
pub fn write_dataset_dir(dir: &Path, splits: &[(SplitKind, &TimeSeriesDataset)]) -> Result<DatasetMeta> {
    let first = splits
        .first()
        .ok_or_else(|| Error::Contract("no splits to write".into()))?
        .1;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = DatasetMeta {
        name: first.name.clone(),
        channels: first.channels(),
        length: first.length(),
        num_classes: first.num_classes,
        splits: SplitCounts::default(),
    };
    for &(kind, ds) in splits {
        if ds.channels() != meta.channels || ds.length() != meta.length || ds.num_classes != meta.num_classes {
            return Err(Error::Format(format!("split {kind} does not match the layout of the first split")));
        }
        let mut bin = Vec::with_capacity(ds.samples.len() * 4);
        // iter() walks logical row-major order regardless of memory layout
        for v in ds.samples.iter() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(format!("{kind}.bin"));
        fs::write(&path, bin).map_err(|e| Error::io(&path, e))?;

        let mut labels = Vec::with_capacity(ds.len() * 8);
        for &l in &ds.labels {
            labels.extend_from_slice(&(l as i64).to_le_bytes());
        }
        let path = dir.join(format!("{kind}.labels"));
        fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
        meta.splits.set(kind, ds.len());
    }
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TimeSeriesDataset {
        let samples =
            Array3::from_shape_vec((2, 1, 4), vec![0.1, -2.5, 3.25e-8, 7.0, f32::MIN_POSITIVE, 1.0, -0.0, 9.5]).unwrap();
        TimeSeriesDataset::new("tiny", samples, vec![1, 0], 2).unwrap()
    }

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        write_dataset_dir(dir.path(), &[(SplitKind::Train, &ds)]).unwrap();
        let back = read_split_raw(dir.path(), "train").unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.name, "tiny");
        for (a, b) in back.samples.iter().zip(ds.samples.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // absent splits load as empty
        assert!(read_split_raw(dir.path(), "test").unwrap().is_empty());
    }

    #[test]
    fn channel_count_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = Array3::<f32>::zeros((3, 8, 5));
        let ds = TimeSeriesDataset::new("m", samples, vec![0, 1, 0], 2).unwrap();
        write_dataset_dir(dir.path(), &[(SplitKind::Train, &ds)]).unwrap();
        let mut meta = DatasetMeta::read(dir.path()).unwrap();
        meta.channels = 9;
        fs::write(dir.path().join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(matches!(read_split_raw(dir.path(), "train"), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_split_and_nan_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(dir.path(), &[(SplitKind::Train, &tiny())]).unwrap();
        assert!(matches!(read_split_raw(dir.path(), "holdout"), Err(Error::NotFound(_))));

        let mut bytes = fs::read(dir.path().join("train.bin")).unwrap();
        bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(dir.path().join("train.bin"), bytes).unwrap();
        assert!(matches!(read_split_raw(dir.path(), "train"), Err(Error::Data(_))));
    }

    #[test]
    fn load_normalizes_with_train_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let train = TimeSeriesDataset::new(
            "z",
            Array3::from_shape_fn((4, 2, 8), |(n, c, t)| (n * 3 + t) as f32 * (c as f32 + 1.0) + 5.0),
            vec![0, 1, 0, 1],
            2,
        )
        .unwrap();
        let test = train.select(&[0]);
        write_dataset_dir(dir.path(), &[(SplitKind::Train, &train), (SplitKind::Test, &test)]).unwrap();
        let loaded = load_dataset(dir.path(), "train").unwrap();
        for lane in loaded.samples.axis_iter(ndarray::Axis(1)) {
            let n = lane.len() as f64;
            let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = lane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var.sqrt() - 1.0).abs() < 1e-5);
        }
        let t = load_dataset(dir.path(), "test").unwrap();
        assert_eq!(t.split, Some(SplitKind::Test));
        assert_eq!(t.samples.index_axis(ndarray::Axis(0), 0), loaded.samples.index_axis(ndarray::Axis(0), 0));
    }
}
