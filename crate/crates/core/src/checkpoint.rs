//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, a JSON header
//! (configuration, counters, tensor directory, data digest), then every
//! online tensor followed by every target tensor as little-endian `f32`.
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{DualNetworkState, NetworkSpec, ParamKind, ParamTree};

const MAGIC: &[u8; 8] = b"FQBCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

/// Random streams are derived from the seed and the (epoch, step) counters,
/// so these three values are the complete stream state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    config_hash: String,
    spec: NetworkSpec,
    tau: f64,
    stream: StreamState,
    epoch_mean_loss: Option<f64>,
    online: Vec<TensorEntry>,
    target: Vec<TensorEntry>,
    data_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub spec: NetworkSpec,
    pub online: ParamTree,
    pub target: ParamTree,
    pub tau: f64,
    pub stream: StreamState,
    pub epoch_mean_loss: Option<f64>,
}

fn directory(tree: &ParamTree) -> Vec<TensorEntry> {
    tree.tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            kind: t.kind,
        })
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_state(config: &ExperimentConfig, state: &DualNetworkState, stream: StreamState, epoch_mean_loss: Option<f64>) -> Self {
        Checkpoint {
            config: config.clone(),
            spec: state.net.spec.clone(),
            online: state.online.clone(),
            target: state.target.clone(),
            tau: state.tau,
            stream,
            epoch_mean_loss,
        }
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn into_state(self) -> Result<DualNetworkState> {
        DualNetworkState::from_trees(&self.spec, self.online, self.target, self.tau)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = Vec::with_capacity(4 * (self.online.tensors.iter().chain(&self.target.tensors).map(|t| t.numel()).sum::<usize>()));
        for t in self.online.tensors.iter().chain(&self.target.tensors) {
            for &v in &t.data {
                data.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            spec: self.spec.clone(),
            tau: self.tau,
            stream: self.stream,
            epoch_mean_loss: self.epoch_mean_loss,
            online: directory(&self.online),
            target: directory(&self.target),
            data_sha256: hex(&Sha256::digest(&data)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(16 + header.len() + data.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&data);
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {} does not exist", path.display())),
            _ => Error::io(path, e),
        })?;
        let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("corrupt header: {e}")))?;
        let data = &body[hlen..];
        if hex(&Sha256::digest(data)) != header.data_sha256 {
            return Err(bad("tensor data digest mismatch"));
        }
        let mut offset = 0;
        let mut read_tree = |entries: &[TensorEntry]| -> Result<ParamTree> {
            let mut tree = ParamTree::default();
            for e in entries {
                let n: usize = e.shape.iter().product();
                let end = offset + 4 * n;
                let chunk = data.get(offset..end).ok_or_else(|| bad("tensor data shorter than directory"))?;
                let values = chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect();
                tree.push(e.name.clone(), e.shape.clone(), e.kind, values);
                offset = end;
            }
            Ok(tree)
        };
        let online = read_tree(&header.online)?;
        let target = read_tree(&header.target)?;
        if offset != data.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            config: header.config,
            spec: header.spec,
            online,
            target,
            tau: header.tau,
            stream: header.stream,
            epoch_mean_loss: header.epoch_mean_loss,
        })
    }
}

/// Write `bytes` to a temporary file next to `path`, sync it, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".tmp");
        path.with_file_name(name)
    };
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ForwardMode;
    use ndarray::Array3;
    use rand::{Rng as _, SeedableRng};

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_value(serde_json::json!({
            "preset": "synthetic",
            "train": {
                "encoder": { "kernel_sizes": [5, 3, 3], "channels_per_block": [4, 6, 6] },
                "tcn": { "hidden_dim": 5, "out_dim": 4 },
                "mlp": { "hidden_dim": 6, "out_dim": 4 }
            }
        }))
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let cfg = small();
        let spec = cfg.train.network_spec(3, 32);
        let mut st = DualNetworkState::new(&spec, 3, 0.9).unwrap();
        st.target.tensors[0].data[0] = 0.125;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let stream = StreamState { seed: 3, epoch: 2, step: 17 };
        Checkpoint::from_state(&cfg, &st, stream, Some(1.5)).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.stream, stream);
        assert_eq!(back.epoch_mean_loss, Some(1.5));
        assert_eq!(back.config_hash(), cfg.hash());
        let st2 = back.into_state().unwrap();
        assert_eq!(st2.online, st.online);
        assert_eq!(st2.target, st.target);

        let mut r = crate::rng::Rng::seed_from_u64(0);
        let x = Array3::from_shape_fn((4, 3, 32), |_| r.random_range(-2.0..2.0));
        let a = st.net.forward_online(&st.online, x.view(), ForwardMode::EVAL).unwrap().0;
        let b = st2.net.forward_online(&st2.online, x.view(), ForwardMode::EVAL).unwrap().0;
        assert_eq!(a.z, b.z);
        assert_eq!(a.q_t, b.q_t);
        assert_eq!(a.q_m, b.q_m);
        assert!(!dir.path().join("model.ckpt.tmp").exists());
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(Error::NotFound(_))));
        let p = dir.path().join("junk");
        fs::write(&p, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format(_))));

        let cfg = small();
        let st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 0, 0.9).unwrap();
        let good = dir.path().join("good");
        Checkpoint::from_state(&cfg, &st, StreamState { seed: 0, epoch: 0, step: 0 }, None).save(&good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x55;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format(_))));
    }
}
