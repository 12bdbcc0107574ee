use std::fmt;

use serde::{Deserialize, Serialize};

use super::ops::pool_out_len;
use crate::error::{Error, Result};

/// Convolutional backbone: `blocks` × {conv (same padding) → batch norm →
/// ReLU → max-pool → dropout}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub kernel_sizes: Vec<usize>,
    pub channels_per_block: Vec<usize>,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            blocks: 3,
            kernel_sizes: vec![25, 8, 8],
            channels_per_block: vec![32, 64, 128],
            pool_size: 2,
            pool_stride: 2,
            dropout: 0.35,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.kernel_sizes.len() != self.blocks || self.channels_per_block.len() != self.blocks {
            return Err(Error::Config(format!(
                "encoder needs one kernel size and one channel count per block ({} blocks, {} kernels, {} channel counts)",
                self.blocks,
                self.kernel_sizes.len(),
                self.channels_per_block.len()
            )));
        }
        if self.kernel_sizes.contains(&0) || self.channels_per_block.contains(&0) {
            return Err(Error::Config("encoder kernels and channels must be positive".into()));
        }
        if self.pool_size == 0 || self.pool_stride == 0 {
            return Err(Error::Config("pool size and stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn min_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().min().unwrap_or(0)
    }

    /// Temporal length entering each block, followed by the output length.
    pub fn lengths(&self, input_len: usize) -> Result<Vec<usize>> {
        let mut lens = vec![input_len];
        let mut t = input_len;
        for b in 0..self.blocks {
            let next = pool_out_len(t, self.pool_size, self.pool_stride);
            if next == 0 {
                return Err(Error::Shape(format!(
                    "input of length {input_len} is too short: block {b} receives {t} timesteps but pools with size {} \
                     ({} blocks of stride {} need at least {} timesteps)",
                    self.pool_size,
                    self.blocks,
                    self.pool_stride,
                    self.min_input_len()
                )));
            }
            t = next;
            lens.push(t);
        }
        Ok(lens)
    }

    pub fn min_input_len(&self) -> usize {
        (0..self.blocks).fold(1, |t, _| (t - 1) * self.pool_stride + self.pool_size)
    }

    /// Kernel actually used at each block: capped at the block's input length.
    pub fn effective_kernels(&self, input_len: usize) -> Result<Vec<usize>> {
        let lens = self.lengths(input_len)?;
        Ok(self.kernel_sizes.iter().zip(&lens).map(|(&k, &t)| k.min(t)).collect())
    }
}

/// Stacked dilated causal convolutions with residual connections, projected
/// from the last timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TCNHeadConfig {
    pub layers: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for TCNHeadConfig {
    fn default() -> Self {
        TCNHeadConfig {
            layers: 2,
            kernel_size: 3,
            dilations: vec![4, 8],
            hidden_dim: 256,
            out_dim: 128,
        }
    }
}

/// Relation between the TCN kernel `K1`, its dilations `D`, and the encoder
/// kernel `K2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelOrdering {
    /// `K1 < K2` and every dilation `> K1`.
    SmallKernelLargeDilation,
    /// `K1 > K2` and every dilation `< K1`.
    LargeKernelSmallDilation,
    Mixed,
}

impl fmt::Display for KernelOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelOrdering::SmallKernelLargeDilation => "(K1<K2,D>K1)-K2",
            KernelOrdering::LargeKernelSmallDilation => "(K1>K2,D<K1)-K2",
            KernelOrdering::Mixed => "mixed",
        })
    }
}

impl TCNHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers != self.dilations.len() {
            return Err(Error::Config(format!(
                "TCN head needs one dilation per layer ({} layers, {} dilations)",
                self.layers,
                self.dilations.len()
            )));
        }
        if self.dilations.windows(2).any(|w| w[0] >= w[1]) || self.dilations.contains(&0) {
            return Err(Error::Config(format!("TCN dilations must be positive and strictly increasing: {:?}", self.dilations)));
        }
        if self.kernel_size == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("TCN kernel and dims must be positive".into()));
        }
        Ok(())
    }

    pub fn ordering(&self, encoder: &EncoderConfig) -> KernelOrdering {
        let k1 = self.kernel_size;
        let k2 = encoder.min_kernel();
        let dmin = self.dilations.iter().copied().min().unwrap_or(0);
        let dmax = self.dilations.iter().copied().max().unwrap_or(0);
        if k1 < k2 && dmin > k1 {
            KernelOrdering::SmallKernelLargeDilation
        } else if k1 > k2 && dmax < k1 {
            KernelOrdering::LargeKernelSmallDilation
        } else {
            KernelOrdering::Mixed
        }
    }
}

/// Timesteps that can influence one output of the TCN stack (one causal
/// convolution per layer).
pub fn receptive_field(cfg: &TCNHeadConfig) -> usize {
    1 + cfg.dilations.iter().map(|&d| (cfg.kernel_size - 1) * d).sum::<usize>()
}

/// linear → batch norm → ReLU → linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MLPHeadConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for MLPHeadConfig {
    fn default() -> Self {
        MLPHeadConfig {
            hidden_dim: 256,
            out_dim: 128,
        }
    }
}

impl MLPHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("MLP dims must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to lay out a network's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub length: usize,
    pub encoder: EncoderConfig,
    /// `None` removes the TCN branch from both networks.
    pub tcn: Option<TCNHeadConfig>,
    /// `None` removes the MLP branch from both networks.
    pub mlp: Option<MLPHeadConfig>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("input needs at least one channel".into()));
        }
        self.encoder.validate()?;
        self.encoder.lengths(self.length)?;
        if let Some(t) = &self.tcn {
            t.validate()?;
        }
        if let Some(m) = &self.mlp {
            m.validate()?;
        }
        if self.tcn.is_none() && self.mlp.is_none() {
            return Err(Error::Config("at least one of the TCN and MLP heads must be enabled".into()));
        }
        Ok(())
    }

    /// `(channels, length)` of the encoder representation.
    pub fn representation_dim(&self) -> Result<(usize, usize)> {
        let lens = self.encoder.lengths(self.length)?;
        Ok((*self.encoder.channels_per_block.last().expect("validated"), *lens.last().expect("validated")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_examples() {
        let rf = |k, d: Vec<usize>| {
            receptive_field(&TCNHeadConfig {
                layers: d.len(),
                kernel_size: k,
                dilations: d,
                ..TCNHeadConfig::default()
            })
        };
        assert_eq!(rf(2, vec![1]), 2);
        assert_eq!(rf(3, vec![4, 8]), 25);
        assert_eq!(rf(1, vec![3, 9, 27]), 1);
    }

    #[test]
    fn encoder_lengths_and_capping() {
        let enc = EncoderConfig::default();
        assert_eq!(enc.lengths(128).unwrap(), vec![128, 64, 32, 16]);
        assert_eq!(enc.effective_kernels(23).unwrap(), vec![23, 8, 5]);
        assert_eq!(enc.min_input_len(), 8);
        let err = enc.lengths(7).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("too short")));
    }

    #[test]
    fn ordering_classification() {
        let enc = EncoderConfig::default();
        let tcn = TCNHeadConfig::default();
        assert_eq!(tcn.ordering(&enc), KernelOrdering::SmallKernelLargeDilation);
        let swapped = TCNHeadConfig {
            kernel_size: 9,
            dilations: vec![1, 2],
            ..tcn
        };
        assert_eq!(swapped.ordering(&enc), KernelOrdering::LargeKernelSmallDilation);
        assert_eq!(swapped.ordering(&enc).to_string(), "(K1>K2,D<K1)-K2");
        assert!(TCNHeadConfig { dilations: vec![8, 4], ..TCNHeadConfig::default() }.validate().is_err());
    }
}
