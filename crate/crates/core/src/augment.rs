//! Stochastic views of a batch `[B, C, T]`.
//!
//! The default family is jitter → segment permutation → channel-pair
//! rotation, with a different rotation angle for the online and the target
//! view. The jitter-scale family exists for the augmentation-family ablation.

use ndarray::{Array3, ArrayView2, ArrayViewMut2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationFamily {
    /// Both views jitter → permute → rotate.
    JitterPermuteRotate,
    /// Online view jitter → permute → rotate, target view jitter → scale.
    JitterScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub jitter_sigma: f64,
    pub max_segments: usize,
    pub rotation_deg_online: f64,
    pub rotation_deg_target: f64,
    pub family: AugmentationFamily,
    /// Std of the per-channel factor of the scale transform.
    pub scale_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            jitter_sigma: 0.8,
            max_segments: 8,
            rotation_deg_online: 30.0,
            rotation_deg_target: 45.0,
            family: AugmentationFamily::JitterPermuteRotate,
            scale_sigma: 0.1,
        }
    }
}

impl AugmentationConfig {
    /// Every transform at its identity strength.
    pub fn identity() -> Self {
        AugmentationConfig {
            jitter_sigma: 0.0,
            max_segments: 1,
            rotation_deg_online: 0.0,
            rotation_deg_target: 0.0,
            family: AugmentationFamily::JitterPermuteRotate,
            scale_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_segments < 1 {
            return Err(Error::Config("max_segments must be >= 1".into()));
        }
        if !(self.jitter_sigma >= 0.0) || !(self.scale_sigma >= 0.0) {
            return Err(Error::Config("jitter_sigma and scale_sigma must be >= 0".into()));
        }
        if !self.rotation_deg_online.is_finite() || !self.rotation_deg_target.is_finite() {
            return Err(Error::Config("rotation angles must be finite".into()));
        }
        Ok(())
    }
}

/// Online view `x1` and target view `x2` of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub online: Array3<f64>,
    pub target: Array3<f64>,
}

/// Additive Gaussian noise with standard deviation `sigma`.
pub fn jitter(x: &Array3<f64>, sigma: f64, seed: u64) -> Array3<f64> {
    if sigma == 0.0 {
        return x.clone();
    }
    let mut r = Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    x.mapv(|v| v + noise.sample(&mut r))
}

/// Multiply each channel of each sample by a factor drawn from N(1, sigma²).
pub fn scale(x: &Array3<f64>, sigma: f64, seed: u64) -> Array3<f64> {
    if sigma == 0.0 {
        return x.clone();
    }
    let mut r = Rng::seed_from_u64(seed);
    let dist = Normal::new(1.0, sigma).expect("sigma must be finite and non-negative");
    let mut out = x.clone();
    for mut sample in out.outer_iter_mut() {
        for mut lane in sample.outer_iter_mut() {
            let f = dist.sample(&mut r);
            lane.mapv_inplace(|v| v * f);
        }
    }
    out
}

/// Rearrange the time axis of one sample `[C, T]`: cut before each position
/// in `cuts` (ascending, in `1..T`) and emit the segments in `order`.
pub fn apply_segment_permutation(src: ArrayView2<f64>, cuts: &[usize], order: &[usize], mut dst: ArrayViewMut2<f64>) {
    let t = src.dim().1;
    let bounds: Vec<usize> = std::iter::once(0).chain(cuts.iter().copied()).chain(std::iter::once(t)).collect();
    debug_assert_eq!(order.len(), bounds.len() - 1);
    let mut pos = 0;
    for &seg in order {
        let (a, b) = (bounds[seg], bounds[seg + 1]);
        for (ch, mut lane) in dst.outer_iter_mut().enumerate() {
            for s in a..b {
                lane[pos + s - a] = src[[ch, s]];
            }
        }
        pos += b - a;
    }
}

/// Split each sample's time axis into `k ~ U{1..max_segments}` segments at
/// random cut points and shuffle them. All channels of a sample share the
/// same cuts and permutation.
pub fn permute_segments(x: &Array3<f64>, max_segments: usize, seed: u64) -> Result<Array3<f64>> {
    let t = x.dim().2;
    if max_segments < 1 || max_segments > t {
        return Err(Error::Config(format!(
            "max_segments must lie in [1, {t}] for length-{t} series, got {max_segments}"
        )));
    }
    if max_segments == 1 {
        return Ok(x.clone());
    }
    let mut r = Rng::seed_from_u64(seed);
    let mut out = Array3::zeros(x.raw_dim());
    let positions: Vec<usize> = (1..t).collect();
    for (src, dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        let k = r.random_range(1..=max_segments);
        let mut cuts: Vec<usize> = positions.choose_multiple(&mut r, k - 1).copied().collect();
        cuts.sort_unstable();
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut r);
        apply_segment_permutation(src, &cuts, &order, dst);
    }
    Ok(out)
}

/// Givens rotation by `angle_deg` in the plane of each consecutive channel
/// pair `(0,1), (2,3), ...`. A trailing odd channel passes through.
pub fn rotate(x: &Array3<f64>, angle_deg: f64) -> Array3<f64> {
    let mut out = x.clone();
    if angle_deg == 0.0 {
        return out;
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let channels = x.dim().1;
    for mut sample in out.outer_iter_mut() {
        for p in 0..channels / 2 {
            let (i, j) = (2 * p, 2 * p + 1);
            for t in 0..sample.dim().1 {
                let (a, b) = (sample[[i, t]], sample[[j, t]]);
                sample[[i, t]] = c * a - s * b;
                sample[[j, t]] = s * a + c * b;
            }
        }
    }
    out
}

fn jitter_permute_rotate(x: &Array3<f64>, cfg: &AugmentationConfig, angle: f64, r: &mut Rng) -> Result<Array3<f64>> {
    let j = jitter(x, cfg.jitter_sigma, r.next_u64());
    let p = permute_segments(&j, cfg.max_segments, r.next_u64())?;
    Ok(rotate(&p, angle))
}

/// Both views of `x` from the configured family. The two views use
/// independent streams derived from `seed`.
pub fn make_view_pair(x: &Array3<f64>, cfg: &AugmentationConfig, seed: u64) -> Result<ViewPair> {
    cfg.validate()?;
    let mut online_rng = rng::stream(seed, &[tag::VIEW, 0]);
    let mut target_rng = rng::stream(seed, &[tag::VIEW, 1]);
    let online = jitter_permute_rotate(x, cfg, cfg.rotation_deg_online, &mut online_rng)?;
    let target = match cfg.family {
        AugmentationFamily::JitterPermuteRotate => {
            jitter_permute_rotate(x, cfg, cfg.rotation_deg_target, &mut target_rng)?
        }
        AugmentationFamily::JitterScale => {
            let j = jitter(x, cfg.jitter_sigma, target_rng.next_u64());
            scale(&j, cfg.scale_sigma, target_rng.next_u64())
        }
    };
    Ok(ViewPair { online, target })
}

/// The jitter-scale variant regardless of `cfg.family`.
pub fn make_view_pair_different_family(x: &Array3<f64>, cfg: &AugmentationConfig, seed: u64) -> Result<ViewPair> {
    let cfg = AugmentationConfig {
        family: AugmentationFamily::JitterScale,
        ..cfg.clone()
    };
    make_view_pair(x, &cfg, seed)
}
