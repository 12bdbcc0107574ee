//! Ablation grids: head branches, augmentation family, TCN kernel/dilation
//! ordering, and the loss weight.
//!
//! Every grid point is pretrained from scratch and scored by the linear
//! probe, once per seed. Grid points are independent and run on the rayon
//! pool.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::augment::AugmentationFamily;
use crate::config::ExperimentConfig;
use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::eval::{linear_evaluate, mean_std, pct, run_random_init_baseline, write_csv, EvalReport};
use crate::nn::{KernelOrdering, TCNHeadConfig};
use crate::trainer::{pretrain, PretrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Heads,
    Augmentation,
    Kernel,
    Lambda,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Heads => "heads",
            AblationAxis::Augmentation => "augmentation",
            AblationAxis::Kernel => "kernel",
            AblationAxis::Lambda => "lambda",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(AblationAxis::Heads),
            "augmentation" => Ok(AblationAxis::Augmentation),
            "kernel" => Ok(AblationAxis::Kernel),
            "lambda" => Ok(AblationAxis::Lambda),
            other => Err(Error::Config(format!("unknown ablation axis '{other}' (heads, augmentation, kernel, lambda)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    Pretrained,
    /// Linear probe on an untrained encoder.
    RandomInit,
}

#[derive(Debug, Clone)]
pub struct Variant {
    /// Directory-safe identifier.
    pub slug: String,
    /// Row label in the comparison table.
    pub label: String,
    pub kind: VariantKind,
    pub cfg: ExperimentConfig,
}

fn variant(slug: &str, label: impl Into<String>, cfg: ExperimentConfig) -> Result<Variant> {
    cfg.validate()?;
    Ok(Variant {
        slug: slug.to_string(),
        label: label.into(),
        kind: VariantKind::Pretrained,
        cfg,
    })
}

/// TCN settings with `K1 < K2` and dilations `> K1`, where `K2` is the
/// smallest encoder kernel.
pub fn small_kernel_large_dilation(base: &ExperimentConfig) -> TCNHeadConfig {
    let t = &base.train.tcn;
    if t.ordering(&base.train.encoder) == KernelOrdering::SmallKernelLargeDilation {
        return t.clone();
    }
    let k = 3.min(base.train.encoder.min_kernel().saturating_sub(1)).max(1);
    TCNHeadConfig {
        kernel_size: k,
        dilations: (0..t.layers).map(|i| (k + 1) << i).collect(),
        ..t.clone()
    }
}

/// TCN settings with `K1 > K2` and dilations `< K1`.
pub fn large_kernel_small_dilation(base: &ExperimentConfig) -> TCNHeadConfig {
    let t = &base.train.tcn;
    let dilations: Vec<usize> = (0..t.layers).map(|i| 1 << i).collect();
    let k = (base.train.encoder.min_kernel() + 1).max(dilations.last().copied().unwrap_or(1) + 1);
    TCNHeadConfig {
        kernel_size: k,
        dilations,
        ..t.clone()
    }
}

/// Grid points for one axis. The lambda axis uses `base.ablation.lambda_grid`.
pub fn variants(base: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<Variant>> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let mut out = Vec::new();
    match axis {
        AblationAxis::Heads => {
            let full = with(&|c| {
                c.train.disable_tcn_head = false;
                c.train.disable_mlp_head = false;
            });
            out.push(variant("full", "Ours (TCN + MLP)", full.clone())?);
            out.push(variant("no_mlp_head", "TCN head only (no MLP head)", with(&|c| {
                c.train.disable_tcn_head = false;
                c.train.disable_mlp_head = true;
            }))?);
            out.push(variant("no_tcn_head", "MLP head only (no TCN head)", with(&|c| {
                c.train.disable_tcn_head = true;
                c.train.disable_mlp_head = false;
            }))?);
            out.push(Variant {
                slug: "random_init".into(),
                label: "Random Initialization".into(),
                kind: VariantKind::RandomInit,
                cfg: full,
            });
        }
        AblationAxis::Augmentation => {
            out.push(variant("same_family", "Same Aug", with(&|c| c.train.augmentation.family = AugmentationFamily::JitterPermuteRotate))?);
            out.push(variant("different_family", "Different Aug", with(&|c| c.train.augmentation.family = AugmentationFamily::JitterScale))?);
        }
        AblationAxis::Kernel => {
            for (slug, tcn) in [
                ("small_kernel_large_dilation", small_kernel_large_dilation(base)),
                ("large_kernel_small_dilation", large_kernel_small_dilation(base)),
            ] {
                let label = tcn.ordering(&base.train.encoder).to_string();
                out.push(variant(slug, label, with(&|c| c.train.tcn = tcn.clone()))?);
            }
        }
        AblationAxis::Lambda => {
            if base.ablation.lambda_grid.is_empty() {
                return Err(Error::Config("ablation.lambda_grid is empty".into()));
            }
            for &l in &base.ablation.lambda_grid {
                out.push(variant(&format!("lambda_{l}"), format!("λ={l}"), with(&|c| c.train.lambda = l))?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: String,
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
    /// Mean loss of the last pretraining epoch.
    pub final_loss: Option<f64>,
}

/// Pretrain (unless random-init) and linearly evaluate one grid point.
pub fn run_variant(
    v: &Variant,
    seed: u64,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    out_dir: Option<&Path>,
    strict_determinism: bool,
) -> Result<AblationRun> {
    let mut cfg = v.cfg.clone();
    cfg.train.seed = seed;
    let (report, final_loss) = match v.kind {
        VariantKind::RandomInit => (run_random_init_baseline(train, test, &cfg, seed)?, None),
        VariantKind::Pretrained => {
            let opts = PretrainOptions {
                out_dir: out_dir.map(|d| d.join(&v.slug).join(format!("seed{seed}"))),
                strict_determinism,
            };
            let out = pretrain(&cfg, train, &opts)?;
            let mut report = linear_evaluate(&out.state, train, test, &cfg, seed)?;
            report.checkpoint_config_hash = Some(cfg.hash());
            (report, out.epoch_means.last().copied())
        }
    };
    log::info!("{} seed {seed}: acc {:.4} mf1 {:.4}", v.slug, report.accuracy, report.macro_f1);
    Ok(AblationRun {
        variant: v.slug.clone(),
        label: v.label.clone(),
        seed,
        report,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub label: String,
    pub seeds: usize,
    #[serde(rename = "ACC")]
    pub acc: String,
    #[serde(rename = "MF1")]
    pub mf1: String,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub mf1_mean: f64,
    pub mf1_std: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize)]
struct RunRow<'a> {
    axis: &'a str,
    variant: &'a str,
    seed: u64,
    accuracy: f64,
    macro_f1: f64,
    final_loss: Option<f64>,
    config_hash: &'a str,
}

pub fn summarize(axis: AblationAxis, variants: &[Variant], runs: &[AblationRun]) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|v| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v.slug).collect();
            let acc: Vec<f64> = rs.iter().map(|r| r.report.accuracy).collect();
            let mf1: Vec<f64> = rs.iter().map(|r| r.report.macro_f1).collect();
            let (am, asd) = mean_std(&acc);
            let (fm, fsd) = mean_std(&mf1);
            AblationRow {
                axis: axis.as_str().into(),
                variant: v.slug.clone(),
                label: v.label.clone(),
                seeds: rs.len(),
                acc: pct(am, asd),
                mf1: pct(fm, fsd),
                acc_mean: am,
                acc_std: asd,
                mf1_mean: fm,
                mf1_std: fsd,
                config_hash: v.cfg.hash(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
    /// `ablation_<axis>.csv`, when an output directory was given.
    pub table: Option<PathBuf>,
}

/// Run every grid point of `axis` for every seed in `base.ablation.seeds`.
pub fn run_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    out_dir: Option<&Path>,
    strict_determinism: bool,
) -> Result<AblationResult> {
    if base.ablation.seeds.is_empty() {
        return Err(Error::Config("ablation.seeds is empty".into()));
    }
    let vs = variants(base, axis)?;
    let jobs: Vec<(&Variant, u64)> = vs.iter().flat_map(|v| base.ablation.seeds.iter().map(move |&s| (v, s))).collect();
    let axis_dir = out_dir.map(|d| d.join(format!("ablation_{}", axis.as_str())));
    let runs = jobs
        .par_iter()
        .map(|&(v, s)| run_variant(v, s, train, test, axis_dir.as_deref(), strict_determinism))
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(axis, &vs, &runs);
    let table = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let runs_rows: Vec<RunRow> = runs
                .iter()
                .map(|r| RunRow {
                    axis: axis.as_str(),
                    variant: &r.variant,
                    seed: r.seed,
                    accuracy: r.report.accuracy,
                    macro_f1: r.report.macro_f1,
                    final_loss: r.final_loss,
                    config_hash: &r.report.config_hash,
                })
                .collect();
            write_csv(&dir.join(format!("ablation_{}_runs.csv", axis.as_str())), &runs_rows)?;
            let path = dir.join(format!("ablation_{}.csv", axis.as_str()));
            write_csv(&path, &rows)?;
            Some(path)
        }
        None => None,
    };
    Ok(AblationResult { runs, rows, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_expected_rows() {
        let base = ExperimentConfig::preset("synthetic").unwrap();
        let lam = variants(&base, AblationAxis::Lambda).unwrap();
        assert_eq!(lam.iter().map(|v| v.cfg.train.lambda).collect::<Vec<_>>(), vec![0.005, 0.5, 5.0, 500.0]);
        let k = variants(&base, AblationAxis::Kernel).unwrap();
        let labels: Vec<&str> = k.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, vec!["(K1<K2,D>K1)-K2", "(K1>K2,D<K1)-K2"]);
        let h = variants(&base, AblationAxis::Heads).unwrap();
        assert_eq!(h.len(), 4);
        assert!(h[2].cfg.train.disable_tcn_head && !h[2].cfg.train.disable_mlp_head);
        let a = variants(&base, AblationAxis::Augmentation).unwrap();
        assert_eq!(a[1].cfg.train.augmentation.family, AugmentationFamily::JitterScale);
        assert!("bogus".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn kernel_variants_for_short_series_encoders() {
        let mut base = ExperimentConfig::preset("synthetic").unwrap();
        base.train.encoder.kernel_sizes = vec![3, 3, 3];
        let a = small_kernel_large_dilation(&base);
        let b = large_kernel_small_dilation(&base);
        assert_eq!(a.ordering(&base.train.encoder), KernelOrdering::SmallKernelLargeDilation);
        assert_eq!(b.ordering(&base.train.encoder), KernelOrdering::LargeKernelSmallDilation);
    }
}
