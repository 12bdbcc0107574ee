//! Self-supervised pretraining.
//!
//! One step: build two augmented views, run the online network on the first
//! and the target network on the second, back-propagate the combined loss
//! into the online network only, take an AdamW step, then move the target
//! toward the online weights by EMA.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::make_view_pair;
use crate::checkpoint::{Checkpoint, StreamState};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::data::{SplitKind, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::nn::{DualNetworkState, ForwardMode, ParamTree, StatUpdate};
use crate::objective::{full_loss_with_grads, LossBreakdown};
use crate::optim::AdamW;
use crate::rng::{self, tag};

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_lfb: f64,
    pub l_hfb: f64,
    pub l_total: f64,
    pub wallclock_s: f64,
}

/// Batches per epoch. A trailing batch of one sample is dropped because
/// batch normalization cannot use it.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size + usize::from(n % batch_size >= 2)
}

/// Shuffled batch indices for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn divergence(state: &DualNetworkState, loss: &LossBreakdown, step_seed: u64) -> Error {
    let mut norms = state.online.norms();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let snapshot: Vec<String> = norms.iter().take(8).map(|(n, v)| format!("{n}={v:.4e}")).collect();
    Error::Divergence(format!(
        "non-finite loss (l_lfb={}, l_hfb={}, l_total={}) for batch seed {step_seed}; largest online norms: {}",
        loss.l_lfb,
        loss.l_hfb,
        loss.l_total,
        snapshot.join(", ")
    ))
}

fn add_scaled(acc: &mut ParamTree, g: &ParamTree, s: f64) {
    for (a, b) in acc.tensors.iter_mut().zip(&g.tensors) {
        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += s * y);
    }
}

/// One regression direction: online on `x_on`, target on `x_tg`.
fn direction(
    state: &DualNetworkState,
    cfg: &TrainConfig,
    x_on: &Array3<f64>,
    x_tg: &Array3<f64>,
    dropout_seed: u64,
) -> Result<(LossBreakdown, ParamTree, Vec<StatUpdate>)> {
    let net = &state.net;
    let (out, cache, updates) = net.forward_online(&state.online, x_on.view(), ForwardMode::train(Some(dropout_seed)))?;
    let tgt = net.forward_target(&state.target, x_tg.view())?;
    let (loss, dq_t, dq_m) = full_loss_with_grads(&out, &tgt, cfg.loss_weights()?)?;
    if !loss.l_total.is_finite() {
        return Err(divergence(state, &loss, dropout_seed));
    }
    let grads = net.backward_online(&state.online, &cache, dq_t.as_ref(), dq_m.as_ref());
    Ok((loss, grads, updates))
}

/// One optimization step on `batch`. `batch_seed` fixes the views and
/// dropout masks.
pub fn train_step(batch: &Array3<f64>, state: &mut DualNetworkState, opt: &mut AdamW, cfg: &TrainConfig, batch_seed: u64) -> Result<LossBreakdown> {
    let views = make_view_pair(batch, &cfg.augmentation, batch_seed)?;
    let dropout_seed = rng::derive_seed(batch_seed, &[tag::DROPOUT]);
    let (mut loss, mut grads, mut updates) = direction(state, cfg, &views.online, &views.target, dropout_seed)?;
    if cfg.symmetric_loss {
        let (l2, g2, u2) = direction(state, cfg, &views.target, &views.online, rng::derive_seed(dropout_seed, &[1]))?;
        for t in grads.tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v *= 0.5);
        }
        add_scaled(&mut grads, &g2, 0.5);
        loss = LossBreakdown {
            l_lfb: 0.5 * (loss.l_lfb + l2.l_lfb),
            l_hfb: 0.5 * (loss.l_hfb + l2.l_hfb),
            l_total: 0.5 * (loss.l_total + l2.l_total),
        };
        updates.extend(u2);
    }
    StatUpdate::apply_all(&updates, &mut state.online);
    opt.step(&mut state.online, &grads)?;
    state.ema_update()?;
    Ok(loss)
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Where to write `train_log.csv` and checkpoints; nothing is written
    /// when `None`.
    pub out_dir: Option<PathBuf>,
    /// Log a wallclock of 0 so the log is byte-identical across runs.
    pub strict_determinism: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: DualNetworkState,
    pub records: Vec<TrainLogRecord>,
    pub epoch_means: Vec<f64>,
    pub optimizer_steps: u64,
    pub ema_updates: u64,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

fn open_log(dir: &Path) -> Result<csv::Writer<File>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(true).from_writer(file))
}

/// Pretrain a fresh online/target pair on the train split `ds`.
pub fn pretrain(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    let tc = &cfg.train;
    tc.validate()?;
    if ds.split != Some(SplitKind::Train) {
        return Err(Error::Contract(format!(
            "pretraining consumes only the train split; got {}",
            ds.split.map_or("an untagged dataset", SplitKind::as_str)
        )));
    }
    if ds.len() < 2 {
        return Err(Error::Data("pretraining needs at least two training samples".into()));
    }
    let spec = tc.network_spec(ds.channels(), ds.length());
    let mut state = DualNetworkState::new(&spec, tc.seed, tc.tau)?;
    let mut opt = AdamW::new(tc.optimizer(), &state.online);
    let mut log = opts.out_dir.as_deref().map(open_log).transpose()?;
    let start = Instant::now();

    let mut records = Vec::new();
    let mut epoch_means = Vec::with_capacity(tc.epochs);
    let mut ema_updates = 0u64;
    let mut step = 0u64;
    let mut best = f64::INFINITY;
    let (mut last_path, mut best_path) = (None, None);
    for epoch in 0..tc.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(ds.len(), tc.batch_size, tc.seed, epoch);
        for idx in &batches {
            let x = ds.batch(idx);
            let batch_seed = rng::derive_seed(tc.seed, &[tag::VIEW, epoch as u64, step]);
            let loss = train_step(&x, &mut state, &mut opt, tc, batch_seed)?;
            ema_updates += 1;
            sum += loss.l_total;
            let rec = TrainLogRecord {
                epoch,
                step,
                l_lfb: loss.l_lfb,
                l_hfb: loss.l_hfb,
                l_total: loss.l_total,
                wallclock_s: if opts.strict_determinism { 0.0 } else { start.elapsed().as_secs_f64() },
            };
            if let Some(w) = log.as_mut() {
                w.serialize(rec)?;
            }
            records.push(rec);
            step += 1;
        }
        let mean = sum / batches.len() as f64;
        epoch_means.push(mean);
        log::info!("epoch {}/{}: mean loss {mean:.5}", epoch + 1, tc.epochs);
        if let Some(dir) = &opts.out_dir {
            if let Some(w) = log.as_mut() {
                w.flush().map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
            }
            let stream = StreamState { seed: tc.seed, epoch: epoch + 1, step };
            let ckpt = Checkpoint::from_state(cfg, &state, stream, Some(mean));
            let last = dir.join(LAST_CHECKPOINT);
            ckpt.save(&last)?;
            last_path = Some(last);
            if mean < best {
                let p = dir.join(BEST_CHECKPOINT);
                ckpt.save(&p)?;
                best_path = Some(p);
            }
        }
        best = best.min(mean);
    }
    Ok(PretrainOutcome {
        state,
        records,
        epoch_means,
        optimizer_steps: opt.steps(),
        ema_updates,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::nn::{ParamKind, Tensor};
    use crate::optim::AdamConfig;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig::from_value(serde_json::json!({
            "preset": "synthetic",
            "train": {
                "epochs": 2,
                "batch_size": 8,
                "encoder": { "kernel_sizes": [5, 3, 3], "channels_per_block": [4, 6, 6] },
                "tcn": { "hidden_dim": 5, "out_dim": 4 },
                "mlp": { "hidden_dim": 6, "out_dim": 4 }
            }
        }))
        .unwrap()
    }

    fn tiny_data(n_per_class: usize) -> TimeSeriesDataset {
        let spec = SyntheticSpec {
            n_per_class,
            length: 32,
            low_freq_classes: vec![1.0, 2.0],
            high_freq_classes: vec![8.0, 12.0],
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, 5).unwrap().with_split(SplitKind::Train)
    }

    fn weights(t: &ParamTree) -> Vec<&Tensor> {
        t.tensors.iter().filter(|t| t.kind == ParamKind::Weight).collect()
    }

    #[test]
    fn step_arithmetic() {
        assert_eq!(40 * steps_per_epoch(7352, 128), 2320);
        assert_eq!(steps_per_epoch(10, 3), 3);
        assert_eq!(steps_per_epoch(11, 3), 4);
        let b = epoch_batches(10, 3, 0, 0);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all.len(), 9);
    }

    #[test]
    fn tau_one_freezes_target_and_optimizer_skips_it() {
        let cfg = tiny_cfg();
        let ds = tiny_data(4);
        let spec = cfg.train.network_spec(3, 32);
        let mut st = DualNetworkState::new(&spec, 1, 1.0).unwrap();
        let mut opt = AdamW::new(cfg.train.optimizer(), &st.online);
        assert_eq!(opt.num_params(), st.online.num_weights());
        let target0 = st.target.clone();
        let online0 = st.online.clone();
        let x = ds.batch(&(0..8).collect::<Vec<_>>());
        for s in 0..3 {
            train_step(&x, &mut st, &mut opt, &cfg.train, s).unwrap();
        }
        assert_eq!(st.target, target0);
        assert_ne!(weights(&st.online), weights(&online0));
    }

    #[test]
    fn zero_learning_rate_keeps_online_weights() {
        let cfg = tiny_cfg();
        let ds = tiny_data(4);
        let x = ds.batch(&(0..8).collect::<Vec<_>>());
        for tau in [0.5, 1.0] {
            let mut st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 1, tau).unwrap();
            st.target.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = crate::nn::to_storage(*v + 0.5)));
            let target0 = st.target.clone();
            let online0 = st.online.clone();
            let mut opt = AdamW::new(AdamConfig { lr: 0.0, ..cfg.train.optimizer() }, &st.online);
            train_step(&x, &mut st, &mut opt, &cfg.train, 0).unwrap();
            assert_eq!(weights(&st.online), weights(&online0));
            assert_eq!(st.target == target0, tau == 1.0);
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = tiny_cfg();
        let ds = tiny_data(4);
        let mut st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 1, 0.9).unwrap();
        let last = st.online.len() - 1;
        st.online.tensors[last].data[0] = f64::NAN;
        let mut opt = AdamW::new(cfg.train.optimizer(), &st.online);
        let x = ds.batch(&(0..8).collect::<Vec<_>>());
        assert!(matches!(train_step(&x, &mut st, &mut opt, &cfg.train, 0), Err(Error::Divergence(_))));
    }

    #[test]
    fn pretrain_rejects_other_splits() {
        let cfg = tiny_cfg();
        let ds = tiny_data(4);
        for s in [SplitKind::Val, SplitKind::Test] {
            let d = ds.clone().with_split(s);
            assert!(matches!(pretrain(&cfg, &d, &PretrainOptions::default()), Err(Error::Contract(_))));
        }
        let mut d = ds.clone();
        d.split = None;
        assert!(pretrain(&cfg, &d, &PretrainOptions::default()).is_err());
    }

    #[test]
    fn pretrain_counts_logs_and_checkpoints() {
        let cfg = tiny_cfg();
        let ds = tiny_data(5); // 20 samples, batch 8 -> 8 + 8 + 4
        let dir = tempfile::tempdir().unwrap();
        let opts = PretrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            strict_determinism: true,
        };
        let out = pretrain(&cfg, &ds, &opts).unwrap();
        assert_eq!(out.records.len(), 2 * steps_per_epoch(20, 8));
        assert_eq!(out.optimizer_steps, out.records.len() as u64);
        assert_eq!(out.ema_updates, out.optimizer_steps);
        assert!(out.records.windows(2).all(|w| (w[0].epoch, w[0].step) < (w[1].epoch, w[1].step)));

        let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,step,l_lfb,l_hfb,l_total,wallclock_s"));
        assert_eq!(lines.count(), out.records.len());

        let last = Checkpoint::load(out.last_checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(last.stream.epoch, 2);
        assert_eq!(last.online, out.state.online);
        assert!(out.best_checkpoint.unwrap().exists());

        let again = tempfile::tempdir().unwrap();
        let out2 = pretrain(
            &cfg,
            &ds,
            &PretrainOptions {
                out_dir: Some(again.path().to_path_buf()),
                strict_determinism: true,
            },
        )
        .unwrap();
        assert_eq!(std::fs::read(again.path().join(LOG_FILE)).unwrap(), text.as_bytes());
        assert_eq!(out2.state.online, out.state.online);
    }

    #[test]
    fn synthetic_preset_loss_mostly_decreases() {
        let mut cfg = ExperimentConfig::preset("synthetic").unwrap();
        cfg.train.epochs = 5;
        let ds = generate_synthetic(&cfg.synthetic, 0).unwrap().with_split(SplitKind::Train);
        let ds = ds.select(&(0..480).collect::<Vec<_>>()).with_split(SplitKind::Train);
        let out = pretrain(&cfg, &ds, &PretrainOptions::default()).unwrap();
        // the first step's loss stands in for the untrained model
        let mut m = vec![out.records[0].l_total];
        m.extend(&out.epoch_means);
        let decreases = m.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreases >= 4, "first-step loss then epoch means: {m:?}");
    }
}
