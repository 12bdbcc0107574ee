//! Downstream protocols: linear probe on a frozen encoder, full fine-tuning
//! on a labeled subset, and the two random-init baselines.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::compute_metrics;
use crate::config::ExperimentConfig;
use crate::data::{subsample_labels, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::nn::modules::{flatten, unflatten, Builder};
use crate::nn::{DualNetworkState, Encoder, ForwardMode, Linear, Network, ParamTree, StatUpdate};
use crate::optim::{AdamConfig, AdamW};
use crate::rng::{self, tag};
use crate::trainer::epoch_batches;

/// Rows per forward pass when embedding a whole split.
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Linear,
    Semisup,
    SupervisedBaseline,
    RandomInitBaseline,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Linear => "linear",
            Protocol::Semisup => "semisup",
            Protocol::SupervisedBaseline => "supervised_baseline",
            Protocol::RandomInitBaseline => "random_init_baseline",
        }
    }

    /// Row label in results tables.
    pub fn method(self) -> &'static str {
        match self {
            Protocol::Linear => "Ours (linear evaluation)",
            Protocol::Semisup => "Ours (fine-tuning)",
            Protocol::SupervisedBaseline => "Supervised",
            Protocol::RandomInitBaseline => "Random Initialization",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub label_fraction: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the configuration the evaluated checkpoint was trained with.
    pub checkpoint_config_hash: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub warnings: Vec<String>,
}

/// Encoder followed by one linear layer on the flattened representation.
/// Parameters are the encoder tensors followed by the classifier tensors.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub encoder: Encoder,
    pub fc: Linear,
    pub params: ParamTree,
    pub in_channels: usize,
    pub length: usize,
}

fn check_shapes(net: &Network, ds: &TimeSeriesDataset) -> Result<()> {
    if ds.channels() != net.spec.in_channels || ds.length() != net.spec.length {
        return Err(Error::Shape(format!(
            "model expects [{}, {}] windows, dataset '{}' has [{}, {}]",
            net.spec.in_channels,
            net.spec.length,
            ds.name,
            ds.channels(),
            ds.length()
        )));
    }
    Ok(())
}

impl ClassifierModel {
    /// Copy the online encoder of `online` and attach a fresh classifier.
    pub fn new(net: &Network, online: &ParamTree, num_classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[tag::PROBE, 0]);
        let mut b = Builder {
            tree: online.prefix(net.encoder.tensor_count()),
            rng: &mut r,
        };
        let fc = b.linear("classifier", net.representation_len(), num_classes);
        ClassifierModel {
            encoder: net.encoder.clone(),
            fc,
            params: b.tree,
            in_channels: net.spec.in_channels,
            length: net.spec.length,
        }
    }

    /// Flattened eval-mode representations of every sample.
    pub fn embed(&self, ds: &TimeSeriesDataset) -> Array2<f64> {
        let dim = self.fc.din;
        let mut out = Array2::<f64>::zeros((ds.len(), dim));
        let all: Vec<usize> = (0..ds.len()).collect();
        for (c, idx) in all.chunks(EMBED_CHUNK).enumerate() {
            let x = ds.batch(idx);
            let z = self.encoder.forward(&self.params, x.view(), ForwardMode::EVAL, &mut Vec::new()).0;
            out.slice_mut(ndarray::s![c * EMBED_CHUNK..c * EMBED_CHUNK + idx.len(), ..]).assign(&flatten(&z));
        }
        out
    }

    pub fn predict_features(&self, feats: &Array2<f64>) -> Vec<usize> {
        argmax_rows(&self.fc.forward(&self.params, feats.view()))
    }

    pub fn predict(&self, ds: &TimeSeriesDataset) -> Vec<usize> {
        self.predict_features(&self.embed(ds))
    }
}

fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (j, (gj, &v)) in g.iter_mut().zip(row.iter()).enumerate() {
            *gj = ((v - log_z).exp() - f64::from(u8::from(j == y))) / b;
        }
    }
    (loss / b, grad)
}

fn downstream_optimizer(cfg: &ExperimentConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.downstream.lr,
        ..cfg.train.optimizer()
    }
}

/// Mini-batches for downstream training; unlike pretraining, a trailing
/// single sample is kept when no batch norm is involved.
fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize, keep_singletons: bool) -> Vec<Vec<usize>> {
    if !keep_singletons {
        return epoch_batches(n, batch_size, seed, epoch);
    }
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Train only the classifier on precomputed features.
fn fit_probe(model: &mut ClassifierModel, feats: &Array2<f64>, labels: &[usize], cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let (w, b) = (model.fc.w, model.fc.b);
    let mut head = ParamTree {
        tensors: vec![model.params.tensors[w].clone(), model.params.tensors[b].clone()],
    };
    let fc = Linear { w: 0, b: 1, ..model.fc.clone() };
    let mut opt = AdamW::new(downstream_optimizer(cfg), &head);
    let order_seed = rng::derive_seed(seed, &[tag::PROBE, 1]);
    for epoch in 0..cfg.downstream.epochs {
        for idx in batches(feats.nrows(), cfg.downstream.batch_size, order_seed, epoch, true) {
            let x = feats.select(Axis(0), &idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, dlogits) = softmax_cross_entropy(&fc.forward(&head, x.view()), &y);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite classifier loss in epoch {epoch}")));
            }
            let mut g = head.zeros_like();
            fc.backward(&head, &mut g, x.view(), dlogits.view(), false);
            opt.step(&mut head, &g)?;
        }
    }
    let mut it = head.tensors.into_iter();
    model.params.tensors[w] = it.next().expect("weight");
    model.params.tensors[b] = it.next().expect("bias");
    Ok(())
}

/// Train encoder and classifier end to end.
fn fit_full(model: &mut ClassifierModel, ds: &TimeSeriesDataset, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    if ds.len() < 2 {
        return Err(Error::Data(format!("fine-tuning needs at least two labeled samples, got {}", ds.len())));
    }
    let mut opt = AdamW::new(downstream_optimizer(cfg), &model.params);
    let order_seed = rng::derive_seed(seed, &[tag::PROBE, 2]);
    let mut step = 0u64;
    for epoch in 0..cfg.downstream.epochs {
        for idx in batches(ds.len(), cfg.downstream.batch_size, order_seed, epoch, false) {
            let x: Array3<f64> = ds.batch(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let mode = ForwardMode::train(Some(rng::derive_seed(seed, &[tag::DROPOUT, step])));
            let mut updates: Vec<StatUpdate> = Vec::new();
            let (z, cache) = model.encoder.forward(&model.params, x.view(), mode, &mut updates);
            let flat = flatten(&z);
            let (loss, dlogits) = softmax_cross_entropy(&model.fc.forward(&model.params, flat.view()), &y);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite fine-tuning loss at step {step}")));
            }
            let mut g = model.params.zeros_like();
            let dflat = model.fc.backward(&model.params, &mut g, flat.view(), dlogits.view(), true).expect("dx requested");
            model.encoder.backward(&model.params, &mut g, &cache, unflatten(dflat, z.dim()), false);
            StatUpdate::apply_all(&updates, &mut model.params);
            opt.step(&mut model.params, &g)?;
            step += 1;
        }
    }
    Ok(())
}

fn check_inputs(cfg: &ExperimentConfig, net: &Network, train: &TimeSeriesDataset, test: &TimeSeriesDataset) -> Result<()> {
    cfg.validate()?;
    check_shapes(net, train)?;
    check_shapes(net, test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("downstream evaluation needs non-empty train and test splits".into()));
    }
    if train.num_classes != test.num_classes {
        return Err(Error::Data(format!(
            "train has {} classes but test has {}",
            train.num_classes, test.num_classes
        )));
    }
    let missing: Vec<usize> = train.class_counts().iter().enumerate().filter(|(_, &c)| c == 0).map(|(k, _)| k).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("classes {missing:?} have no training labels")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn report(
    protocol: Protocol,
    model: &ClassifierModel,
    test: &TimeSeriesDataset,
    cfg: &ExperimentConfig,
    fraction: f64,
    seed: u64,
    n_train: usize,
    warnings: Vec<String>,
) -> Result<EvalReport> {
    let m = compute_metrics(&model.predict(test), &test.labels, test.num_classes)?;
    Ok(EvalReport {
        protocol,
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        per_class_f1: m.per_class_f1,
        label_fraction: fraction,
        seed,
        config_hash: cfg.hash(),
        checkpoint_config_hash: None,
        n_train,
        n_test: test.len(),
        warnings,
    })
}

fn probe(protocol: Protocol, net: &Network, online: &ParamTree, train: &TimeSeriesDataset, test: &TimeSeriesDataset, cfg: &ExperimentConfig, seed: u64) -> Result<EvalReport> {
    check_inputs(cfg, net, train, test)?;
    let mut model = ClassifierModel::new(net, online, train.num_classes, seed);
    let feats = model.embed(train);
    fit_probe(&mut model, &feats, &train.labels, cfg, seed)?;
    report(protocol, &model, test, cfg, 1.0, seed, train.len(), Vec::new())
}

fn finetune(
    protocol: Protocol,
    net: &Network,
    online: &ParamTree,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    cfg: &ExperimentConfig,
    fraction: f64,
    seed: u64,
) -> Result<EvalReport> {
    check_inputs(cfg, net, train, test)?;
    let sub = subsample_labels(train, fraction, seed)?;
    let mut model = ClassifierModel::new(net, online, train.num_classes, seed);
    fit_full(&mut model, &sub.dataset, cfg, seed)?;
    report(protocol, &model, test, cfg, fraction, seed, sub.dataset.len(), sub.warnings)
}

/// Linear classifier on the frozen online encoder of `state`.
pub fn linear_evaluate(state: &DualNetworkState, train: &TimeSeriesDataset, test: &TimeSeriesDataset, cfg: &ExperimentConfig, seed: u64) -> Result<EvalReport> {
    probe(Protocol::Linear, &state.net, &state.online, train, test, cfg, seed)
}

/// Fine-tune the online encoder and a classifier on a stratified `fraction`
/// of the training labels.
pub fn finetune_semisupervised(
    state: &DualNetworkState,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    cfg: &ExperimentConfig,
    fraction: f64,
    seed: u64,
) -> Result<EvalReport> {
    finetune(Protocol::Semisup, &state.net, &state.online, train, test, cfg, fraction, seed)
}

fn fresh_network(cfg: &ExperimentConfig, train: &TimeSeriesDataset, seed: u64) -> Result<(Network, ParamTree)> {
    Network::build(&cfg.train.network_spec(train.channels(), train.length()), seed)
}

/// Encoder and classifier trained end to end from random initialization on
/// `fraction` of the training labels.
pub fn run_supervised_baseline(train: &TimeSeriesDataset, test: &TimeSeriesDataset, cfg: &ExperimentConfig, fraction: f64, seed: u64) -> Result<EvalReport> {
    let (net, p) = fresh_network(cfg, train, seed)?;
    finetune(Protocol::SupervisedBaseline, &net, &p, train, test, cfg, fraction, seed)
}

/// Linear classifier on a frozen, randomly initialized encoder.
pub fn run_random_init_baseline(train: &TimeSeriesDataset, test: &TimeSeriesDataset, cfg: &ExperimentConfig, seed: u64) -> Result<EvalReport> {
    let (net, p) = fresh_network(cfg, train, seed)?;
    probe(Protocol::RandomInitBaseline, &net, &p, train, test, cfg, seed)
}

/// Write `index,label,e_0..e_{d-1}` rows of eval-mode encoder
/// representations. Returns the representation size `d`.
pub fn export_embeddings(state: &DualNetworkState, ds: &TimeSeriesDataset, path: &std::path::Path) -> Result<usize> {
    check_shapes(&state.net, ds)?;
    let model = ClassifierModel::new(&state.net, &state.online, ds.num_classes.max(1), 0);
    let e = model.embed(ds);
    let dim = e.ncols();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..dim).map(|j| format!("e_{j}")));
    w.write_record(&header)?;
    for (i, row) in e.rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string(), ds.labels[i].to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SplitKind, SyntheticSpec};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::from_value(serde_json::json!({
            "preset": "synthetic",
            "train": {
                "encoder": { "kernel_sizes": [5, 3, 3], "channels_per_block": [4, 6, 6] },
                "tcn": { "hidden_dim": 5, "out_dim": 4 },
                "mlp": { "hidden_dim": 6, "out_dim": 4 }
            },
            "downstream": { "epochs": 30, "batch_size": 16, "lr": 1e-2 }
        }))
        .unwrap()
    }

    fn data(n_per_class: usize, seed: u64) -> TimeSeriesDataset {
        let spec = SyntheticSpec {
            n_per_class,
            length: 32,
            low_freq_classes: vec![1.0, 2.0],
            high_freq_classes: vec![8.0, 12.0],
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, seed).unwrap()
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = ndarray::array![[0.3, -1.2, 2.0], [0.0, 0.5, -0.5]];
        let y = [2, 0];
        let (_, g) = softmax_cross_entropy(&logits, &y);
        for i in 0..2 {
            for j in 0..3 {
                let mut a = logits.clone();
                a[[i, j]] += 1e-6;
                let mut b = logits.clone();
                b[[i, j]] -= 1e-6;
                let num = (softmax_cross_entropy(&a, &y).0 - softmax_cross_entropy(&b, &y).0) / 2e-6;
                assert!((num - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_probe_keeps_encoder_frozen_and_is_reproducible() {
        let cfg = cfg();
        let ds = data(10, 1);
        let (train, test) = (ds.select(&(0..30).collect::<Vec<_>>()), ds.select(&(30..40).collect::<Vec<_>>()));
        let st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 2, 0.99).unwrap();
        let before = st.online.clone();
        let a = linear_evaluate(&st, &train, &test, &cfg, 3).unwrap();
        assert_eq!(st.online, before);
        let b = linear_evaluate(&st, &train, &test, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!((a.macro_f1 - a.per_class_f1.iter().sum::<f64>() / 4.0).abs() < 1e-9);

        let mut model = ClassifierModel::new(&st.net, &st.online, 4, 3);
        let feats = model.embed(&train);
        fit_probe(&mut model, &feats, &train.labels, &cfg, 3).unwrap();
        let k = model.encoder.tensor_count();
        assert_eq!(model.params.prefix(k), st.online.prefix(k));
    }

    #[test]
    fn duplicated_samples_are_learned_exactly() {
        let mut cfg = cfg();
        cfg.downstream.epochs = 200;
        cfg.downstream.lr = 5e-2;
        let base = data(1, 4); // one sample per class
        let idx: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let train = base.select(&idx);
        let st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 5, 0.99).unwrap();
        let r = linear_evaluate(&st, &train, &base, &cfg, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let cfg = cfg();
        let ds = data(100, 6);
        let mut labels = ds.labels.clone();
        labels.shuffle(&mut crate::rng::Rng::seed_from_u64(7));
        let noisy = TimeSeriesDataset { labels, ..ds };
        let train = noisy.select(&(0..200).collect::<Vec<_>>());
        let test = noisy.select(&(200..400).collect::<Vec<_>>());
        let st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 8, 0.99).unwrap();
        let r = linear_evaluate(&st, &train, &test, &cfg, 0).unwrap();
        // binomial(200, 1/4): sigma = sqrt(200 * 0.25 * 0.75) / 200
        let sigma = (0.25f64 * 0.75 / 200.0).sqrt();
        assert!((r.accuracy - 0.25).abs() <= 3.0 * sigma, "accuracy {}", r.accuracy);
    }

    #[test]
    fn missing_class_is_a_config_error() {
        let cfg = cfg();
        let ds = data(5, 9);
        let keep: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] != 3).collect();
        let train = ds.select(&keep);
        let st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 0, 0.99).unwrap();
        assert!(matches!(linear_evaluate(&st, &train, &ds, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn semisup_reports_fraction_and_baselines_are_reproducible() {
        let mut cfg = cfg();
        cfg.downstream.epochs = 3;
        let ds = data(10, 10).with_split(SplitKind::Train);
        let test = data(3, 11);
        let st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 0, 0.99).unwrap();
        let r = finetune_semisupervised(&st, &ds, &test, &cfg, 0.1, 1).unwrap();
        assert_eq!(r.label_fraction, 0.1);
        assert_eq!(r.n_train, 4);
        assert_eq!(r.protocol, Protocol::Semisup);
        let full = finetune_semisupervised(&st, &ds, &test, &cfg, 1.0, 1).unwrap();
        assert_eq!(full.n_train, ds.len());
        let a = run_supervised_baseline(&ds, &test, &cfg, 1.0, 2).unwrap();
        let b = run_supervised_baseline(&ds, &test, &cfg, 1.0, 2).unwrap();
        assert_eq!(a, b);
        let c = run_random_init_baseline(&ds, &test, &cfg, 2).unwrap();
        assert_eq!(c.protocol, Protocol::RandomInitBaseline);
    }

    #[test]
    fn embeddings_export_is_stable() {
        let cfg = cfg();
        let ds = data(3, 12);
        let st = DualNetworkState::new(&cfg.train.network_spec(3, 32), 0, 0.99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let d = export_embeddings(&st, &ds, &a).unwrap();
        export_embeddings(&st, &ds, &b).unwrap();
        assert_eq!(d, st.net.representation_len());
        let text = std::fs::read_to_string(&a).unwrap();
        assert_eq!(text, std::fs::read_to_string(&b).unwrap());
        assert_eq!(text.lines().count(), ds.len() + 1);
        assert_eq!(text.lines().next().unwrap().split(',').count(), d + 2);
    }
}
