use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::config::NetworkSpec;
use super::modules::{flatten, unflatten, Builder, Encoder, EncoderCache, ForwardMode, Mlp, MlpCache, StatUpdate, Tcn, TcnCache};
use super::params::{to_storage, ParamTree};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Tcn,
    Mlp,
}

/// Module layout shared by the online and target networks.
///
/// Parameters are laid out encoder, TCN projector, MLP projector, then the
/// predictors, so the target tree is exactly the first `shared_len` tensors
/// of the online tree.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub encoder: Encoder,
    pub tcn_proj: Option<Tcn>,
    pub mlp_proj: Option<Mlp>,
    pub tcn_pred: Option<Mlp>,
    pub mlp_pred: Option<Mlp>,
    pub shared_len: usize,
}

/// Outputs of one network on one view. Predictions exist only for the online
/// network.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub z: Array3<f64>,
    pub t: Option<Array2<f64>>,
    pub m: Option<Array2<f64>>,
    pub q_t: Option<Array2<f64>>,
    pub q_m: Option<Array2<f64>>,
}

pub struct OnlineCache {
    enc: EncoderCache,
    z_dim: (usize, usize, usize),
    tcn: Option<TcnCache>,
    mlp: Option<MlpCache>,
    tcn_pred: Option<MlpCache>,
    mlp_pred: Option<MlpCache>,
}

impl Network {
    /// Lay out the modules for `spec` and initialize a fresh online tree.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<(Network, ParamTree)> {
        spec.validate()?;
        let mut r = rng::stream(seed, &[tag::INIT]);
        let mut b = Builder {
            tree: ParamTree::default(),
            rng: &mut r,
        };
        let enc = &spec.encoder;
        let kernels = enc.effective_kernels(spec.length)?;
        let encoder = Encoder::build(
            &mut b,
            spec.in_channels,
            &enc.channels_per_block,
            &kernels,
            enc.pool_size,
            enc.pool_stride,
            enc.dropout,
        );
        let (c_enc, t_enc) = spec.representation_dim()?;
        let tcn_proj = spec
            .tcn
            .as_ref()
            .map(|t| Tcn::build(&mut b, "tcn_proj", c_enc, t.kernel_size, &t.dilations, t.hidden_dim, t.out_dim));
        let mlp_proj = spec
            .mlp
            .as_ref()
            .map(|m| b.mlp("mlp_proj", c_enc * t_enc, m.hidden_dim, m.out_dim));
        let shared_len = b.tree.len();
        let tcn_pred = spec
            .tcn
            .as_ref()
            .map(|t| b.mlp("tcn_pred", t.out_dim, t.hidden_dim, t.out_dim));
        let mlp_pred = spec
            .mlp
            .as_ref()
            .map(|m| b.mlp("mlp_pred", m.out_dim, m.hidden_dim, m.out_dim));
        let tree = b.tree;
        Ok((
            Network {
                spec: spec.clone(),
                encoder,
                tcn_proj,
                mlp_proj,
                tcn_pred,
                mlp_pred,
                shared_len,
            },
            tree,
        ))
    }

    /// Flattened encoder representation size `C_enc · T_enc`.
    pub fn representation_len(&self) -> usize {
        let (c, t) = self.spec.representation_dim().expect("validated at build");
        c * t
    }

    fn check_input(&self, x: &ArrayView3<f64>) -> Result<()> {
        let (_, c, t) = x.dim();
        if c != self.spec.in_channels || t != self.spec.length {
            return Err(Error::Shape(format!(
                "network expects [B, {}, {}] input, got [B, {c}, {t}]",
                self.spec.in_channels, self.spec.length
            )));
        }
        Ok(())
    }

    pub fn encode(&self, p: &ParamTree, x: ArrayView3<f64>, mode: ForwardMode) -> Result<Array3<f64>> {
        self.check_input(&x)?;
        Ok(self.encoder.forward(p, x, mode, &mut Vec::new()).0)
    }

    /// Online forward: projections and predictions for every enabled branch.
    pub fn forward_online(&self, p: &ParamTree, x: ArrayView3<f64>, mode: ForwardMode) -> Result<(HeadOutputs, OnlineCache, Vec<StatUpdate>)> {
        self.check_input(&x)?;
        let mut updates = Vec::new();
        let training = mode.training;
        let (z, enc) = self.encoder.forward(p, x, mode, &mut updates);
        let (t, tcn) = match &self.tcn_proj {
            Some(h) => {
                let (t, c) = h.forward(p, z.view(), training, &mut updates);
                (Some(t), Some(c))
            }
            None => (None, None),
        };
        let (m, mlp) = match &self.mlp_proj {
            Some(h) => {
                let (m, c) = h.forward(p, flatten(&z), training, &mut updates);
                (Some(m), Some(c))
            }
            None => (None, None),
        };
        let (q_t, tcn_pred) = match (&self.tcn_pred, &t) {
            (Some(h), Some(t)) => {
                let (q, c) = h.forward(p, t.clone(), training, &mut updates);
                (Some(q), Some(c))
            }
            _ => (None, None),
        };
        let (q_m, mlp_pred) = match (&self.mlp_pred, &m) {
            (Some(h), Some(m)) => {
                let (q, c) = h.forward(p, m.clone(), training, &mut updates);
                (Some(q), Some(c))
            }
            _ => (None, None),
        };
        let z_dim = z.dim();
        Ok((
            HeadOutputs { z, t, m, q_t, q_m },
            OnlineCache {
                enc,
                z_dim,
                tcn,
                mlp,
                tcn_pred,
                mlp_pred,
            },
            updates,
        ))
    }

    /// Target forward: projections only, batch statistics, no dropout, no
    /// running-statistic updates.
    pub fn forward_target(&self, p: &ParamTree, x: ArrayView3<f64>) -> Result<HeadOutputs> {
        self.check_input(&x)?;
        let mut discard = Vec::new();
        let (z, _) = self.encoder.forward(p, x, ForwardMode::train(None), &mut discard);
        let t = self.tcn_proj.as_ref().map(|h| h.forward(p, z.view(), true, &mut discard).0);
        let m = self.mlp_proj.as_ref().map(|h| h.forward(p, flatten(&z), true, &mut discard).0);
        Ok(HeadOutputs {
            z,
            t,
            m,
            q_t: None,
            q_m: None,
        })
    }

    /// Apply one predictor to an online projection.
    pub fn predictor_forward(&self, p: &ParamTree, proj: Array2<f64>, kind: PredictorKind, mode: ForwardMode) -> Result<Array2<f64>> {
        let head = match kind {
            PredictorKind::Tcn => self.tcn_pred.as_ref(),
            PredictorKind::Mlp => self.mlp_pred.as_ref(),
        }
        .ok_or_else(|| Error::Contract(format!("{kind:?} branch is disabled")))?;
        Ok(head.forward(p, proj, mode.training, &mut Vec::new()).0)
    }

    /// Gradients of the online tree given upstream gradients on the
    /// predictions.
    pub fn backward_online(&self, p: &ParamTree, cache: &OnlineCache, dq_t: Option<&Array2<f64>>, dq_m: Option<&Array2<f64>>) -> ParamTree {
        let mut g = p.zeros_like();
        let mut dz = Array3::<f64>::zeros(cache.z_dim);
        if let (Some(dq), Some(pred), Some(pc), Some(proj), Some(tc)) =
            (dq_t, &self.tcn_pred, &cache.tcn_pred, &self.tcn_proj, &cache.tcn)
        {
            let dt = pred.backward(p, &mut g, pc, dq.view(), true).expect("dx requested");
            dz += &proj.backward(p, &mut g, tc, dt.view());
        }
        if let (Some(dq), Some(pred), Some(pc), Some(proj), Some(mc)) =
            (dq_m, &self.mlp_pred, &cache.mlp_pred, &self.mlp_proj, &cache.mlp)
        {
            let dm = pred.backward(p, &mut g, pc, dq.view(), true).expect("dx requested");
            let dflat = proj.backward(p, &mut g, mc, dm.view(), true).expect("dx requested");
            dz += &unflatten(dflat, cache.z_dim);
        }
        self.encoder.backward(p, &mut g, &cache.enc, dz, false);
        g
    }
}

/// `target ← τ·target + (1−τ)·online`, elementwise over the shared tensors
/// (weights and batch-norm buffers).
pub fn ema_update(target: &mut ParamTree, online: &ParamTree, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0,1], got {tau}")));
    }
    if online.len() < target.len() {
        return Err(Error::State("online tree is smaller than the target tree".into()));
    }
    target.check_compatible(&online.prefix(target.len()))?;
    for (t, o) in target.tensors.iter_mut().zip(&online.tensors) {
        for (e, &th) in t.data.iter_mut().zip(&o.data) {
            *e = to_storage(tau * *e + (1.0 - tau) * th);
        }
    }
    Ok(())
}

/// Online parameters, target parameters and the EMA decay.
#[derive(Debug, Clone)]
pub struct DualNetworkState {
    pub net: Network,
    pub online: ParamTree,
    pub target: ParamTree,
    pub tau: f64,
}

impl DualNetworkState {
    pub fn new(spec: &NetworkSpec, seed: u64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must lie in [0,1], got {tau}")));
        }
        let (net, online) = Network::build(spec, seed)?;
        let target = online.prefix(net.shared_len);
        Ok(DualNetworkState { net, online, target, tau })
    }

    /// Rebuild from stored trees, checking they match the layout of `spec`.
    pub fn from_trees(spec: &NetworkSpec, online: ParamTree, target: ParamTree, tau: f64) -> Result<Self> {
        let (net, fresh) = Network::build(spec, 0)?;
        fresh.check_compatible(&online)?;
        fresh.prefix(net.shared_len).check_compatible(&target)?;
        Ok(DualNetworkState { net, online, target, tau })
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.target, &self.online, self.tau)
    }

    /// Deterministic dropout stream for a given training step.
    pub fn dropout_seed(seed: u64, step: u64) -> u64 {
        rng::derive_seed(seed, &[tag::DROPOUT, step])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::{receptive_field, EncoderConfig, MLPHeadConfig, TCNHeadConfig};
    use crate::nn::params::ParamKind;
    use crate::nn::modules::Builder;
    use crate::objective::{full_loss_with_grads, LossWeights};
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_distr::StandardNormal;

    fn spec(c: usize, t: usize) -> NetworkSpec {
        NetworkSpec {
            in_channels: c,
            length: t,
            encoder: EncoderConfig::default(),
            tcn: Some(TCNHeadConfig::default()),
            mlp: Some(MLPHeadConfig::default()),
        }
    }

    fn small_spec(c: usize, t: usize) -> NetworkSpec {
        NetworkSpec {
            in_channels: c,
            length: t,
            encoder: EncoderConfig {
                kernel_sizes: vec![5, 3, 3],
                channels_per_block: vec![4, 6, 6],
                dropout: 0.2,
                ..EncoderConfig::default()
            },
            tcn: Some(TCNHeadConfig {
                kernel_size: 2,
                dilations: vec![1, 2],
                hidden_dim: 5,
                out_dim: 4,
                ..TCNHeadConfig::default()
            }),
            mlp: Some(MLPHeadConfig { hidden_dim: 7, out_dim: 4 }),
        }
    }

    fn randn(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut r = crate::rng::Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| r.sample(StandardNormal))
    }

    #[test]
    fn shape_contract_across_dataset_shapes() {
        // (channels, length, expected encoder length)
        for (c, t, t_enc) in [(9, 128, 16), (1, 178, 22), (1, 3000, 375), (1, 23, 2)] {
            let (net, p) = Network::build(&spec(c, t), 1).unwrap();
            let x = randn((2, c, t), 2);
            let (out, _, _) = net.forward_online(&p, x.view(), ForwardMode::train(Some(3))).unwrap();
            assert_eq!(out.z.dim(), (2, 128, t_enc));
            assert_eq!(out.t.as_ref().unwrap().dim(), (2, 128));
            assert_eq!(out.m.as_ref().unwrap().dim(), (2, 128));
            assert_eq!(out.q_t.as_ref().unwrap().dim(), (2, 128));
            assert_eq!(out.q_m.as_ref().unwrap().dim(), (2, 128));
            let tgt = net.forward_target(&p.prefix(net.shared_len), x.view()).unwrap();
            assert!(tgt.q_t.is_none() && tgt.q_m.is_none());
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let (net, p) = Network::build(&small_spec(3, 32), 0).unwrap();
        assert!(matches!(net.encode(&p, randn((2, 4, 32), 0).view(), ForwardMode::EVAL), Err(Error::Shape(_))));
        assert!(matches!(Network::build(&small_spec(3, 4), 0), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_gives_zero_representation() {
        let (net, p) = Network::build(&spec(9, 128), 4).unwrap();
        let x = Array3::<f64>::zeros((3, 9, 128));
        for mode in [ForwardMode::EVAL, ForwardMode::train(None)] {
            assert!(net.encode(&p, x.view(), mode).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let (net, p) = Network::build(&small_spec(3, 32), 5).unwrap();
        let x = randn((4, 3, 32), 6);
        let a = net.forward_online(&p, x.view(), ForwardMode::EVAL).unwrap().0;
        let b = net.forward_online(&p, x.view(), ForwardMode::EVAL).unwrap().0;
        assert_eq!(a.z, b.z);
        assert_eq!(a.q_t, b.q_t);
        assert_eq!(a.q_m, b.q_m);
        let (net2, p2) = Network::build(&small_spec(3, 32), 5).unwrap();
        assert_eq!(net2.encode(&p2, x.view(), ForwardMode::EVAL).unwrap(), a.z);
    }

    fn build_tcn(cin: usize, k: usize, dilations: &[usize], seed: u64) -> (Tcn, ParamTree) {
        let mut r = crate::rng::Rng::seed_from_u64(seed);
        let mut b = Builder {
            tree: ParamTree::default(),
            rng: &mut r,
        };
        let tcn = Tcn::build(&mut b, "tcn", cin, k, dilations, 3, 2);
        (tcn, b.tree)
    }

    #[test]
    fn tcn_is_causal() {
        let (tcn, p) = build_tcn(4, 3, &[4, 8], 7);
        let z = randn((2, 4, 40), 8);
        let base = tcn.features(&p, z.view(), false);
        for t in [0, 13, 39] {
            let mut zp = z.clone();
            zp[[0, 1, t]] += 2.5;
            zp[[1, 3, t]] -= 1.0;
            let f = tcn.features(&p, zp.view(), false);
            for s in 0..40 {
                let same = f.index_axis(ndarray::Axis(2), s) == base.index_axis(ndarray::Axis(2), s);
                if s < t {
                    assert!(same, "position {s} changed by perturbation at {t}");
                }
            }
            assert!(f.index_axis(ndarray::Axis(2), t) != base.index_axis(ndarray::Axis(2), t));
        }
    }

    #[test]
    fn receptive_field_matches_impulse_support() {
        for k in [1usize, 2, 3, 5] {
            for dil in [vec![1usize], vec![2, 4], vec![4, 8]] {
                let cfg = TCNHeadConfig {
                    layers: dil.len(),
                    kernel_size: k,
                    dilations: dil.clone(),
                    ..TCNHeadConfig::default()
                };
                let (tcn, mut p) = build_tcn(2, k, &dil, 9);
                for layer in &tcn.layers {
                    for idx in [Some(layer.conv.w), layer.down.as_ref().map(|d| d.w)].into_iter().flatten() {
                        p.get_mut(idx).iter_mut().for_each(|w| *w = 0.5);
                    }
                }
                let len = 64;
                let mut z = Array3::<f64>::zeros((1, 2, len));
                z[[0, 0, 0]] = 1.0;
                let f = tcn.features(&p, z.view(), false);
                let last_nonzero = (0..len)
                    .filter(|&s| f.index_axis(ndarray::Axis(2), s).iter().any(|&v| v != 0.0))
                    .max()
                    .unwrap();
                assert_eq!(last_nonzero + 1, receptive_field(&cfg), "K={k} D={dil:?}");
            }
        }
    }

    #[test]
    fn predictor_keeps_dim_and_zero_weights_give_zero() {
        let s = small_spec(3, 32);
        let (net, mut p) = Network::build(&s, 10).unwrap();
        let proj = randn((5, 4, 1), 11).remove_axis(ndarray::Axis(2));
        for kind in [PredictorKind::Tcn, PredictorKind::Mlp] {
            let q = net.predictor_forward(&p, proj.clone(), kind, ForwardMode::train(None)).unwrap();
            assert_eq!(q.dim(), proj.dim());
        }
        let mlp = net.mlp_pred.clone().unwrap();
        for idx in [mlp.l1.w, mlp.l1.b, mlp.l2.w, mlp.l2.b] {
            p.get_mut(idx).iter_mut().for_each(|w| *w = 0.0);
        }
        let q = net.predictor_forward(&p, proj, PredictorKind::Mlp, ForwardMode::train(None)).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabled_branch_has_no_predictor() {
        let mut s = small_spec(3, 32);
        s.tcn = None;
        let (net, p) = Network::build(&s, 0).unwrap();
        assert!(matches!(
            net.predictor_forward(&p, Array2::zeros((2, 4)), PredictorKind::Tcn, ForwardMode::EVAL),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ema_fixed_points_and_scalar_example() {
        let mut st = DualNetworkState::new(&small_spec(3, 32), 0, 1.0).unwrap();
        st.online.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = to_storage(*v + 0.25)));
        let before = st.target.clone();
        st.ema_update().unwrap();
        assert_eq!(st.target, before);
        st.tau = 0.0;
        st.ema_update().unwrap();
        assert_eq!(st.target, st.online.prefix(st.net.shared_len));

        st.target.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 1.0));
        st.online.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        ema_update(&mut st.target, &st.online, 0.99).unwrap();
        assert!(st.target.tensors.iter().flat_map(|t| &t.data).all(|&v| (v - 0.99).abs() < 1e-7));
    }

    #[test]
    fn ema_rejects_mismatched_trees() {
        let a = DualNetworkState::new(&small_spec(3, 32), 0, 0.9).unwrap();
        let mut b = DualNetworkState::new(&small_spec(2, 32), 0, 0.9).unwrap();
        assert!(matches!(ema_update(&mut b.target, &a.online, 0.5), Err(Error::State(_))));
        assert!(ema_update(&mut b.target, &a.online, 1.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ema_is_convex(tau in prop_oneof![Just(0.0), Just(0.5), Just(0.996), Just(1.0), 0.0f64..=1.0], seed in 0u64..1000) {
            let mut st = DualNetworkState::new(&small_spec(2, 16), seed, tau).unwrap();
            let mut r = crate::rng::Rng::seed_from_u64(seed);
            for t in st.online.tensors.iter_mut() {
                for v in t.data.iter_mut() {
                    *v = to_storage(*v + r.sample::<f64, _>(StandardNormal));
                }
            }
            let before = st.target.clone();
            let online = st.online.clone();
            st.ema_update().unwrap();
            prop_assert_eq!(&st.online, &online);
            for ((a, b), o) in st.target.tensors.iter().zip(&before.tensors).zip(&online.tensors) {
                for ((&new, &old), &th) in a.data.iter().zip(&b.data).zip(&o.data) {
                    prop_assert!(new >= old.min(th) && new <= old.max(th));
                }
            }
        }
    }

    fn total_loss(net: &Network, p: &ParamTree, x1: &Array3<f64>, tgt: &HeadOutputs, w: LossWeights) -> f64 {
        let (out, _, _) = net.forward_online(p, x1.view(), ForwardMode::train(Some(42))).unwrap();
        full_loss_with_grads(&out, tgt, w).unwrap().0.l_total
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let s = small_spec(3, 32);
        let (net, p) = Network::build(&s, 12).unwrap();
        let x1 = randn((6, 3, 32), 13);
        let x2 = randn((6, 3, 32), 14);
        let target = p.prefix(net.shared_len);
        let tgt = net.forward_target(&target, x2.view()).unwrap();
        let w = LossWeights::new(0.51).unwrap();
        let (out, cache, _) = net.forward_online(&p, x1.view(), ForwardMode::train(Some(42))).unwrap();
        let (_, dq_t, dq_m) = full_loss_with_grads(&out, &tgt, w).unwrap();
        let g = net.backward_online(&p, &cache, dq_t.as_ref(), dq_m.as_ref());

        let mut r = crate::rng::Rng::seed_from_u64(15);
        let weights: Vec<usize> = (0..p.len()).filter(|&i| p.tensors[i].kind == ParamKind::Weight).collect();
        let h = 1e-4;
        let mut checked = 0;
        while checked < 10 {
            let ti = weights[r.random_range(0..weights.len())];
            let j = r.random_range(0..p.tensors[ti].data.len());
            let analytic = g.tensors[ti].data[j];
            let mut pp = p.clone();
            pp.tensors[ti].data[j] += h;
            let up = total_loss(&net, &pp, &x1, &tgt, w);
            pp.tensors[ti].data[j] -= 2.0 * h;
            let down = total_loss(&net, &pp, &x1, &tgt, w);
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-7 {
                // both vanish (e.g. a dead ReLU path); nothing to compare
                assert!((analytic - numeric).abs() < 1e-8);
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            assert!(rel < 1e-3, "{}[{j}]: analytic {analytic} numeric {numeric} rel {rel}", p.tensors[ti].name);
            checked += 1;
        }
        // the target tree receives no gradient: its tensors are not part of `g`
        assert_eq!(g.len(), p.len());
    }
}
