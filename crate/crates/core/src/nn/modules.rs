//! Layers bound to tensors of a [`ParamTree`] by index.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Ix2, Ix3};
use rand::Rng as _;

use super::ops::{self, BatchNormCache, BatchStats, ConvCache, MaxPoolCache};
use super::params::{ParamKind, ParamTree};
use crate::rng::Rng;

/// How a forward pass treats batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch statistics instead of running statistics.
    pub training: bool,
    /// Dropout stream; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode {
        training: false,
        dropout_seed: None,
    };

    pub fn train(dropout_seed: Option<u64>) -> Self {
        ForwardMode {
            training: true,
            dropout_seed,
        }
    }
}

/// Batch statistics to fold into running buffers `(mean_idx, var_idx)`.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: usize,
    pub var: usize,
    pub stats: BatchStats,
}

impl StatUpdate {
    pub fn apply_all(updates: &[StatUpdate], tree: &mut ParamTree) {
        let m = ops::BN_MOMENTUM;
        for u in updates {
            for (r, &b) in tree.get_mut(u.mean).iter_mut().zip(&u.stats.mean) {
                *r = super::to_storage((1.0 - m) * *r + m * b);
            }
            for (r, &b) in tree.get_mut(u.var).iter_mut().zip(&u.stats.var_unbiased) {
                *r = super::to_storage((1.0 - m) * *r + m * b);
            }
        }
    }
}

fn two_mut(tree: &mut ParamTree, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b, "tensor indices must be ordered");
    let (lo, hi) = tree.tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

/// Parameter initialization stream.
pub(crate) struct Builder<'a> {
    pub tree: ParamTree,
    pub rng: &'a mut Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, dilation: usize, causal: bool) -> Conv {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        let data = self.uniform(cout * cin * k, bound);
        let w = self.tree.push(format!("{name}.weight"), vec![cout, cin, k], ParamKind::Weight, data);
        let b = self.tree.push(format!("{name}.bias"), vec![cout], ParamKind::Weight, vec![0.0; cout]);
        let pad_left = if causal { (k - 1) * dilation } else { (k - 1) / 2 };
        Conv {
            w,
            b,
            cout,
            cin,
            k,
            dilation,
            pad_left,
        }
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) -> BatchNorm {
        let gamma = self.tree.push(format!("{name}.gamma"), vec![c], ParamKind::Weight, vec![1.0; c]);
        let beta = self.tree.push(format!("{name}.beta"), vec![c], ParamKind::Weight, vec![0.0; c]);
        let mean = self.tree.push(format!("{name}.running_mean"), vec![c], ParamKind::Buffer, vec![0.0; c]);
        let var = self.tree.push(format!("{name}.running_var"), vec![c], ParamKind::Buffer, vec![1.0; c]);
        BatchNorm { gamma, beta, mean, var }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let bound = 1.0 / (din as f64).sqrt();
        let data = self.uniform(dout * din, bound);
        let w = self.tree.push(format!("{name}.weight"), vec![dout, din], ParamKind::Weight, data);
        let b = self.tree.push(format!("{name}.bias"), vec![dout], ParamKind::Weight, vec![0.0; dout]);
        Linear { w, b, din, dout }
    }

    pub fn mlp(&mut self, name: &str, din: usize, hidden: usize, dout: usize) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.fc1"), din, hidden),
            bn: self.batchnorm(&format!("{name}.bn"), hidden),
            l2: self.linear(&format!("{name}.fc2"), hidden, dout),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub dilation: usize,
    pub pad_left: usize,
}

impl Conv {
    pub fn forward(&self, p: &ParamTree, x: ArrayView3<f64>) -> (Array3<f64>, ConvCache) {
        ops::conv1d_forward(x, p.get(self.w), p.get(self.b), self.cout, self.k, self.dilation, self.pad_left)
    }

    pub fn backward(&self, p: &ParamTree, g: &mut ParamTree, cache: &ConvCache, dy: ArrayView3<f64>, need_dx: bool) -> Option<Array3<f64>> {
        let (dw, db) = two_mut(g, self.w, self.b);
        ops::conv1d_backward(cache, dy, p.get(self.w), dw, db, self.k, self.dilation, self.pad_left, need_dx)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl BatchNorm {
    pub fn forward(
        &self,
        p: &ParamTree,
        x: ArrayView3<f64>,
        training: bool,
        updates: &mut Vec<StatUpdate>,
    ) -> (Array3<f64>, BatchNormCache) {
        let running = (!training).then(|| (p.get(self.mean), p.get(self.var)));
        let (y, cache, stats) = ops::batchnorm_forward(x, p.get(self.gamma), p.get(self.beta), running);
        if let Some(stats) = stats {
            updates.push(StatUpdate {
                mean: self.mean,
                var: self.var,
                stats,
            });
        }
        (y, cache)
    }

    pub fn backward(&self, p: &ParamTree, g: &mut ParamTree, cache: &BatchNormCache, dy: ArrayView3<f64>) -> Array3<f64> {
        let (dg, db) = two_mut(g, self.gamma, self.beta);
        ops::batchnorm_backward(cache, dy, p.get(self.gamma), dg, db)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward(&self, p: &ParamTree, x: ArrayView2<f64>) -> Array2<f64> {
        ops::linear_forward(x, p.get(self.w), p.get(self.b), self.dout)
    }

    pub fn backward(&self, p: &ParamTree, g: &mut ParamTree, x: ArrayView2<f64>, dy: ArrayView2<f64>, need_dx: bool) -> Option<Array2<f64>> {
        let (dw, db) = two_mut(g, self.w, self.b);
        ops::linear_backward(x, dy, p.get(self.w), dw, db, need_dx)
    }
}

fn as3(x: &Array2<f64>) -> ArrayView3<'_, f64> {
    x.view().insert_axis(Axis(2))
}

fn into2(x: Array3<f64>) -> Array2<f64> {
    x.remove_axis(Axis(2))
}

/// linear → batch norm → ReLU → linear on `[B, D]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub bn: BatchNorm,
    pub l2: Linear,
}

pub struct MlpCache {
    x: Array2<f64>,
    bn: BatchNormCache,
    act: Array2<f64>,
}

impl Mlp {
    pub fn forward(&self, p: &ParamTree, x: Array2<f64>, training: bool, updates: &mut Vec<StatUpdate>) -> (Array2<f64>, MlpCache) {
        let h = self.l1.forward(p, x.view());
        let (n, bn) = self.bn.forward(p, as3(&h), training, updates);
        let act = into2(ops::relu_forward(n));
        let y = self.l2.forward(p, act.view());
        (y, MlpCache { x, bn, act })
    }

    pub fn backward(&self, p: &ParamTree, g: &mut ParamTree, cache: &MlpCache, dy: ArrayView2<f64>, need_dx: bool) -> Option<Array2<f64>> {
        let dact = self.l2.backward(p, g, cache.act.view(), dy, true).expect("dx requested");
        let act3 = cache.act.clone().insert_axis(Axis(2));
        let dn = ops::relu_backward(&act3, dact.insert_axis(Axis(2)));
        let dh = into2(self.bn.backward(p, g, &cache.bn, dn.view()));
        self.l1.backward(p, g, cache.x.view(), dh.view(), need_dx)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
}

/// Stack of conv → batch norm → ReLU → max-pool → dropout blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub dropout: f64,
}

struct BlockCache {
    conv: ConvCache,
    bn: BatchNormCache,
    act: Array3<f64>,
    pool: MaxPoolCache,
    mask: Option<Array3<f64>>,
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
}

impl Encoder {
    pub(crate) fn build(b: &mut Builder<'_>, in_channels: usize, channels: &[usize], kernels: &[usize], pool_size: usize, pool_stride: usize, dropout: f64) -> Self {
        let mut cin = in_channels;
        let blocks = channels
            .iter()
            .zip(kernels)
            .enumerate()
            .map(|(i, (&cout, &k))| {
                let block = EncoderBlock {
                    conv: b.conv(&format!("encoder.block{i}.conv"), cout, cin, k, 1, false),
                    bn: b.batchnorm(&format!("encoder.block{i}.bn"), cout),
                };
                cin = cout;
                block
            })
            .collect();
        Encoder {
            blocks,
            pool_size,
            pool_stride,
            dropout,
        }
    }

    /// Number of leading tensors of the tree that belong to the encoder.
    pub fn tensor_count(&self) -> usize {
        self.blocks.iter().map(|b| b.bn.var.max(b.conv.b) + 1).max().unwrap_or(0)
    }

    pub fn forward(&self, p: &ParamTree, x: ArrayView3<f64>, mode: ForwardMode, updates: &mut Vec<StatUpdate>) -> (Array3<f64>, EncoderCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.to_owned();
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, conv) = block.conv.forward(p, h.view());
            let (y, bn) = block.bn.forward(p, y.view(), mode.training, updates);
            let act = ops::relu_forward(y);
            let (mut y, pool) = ops::maxpool_forward(act.view(), self.pool_size, self.pool_stride);
            let mask = match mode.dropout_seed {
                Some(seed) if self.dropout > 0.0 => {
                    let m = ops::dropout_mask(y.dim(), self.dropout, crate::rng::derive_seed(seed, &[i as u64]));
                    y *= &m;
                    Some(m)
                }
                _ => None,
            };
            caches.push(BlockCache { conv, bn, act, pool, mask });
            h = y;
        }
        (h, EncoderCache { blocks: caches })
    }

    /// Returns the input gradient only when `need_dx`.
    pub fn backward(&self, p: &ParamTree, g: &mut ParamTree, cache: &EncoderCache, dz: Array3<f64>, need_dx: bool) -> Option<Array3<f64>> {
        let mut d = dz;
        for (i, (block, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if let Some(m) = &c.mask {
                d *= m;
            }
            let dact = ops::maxpool_backward(&c.pool, d.view());
            let dy = ops::relu_backward(&c.act, dact);
            let dconv = block.bn.backward(p, g, &c.bn, dy.view());
            let want_dx = i > 0 || need_dx;
            match block.conv.backward(p, g, &c.conv, dconv.view(), want_dx) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }
}

#[derive(Debug, Clone)]
pub struct TcnLayer {
    pub bn: BatchNorm,
    pub conv: Conv,
    /// 1×1 convolution on the residual path when channel counts differ.
    pub down: Option<Conv>,
}

/// Dilated causal TCN stack followed by a linear projection of the last
/// timestep.
#[derive(Debug, Clone)]
pub struct Tcn {
    pub layers: Vec<TcnLayer>,
    pub proj: Linear,
}

struct TcnLayerCache {
    bn: BatchNormCache,
    act: Array3<f64>,
    conv: ConvCache,
    down: Option<ConvCache>,
}

pub struct TcnCache {
    layers: Vec<TcnLayerCache>,
    last: Array2<f64>,
    feat_dim: (usize, usize, usize),
}

impl Tcn {
    pub(crate) fn build(b: &mut Builder<'_>, name: &str, cin: usize, kernel: usize, dilations: &[usize], hidden: usize, out: usize) -> Self {
        let mut c = cin;
        let layers = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let bn = b.batchnorm(&format!("{name}.layer{i}.bn"), c);
                let conv = b.conv(&format!("{name}.layer{i}.conv"), hidden, c, kernel, d, true);
                let down = (c != hidden).then(|| b.conv(&format!("{name}.layer{i}.down"), hidden, c, 1, 1, true));
                c = hidden;
                TcnLayer { bn, conv, down }
            })
            .collect();
        let proj = b.linear(&format!("{name}.proj"), hidden, out);
        Tcn { layers, proj }
    }

    /// Per-timestep features `[B, hidden, T]` before the projection.
    pub fn features(&self, p: &ParamTree, z: ArrayView3<f64>, training: bool) -> Array3<f64> {
        self.features_inner(p, z, training, &mut Vec::new()).0
    }

    fn features_inner(&self, p: &ParamTree, z: ArrayView3<f64>, training: bool, updates: &mut Vec<StatUpdate>) -> (Array3<f64>, Vec<TcnLayerCache>) {
        let mut h = z.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, bn) = layer.bn.forward(p, h.view(), training, updates);
            let act = ops::relu_forward(a);
            let (mut y, conv) = layer.conv.forward(p, act.view());
            let down = match &layer.down {
                Some(dc) => {
                    let (r, c) = dc.forward(p, h.view());
                    y += &r;
                    Some(c)
                }
                None => {
                    y += &h;
                    None
                }
            };
            caches.push(TcnLayerCache { bn, act, conv, down });
            h = y;
        }
        (h, caches)
    }

    pub fn forward(&self, p: &ParamTree, z: ArrayView3<f64>, training: bool, updates: &mut Vec<StatUpdate>) -> (Array2<f64>, TcnCache) {
        let (h, layers) = self.features_inner(p, z, training, updates);
        let t = h.dim().2;
        let last = h.index_axis(Axis(2), t - 1).to_owned();
        let out = self.proj.forward(p, last.view());
        (
            out,
            TcnCache {
                layers,
                last,
                feat_dim: h.dim(),
            },
        )
    }

    pub fn backward(&self, p: &ParamTree, g: &mut ParamTree, cache: &TcnCache, dy: ArrayView2<f64>) -> Array3<f64> {
        let dlast = self.proj.backward(p, g, cache.last.view(), dy, true).expect("dx requested");
        let mut dh = Array3::<f64>::zeros(cache.feat_dim);
        dh.index_axis_mut(Axis(2), cache.feat_dim.2 - 1).assign(&dlast);
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            // h_out = conv(relu(bn(h_in))) + residual(h_in)
            let mut dh_in = match (&layer.down, &c.down) {
                (Some(dc), Some(cc)) => dc.backward(p, g, cc, dh.view(), true).expect("dx requested"),
                _ => dh.clone(),
            };
            let dact = layer.conv.backward(p, g, &c.conv, dh.view(), true).expect("dx requested");
            let da = ops::relu_backward(&c.act, dact);
            dh_in += &layer.bn.backward(p, g, &c.bn, da.view());
            dh = dh_in;
        }
        dh
    }
}

/// Flatten `[B, C, T]` to `[B, C·T]`.
pub(crate) fn flatten(z: &Array3<f64>) -> Array2<f64> {
    let (b, c, t) = z.dim();
    z.to_shape((b, c * t)).expect("contiguous").into_dimensionality::<Ix2>().expect("2-D").to_owned()
}

pub(crate) fn unflatten(d: Array2<f64>, dim: (usize, usize, usize)) -> Array3<f64> {
    d.into_shape_with_order(dim).expect("matching size").into_dimensionality::<Ix3>().expect("3-D")
}
