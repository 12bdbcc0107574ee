//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{to_storage, ParamKind, ParamTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every weight tensor of one parameter tree. Buffers
/// (batch-norm running statistics) are not part of the parameter set.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamConfig,
    /// `(tensor index, name)` of the managed tensors.
    managed: Vec<(usize, String)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, params: &ParamTree) -> Self {
        let managed: Vec<(usize, String)> = params
            .tensors
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind == ParamKind::Weight)
            .map(|(i, t)| (i, t.name.clone()))
            .collect();
        let m = managed.iter().map(|&(i, _)| vec![0.0; params.tensors[i].numel()]).collect();
        let v = managed.iter().map(|&(i, _)| vec![0.0; params.tensors[i].numel()]).collect();
        AdamW {
            cfg,
            managed,
            m,
            v,
            step: 0,
        }
    }

    /// Names of the tensors this optimizer updates.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.managed.iter().map(|(_, n)| n.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamTree, grads: &ParamTree) -> Result<()> {
        params.check_compatible(grads)?;
        for &(i, ref name) in &self.managed {
            if params.tensors.get(i).map(|t| &t.name) != Some(name) {
                return Err(Error::State(format!("optimizer bound to a different tree (missing {name})")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, &(i, _)) in self.managed.iter().enumerate() {
            let g = &grads.tensors[i].data;
            let p = &mut params.tensors[i].data;
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps) + weight_decay * p[j];
                p[j] = to_storage(p[j] - lr * update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(v: Vec<f64>) -> ParamTree {
        let mut t = ParamTree::default();
        t.push("w", vec![v.len()], ParamKind::Weight, v);
        t.push("running_mean", vec![1], ParamKind::Buffer, vec![0.5]);
        t
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = tree(vec![1.0, -1.0]);
        let mut g = p.zeros_like();
        g.tensors[0].data = vec![0.3, -2.0];
        g.tensors[1].data = vec![9.0];
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &p,
        );
        opt.step(&mut p, &g).unwrap();
        assert!((p.tensors[0].data[0] - (1.0 - 3e-4)).abs() < 1e-7);
        assert!((p.tensors[0].data[1] - (-1.0 + 3e-4)).abs() < 1e-7);
        assert_eq!(p.tensors[1].data, vec![0.5]);
        assert_eq!(opt.param_names().collect::<Vec<_>>(), vec!["w"]);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = tree(vec![0.25, 3.0]);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tensors[0].data = vec![1.0, 1.0];
        let mut opt = AdamW::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }
}
