//! Bootstrapping losses.
//!
//! Each branch regresses the L2-normalized online prediction onto the
//! L2-normalized target projection: `‖q̂ − ĝ‖² = 2 − 2⟨q̂, ĝ⟩`, averaged over
//! the batch. The TCN branch gives the low-frequency loss, the MLP branch the
//! high-frequency loss, combined as `λ·l_lfb + (1−λ)·l_hfb`.

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::HeadOutputs;

/// Additive floor on row norms before normalization.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite, got {lambda}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            log::warn!("lambda = {lambda} lies outside [0, 1]; the high-frequency loss gets weight {}", 1.0 - lambda);
        }
        Ok(LossWeights { lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lfb: f64,
    pub l_hfb: f64,
    pub l_total: f64,
}

/// Loss value plus whether any row hit the norm floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionLoss {
    pub value: f64,
    pub floored_rows: usize,
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn check_pair(q: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<()> {
    if q.dim() != g.dim() || q.dim().0 == 0 {
        return Err(Error::Shape(format!("prediction {:?} and projection {:?} must match and be non-empty", q.dim(), g.dim())));
    }
    Ok(())
}

/// Mean over rows of `‖q/‖q‖ − g/‖g‖‖²`.
pub fn normalized_regression_loss(q: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<RegressionLoss> {
    Ok(loss_and_grad(q, g)?.0)
}

/// Loss and its gradient with respect to `q`. `g` is treated as a constant.
pub fn loss_and_grad(q: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<(RegressionLoss, Array2<f64>)> {
    check_pair(&q, &g)?;
    let b = q.dim().0 as f64;
    let mut total = 0.0;
    let mut floored = 0;
    let mut dq = Array2::<f64>::zeros(q.dim());
    for ((qr, gr), mut dr) in q.rows().into_iter().zip(g.rows()).zip(dq.rows_mut()) {
        let (nq, ng) = (norm(qr), norm(gr));
        if nq == 0.0 || ng == 0.0 {
            floored += 1;
        }
        let (dq_n, dg_n) = (nq + NORM_FLOOR, ng + NORM_FLOOR);
        let mut row_loss = 0.0;
        // d/dq̂ of ‖q̂ − ĝ‖² / B
        let mut upstream = Vec::with_capacity(qr.len());
        Zip::from(&qr).and(&gr).for_each(|&a, &c| {
            let diff = a / dq_n - c / dg_n;
            row_loss += diff * diff;
            upstream.push(2.0 * diff / b);
        });
        total += row_loss;
        // q̂ = q / (‖q‖ + ε):  dq = u/n − q·(u·q)/(n²‖q‖)
        let uq: f64 = upstream.iter().zip(qr.iter()).map(|(u, a)| u * a).sum();
        let corr = if nq > 0.0 { uq / (dq_n * dq_n * nq) } else { 0.0 };
        Zip::from(&mut dr).and(&qr).and(&ndarray::aview1(&upstream)).for_each(|d, &a, &u| {
            *d = u / dq_n - a * corr;
        });
    }
    if floored > 0 {
        log::warn!("{floored} zero-norm rows normalized with floor {NORM_FLOOR}");
    }
    Ok((
        RegressionLoss {
            value: total / b,
            floored_rows: floored,
        },
        dq,
    ))
}

pub fn combined_loss(l_lfb: f64, l_hfb: f64, w: LossWeights) -> f64 {
    w.lambda * l_lfb + (1.0 - w.lambda) * l_hfb
}

/// Loss over both branches plus gradients on the online predictions.
///
/// When one branch is disabled in both networks, the total is the remaining
/// branch's loss and the disabled branch reports 0.
pub fn full_loss_with_grads(
    online: &HeadOutputs,
    target: &HeadOutputs,
    w: LossWeights,
) -> Result<(LossBreakdown, Option<Array2<f64>>, Option<Array2<f64>>)> {
    let tcn = match (&online.q_t, &target.t) {
        (Some(q), Some(g)) => Some(loss_and_grad(q.view(), g.view())?),
        (None, None) => None,
        (None, Some(_)) => return Err(Error::Contract("online outputs lack the TCN prediction".into())),
        (Some(_), None) => return Err(Error::Contract("target outputs lack the TCN projection".into())),
    };
    let mlp = match (&online.q_m, &target.m) {
        (Some(q), Some(g)) => Some(loss_and_grad(q.view(), g.view())?),
        (None, None) => None,
        (None, Some(_)) => return Err(Error::Contract("online outputs lack the MLP prediction".into())),
        (Some(_), None) => return Err(Error::Contract("target outputs lack the MLP projection".into())),
    };
    let (wl, wh) = match (&tcn, &mlp) {
        (Some(_), Some(_)) => (w.lambda, 1.0 - w.lambda),
        (Some(_), None) => (1.0, 0.0),
        (None, Some(_)) => (0.0, 1.0),
        (None, None) => return Err(Error::Contract("no branch produced predictions".into())),
    };
    let l_lfb = tcn.as_ref().map_or(0.0, |(l, _)| l.value);
    let l_hfb = mlp.as_ref().map_or(0.0, |(l, _)| l.value);
    let breakdown = LossBreakdown {
        l_lfb,
        l_hfb,
        l_total: wl * l_lfb + wh * l_hfb,
    };
    Ok((breakdown, tcn.map(|(_, d)| d * wl), mlp.map(|(_, d)| d * wh)))
}

pub fn full_loss(online: &HeadOutputs, target: &HeadOutputs, w: LossWeights) -> Result<LossBreakdown> {
    Ok(full_loss_with_grads(online, target, w)?.0)
}
