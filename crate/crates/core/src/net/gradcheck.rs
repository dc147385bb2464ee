//! Finite-difference check of [`loss_and_grads`] using the fourth-order
//! five-point central stencil.

use super::loss::{loss, loss_and_grads, LossWeights, TrainBatch};
use super::model::Network;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients against five-point central differences with
/// step `h` for every scalar parameter.
pub fn check(
    net: &Network,
    batch: &TrainBatch,
    weights: &LossWeights,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grads) = loss_and_grads(net, batch, weights, None)?;
    let mut probe = net.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut k = 0;
    for (ti, t) in net.params.tensors().iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.data[i];
            let mut at = |x: f64| -> Result<f64> {
                probe.params.get_mut(ti)[i] = x;
                Ok(loss(&probe, batch, weights)?.total)
            };
            let (p2, p1) = (at(orig + 2.0 * h)?, at(orig + h)?);
            let (m1, m2) = (at(orig - h)?, at(orig - 2.0 * h)?);
            probe.params.get_mut(ti)[i] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let analytic = grads.get(ti)[i];
            let e = rel_error(analytic, numeric, floor);
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst_param = format!("{}[{i}]", net.params.name(ti));
                out.analytic = analytic;
                out.numeric = numeric;
            }
            k += 1;
        }
    }
    out.checked = k;
    Ok(out)
}
