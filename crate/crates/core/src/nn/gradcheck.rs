//! Central finite-difference verification of the analytic gradients.

use super::segnet::SegNet;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

/// Relative error with a floor so that vanishing gradients are compared in
/// absolute terms.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares every `stride`-th parameter gradient against the central and
/// both one-sided second-order difference quotients for each `h` in `steps`, keeping the
/// closest.
///
/// ReLU makes the loss only piecewise smooth: a step that moves some
/// pre-activation across zero yields a meaningless quotient. A kink on one
/// side leaves the other side's quotient valid, and a smaller `h` avoids it
/// altogether, whereas a wrong gradient disagrees with every candidate.
pub fn check_network(net: &SegNet<f64>, input: &Tensor<f64>, labels: &[f64], steps: &[f64], stride: usize) -> Result<GradCheckReport> {
    let (_, grads) = net.loss_and_grads(input, labels)?;
    let mut work = net.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst_param: String::new() };
    let loss_at = |n: &SegNet<f64>| -> Result<f64> {
        let z = n.forward_logits(input)?;
        let (l, _) = super::loss::loss_and_logit_grad(z.data(), labels);
        Ok(l)
    };
    let l0 = loss_at(net)?;
    let mut k = 0usize;
    for pi in 0..net.params().len() {
        for j in 0..net.params()[pi].data.len() {
            k += 1;
            if (k - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = work.params()[pi].data[j];
            let mut e = f64::INFINITY;
            for &h in steps {
                let mut at = |d: f64| -> Result<f64> {
                    work.params_mut()[pi].data[j] = orig + d;
                    loss_at(&work)
                };
                let (lp, lm, lp2, lm2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                let central = (lp - lm) / (2.0 * h);
                let forward = (4.0 * lp - 3.0 * l0 - lp2) / (2.0 * h);
                let backward = (3.0 * l0 - 4.0 * lm + lm2) / (2.0 * h);
                for fd in [central, forward, backward] {
                    e = e.min(rel_error(grads[pi][j], fd));
                }
            }
            work.params_mut()[pi].data[j] = orig;
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_param = format!("{}[{j}]", net.params()[pi].name);
            }
        }
    }
    Ok(report)
}
