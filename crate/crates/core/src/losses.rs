//! Segmentation losses over per-pixel class probabilities.
//!
//! Every loss is a mean over the B·H·W pixels of a probability map of shape
//! (B, K, H, W). Each `*_with_grad` function returns the value together
//! with its gradient with respect to the probabilities; the `*_node`
//! adapters record that pair on a [`Graph`] so the gradient continues
//! through `softmax_channels` back to the logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

/// Lower clamp applied to probabilities before taking logs or negative powers.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_TAU: f64 = 0.95;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    BetaCe,
    ThresholdedCe,
    ConsistencyL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ce,
            beta: DEFAULT_BETA,
            tau: DEFAULT_TAU,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must be positive, got {beta}")))
    }
}

/// A loss value and its gradient with respect to the probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWithGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// Per-pixel maximum class probability of the weak view, (B, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

fn check_labels<T: Scalar>(prob: &Tensor<T>, labels: &LabelMap) -> Result<()> {
    if !labels.matches(prob.shape()) {
        return shape_err(format!(
            "labels ({}, {}, {}) do not match probabilities {}",
            labels.batch(),
            labels.height(),
            labels.width(),
            prob.shape()
        ));
    }
    labels.check_range(prob.shape().channels)
}

fn floor<T: Scalar>() -> T {
    T::from_f64_lossy(PROB_FLOOR)
}

/// Visits each pixel as (flat index of channel 0, channel stride, pixel number).
fn pixels(shape: crate::Shape) -> impl Iterator<Item = (usize, usize, usize)> {
    let plane = shape.plane();
    let item = shape.item();
    (0..shape.batch)
        .flat_map(move |n| (0..plane).map(move |p| (n * item + p, plane, n * plane + p)))
}

fn pixel_count(shape: crate::Shape) -> usize {
    shape.batch * shape.plane()
}

/// Mean pixel cross-entropy −ln p(y|x).
pub fn ce_loss<T: Scalar>(prob: &Tensor<T>, labels: &LabelMap) -> Result<T> {
    ce_with_grad(prob, labels).map(|l| l.value)
}

pub fn ce_with_grad<T: Scalar>(prob: &Tensor<T>, labels: &LabelMap) -> Result<LossWithGrad<T>> {
    check_labels(prob, labels)?;
    masked_ce(prob, labels, |_| true)
}

/// Cross-entropy restricted to pixels where `keep` holds, still normalized
/// by the total pixel count.
fn masked_ce<T: Scalar>(
    prob: &Tensor<T>,
    labels: &LabelMap,
    keep: impl Fn(usize) -> bool,
) -> Result<LossWithGrad<T>> {
    let s = prob.shape();
    let n = pixel_count(s);
    let inv_n = T::one() / T::from_usize(n.max(1)).expect("count");
    let p = prob.data();
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0f64;
    for (base, stride, pix) in pixels(s) {
        if !keep(pix) {
            continue;
        }
        let at = base + labels.data()[pix] as usize * stride;
        let py = p[at];
        if py > floor() {
            total -= py.as_f64().ln();
            grad[at] = -inv_n / py;
        } else {
            total -= PROB_FLOOR.ln();
        }
    }
    Ok(LossWithGrad {
        value: T::from_f64_lossy(total / n.max(1) as f64),
        grad,
    })
}

/// β-cross-entropy, per pixel `((β+1)/β)(1 − p_y^β) + Σ_k p_k^(β+1) − 1`,
/// averaged over pixels. Tends to cross-entropy as β → 0 and is zero at a
/// one-hot correct prediction.
pub fn beta_ce<T: Scalar>(prob: &Tensor<T>, labels: &LabelMap, beta: f64) -> Result<T> {
    beta_ce_with_grad(prob, labels, beta).map(|l| l.value)
}

pub fn beta_ce_with_grad<T: Scalar>(
    prob: &Tensor<T>,
    labels: &LabelMap,
    beta: f64,
) -> Result<LossWithGrad<T>> {
    check_beta(beta)?;
    check_labels(prob, labels)?;
    let s = prob.shape();
    let n = pixel_count(s);
    let inv_n = 1.0 / n.max(1) as f64;
    let p = prob.data();
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0f64;
    for (base, stride, pix) in pixels(s) {
        let y = labels.data()[pix] as usize;
        let mut power_sum = 0.0;
        for k in 0..s.channels {
            let at = base + k * stride;
            let pk = p[at].as_f64().max(PROB_FLOOR);
            power_sum += pk.powf(beta + 1.0);
            grad[at] = T::from_f64_lossy((beta + 1.0) * pk.powf(beta) * inv_n);
        }
        let at = base + y * stride;
        let py = p[at].as_f64().max(PROB_FLOOR);
        // 1 − p^β without cancellation for small β
        let one_minus = -(beta * py.ln()).exp_m1();
        total += (beta + 1.0) / beta * one_minus + power_sum - 1.0;
        let dy = if p[at].as_f64() > PROB_FLOOR {
            -(beta + 1.0) * py.powf(beta - 1.0)
        } else {
            0.0
        };
        grad[at] = grad[at] + T::from_f64_lossy(dy * inv_n);
    }
    Ok(LossWithGrad {
        value: T::from_f64_lossy(total * inv_n),
        grad,
    })
}

/// Per-pixel argmax class (lowest index on ties) and its probability. The
/// result is a plain value: nothing derived from it carries gradient.
pub fn pseudo_label<T: Scalar>(prob_weak: &Tensor<T>) -> (LabelMap, ConfidenceMap<T>) {
    let s = prob_weak.shape();
    let p = prob_weak.data();
    let mut labels = vec![0u8; pixel_count(s)];
    let mut conf = vec![T::zero(); pixel_count(s)];
    for (base, stride, pix) in pixels(s) {
        let mut best = 0;
        for k in 1..s.channels {
            if p[base + k * stride] > p[base + best * stride] {
                best = k;
            }
        }
        labels[pix] = best as u8;
        conf[pix] = p[base + best * stride];
    }
    let labels = LabelMap::new(s.batch, s.height, s.width, labels).expect("pixel count");
    let conf = ConfidenceMap {
        batch: s.batch,
        height: s.height,
        width: s.width,
        data: conf,
    };
    (labels, conf)
}

/// Cross-entropy of the strong view against pseudo-labels, counting only
/// pixels whose weak-view confidence exceeds `tau`. Normalized by the total
/// pixel count, so it is 0 when no pixel passes.
pub fn thresholded_ce<T: Scalar>(
    prob_strong: &Tensor<T>,
    pseudo: &LabelMap,
    confidence: &ConfidenceMap<T>,
    tau: f64,
) -> Result<T> {
    thresholded_ce_with_grad(prob_strong, pseudo, confidence, tau).map(|l| l.value)
}

pub fn thresholded_ce_with_grad<T: Scalar>(
    prob_strong: &Tensor<T>,
    pseudo: &LabelMap,
    confidence: &ConfidenceMap<T>,
    tau: f64,
) -> Result<LossWithGrad<T>> {
    check_labels(prob_strong, pseudo)?;
    if confidence.data.len() != pseudo.len() {
        return shape_err("confidence map does not match pseudo-labels");
    }
    masked_ce(prob_strong, pseudo, |pix| {
        confidence.data[pix].as_f64() > tau
    })
}

/// Mean over pixels of the squared L2 distance between two probability
/// vectors. The gradient pair is (d/da, d/db).
pub fn consistency_l2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    consistency_l2_with_grad(a, b).map(|(l, _)| l.value)
}

pub fn consistency_l2_with_grad<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(LossWithGrad<T>, Vec<T>)> {
    if a.shape() != b.shape() {
        return shape_err(format!("consistency_l2 of {} and {}", a.shape(), b.shape()));
    }
    let n = pixel_count(a.shape()).max(1);
    let two_over_n = T::from_f64_lossy(2.0 / n as f64);
    let mut total = 0.0f64;
    let mut ga = Vec::with_capacity(a.numel());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        total += d.as_f64() * d.as_f64();
        ga.push(two_over_n * d);
    }
    let gb = ga.iter().map(|&g| -g).collect();
    Ok((
        LossWithGrad {
            value: T::from_f64_lossy(total / n as f64),
            grad: ga,
        },
        gb,
    ))
}

/// `(loss_x + loss_u) / 2`.
pub fn combined_loss<T: Scalar>(loss_x: T, loss_u: T) -> T {
    (loss_x + loss_u) / (T::one() + T::one())
}

/// Records `ce_loss` on the graph.
pub fn ce_node<T: Scalar>(g: &mut Graph<T>, prob: Var, labels: &LabelMap) -> Result<Var> {
    let l = ce_with_grad(g.value(prob), labels)?;
    g.custom_scalar(l.value, vec![(prob, l.grad)])
}

pub fn beta_ce_node<T: Scalar>(
    g: &mut Graph<T>,
    prob: Var,
    labels: &LabelMap,
    beta: f64,
) -> Result<Var> {
    let l = beta_ce_with_grad(g.value(prob), labels, beta)?;
    g.custom_scalar(l.value, vec![(prob, l.grad)])
}

pub fn thresholded_ce_node<T: Scalar>(
    g: &mut Graph<T>,
    prob_strong: Var,
    pseudo: &LabelMap,
    confidence: &ConfidenceMap<T>,
    tau: f64,
) -> Result<Var> {
    let l = thresholded_ce_with_grad(g.value(prob_strong), pseudo, confidence, tau)?;
    g.custom_scalar(l.value, vec![(prob_strong, l.grad)])
}

pub fn consistency_l2_node<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (la, gb) = consistency_l2_with_grad(g.value(a), g.value(b))?;
    g.custom_scalar(la.value, vec![(a, la.grad), (b, gb)])
}

/// `(loss_x + loss_u) / 2` on the graph; each term receives half the gradient.
pub fn combined_node<T: Scalar>(g: &mut Graph<T>, loss_x: Var, loss_u: Var) -> Result<Var> {
    let sum = g.add(loss_x, loss_u)?;
    Ok(g.scale(sum, T::from_f64_lossy(0.5)))
}
