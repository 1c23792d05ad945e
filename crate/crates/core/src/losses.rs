//! Contrastive, triplet and margin losses over an embedding matrix.
//!
//! All three use the Euclidean distance between rows. Its gradient is taken
//! as zero for coincident rows, and every hinge is treated as inactive at
//! its kink.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub same_class: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    /// `(a, p)` as a same-class pair and `(a, n)` as a different-class pair
    /// for every triplet.
    pub fn to_pairs(&self) -> PairBatch {
        let pairs = self
            .triplets
            .iter()
            .flat_map(|t| {
                [
                    Pair { i: t.anchor, j: t.positive, same_class: true },
                    Pair { i: t.anchor, j: t.negative, same_class: false },
                ]
            })
            .collect();
        PairBatch { pairs }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Learnable boundary of the margin loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginState {
    pub beta: f64,
    pub beta_lr: f64,
}

/// Lower clamp for `beta` after updates.
pub const MIN_BETA: f64 = 1e-3;

impl Default for MarginState {
    fn default() -> Self {
        Self {
            beta: 0.6,
            beta_lr: 5e-4,
        }
    }
}

impl MarginState {
    /// One plain gradient-descent step on `beta`, clamped at [`MIN_BETA`].
    pub fn update(&mut self, grad_beta: f64) -> Result<()> {
        if !grad_beta.is_finite() {
            return Err(Error::NonFinite("beta gradient".into()));
        }
        self.beta = (self.beta - self.beta_lr * grad_beta).max(MIN_BETA);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_embeddings: Array2<f64>,
    /// Non-zero only for the margin loss.
    pub grad_beta: f64,
    pub active_count: usize,
}

pub fn pairwise_distance(emb: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    row_distance(emb.row(i), emb.row(j))
}

fn row_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Adds `scale * ∂d(i,j)/∂φ` into `grad`.
fn accumulate_distance_grad(
    grad: &mut Array2<f64>,
    emb: ArrayView2<f64>,
    i: usize,
    j: usize,
    d: f64,
    scale: f64,
) {
    if d <= 0.0 || scale == 0.0 {
        return;
    }
    for k in 0..emb.ncols() {
        let g = scale * (emb[[i, k]] - emb[[j, k]]) / d;
        grad[[i, k]] += g;
        grad[[j, k]] -= g;
    }
}

fn check_index(emb: ArrayView2<f64>, idx: usize) -> Result<()> {
    if idx >= emb.nrows() {
        return Err(Error::invalid(format!(
            "index {idx} out of range for {} embeddings",
            emb.nrows()
        )));
    }
    Ok(())
}

fn check_pairs(emb: ArrayView2<f64>, pairs: &PairBatch) -> Result<()> {
    if pairs.pairs.is_empty() {
        return Err(Error::invalid("pair batch is empty"));
    }
    for p in &pairs.pairs {
        check_index(emb, p.i)?;
        check_index(emb, p.j)?;
        if p.i == p.j {
            return Err(Error::invalid(format!("pair ({}, {}) repeats an index", p.i, p.j)));
        }
    }
    Ok(())
}

fn check_margin(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("margin must be positive, got {gamma}")));
    }
    Ok(())
}

/// Mean over pairs of `d` (same class) or `[γ - d]₊` (different class).
pub fn contrastive_loss(emb: ArrayView2<f64>, pairs: &PairBatch, gamma: f64) -> Result<LossReport> {
    check_margin(gamma)?;
    check_pairs(emb, pairs)?;
    let scale = 1.0 / pairs.pairs.len() as f64;
    let mut grad = Array2::zeros(emb.dim());
    let mut value = 0.0;
    let mut active = 0;
    for p in &pairs.pairs {
        let d = pairwise_distance(emb, p.i, p.j);
        if p.same_class {
            value += d;
            if d > 0.0 {
                active += 1;
            }
            accumulate_distance_grad(&mut grad, emb, p.i, p.j, d, scale);
        } else if gamma - d > 0.0 {
            value += gamma - d;
            active += 1;
            accumulate_distance_grad(&mut grad, emb, p.i, p.j, d, -scale);
        }
    }
    Ok(LossReport {
        value: value * scale,
        grad_embeddings: grad,
        grad_beta: 0.0,
        active_count: active,
    })
}

/// Mean over triplets of `[d(a,p) - d(a,n) + γ]₊`.
pub fn triplet_loss(emb: ArrayView2<f64>, triplets: &TripletBatch, gamma: f64) -> Result<LossReport> {
    check_margin(gamma)?;
    if triplets.is_empty() {
        return Err(Error::invalid("triplet batch is empty"));
    }
    for t in &triplets.triplets {
        for idx in [t.anchor, t.positive, t.negative] {
            check_index(emb, idx)?;
        }
        if t.anchor == t.positive || t.anchor == t.negative {
            return Err(Error::invalid("triplet repeats the anchor"));
        }
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut grad = Array2::zeros(emb.dim());
    let mut value = 0.0;
    let mut active = 0;
    for t in &triplets.triplets {
        let d_ap = pairwise_distance(emb, t.anchor, t.positive);
        let d_an = pairwise_distance(emb, t.anchor, t.negative);
        let term = d_ap - d_an + gamma;
        if term > 0.0 {
            value += term;
            active += 1;
            accumulate_distance_grad(&mut grad, emb, t.anchor, t.positive, d_ap, scale);
            accumulate_distance_grad(&mut grad, emb, t.anchor, t.negative, d_an, -scale);
        }
    }
    Ok(LossReport {
        value: value * scale,
        grad_embeddings: grad,
        grad_beta: 0.0,
        active_count: active,
    })
}

/// Hinged margin loss: `[γ + (d - β)]₊` for same-class pairs and
/// `[γ - (d - β)]₊` for different-class pairs.
pub fn margin_loss(
    emb: ArrayView2<f64>,
    pairs: &PairBatch,
    gamma: f64,
    state: &MarginState,
    reduction: Reduction,
) -> Result<LossReport> {
    check_margin(gamma)?;
    if !(state.beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {}", state.beta)));
    }
    check_pairs(emb, pairs)?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / pairs.pairs.len() as f64,
    };
    let beta = state.beta;
    let mut grad = Array2::zeros(emb.dim());
    let mut value = 0.0;
    let mut grad_beta = 0.0;
    let mut active = 0;
    for p in &pairs.pairs {
        let d = pairwise_distance(emb, p.i, p.j);
        let (term, sign) = if p.same_class {
            (gamma + (d - beta), 1.0)
        } else {
            (gamma - (d - beta), -1.0)
        };
        if term > 0.0 {
            value += term;
            active += 1;
            grad_beta -= sign;
            accumulate_distance_grad(&mut grad, emb, p.i, p.j, d, sign * scale);
        }
    }
    Ok(LossReport {
        value: value * scale,
        grad_embeddings: grad,
        grad_beta: grad_beta * scale,
        active_count: active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn line(points: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((points.len(), 2), |(i, j)| if j == 0 { points[i] } else { 0.0 })
    }

    #[test]
    fn distance_basics() {
        let e = array![[1.0, 0.0], [-1.0, 0.0], [0.6, 0.8]];
        assert_eq!(pairwise_distance(e.view(), 1, 1), 0.0);
        assert_eq!(pairwise_distance(e.view(), 0, 1), 2.0);
        assert_eq!(
            pairwise_distance(e.view(), 0, 2),
            pairwise_distance(e.view(), 2, 0)
        );
    }

    #[test]
    fn contrastive_examples() {
        let e = line(&[0.0, 0.3]);
        let same = PairBatch { pairs: vec![Pair { i: 0, j: 1, same_class: true }] };
        let r = contrastive_loss(e.view(), &same, 1.0).unwrap();
        assert!((r.value - 0.3).abs() < 1e-15);

        let e = line(&[0.0, 1.5]);
        let diff = PairBatch { pairs: vec![Pair { i: 0, j: 1, same_class: false }] };
        let r = contrastive_loss(e.view(), &diff, 1.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_embeddings.iter().all(|g| *g == 0.0));
        assert_eq!(r.active_count, 0);

        assert!(contrastive_loss(e.view(), &PairBatch::default(), 1.0).is_err());
    }

    #[test]
    fn coincident_rows_have_zero_gradient() {
        let e = line(&[0.5, 0.5]);
        let same = PairBatch { pairs: vec![Pair { i: 0, j: 1, same_class: true }] };
        let r = contrastive_loss(e.view(), &same, 1.0).unwrap();
        assert!(r.grad_embeddings.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn triplet_examples() {
        // anchor at 0, positive at 0.5, negative at -0.9
        let e = line(&[0.0, 0.5, -0.9]);
        let t = TripletBatch { triplets: vec![Triplet { anchor: 0, positive: 1, negative: 2 }] };
        let r = triplet_loss(e.view(), &t, 0.2).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_embeddings.iter().all(|g| *g == 0.0));

        let e = line(&[0.0, 0.9, -0.5]);
        let r = triplet_loss(e.view(), &t, 0.2).unwrap();
        assert!((r.value - 0.6).abs() < 1e-15);
        assert_eq!(r.active_count, 1);

        assert!(triplet_loss(e.view(), &TripletBatch::default(), 0.2).is_err());
    }

    #[test]
    fn margin_examples() {
        let state = MarginState::default();
        let e = line(&[0.0, 0.8]);
        let same = PairBatch { pairs: vec![Pair { i: 0, j: 1, same_class: true }] };
        let r = margin_loss(e.view(), &same, 0.2, &state, Reduction::Sum).unwrap();
        assert!((r.value - 0.4).abs() < 1e-15);
        assert_eq!(r.grad_beta, -1.0);

        let e = line(&[0.0, 1.0]);
        let diff = PairBatch { pairs: vec![Pair { i: 0, j: 1, same_class: false }] };
        let r = margin_loss(e.view(), &diff, 0.2, &state, Reduction::Sum).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad_beta, 0.0);
        assert!(r.grad_embeddings.iter().all(|g| *g == 0.0));

        let bad = MarginState { beta: 0.0, ..state };
        assert!(margin_loss(e.view(), &diff, 0.2, &bad, Reduction::Sum).is_err());
    }

    #[test]
    fn margin_mean_reduction_scales() {
        let state = MarginState::default();
        let e = line(&[0.0, 0.8, 0.1]);
        let pairs = PairBatch {
            pairs: vec![
                Pair { i: 0, j: 1, same_class: true },
                Pair { i: 0, j: 2, same_class: false },
            ],
        };
        let s = margin_loss(e.view(), &pairs, 0.2, &state, Reduction::Sum).unwrap();
        let m = margin_loss(e.view(), &pairs, 0.2, &state, Reduction::Mean).unwrap();
        assert!((s.value / 2.0 - m.value).abs() < 1e-15);
        assert!((s.grad_beta / 2.0 - m.grad_beta).abs() < 1e-15);
    }

    #[test]
    fn beta_update_clamps() {
        let mut s = MarginState { beta: 0.0015, beta_lr: 1.0 };
        s.update(1.0).unwrap();
        assert_eq!(s.beta, MIN_BETA);
        assert!(s.update(f64::NAN).is_err());
    }

    #[test]
    fn invalid_pairs_rejected() {
        let e = line(&[0.0, 1.0]);
        let selfpair = PairBatch { pairs: vec![Pair { i: 1, j: 1, same_class: true }] };
        assert!(contrastive_loss(e.view(), &selfpair, 1.0).is_err());
        let oob = PairBatch { pairs: vec![Pair { i: 0, j: 5, same_class: true }] };
        assert!(contrastive_loss(e.view(), &oob, 1.0).is_err());
        assert!(contrastive_loss(e.view(), &oob, 0.0).is_err());
    }
}
