//! Negative selection.
//!
//! [`SamplingDistribution`] is the controllable binned distribution over
//! anchor-negative distance on `[0, 2]`. Policy actions double or halve one
//! bin's weight. The static baselines (uniform random, semihard,
//! distance-weighted) live alongside it, and [`build_triplets`] assembles a
//! training batch with any of them.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{pairwise_distance, Triplet, TripletBatch};
use crate::rng::Rng;

/// Upper end of the distance range for unit-norm embeddings.
pub const MAX_DISTANCE: f64 = 2.0;
/// Per-bin floor applied before normalizing an initial distribution.
pub const INIT_FLOOR: f64 = 1e-6;
/// Per-bin floor applied before renormalizing after an action.
pub const ACTION_FLOOR: f64 = 1e-9;
/// Lower distance clip of distance-weighted sampling.
pub const DISTANCE_CUTOFF: f64 = 0.5;
/// Upper clamp on the inverse sphere density.
pub const INVERSE_DENSITY_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    bin_edges: Vec<f64>,
    weights: Vec<f64>,
}

impl SamplingDistribution {
    /// Uniform bins on `[0, 2]` carrying the given weights, normalized.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let bins = weights.len();
        if bins < 2 {
            return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights must not all be zero"));
        }
        let bin_edges = (0..=bins)
            .map(|i| MAX_DISTANCE * i as f64 / bins as f64)
            .collect();
        Ok(Self {
            bin_edges,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(bins: usize) -> Result<Self> {
        Self::from_weights(vec![1.0; bins])
    }

    pub fn bins(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        MAX_DISTANCE * (b as f64 + 0.5) / self.bins() as f64
    }

    /// Half-open bins `[lo, hi)`; the last bin also holds `d = 2` and anything
    /// beyond it.
    pub fn bin_of(&self, d: f64) -> usize {
        let b = (d.max(0.0) / MAX_DISTANCE * self.bins() as f64).floor() as usize;
        b.min(self.bins() - 1)
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        self.weights.iter().all(|w| *w >= 0.0)
            && (self.weights.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    /// Scale one bin by `multiplier` (up) or `1/multiplier` (down), floor all
    /// weights at [`ACTION_FLOOR`] and renormalize.
    pub fn apply_action(&self, action: Action, multiplier: f64) -> Result<Self> {
        if !(multiplier > 1.0 && multiplier.is_finite()) {
            return Err(Error::invalid(format!(
                "action multiplier must exceed 1, got {multiplier}"
            )));
        }
        let mut weights = self.weights.clone();
        match action {
            Action::NoOp => return Ok(self.clone()),
            Action::Up(b) | Action::Down(b) if b >= self.bins() => {
                return Err(Error::invalid(format!(
                    "action targets bin {b} of {}",
                    self.bins()
                )));
            }
            Action::Up(b) => weights[b] *= multiplier,
            Action::Down(b) => weights[b] /= multiplier,
        }
        for w in &mut weights {
            *w = w.max(ACTION_FLOOR);
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self {
            bin_edges: self.bin_edges.clone(),
            weights,
        })
    }
}

/// A distribution adjustment chosen by the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    NoOp,
    Up(usize),
    Down(usize),
}

impl Action {
    /// Number of distinct actions for `bins` bins: `2 * bins + 1`.
    pub fn count(bins: usize) -> usize {
        2 * bins + 1
    }

    /// `0` is the no-op, `2b + 1` raises bin `b`, `2b + 2` lowers it.
    pub fn encode(self) -> usize {
        match self {
            Action::NoOp => 0,
            Action::Up(b) => 2 * b + 1,
            Action::Down(b) => 2 * b + 2,
        }
    }

    pub fn decode(code: usize, bins: usize) -> Result<Self> {
        if code >= Self::count(bins) {
            return Err(Error::invalid(format!(
                "action code {code} outside [0, {}]",
                2 * bins
            )));
        }
        Ok(match code {
            0 => Action::NoOp,
            c if c % 2 == 1 => Action::Up((c - 1) / 2),
            c => Action::Down((c - 2) / 2),
        })
    }
}

/// Named initial distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    UniformLow,
    UniformHigh,
    Distance,
    Random,
    NormalHigh,
    NormalLow,
}

impl InitKind {
    pub const ALL: [InitKind; 6] = [
        InitKind::UniformLow,
        InitKind::UniformHigh,
        InitKind::Distance,
        InitKind::Random,
        InitKind::NormalHigh,
        InitKind::NormalLow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitKind::UniformLow => "uniform_low",
            InitKind::UniformHigh => "uniform_high",
            InitKind::Distance => "distance",
            InitKind::Random => "random",
            InitKind::NormalHigh => "normal_high",
            InitKind::NormalLow => "normal_low",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown initial distribution `{s}`")))
    }
}

/// Density shape evaluated at bin centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum InitShape {
    /// Indicator of the open window `(center - half_width, center + half_width)`.
    Uniform { center: f64, half_width: f64 },
    Normal { mean: f64, std: f64 },
    /// Inverse sphere density, zero below `cutoff`.
    Distance { cutoff: f64, dim: usize },
    /// Independent `U(0, 1)` draw per bin.
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialDistributionSpec {
    pub kind: InitKind,
    pub shape: InitShape,
}

impl InitialDistributionSpec {
    /// Default parameters per kind. `dim` is the embedding dimension (used by
    /// `distance`), `seed` feeds `random`.
    pub fn preset(kind: InitKind, dim: usize, seed: u64) -> Self {
        let shape = match kind {
            InitKind::UniformLow => InitShape::Uniform { center: 0.5, half_width: 0.2 },
            InitKind::UniformHigh => InitShape::Uniform { center: 1.5, half_width: 0.2 },
            InitKind::Distance => InitShape::Distance { cutoff: DISTANCE_CUTOFF, dim },
            InitKind::Random => InitShape::Random { seed },
            InitKind::NormalHigh => InitShape::Normal { mean: 1.6, std: 0.04 },
            InitKind::NormalLow => InitShape::Normal { mean: 0.5, std: 0.05 },
        };
        Self { kind, shape }
    }
}

/// Unnormalized density of pairwise distances between uniform points on the
/// unit sphere in `dim` dimensions.
pub fn sphere_distance_density(d: f64, dim: usize) -> f64 {
    let n = dim as f64;
    d.powf(n - 2.0) * (1.0 - 0.25 * d * d).max(0.0).powf((n - 3.0) / 2.0)
}

/// Distance-weighted sampling weight: inverse density, clamped at
/// [`INVERSE_DENSITY_CAP`], with `d` clipped below at `cutoff`.
pub fn inverse_density_weight(d: f64, dim: usize, cutoff: f64) -> f64 {
    let q = sphere_distance_density(d.max(cutoff), dim);
    if q > 0.0 {
        (1.0 / q).min(INVERSE_DENSITY_CAP)
    } else {
        INVERSE_DENSITY_CAP
    }
}

pub fn init_distribution(spec: &InitialDistributionSpec, bins: usize) -> Result<SamplingDistribution> {
    if bins < 2 {
        return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
    }
    let centers: Vec<f64> = (0..bins)
        .map(|b| MAX_DISTANCE * (b as f64 + 0.5) / bins as f64)
        .collect();
    let raw: Vec<f64> = match spec.shape {
        InitShape::Uniform { center, half_width } => {
            if !(half_width > 0.0) {
                return Err(Error::invalid("uniform half-width must be positive"));
            }
            centers
                .iter()
                .map(|&x| if (x - center).abs() < half_width - 1e-9 { 1.0 } else { 0.0 })
                .collect()
        }
        InitShape::Normal { mean, std } => {
            if !(std > 0.0) {
                return Err(Error::invalid("normal std must be positive"));
            }
            let norm = 1.0 / (std * (2.0 * std::f64::consts::PI).sqrt());
            centers
                .iter()
                .map(|&x| norm * (-0.5 * ((x - mean) / std).powi(2)).exp())
                .collect()
        }
        InitShape::Distance { cutoff, dim } => {
            if dim < 3 {
                return Err(Error::invalid("distance weighting needs dim >= 3"));
            }
            centers
                .iter()
                .map(|&x| if x >= cutoff { inverse_density_weight(x, dim, cutoff) } else { 0.0 })
                .collect()
        }
        InitShape::Random { seed } => {
            let mut r = crate::rng::stream(seed, crate::rng::streams::DISTRIBUTION);
            (0..bins).map(|_| r.random::<f64>()).collect()
        }
    };
    SamplingDistribution::from_weights(raw.into_iter().map(|w| w.max(INIT_FLOOR)).collect())
}

fn check_candidates(candidates: &[usize], emb: ArrayView2<f64>) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate list is empty"));
    }
    if let Some(&bad) = candidates.iter().find(|&&c| c >= emb.nrows()) {
        return Err(Error::invalid(format!("candidate {bad} out of range")));
    }
    Ok(())
}

/// Pick a non-empty bin with probability proportional to its weight, then a
/// uniform candidate inside it. Falls back to a uniform candidate when every
/// occupied bin has zero weight.
pub fn sample_negative(
    dist: &SamplingDistribution,
    anchor: usize,
    candidates: &[usize],
    emb: ArrayView2<f64>,
    rng: &mut Rng,
) -> Result<usize> {
    check_candidates(candidates, emb)?;
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let mut by_bin: Vec<Vec<usize>> = vec![Vec::new(); dist.bins()];
    for &c in candidates {
        by_bin[dist.bin_of(pairwise_distance(emb, anchor, c))].push(c);
    }
    let total: f64 = by_bin
        .iter()
        .zip(dist.weights())
        .filter(|(members, _)| !members.is_empty())
        .map(|(_, w)| w)
        .sum();
    if total <= 0.0 {
        return Ok(*candidates.choose(rng).expect("non-empty"));
    }
    let mut u = rng.random::<f64>() * total;
    let mut chosen = None;
    for (members, &w) in by_bin.iter().zip(dist.weights()) {
        if members.is_empty() || w <= 0.0 {
            continue;
        }
        chosen = Some(members);
        if u < w {
            break;
        }
        u -= w;
    }
    let members = chosen.expect("some occupied bin has positive weight");
    Ok(*members.choose(rng).expect("non-empty bin"))
}

/// Semihard mining: uniform over negatives with `d_ap < d_an < d_ap + γ`;
/// otherwise the closest negative beyond the positive; otherwise uniform.
pub fn semihard_negative(
    anchor: usize,
    positive: usize,
    candidates: &[usize],
    emb: ArrayView2<f64>,
    gamma: f64,
    rng: &mut Rng,
) -> Result<usize> {
    check_candidates(candidates, emb)?;
    let d_ap = pairwise_distance(emb, anchor, positive);
    let dists: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&c| (c, pairwise_distance(emb, anchor, c)))
        .collect();
    let band: Vec<usize> = dists
        .iter()
        .filter(|(_, d)| *d > d_ap && *d < d_ap + gamma)
        .map(|(c, _)| *c)
        .collect();
    if let Some(&c) = band.choose(rng) {
        return Ok(c);
    }
    let beyond = dists
        .iter()
        .filter(|(_, d)| *d > d_ap)
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    if let Some(&(c, _)) = beyond {
        return Ok(c);
    }
    Ok(*candidates.choose(rng).expect("non-empty"))
}

/// Probability of each candidate under distance-weighted sampling.
pub fn distance_weighted_probs(anchor: usize, candidates: &[usize], emb: ArrayView2<f64>) -> Vec<f64> {
    let dim = emb.ncols();
    let w: Vec<f64> = candidates
        .iter()
        .map(|&c| inverse_density_weight(pairwise_distance(emb, anchor, c), dim, DISTANCE_CUTOFF))
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Static distance-weighted sampling using the embedding dimension as the
/// sphere dimension.
pub fn distance_weighted_negative(
    anchor: usize,
    candidates: &[usize],
    emb: ArrayView2<f64>,
    rng: &mut Rng,
) -> Result<usize> {
    check_candidates(candidates, emb)?;
    if emb.ncols() < 3 {
        return Err(Error::invalid("distance weighting needs embedding dim >= 3"));
    }
    let probs = distance_weighted_probs(anchor, candidates, emb);
    let mut u = rng.random::<f64>();
    for (&c, &p) in candidates.iter().zip(&probs) {
        if u < p {
            return Ok(c);
        }
        u -= p;
    }
    Ok(*candidates.last().expect("non-empty"))
}

/// Strategy used to pick the negative of each triplet.
#[derive(Clone, Copy, Debug)]
pub enum NegativeSampler<'a> {
    Random,
    Semihard { gamma: f64 },
    DistanceWeighted,
    Binned(&'a SamplingDistribution),
}

/// One triplet per anchor that has another same-class member and at least
/// one other-class member in the batch. Indices refer to batch rows.
pub fn build_triplets(
    labels: &[usize],
    emb: ArrayView2<f64>,
    sampler: NegativeSampler<'_>,
    rng: &mut Rng,
) -> Result<TripletBatch> {
    if labels.len() != emb.nrows() {
        return Err(Error::invalid("labels and embeddings differ in length"));
    }
    let mut triplets = Vec::new();
    for (a, &ya) in labels.iter().enumerate() {
        let positives: Vec<usize> = (0..labels.len()).filter(|&j| j != a && labels[j] == ya).collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != ya).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let p = *positives.choose(rng).expect("non-empty");
        let n = match sampler {
            NegativeSampler::Random => *negatives.choose(rng).expect("non-empty"),
            NegativeSampler::Semihard { gamma } => semihard_negative(a, p, &negatives, emb, gamma, rng)?,
            NegativeSampler::DistanceWeighted => distance_weighted_negative(a, &negatives, emb, rng)?,
            NegativeSampler::Binned(dist) => sample_negative(dist, a, &negatives, emb, rng)?,
        };
        triplets.push(Triplet { anchor: a, positive: p, negative: n });
    }
    if triplets.is_empty() {
        return Err(Error::invalid(
            "batch has no anchor with both a positive and a negative",
        ));
    }
    Ok(TripletBatch { triplets })
}
