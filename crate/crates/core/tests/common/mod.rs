//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use asr_core::encoder::{EncoderConfig, EncoderParams};
use asr_core::losses::{
    contrastive_loss, margin_loss, triplet_loss, MarginState, Pair, PairBatch, Reduction, Triplet,
    TripletBatch,
};
use asr_core::rl::{advantages, ppo_gradient, ppo_objective, reinforce_gradient, reinforce_objective};
use asr_core::rl::{PolicyConfig, PolicyParams, TrajectoryBuffer, Transition};
use asr_core::rng::{self, Rng};
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRAD_CONFIGS: u64 = 20;

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let mut m = normal_matrix(rows, cols, rng);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// Floor on the relative-error denominator. Central differences at
/// `FD_STEP` carry roundoff around 1e-11, so an exactly zero gradient would
/// otherwise read as a large relative error.
pub const FD_FLOOR: f64 = 1e-6;

/// `‖a - n‖ / max(‖a‖, ‖n‖, FD_FLOOR)`
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(FD_FLOOR)
}

/// Central differences of `f` over every coordinate reachable through `coords`.
pub fn central_diff<T: Clone>(
    base: &T,
    count: usize,
    coord: impl Fn(&mut T, usize) -> &mut f64,
    f: impl Fn(&T) -> f64,
) -> Vec<f64> {
    (0..count)
        .map(|i| {
            let mut plus = base.clone();
            *coord(&mut plus, i) += FD_STEP;
            let mut minus = base.clone();
            *coord(&mut minus, i) -= FD_STEP;
            (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Random labels with every class of size at least 2.
pub fn random_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

pub fn random_triplets(labels: &[usize], rng: &mut Rng) -> TripletBatch {
    let mut triplets = Vec::new();
    for a in 0..labels.len() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != a && labels[j] == labels[a]).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != labels[a]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        triplets.push(Triplet {
            anchor: a,
            positive: pos[rng.random_range(0..pos.len())],
            negative: neg[rng.random_range(0..neg.len())],
        });
    }
    TripletBatch { triplets }
}

pub fn random_pairs(labels: &[usize], count: usize, rng: &mut Rng) -> PairBatch {
    let n = labels.len();
    let pairs = (0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            Pair { i, j, same_class: labels[i] == labels[j] }
        })
        .collect();
    PairBatch { pairs }
}

fn matrix_coord(m: &mut Array2<f64>, i: usize) -> &mut f64 {
    let cols = m.ncols();
    &mut m[(i / cols, i % cols)]
}

/// Loss family used by the gradient checks.
#[derive(Clone, Copy, Debug)]
pub enum LossUnderTest {
    Contrastive,
    Triplet,
    Margin(Reduction),
}

/// Relative errors of the embedding gradient (and the beta gradient for the
/// margin loss) for one random configuration.
pub fn loss_grad_errors(kind: LossUnderTest, seed: u64) -> (f64, Option<f64>) {
    let mut rng = rng::seeded(seed);
    let n = rng.random_range(6..14);
    let dim = rng.random_range(2..6);
    let classes = rng.random_range(2..4);
    let labels = random_labels(n, classes, &mut rng);
    // Scaled off the unit sphere so hinges are a mix of active and inactive.
    let emb = normal_matrix(n, dim, &mut rng) * 0.4;
    let gamma = rng.random_range(0.1..1.0);
    let triplets = random_triplets(&labels, &mut rng);
    let pairs = random_pairs(&labels, 2 * n, &mut rng);
    let state = MarginState { beta: rng.random_range(0.3..1.0), beta_lr: 5e-4 };

    let eval = |e: &Array2<f64>, s: &MarginState| match kind {
        LossUnderTest::Contrastive => contrastive_loss(e.view(), &pairs, gamma).unwrap(),
        LossUnderTest::Triplet => triplet_loss(e.view(), &triplets, gamma).unwrap(),
        LossUnderTest::Margin(red) => margin_loss(e.view(), &pairs, gamma, s, red).unwrap(),
    };
    let report = eval(&emb, &state);
    let numeric = central_diff(&emb, emb.len(), matrix_coord, |e| eval(e, &state).value);
    let emb_err = rel_err(report.grad_embeddings.as_slice().unwrap(), &numeric);
    let beta_err = match kind {
        LossUnderTest::Margin(_) => {
            let numeric = central_diff(&state, 1, |s, _| &mut s.beta, |s| eval(&emb, s).value);
            Some(rel_err(&[report.grad_beta], &numeric))
        }
        _ => None,
    };
    (emb_err, beta_err)
}

fn encoder_coord(p: &mut EncoderParams, i: usize) -> &mut f64 {
    let sizes = [p.w1.len(), p.b1.len(), p.w2.len(), p.b2.len()];
    let mut i = i;
    if i < sizes[0] {
        return matrix_coord(&mut p.w1, i);
    }
    i -= sizes[0];
    if i < sizes[1] {
        return &mut p.b1[i];
    }
    i -= sizes[1];
    if i < sizes[2] {
        return matrix_coord(&mut p.w2, i);
    }
    i -= sizes[2];
    &mut p.b2[i]
}

/// Relative error of encoder backprop for `L = Σ G ⊙ φ(X)` with random `G`.
pub fn encoder_grad_error(seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let n = rng.random_range(2..8);
    let d_in = rng.random_range(2..7);
    let cfg = EncoderConfig {
        hidden: rng.random_range(3..9),
        out_dim: rng.random_range(2..6),
    };
    let params = EncoderParams::init(d_in, &cfg, &mut rng).unwrap();
    // Non-zero biases so the zero-bias symmetry is not what is being tested.
    let mut params = params;
    params.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    params.b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let x = normal_matrix(n, d_in, &mut rng);
    let g = normal_matrix(n, cfg.out_dim, &mut rng);

    let batch = params.forward(x.view()).unwrap();
    let grads = params.backward(&batch, g.view()).unwrap();
    let analytic: Vec<f64> = grads.iter().copied().collect();
    let count = analytic.len();
    let numeric = central_diff(&params, count, encoder_coord, |p| {
        (p.embed(x.view()).unwrap() * &g).sum()
    });
    rel_err(&analytic, &numeric)
}

fn policy_coord(p: &mut PolicyParams, i: usize) -> &mut f64 {
    p.iter_mut().nth(i).unwrap()
}

pub fn random_buffer(params: &PolicyParams, len: usize, rng: &mut Rng) -> TrajectoryBuffer {
    let mut buf = TrajectoryBuffer::default();
    for _ in 0..len {
        let state: Vec<f64> = (0..params.state_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        buf.push(Transition {
            state,
            action: rng.random_range(0..params.num_actions()),
            logp_old: None,
            reward: rng.random_range(-0.1..0.1),
        });
    }
    buf
}

pub fn random_policy(rng: &mut Rng) -> PolicyParams {
    let state_dim = rng.random_range(1..6);
    let hidden = rng.random_range(2..8);
    let actions = rng.random_range(3..8);
    let mut p = PolicyParams::init(state_dim, hidden, actions, rng).unwrap();
    p.b1.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    p
}

/// Relative error of the REINFORCE gradient for one random configuration.
pub fn reinforce_grad_error(seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let params = random_policy(&mut rng);
    let buf = random_buffer(&params, rng.random_range(2..10), &mut rng);
    let adv = advantages(&buf, &PolicyConfig::default()).unwrap();
    let analytic: Vec<f64> = reinforce_gradient(&params, &buf, &adv).unwrap().iter().copied().collect();
    let numeric = central_diff(&params, analytic.len(), policy_coord, |p| {
        reinforce_objective(p, &buf, &adv).unwrap()
    });
    rel_err(&analytic, &numeric)
}

/// Relative error of the clipped-surrogate gradient, with `logp_old` taken
/// from a perturbed policy so ratios spread across and beyond the clip band.
pub fn ppo_grad_error(seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let params = random_policy(&mut rng);
    let mut old = params.clone();
    for w in old.iter_mut() {
        *w += rng.random_range(-0.3..0.3);
    }
    let mut buf = random_buffer(&params, rng.random_range(2..10), &mut rng);
    for t in &mut buf.transitions {
        t.logp_old = Some(old.log_prob(&t.state, t.action).unwrap());
    }
    let adv = advantages(&buf, &PolicyConfig::default()).unwrap();
    let eps = 0.2;
    let analytic: Vec<f64> = ppo_gradient(&params, &buf, &adv, eps).unwrap().iter().copied().collect();
    let numeric = central_diff(&params, analytic.len(), policy_coord, |p| {
        ppo_objective(p, &buf, &adv, eps).unwrap()
    });
    rel_err(&analytic, &numeric)
}

/// Brute-force Recall@k: full sort of every other row by (distance, index).
pub fn brute_recall(emb: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut hits = 0;
    for q in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != q).collect();
        order.sort_by(|&a, &b| {
            let da: f64 = (&emb.row(q) - &emb.row(a)).mapv(|v| v * v).sum();
            let db: f64 = (&emb.row(q) - &emb.row(b)).mapv(|v| v * v).sum();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        if order.iter().take(k).any(|&j| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// NMI from an explicit contingency table, `2I / (H(C) + H(L))`.
pub fn brute_nmi(assign: &[usize], labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let kc = assign.iter().max().unwrap() + 1;
    let kl = labels.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0f64; kl]; kc];
    for (&c, &l) in assign.iter().zip(labels) {
        table[c][l] += 1.0;
    }
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..kl).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let h = |v: &[f64]| -> f64 {
        v.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
    };
    let (hc, hl) = (h(&row), h(&col));
    let mut mi = 0.0;
    for i in 0..kc {
        for j in 0..kl {
            let p = table[i][j] / n;
            if p > 0.0 {
                mi += p * (p / ((row[i] / n) * (col[j] / n))).ln();
            }
        }
    }
    let occupied = |v: &[f64]| v.iter().filter(|&&c| c > 0.0).count();
    match (occupied(&row), occupied(&col)) {
        (1, 1) => 1.0,
        (1, _) | (_, 1) => 0.0,
        _ => 2.0 * mi / (hc + hl),
    }
}

/// Pairwise F1 by enumerating every unordered pair.
pub fn brute_f1(assign: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            match (assign[i] == assign[j], labels[i] == labels[j]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
    }
    if 2 * tp + fp + fne == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fne) as f64
    }
}

/// Total variation between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Unit vectors in the plane at the given distances from `(1, 0)`, with the
/// anchor in row 0.
pub fn anchor_layout(distances: &[f64]) -> Array2<f64> {
    let mut emb = Array2::zeros((distances.len() + 1, 2));
    emb[(0, 0)] = 1.0;
    for (i, &d) in distances.iter().enumerate() {
        // chord length d on the unit circle subtends 2·asin(d/2)
        let theta = 2.0 * (d / 2.0).asin();
        emb[(i + 1, 0)] = theta.cos();
        emb[(i + 1, 1)] = theta.sin();
    }
    emb
}

/// A fixed embedding layout, a sampler over it and the selection
/// probabilities derived independently of the library.
pub struct SamplerLayout {
    pub name: &'static str,
    pub candidates: Vec<usize>,
    pub expected: Vec<f64>,
    pub draw: Box<dyn Fn(&mut Rng) -> usize>,
}

fn binned_expected(weights: &[f64], distances: &[f64]) -> Vec<f64> {
    let b = weights.len();
    let width = 2.0 / b as f64;
    let bin = |d: f64| ((d / width) as usize).min(b - 1);
    let mut counts = vec![0usize; b];
    for &d in distances {
        counts[bin(d)] += 1;
    }
    let total: f64 = (0..b).filter(|&i| counts[i] > 0).map(|i| weights[i]).sum();
    distances
        .iter()
        .map(|&d| weights[bin(d)] / total / counts[bin(d)] as f64)
        .collect()
}

fn binned_layout(name: &'static str, weights: Vec<f64>, distances: Vec<f64>) -> SamplerLayout {
    use asr_core::samplers::{sample_negative, SamplingDistribution};
    let norm: f64 = weights.iter().sum();
    let expected = binned_expected(&weights.iter().map(|w| w / norm).collect::<Vec<_>>(), &distances);
    let emb = anchor_layout(&distances);
    let candidates: Vec<usize> = (1..=distances.len()).collect();
    let dist = SamplingDistribution::from_weights(weights).unwrap();
    let cands = candidates.clone();
    SamplerLayout {
        name,
        candidates,
        expected,
        draw: Box::new(move |rng| sample_negative(&dist, 0, &cands, emb.view(), rng).unwrap()),
    }
}

/// Inverse sphere-distance density in dimension `n`, clipped at 0.5 and
/// capped at 100, written out from the closed form.
fn inverse_density(d: f64, n: f64) -> f64 {
    let d = d.max(0.5);
    let q = d.powf(n - 2.0) * (1.0 - d * d / 4.0).powf((n - 3.0) / 2.0);
    if q > 0.0 { (1.0 / q).min(100.0) } else { 100.0 }
}

pub fn sampler_layouts() -> Vec<SamplerLayout> {
    use asr_core::samplers::{distance_weighted_negative, semihard_negative};
    let mut layouts = vec![
        // two coarse bins, three candidates in the first and two in the second
        binned_layout("two-bin", vec![0.7, 0.3], vec![0.3, 0.6, 0.9, 1.2, 1.5]),
        binned_layout(
            "uniform-ten-bin",
            vec![1.0; 10],
            vec![0.1, 0.15, 0.5, 0.9, 0.95, 0.98, 1.7],
        ),
        binned_layout(
            "skewed-with-empty-bins",
            vec![0.02, 0.3, 0.01, 0.1, 0.05, 0.2, 0.02, 0.1, 0.1, 0.1],
            vec![0.3, 0.35, 0.7, 1.1, 1.3, 1.9],
        ),
    ];

    // distance weighting in 3 dimensions: anchor on the x-axis, candidates
    // at chord lengths spread across [0, 2)
    let distances = [0.2, 0.6, 1.0, 1.4, 1.8, 1.95];
    let planar = anchor_layout(&distances);
    let mut emb = Array2::zeros((planar.nrows(), 3));
    emb.slice_mut(ndarray::s![.., ..2]).assign(&planar);
    let w: Vec<f64> = distances.iter().map(|&d| inverse_density(d, 3.0)).collect();
    let total: f64 = w.iter().sum();
    let candidates: Vec<usize> = (1..=distances.len()).collect();
    let cands = candidates.clone();
    layouts.push(SamplerLayout {
        name: "distance-weighted",
        candidates,
        expected: w.iter().map(|x| x / total).collect(),
        draw: Box::new(move |rng| distance_weighted_negative(0, &cands, emb.view(), rng).unwrap()),
    });

    // semihard: positive at 0.5, margin 0.3 → band (0.5, 0.8) holds three
    // of the six negatives
    let mut distances = vec![0.5];
    distances.extend([0.3, 0.55, 0.6, 0.75, 0.9, 1.4]);
    let emb = anchor_layout(&distances);
    let candidates: Vec<usize> = (2..=distances.len()).collect();
    let expected = vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0];
    let cands = candidates.clone();
    layouts.push(SamplerLayout {
        name: "semihard-band",
        candidates,
        expected,
        draw: Box::new(move |rng| semihard_negative(0, 1, &cands, emb.view(), 0.3, rng).unwrap()),
    });
    layouts
}

/// Empirical selection frequencies over `draws` seeded draws, and their
/// total variation from the expected probabilities.
pub fn layout_tv(layout: &SamplerLayout, draws: usize, seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let mut counts = vec![0usize; layout.candidates.len()];
    for _ in 0..draws {
        let c = (layout.draw)(&mut rng);
        let pos = layout.candidates.iter().position(|&x| x == c).expect("draw is a candidate");
        counts[pos] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    total_variation(&freq, &layout.expected)
}

/// Small integer coordinates so exact distance ties are common.
pub fn metric_instance(rng: &mut Rng) -> (Array2<f64>, Vec<usize>, Vec<usize>) {
    let n = rng.random_range(3..=12);
    let dim = rng.random_range(1..=3);
    let emb = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-2i32..=2) as f64);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    (emb, compact(&labels), compact(&assign))
}

fn compact(v: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    v.iter()
        .map(|x| match seen.iter().position(|s| s == x) {
            Some(i) => i,
            None => {
                seen.push(*x);
                seen.len() - 1
            }
        })
        .collect()
}
