//! Adjustment policy and its optimizers.
//!
//! The policy is a two-layer ReLU network with a softmax head over the
//! `2B + 1` distribution adjustments. It is trained by plain gradient ascent
//! on either the REINFORCE objective `mean_t log π(a_t|s_t) Â_t` or the PPO
//! clipped surrogate. A one-state softmax bandit with exact gradients is
//! included for studying how initialization slows policy-gradient ascent.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub lr: f64,
    pub clip_epsilon: f64,
    pub ppo_epochs: usize,
    pub eta: f64,
    /// Subtract the mean return from every return.
    pub baseline: bool,
    /// Copy the current policy into the old policy after this many updates.
    pub old_sync_every: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lr: 3e-3,
            clip_epsilon: 0.2,
            ppo_epochs: 4,
            eta: 0.95,
            baseline: true,
            old_sync_every: 1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("policy hidden width must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("policy lr must be positive"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::invalid(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if self.ppo_epochs == 0 {
            return Err(Error::invalid("ppo_epochs must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if self.old_sync_every == 0 {
            return Err(Error::invalid("old_sync_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradients with the shapes of [`PolicyParams`].
pub type PolicyGrads = PolicyParams;

/// Values the forward pass keeps for backprop.
struct PolicyTrace {
    pre: Array1<f64>,
    hidden: Array1<f64>,
    probs: Array1<f64>,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

impl PolicyParams {
    pub fn zeros(state_dim: usize, hidden: usize, actions: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, state_dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((actions, hidden)),
            b2: Array1::zeros(actions),
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(state_dim: usize, hidden: usize, actions: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if state_dim == 0 || hidden == 0 || actions < 2 {
            return Err(Error::invalid("policy needs positive widths and at least 2 actions"));
        }
        let mut p = Self::zeros(state_dim, hidden, actions);
        let l1 = (6.0 / (hidden + state_dim) as f64).sqrt();
        p.w1.mapv_inplace(|_| rng.random_range(-l1..=l1));
        let l2 = (6.0 / (actions + hidden) as f64).sqrt();
        p.w2.mapv_inplace(|_| rng.random_range(-l2..=l2));
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_actions(&self) -> usize {
        self.w2.nrows()
    }

    fn trace(&self, state: &[f64]) -> Result<PolicyTrace> {
        if state.len() != self.state_dim() {
            return Err(Error::invalid(format!(
                "state has {} entries, policy expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        let s = Array1::from(state.to_vec());
        let pre = self.w1.dot(&s) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let logits = self.w2.dot(&hidden) + &self.b2;
        Ok(PolicyTrace {
            pre,
            hidden,
            probs: softmax(&logits),
        })
    }

    /// Action probabilities for one state.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(state)?.probs.to_vec())
    }

    pub fn log_prob(&self, state: &[f64], action: usize) -> Result<f64> {
        let probs = self.forward(state)?;
        probs
            .get(action)
            .map(|p| p.ln())
            .ok_or_else(|| Error::invalid(format!("action {action} out of range")))
    }

    /// Adds `scale * ∇θ log π(action | state)` into `grads` and returns
    /// `π(action | state)`.
    fn accumulate_log_prob_grad(
        &self,
        state: &[f64],
        action: usize,
        scale: f64,
        grads: &mut PolicyGrads,
    ) -> Result<f64> {
        let t = self.trace(state)?;
        if action >= self.num_actions() {
            return Err(Error::invalid(format!("action {action} out of range")));
        }
        let prob = t.probs[action];
        if scale == 0.0 {
            return Ok(prob);
        }
        // d log softmax_a / d logits = onehot(a) - probs
        let mut dlogits = -&t.probs;
        dlogits[action] += 1.0;
        dlogits *= scale;
        grads
            .w2
            .zip_mut_with(&outer(&dlogits, &t.hidden), |g, v| *g += v);
        grads.b2 += &dlogits;
        let mut dpre = self.w2.t().dot(&dlogits);
        dpre.zip_mut_with(&t.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let s = Array1::from(state.to_vec());
        grads.w1.zip_mut_with(&outer(&dpre, &s), |g, v| *g += v);
        grads.b1 += &dpre;
        Ok(prob)
    }

    fn zeros_like(&self) -> PolicyGrads {
        Self::zeros(self.state_dim(), self.w1.nrows(), self.num_actions())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Every entry in the order w1, b1, w2, b2.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// `self += step * grads`
    pub fn ascend(&mut self, grads: &PolicyGrads, step: f64) {
        for (p, g) in self.iter_mut().zip(grads.iter()) {
            *p += step * g;
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("policy");
        c.put_matrix("w1", &self.w1);
        c.put_vector("b1", &self.b1);
        c.put_matrix("w2", &self.w2);
        c.put_vector("b2", &self.b2);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind() != "policy" {
            return Err(Error::invalid(format!("expected a policy checkpoint, found `{}`", c.kind())));
        }
        let p = Self {
            w1: c.matrix("w1")?,
            b1: c.vector("b1")?,
            w2: c.matrix("w2")?,
            b2: c.vector("b2")?,
        };
        if p.w1.nrows() != p.b1.len() || p.w2.ncols() != p.b1.len() || p.w2.nrows() != p.b2.len() {
            return Err(Error::invalid("policy checkpoint has inconsistent shapes"));
        }
        Ok(p)
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view()
        .insert_axis(Axis(1))
        .dot(&b.view().insert_axis(Axis(0)))
}

/// Categorical draw; returns the action and the log of its probability.
pub fn sample_action(probs: &[f64], rng: &mut Rng) -> Result<(usize, f64)> {
    if probs.is_empty()
        || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0))
        || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid("action probabilities are not on the simplex"));
    }
    let mut u = rng.random::<f64>();
    let mut last_positive = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = a;
        if u < p {
            return Ok((a, p.ln()));
        }
        u -= p;
    }
    Ok((last_positive, probs[last_positive].ln()))
}

/// `G_t = Σ_{t' ≥ t} eta^{t'-t} r_{t'}`
pub fn discounted_returns(rewards: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid(format!("eta must lie in (0, 1], got {eta}")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + eta * acc;
        out[t] = acc;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    /// Log-probability under the policy that generated the sample.
    pub logp_old: Option<f64>,
    pub reward: f64,
}

/// Chronological transitions of one episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryBuffer {
    pub transitions: Vec<Transition>,
}

impl TrajectoryBuffer {
    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }
}

/// Discounted returns, minus their mean when the baseline is enabled.
pub fn advantages(buffer: &TrajectoryBuffer, cfg: &PolicyConfig) -> Result<Vec<f64>> {
    let returns = discounted_returns(&buffer.rewards(), cfg.eta)?;
    if cfg.baseline && !returns.is_empty() {
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        Ok(returns.into_iter().map(|g| g - mean).collect())
    } else {
        Ok(returns)
    }
}

fn check_advantages(buffer: &TrajectoryBuffer, adv: &[f64]) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::invalid("trajectory buffer is empty"));
    }
    if adv.len() != buffer.len() {
        return Err(Error::invalid("advantage count differs from buffer length"));
    }
    Ok(())
}

/// `(1/T) Σ_t log π(a_t|s_t) Â_t`
pub fn reinforce_objective(params: &PolicyParams, buffer: &TrajectoryBuffer, adv: &[f64]) -> Result<f64> {
    check_advantages(buffer, adv)?;
    let mut total = 0.0;
    for (t, a) in buffer.transitions.iter().zip(adv) {
        total += params.log_prob(&t.state, t.action)? * a;
    }
    Ok(total / buffer.len() as f64)
}

pub fn reinforce_gradient(params: &PolicyParams, buffer: &TrajectoryBuffer, adv: &[f64]) -> Result<PolicyGrads> {
    check_advantages(buffer, adv)?;
    let scale = 1.0 / buffer.len() as f64;
    let mut grads = params.zeros_like();
    for (t, a) in buffer.transitions.iter().zip(adv) {
        params.accumulate_log_prob_grad(&t.state, t.action, a * scale, &mut grads)?;
    }
    Ok(grads)
}

/// One ascent step on the REINFORCE objective.
pub fn reinforce_update(
    params: &PolicyParams,
    buffer: &TrajectoryBuffer,
    cfg: &PolicyConfig,
) -> Result<PolicyParams> {
    let adv = advantages(buffer, cfg)?;
    let grads = reinforce_gradient(params, buffer, &adv)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("REINFORCE gradient".into()));
    }
    let mut next = params.clone();
    next.ascend(&grads, cfg.lr);
    Ok(next)
}

fn logp_olds(buffer: &TrajectoryBuffer) -> Result<Vec<f64>> {
    buffer
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| match t.logp_old {
            Some(l) if l.is_finite() && l <= 0.0 => Ok(l),
            Some(l) => Err(Error::invalid(format!("transition {i} has invalid logp_old {l}"))),
            None => Err(Error::invalid(format!("transition {i} is missing logp_old"))),
        })
        .collect()
}

/// Probability ratios `π_θ(a_t|s_t) / exp(logp_old_t)`.
pub fn ppo_ratios(params: &PolicyParams, buffer: &TrajectoryBuffer) -> Result<Vec<f64>> {
    let olds = logp_olds(buffer)?;
    buffer
        .transitions
        .iter()
        .zip(olds)
        .map(|(t, old)| Ok((params.log_prob(&t.state, t.action)? - old).exp()))
        .collect()
}

/// `(1/T) Σ_t min(ρ_t Â_t, clip(ρ_t, 1-ε, 1+ε) Â_t)`
pub fn ppo_objective(
    params: &PolicyParams,
    buffer: &TrajectoryBuffer,
    adv: &[f64],
    epsilon: f64,
) -> Result<f64> {
    check_advantages(buffer, adv)?;
    let ratios = ppo_ratios(params, buffer)?;
    let total: f64 = ratios
        .iter()
        .zip(adv)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * a))
        .sum();
    Ok(total / buffer.len() as f64)
}

/// True when the clipped branch of the surrogate is active, which makes the
/// term constant in θ.
pub fn ppo_clipped(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + epsilon) || (advantage < 0.0 && ratio < 1.0 - epsilon)
}

/// Gradient of [`ppo_objective`]. Any `epsilon > 0` is accepted, including
/// infinity.
pub fn ppo_gradient(
    params: &PolicyParams,
    buffer: &TrajectoryBuffer,
    adv: &[f64],
    epsilon: f64,
) -> Result<PolicyGrads> {
    check_advantages(buffer, adv)?;
    if !(epsilon > 0.0) {
        return Err(Error::invalid("clip epsilon must be positive"));
    }
    let olds = logp_olds(buffer)?;
    let scale = 1.0 / buffer.len() as f64;
    let mut grads = params.zeros_like();
    for ((t, &a), old) in buffer.transitions.iter().zip(adv).zip(olds) {
        let ratio = (params.log_prob(&t.state, t.action)? - old).exp();
        if ppo_clipped(ratio, a, epsilon) {
            continue;
        }
        // ∇ρ = ρ ∇ log π
        params.accumulate_log_prob_grad(&t.state, t.action, a * ratio * scale, &mut grads)?;
    }
    Ok(grads)
}

/// `cfg.ppo_epochs` ascent steps on the clipped surrogate. Ratios are taken
/// against each transition's stored `logp_old`; `old_params` must be the
/// policy those were computed under.
pub fn ppo_update(
    params: &PolicyParams,
    old_params: &PolicyParams,
    buffer: &TrajectoryBuffer,
    cfg: &PolicyConfig,
) -> Result<PolicyParams> {
    cfg.validate()?;
    if old_params.w2.dim() != params.w2.dim() || old_params.w1.dim() != params.w1.dim() {
        return Err(Error::invalid("old policy shape differs from current policy"));
    }
    let adv = advantages(buffer, cfg)?;
    let mut next = params.clone();
    for _ in 0..cfg.ppo_epochs {
        let grads = ppo_gradient(&next, buffer, &adv, cfg.clip_epsilon)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("PPO gradient".into()));
        }
        next.ascend(&grads, cfg.lr);
    }
    Ok(next)
}

/// Which objective drives the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAlgorithm {
    Reinforce,
    Ppo,
}

/// Current policy, the auxiliary old policy and the sync schedule.
#[derive(Clone, Debug)]
pub struct PolicyAgent {
    pub params: PolicyParams,
    pub old_params: PolicyParams,
    pub cfg: PolicyConfig,
    pub algorithm: PolicyAlgorithm,
    updates: usize,
}

impl PolicyAgent {
    pub fn new(params: PolicyParams, cfg: PolicyConfig, algorithm: PolicyAlgorithm) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            old_params: params.clone(),
            params,
            cfg,
            algorithm,
            updates: 0,
        })
    }

    pub fn act(&self, state: &[f64], rng: &mut Rng) -> Result<(usize, f64)> {
        sample_action(&self.params.forward(state)?, rng)
    }

    /// Update on the whole buffer. For PPO the stored `logp_old` values are
    /// refreshed from the old policy first, then the old policy is synced on
    /// the configured cadence.
    pub fn update(&mut self, buffer: &mut TrajectoryBuffer) -> Result<()> {
        match self.algorithm {
            PolicyAlgorithm::Reinforce => {
                self.params = reinforce_update(&self.params, buffer, &self.cfg)?;
            }
            PolicyAlgorithm::Ppo => {
                for t in &mut buffer.transitions {
                    t.logp_old = Some(self.old_params.log_prob(&t.state, t.action)?);
                }
                self.params = ppo_update(&self.params, &self.old_params, buffer, &self.cfg)?;
            }
        }
        self.updates += 1;
        if self.updates % self.cfg.old_sync_every == 0 {
            self.old_params = self.params.clone();
        }
        Ok(())
    }
}

/// Exact-gradient softmax policy-gradient ascent on a one-state bandit.
/// Returns `steps + 1` probability vectors, starting with the initial one.
pub fn run_softmax_bandit(
    action_rewards: &[f64],
    init_logits: &[f64],
    steps: usize,
    lr: f64,
) -> Result<Vec<Vec<f64>>> {
    if action_rewards.len() < 2 || action_rewards.len() != init_logits.len() {
        return Err(Error::invalid(
            "rewards and logits must have equal length of at least 2",
        ));
    }
    if steps == 0 {
        return Err(Error::invalid("bandit needs at least one step"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("bandit lr must be positive"));
    }
    let rewards = Array1::from(action_rewards.to_vec());
    let mut logits = Array1::from(init_logits.to_vec());
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let probs = softmax(&logits);
        out.push(probs.to_vec());
        if step == steps {
            break;
        }
        // ∂/∂θ_i Σ_a π_a r_a = π_i (r_i - π·r)
        let expected = probs.dot(&rewards);
        logits.zip_mut_with(&(&probs * &(&rewards - expected)), |t, g| *t += lr * g);
    }
    Ok(out)
}

/// First step at which `action`'s probability exceeds `threshold`.
pub fn steps_to_majority(trajectory: &[Vec<f64>], action: usize, threshold: f64) -> Option<usize> {
    trajectory
        .iter()
        .position(|p| p.get(action).is_some_and(|&v| v > threshold))
}

/// Logits that put probability `p` on `action` and share the rest equally.
pub fn skewed_logits(actions: usize, action: usize, p: f64) -> Result<Vec<f64>> {
    if actions < 2 || action >= actions || !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("skewed logits need 0 < p < 1 and a valid action"));
    }
    let rest = (1.0 - p) / (actions - 1) as f64;
    let mut logits = vec![0.0; actions];
    logits[action] = (p / rest).ln();
    Ok(logits)
}
