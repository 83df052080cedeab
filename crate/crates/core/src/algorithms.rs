//! Plug-in post-training updates consumed by the learner: human-gated
//! DAgger (supervised on expert-labelled frames) and advantage-conditioned
//! training with a frozen value function.

use thiserror::Error;

use crate::envsim::Observation;
use crate::learner::SampledItem;
use crate::policy::{ActionDistribution, Head, NllItem, PolicyError, PolicyParams};
use crate::store::{EpisodeRecord, Frame};

#[derive(Debug, Error, PartialEq)]
pub enum AlgorithmError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("frame {0} in batch has no advantage indicator")]
    MissingIndicator(usize),
    #[error("no episodes to fit the value function on")]
    EmptyValueData,
    #[error("value regression failed: {0}")]
    Regression(String),
    #[error("invalid algorithm settings: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmKind {
    HgDagger,
    Recap,
}

impl AlgorithmKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hgdagger" | "hg-dagger" => Some(AlgorithmKind::HgDagger),
            "recap" => Some(AlgorithmKind::Recap),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::HgDagger => "hgdagger",
            AlgorithmKind::Recap => "recap",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecapSettings {
    /// Per-task advantage threshold.
    pub epsilons: Vec<f64>,
    pub gamma: f64,
    pub beta_rollout: f64,
    pub beta_eval: f64,
}

impl RecapSettings {
    pub fn new(num_tasks: usize) -> Self {
        RecapSettings {
            epsilons: vec![0.0; num_tasks],
            gamma: 0.99,
            beta_rollout: 1.0,
            beta_eval: 2.0,
        }
    }

    pub fn epsilon(&self, task: u32) -> f64 {
        self.epsilons.get(task as usize).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSpec {
    pub kind: AlgorithmKind,
    pub recap: RecapSettings,
}

impl AlgorithmSpec {
    pub fn validate(&self) -> Result<(), AlgorithmError> {
        let r = &self.recap;
        if !(r.gamma > 0.0 && r.gamma <= 1.0) {
            return Err(AlgorithmError::InvalidSpec(format!(
                "gamma {} outside (0, 1]",
                r.gamma
            )));
        }
        if r.epsilons.iter().any(|e| !e.is_finite()) {
            return Err(AlgorithmError::InvalidSpec(
                "non-finite advantage threshold".into(),
            ));
        }
        if !(r.beta_rollout >= 0.0 && r.beta_eval >= 0.0) {
            return Err(AlgorithmError::InvalidSpec(
                "beta must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub params: PolicyParams,
    /// Loss of every batch item, in batch order.
    pub losses: Vec<f64>,
    /// False when the update left the parameters untouched.
    pub applied: bool,
}

/// NLL step on the marginal head over expert-labelled frames only; every
/// item still gets a bookkeeping loss.
pub fn hgdagger_update(
    params: &PolicyParams,
    batch: &[SampledItem],
    lr: f64,
) -> Result<UpdateOutcome, AlgorithmError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch.into());
    }
    let expert_positions: Vec<usize> = (0..batch.len())
        .filter(|&i| batch[i].frame.frame.expert_flag)
        .collect();
    let mut losses = vec![0.0; batch.len()];
    if expert_positions.is_empty() {
        for (i, item) in batch.iter().enumerate() {
            losses[i] = marginal_nll(params, &item.frame.frame)?;
        }
        return Ok(UpdateOutcome {
            params: params.clone(),
            losses,
            applied: false,
        });
    }
    let items: Vec<NllItem<'_>> = expert_positions
        .iter()
        .map(|&i| {
            let f = &batch[i].frame.frame;
            NllItem {
                obs: &f.observation,
                action: f.action,
                head: Head::Marginal,
            }
        })
        .collect();
    let out = params.nll_grad(&items)?;
    for (&i, &l) in expert_positions.iter().zip(&out.per_item) {
        losses[i] = l;
    }
    for (i, item) in batch.iter().enumerate() {
        if !item.frame.frame.expert_flag {
            losses[i] = marginal_nll(params, &item.frame.frame)?;
        }
    }
    Ok(UpdateOutcome {
        params: params.sgd_step(&out.gradient, lr)?,
        losses,
        applied: true,
    })
}

fn marginal_nll(params: &PolicyParams, frame: &Frame) -> Result<f64, PolicyError> {
    let logits = params.logits(&frame.observation, Head::Marginal)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[frame.action.index()])
}

/// Discounted Monte-Carlo returns of one episode.
pub fn discounted_returns(frames: &[Frame], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; frames.len()];
    let mut acc = 0.0;
    for (t, f) in frames.iter().enumerate().rev() {
        acc = f.reward + gamma * acc;
        out[t] = acc;
    }
    out
}

const RIDGE_FALLBACK: f64 = 1e-6;

/// Least-squares fit of a linear value function onto discounted returns.
pub fn fit_value(episodes: &[EpisodeRecord], gamma: f64) -> Result<Vec<f64>, AlgorithmError> {
    let dim = episodes
        .iter()
        .flat_map(|e| e.frames.first())
        .map(|f| f.observation.len())
        .next()
        .ok_or(AlgorithmError::EmptyValueData)?;
    let mut xtx = vec![0.0; dim * dim];
    let mut xty = vec![0.0; dim];
    for ep in episodes {
        let returns = discounted_returns(&ep.frames, gamma);
        for (f, g) in ep.frames.iter().zip(returns) {
            let x = f.observation.features();
            if x.len() != dim {
                return Err(PolicyError::DimensionMismatch {
                    expected: dim,
                    got: x.len(),
                }
                .into());
            }
            for i in 0..dim {
                xty[i] += x[i] * g;
                for j in 0..dim {
                    xtx[i * dim + j] += x[i] * x[j];
                }
            }
        }
    }
    match solve_spd(&xtx, &xty, dim, 0.0) {
        Some(w) => Ok(w),
        None => {
            log::info!("value design matrix is degenerate; refitting with ridge {RIDGE_FALLBACK}");
            solve_spd(&xtx, &xty, dim, RIDGE_FALLBACK).ok_or_else(|| {
                AlgorithmError::Regression("ridge system not positive definite".into())
            })
        }
    }
}

/// Cholesky solve of `(A + ridge I) w = b`; `None` when not positive definite.
fn solve_spd(a: &[f64], b: &[f64], n: usize, ridge: f64) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max).max(1.0);
    let min_pivot = if ridge > 0.0 { 0.0 } else { scale * 1e-12 };
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j] + if i == j { ridge } else { 0.0 };
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= min_pivot {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-step TD advantage `r + gamma V(s') - V(s)`; `next = None` is terminal.
pub fn td_advantage(
    value_weights: &[f64],
    obs: &Observation,
    reward: f64,
    next: Option<&Observation>,
    gamma: f64,
) -> f64 {
    let v_next = next.map_or(0.0, |o| dot(value_weights, o.features()));
    reward + gamma * v_next - dot(value_weights, obs.features())
}

/// `1(A > epsilon)` with a strict inequality.
pub fn advantage_indicator(
    value_weights: &[f64],
    obs: &Observation,
    reward: f64,
    next: Option<&Observation>,
    gamma: f64,
    epsilon: f64,
) -> bool {
    td_advantage(value_weights, obs, reward, next, gamma) > epsilon
}

/// Stamps indicators on consecutive frames of one episode.
pub fn stamp_indicators(frames: &mut [Frame], value_weights: &[f64], gamma: f64, epsilon: f64) {
    let n = frames.len();
    for t in 0..n {
        let bit = {
            let next = frames.get(t + 1).map(|f| &f.observation);
            let f = &frames[t];
            advantage_indicator(
                value_weights,
                &f.observation,
                f.reward,
                next,
                gamma,
                epsilon,
            )
        };
        frames[t].advantage_indicator = Some(bit);
    }
}

/// Joint NLL step: conditioned head on (features, indicator) and marginal
/// head on features, same frames. Losses are the conditioned-head NLL.
pub fn recap_update(
    params: &PolicyParams,
    batch: &[SampledItem],
    lr: f64,
) -> Result<UpdateOutcome, AlgorithmError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch.into());
    }
    let mut conditioned = Vec::with_capacity(batch.len());
    let mut marginal = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let f = &item.frame.frame;
        let bit = f
            .advantage_indicator
            .ok_or(AlgorithmError::MissingIndicator(i))?;
        conditioned.push(NllItem {
            obs: &f.observation,
            action: f.action,
            head: Head::Conditioned(bit),
        });
        marginal.push(NllItem {
            obs: &f.observation,
            action: f.action,
            head: Head::Marginal,
        });
    }
    let cond_out = params.nll_grad(&conditioned)?;
    let marg_out = params.nll_grad(&marginal)?;
    let mut gradient = cond_out.gradient;
    gradient.add_assign(&marg_out.gradient);
    Ok(UpdateOutcome {
        params: params.sgd_step(&gradient, lr)?,
        losses: cond_out.per_item,
        applied: true,
    })
}

/// `pi_hat ∝ pi(a|s)^(1-beta) * pi(a|I=1,s)^beta`, renormalised. Actions with
/// zero marginal probability (or zero conditioned probability when beta > 0)
/// stay at zero.
pub fn sharpen(marginal: &[f64], conditioned: &[f64], beta: f64) -> Vec<f64> {
    assert_eq!(marginal.len(), conditioned.len());
    assert!(beta >= 0.0, "beta must be nonnegative");
    if beta == 0.0 {
        return marginal.to_vec();
    }
    let logs: Vec<Option<f64>> = marginal
        .iter()
        .zip(conditioned)
        .map(|(&m, &c)| (m > 0.0 && c > 0.0).then(|| (1.0 - beta) * m.ln() + beta * c.ln()))
        .collect();
    let max = logs
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return marginal.to_vec();
    }
    let unnorm: Vec<f64> = logs
        .iter()
        .map(|l| l.map_or(0.0, |v| (v - max).exp()))
        .collect();
    let z: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|u| u / z).collect()
}

pub fn recap_sample_dist(
    params: &PolicyParams,
    obs: &Observation,
    beta: f64,
) -> Result<ActionDistribution, PolicyError> {
    let marginal = params.forward(obs, Head::Marginal)?;
    if beta == 0.0 {
        return Ok(marginal);
    }
    let conditioned = params.forward(obs, Head::Conditioned(true))?;
    Ok(ActionDistribution {
        probs: sharpen(&marginal.probs, &conditioned.probs, beta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::envsim::{Action, EpisodeStatus, NUM_ACTIONS};
    use crate::learner::{BufferedFrame, Origin};
    use crate::store::{EpisodeId, Source};

    fn item(obs: Vec<f64>, action: Action, expert: bool, ind: Option<bool>) -> SampledItem {
        SampledItem {
            task: 0,
            origin: Origin::Offline,
            frame: Arc::new(BufferedFrame {
                frame: Frame {
                    observation: Observation(obs),
                    action,
                    reward: 0.0,
                    expert_flag: expert,
                    advantage_indicator: ind,
                },
                episode_id: EpisodeId(1),
            }),
        }
    }

    #[test]
    fn sharpen_worked_examples() {
        let m = [0.5, 0.5];
        let c = [0.9, 0.1];
        assert_eq!(sharpen(&m, &c, 0.0), vec![0.5, 0.5]);
        let one = sharpen(&m, &c, 1.0);
        assert!((one[0] - 0.9).abs() < 1e-12 && (one[1] - 0.1).abs() < 1e-12);
        // 0.5 * 1.8^2 = 1.62, 0.5 * 0.2^2 = 0.02
        let two = sharpen(&m, &c, 2.0);
        assert!((two[0] - 1.62 / 1.64).abs() < 1e-12);
        assert!((two[0] - 0.98780).abs() < 1e-5 && (two[1] - 0.01220).abs() < 1e-5);
    }

    #[test]
    fn sharpen_keeps_zero_support() {
        let p = sharpen(&[0.0, 0.5, 0.5], &[0.0, 0.2, 0.8], 2.0);
        assert_eq!(p[0], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = sharpen(&[0.0, 1.0], &[0.5, 0.5], 2.0);
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn indicator_is_strict() {
        let w = vec![1.0, 0.0];
        let s = Observation(vec![0.5, 0.0]);
        assert!(!advantage_indicator(&w, &s, 0.0, Some(&s), 1.0, 0.0));
        // terminal step with reward 1 and V(s) = 0.5
        assert!(advantage_indicator(&w, &s, 1.0, None, 0.99, 0.0));
    }

    #[test]
    fn returns_are_discounted() {
        let mut frames: Vec<Frame> = (0..3)
            .map(|_| Frame {
                observation: Observation(vec![1.0]),
                action: Action::Up,
                reward: 0.0,
                expert_flag: true,
                advantage_indicator: None,
            })
            .collect();
        frames[2].reward = 1.0;
        let g = discounted_returns(&frames, 0.5);
        assert_eq!(g, vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn fit_value_constant_targets() {
        let frames: Vec<Frame> = (0..4)
            .map(|i| Frame {
                observation: Observation(vec![1.0, i as f64 * 0.1, 0.0]),
                action: Action::Up,
                reward: if i == 3 { 1.0 } else { 0.0 },
                expert_flag: true,
                advantage_indicator: None,
            })
            .collect();
        let ep = EpisodeRecord {
            episode_id: EpisodeId(1),
            task_id: 0,
            domain_seed: 0,
            policy_version: 0,
            frames,
            status: EpisodeStatus::Success,
            intervention_spans: vec![(0, 4)],
            source: Source::Offline,
            sim_duration: 4,
        };
        // third feature is identically zero: exercises the ridge fallback
        let w = fit_value(std::slice::from_ref(&ep), 1.0).unwrap();
        for f in &ep.frames {
            assert!((dot(&w, f.observation.features()) - 1.0).abs() < 1e-4);
        }
        assert_eq!(
            fit_value(&[], 0.99).unwrap_err(),
            AlgorithmError::EmptyValueData
        );
    }

    #[test]
    fn hgdagger_ignores_autonomous_frames() {
        let p = PolicyParams::zeros(3);
        let batch = vec![
            item(vec![1.0, 0.0, 0.5], Action::Left, false, None),
            item(vec![0.0, 1.0, 0.5], Action::Up, false, None),
        ];
        let out = hgdagger_update(&p, &batch, 0.1).unwrap();
        assert!(!out.applied);
        assert_eq!(out.params, p);
        assert_eq!(out.losses.len(), 2);
        assert!((out.losses[0] - (NUM_ACTIONS as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn hgdagger_on_demos_equals_behavior_cloning() {
        let p = PolicyParams::zeros(3);
        let batch = vec![
            item(vec![1.0, 0.0, 0.5], Action::Left, true, None),
            item(vec![0.0, 1.0, 0.5], Action::Up, true, None),
        ];
        let out = hgdagger_update(&p, &batch, 0.1).unwrap();
        let items: Vec<NllItem<'_>> = batch
            .iter()
            .map(|b| NllItem {
                obs: &b.frame.frame.observation,
                action: b.frame.frame.action,
                head: Head::Marginal,
            })
            .collect();
        let bc = p
            .sgd_step(&p.nll_grad(&items).unwrap().gradient, 0.1)
            .unwrap();
        assert_eq!(out.params, bc);
    }

    #[test]
    fn recap_requires_indicators() {
        let p = PolicyParams::zeros(2);
        let batch = vec![item(vec![1.0, 0.0], Action::Up, false, None)];
        assert_eq!(
            recap_update(&p, &batch, 0.1).unwrap_err(),
            AlgorithmError::MissingIndicator(0)
        );
    }

    #[test]
    fn recap_beta_zero_is_marginal() {
        let p = PolicyParams::zeros(2)
            .with_block(
                crate::policy::BlockId::Marginal,
                vec![0.3, -0.2, 0.1, 0.9, -1.0, 0.4, 0.0, 0.2, 1.5, -0.7],
            )
            .unwrap();
        let obs = Observation(vec![0.4, -1.2]);
        let m = p.forward(&obs, Head::Marginal).unwrap();
        assert_eq!(recap_sample_dist(&p, &obs, 0.0).unwrap(), m);
    }
}
