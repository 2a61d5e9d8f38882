//! Surrogate objectives and their analytic gradients.
//!
//! All four objectives are maximised and share the double normalisation
//! `(1/|batch|) (1/T_tau)` over the augmented token space:
//!
//! * `fiberpo`: gated ratio `G_i` from [`crate::gating`], times `A_i`.
//! * `ppo` / `grpo`: per-token `min(r A, clip(r, 1 ± eps) A)`. The two share
//!   the surrogate; the trainer feeds them batch- and group-normalised
//!   advantages respectively.
//! * `gspo`: the trajectory's geometric-mean ratio `exp(mean log r)`,
//!   clipped once and applied to every token.
//!
//! Gradients are computed in two stages: `dJ/d log r_i` per token
//! ([`evaluate`]), then the chain rule through the softmax score.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::gating::{
    aggregate_log_ratios, gate_trajectory, sign_label, GatedTrajectory, GatingConfig, Sign,
    TrajectoryAggregates,
};
use crate::numeric::{stable_sum, KahanSum};
use crate::policy::{ContextKey, SoftmaxPolicy};

/// Default floor on the group reward standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FiberPo,
    Ppo,
    Grpo,
    Gspo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FiberPo, Method::Ppo, Method::Grpo, Method::Gspo];

    pub fn name(self) -> &'static str {
        match self {
            Method::FiberPo => "fiberpo",
            Method::Ppo => "ppo",
            Method::Grpo => "grpo",
            Method::Gspo => "gspo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config("method.name", format!("unknown method `{s}`")))
    }
}

/// Parameters shared by the objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    pub gating: GatingConfig,
    /// Ratio clip half-width for PPO/GRPO/GSPO.
    pub clip_eps: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            gating: GatingConfig::default(),
            clip_eps: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub trajectory_id: usize,
    pub timestep: usize,
    pub state_key: ContextKey,
    pub action: usize,
    pub logp_old: f64,
    pub logp_new: f64,
    pub advantage: f64,
    pub sign_label: Sign,
}

impl TokenRecord {
    pub fn log_ratio(&self) -> f64 {
        self.logp_new - self.logp_old
    }
}

/// Trajectories of one update, with cached per-trajectory aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Vec<TokenRecord>>,
    pub group_ids: Vec<u32>,
    pub domain_ids: Vec<u32>,
    pub aggregates: Vec<TrajectoryAggregates>,
}

impl TrajectoryBatch {
    /// Validates the records and computes labels and aggregates.
    pub fn new(
        mut trajectories: Vec<Vec<TokenRecord>>,
        group_ids: Vec<u32>,
        domain_ids: Vec<u32>,
        config: &GatingConfig,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::domain("a batch needs at least one trajectory"));
        }
        if group_ids.len() != trajectories.len() || domain_ids.len() != trajectories.len() {
            return Err(Error::domain("group/domain ids must match the trajectory count"));
        }
        for (k, traj) in trajectories.iter_mut().enumerate() {
            if traj.is_empty() {
                return Err(Error::domain(format!("trajectory {k} is empty")));
            }
            for (t, rec) in traj.iter_mut().enumerate() {
                if rec.trajectory_id != k || rec.timestep != t {
                    return Err(Error::domain(format!(
                        "record ({}, {}) stored at ({k}, {t})",
                        rec.trajectory_id, rec.timestep
                    )));
                }
                if !rec.log_ratio().is_finite() || !rec.advantage.is_finite() {
                    return Err(Error::domain(format!("non-finite record at ({k}, {t})")));
                }
                rec.sign_label = sign_label(rec.log_ratio(), config)?;
            }
        }
        let aggregates = trajectories
            .iter()
            .map(|t| aggregate_log_ratios(&t.iter().map(TokenRecord::log_ratio).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(Self {
            trajectories,
            group_ids,
            domain_ids,
            aggregates,
        })
    }

    /// Batch from rollouts; `logp_new` is evaluated under `policy`.
    pub fn from_rollouts(
        rollouts: &[Trajectory],
        group_ids: Vec<u32>,
        domain_ids: Vec<u32>,
        advantages: &[f64],
        policy: &SoftmaxPolicy,
        config: &GatingConfig,
    ) -> Result<Self> {
        if advantages.len() != rollouts.len() {
            return Err(Error::domain("one advantage per trajectory required"));
        }
        let mut trajectories = Vec::with_capacity(rollouts.len());
        for (k, (traj, &adv)) in rollouts.iter().zip(advantages).enumerate() {
            let mut recs = Vec::with_capacity(traj.len());
            for (t, key) in traj.contexts(policy).into_iter().enumerate() {
                let action = traj.tokens[t];
                recs.push(TokenRecord {
                    trajectory_id: k,
                    timestep: t,
                    logp_new: policy.log_prob(&key, action)?,
                    state_key: key,
                    action,
                    logp_old: traj.logp_old[t],
                    advantage: adv,
                    sign_label: Sign::Plus,
                });
            }
            trajectories.push(recs);
        }
        Self::new(trajectories, group_ids, domain_ids, config)
    }

    /// Synthetic batch with given log-ratios and per-token advantages.
    ///
    /// Records get distinct dummy contexts; `logp_old = 0`.
    pub fn from_log_ratios(
        log_ratios: &[Vec<f64>],
        advantages: &[Vec<f64>],
        config: &GatingConfig,
    ) -> Result<Self> {
        if log_ratios.len() != advantages.len() {
            return Err(Error::domain("log-ratio and advantage shapes differ"));
        }
        let mut trajectories = Vec::with_capacity(log_ratios.len());
        for (k, (ys, advs)) in log_ratios.iter().zip(advantages).enumerate() {
            if ys.len() != advs.len() {
                return Err(Error::domain(format!("trajectory {k}: shape mismatch")));
            }
            trajectories.push(
                ys.iter()
                    .zip(advs)
                    .enumerate()
                    .map(|(t, (&y, &a))| TokenRecord {
                        trajectory_id: k,
                        timestep: t,
                        state_key: ContextKey::new(k as u32, vec![t as u32]),
                        action: 0,
                        logp_old: 0.0,
                        logp_new: y,
                        advantage: a,
                        sign_label: Sign::Plus,
                    })
                    .collect(),
            );
        }
        let n = trajectories.len();
        Self::new(trajectories, (0..n as u32).collect(), vec![0; n], config)
    }

    /// Re-evaluates `logp_new` under `policy` and refreshes labels/aggregates.
    pub fn refresh(&mut self, policy: &SoftmaxPolicy, config: &GatingConfig) -> Result<()> {
        for traj in &mut self.trajectories {
            for rec in traj.iter_mut() {
                rec.logp_new = policy.log_prob(&rec.state_key, rec.action)?;
                rec.sign_label = sign_label(rec.log_ratio(), config)?;
            }
        }
        self.aggregates = self
            .trajectories
            .iter()
            .map(|t| aggregate_log_ratios(&t.iter().map(TokenRecord::log_ratio).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn refreshed(&self, policy: &SoftmaxPolicy, config: &GatingConfig) -> Result<Self> {
        let mut b = self.clone();
        b.refresh(policy, config)?;
        Ok(b)
    }

    /// Checks cached aggregates against recomputation.
    pub fn verify_cache(&self) -> Result<()> {
        for (k, (traj, cached)) in self.trajectories.iter().zip(&self.aggregates).enumerate() {
            let fresh = aggregate_log_ratios(&traj.iter().map(TokenRecord::log_ratio).collect::<Vec<_>>())?;
            if fresh != *cached {
                return Err(Error::Consistency(format!(
                    "trajectory {k}: cached aggregates {cached:?} differ from {fresh:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    pub fn log_ratios(&self, k: usize) -> Vec<f64> {
        self.trajectories[k].iter().map(TokenRecord::log_ratio).collect()
    }

    pub fn set_advantages(&mut self, per_trajectory: &[f64]) -> Result<()> {
        if per_trajectory.len() != self.len() {
            return Err(Error::domain("one advantage per trajectory required"));
        }
        for (traj, &a) in self.trajectories.iter_mut().zip(per_trajectory) {
            traj.iter_mut().for_each(|r| r.advantage = a);
        }
        Ok(())
    }
}

fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = stable_sum(xs.iter().copied()) / n;
    let var = stable_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / n;
    (mean, var.sqrt())
}

/// `(reward - group mean) / max(group std, floor)`, population std.
pub fn group_advantages(rewards: &[f64], group_ids: &[u32], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() != group_ids.len() {
        return Err(Error::domain("one group id per reward required"));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &g) in group_ids.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    let mut out = vec![0.0; rewards.len()];
    for (g, members) in groups {
        if members.len() < 2 {
            return Err(Error::domain(format!("group {g} has a single trajectory; baseline undefined")));
        }
        let rs: Vec<f64> = members.iter().map(|&i| rewards[i]).collect();
        let (mean, std) = mean_and_std(&rs);
        for &i in &members {
            out[i] = (rewards[i] - mean) / std.max(std_floor);
        }
    }
    Ok(out)
}

/// Whole-batch reward whitening (no per-prompt baseline).
pub fn batch_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::domain("batch normalisation needs at least two rewards"));
    }
    let (mean, std) = mean_and_std(rewards);
    Ok(rewards.iter().map(|r| (r - mean) / std.max(std_floor)).collect())
}

/// Objective value plus per-token sensitivities `dJ / d log r_i`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub sensitivities: Vec<Vec<f64>>,
    /// Tokens whose gradient is blocked (or, for FiberPO, whose fiber
    /// residual saturates).
    pub clipped_tokens: usize,
    pub total_tokens: usize,
    /// Gate outputs; populated for FiberPO.
    pub gates: Option<Vec<GatedTrajectory>>,
}

impl Evaluation {
    pub fn clip_fraction(&self) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.clipped_tokens as f64 / self.total_tokens as f64
        }
    }
}

struct TrajectoryTerm {
    value: f64,
    sens: Vec<f64>,
    clipped: usize,
    gate: Option<GatedTrajectory>,
}

fn clipped_surrogate(r: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = r * adv;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, false)
    } else {
        (clipped, true)
    }
}

fn trajectory_term(
    traj: &[TokenRecord],
    norm: f64,
    method: Method,
    params: &ObjectiveParams,
) -> Result<TrajectoryTerm> {
    let t = traj.len() as f64;
    let w = norm / t;
    let ys: Vec<f64> = traj.iter().map(TokenRecord::log_ratio).collect();
    match method {
        Method::FiberPo => {
            let gate = gate_trajectory(&ys, &params.gating)?;
            let value = stable_sum(gate.gated.iter().zip(traj).map(|(g, r)| g * r.advantage)) * w;
            let upstream: Vec<f64> = traj.iter().map(|r| r.advantage * w).collect();
            let sens = gate.log_ratio_vjp(&upstream, &params.gating);
            Ok(TrajectoryTerm {
                value,
                sens,
                clipped: gate.clipped_count(),
                gate: Some(gate),
            })
        }
        Method::Ppo | Method::Grpo => {
            let mut value = KahanSum::new();
            let mut clipped = 0;
            let sens = ys
                .iter()
                .zip(traj)
                .map(|(&y, rec)| {
                    let r = y.exp();
                    let (v, is_clipped) = clipped_surrogate(r, rec.advantage, params.clip_eps);
                    value.add(v);
                    if is_clipped {
                        clipped += 1;
                        0.0
                    } else {
                        r * rec.advantage * w
                    }
                })
                .collect();
            Ok(TrajectoryTerm {
                value: value.value() * w,
                sens,
                clipped,
                gate: None,
            })
        }
        Method::Gspo => {
            let s = (stable_sum(ys.iter().copied()) / t).exp();
            let mut value = KahanSum::new();
            let mut active = KahanSum::new();
            let mut clipped = 0;
            for rec in traj {
                let (v, is_clipped) = clipped_surrogate(s, rec.advantage, params.clip_eps);
                value.add(v);
                if is_clipped {
                    clipped += 1;
                } else {
                    active.add(s * rec.advantage);
                }
            }
            // d s / d y_j = s / T for every token
            let per_token = active.value() * w / t;
            Ok(TrajectoryTerm {
                value: value.value() * w,
                sens: vec![per_token; traj.len()],
                clipped,
                gate: None,
            })
        }
    }
}

/// Evaluates an objective on the batch's stored log-ratios.
///
/// Trajectories are processed in parallel; the reduction runs in trajectory
/// order, so results do not depend on the worker count.
pub fn evaluate(batch: &TrajectoryBatch, method: Method, params: &ObjectiveParams) -> Result<Evaluation> {
    let norm = 1.0 / batch.len() as f64;
    let terms = batch
        .trajectories
        .par_iter()
        .map(|traj| trajectory_term(traj, norm, method, params))
        .collect::<Result<Vec<_>>>()?;
    let value = stable_sum(terms.iter().map(|t| t.value));
    let clipped_tokens = terms.iter().map(|t| t.clipped).sum();
    let gates = (method == Method::FiberPo)
        .then(|| terms.iter().map(|t| t.gate.clone().expect("gate present")).collect());
    Ok(Evaluation {
        value,
        sensitivities: terms.into_iter().map(|t| t.sens).collect(),
        clipped_tokens,
        total_tokens: batch.num_tokens(),
        gates,
    })
}

pub fn fiberpo_objective(batch: &TrajectoryBatch, config: &GatingConfig) -> Result<f64> {
    let params = ObjectiveParams {
        gating: *config,
        ..Default::default()
    };
    Ok(evaluate(batch, Method::FiberPo, &params)?.value)
}

fn clipped_objective(batch: &TrajectoryBatch, method: Method, clip_eps: f64) -> f64 {
    let params = ObjectiveParams {
        clip_eps,
        ..Default::default()
    };
    evaluate(batch, method, &params)
        .expect("clipped surrogates are total on validated batches")
        .value
}

pub fn ppo_objective(batch: &TrajectoryBatch, clip_eps: f64) -> f64 {
    clipped_objective(batch, Method::Ppo, clip_eps)
}

pub fn grpo_objective(batch: &TrajectoryBatch, clip_eps: f64) -> f64 {
    clipped_objective(batch, Method::Grpo, clip_eps)
}

pub fn gspo_objective(batch: &TrajectoryBatch, clip_eps: f64) -> f64 {
    clipped_objective(batch, Method::Gspo, clip_eps)
}

/// Chain rule from per-token sensitivities to policy logits.
pub fn backprop_to_logits(
    policy: &SoftmaxPolicy,
    batch: &TrajectoryBatch,
    sensitivities: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let mut acc = vec![KahanSum::new(); policy.num_params()];
    for (traj, sens) in batch.trajectories.iter().zip(sensitivities) {
        for (rec, &s) in traj.iter().zip(sens) {
            if s == 0.0 {
                continue;
            }
            let (offset, _) = policy.slot(&rec.state_key)?;
            for (a, g) in policy.score(&rec.state_key, rec.action)?.into_iter().enumerate() {
                acc[offset + a].add(s * g);
            }
        }
    }
    Ok(acc.iter().map(KahanSum::value).collect())
}

/// Objective value and gradient with respect to every policy logit.
///
/// `logp_new` is re-evaluated under `policy`; `logp_old` and advantages are
/// taken from the batch.
pub fn objective_value_and_gradient(
    policy: &SoftmaxPolicy,
    batch: &TrajectoryBatch,
    method: Method,
    params: &ObjectiveParams,
) -> Result<(Evaluation, Vec<f64>)> {
    let fresh = batch.refreshed(policy, &params.gating)?;
    let eval = evaluate(&fresh, method, params)?;
    let grad = backprop_to_logits(policy, &fresh, &eval.sensitivities)?;
    Ok((eval, grad))
}

pub fn objective_gradient(
    policy: &SoftmaxPolicy,
    batch: &TrajectoryBatch,
    method: Method,
    params: &ObjectiveParams,
) -> Result<Vec<f64>> {
    Ok(objective_value_and_gradient(policy, batch, method, params)?.1)
}

/// Objective value under `policy` (for finite-difference checks).
pub fn objective_value(
    policy: &SoftmaxPolicy,
    batch: &TrajectoryBatch,
    method: Method,
    params: &ObjectiveParams,
) -> Result<f64> {
    let fresh = batch.refreshed(policy, &params.gating)?;
    Ok(evaluate(&fresh, method, params)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn nominal_cfg(eps: f64) -> GatingConfig {
        GatingConfig::new(eps, 0.3, 0.2).unwrap()
    }

    #[test]
    fn group_advantage_examples() {
        let adv = group_advantages(&[1.0, 0.0, 0.0, 1.0], &[0, 0, 0, 0], STD_FLOOR).unwrap();
        assert_eq!(adv, vec![1.0, -1.0, -1.0, 1.0]);
        let adv = group_advantages(&[1.0; 4], &[3; 4], STD_FLOOR).unwrap();
        assert_eq!(adv, vec![0.0; 4]);
        let adv = group_advantages(&[2.0, 0.0], &[0, 0], STD_FLOOR).unwrap();
        assert_eq!(adv, vec![1.0, -1.0]);
        assert!(group_advantages(&[1.0, 0.0, 1.0], &[0, 0, 1], STD_FLOOR).is_err());
    }

    #[test]
    fn fiberpo_examples() {
        let c = nominal_cfg(0.05);
        let b = TrajectoryBatch::from_log_ratios(&[vec![0.0, 0.0]], &[vec![0.5, 0.5]], &c).unwrap();
        assert_relative_eq!(fiberpo_objective(&b, &c).unwrap(), 0.5, max_relative = 1e-15);
        let b = TrajectoryBatch::from_log_ratios(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![-1.0]], &c).unwrap();
        assert_eq!(fiberpo_objective(&b, &c).unwrap(), 0.0);

        let c = nominal_cfg(0.5);
        let ys = [0.2, -0.1, 0.3, 0.0];
        let b = TrajectoryBatch::from_log_ratios(&[ys.to_vec()], &[vec![1.0; 4]], &c).unwrap();
        let expected = ys.iter().map(|y: &f64| y.exp()).sum::<f64>() / 4.0;
        assert_relative_eq!(fiberpo_objective(&b, &c).unwrap(), expected, max_relative = 1e-12);
        assert!((expected - 1.119_02).abs() < 1e-5);
    }

    #[test]
    fn ppo_examples() {
        let c = nominal_cfg(0.05);
        let b = TrajectoryBatch::from_log_ratios(&[vec![1.5f64.ln()]], &[vec![1.0]], &c).unwrap();
        assert_relative_eq!(ppo_objective(&b, 0.2), 1.2, max_relative = 1e-12);
        let b = TrajectoryBatch::from_log_ratios(&[vec![1.5f64.ln()]], &[vec![-1.0]], &c).unwrap();
        assert_relative_eq!(ppo_objective(&b, 0.2), -1.5, max_relative = 1e-12);
    }

    #[test]
    fn all_objectives_agree_on_policy() {
        let c = nominal_cfg(0.05);
        let ys = vec![vec![0.0; 3], vec![0.0; 5]];
        let adv = vec![vec![0.7; 3], vec![-0.4; 5]];
        let b = TrajectoryBatch::from_log_ratios(&ys, &adv, &c).unwrap();
        let plain = (0.7 + -0.4) / 2.0;
        let params = ObjectiveParams { gating: c, clip_eps: 0.2 };
        for m in Method::ALL {
            let e = evaluate(&b, m, &params).unwrap();
            assert_relative_eq!(e.value, plain, max_relative = 1e-14);
            assert_eq!(e.clipped_tokens, 0);
            for (sens, a, t) in [(&e.sensitivities[0], 0.7, 3.0), (&e.sensitivities[1], -0.4, 5.0)] {
                for s in sens {
                    assert_relative_eq!(*s, a / (2.0 * t), max_relative = 1e-14);
                }
            }
        }
    }

    #[test]
    fn extinct_trajectory_has_no_base_gradient() {
        let c = nominal_cfg(0.05);
        // alternating +/-1 gives s+ = s- = 0.5, past both zeroing thresholds
        let ys = vec![1.0, -1.0, 1.0, -1.0];
        let g = gate_trajectory(&ys, &c).unwrap();
        assert_eq!(g.base_weight, 1.0);
        // every residual saturates (|u| = 0.5 > eps), so no gradient flows at all
        let upstream = vec![1.0; 4];
        assert!(g.log_ratio_vjp(&upstream, &c).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("trpo".parse::<Method>().is_err());
    }

    #[test]
    fn cache_verification() {
        let c = nominal_cfg(0.05);
        let mut b = TrajectoryBatch::from_log_ratios(&[vec![0.1, -0.2]], &[vec![1.0, 1.0]], &c).unwrap();
        b.verify_cache().unwrap();
        b.trajectories[0][0].logp_new = 0.5;
        assert!(matches!(b.verify_cache(), Err(Error::Consistency(_))));
    }
}
