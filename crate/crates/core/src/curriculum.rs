//! Pass-rate profiling and Gaussian difficulty curriculum.
//!
//! Every prompt is profiled once with `K` rollouts; solved prompts
//! (`p = 1`) are dropped. At step `t` the target pass rate moves linearly
//! from `mu_0` to `mu_T` and each prompt is weighted by a Gaussian in
//! `p - mu_t`. Sampling is two-level: a domain is drawn with probability
//! `alpha_g ∝ sqrt(N_g)` (unless overridden), then a prompt within it in
//! proportion to its weight.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{seeded_rollout, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::SoftmaxPolicy;

/// Rewards at or above this count as a pass.
pub const PASS_THRESHOLD: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Domain first, then prompt within the domain.
    #[default]
    TwoLevel,
    /// One draw over all valid prompts.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub mu_0: f64,
    pub mu_final: f64,
    pub sigma: f64,
    /// Schedule horizon `T`; 0 means "use the run's step count".
    pub total_steps: usize,
    /// Profiling rollouts per prompt, `K`.
    pub profiling_rollouts: usize,
    pub mode: SamplingMode,
    /// Fixed domain probabilities keyed by domain id.
    pub overrides: BTreeMap<String, f64>,
    /// Re-profile every this many steps; 0 disables.
    pub reprofile_every: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mu_0: 0.8,
            mu_final: 0.2,
            sigma: 0.15,
            total_steps: 0,
            profiling_rollouts: 10,
            mode: SamplingMode::TwoLevel,
            overrides: BTreeMap::new(),
            reprofile_every: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("curriculum.mu_0", self.mu_0),
            ("curriculum.mu_final", self.mu_final),
            ("curriculum.sigma", self.sigma),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(key, format!("must lie in (0, 1], got {v}")));
            }
        }
        if self.profiling_rollouts == 0 {
            return Err(Error::config("curriculum.profiling_rollouts", "must be >= 1"));
        }
        self.override_map()?;
        Ok(())
    }

    /// Overrides keyed by numeric domain id.
    pub fn override_map(&self) -> Result<BTreeMap<u32, f64>> {
        let mut out = BTreeMap::new();
        for (k, &v) in &self.overrides {
            let key = format!("curriculum.overrides.{k}");
            let id: u32 = k
                .parse()
                .map_err(|_| Error::config(&key, "domain override keys must be domain ids"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(&key, format!("must lie in [0, 1], got {v}")));
            }
            out.insert(id, v);
        }
        Ok(out)
    }

    /// Horizon, falling back to `run_steps` when unset.
    pub fn horizon(&self, run_steps: usize) -> usize {
        if self.total_steps > 0 {
            self.total_steps
        } else {
            run_steps.max(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptProfile {
    pub task_id: u32,
    pub domain_id: u32,
    pub pass_rate: f64,
    pub valid: bool,
}

/// Profiles every task with `k` rollouts from independent seeded streams.
pub fn profile_pass_rates(
    policy: &SoftmaxPolicy,
    tasks: &[TaskSpec],
    k: usize,
    seed: u64,
) -> Result<Vec<PromptProfile>> {
    if k == 0 {
        return Err(Error::domain("profiling needs at least one rollout"));
    }
    tasks
        .par_iter()
        .map(|task| {
            let mut passes = 0;
            for i in 0..k {
                let traj = seeded_rollout(policy, task, seed, &[0x9_0F11E, task.task_id as u64, i as u64])?;
                if traj.reward >= PASS_THRESHOLD {
                    passes += 1;
                }
            }
            Ok(PromptProfile {
                task_id: task.task_id,
                domain_id: task.domain_id,
                pass_rate: passes as f64 / k as f64,
                valid: passes < k,
            })
        })
        .collect()
}

/// Linear target schedule `mu_0 + (mu_T - mu_0) t / T`.
pub fn curriculum_mean(t: usize, horizon: usize, config: &CurriculumConfig) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::domain("curriculum horizon must be >= 1"));
    }
    if t > horizon {
        return Err(Error::domain(format!("step {t} outside [0, {horizon}]")));
    }
    if t == horizon {
        return Ok(config.mu_final);
    }
    Ok(config.mu_0 + (config.mu_final - config.mu_0) * (t as f64 / horizon as f64))
}

/// Gaussian prompt weight `exp(-((p - mu) / sigma)^2 / 2)`.
pub fn prompt_weight(p: f64, mu: f64, sigma: f64) -> f64 {
    let z = (p - mu) / sigma;
    (-0.5 * z * z).exp()
}

/// Domain probabilities: overrides first, remaining mass `∝ sqrt(N_g)`.
///
/// Groups with `N_g = 0` get zero mass even when overridden; the result is
/// renormalised so it sums to one.
pub fn domain_weights(sizes: &[usize], overrides: &[Option<f64>]) -> Result<Vec<f64>> {
    if overrides.len() != sizes.len() {
        return Err(Error::domain("one override slot per group required"));
    }
    let fixed: f64 = overrides.iter().flatten().sum();
    if fixed > 1.0 + 1e-12 {
        return Err(Error::config(
            "curriculum.overrides",
            format!("overrides sum to {fixed} > 1"),
        ));
    }
    let remainder = (1.0 - fixed).max(0.0);
    let root_total: f64 = sizes
        .iter()
        .zip(overrides)
        .filter(|(_, o)| o.is_none())
        .map(|(&n, _)| (n as f64).sqrt())
        .sum();
    let mut alpha: Vec<f64> = sizes
        .iter()
        .zip(overrides)
        .map(|(&n, o)| match o {
            _ if n == 0 => 0.0,
            Some(v) => *v,
            None if root_total > 0.0 => remainder * (n as f64).sqrt() / root_total,
            None => 0.0,
        })
        .collect();
    let total: f64 = alpha.iter().sum();
    if total <= 0.0 {
        return Err(Error::PoolExhausted("no group has selectable prompts".into()));
    }
    if (total - 1.0).abs() > 1e-15 {
        alpha.iter_mut().for_each(|a| *a /= total);
    }
    Ok(alpha)
}

#[derive(Debug, Clone)]
struct Group {
    domain_id: u32,
    task_ids: Vec<u32>,
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

/// Sampling distribution for one curriculum step.
#[derive(Debug, Clone)]
pub struct PromptSampler {
    groups: Vec<Group>,
    alpha: Vec<f64>,
    group_index: WeightedIndex<f64>,
}

fn normalised_weights(ps: &[f64], mu: f64, sigma: f64) -> Vec<f64> {
    // log-space normalisation keeps far-off-target groups from underflowing
    let logs: Vec<f64> = ps
        .iter()
        .map(|&p| {
            let z = (p - mu) / sigma;
            -0.5 * z * z
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

impl PromptSampler {
    pub fn new(
        profiles: &[PromptProfile],
        t: usize,
        horizon: usize,
        config: &CurriculumConfig,
    ) -> Result<Self> {
        let mu = curriculum_mean(t.min(horizon), horizon, config)?;
        let valid: Vec<&PromptProfile> = profiles.iter().filter(|p| p.valid).collect();
        if valid.is_empty() {
            return Err(Error::PoolExhausted(format!(
                "all {} prompts are solved",
                profiles.len()
            )));
        }
        let mut by_domain: BTreeMap<u32, Vec<&PromptProfile>> = BTreeMap::new();
        match config.mode {
            SamplingMode::TwoLevel => {
                for p in &valid {
                    by_domain.entry(p.domain_id).or_default().push(p);
                }
            }
            SamplingMode::Flat => {
                by_domain.insert(0, valid.clone());
            }
        }
        let overrides = config.override_map()?;
        let domains: Vec<u32> = by_domain.keys().copied().collect();
        let sizes: Vec<usize> = by_domain.values().map(Vec::len).collect();
        let slots: Vec<Option<f64>> = match config.mode {
            SamplingMode::TwoLevel => domains.iter().map(|d| overrides.get(d).copied()).collect(),
            SamplingMode::Flat => vec![None],
        };
        let alpha = domain_weights(&sizes, &slots)?;

        let groups = by_domain
            .into_iter()
            .map(|(domain_id, members)| {
                let ps: Vec<f64> = members.iter().map(|p| p.pass_rate).collect();
                let probs = normalised_weights(&ps, mu, config.sigma);
                let index = WeightedIndex::new(&probs)
                    .map_err(|e| Error::domain(format!("domain {domain_id}: {e}")))?;
                Ok(Group {
                    domain_id,
                    task_ids: members.iter().map(|p| p.task_id).collect(),
                    probs,
                    index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let group_index =
            WeightedIndex::new(&alpha).map_err(|e| Error::domain(format!("domain weights: {e}")))?;
        Ok(Self {
            groups,
            alpha,
            group_index,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let g = &self.groups[self.group_index.sample(rng)];
        g.task_ids[g.index.sample(rng)]
    }

    /// `(domain id, alpha)` per selectable group.
    pub fn group_probabilities(&self) -> Vec<(u32, f64)> {
        self.groups.iter().map(|g| g.domain_id).zip(self.alpha.iter().copied()).collect()
    }

    /// `(task id, probability within its group)` for one group.
    pub fn within_group(&self, domain_id: u32) -> Option<Vec<(u32, f64)>> {
        self.groups
            .iter()
            .find(|g| g.domain_id == domain_id)
            .map(|g| g.task_ids.iter().copied().zip(g.probs.iter().copied()).collect())
    }
}

/// One two-level draw at step `t`.
pub fn sample_prompt<R: Rng + ?Sized>(
    profiles: &[PromptProfile],
    t: usize,
    horizon: usize,
    config: &CurriculumConfig,
    rng: &mut R,
) -> Result<u32> {
    Ok(PromptSampler::new(profiles, t, horizon, config)?.sample(rng))
}

/// Writes `task_id,domain,p,valid`.
pub fn write_profiles(profiles: &[PromptProfile], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["task_id", "domain", "p", "valid"]).map_err(io)?;
    for p in profiles {
        w.write_record([
            p.task_id.to_string(),
            p.domain_id.to_string(),
            format!("{:?}", p.pass_rate),
            p.valid.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_profiles(path: &Path) -> Result<Vec<PromptProfile>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let headers = r
        .headers()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["task_id", "domain", "p", "valid"] {
        return Err(Error::Parse {
            what: "profile CSV",
            line: 1,
            message: format!("unexpected header {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let line = n + 2;
        let err = |message: String| Error::Parse { what: "profile CSV", line, message };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| err(format!("missing column {i}")));
        out.push(PromptProfile {
            task_id: field(0)?.parse().map_err(|e| err(format!("{e}")))?,
            domain_id: field(1)?.parse().map_err(|e| err(format!("{e}")))?,
            pass_rate: field(2)?.parse().map_err(|e| err(format!("{e}")))?,
            valid: field(3)?.parse().map_err(|e| err(format!("{e}")))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{landmark_task, register_tasks, Completion};
    use crate::policy::EOS;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(task_id: u32, domain_id: u32, p: f64) -> PromptProfile {
        PromptProfile { task_id, domain_id, pass_rate: p, valid: p < 1.0 }
    }

    #[test]
    fn schedule_examples() {
        let c = CurriculumConfig::default();
        assert_eq!(curriculum_mean(0, 100, &c).unwrap(), 0.8);
        assert_eq!(curriculum_mean(100, 100, &c).unwrap(), 0.2);
        assert_relative_eq!(curriculum_mean(50, 100, &c).unwrap(), 0.5, max_relative = 1e-15);
        assert!(curriculum_mean(101, 100, &c).is_err());
        let mut prev = f64::INFINITY;
        for t in 0..=37 {
            let m = curriculum_mean(t, 37, &c).unwrap();
            assert!(m <= prev);
            prev = m;
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(prompt_weight(0.4, 0.4, 0.15), 1.0);
        assert_relative_eq!(prompt_weight(0.65, 0.8, 0.15), (-0.5f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(prompt_weight(0.2, 0.8, 0.15), (-8.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn domain_weight_examples() {
        let a = domain_weights(&[100, 25], &[None, None]).unwrap();
        assert_eq!(a, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(domain_weights(&[9, 9], &[None, None]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(domain_weights(&[100, 25], &[Some(0.5), None]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            domain_weights(&[1, 1], &[Some(0.7), Some(0.6)]),
            Err(Error::Config { .. })
        ));
        // an empty group is excluded and the rest renormalised
        assert_eq!(domain_weights(&[0, 4], &[Some(0.5), None]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn single_prompt_always_drawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = CurriculumConfig::default();
        for _ in 0..100 {
            assert_eq!(sample_prompt(&[profile(4, 0, 0.3)], 0, 10, &c, &mut rng).unwrap(), 4);
        }
    }

    #[test]
    fn solved_prompts_never_sampled() {
        let profiles = [profile(0, 0, 1.0), profile(1, 0, 0.9), profile(2, 1, 1.0), profile(3, 1, 0.1)];
        let s = PromptSampler::new(&profiles, 0, 10, &CurriculumConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let id = s.sample(&mut rng);
            assert!(id == 1 || id == 3);
        }
        let solved = [profile(0, 0, 1.0)];
        assert!(matches!(
            PromptSampler::new(&solved, 0, 10, &CurriculumConfig::default()),
            Err(Error::PoolExhausted(_))
        ));
    }

    #[test]
    fn equal_groups_split_evenly() {
        let profiles: Vec<_> = (0..8).map(|i| profile(i, i % 2, 0.5)).collect();
        let s = PromptSampler::new(&profiles, 0, 10, &CurriculumConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let even = (0..n).filter(|_| s.sample(&mut rng).is_multiple_of(2)).count();
        assert!((even as f64 / n as f64 - 0.5).abs() <= 0.01);
    }

    #[test]
    fn flat_mode_ignores_domains() {
        let c = CurriculumConfig { mode: SamplingMode::Flat, ..Default::default() };
        let profiles = [profile(0, 0, 0.8), profile(1, 1, 0.8), profile(2, 1, 0.8)];
        let s = PromptSampler::new(&profiles, 0, 10, &c).unwrap();
        let w = s.within_group(0).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|(_, p)| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn profiling_counts() {
        let task = landmark_task();
        let mut p = SoftmaxPolicy::new(2);
        register_tasks(&mut p, std::slice::from_ref(&task)).unwrap();
        for (t, tok) in [1usize, 3, EOS].iter().enumerate() {
            let key = p.context_for(0, &[1, 3][..t]);
            p.logits_mut(&key).unwrap()[*tok] = 50.0;
        }
        let prof = profile_pass_rates(&p, std::slice::from_ref(&task), 10, 1).unwrap();
        assert_eq!(prof[0].pass_rate, 1.0);
        assert!(!prof[0].valid);

        let impossible = TaskSpec::new(1, 0, "x", 3, 1, vec![Completion { tokens: vec![2], reward: 1.0 }]).unwrap();
        let mut q = SoftmaxPolicy::new(2);
        register_tasks(&mut q, std::slice::from_ref(&impossible)).unwrap();
        q.logits_mut(&q.context_for(1, &[])).unwrap()[2] = -100.0;
        let prof = profile_pass_rates(&q, &[impossible], 10, 1).unwrap();
        assert_eq!(prof[0].pass_rate, 0.0);
        assert!(prof[0].valid);
    }

    #[test]
    fn profile_csv_round_trip() {
        let profiles = vec![profile(0, 0, 0.4), profile(7, 2, 1.0)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.csv");
        write_profiles(&profiles, &path).unwrap();
        assert_eq!(read_profiles(&path).unwrap(), profiles);
    }

    #[test]
    fn config_validation() {
        assert!(CurriculumConfig::default().validate().is_ok());
        let bad = CurriculumConfig { sigma: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let mut o = CurriculumConfig::default();
        o.overrides.insert("x".into(), 0.3);
        assert!(o.validate().is_err());
    }
}
