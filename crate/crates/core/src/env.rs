//! Synthetic verifiable-reward tasks and the rollout engine.
//!
//! A task accepts a small set of token sequences. The emitted answer is the
//! token sequence up to (excluding) the first EOS, or the whole sequence when
//! generation stopped at `max_length`. Rewards are pure functions of that
//! answer, so every trajectory can be re-verified.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::derive_seed;
use crate::policy::{ContextKey, SoftmaxPolicy, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<usize>,
    #[serde(default = "one")]
    pub reward: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Difficulty {
    /// Length of the shortest accepted answer.
    pub answer_length: usize,
    pub accepted: usize,
    /// Probability that a uniform policy emits some accepted answer.
    pub uniform_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub domain_id: u32,
    pub prompt: String,
    pub vocab_size: usize,
    pub max_length: usize,
    pub accepted: Vec<Completion>,
    /// Optional display names, indexed by token.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_names: Vec<String>,
    #[serde(skip)]
    pub difficulty: Option<Difficulty>,
}

impl TaskSpec {
    pub fn new(
        task_id: u32,
        domain_id: u32,
        prompt: impl Into<String>,
        vocab_size: usize,
        max_length: usize,
        accepted: Vec<Completion>,
    ) -> Result<Self> {
        let mut task = TaskSpec {
            task_id,
            domain_id,
            prompt: prompt.into(),
            vocab_size,
            max_length,
            accepted,
            token_names: Vec::new(),
            difficulty: None,
        };
        task.validate()?;
        task.difficulty = Some(task.compute_difficulty());
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.task_id;
        if self.vocab_size < 2 {
            return Err(Error::domain(format!("task {id}: vocab must include EOS and one token")));
        }
        if self.max_length == 0 {
            return Err(Error::domain(format!("task {id}: max_length must be >= 1")));
        }
        if self.accepted.is_empty() {
            return Err(Error::domain(format!("task {id}: no accepted completions")));
        }
        for (k, c) in self.accepted.iter().enumerate() {
            if c.tokens.is_empty() || c.tokens.len() > self.max_length {
                return Err(Error::domain(format!(
                    "task {id}: completion {k} has length {} outside 1..={}",
                    c.tokens.len(),
                    self.max_length
                )));
            }
            if let Some(t) = c.tokens.iter().find(|&&t| t == EOS || t >= self.vocab_size) {
                return Err(Error::domain(format!("task {id}: completion {k} has invalid token {t}")));
            }
            if !c.reward.is_finite() {
                return Err(Error::domain(format!("task {id}: completion {k} reward not finite")));
            }
            if self.accepted[..k].iter().any(|o| o.tokens == c.tokens) {
                return Err(Error::domain(format!("task {id}: completion {k} listed twice")));
            }
        }
        if !self.token_names.is_empty() && self.token_names.len() != self.vocab_size {
            return Err(Error::domain(format!("task {id}: token_names must cover the vocabulary")));
        }
        Ok(())
    }

    fn compute_difficulty(&self) -> Difficulty {
        let v = self.vocab_size as f64;
        let uniform_pass_rate = self
            .accepted
            .iter()
            .map(|c| {
                let needs_eos = c.tokens.len() < self.max_length;
                v.powi(-((c.tokens.len() + needs_eos as usize) as i32))
            })
            .sum();
        Difficulty {
            answer_length: self.accepted.iter().map(|c| c.tokens.len()).min().unwrap_or(0),
            accepted: self.accepted.len(),
            uniform_pass_rate,
        }
    }

    pub fn difficulty(&self) -> Difficulty {
        self.difficulty.clone().unwrap_or_else(|| self.compute_difficulty())
    }

    /// Reward of an emitted token sequence.
    pub fn reward_of(&self, tokens: &[usize]) -> f64 {
        let answer = answer_of(tokens);
        self.accepted
            .iter()
            .find(|c| c.tokens == answer)
            .map_or(0.0, |c| c.reward)
    }
}

/// Tokens before the first EOS.
pub fn answer_of(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    &tokens[..end]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: u32,
    pub tokens: Vec<usize>,
    /// Behaviour-policy log-probability of each emitted token.
    pub logp_old: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Policy context before each emitted token.
    pub fn contexts(&self, policy: &SoftmaxPolicy) -> Vec<ContextKey> {
        (0..self.tokens.len())
            .map(|t| policy.context_for(self.task_id, &self.tokens[..t]))
            .collect()
    }
}

/// Samples one response autoregressively until EOS or `max_length`.
pub fn rollout<R: Rng + ?Sized>(
    policy: &SoftmaxPolicy,
    task: &TaskSpec,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut tokens = Vec::with_capacity(task.max_length);
    let mut logp_old = Vec::with_capacity(task.max_length);
    while tokens.len() < task.max_length {
        let key = policy.context_for(task.task_id, &tokens);
        let action = policy.sample_action(&key, rng)?;
        logp_old.push(policy.log_prob(&key, action)?);
        tokens.push(action);
        if action == EOS {
            break;
        }
    }
    let reward = task.reward_of(&tokens);
    Ok(Trajectory {
        task_id: task.task_id,
        tokens,
        logp_old,
        reward,
    })
}

/// Rollout with its own generator stream derived from `(seed, parts...)`.
pub fn seeded_rollout(
    policy: &SoftmaxPolicy,
    task: &TaskSpec,
    seed: u64,
    parts: &[u64],
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, parts));
    rollout(policy, task, &mut rng)
}

/// Greedy decode; used for validation.
pub fn greedy_rollout(policy: &SoftmaxPolicy, task: &TaskSpec) -> Result<Trajectory> {
    let mut tokens = Vec::new();
    let mut logp_old = Vec::new();
    while tokens.len() < task.max_length {
        let key = policy.context_for(task.task_id, &tokens);
        let action = policy.greedy_action(&key)?;
        logp_old.push(policy.log_prob(&key, action)?);
        tokens.push(action);
        if action == EOS {
            break;
        }
    }
    let reward = task.reward_of(&tokens);
    Ok(Trajectory {
        task_id: task.task_id,
        tokens,
        logp_old,
        reward,
    })
}

pub fn verify_reward(trajectory: &Trajectory, task: &TaskSpec) -> Result<f64> {
    if trajectory.task_id != task.task_id {
        return Err(Error::domain(format!(
            "trajectory belongs to task {}, not {}",
            trajectory.task_id, task.task_id
        )));
    }
    Ok(task.reward_of(&trajectory.tokens))
}

/// Registers every context of every task with the policy.
pub fn register_tasks(policy: &mut SoftmaxPolicy, tasks: &[TaskSpec]) -> Result<()> {
    for t in tasks {
        policy.ensure_task(t.task_id, t.vocab_size, t.max_length)?;
    }
    Ok(())
}

/// Token ids of the landmark fixture.
pub mod landmark {
    pub const PARIS: usize = 1;
    pub const ROME: usize = 2;
    pub const EIFFEL: usize = 3;
    pub const COLOSSEUM: usize = 4;
}

/// "Name a famous landmark": two accepted (city, landmark) answers.
pub fn landmark_task() -> TaskSpec {
    use landmark::*;
    let mut task = TaskSpec::new(
        0,
        0,
        "Name a famous landmark",
        5,
        3,
        vec![
            Completion { tokens: vec![PARIS, EIFFEL], reward: 1.0 },
            Completion { tokens: vec![ROME, COLOSSEUM], reward: 1.0 },
        ],
    )
    .expect("landmark fixture is valid");
    task.token_names = ["<eos>", "Paris", "Rome", "Eiffel Tower", "Colosseum"]
        .into_iter()
        .map(String::from)
        .collect();
    task
}

/// Per-domain generator parameters, cycling through three profiles.
#[derive(Debug, Clone, Copy)]
struct DomainProfile {
    vocab: usize,
    answer_len: (usize, usize),
    accepted: (usize, usize),
    slack: (usize, usize),
}

const PROFILES: [DomainProfile; 3] = [
    // short answers, several accepted: dense reward
    DomainProfile { vocab: 3, answer_len: (1, 1), accepted: (1, 2), slack: (1, 2) },
    DomainProfile { vocab: 3, answer_len: (1, 2), accepted: (1, 2), slack: (1, 2) },
    // longer answers over a wider vocabulary: sparse reward
    DomainProfile { vocab: 4, answer_len: (2, 2), accepted: (1, 2), slack: (1, 2) },
];

/// Deterministic multi-domain task blend with heterogeneous difficulty.
pub fn make_domain_blend(seed: u64, domains: usize, tasks_per_domain: usize) -> Result<Vec<TaskSpec>> {
    if domains == 0 || tasks_per_domain == 0 {
        return Err(Error::domain("domain and task counts must be >= 1"));
    }
    let mut tasks = Vec::with_capacity(domains * tasks_per_domain);
    for d in 0..domains {
        let profile = PROFILES[d % PROFILES.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[d as u64]));
        for k in 0..tasks_per_domain {
            let id = (d * tasks_per_domain + k) as u32;
            let n_acc = rng.random_range(profile.accepted.0..=profile.accepted.1);
            let mut accepted: Vec<Completion> = Vec::with_capacity(n_acc);
            let mut longest = 0;
            while accepted.len() < n_acc {
                let len = rng.random_range(profile.answer_len.0..=profile.answer_len.1);
                let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..profile.vocab)).collect();
                if accepted.iter().any(|c| c.tokens == tokens) {
                    continue;
                }
                longest = longest.max(len);
                accepted.push(Completion { tokens, reward: 1.0 });
            }
            let max_length = (longest + rng.random_range(profile.slack.0..=profile.slack.1)).clamp(2, 16);
            tasks.push(TaskSpec::new(
                id,
                d as u32,
                format!("domain {d} task {k}"),
                profile.vocab,
                max_length,
                accepted,
            )?);
        }
    }
    Ok(tasks)
}

#[derive(Debug, Serialize, Deserialize)]
struct SuiteFile {
    #[serde(rename = "task")]
    tasks: Vec<TaskSpec>,
}

/// Loads a task suite from TOML (`[[task]]` tables).
pub fn load_suite(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_suite(&text)
}

pub fn parse_suite(text: &str) -> Result<Vec<TaskSpec>> {
    let suite: SuiteFile = toml::from_str(text).map_err(|e| Error::Parse {
        what: "task suite",
        line: 0,
        message: e.to_string(),
    })?;
    let mut tasks = suite.tasks;
    for t in tasks.iter_mut() {
        t.validate()?;
        t.difficulty = Some(t.compute_difficulty());
    }
    let mut ids: Vec<u32> = tasks.iter().map(|t| t.task_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::domain("task suite has duplicate task ids"));
    }
    Ok(tasks)
}

pub fn write_suite(tasks: &[TaskSpec], path: &Path) -> Result<()> {
    let text = toml::to_string(&SuiteFile { tasks: tasks.to_vec() })
        .map_err(|e| Error::domain(format!("cannot serialise suite: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use landmark::*;

    fn degenerate_policy(task: &TaskSpec, answer: &[usize]) -> SoftmaxPolicy {
        let mut p = SoftmaxPolicy::new(2);
        p.ensure_task(task.task_id, task.vocab_size, task.max_length).unwrap();
        let mut seq = answer.to_vec();
        if seq.len() < task.max_length {
            seq.push(EOS);
        }
        for t in 0..seq.len() {
            let key = p.context_for(task.task_id, &seq[..t]);
            p.logits_mut(&key).unwrap()[seq[t]] = 40.0;
        }
        p
    }

    #[test]
    fn degenerate_policy_earns_reward() {
        let task = landmark_task();
        let p = degenerate_policy(&task, &[PARIS, EIFFEL]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = rollout(&p, &task, &mut rng).unwrap();
        assert_eq!(traj.tokens, vec![PARIS, EIFFEL, EOS]);
        assert_eq!(traj.reward, 1.0);
    }

    #[test]
    fn max_length_one_gives_single_token() {
        let task = TaskSpec::new(5, 0, "one", 3, 1, vec![Completion { tokens: vec![2], reward: 1.0 }]).unwrap();
        let mut p = SoftmaxPolicy::new(2);
        register_tasks(&mut p, std::slice::from_ref(&task)).unwrap();
        for s in 0..20 {
            assert_eq!(seeded_rollout(&p, &task, s, &[0]).unwrap().len(), 1);
        }
    }

    #[test]
    fn rollouts_are_deterministic_and_logps_match() {
        let task = landmark_task();
        let mut p = SoftmaxPolicy::new(2);
        register_tasks(&mut p, std::slice::from_ref(&task)).unwrap();
        p.randomize(1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = seeded_rollout(&p, &task, 42, &[1, 2]).unwrap();
        let b = seeded_rollout(&p, &task, 42, &[1, 2]).unwrap();
        assert_eq!(a, b);
        for (k, (key, &tok)) in a.contexts(&p).iter().zip(&a.tokens).enumerate() {
            assert_eq!(p.log_prob(key, tok).unwrap(), a.logp_old[k]);
        }
        assert_eq!(verify_reward(&a, &task).unwrap(), verify_reward(&a, &task).unwrap());
    }

    #[test]
    fn verify_examples() {
        let task = landmark_task();
        let traj = |tokens: Vec<usize>| Trajectory { task_id: 0, logp_old: vec![0.0; tokens.len()], tokens, reward: 0.0 };
        assert_eq!(verify_reward(&traj(vec![PARIS, EIFFEL, EOS]), &task).unwrap(), 1.0);
        assert_eq!(verify_reward(&traj(vec![ROME, COLOSSEUM, EOS]), &task).unwrap(), 1.0);
        assert_eq!(verify_reward(&traj(vec![PARIS, COLOSSEUM, EOS]), &task).unwrap(), 0.0);
        assert_eq!(verify_reward(&traj(vec![EOS]), &task).unwrap(), 0.0);
        let other = Trajectory { task_id: 7, ..traj(vec![EOS]) };
        assert!(verify_reward(&other, &task).is_err());

        let two = TaskSpec::new(
            1,
            0,
            "two",
            6,
            6,
            vec![
                Completion { tokens: vec![1, 2], reward: 0.5 },
                Completion { tokens: vec![1, 2, 3, 4, 5], reward: 1.0 },
            ],
        )
        .unwrap();
        assert_eq!(two.reward_of(&[1, 2, EOS]), 0.5);
        assert_eq!(two.reward_of(&[1, 2, 3, 4, 5, EOS]), 1.0);
    }

    #[test]
    fn landmark_fixture() {
        let task = landmark_task();
        assert_eq!(task.accepted.len(), 2);
        assert!(task.accepted.iter().all(|c| c.reward == 1.0));
    }

    #[test]
    fn blend_is_deterministic_and_heterogeneous() {
        let a = make_domain_blend(7, 3, 10).unwrap();
        let b = make_domain_blend(7, 3, 10).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a, b);
        let mut domains: Vec<u32> = a.iter().map(|t| t.domain_id).collect();
        domains.dedup();
        assert_eq!(domains, vec![0, 1, 2]);
        let mean_rate = |d: u32| {
            let ts: Vec<_> = a.iter().filter(|t| t.domain_id == d).collect();
            ts.iter().map(|t| t.difficulty().uniform_pass_rate).sum::<f64>() / ts.len() as f64
        };
        assert!(mean_rate(0) > mean_rate(1));
        assert!(mean_rate(1) > mean_rate(2));
        assert!(a.iter().all(|t| (2..=16).contains(&t.max_length)));
    }

    #[test]
    fn invalid_tasks_rejected() {
        let c = |tokens: Vec<usize>| vec![Completion { tokens, reward: 1.0 }];
        assert!(TaskSpec::new(0, 0, "", 3, 2, c(vec![1, 2, 1])).is_err());
        assert!(TaskSpec::new(0, 0, "", 3, 4, c(vec![0, 1])).is_err());
        assert!(TaskSpec::new(0, 0, "", 3, 4, c(vec![3])).is_err());
        assert!(TaskSpec::new(0, 0, "", 3, 4, vec![]).is_err());
    }

    #[test]
    fn suite_round_trip() {
        let tasks = make_domain_blend(1, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.toml");
        write_suite(&tasks, &path).unwrap();
        assert_eq!(load_suite(&path).unwrap(), tasks);
        let text = "[[task]]\ntask_id = 0\ndomain_id = 0\nprompt = \"x\"\nvocab_size = 3\nmax_length = 2\n\
                    [[task.accepted]]\ntokens = [1]\n";
        let parsed = parse_suite(text).unwrap();
        assert_eq!(parsed[0].accepted[0].reward, 1.0);
        let dup = format!("{text}{text}");
        assert!(parse_suite(&dup).is_err());
    }
}
