//! The training loop and its configuration.
//!
//! A run configuration is TOML with `[method]`, `[gating]`, `[curriculum]`
//! and `[env]` sections. Every key can be overridden with a
//! `section.key=value` string before deserialization.
//!
//! Each step evaluates the configured objective on the current batch,
//! records diagnostics and applies one plain gradient-ascent update. A new
//! batch is sampled every `epochs` steps, so the sampling policy (`θ_old`)
//! is refreshed at that cadence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{
    curriculum_mean, profile_pass_rates, write_profiles, CurriculumConfig, PromptProfile,
    PromptSampler, PASS_THRESHOLD,
};
use crate::env::{
    greedy_rollout, landmark_task, load_suite, make_domain_blend, register_tasks, seeded_rollout,
    TaskSpec, Trajectory,
};
use crate::error::{Error, Result};
use crate::gating::{gate_trajectory, GatingConfig, Sign};
use crate::numeric::derive_seed;
use crate::objectives::{
    backprop_to_logits, batch_advantages, evaluate, group_advantages, Method, ObjectiveParams,
    TrajectoryBatch, STD_FLOOR,
};
use crate::policy::{SoftmaxPolicy, DEFAULT_WINDOW};
use crate::telemetry::{self, DiagnosticsRecord, StepData};

const INIT_STREAM: u64 = 0x1417;
const PROFILE_STREAM: u64 = 0x9F0F;
const PROMPT_STREAM: u64 = 0x9A0B;
const ROLLOUT_STREAM: u64 = 0x2011;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub name: Method,
    pub learning_rate: f64,
    pub steps: usize,
    /// Rollouts per prompt, `G`.
    pub rollouts_per_prompt: usize,
    pub prompts_per_step: usize,
    /// Optimizer steps taken on each sampled batch.
    pub epochs: usize,
    /// Ratio clip of the PPO/GRPO/GSPO baselines.
    pub clip_eps: f64,
    pub seed: u64,
    pub validation_every: usize,
    /// Standard deviation of the initial logits; 0 gives a uniform policy.
    pub init_logit_scale: f64,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            name: Method::FiberPo,
            learning_rate: 0.05,
            steps: 200,
            rollouts_per_prompt: 8,
            prompts_per_step: 4,
            epochs: 1,
            clip_eps: 0.2,
            seed: 0,
            validation_every: 10,
            init_logit_scale: 0.0,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingSection {
    pub epsilon: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    /// Optional total budget, checked against `c_plus + c_minus`.
    pub delta: Option<f64>,
    /// Require `c_minus < c_plus`.
    pub ordered: bool,
    pub tie_break: Sign,
}

impl Default for GatingSection {
    fn default() -> Self {
        let g = GatingConfig::default();
        Self {
            epsilon: g.epsilon,
            c_plus: g.c_plus,
            c_minus: g.c_minus,
            delta: None,
            ordered: true,
            tie_break: g.tie_break_sign,
        }
    }
}

impl GatingSection {
    pub fn to_config(&self) -> Result<GatingConfig> {
        let mut cfg = match self.delta {
            Some(d) => GatingConfig::with_delta(self.epsilon, d, self.c_plus, self.c_minus, self.ordered)?,
            None if self.ordered => GatingConfig::new(self.epsilon, self.c_plus, self.c_minus)?,
            None => GatingConfig::unordered(self.epsilon, self.c_plus, self.c_minus)?,
        };
        cfg.tie_break_sign = self.tie_break;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Landmark,
    Blend,
    Suite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub domains: usize,
    pub tasks_per_domain: usize,
    /// Seed of the task generator, independent of the run seed.
    pub seed: u64,
    pub suite: Option<PathBuf>,
    /// Context window of the policy.
    pub window: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            kind: EnvKind::Landmark,
            domains: 3,
            tasks_per_domain: 4,
            seed: 0,
            suite: None,
            window: DEFAULT_WINDOW,
        }
    }
}

impl EnvSection {
    pub fn build_tasks(&self) -> Result<Vec<TaskSpec>> {
        match self.kind {
            EnvKind::Landmark => Ok(vec![landmark_task()]),
            EnvKind::Blend => make_domain_blend(self.seed, self.domains, self.tasks_per_domain)
                .map_err(|e| Error::config("env.domains", e.to_string())),
            EnvKind::Suite => {
                let path = self
                    .suite
                    .as_ref()
                    .ok_or_else(|| Error::config("env.suite", "kind = \"suite\" needs a suite path"))?;
                load_suite(path)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodSection,
    pub gating: GatingSection,
    pub curriculum: CurriculumConfig,
    pub env: EnvSection,
}

/// Sets `section.key[.sub]=value` in a TOML table. Values are parsed as TOML
/// and fall back to bare strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like section.key=value"))?;
    let path = path.trim().trim_start_matches("--");
    let keys: Vec<&str> = path.split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "override key must be section.key"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("at least two keys");
    let mut node = table;
    for k in parents {
        node = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{k}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| Error::config("config", e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&merged).map_err(|e| Error::config(offending_key(&e, &merged), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.method;
        if !(m.learning_rate.is_finite() && m.learning_rate >= 0.0) {
            return Err(Error::config("method.learning_rate", format!("must be finite and >= 0, got {}", m.learning_rate)));
        }
        if m.rollouts_per_prompt < 2 {
            return Err(Error::config("method.rollouts_per_prompt", "group advantages need at least 2 rollouts"));
        }
        if m.prompts_per_step == 0 {
            return Err(Error::config("method.prompts_per_step", "must be >= 1"));
        }
        if m.epochs == 0 {
            return Err(Error::config("method.epochs", "must be >= 1"));
        }
        if !(m.clip_eps > 0.0 && m.clip_eps.is_finite()) {
            return Err(Error::config("method.clip_eps", "must be positive"));
        }
        if m.validation_every == 0 {
            return Err(Error::config("method.validation_every", "must be >= 1"));
        }
        if !(m.init_logit_scale >= 0.0 && m.init_logit_scale.is_finite()) {
            return Err(Error::config("method.init_logit_scale", "must be finite and >= 0"));
        }
        if self.env.window == 0 {
            return Err(Error::config("env.window", "must be >= 1"));
        }
        self.gating.to_config()?;
        self.curriculum.validate()
    }

    pub fn objective_params(&self) -> Result<ObjectiveParams> {
        Ok(ObjectiveParams {
            gating: self.gating.to_config()?,
            clip_eps: self.method.clip_eps,
        })
    }
}

fn offending_key(err: &toml::de::Error, text: &str) -> String {
    if let Some(field) = err.message().split('`').nth(1) {
        if err.message().starts_with("unknown field") || err.message().starts_with("unknown variant") {
            return field.to_string();
        }
    }
    err.span()
        .and_then(|span| text[..span.start].lines().last().map(str::to_string).filter(|l| !l.trim().is_empty()).or_else(|| text[span].lines().next().map(str::to_string)))
        .and_then(|line| line.split('=').next().map(|k| k.trim().to_string()))
        .unwrap_or_else(|| "config".to_string())
}

/// Runs `f` on a pool of `workers` threads, or the global pool when 0.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("method.workers", e.to_string()))?;
    Ok(pool.install(f))
}

/// Rollouts of the current batch together with its objective inputs.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub rollouts: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub records: TrajectoryBatch,
}

pub struct Trainer {
    config: RunConfig,
    params: ObjectiveParams,
    tasks: Vec<TaskSpec>,
    task_index: BTreeMap<u32, usize>,
    policy: SoftmaxPolicy,
    profiles: Vec<PromptProfile>,
    horizon: usize,
    step: usize,
    batch: Option<SampledBatch>,
    val_accuracy: f64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let tasks = config.env.build_tasks()?;
        Self::with_tasks(config, tasks)
    }

    /// Trainer over an explicit task list; `config.env` is ignored.
    pub fn with_tasks(config: RunConfig, tasks: Vec<TaskSpec>) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::config("env", "no tasks"));
        }
        let mut task_index = BTreeMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if task_index.insert(t.task_id, i).is_some() {
                return Err(Error::config("env", format!("duplicate task id {}", t.task_id)));
            }
        }
        let mut policy = SoftmaxPolicy::new(config.env.window);
        register_tasks(&mut policy, &tasks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.method.seed, &[INIT_STREAM]));
        policy.randomize(config.method.init_logit_scale, &mut rng)?;
        let mut trainer = Self {
            params: config.objective_params()?,
            horizon: config.curriculum.horizon(config.method.steps),
            config,
            tasks,
            task_index,
            policy,
            profiles: Vec::new(),
            step: 0,
            batch: None,
            val_accuracy: 0.0,
        };
        if trainer.config.curriculum.enabled {
            trainer.reprofile()?;
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn policy(&self) -> &SoftmaxPolicy {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut SoftmaxPolicy {
        &mut self.policy
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn profiles(&self) -> &[PromptProfile] {
        &self.profiles
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Batch the next step will optimize, if one is live.
    pub fn current_batch(&self) -> Option<&SampledBatch> {
        self.batch.as_ref()
    }

    fn reprofile(&mut self) -> Result<()> {
        let seed = derive_seed(self.config.method.seed, &[PROFILE_STREAM, self.step as u64]);
        self.profiles = profile_pass_rates(
            &self.policy,
            &self.tasks,
            self.config.curriculum.profiling_rollouts,
            seed,
        )?;
        Ok(())
    }

    fn curriculum_mu(&self) -> Result<f64> {
        if !self.config.curriculum.enabled {
            return Ok(0.0);
        }
        curriculum_mean(self.step.min(self.horizon), self.horizon, &self.config.curriculum)
    }

    fn sample_prompts(&self) -> Result<Vec<u32>> {
        let m = &self.config.method;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(m.seed, &[PROMPT_STREAM, self.step as u64]));
        if self.config.curriculum.enabled {
            let sampler = PromptSampler::new(&self.profiles, self.step, self.horizon, &self.config.curriculum)?;
            Ok((0..m.prompts_per_step).map(|_| sampler.sample(&mut rng)).collect())
        } else {
            Ok((0..m.prompts_per_step)
                .map(|_| self.tasks[rng.random_range(0..self.tasks.len())].task_id)
                .collect())
        }
    }

    /// Samples `prompts_per_step × G` rollouts from the current policy.
    pub fn sample_batch(&self) -> Result<SampledBatch> {
        let m = &self.config.method;
        let prompts = self.sample_prompts()?;
        let jobs: Vec<(usize, usize)> = (0..prompts.len())
            .flat_map(|slot| (0..m.rollouts_per_prompt).map(move |i| (slot, i)))
            .collect();
        let rollouts = jobs
            .par_iter()
            .map(|&(slot, i)| {
                let task = &self.tasks[self.task_index[&prompts[slot]]];
                seeded_rollout(
                    &self.policy,
                    task,
                    m.seed,
                    &[ROLLOUT_STREAM, self.step as u64, slot as u64, i as u64],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let rewards: Vec<f64> = rollouts.iter().map(|t| t.reward).collect();
        let group_ids: Vec<u32> = jobs.iter().map(|&(slot, _)| slot as u32).collect();
        let domain_ids = rollouts
            .iter()
            .map(|t| self.tasks[self.task_index[&t.task_id]].domain_id)
            .collect();
        let advantages = match m.name {
            Method::Ppo => batch_advantages(&rewards, STD_FLOOR)?,
            _ => group_advantages(&rewards, &group_ids, STD_FLOOR)?,
        };
        let records = TrajectoryBatch::from_rollouts(
            &rollouts,
            group_ids,
            domain_ids,
            &advantages,
            &self.policy,
            &self.params.gating,
        )?;
        Ok(SampledBatch {
            rollouts,
            rewards,
            records,
        })
    }

    /// Greedy-decoding accuracy over the task set.
    pub fn validation_accuracy(&self) -> Result<f64> {
        let passes = self
            .tasks
            .par_iter()
            .map(|t| greedy_rollout(&self.policy, t).map(|r| (r.reward >= PASS_THRESHOLD) as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(passes.iter().sum::<usize>() as f64 / self.tasks.len() as f64)
    }

    /// One optimizer step; diagnostics describe the policy before the update.
    pub fn step(&mut self) -> Result<DiagnosticsRecord> {
        let t = self.step;
        let cur = &self.config.curriculum;
        if cur.enabled && cur.reprofile_every > 0 && t > 0 && t.is_multiple_of(cur.reprofile_every) {
            self.reprofile()?;
        }
        if t.is_multiple_of(self.config.method.epochs) || self.batch.is_none() {
            self.batch = Some(self.sample_batch()?);
        }
        let batch = self.batch.as_ref().expect("batch sampled above");
        let method = self.config.method.name;
        let fresh = batch.records.refreshed(&self.policy, &self.params.gating)?;
        let eval = evaluate(&fresh, method, &self.params)?;
        if !eval.value.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                message: format!("{method} objective is {}", eval.value),
            });
        }
        let gradient = backprop_to_logits(&self.policy, &fresh, &eval.sensitivities)?;
        if let Some((i, g)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                message: format!("gradient entry {i} is {g} (objective {})", eval.value),
            });
        }
        let gates = match &eval.gates {
            Some(g) => g.clone(),
            None => (0..fresh.len())
                .map(|k| gate_trajectory(&fresh.log_ratios(k), &self.params.gating))
                .collect::<Result<Vec<_>>>()?,
        };
        if t.is_multiple_of(self.config.method.validation_every) {
            self.val_accuracy = self.validation_accuracy()?;
        }
        let record = telemetry::collect(&StepData {
            step: t,
            batch: &fresh,
            gates: &gates,
            method_clip_fraction: eval.clip_fraction(),
            gradient: &gradient,
            policy: &self.policy,
            rewards: &batch.rewards,
            val_accuracy: self.val_accuracy,
            curriculum_mu: self.curriculum_mu()?,
        })?;
        self.policy.apply_update(&gradient, self.config.method.learning_rate)?;
        if self.policy.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                message: "policy parameters became non-finite".into(),
            });
        }
        self.step += 1;
        Ok(record)
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub telemetry: PathBuf,
    pub checkpoint: PathBuf,
    pub profiles: Option<PathBuf>,
    pub abort_dump: PathBuf,
}

impl OutputPaths {
    /// `telemetry.csv`, `policy.ckpt`, `profiles.csv`, `abort.txt` in `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            telemetry: dir.join("telemetry.csv"),
            checkpoint: dir.join("policy.ckpt"),
            profiles: Some(dir.join("profiles.csv")),
            abort_dump: dir.join("abort.txt"),
        }
    }

    /// `<name>.csv`, `<name>.ckpt`, `<name>.abort.txt` in `dir`.
    pub fn named(dir: &Path, name: &str) -> Self {
        Self {
            telemetry: dir.join(format!("{name}.csv")),
            checkpoint: dir.join(format!("{name}.ckpt")),
            profiles: None,
            abort_dump: dir.join(format!("{name}.abort.txt")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<DiagnosticsRecord>,
    pub policy: SoftmaxPolicy,
    /// Trajectories sampled at step 0, if any step ran.
    pub initial_rollouts: Option<Vec<Trajectory>>,
}

/// Runs `method.steps` steps in memory.
pub fn train(config: &RunConfig) -> Result<RunReport> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut records = Vec::with_capacity(config.method.steps);
    let mut initial_rollouts = None;
    for _ in 0..config.method.steps {
        records.push(trainer.step()?);
        if initial_rollouts.is_none() {
            initial_rollouts = trainer.current_batch().map(|b| b.rollouts.clone());
        }
    }
    Ok(RunReport {
        records,
        policy: trainer.policy,
        initial_rollouts,
    })
}

/// Runs the experiment and writes telemetry and the final checkpoint.
///
/// On an abort the telemetry collected so far is still written, together
/// with a dump of the failing step.
pub fn run_experiment(config: &RunConfig, out: &OutputPaths) -> Result<RunReport> {
    with_workers(config.method.workers, || run_inner(config, out))?
}

fn run_inner(config: &RunConfig, out: &OutputPaths) -> Result<RunReport> {
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out.telemetry.parent() {
        std::fs::create_dir_all(dir).map_err(|io| Error::io(dir, io))?;
    }
    if let Some(p) = &out.profiles {
        if config.curriculum.enabled {
            write_profiles(trainer.profiles(), p)?;
        }
    }
    let mut records = Vec::with_capacity(config.method.steps);
    let mut initial_rollouts = None;
    for _ in 0..config.method.steps {
        match trainer.step() {
            Ok(r) => records.push(r),
            Err(e) => {
                telemetry::write_csv(&records, &out.telemetry)?;
                let dump = format!(
                    "error: {e}\nstep: {}\nlast record: {:?}\n",
                    trainer.step_index(),
                    records.last()
                );
                std::fs::write(&out.abort_dump, dump).map_err(|io| Error::io(&out.abort_dump, io))?;
                return Err(e);
            }
        }
        if initial_rollouts.is_none() {
            initial_rollouts = trainer.current_batch().map(|b| b.rollouts.clone());
        }
    }
    telemetry::write_csv(&records, &out.telemetry)?;
    trainer.policy().write_checkpoint(&out.checkpoint)?;
    Ok(RunReport {
        records,
        policy: trainer.policy,
        initial_rollouts,
    })
}

fn matched_key(a: &RunConfig, b: &RunConfig) -> Option<&'static str> {
    let (x, y) = (&a.method, &b.method);
    if a.env != b.env {
        return Some("env");
    }
    if a.curriculum != b.curriculum {
        return Some("curriculum");
    }
    if a.gating != b.gating {
        return Some("gating");
    }
    [
        ("method.seed", x.seed == y.seed),
        ("method.steps", x.steps == y.steps),
        ("method.rollouts_per_prompt", x.rollouts_per_prompt == y.rollouts_per_prompt),
        ("method.prompts_per_step", x.prompts_per_step == y.prompts_per_step),
        ("method.epochs", x.epochs == y.epochs),
        ("method.learning_rate", x.learning_rate == y.learning_rate),
        ("method.clip_eps", x.clip_eps == y.clip_eps),
        ("method.validation_every", x.validation_every == y.validation_every),
        ("method.init_logit_scale", x.init_logit_scale == y.init_logit_scale),
    ]
    .into_iter()
    .find(|(_, same)| !same)
    .map(|(k, _)| k)
}

/// Checks that the configs differ only in the method.
pub fn check_matched(configs: &[RunConfig]) -> Result<()> {
    if configs.len() < 2 {
        return Err(Error::config("method.name", "compare needs at least two methods"));
    }
    for (i, c) in configs.iter().enumerate() {
        if configs[..i].iter().any(|o| o.method.name == c.method.name) {
            return Err(Error::config("method.name", format!("{} listed twice", c.method.name)));
        }
        if let Some(key) = matched_key(&configs[0], c) {
            return Err(Error::config(
                key,
                format!("{} and {} runs use different settings", configs[0].method.name, c.method.name),
            ));
        }
    }
    Ok(())
}

/// Runs every method under matched settings and writes `<method>.csv`,
/// `<method>.ckpt` and the joined `comparison.csv`.
///
/// Fails if the step-0 trajectories differ between methods.
pub fn compare(configs: &[RunConfig], out_dir: &Path) -> Result<Vec<(Method, RunReport)>> {
    check_matched(configs)?;
    let mut reports = Vec::with_capacity(configs.len());
    for c in configs {
        let report = run_experiment(c, &OutputPaths::named(out_dir, c.method.name.name()))?;
        reports.push((c.method.name, report));
    }
    let (first_method, first) = &reports[0];
    for (method, r) in &reports[1..] {
        if r.initial_rollouts != first.initial_rollouts {
            return Err(Error::Consistency(format!(
                "step-0 trajectories of {method} differ from {first_method}"
            )));
        }
    }
    let runs: Vec<(String, Vec<DiagnosticsRecord>)> = reports
        .iter()
        .map(|(m, r)| (m.name().to_string(), r.records.clone()))
        .collect();
    telemetry::write_comparison_csv(&runs, &out_dir.join("comparison.csv"))?;
    Ok(reports)
}
