//! Numerical property suite behind `fiberlab check`.
//!
//! Each check draws its own seeded inputs, measures a worst-case error and
//! compares it with a tolerance. Tolerances can be tightened or loosened by
//! name; `fd` sets both finite-difference tolerances at once.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::curriculum::{curriculum_mean, domain_weights, prompt_weight, CurriculumConfig, PromptProfile, PromptSampler};
use crate::env::{landmark_task, make_domain_blend, register_tasks, rollout, Trajectory};
use crate::error::{Error, Result};
use crate::gating::{
    fiber_residual, fiber_residual_direct, g_agg, g_agg_slope, gate_trajectory, gating_jacobian_fd,
    GatedTrajectory, GatingConfig, GlobalRegime, RegimeTag, Sign, Zone,
};
use crate::numeric::derive_seed;
use crate::objectives::{evaluate, objective_value, objective_value_and_gradient, Method, ObjectiveParams, TrajectoryBatch};
use crate::policy::SoftmaxPolicy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Continuity and slope error of the aggregate gate.
    pub gagg: f64,
    /// Relative disagreement of the two residual forms.
    pub form: f64,
    /// Relative error of `G_i = r_i` in the nominal regime.
    pub recovery: f64,
    /// Finite-difference Jacobian vs identity.
    pub jacobian: f64,
    pub shift: f64,
    /// Relative error of analytic vs finite-difference gradients.
    pub gradient: f64,
    /// Significance level of the sampler's chi-square test.
    pub chi_square_alpha: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            gagg: 1e-6,
            form: 1e-12,
            recovery: 1e-12,
            jacobian: 1e-4,
            shift: 1e-12,
            gradient: 1e-5,
            chi_square_alpha: 0.01,
        }
    }
}

impl Tolerances {
    pub const KEYS: [&'static str; 8] =
        ["gagg", "form", "recovery", "jacobian", "shift", "gradient", "chi_square_alpha", "fd"];

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::config(format!("tolerance.{key}"), format!("must be finite and >= 0, got {value}")));
        }
        match key {
            "gagg" => self.gagg = value,
            "form" => self.form = value,
            "recovery" => self.recovery = value,
            "jacobian" => self.jacobian = value,
            "shift" => self.shift = value,
            "gradient" => self.gradient = value,
            "chi_square_alpha" => self.chi_square_alpha = value,
            "fd" => {
                self.jacobian = value;
                self.gradient = value;
            }
            _ => {
                return Err(Error::config(
                    format!("tolerance.{key}"),
                    format!("unknown tolerance; expected one of {}", Self::KEYS.join(", ")),
                ))
            }
        }
        Ok(())
    }

    /// Applies `key=value` assignments.
    pub fn with_overrides(mut self, assignments: &[String]) -> Result<Self> {
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::config(a.as_str(), "tolerance override must look like key=value"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e| Error::config(format!("tolerance.{}", k.trim()), format!("{e}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone)]
struct Measurement {
    observed: f64,
    tolerance: f64,
    passed: bool,
    detail: String,
}

impl Measurement {
    fn at_most(observed: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            observed,
            tolerance,
            passed: observed <= tolerance,
            detail: detail.into(),
        }
    }
}

type CheckFn = fn(&Tolerances, u64) -> Result<Measurement>;

pub struct Check {
    pub name: &'static str,
    pub summary: &'static str,
    run: CheckFn,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub observed: f64,
    pub tolerance: f64,
    pub detail: String,
    pub elapsed: Duration,
}

pub const CHECKS: &[Check] = &[
    Check { name: "gagg_exactness", summary: "aggregate gate matches its piecewise definition and is odd", run: gagg_exactness },
    Check { name: "gagg_continuity", summary: "aggregate gate is continuous at both kinks", run: gagg_continuity },
    Check { name: "gagg_slopes", summary: "slopes are 1, -T, 0 in the open regions", run: gagg_slopes },
    Check { name: "form_equivalence", summary: "ratio-space and u/v residual forms agree", run: form_equivalence },
    Check { name: "mean_centering_recovery", summary: "nominal regime gives G_i = r_i", run: mean_centering_recovery },
    Check { name: "jacobian_identity", summary: "finite-difference Jacobian near r = 1 is the identity", run: jacobian_identity },
    Check { name: "block_diagonality", summary: "cross-trajectory Jacobian entries are exactly zero", run: block_diagonality },
    Check { name: "shift_invariance", summary: "uniform log-ratio shift moves only the base weight", run: shift_invariance },
    Check { name: "residual_range", summary: "fiber residuals stay in [e^-2eps, e^2eps]", run: residual_range },
    Check { name: "on_policy_fixpoint", summary: "r = 1 gives G = 1 and the plain advantage average", run: on_policy_fixpoint },
    Check { name: "gradient_vs_fd", summary: "analytic objective gradients match central differences", run: gradient_vs_fd },
    Check { name: "curriculum_sampling", summary: "schedule endpoints, weights and chi-square sampling", run: curriculum_sampling },
    Check { name: "token_efficiency", summary: "uniform drift: GRPO clips every token, FiberPO none", run: token_efficiency },
];

pub fn find_check(name: &str) -> Option<&'static Check> {
    CHECKS.iter().find(|c| c.name == name)
}

pub fn run_check(check: &Check, tol: &Tolerances, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let m = (check.run)(tol, seed);
    let elapsed = start.elapsed();
    match m {
        Ok(m) => CheckOutcome {
            name: check.name,
            passed: m.passed,
            observed: m.observed,
            tolerance: m.tolerance,
            detail: m.detail,
            elapsed,
        },
        Err(e) => CheckOutcome {
            name: check.name,
            passed: false,
            observed: f64::NAN,
            tolerance: f64::NAN,
            detail: format!("error: {e}"),
            elapsed,
        },
    }
}

/// Runs the named checks, or all of them when `names` is empty.
pub fn run_checks(names: &[String], tol: &Tolerances, seed: u64) -> Result<Vec<CheckOutcome>> {
    let selected: Vec<&Check> = if names.is_empty() {
        CHECKS.iter().collect()
    } else {
        names
            .iter()
            .map(|n| find_check(n).ok_or_else(|| Error::config("check", format!("unknown property `{n}`"))))
            .collect::<Result<_>>()?
    };
    Ok(selected.into_iter().map(|c| run_check(c, tol, seed)).collect())
}

pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(8).max(8);
    let mut out = format!("{:<width$}  {:<6}  {:>11}  {:>11}  {:>9}  detail\n", "property", "result", "observed", "tolerance", "time");
    for o in outcomes {
        out.push_str(&format!(
            "{:<width$}  {:<6}  {:>11.3e}  {:>11.3e}  {:>8.3}s  {}\n",
            o.name,
            if o.passed { "pass" } else { "FAIL" },
            o.observed,
            o.tolerance,
            o.elapsed.as_secs_f64(),
            o.detail
        ));
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC4EC, stream]))
}

/// `(x, C, T)` with `x` drawn uniformly from one of the three regions.
fn gagg_sample(rng: &mut ChaCha8Rng) -> (f64, f64, usize) {
    let c = rng.random_range(0.01..1.0);
    let t = rng.random_range(1..=64usize);
    let outer = (1.0 + 1.0 / t as f64) * c;
    let mag = match rng.random_range(0..3) {
        0 => rng.random_range(0.0..=c),
        1 => c + (outer - c) * rng.random_range(0.0..1.0),
        _ => outer + rng.random_range(0.0..2.0 * c),
    };
    let x = if rng.random_bool(0.5) { mag } else { -mag };
    (x, c, t)
}

fn gagg_reference(x: f64, c: f64, t: usize) -> f64 {
    let tf = t as f64;
    if x.abs() <= c {
        x
    } else if x.abs() < (1.0 + 1.0 / tf) * c {
        if x > 0.0 {
            (tf + 1.0) * c - tf * x
        } else {
            -(tf + 1.0) * c - tf * x
        }
    } else {
        0.0
    }
}

fn gagg_exactness(_: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (x, c, t) = gagg_sample(&mut rng);
        worst = worst
            .max((g_agg(x, c, t) - gagg_reference(x, c, t)).abs())
            .max((g_agg(-x, c, t) + g_agg(x, c, t)).abs());
    }
    Ok(Measurement::at_most(worst, 0.0, "10^4 triples, branch values and oddness"))
}

fn gagg_continuity(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 2);
    let h = 1e-8;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let c = rng.random_range(0.01..1.0);
        let t = rng.random_range(1..=64usize);
        let outer = (1.0 + 1.0 / t as f64) * c;
        for s in [1.0, -1.0] {
            let at = g_agg(s * c, c, t);
            worst = worst
                .max((g_agg(s * (c + h), c, t) - at).abs())
                .max((g_agg(s * (c - h), c, t) - at).abs())
                .max(g_agg(s * (outer + h), c, t).abs())
                .max(g_agg(s * (outer - h), c, t).abs());
        }
    }
    Ok(Measurement::at_most(worst, tol.gagg, "10^4 (C, T) pairs, h = 1e-8"))
}

fn gagg_slopes(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (x, c, t) = gagg_sample(&mut rng);
        let outer = (1.0 + 1.0 / t as f64) * c;
        let a = x.abs();
        let dist = [(a - c).abs(), (a - outer).abs(), a].into_iter().fold(f64::INFINITY, f64::min);
        if dist < 1e-9 {
            continue;
        }
        let h = (dist / 4.0).min(1e-6);
        let fd = (g_agg(x + h, c, t) - g_agg(x - h, c, t)) / (2.0 * h);
        let expected = if a < c {
            1.0
        } else if a < outer {
            -(t as f64)
        } else {
            0.0
        };
        worst = worst.max((fd - expected).abs()).max((g_agg_slope(x, c, t) - expected).abs());
    }
    Ok(Measurement::at_most(worst, tol.gagg, "10^4 open-region points"))
}

fn random_trajectory(rng: &mut ChaCha8Rng, max_len: usize, scale: f64) -> Vec<f64> {
    let len = rng.random_range(1..=max_len);
    let drift = rng.random_range(-scale..scale);
    (0..len).map(|_| drift + rng.random_range(-scale..scale)).collect()
}

fn random_gating(rng: &mut ChaCha8Rng) -> Result<GatingConfig> {
    let c_minus = rng.random_range(0.05..0.4);
    GatingConfig::new(rng.random_range(0.01..0.3), c_minus + rng.random_range(0.01..0.4), c_minus)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn form_equivalence(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 4);
    let mut worst: f64 = 0.0;
    let mut tokens = 0;
    for _ in 0..1000 {
        let cfg = random_gating(&mut rng)?;
        let scale = [0.01, 0.1, 0.5, 2.0][rng.random_range(0..4)];
        let ys = random_trajectory(&mut rng, 16, scale);
        let g = gate_trajectory(&ys, &cfg)?;
        for (&y, &l) in ys.iter().zip(&g.labels) {
            let uv = fiber_residual(y, l, &g.aggregates, cfg.epsilon);
            let direct = fiber_residual_direct(y, l, &g.aggregates, cfg.epsilon)
                .ok_or_else(|| Error::domain(format!("ratio-space form not representable at log r = {y}")))?;
            worst = worst.max(rel(uv, direct));
            tokens += 1;
        }
    }
    Ok(Measurement::at_most(worst, tol.form, format!("10^3 trajectories, {tokens} tokens")))
}

fn nominal(g: &GatedTrajectory, cfg: &GatingConfig) -> bool {
    let agg = &g.aggregates;
    g.regime.global == GlobalRegime::G1
        && g.clipped_count() == 0
        && agg.log_s_plus.abs() <= cfg.epsilon
        && agg.log_s_minus.abs() <= cfg.epsilon
}

fn mean_centering_recovery(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 5);
    let mut worst: f64 = 0.0;
    let mut built = 0;
    let mut attempts = 0;
    while built < 1000 {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::domain("could not construct nominal-regime trajectories"));
        }
        let cfg = random_gating(&mut rng)?;
        let len = rng.random_range(1..=12);
        let spread = cfg.epsilon * rng.random_range(0.05..0.45);
        let drift = if rng.random_bool(0.5) { rng.random_range(spread..cfg.epsilon.max(spread * 1.01)) } else { 0.0 };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let ys: Vec<f64> = (0..len).map(|_| sign * drift + rng.random_range(-spread..spread)).collect();
        let g = gate_trajectory(&ys, &cfg)?;
        if !nominal(&g, &cfg) {
            continue;
        }
        for (&y, &gi) in ys.iter().zip(&g.gated) {
            worst = worst.max(rel(gi, y.exp()));
        }
        built += 1;
    }
    Ok(Measurement::at_most(worst, tol.recovery, format!("{built} nominal trajectories")))
}

fn near_one_batch(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let k = rng.random_range(1..=4);
    (0..k)
        .map(|_| {
            let len = rng.random_range(1..=6);
            (0..len)
                .map(|_| {
                    let m = rng.random_range(1e-5..1e-3);
                    if rng.random_bool(0.5) { m } else { -m }
                })
                .collect()
        })
        .collect()
}

fn jacobian_identity(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 6);
    let cfg = GatingConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let batch = near_one_batch(&mut rng);
        let jac = gating_jacobian_fd(&batch, &cfg, 1e-6)?;
        if jac.crossed_boundary() {
            return Err(Error::domain("probe crossed a regime boundary near r = 1"));
        }
        for (i, row) in jac.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                worst = worst.max((v - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    Ok(Measurement::at_most(worst, tol.jacobian, "200 batches up to 4x6, h = 1e-6"))
}

fn block_diagonality(_: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 7);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for n in 0..200 {
        let cfg = random_gating(&mut rng)?;
        let batch: Vec<Vec<f64>> = if n % 2 == 0 {
            near_one_batch(&mut rng)
        } else {
            (0..rng.random_range(2..=4)).map(|_| random_trajectory(&mut rng, 6, 0.5)).collect()
        };
        let jac = gating_jacobian_fd(&batch, &cfg, 1e-6)?;
        for (i, row) in jac.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if jac.owner[i] != jac.owner[j] {
                    worst = worst.max(v.abs());
                    entries += 1;
                }
            }
        }
    }
    Ok(Measurement::at_most(worst, 0.0, format!("{entries} cross-trajectory entries")))
}

fn shift_invariance(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 8);
    let task = landmark_task();
    let cfg = GatingConfig::default();
    let mut worst: f64 = 0.0;
    let mut min_base_change = f64::INFINITY;
    for answer in &task.accepted {
        let len = answer.tokens.len() + usize::from(answer.tokens.len() < task.max_length);
        for _ in 0..50 {
            let ys: Vec<f64> = (0..len).map(|_| rng.random_range(1e-3..0.05)).collect();
            let base = gate_trajectory(&ys, &cfg)?;
            for c in [0.1, 0.5] {
                let shifted: Vec<f64> = ys.iter().map(|y| y + c).collect();
                let g = gate_trajectory(&shifted, &cfg)?;
                for (a, b) in base.residuals.iter().zip(&g.residuals) {
                    worst = worst.max(rel(*a, *b));
                }
                min_base_change = min_base_change.min((g.base_weight - base.base_weight).abs());
            }
        }
    }
    if min_base_change == 0.0 {
        return Ok(Measurement {
            observed: worst,
            tolerance: tol.shift,
            passed: false,
            detail: "base weight did not absorb the shift".into(),
        });
    }
    Ok(Measurement::at_most(
        worst,
        tol.shift,
        format!("landmark answers, c in {{0.1, 0.5}}, min |dW| = {min_base_change:.3e}"),
    ))
}

fn residual_range(_: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let cfg = random_gating(&mut rng)?;
        let ys = random_trajectory(&mut rng, 16, 3.0);
        let g = gate_trajectory(&ys, &cfg)?;
        for lr in &g.log_residuals {
            worst = worst.max(lr.abs() - 2.0 * cfg.epsilon);
        }
    }
    Ok(Measurement::at_most(worst.max(0.0), 0.0, "excess of |log residual| over 2 eps"))
}

fn on_policy_fixpoint(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 10);
    let cfg = GatingConfig::default();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(1..=6);
        let lens: Vec<usize> = (0..k).map(|_| rng.random_range(1..=8)).collect();
        let ys: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.0; n]).collect();
        let adv: Vec<Vec<f64>> = lens.iter().map(|&n| vec![normal.sample(&mut rng); n]).collect();
        let batch = TrajectoryBatch::from_log_ratios(&ys, &adv, &cfg)?;
        let eval = evaluate(&batch, Method::FiberPo, &ObjectiveParams { gating: cfg, clip_eps: 0.2 })?;
        let plain = adv.iter().map(|a| a[0]).sum::<f64>() / k as f64;
        worst = worst.max((eval.value - plain).abs());
        for g in eval.gates.iter().flatten() {
            worst = worst.max(g.gated.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max));
        }
    }
    Ok(Measurement::at_most(worst, tol.recovery, "200 on-policy batches"))
}

type Signature = (Vec<RegimeTag>, Vec<Vec<Sign>>, Vec<Vec<bool>>, Vec<(bool, bool)>, usize);

fn signature(policy: &SoftmaxPolicy, batch: &TrajectoryBatch, method: Method, params: &ObjectiveParams) -> Result<Signature> {
    let fresh = batch.refreshed(policy, &params.gating)?;
    let eval = evaluate(&fresh, method, params)?;
    let gates = (0..fresh.len())
        .map(|k| gate_trajectory(&fresh.log_ratios(k), &params.gating))
        .collect::<Result<Vec<_>>>()?;
    let eps = params.gating.epsilon;
    Ok((
        gates.iter().map(|g| g.regime).collect(),
        gates.iter().map(|g| g.labels.clone()).collect(),
        gates.iter().map(|g| g.clipped.clone()).collect(),
        gates
            .iter()
            .map(|g| (g.aggregates.log_s_plus.abs() > eps, g.aggregates.log_s_minus.abs() > eps))
            .collect(),
        eval.clipped_tokens,
    ))
}

fn gradient_vs_fd(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let mut rng = rng_for(seed, 11);
    let tasks = make_domain_blend(seed, 2, 2)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut attempts = 0;
    let mut regimes = [0usize; 5];
    while accepted < 50 {
        attempts += 1;
        if attempts > 5000 {
            return Err(Error::domain("no batches away from regime boundaries"));
        }
        let mut old = SoftmaxPolicy::new(2);
        register_tasks(&mut old, &tasks)?;
        old.randomize(0.5, &mut rng)?;
        let mut policy = old.clone();
        let drift = [0.02, 0.1, 0.3, 0.8, 1.5][attempts % 5];
        for p in policy.params_mut() {
            *p += drift * normal.sample(&mut rng);
        }
        let n = rng.random_range(2..=4);
        let rollouts: Vec<Trajectory> = (0..n)
            .map(|_| rollout(&old, &tasks[rng.random_range(0..tasks.len())], &mut rng))
            .collect::<Result<_>>()?;
        let adv: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let domains = rollouts.iter().map(|r| tasks[r.task_id as usize].domain_id).collect();
        let cfg = GatingConfig::new([0.05, 0.2][attempts % 2], 0.3, 0.2)?;
        let params = ObjectiveParams { gating: cfg, clip_eps: 0.2 };
        let batch = TrajectoryBatch::from_rollouts(&rollouts, (0..n as u32).collect(), domains, &adv, &policy, &cfg)?;

        let mut touched: Vec<usize> = Vec::new();
        for rec in batch.trajectories.iter().flatten() {
            let (offset, width) = policy.slot(&rec.state_key)?;
            touched.extend(offset..offset + width);
        }
        touched.sort_unstable();
        touched.dedup();

        let mut batch_worst: f64 = 0.0;
        let mut near_boundary = false;
        'methods: for method in Method::ALL {
            let (_, grad) = objective_value_and_gradient(&policy, &batch, method, &params)?;
            let base_sig = signature(&policy, &batch, method, &params)?;
            let mut fd = vec![0.0; grad.len()];
            for &j in &touched {
                let mut probe = policy.clone();
                probe.params_mut()[j] += h;
                let plus = objective_value(&probe, &batch, method, &params)?;
                let sig_plus = signature(&probe, &batch, method, &params)?;
                probe.params_mut()[j] -= 2.0 * h;
                let minus = objective_value(&probe, &batch, method, &params)?;
                let sig_minus = signature(&probe, &batch, method, &params)?;
                if sig_plus != base_sig || sig_minus != base_sig {
                    near_boundary = true;
                    break 'methods;
                }
                fd[j] = (plus - minus) / (2.0 * h);
            }
            let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-3);
            let err = grad.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            batch_worst = batch_worst.max(err / scale);
        }
        if near_boundary {
            continue;
        }
        for k in 0..batch.len() {
            regimes[gate_trajectory(&batch.log_ratios(k), &cfg)?.regime.global.index()] += 1;
        }
        worst = worst.max(batch_worst);
        accepted += 1;
    }
    let seen = GlobalRegime::ALL
        .iter()
        .zip(regimes)
        .filter(|(_, n)| *n > 0)
        .map(|(r, n)| format!("{}:{n}", r.label()))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Measurement::at_most(
        worst,
        tol.gradient,
        format!("50 batches x 4 objectives, {attempts} drawn, regimes {seen}"),
    ))
}

fn curriculum_sampling(tol: &Tolerances, seed: u64) -> Result<Measurement> {
    let cfg = CurriculumConfig::default();
    let horizon = 100;
    let mut problems = Vec::new();
    let mu0 = curriculum_mean(0, horizon, &cfg)?;
    let mu_t = curriculum_mean(horizon, horizon, &cfg)?;
    if mu0 != 0.8 || mu_t != 0.2 {
        problems.push(format!("endpoints {mu0}, {mu_t}"));
    }
    let w = prompt_weight(0.65, 0.8, 0.15);
    if (w - (-0.5f64).exp()).abs() > 1e-12 {
        problems.push(format!("one-sigma weight {w}"));
    }
    let alpha = domain_weights(&[100, 25], &[None, None])?;
    if alpha != [2.0 / 3.0, 1.0 / 3.0] {
        problems.push(format!("alpha {alpha:?}"));
    }

    let rates = [[0.5, 0.6, 0.7, 0.8, 0.9], [0.3, 0.45, 0.55, 0.65, 0.75]];
    let mut profiles = Vec::new();
    for (d, ps) in rates.iter().enumerate() {
        for (i, &p) in ps.iter().enumerate() {
            profiles.push(PromptProfile { task_id: (d * 10 + i) as u32, domain_id: d as u32, pass_rate: p, valid: true });
        }
    }
    profiles.push(PromptProfile { task_id: 99, domain_id: 0, pass_rate: 1.0, valid: false });
    let t = 25;
    let sampler = PromptSampler::new(&profiles, t, horizon, &cfg)?;
    let mut expected = Vec::new();
    for (domain, a) in sampler.group_probabilities() {
        for (task, p) in sampler.within_group(domain).unwrap_or_default() {
            expected.push((task, a * p));
        }
    }
    let draws = 100_000;
    let mut rng = rng_for(seed, 12);
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sampler.sample(&mut rng)).or_insert(0usize) += 1;
    }
    if counts.contains_key(&99) {
        problems.push("solved prompt was sampled".into());
    }
    let stat: f64 = expected
        .iter()
        .map(|&(task, p)| {
            let e = p * draws as f64;
            let o = *counts.get(&task).unwrap_or(&0) as f64;
            (o - e) * (o - e) / e
        })
        .sum();
    let df = (expected.len() - 1) as f64;
    let chi = ChiSquared::new(df).map_err(|e| Error::domain(format!("chi-square: {e}")))?;
    let p_value = 1.0 - chi.cdf(stat);
    let passed = problems.is_empty() && p_value >= tol.chi_square_alpha;
    let mut detail = format!("chi2 = {stat:.2} on {df} df, p = {p_value:.3}; reported value is 1 - p");
    if !problems.is_empty() {
        detail = format!("{detail}; {}", problems.join("; "));
    }
    Ok(Measurement {
        observed: 1.0 - p_value,
        tolerance: 1.0 - tol.chi_square_alpha,
        passed,
        detail,
    })
}

fn token_efficiency(_: &Tolerances, _: u64) -> Result<Measurement> {
    let cfg = GatingConfig::default();
    let params = ObjectiveParams { gating: cfg, clip_eps: 0.2 };
    let drift = 0.25;
    let len = 6;
    if !(drift > cfg.epsilon && drift < cfg.c_plus && drift.exp() > 1.0 + params.clip_eps) {
        return Err(Error::domain("drift fixture does not satisfy eps < drift < budget"));
    }
    let batch = TrajectoryBatch::from_log_ratios(&[vec![drift; len]], &[vec![1.0; len]], &cfg)?;
    let grpo = evaluate(&batch, Method::Grpo, &params)?;
    let fiber = evaluate(&batch, Method::FiberPo, &params)?;
    let gates = fiber.gates.as_ref().ok_or_else(|| Error::domain("FiberPO evaluation without gates"))?;
    let fiber_clipped: usize = gates.iter().map(GatedTrajectory::clipped_count).sum();
    let unattenuated = gates[0].gated.iter().fold(0.0f64, |m, g| m.max(rel(*g, drift.exp())));
    let passed = grpo.clip_fraction() == 1.0
        && fiber_clipped == 0
        && gates[0].regime.zones.0 == Zone::PassThrough
        && unattenuated <= 1e-12;
    Ok(Measurement {
        observed: (1.0 - grpo.clip_fraction()) + fiber_clipped as f64 / len as f64,
        tolerance: 0.0,
        passed,
        detail: format!(
            "drift {drift}: GRPO clips {:.0}%, FiberPO clips {fiber_clipped}/{len}, max |G/r - 1| = {unattenuated:.1e}",
            100.0 * grpo.clip_fraction()
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let out = run_checks(&[], &Tolerances::default(), 0).unwrap();
        let failed: Vec<_> = out.iter().filter(|o| !o.passed).collect();
        assert!(failed.is_empty(), "{}", render_table(&out));
    }

    #[test]
    fn fd_floor_is_detected() {
        let tol = Tolerances::default().with_overrides(&["fd=1e-15".into()]).unwrap();
        let out = run_checks(&["jacobian_identity".into(), "gradient_vs_fd".into()], &tol, 0).unwrap();
        assert!(out.iter().all(|o| !o.passed), "{}", render_table(&out));
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(run_checks(&["nope".into()], &Tolerances::default(), 0).is_err());
        assert!(Tolerances::default().with_overrides(&["nope=1".into()]).is_err());
    }
}
