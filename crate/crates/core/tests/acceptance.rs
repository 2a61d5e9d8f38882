use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fiberlab::checks::{run_checks, Tolerances};
use fiberlab::objectives::Method;
use fiberlab::telemetry::DiagnosticsRecord;
use fiberlab::trainer::{compare, run_experiment, EnvKind, OutputPaths, RunConfig};

type Criterion = (&'static str, Box<dyn Fn() -> Verdict>);

struct Verdict {
    passed: bool,
    detail: String,
}

fn checks(names: &[&str], limit: Option<Duration>) -> Verdict {
    let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let outcomes = run_checks(&names, &Tolerances::default(), 0).expect("known checks");
    let elapsed: Duration = outcomes.iter().map(|o| o.elapsed).sum();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let mut detail: Vec<String> = outcomes
        .iter()
        .map(|o| format!("{} {} (observed {:.3e}, tol {:.1e})", o.name, if o.passed { "ok" } else { "FAILED" }, o.observed, o.tolerance))
        .collect();
    detail.push(format!("{elapsed:.2?}{}", limit.map(|l| format!(" < {l:?}")).unwrap_or_default()));
    Verdict {
        passed: in_time && outcomes.iter().all(|o| o.passed),
        detail: detail.join("; "),
    }
}

fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (num, den) = ys.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, y)| {
        let dx = i as f64 - xm;
        (a + dx * (y - ym), b + dx * dx)
    });
    num / den
}

fn directional_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.env.kind = EnvKind::Blend;
    c.method.steps = 500;
    c.method.epochs = 4;
    c.method.learning_rate = 0.5;
    c.method.workers = 1;
    c
}

fn with_method(c: &RunConfig, m: Method) -> RunConfig {
    let mut c = c.clone();
    c.method.name = m;
    c
}

fn directional_run() -> Verdict {
    let base = directional_config();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let reports = match compare(&[with_method(&base, Method::FiberPo), with_method(&base, Method::Grpo)], dir.path()) {
        Ok(r) => r,
        Err(e) => return Verdict { passed: false, detail: format!("run failed: {e}") },
    };
    let elapsed = start.elapsed();
    let fib: &[DiagnosticsRecord] = &reports[0].1.records;
    let grpo: &[DiagnosticsRecord] = &reports[1].1.records;
    let (f0, f1, g1) = (&fib[0], &fib[fib.len() - 1], &grpo[grpo.len() - 1]);

    let entropy_kept = f1.entropy > 0.25 * f0.entropy;
    let reward_kept = f1.mean_reward >= f0.mean_reward;
    let contrast = g1.entropy < f1.entropy;

    let delta = base.gating.to_config().unwrap().delta;
    let below = fib.iter().filter(|r| r.mean_abs_log_ratio < delta).count() as f64 / fib.len() as f64;
    let quartile: Vec<f64> = fib[fib.len() * 3 / 4..].iter().map(|r| r.mean_reward).collect();
    let slope = ols_slope(&quartile);
    let fallback = below >= 0.95 && slope >= 0.0;

    let in_time = elapsed < Duration::from_secs(300);
    let passed = in_time && if contrast { entropy_kept && reward_kept } else { fallback };
    Verdict {
        passed,
        detail: format!(
            "fiberpo H {:.4} -> {:.4} ({}), R {:.4} -> {:.4} ({}); grpo final H {:.4} (contrast {}); \
             fallback (used only without contrast): |log r| < delta at {:.1}% of steps, final-quartile reward slope {:.2e} ({}); {elapsed:.2?}",
            f0.entropy,
            f1.entropy,
            if entropy_kept { "ok" } else { "FAILED" },
            f0.mean_reward,
            f1.mean_reward,
            if reward_kept { "ok" } else { "FAILED" },
            g1.entropy,
            if contrast { "holds" } else { "fails" },
            100.0 * below,
            slope,
            if fallback { "met" } else { "not met" },
        ),
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn determinism() -> Verdict {
    let mut base = directional_config();
    base.method.steps = 60;
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut passed = true;

    let runs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = OutputPaths::in_dir(&dir.path().join(d));
            run_experiment(&base, &out).map(|_| read(&out.telemetry)).unwrap_or_default()
        })
        .collect();
    let same_run = !runs[0].is_empty() && runs[0] == runs[1];
    passed &= same_run;
    notes.push(format!("run telemetry identical: {same_run}"));

    let configs = [with_method(&base, Method::FiberPo), with_method(&base, Method::Grpo), with_method(&base, Method::Gspo)];
    for d in ["c", "d"] {
        if let Err(e) = compare(&configs, &dir.path().join(d)) {
            notes.push(format!("compare failed: {e}"));
            passed = false;
        }
    }
    for name in ["fiberpo.csv", "grpo.csv", "gspo.csv", "comparison.csv"] {
        let (x, y) = (read(&dir.path().join("c").join(name)), read(&dir.path().join("d").join(name)));
        let same = !x.is_empty() && x == y;
        passed &= same;
        notes.push(format!("compare {name} identical: {same}"));
    }
    Verdict { passed, detail: notes.join("; ") }
}

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("aggregate gate exactness", Box::new(|| checks(&["gagg_exactness", "gagg_continuity", "gagg_slopes"], Some(Duration::from_secs(1))))),
        ("residual form equivalence", Box::new(|| checks(&["form_equivalence"], Some(Duration::from_secs(1))))),
        ("nominal-regime recovery", Box::new(|| checks(&["mean_centering_recovery"], None))),
        ("first-order identity", Box::new(|| checks(&["jacobian_identity"], None))),
        ("trajectory independence", Box::new(|| checks(&["block_diagonality"], None))),
        ("shift-invariance decoupling", Box::new(|| checks(&["shift_invariance"], None))),
        ("analytic vs finite-difference gradients", Box::new(|| checks(&["gradient_vs_fd"], Some(Duration::from_secs(10))))),
        ("curriculum", Box::new(|| checks(&["curriculum_sampling"], None))),
        ("token-efficiency clipping contrast", Box::new(|| checks(&["token_efficiency"], None))),
        ("desk-scale directional run", Box::new(directional_run)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        if !v.passed {
            failures += 1;
        }
        println!("criterion {:>2} {} {name}: {}", i + 1, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
