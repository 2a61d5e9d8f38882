//! Per-step diagnostics and the versioned telemetry CSV.
//!
//! File layout: a `# fiberlab-telemetry schema=<N>` line, a header row, then
//! one row per step. Floats carry 10 significant digits in scientific
//! notation; histogram counts are integers.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gating::{GatedTrajectory, GlobalRegime, LocalRegime, Zone};
use crate::numeric::stable_sum;
use crate::objectives::TrajectoryBatch;
use crate::policy::SoftmaxPolicy;

pub const SCHEMA_VERSION: u32 = 1;
const SCHEMA_PREFIX: &str = "# fiberlab-telemetry schema=";

/// Default clip-fraction ceiling of the safe zone.
pub const SAFE_ZONE_DEFAULT: f64 = 0.1;

const FLOAT_COLUMNS: [&str; 13] = [
    "mean_reward",
    "val_accuracy",
    "entropy",
    "ratio_geo_mean",
    "ratio_arith_mean",
    "mean_abs_log_ratio",
    "mean_length",
    "grad_norm",
    "clip_fraction",
    "fiber_clip_fraction",
    "fiber_u_mean_abs",
    "fiber_u_max_abs",
    "curriculum_mu",
];

const COUNT_COLUMNS: [&str; 14] = [
    "zone_pos_pass",
    "zone_pos_rollback",
    "zone_pos_zeroed",
    "zone_neg_pass",
    "zone_neg_rollback",
    "zone_neg_zeroed",
    "regime_g1",
    "regime_g2r",
    "regime_g2",
    "regime_g3r",
    "regime_g3",
    "local_l1",
    "local_l2",
    "local_l3",
];

/// All columns, in file order.
pub fn columns() -> Vec<&'static str> {
    std::iter::once("step")
        .chain(FLOAT_COLUMNS)
        .chain(COUNT_COLUMNS)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub val_accuracy: f64,
    /// Mean policy entropy (nats) over the batch's visited contexts.
    pub entropy: f64,
    /// `exp(mean log r)` over all tokens.
    pub ratio_geo_mean: f64,
    pub ratio_arith_mean: f64,
    pub mean_abs_log_ratio: f64,
    pub mean_length: f64,
    pub grad_norm: f64,
    /// Fraction of tokens whose gradient the active method blocks.
    pub clip_fraction: f64,
    /// Fraction of tokens whose fiber residual saturates.
    pub fiber_clip_fraction: f64,
    pub fiber_u_mean_abs: f64,
    pub fiber_u_max_abs: f64,
    pub curriculum_mu: f64,
    /// `[channel][zone]`, channel 0 positive, 1 negative.
    pub zone_hist: [[u64; 3]; 2],
    pub global_hist: [u64; 5],
    pub local_hist: [u64; 3],
}

/// Inputs gathered by the trainer for one step.
pub struct StepData<'a> {
    pub step: usize,
    /// Batch with `logp_new` under the current policy.
    pub batch: &'a TrajectoryBatch,
    pub gates: &'a [GatedTrajectory],
    pub method_clip_fraction: f64,
    pub gradient: &'a [f64],
    pub policy: &'a SoftmaxPolicy,
    pub rewards: &'a [f64],
    pub val_accuracy: f64,
    pub curriculum_mu: f64,
}

pub fn collect(data: &StepData<'_>) -> Result<DiagnosticsRecord> {
    let batch = data.batch;
    let n_tokens = batch.num_tokens() as f64;
    let ys: Vec<f64> = (0..batch.len()).flat_map(|k| batch.log_ratios(k)).collect();

    let mut entropy = Vec::with_capacity(ys.len());
    for traj in &batch.trajectories {
        for rec in traj {
            entropy.push(data.policy.entropy(&rec.state_key)?);
        }
    }

    let mut rec = DiagnosticsRecord {
        step: data.step,
        mean_reward: stable_sum(data.rewards.iter().copied()) / data.rewards.len().max(1) as f64,
        val_accuracy: data.val_accuracy,
        entropy: stable_sum(entropy) / n_tokens,
        ratio_geo_mean: (stable_sum(ys.iter().copied()) / n_tokens).exp(),
        ratio_arith_mean: stable_sum(ys.iter().map(|y| y.exp())) / n_tokens,
        mean_abs_log_ratio: stable_sum(ys.iter().map(|y| y.abs())) / n_tokens,
        mean_length: n_tokens / batch.len() as f64,
        grad_norm: stable_sum(data.gradient.iter().map(|g| g * g)).sqrt(),
        clip_fraction: data.method_clip_fraction,
        curriculum_mu: data.curriculum_mu,
        ..Default::default()
    };

    let mut clipped = 0usize;
    let mut abs_u = Vec::with_capacity(ys.len());
    for g in data.gates {
        clipped += g.clipped_count();
        abs_u.extend(g.deviations.iter().map(|u| u.abs()));
        rec.zone_hist[0][g.regime.zones.0.index()] += 1;
        rec.zone_hist[1][g.regime.zones.1.index()] += 1;
        rec.global_hist[g.regime.global.index()] += 1;
        rec.local_hist[g.regime.local.index()] += 1;
    }
    if !abs_u.is_empty() {
        rec.fiber_clip_fraction = clipped as f64 / abs_u.len() as f64;
        rec.fiber_u_max_abs = abs_u.iter().copied().fold(0.0, f64::max);
        rec.fiber_u_mean_abs = stable_sum(abs_u.iter().copied()) / abs_u.len() as f64;
    }
    Ok(rec)
}

impl DiagnosticsRecord {
    fn floats(&self) -> [f64; 13] {
        [
            self.mean_reward,
            self.val_accuracy,
            self.entropy,
            self.ratio_geo_mean,
            self.ratio_arith_mean,
            self.mean_abs_log_ratio,
            self.mean_length,
            self.grad_norm,
            self.clip_fraction,
            self.fiber_clip_fraction,
            self.fiber_u_mean_abs,
            self.fiber_u_max_abs,
            self.curriculum_mu,
        ]
    }

    fn counts(&self) -> [u64; 14] {
        let z = self.zone_hist;
        let g = self.global_hist;
        let l = self.local_hist;
        [
            z[0][0], z[0][1], z[0][2], z[1][0], z[1][1], z[1][2], g[0], g[1], g[2], g[3], g[4], l[0],
            l[1], l[2],
        ]
    }

    fn from_fields(step: usize, f: &[f64], c: &[u64]) -> Self {
        DiagnosticsRecord {
            step,
            mean_reward: f[0],
            val_accuracy: f[1],
            entropy: f[2],
            ratio_geo_mean: f[3],
            ratio_arith_mean: f[4],
            mean_abs_log_ratio: f[5],
            mean_length: f[6],
            grad_norm: f[7],
            clip_fraction: f[8],
            fiber_clip_fraction: f[9],
            fiber_u_mean_abs: f[10],
            fiber_u_max_abs: f[11],
            curriculum_mu: f[12],
            zone_hist: [[c[0], c[1], c[2]], [c[3], c[4], c[5]]],
            global_hist: [c[6], c[7], c[8], c[9], c[10]],
            local_hist: [c[11], c[12], c[13]],
        }
    }

    fn row(&self) -> Vec<String> {
        std::iter::once(self.step.to_string())
            .chain(self.floats().iter().map(|x| format_float(*x)))
            .chain(self.counts().iter().map(u64::to_string))
            .collect()
    }

    pub fn global_count(&self, regime: GlobalRegime) -> u64 {
        self.global_hist[regime.index()]
    }

    pub fn local_count(&self, regime: LocalRegime) -> u64 {
        self.local_hist[regime.index()]
    }

    pub fn zone_count(&self, positive: bool, zone: Zone) -> u64 {
        self.zone_hist[usize::from(!positive)][zone.index()]
    }
}

/// 10 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.9e}")
}

fn write_lines(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{SCHEMA_PREFIX}{SCHEMA_VERSION}")?;
        writeln!(w, "{}", header.join(","))?;
        for row in rows {
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn write_csv(records: &[DiagnosticsRecord], path: &Path) -> Result<()> {
    let header: Vec<String> = columns().into_iter().map(String::from).collect();
    let rows: Vec<Vec<String>> = records.iter().map(DiagnosticsRecord::row).collect();
    write_lines(path, &header, &rows)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        what: "telemetry CSV",
        line,
        message: message.into(),
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = |n: usize| -> Result<Option<String>> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))
            .map(|l| l.map(|s| s.trim_end().to_string()))
            .and_then(|l| if n == 0 { l.ok_or_else(|| parse_err(1, "empty file")).map(Some) } else { Ok(l) })
    };
    let version_line = next(0)?.unwrap_or_default();
    let version = version_line
        .strip_prefix(SCHEMA_PREFIX)
        .ok_or_else(|| parse_err(1, "missing schema line"))?;
    if version != SCHEMA_VERSION.to_string() {
        return Err(parse_err(
            1,
            format!("unknown schema version {version}, expected {SCHEMA_VERSION}"),
        ));
    }
    let header = next(1)?.ok_or_else(|| parse_err(2, "missing header"))?;
    if header.split(',').collect::<Vec<_>>() != columns() {
        return Err(parse_err(2, "header does not match the schema"));
    }
    let mut out = Vec::new();
    let mut lineno = 2;
    while let Some(line) = next(lineno)? {
        lineno += 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + FLOAT_COLUMNS.len() + COUNT_COLUMNS.len() {
            return Err(parse_err(lineno, format!("expected {} fields", columns().len())));
        }
        let step = fields[0].parse().map_err(|e| parse_err(lineno, format!("step: {e}")))?;
        let floats = fields[1..=FLOAT_COLUMNS.len()]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(lineno, format!("{s}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let counts = fields[1 + FLOAT_COLUMNS.len()..]
            .iter()
            .map(|s| s.parse::<u64>().map_err(|e| parse_err(lineno, format!("{s}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(DiagnosticsRecord::from_fields(step, &floats, &counts));
    }
    Ok(out)
}

/// Joins several runs on `step`, prefixing columns with the run name.
pub fn write_comparison_csv(runs: &[(String, Vec<DiagnosticsRecord>)], path: &Path) -> Result<()> {
    let Some((_, first)) = runs.first() else {
        return Err(Error::domain("comparison needs at least one run"));
    };
    let grid: Vec<usize> = first.iter().map(|r| r.step).collect();
    for (name, recs) in runs {
        if recs.iter().map(|r| r.step).collect::<Vec<_>>() != grid {
            return Err(Error::domain(format!("run `{name}` has a different step grid")));
        }
    }
    let mut header = vec!["step".to_string()];
    for (name, _) in runs {
        header.extend(columns()[1..].iter().map(|c| format!("{name}.{c}")));
    }
    let rows = grid
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let mut row = vec![step.to_string()];
            for (_, recs) in runs {
                row.extend(recs[i].row().into_iter().skip(1));
            }
            row
        })
        .collect::<Vec<_>>();
    write_lines(path, &header, &rows)
}

/// Steps whose fiber clip fraction exceeds `threshold`.
pub fn safe_zone_violations(records: &[DiagnosticsRecord], threshold: f64) -> Vec<usize> {
    records
        .iter()
        .filter(|r| r.fiber_clip_fraction > threshold)
        .map(|r| r.step)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{gate_trajectory, GatingConfig};
    use crate::policy::ContextKey;

    fn sample_record(step: usize) -> DiagnosticsRecord {
        DiagnosticsRecord {
            step,
            mean_reward: 0.123456789012,
            val_accuracy: 0.5,
            entropy: std::f64::consts::LN_2,
            ratio_geo_mean: 1.0,
            ratio_arith_mean: 1.0000001,
            mean_abs_log_ratio: 1e-7,
            mean_length: 3.5,
            grad_norm: 0.031,
            clip_fraction: 0.0,
            fiber_clip_fraction: 0.25,
            fiber_u_mean_abs: 0.01,
            fiber_u_max_abs: 0.2,
            curriculum_mu: 0.8,
            zone_hist: [[3, 1, 0], [4, 0, 0]],
            global_hist: [3, 1, 0, 0, 0],
            local_hist: [2, 2, 0],
        }
    }

    #[test]
    fn empty_file_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(read_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let recs: Vec<_> = (0..3).map(sample_record).collect();
        write_csv(&recs, &a).unwrap();
        let back = read_csv(&a).unwrap();
        for (x, y) in recs.iter().zip(&back) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.global_hist, y.global_hist);
            assert!((x.mean_reward - y.mean_reward).abs() <= 5e-10 * x.mean_reward.abs());
        }
        write_csv(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_csv(&b).unwrap(), back);
    }

    #[test]
    fn rejects_unknown_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&[sample_record(0)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("schema=1", "schema=9");
        std::fs::write(&path, text).unwrap();
        let err = read_csv(&path).unwrap_err().to_string();
        assert!(err.contains("unknown schema version 9"), "{err}");
    }

    #[test]
    fn float_format_has_ten_digits() {
        assert_eq!(format_float(1.0), "1.000000000e0");
        assert_eq!(format_float(-0.00123456789012), "-1.234567890e-3");
    }

    #[test]
    fn on_policy_collection() {
        let cfg = GatingConfig::default();
        let mut policy = SoftmaxPolicy::new(2);
        policy.add_context(ContextKey::new(0, vec![0]), 4).unwrap();
        policy.add_context(ContextKey::new(1, vec![0]), 4).unwrap();
        let batch = TrajectoryBatch::from_log_ratios(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![-1.0]], &cfg).unwrap();
        let gates: Vec<_> = (0..2).map(|k| gate_trajectory(&batch.log_ratios(k), &cfg).unwrap()).collect();
        let data = StepData {
            step: 0,
            batch: &batch,
            gates: &gates,
            method_clip_fraction: 0.0,
            gradient: &[0.3, 0.4],
            policy: &policy,
            rewards: &[1.0, 0.0],
            val_accuracy: 0.0,
            curriculum_mu: 0.8,
        };
        let rec = collect(&data).unwrap();
        assert_eq!(rec.ratio_geo_mean, 1.0);
        assert_eq!(rec.fiber_clip_fraction, 0.0);
        assert_eq!(rec.global_count(GlobalRegime::G1), 2);
        assert_eq!(rec.local_count(LocalRegime::L1), 2);
        assert!((rec.entropy - 4f64.ln()).abs() < 1e-14);
        assert!((rec.grad_norm - 0.5).abs() < 1e-15);
        assert_eq!(rec.mean_reward, 0.5);
    }

    #[test]
    fn drift_fixture_lands_in_g2() {
        let cfg = GatingConfig::default();
        let mut policy = SoftmaxPolicy::new(2);
        let ys = vec![vec![0.6; 4], vec![0.6; 6]];
        for (k, t) in ys.iter().enumerate() {
            for i in 0..t.len() {
                policy.add_context(ContextKey::new(k as u32, vec![i as u32]), 3).unwrap();
            }
        }
        let adv: Vec<Vec<f64>> = ys.iter().map(|t| vec![1.0; t.len()]).collect();
        let batch = TrajectoryBatch::from_log_ratios(&ys, &adv, &cfg).unwrap();
        let gates: Vec<_> = (0..2).map(|k| gate_trajectory(&batch.log_ratios(k), &cfg).unwrap()).collect();
        let rec = collect(&StepData {
            step: 3,
            batch: &batch,
            gates: &gates,
            method_clip_fraction: 0.0,
            gradient: &[],
            policy: &policy,
            rewards: &[1.0, 1.0],
            val_accuracy: 0.0,
            curriculum_mu: 0.5,
        })
        .unwrap();
        assert_eq!(rec.global_count(GlobalRegime::G2), 2);
        assert_eq!(rec.zone_count(true, Zone::Zeroed), 2);
    }

    #[test]
    fn safe_zone_flags() {
        let mut recs: Vec<_> = (0..4).map(sample_record).collect();
        recs[2].fiber_clip_fraction = 0.05;
        assert_eq!(safe_zone_violations(&recs, SAFE_ZONE_DEFAULT), vec![0, 1, 3]);
    }

    #[test]
    fn comparison_requires_matching_grids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("join.csv");
        let a: Vec<_> = (0..3).map(sample_record).collect();
        let b: Vec<_> = (0..2).map(sample_record).collect();
        assert!(write_comparison_csv(&[("x".into(), a.clone()), ("y".into(), b)], &path).is_err());
        write_comparison_csv(&[("x".into(), a.clone()), ("y".into(), a)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().nth(1).unwrap();
        assert!(header.starts_with("step,x.mean_reward"));
        assert_eq!(header.split(',').count(), 1 + 2 * 27);
    }
}
