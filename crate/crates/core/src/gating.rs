//! Two-scale importance-ratio gating.
//!
//! Each token's gated ratio factors into a trajectory-shared *base weight*
//! and a token-level *fiber residual*:
//!
//! ```text
//! log G_i = [g(log s+, C+, T) - g(log s-, C-, T)]          base weight
//!         + [clip(l_i u_i, ±eps) - clip(l_i v_i, ±eps)]    fiber residual
//! ```
//!
//! where `log s±` are the sign-channel means of the trajectory's log-ratios,
//! `l_i` is the sign label of token `i`, `u_i = l_i log r_i - log s^(l_i)` is the
//! token's deviation from its same-sign channel mean and `v_i = -log s^(-l_i)`.
//! `g` is the piecewise-linear aggregate gate ([`g_agg`]).
//!
//! Everything is evaluated in log space and exponentiated once per token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::stable_sum;

/// Relative tolerance between the ratio-space and log-space residual forms.
pub const FORM_TOLERANCE: f64 = 1e-12;

/// Sign label of a token's log-ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// Trust-region budgets for the two gating scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingConfig {
    /// Log-space bound of the fiber clip.
    pub epsilon: f64,
    /// Total trajectory budget, `c_plus + c_minus`.
    pub delta: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    /// Label assigned to tokens with `log r == 0`.
    pub tie_break_sign: Sign,
}

impl Default for GatingConfig {
    /// `eps = 0.05`, `C+ = 0.3`, `C- = 0.2`. These are working defaults, not
    /// canonical values.
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            delta: 0.5,
            c_plus: 0.3,
            c_minus: 0.2,
            tie_break_sign: Sign::Plus,
        }
    }
}

impl GatingConfig {
    /// Asymmetric budgets; requires `c_minus < c_plus`.
    pub fn new(epsilon: f64, c_plus: f64, c_minus: f64) -> Result<Self> {
        let cfg = Self::unordered(epsilon, c_plus, c_minus)?;
        if cfg.c_minus >= cfg.c_plus {
            return Err(Error::config(
                "gating.c_minus",
                format!(
                    "c_minus ({}) must be below c_plus ({}); use unordered budgets to allow otherwise",
                    cfg.c_minus, cfg.c_plus
                ),
            ));
        }
        Ok(cfg)
    }

    /// Budgets with no ordering requirement between the two channels.
    pub fn unordered(epsilon: f64, c_plus: f64, c_minus: f64) -> Result<Self> {
        for (key, v) in [
            ("gating.epsilon", epsilon),
            ("gating.c_plus", c_plus),
            ("gating.c_minus", c_minus),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self {
            epsilon,
            delta: c_plus + c_minus,
            c_plus,
            c_minus,
            tie_break_sign: Sign::Plus,
        })
    }

    /// Builds from an explicit total budget and checks `c_plus + c_minus == delta`.
    pub fn with_delta(
        epsilon: f64,
        delta: f64,
        c_plus: f64,
        c_minus: f64,
        ordered: bool,
    ) -> Result<Self> {
        let mut cfg = if ordered {
            Self::new(epsilon, c_plus, c_minus)?
        } else {
            Self::unordered(epsilon, c_plus, c_minus)?
        };
        // Decimal literals such as 0.1 + 0.2 are not exact in binary.
        if (cfg.delta - delta).abs() > 1e-12 * delta.abs().max(1.0) {
            return Err(Error::config(
                "gating.delta",
                format!("c_plus + c_minus = {} but delta = {delta}", cfg.delta),
            ));
        }
        cfg.delta = delta;
        Ok(cfg)
    }

    /// Soft violations of the recommended parameter relationships.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epsilon >= self.delta {
            out.push(format!(
                "epsilon ({}) >= delta ({}): local gating will not engage before global gating",
                self.epsilon, self.delta
            ));
        }
        out
    }

    pub fn budget(&self, channel: Sign) -> f64 {
        match channel {
            Sign::Plus => self.c_plus,
            Sign::Minus => self.c_minus,
        }
    }
}

/// `exp(clamp(ln x, -eps, eps))`.
pub fn logclip(x: f64, epsilon: f64) -> Result<f64> {
    if x.is_nan() || x <= 0.0 {
        return Err(Error::domain(format!("logclip needs a positive ratio, got {x}")));
    }
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::domain(format!("logclip bound must be >= 0, got {epsilon}")));
    }
    Ok(x.ln().clamp(-epsilon, epsilon).exp())
}

#[inline]
fn clip(x: f64, epsilon: f64) -> f64 {
    x.clamp(-epsilon, epsilon)
}

#[inline]
fn clip_slope(x: f64, epsilon: f64) -> f64 {
    if x.abs() <= epsilon {
        1.0
    } else {
        0.0
    }
}

/// Upper end of the rollback band, `(1 + 1/T) C`.
#[inline]
pub fn rollback_limit(c: f64, length: usize) -> f64 {
    (1.0 + 1.0 / length as f64) * c
}

/// Piecewise-linear aggregate gate.
///
/// Identity for `|x| <= C`, slope `-T` on the rollback band
/// `C < |x| < (1 + 1/T) C`, and zero beyond. Continuous and odd.
pub fn g_agg(x: f64, c: f64, length: usize) -> f64 {
    let t = length as f64;
    let a = x.abs();
    if a <= c {
        x
    } else if a < rollback_limit(c, length) {
        x.signum() * (t + 1.0) * c - t * x
    } else {
        0.0
    }
}

/// Slope of [`g_agg`], taking the lower-`|x|` one-sided value at both kinks.
pub fn g_agg_slope(x: f64, c: f64, length: usize) -> f64 {
    let a = x.abs();
    if a <= c {
        1.0
    } else if a <= rollback_limit(c, length) {
        -(length as f64)
    } else {
        0.0
    }
}

/// Branch of [`g_agg`] that a channel aggregate falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    PassThrough,
    Rollback,
    Zeroed,
}

impl Zone {
    pub fn of(x: f64, c: f64, length: usize) -> Zone {
        let a = x.abs();
        if a <= c {
            Zone::PassThrough
        } else if a < rollback_limit(c, length) {
            Zone::Rollback
        } else {
            Zone::Zeroed
        }
    }

    pub const ALL: [Zone; 3] = [Zone::PassThrough, Zone::Rollback, Zone::Zeroed];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Trajectory-level regime, determined by the zone pair of the two channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GlobalRegime {
    /// Both channels pass through.
    G1,
    /// One channel in rollback, the other passing through.
    G2Rollback,
    /// One channel zeroed, the other passing through.
    G2,
    /// Both channels engaged (rollback or zeroed) but not both zeroed.
    G3Rollback,
    /// Both channels zeroed: base weight 1.
    G3,
}

impl GlobalRegime {
    pub const ALL: [GlobalRegime; 5] = [
        GlobalRegime::G1,
        GlobalRegime::G2Rollback,
        GlobalRegime::G2,
        GlobalRegime::G3Rollback,
        GlobalRegime::G3,
    ];

    pub fn from_zones(plus: Zone, minus: Zone) -> GlobalRegime {
        use Zone::*;
        match (plus, minus) {
            (PassThrough, PassThrough) => GlobalRegime::G1,
            (Rollback, PassThrough) | (PassThrough, Rollback) => GlobalRegime::G2Rollback,
            (Zeroed, PassThrough) | (PassThrough, Zeroed) => GlobalRegime::G2,
            (Zeroed, Zeroed) => GlobalRegime::G3,
            _ => GlobalRegime::G3Rollback,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            GlobalRegime::G1 => "G-I",
            GlobalRegime::G2Rollback => "G-IIr",
            GlobalRegime::G2 => "G-II",
            GlobalRegime::G3Rollback => "G-IIIr",
            GlobalRegime::G3 => "G-III",
        }
    }
}

/// Token-level regime: how many fiber residuals saturate the clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocalRegime {
    /// No token clipped.
    L1,
    /// Some but not all tokens clipped.
    L2,
    /// Every token clipped.
    L3,
}

impl LocalRegime {
    pub const ALL: [LocalRegime; 3] = [LocalRegime::L1, LocalRegime::L2, LocalRegime::L3];

    pub fn from_counts(clipped: usize, total: usize) -> LocalRegime {
        if clipped == 0 {
            LocalRegime::L1
        } else if clipped == total {
            LocalRegime::L3
        } else {
            LocalRegime::L2
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            LocalRegime::L1 => "L-I",
            LocalRegime::L2 => "L-II",
            LocalRegime::L3 => "L-III",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegimeTag {
    pub global: GlobalRegime,
    pub local: LocalRegime,
    /// Zones of the (positive, negative) channels.
    pub zones: (Zone, Zone),
}

/// Sign-channel means of a trajectory's log-ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAggregates {
    pub log_s_plus: f64,
    pub log_s_minus: f64,
    pub length: usize,
}

impl TrajectoryAggregates {
    /// Trajectory mean log-ratio.
    pub fn mean_log_ratio(&self) -> f64 {
        self.log_s_plus - self.log_s_minus
    }

    pub fn channel(&self, sign: Sign) -> f64 {
        match sign {
            Sign::Plus => self.log_s_plus,
            Sign::Minus => self.log_s_minus,
        }
    }
}

pub fn aggregate_log_ratios(log_ratios: &[f64]) -> Result<TrajectoryAggregates> {
    if log_ratios.is_empty() {
        return Err(Error::domain("cannot aggregate an empty trajectory"));
    }
    if let Some(bad) = log_ratios.iter().find(|x| !x.is_finite()) {
        return Err(Error::domain(format!("non-finite log-ratio {bad}")));
    }
    let t = log_ratios.len() as f64;
    Ok(TrajectoryAggregates {
        log_s_plus: stable_sum(log_ratios.iter().map(|&x| x.max(0.0))) / t,
        log_s_minus: stable_sum(log_ratios.iter().map(|&x| (-x).max(0.0))) / t,
        length: log_ratios.len(),
    })
}

pub fn sign_label(log_ratio: f64, config: &GatingConfig) -> Result<Sign> {
    if log_ratio.is_nan() {
        return Err(Error::domain("sign label of NaN"));
    }
    Ok(if log_ratio > 0.0 {
        Sign::Plus
    } else if log_ratio < 0.0 {
        Sign::Minus
    } else {
        config.tie_break_sign
    })
}

pub fn log_base_weight(agg: &TrajectoryAggregates, config: &GatingConfig) -> f64 {
    g_agg(agg.log_s_plus, config.c_plus, agg.length)
        - g_agg(agg.log_s_minus, config.c_minus, agg.length)
}

/// Trajectory-shared factor of every token's gated ratio.
pub fn base_weight(agg: &TrajectoryAggregates, config: &GatingConfig) -> f64 {
    log_base_weight(agg, config).exp()
}

/// Clip arguments `(l u, l v)` of a token's residual.
#[inline]
fn residual_arguments(log_ratio: f64, label: Sign, agg: &TrajectoryAggregates) -> (f64, f64) {
    let l = label.value();
    let u = l * log_ratio - agg.channel(label);
    let v = -agg.channel(label.flip());
    (l * u, l * v)
}

/// Same-sign deviation `u_i = l_i log r_i - log s^(l_i)`.
pub fn fiber_deviation(log_ratio: f64, label: Sign, agg: &TrajectoryAggregates) -> f64 {
    label.value() * log_ratio - agg.channel(label)
}

pub fn log_fiber_residual(
    log_ratio: f64,
    label: Sign,
    agg: &TrajectoryAggregates,
    epsilon: f64,
) -> f64 {
    let (lu, lv) = residual_arguments(log_ratio, label, agg);
    clip(lu, epsilon) - clip(lv, epsilon)
}

/// Token-level gated residual in `u`/`v` form.
pub fn fiber_residual(
    log_ratio: f64,
    label: Sign,
    agg: &TrajectoryAggregates,
    epsilon: f64,
) -> f64 {
    log_fiber_residual(log_ratio, label, agg, epsilon).exp()
}

/// The same residual computed in ratio space:
/// `logclip(s_l^{-l} r, eps) / logclip(s_{-l}^{-l}, eps)`.
///
/// Returns `None` when the ratio itself is not representable.
pub fn fiber_residual_direct(
    log_ratio: f64,
    label: Sign,
    agg: &TrajectoryAggregates,
    epsilon: f64,
) -> Option<f64> {
    let l = label.value();
    let r = log_ratio.exp();
    let same = agg.channel(label).exp();
    let opposite = agg.channel(label.flip()).exp();
    let num = same.powf(-l) * r;
    let den = opposite.powf(-l);
    if !(num.is_finite() && num > 0.0 && den.is_finite() && den > 0.0) {
        return None;
    }
    Some(logclip(num, epsilon).ok()? / logclip(den, epsilon).ok()?)
}

/// Regime from channel zones and per-token fiber deviations `u_i`.
pub fn classify_regime(
    agg: &TrajectoryAggregates,
    fiber_deviations: &[f64],
    config: &GatingConfig,
) -> RegimeTag {
    let plus = Zone::of(agg.log_s_plus, config.c_plus, agg.length);
    let minus = Zone::of(agg.log_s_minus, config.c_minus, agg.length);
    let clipped = fiber_deviations
        .iter()
        .filter(|u| u.abs() > config.epsilon)
        .count();
    RegimeTag {
        global: GlobalRegime::from_zones(plus, minus),
        local: LocalRegime::from_counts(clipped, fiber_deviations.len()),
        zones: (plus, minus),
    }
}

/// Everything the gate computes for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedTrajectory {
    pub log_ratios: Vec<f64>,
    pub labels: Vec<Sign>,
    pub aggregates: TrajectoryAggregates,
    pub log_base_weight: f64,
    pub base_weight: f64,
    pub log_residuals: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Gated ratios `G_i = base_weight * residual_i`.
    pub gated: Vec<f64>,
    /// Fiber deviations `u_i`.
    pub deviations: Vec<f64>,
    /// Whether the numerator clip saturates (`|u_i| > eps`).
    pub clipped: Vec<bool>,
    pub regime: RegimeTag,
}

impl GatedTrajectory {
    pub fn len(&self) -> usize {
        self.log_ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_ratios.is_empty()
    }

    pub fn clipped_count(&self) -> usize {
        self.clipped.iter().filter(|&&c| c).count()
    }

    /// Vector-Jacobian product through the gate.
    ///
    /// Given `upstream[i] = dJ/dG_i`, returns `dJ/d(log r_j)` for every token,
    /// including the coupling through the trajectory aggregates. Kinks use the
    /// lower-`|x|` one-sided slope; `max(x, 0)` has slope 0 at `x = 0`.
    pub fn log_ratio_vjp(&self, upstream: &[f64], config: &GatingConfig) -> Vec<f64> {
        assert_eq!(upstream.len(), self.len(), "upstream length mismatch");
        let t = self.len() as f64;
        let agg = &self.aggregates;
        let slope_plus = g_agg_slope(agg.log_s_plus, config.c_plus, agg.length);
        let slope_minus = g_agg_slope(agg.log_s_minus, config.c_minus, agg.length);

        // d log G_i / d y_j = slope+ a_j - slope- b_j
        //   + num_i (delta_ij - l_i dS^(l_i)_j) + den_i l_i dS^(-l_i)_j
        // with a_j = dS+/dy_j = [y_j > 0]/T and b_j = dS-/dy_j = -[y_j < 0]/T.
        let mut weight_total = 0.0;
        let mut coef_a = 0.0;
        let mut coef_b = 0.0;
        let mut direct = vec![0.0; self.len()];
        for i in 0..self.len() {
            let w = upstream[i] * self.gated[i];
            weight_total += w;
            let (lu, lv) = residual_arguments(self.log_ratios[i], self.labels[i], agg);
            let num = clip_slope(lu, config.epsilon);
            let den = clip_slope(lv, config.epsilon);
            direct[i] = w * num;
            match self.labels[i] {
                // -num dS+ + den dS-
                Sign::Plus => {
                    coef_a -= w * num;
                    coef_b += w * den;
                }
                // +num dS- - den dS+
                Sign::Minus => {
                    coef_b += w * num;
                    coef_a -= w * den;
                }
            }
        }
        coef_a += slope_plus * weight_total;
        coef_b -= slope_minus * weight_total;

        self.log_ratios
            .iter()
            .zip(direct)
            .map(|(&y, d)| {
                let a = if y > 0.0 { 1.0 / t } else { 0.0 };
                let b = if y < 0.0 { -1.0 / t } else { 0.0 };
                d + coef_a * a + coef_b * b
            })
            .collect()
    }

    /// Analytic Jacobian `d log G_i / d log r_j`.
    pub fn log_jacobian(&self, config: &GatingConfig) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut jac = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0 / self.gated[i];
            let row = self.log_ratio_vjp(&e, config);
            jac[i] = row;
        }
        jac
    }
}

/// Gate one trajectory.
///
/// Also recomputes every residual in ratio space and fails with
/// [`Error::Consistency`] if the two forms disagree beyond [`FORM_TOLERANCE`].
pub fn gate_trajectory(log_ratios: &[f64], config: &GatingConfig) -> Result<GatedTrajectory> {
    let aggregates = aggregate_log_ratios(log_ratios)?;
    let labels = log_ratios
        .iter()
        .map(|&y| sign_label(y, config))
        .collect::<Result<Vec<_>>>()?;
    let lw = log_base_weight(&aggregates, config);

    let n = log_ratios.len();
    let mut log_residuals = Vec::with_capacity(n);
    let mut deviations = Vec::with_capacity(n);
    let mut clipped = Vec::with_capacity(n);
    for (&y, &l) in log_ratios.iter().zip(&labels) {
        let lr = log_fiber_residual(y, l, &aggregates, config.epsilon);
        if let Some(direct) = fiber_residual_direct(y, l, &aggregates, config.epsilon) {
            let uv = lr.exp();
            if (direct - uv).abs() > FORM_TOLERANCE * uv.abs().max(direct.abs()) {
                return Err(Error::Consistency(format!(
                    "residual forms disagree for log r = {y}: u/v {uv} vs direct {direct}"
                )));
            }
        }
        let u = fiber_deviation(y, l, &aggregates);
        log_residuals.push(lr);
        deviations.push(u);
        clipped.push(u.abs() > config.epsilon);
    }

    let regime = classify_regime(&aggregates, &deviations, config);
    let residuals = log_residuals.iter().map(|x| x.exp()).collect();
    let gated = log_residuals.iter().map(|x| (lw + x).exp()).collect();
    Ok(GatedTrajectory {
        log_ratios: log_ratios.to_vec(),
        labels,
        aggregates,
        log_base_weight: lw,
        base_weight: lw.exp(),
        log_residuals,
        residuals,
        gated,
        deviations,
        clipped,
        regime,
    })
}

/// Central-difference Jacobian of the gate over a batch, in ratio space.
#[derive(Debug, Clone)]
pub struct FdJacobian {
    /// `matrix[i][j] = dG_i / dr_j` over the flattened token index.
    pub matrix: Vec<Vec<f64>>,
    /// Trajectory index of each flattened token.
    pub owner: Vec<usize>,
    /// Flattened columns whose probe changed a regime, a sign label or a
    /// clip state somewhere in the batch.
    pub boundary_crossings: Vec<usize>,
}

impl FdJacobian {
    pub fn crossed_boundary(&self) -> bool {
        !self.boundary_crossings.is_empty()
    }
}

fn gate_state(g: &GatedTrajectory, epsilon: f64) -> (RegimeTag, Vec<Sign>, Vec<bool>, Vec<bool>) {
    let agg = &g.aggregates;
    let den_sat = g
        .log_ratios
        .iter()
        .zip(&g.labels)
        .map(|(&y, &l)| residual_arguments(y, l, agg).1.abs() > epsilon)
        .collect();
    (g.regime, g.labels.clone(), g.clipped.clone(), den_sat)
}

/// Finite-difference Jacobian `dG_i/dr_j` with step `step` in ratio space.
///
/// Every probe re-gates the whole batch, so cross-trajectory entries come out
/// as exact zeros when the gate is trajectory-local.
pub fn gating_jacobian_fd(
    log_ratios_batch: &[Vec<f64>],
    config: &GatingConfig,
    step: f64,
) -> Result<FdJacobian> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::domain(format!("finite-difference step must be > 0, got {step}")));
    }
    let ratios: Vec<f64> = log_ratios_batch.iter().flatten().map(|y| y.exp()).collect();
    let owner: Vec<usize> = log_ratios_batch
        .iter()
        .enumerate()
        .flat_map(|(k, traj)| std::iter::repeat_n(k, traj.len()))
        .collect();
    let n = ratios.len();

    let eval = |r: &[f64]| -> Result<(Vec<f64>, Vec<GatedTrajectory>)> {
        let mut out = Vec::with_capacity(n);
        let mut gates = Vec::with_capacity(log_ratios_batch.len());
        let mut offset = 0;
        for traj in log_ratios_batch {
            let ys: Vec<f64> = r[offset..offset + traj.len()]
                .iter()
                .map(|x| x.ln())
                .collect();
            let g = gate_trajectory(&ys, config)?;
            out.extend_from_slice(&g.gated);
            gates.push(g);
            offset += traj.len();
        }
        Ok((out, gates))
    };

    let (_, base_gates) = eval(&ratios)?;
    let base_state: Vec<_> = base_gates.iter().map(|g| gate_state(g, config.epsilon)).collect();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut boundary_crossings = Vec::new();
    let mut probe = ratios.clone();
    for j in 0..n {
        if ratios[j] - step <= 0.0 {
            return Err(Error::domain("finite-difference step exceeds the ratio"));
        }
        probe[j] = ratios[j] + step;
        let (plus, gates_plus) = eval(&probe)?;
        probe[j] = ratios[j] - step;
        let (minus, gates_minus) = eval(&probe)?;
        probe[j] = ratios[j];

        let crossed = gates_plus
            .iter()
            .chain(&gates_minus)
            .zip(base_state.iter().chain(&base_state))
            .any(|(g, s)| gate_state(g, config.epsilon) != *s);
        if crossed {
            boundary_crossings.push(j);
        }
        for i in 0..n {
            matrix[i][j] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    Ok(FdJacobian {
        matrix,
        owner,
        boundary_crossings,
    })
}
