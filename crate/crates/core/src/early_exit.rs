//! Loss-aware early exit: EMA smoothing, windowed slope regression,
//! divergence/overfitting detectors with patience, warmup-boundary selection,
//! and rank-correlation metrics for judging how predictive warmup losses are.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::{JobStatus, LossTrajectory, Step};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("EMA alpha {0} outside (0, 1]")]
    BadAlpha(f64),
    #[error("non-finite loss value {0}")]
    NonFinite(f64),
    #[error("slope needs at least 2 points, got {0}")]
    InsufficientWindow(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("rank correlation needs at least 2 observations")]
    TooFewObservations,
    #[error("zero rank variance; correlation undefined")]
    ZeroVariance,
    #[error("invalid detector config: {0}")]
    BadConfig(String),
}

/// Exponential moving average step; the first value initialises the average.
pub fn ema_update(prev: Option<f64>, raw: f64, alpha: f64) -> Result<f64, DetectError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DetectError::BadAlpha(alpha));
    }
    if !raw.is_finite() {
        return Err(DetectError::NonFinite(raw));
    }
    Ok(match prev {
        None => raw,
        Some(p) => alpha * raw + (1.0 - alpha) * p,
    })
}

/// Least-squares slope of `points` against their index `0..len`.
pub fn linreg_slope(points: &[f64]) -> Result<f64, DetectError> {
    let n = points.len();
    if n < 2 {
        return Err(DetectError::InsufficientWindow(n));
    }
    let x_mean = (n - 1) as f64 / 2.0;
    let y_mean = points.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in points.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub alpha: f64,
    pub window: usize,
    pub tau_slope: f64,
    pub tau_gap: f64,
    pub patience_div: u32,
    pub patience_ovf: u32,
    pub warmup_ratio: f64,
    pub warmup_select_ratio: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            window: 2,
            tau_slope: 0.001,
            tau_gap: 0.1,
            patience_div: 2,
            patience_ovf: 2,
            warmup_ratio: 0.05,
            warmup_select_ratio: 0.25,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: &str| Err(DetectError::BadConfig(m.into()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(DetectError::BadAlpha(self.alpha));
        }
        if self.window < 2 {
            return bad("window must be >= 2");
        }
        if !self.tau_slope.is_finite() || !self.tau_gap.is_finite() {
            return bad("thresholds must be finite");
        }
        if self.patience_div == 0 || self.patience_ovf == 0 {
            return bad("patience must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(self.warmup_select_ratio > 0.0 && self.warmup_select_ratio <= 1.0) {
            return bad("warmup_select_ratio must lie in (0, 1]");
        }
        Ok(())
    }

    /// Number of training steps in the warmup stage.
    pub fn warmup_steps(&self, total_steps: Step) -> Step {
        ((self.warmup_ratio * total_steps as f64).ceil() as Step).min(total_steps)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub cnt_div: u32,
    pub cnt_ovf: u32,
    pub ema_last: Option<f64>,
    pub val_history: Vec<(Step, f64)>,
    pub ema_history: Vec<(Step, f64)>,
    /// Evaluations where the gap ratio was undefined (EMA train loss <= 0).
    pub undefined_gap: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitReason {
    Diverging,
    Overfitting,
    Underperforming,
}

impl ExitReason {
    pub const ALL: [ExitReason; 3] = [
        ExitReason::Diverging,
        ExitReason::Overfitting,
        ExitReason::Underperforming,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExitReason::Diverging => "diverging",
            ExitReason::Overfitting => "overfitting",
            ExitReason::Underperforming => "underperforming",
        }
    }

    pub fn status(self) -> JobStatus {
        match self {
            ExitReason::Diverging => JobStatus::ExitedDiverging,
            ExitReason::Overfitting => JobStatus::ExitedOverfitting,
            ExitReason::Underperforming => JobStatus::ExitedUnderperforming,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ExitDecision {
    Continue,
    Exit {
        reason: ExitReason,
        checkpoint_step: Option<Step>,
    },
}

impl ExitDecision {
    pub fn is_exit(&self) -> bool {
        matches!(self, ExitDecision::Exit { .. })
    }
}

fn tail(history: &[(Step, f64)], w: usize) -> Vec<f64> {
    history[history.len() - w..].iter().map(|p| p.1).collect()
}

/// Feeds one evaluation point into the detector.
///
/// `ema_train` is the smoothed train loss sampled at the evaluation step and
/// `val` the raw validation loss there. Divergence is checked first.
pub fn observe(
    state: &mut DetectorState,
    cfg: &DetectorConfig,
    ema_train: (Step, f64),
    val: (Step, f64),
) -> ExitDecision {
    state.ema_last = Some(ema_train.1);
    state.ema_history.push(ema_train);
    state.val_history.push(val);

    let w = cfg.window;
    if state.ema_history.len() >= w && state.val_history.len() >= w {
        let s_train = linreg_slope(&tail(&state.ema_history, w)).expect("w >= 2");
        let s_val = linreg_slope(&tail(&state.val_history, w)).expect("w >= 2");
        if s_train >= cfg.tau_slope && s_val >= cfg.tau_slope {
            state.cnt_div += 1;
        } else {
            state.cnt_div = 0;
        }
        if state.cnt_div >= cfg.patience_div {
            return ExitDecision::Exit {
                reason: ExitReason::Diverging,
                checkpoint_step: None,
            };
        }
    }

    let ema = ema_train.1;
    if ema > 0.0 {
        let gap = (val.1 - ema) / ema;
        if gap > cfg.tau_gap {
            state.cnt_ovf += 1;
        } else {
            state.cnt_ovf = 0;
        }
    } else {
        state.undefined_gap += 1;
        state.cnt_ovf = 0;
    }
    if state.cnt_ovf >= cfg.patience_ovf {
        let best = state
            .val_history
            .iter()
            .copied()
            .fold(None::<(Step, f64)>, |b, p| match b {
                Some((_, v)) if v <= p.1 => b,
                _ => Some(p),
            });
        return ExitDecision::Exit {
            reason: ExitReason::Overfitting,
            checkpoint_step: best.map(|b| b.0),
        };
    }
    ExitDecision::Continue
}

/// One detector decision at an evaluation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub step: Step,
    pub ema_train: f64,
    pub val: f64,
    pub cnt_div: u32,
    pub cnt_ovf: u32,
    pub decision: ExitDecision,
}

/// Runs the online detectors over every validation point of a trajectory,
/// stopping at the first exit. Validation points whose step has no train
/// loss recorded at or before it are skipped.
pub fn run_detector(traj: &LossTrajectory, cfg: &DetectorConfig) -> Vec<DecisionPoint> {
    let mut state = DetectorState::default();
    let mut out = Vec::new();
    let mut ema_idx = 0usize;
    for &(step, val) in &traj.val {
        while ema_idx < traj.train_ema.len() && traj.train_ema[ema_idx].0 <= step {
            ema_idx += 1;
        }
        if ema_idx == 0 {
            continue;
        }
        let ema = traj.train_ema[ema_idx - 1].1;
        let decision = observe(&mut state, cfg, (step, ema), (step, val));
        out.push(DecisionPoint {
            step,
            ema_train: ema,
            val,
            cnt_div: state.cnt_div,
            cnt_ovf: state.cnt_ovf,
            decision,
        });
        if decision.is_exit() {
            break;
        }
    }
    out
}

/// A job's standing at the warmup boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCandidate {
    pub job_id: u32,
    pub last_val: f64,
}

/// Keeps the best `ceil(ratio * n)` candidates by last validation loss.
///
/// Ties go to the lower job id. Returns `(kept, evicted)` job ids, kept in rank order.
pub fn warmup_select(survivors: &[WarmupCandidate], ratio: f64) -> (Vec<u32>, Vec<u32>) {
    if survivors.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let mut ranked = survivors.to_vec();
    ranked.sort_by(|a, b| {
        a.last_val
            .total_cmp(&b.last_val)
            .then(a.job_id.cmp(&b.job_id))
    });
    let k = ((ratio * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len());
    let kept = ranked[..k].iter().map(|c| c.job_id).collect();
    let evicted = ranked[k..].iter().map(|c| c.job_id).collect();
    (kept, evicted)
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho as the Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, DetectError> {
    if x.len() != y.len() {
        return Err(DetectError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(DetectError::TooFewObservations);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(DetectError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// A full-length run used for warmup reliability analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub job_id: u32,
    pub total_steps: Step,
    pub trajectory: LossTrajectory,
}

impl RunOutcome {
    /// Final outcome: best validation loss over the full run.
    pub fn final_best(&self) -> Option<f64> {
        self.trajectory.best_val().map(|b| b.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupMetrics {
    pub warmup_frac: f64,
    /// `None` when either ranking has zero variance.
    pub rho: Option<f64>,
    pub top_quartile_coverage: f64,
    pub best_in_top_quartile: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarmupReliability {
    pub metrics: Vec<WarmupMetrics>,
    /// Fractions skipped because some run had no validation point yet.
    pub skipped: Vec<f64>,
}

/// Indices of the `q` lowest values; ties go to the lower job id.
pub fn lowest_q(values: &[f64], ids: &[u32], q: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(ids[a].cmp(&ids[b])));
    idx.truncate(q);
    idx
}

pub fn warmup_reliability(runs: &[RunOutcome], warmup_fracs: &[f64]) -> WarmupReliability {
    let mut out = WarmupReliability::default();
    if runs.is_empty() {
        out.skipped = warmup_fracs.to_vec();
        return out;
    }
    let ids: Vec<u32> = runs.iter().map(|r| r.job_id).collect();
    let finals: Vec<f64> = runs
        .iter()
        .map(|r| r.final_best().unwrap_or(f64::INFINITY))
        .collect();
    let q = runs.len().div_ceil(4);
    let true_top = lowest_q(&finals, &ids, q);
    let true_best = true_top[0];

    for &f in warmup_fracs {
        let early: Option<Vec<f64>> = runs
            .iter()
            .map(|r| {
                let cutoff = (f * r.total_steps as f64).floor() as Step;
                r.trajectory.val_at_or_before(cutoff).map(|p| p.1)
            })
            .collect();
        let Some(early) = early else {
            out.skipped.push(f);
            continue;
        };
        let predicted = lowest_q(&early, &ids, q);
        let hits = predicted.iter().filter(|i| true_top.contains(i)).count();
        out.metrics.push(WarmupMetrics {
            warmup_frac: f,
            rho: spearman_rho(&early, &finals).ok(),
            top_quartile_coverage: hits as f64 / q as f64,
            best_in_top_quartile: predicted.contains(&true_best),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DetectorConfig {
        DetectorConfig::default()
    }

    #[test]
    fn ema_cases() {
        assert!((ema_update(Some(1.0), 0.0, 0.1).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(ema_update(Some(5.0), 3.0, 1.0).unwrap(), 3.0);
        assert_eq!(ema_update(None, 3.0, 0.3).unwrap(), 3.0);
        assert_eq!(
            ema_update(Some(1.0), 1.0, 0.0),
            Err(DetectError::BadAlpha(0.0))
        );
        assert_eq!(
            ema_update(Some(1.0), 1.0, 1.5),
            Err(DetectError::BadAlpha(1.5))
        );
        let mut e = None;
        for _ in 0..50 {
            e = Some(ema_update(e, 0.7, 0.37).unwrap());
            assert_eq!(e, Some(0.7));
        }
    }

    #[test]
    fn slope_cases() {
        assert_eq!(linreg_slope(&[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(linreg_slope(&[5.0; 4]).unwrap(), 0.0);
        assert!((linreg_slope(&[0.3, 1.1]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(
            linreg_slope(&[1.0]),
            Err(DetectError::InsufficientWindow(1))
        );
    }

    #[test]
    fn divergence_stream() {
        let c = DetectorConfig {
            window: 2,
            patience_div: 2,
            tau_slope: 0.001,
            ..cfg()
        };
        let mut st = DetectorState::default();
        let series = [1.0, 1.1, 1.2];
        let got: Vec<_> = series
            .iter()
            .enumerate()
            .map(|(i, &v)| observe(&mut st, &c, (i as Step, v), (i as Step, v)))
            .collect();
        assert_eq!(got[0], ExitDecision::Continue);
        assert_eq!(got[1], ExitDecision::Continue);
        assert_eq!(
            got[2],
            ExitDecision::Exit {
                reason: ExitReason::Diverging,
                checkpoint_step: None
            }
        );
    }

    #[test]
    fn overfitting_stream() {
        let c = DetectorConfig {
            tau_gap: 0.1,
            patience_ovf: 2,
            ..cfg()
        };
        let mut st = DetectorState::default();
        let vals = [1.05, 1.15, 1.2];
        let got: Vec<_> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| observe(&mut st, &c, (i as Step * 10, 1.0), (i as Step * 10, v)))
            .collect();
        assert_eq!(got[0], ExitDecision::Continue);
        assert_eq!(got[1], ExitDecision::Continue);
        assert_eq!(st.cnt_ovf, 2);
        assert_eq!(
            got[2],
            ExitDecision::Exit {
                reason: ExitReason::Overfitting,
                checkpoint_step: Some(0)
            }
        );
    }

    #[test]
    fn rising_then_flat_resets() {
        let c = cfg();
        let mut st = DetectorState::default();
        let series = [1.0, 1.1, 1.1, 1.1];
        for (i, &v) in series.iter().enumerate() {
            let d = observe(&mut st, &c, (i as Step, v), (i as Step, v));
            assert_eq!(d, ExitDecision::Continue);
            if i == 1 {
                assert_eq!(st.cnt_div, 1);
            }
            if i >= 2 {
                assert_eq!(st.cnt_div, 0);
            }
        }
    }

    #[test]
    fn undefined_gap_is_flagged() {
        let mut st = DetectorState::default();
        let d = observe(&mut st, &cfg(), (0, 0.0), (0, 1.0));
        assert_eq!(d, ExitDecision::Continue);
        assert_eq!(st.undefined_gap, 1);
        assert_eq!(st.cnt_ovf, 0);
    }

    #[test]
    fn warmup_select_cases() {
        let cands: Vec<_> = (0..60)
            .map(|i| WarmupCandidate {
                job_id: i,
                last_val: 1.0 + i as f64,
            })
            .collect();
        let (kept, evicted) = warmup_select(&cands, 0.25);
        assert_eq!(kept.len(), 15);
        assert_eq!(evicted.len(), 45);

        let one = [WarmupCandidate {
            job_id: 3,
            last_val: 1.0,
        }];
        assert_eq!(warmup_select(&one, 0.25).0, vec![3]);

        let four: Vec<_> = [0.5, 0.4, 0.4, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &v)| WarmupCandidate {
                job_id: i as u32,
                last_val: v,
            })
            .collect();
        assert_eq!(warmup_select(&four, 0.5).0, vec![1, 2]);
        assert_eq!(warmup_select(&[], 0.5), (vec![], vec![]));
    }

    #[test]
    fn spearman_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let r = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rho(&a, &r).unwrap() + 1.0).abs() < 1e-15);
        let y = [1.0, 3.0, 2.0, 4.0];
        assert!((spearman_rho(&a, &y).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            spearman_rho(&a, &y[..3]),
            Err(DetectError::LengthMismatch(4, 3))
        ));
        assert_eq!(spearman_rho(&a, &[1.0; 4]), Err(DetectError::ZeroVariance));
    }

    #[test]
    fn spearman_ties_use_average_rank() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn config_defaults_validate() {
        cfg().validate().unwrap();
        assert_eq!(cfg().warmup_steps(400), 20);
        assert!(DetectorConfig { window: 1, ..cfg() }.validate().is_err());
    }
}
