//! Change detectors comparing an existing signature with a recomputed one.
//!
//! Every detector implements [`Detector`] and is constructed by name
//! through a [`DetectorRegistry`]. The built-in registry knows:
//!
//! - `sw`: sliding-window detector (no prior noise knowledge)
//! - `snr`: signal-to-noise detector (needs a learned [`NoiseProfile`])
//! - `cusum`: two-sided CUSUM control chart baseline

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Signature;
use crate::noisegen::{self, NoiseKind, NoiseProfile, Snr};
use crate::similarity::{pcc, rmse};
use crate::stats;

pub const DEFAULT_PCC_THRESHOLD: f64 = 0.60;
pub const DEFAULT_RMSE_THRESHOLD: f64 = 0.20;
pub const DEFAULT_ATTENUATION_CEILING: f64 = 0.50;
pub const DEFAULT_WINDOW: usize = 6;
pub const DEFAULT_CUSUM_SLACK: f64 = 0.5;
pub const DEFAULT_CUSUM_INTERVAL: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorThresholds {
    /// PCC similarity threshold `S^P`.
    pub s_p: f64,
    /// RMSE distance threshold `S^R`.
    pub s_r: f64,
    /// RMSE ceiling under which a same-shape difference is attenuation.
    pub t_d: f64,
    /// Sliding window length `W`.
    pub window: usize,
}

impl Default for DetectorThresholds {
    fn default() -> Self {
        Self {
            s_p: DEFAULT_PCC_THRESHOLD,
            s_r: DEFAULT_RMSE_THRESHOLD,
            t_d: DEFAULT_ATTENUATION_CEILING,
            window: DEFAULT_WINDOW,
        }
    }
}

impl DetectorThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_p > -1.0 && self.s_p <= 1.0) {
            return Err(Error::invalid(format!("s_p = {} not in (-1, 1]", self.s_p)));
        }
        if !(self.s_r >= 0.0) {
            return Err(Error::invalid(format!("s_r = {} must be ≥ 0", self.s_r)));
        }
        if !(self.t_d >= self.s_r) {
            return Err(Error::invalid(format!(
                "t_d = {} must be ≥ s_r = {}",
                self.t_d, self.s_r
            )));
        }
        if self.window == 0 {
            return Err(Error::invalid("window must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumParams {
    /// Slack `k`, in standard deviations.
    pub k: f64,
    /// Decision interval `h`.
    pub h: f64,
}

impl Default for CusumParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_CUSUM_SLACK,
            h: DEFAULT_CUSUM_INTERVAL,
        }
    }
}

/// How the SNR detector compares current and baseline noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrMode {
    /// Change if any segment's current SNR is below its baseline.
    #[default]
    PerSegment,
    /// Change if the whole-period SNR is below the lowest baseline segment.
    Aggregate,
}

impl std::str::FromStr for SnrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_segment" | "per-segment" => Ok(Self::PerSegment),
            "aggregate" => Ok(Self::Aggregate),
            other => Err(Error::invalid(format!("unknown SNR mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Change,
    Noise(NoiseKind),
    NoChange,
}

impl Verdict {
    pub fn is_change(self) -> bool {
        matches!(self, Verdict::Change)
    }

    fn tag(self) -> VerdictTag {
        match self {
            Verdict::Change => VerdictTag::Change,
            Verdict::Noise(_) => VerdictTag::Noise,
            Verdict::NoChange => VerdictTag::NoChange,
        }
    }

    fn noise_kind(self) -> Option<NoiseKind> {
        match self {
            Verdict::Noise(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Change => f.write_str("change"),
            Verdict::Noise(k) => write!(f, "noise({k})"),
            Verdict::NoChange => f.write_str("no_change"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum VerdictTag {
    Change,
    Noise,
    NoChange,
}

/// Quantities a detector computed on the deciding row. Absent fields were
/// not computed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_window_pcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub removed_window_start: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr_current: Option<Snr>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr_baseline: Option<Snr>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub segment: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cusum_upper_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cusum_lower_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alarm_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOutcome {
    pub parameter: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "OutcomeJson", try_from = "OutcomeJson")]
pub struct DetectionOutcome {
    pub verdict: Verdict,
    pub diagnostics: Diagnostics,
    /// Per-row verdicts for multi-row signatures; empty for one row.
    pub rows: Vec<RowOutcome>,
}

#[derive(Serialize, Deserialize)]
struct OutcomeJson {
    verdict: VerdictTag,
    noise_kind: Option<NoiseKind>,
    diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    rows: Vec<RowJson>,
}

#[derive(Serialize, Deserialize)]
struct RowJson {
    parameter: String,
    verdict: VerdictTag,
    noise_kind: Option<NoiseKind>,
}

fn verdict_from(tag: VerdictTag, kind: Option<NoiseKind>) -> std::result::Result<Verdict, String> {
    match (tag, kind) {
        (VerdictTag::Change, None) => Ok(Verdict::Change),
        (VerdictTag::NoChange, None) => Ok(Verdict::NoChange),
        (VerdictTag::Noise, Some(k)) => Ok(Verdict::Noise(k)),
        (VerdictTag::Noise, None) => Err("noise verdict without noise_kind".into()),
        (_, Some(_)) => Err("noise_kind given for a non-noise verdict".into()),
    }
}

impl From<DetectionOutcome> for OutcomeJson {
    fn from(o: DetectionOutcome) -> Self {
        OutcomeJson {
            verdict: o.verdict.tag(),
            noise_kind: o.verdict.noise_kind(),
            diagnostics: o.diagnostics,
            rows: o
                .rows
                .into_iter()
                .map(|r| RowJson {
                    parameter: r.parameter,
                    verdict: r.verdict.tag(),
                    noise_kind: r.verdict.noise_kind(),
                })
                .collect(),
        }
    }
}

impl TryFrom<OutcomeJson> for DetectionOutcome {
    type Error = String;

    fn try_from(j: OutcomeJson) -> std::result::Result<Self, String> {
        Ok(DetectionOutcome {
            verdict: verdict_from(j.verdict, j.noise_kind)?,
            diagnostics: j.diagnostics,
            rows: j
                .rows
                .into_iter()
                .map(|r| {
                    Ok(RowOutcome {
                        parameter: r.parameter,
                        verdict: verdict_from(r.verdict, r.noise_kind)?,
                    })
                })
                .collect::<std::result::Result<_, String>>()?,
        })
    }
}

impl DetectionOutcome {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("outcome serializes")
    }

    /// Combines per-row results: any Change wins, then the first Noise
    /// row, else NoChange. Diagnostics come from the deciding row.
    fn aggregate(sig: &Signature, per_row: Vec<(Verdict, Diagnostics)>) -> Self {
        let pick = per_row
            .iter()
            .position(|(v, _)| v.is_change())
            .or_else(|| per_row.iter().position(|(v, _)| matches!(v, Verdict::Noise(_))))
            .unwrap_or(0);
        let verdict = per_row[pick].0;
        let diagnostics = per_row[pick].1.clone();
        let rows = if per_row.len() > 1 {
            sig.rows()
                .iter()
                .zip(&per_row)
                .map(|(r, (v, _))| RowOutcome {
                    parameter: r.parameter.clone(),
                    verdict: *v,
                })
                .collect()
        } else {
            Vec::new()
        };
        DetectionOutcome {
            verdict,
            diagnostics,
            rows,
        }
    }
}

/// Extra inputs some detectors need.
#[derive(Debug, Clone, Copy, Default)]
pub struct DetectionContext<'a> {
    pub noise_profile: Option<&'a NoiseProfile>,
}

impl<'a> DetectionContext<'a> {
    pub fn with_profile(profile: &'a NoiseProfile) -> Self {
        Self {
            noise_profile: Some(profile),
        }
    }
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// Whether [`DetectionContext::noise_profile`] must be supplied.
    fn needs_noise_profile(&self) -> bool {
        false
    }

    fn detect(
        &self,
        existing: &Signature,
        recomputed: &Signature,
        ctx: &DetectionContext<'_>,
    ) -> Result<DetectionOutcome>;
}

/// Settings every built-in detector factory draws from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub thresholds: DetectorThresholds,
    pub cusum: CusumParams,
    pub snr_mode: SnrMode,
}

pub type DetectorFactory = fn(&DetectorSettings) -> Result<Box<dyn Detector>>;

/// Detector constructors keyed by name.
#[derive(Clone)]
pub struct DetectorRegistry {
    factories: BTreeMap<String, DetectorFactory>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        let mut registry = Self::empty();
        registry.register("sw", |s| Ok(Box::new(SlidingWindowDetector::new(s.thresholds)?)));
        registry.register("snr", |s| Ok(Box::new(SnrDetector { mode: s.snr_mode })));
        registry.register("cusum", |s| Ok(Box::new(CusumDetector { params: s.cusum })));
        registry
    }
}

impl DetectorRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registers (or replaces) a factory under `name`.
    pub fn register(&mut self, name: impl Into<String>, factory: DetectorFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, settings: &DetectorSettings) -> Result<Box<dyn Detector>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownDetector {
            name: name.to_string(),
            available: self.names().collect::<Vec<_>>().join(", "),
        })?;
        factory(settings)
    }
}

/// Sliding-window detector.
#[derive(Debug, Clone)]
pub struct SlidingWindowDetector {
    thresholds: DetectorThresholds,
}

impl SlidingWindowDetector {
    pub fn new(thresholds: DetectorThresholds) -> Result<Self> {
        thresholds.validate()?;
        Ok(Self { thresholds })
    }

    fn detect_row(&self, existing: &[f64], recomputed: &[f64]) -> Result<(Verdict, Diagnostics)> {
        let th = &self.thresholds;
        let p = pcc(existing, recomputed)?;
        let r = rmse(existing, recomputed)?;
        let mut diag = Diagnostics {
            pcc: Some(p),
            rmse: Some(r),
            ..Diagnostics::default()
        };
        if p >= th.s_p && r <= th.s_r {
            return Ok((Verdict::NoChange, diag));
        }
        if p >= th.s_p && r <= th.t_d {
            return Ok((Verdict::Noise(NoiseKind::Attenuation), diag));
        }
        if let Some((start, best)) = best_window_deletion(existing, recomputed, th.window) {
            diag.best_window_pcc = Some(best);
            diag.removed_window_start = Some(start);
            if best >= th.s_p {
                return Ok((Verdict::Noise(NoiseKind::Spike), diag));
            }
        }
        Ok((Verdict::Change, diag))
    }
}

impl Detector for SlidingWindowDetector {
    fn name(&self) -> &str {
        "sw"
    }

    fn detect(
        &self,
        existing: &Signature,
        recomputed: &Signature,
        _ctx: &DetectionContext<'_>,
    ) -> Result<DetectionOutcome> {
        existing.check_same_shape(recomputed)?;
        if self.thresholds.window >= existing.len() {
            return Err(Error::invalid(format!(
                "window {} must be shorter than the grid ({})",
                self.thresholds.window,
                existing.len()
            )));
        }
        let per_row = existing
            .rows()
            .iter()
            .zip(recomputed.rows())
            .map(|(e, r)| self.detect_row(&e.values, &r.values))
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectionOutcome::aggregate(existing, per_row))
    }
}

/// Scans every window `[w, w + window)` and returns the start and PCC of
/// the deletion that leaves the most correlated remainder. Deletions that
/// leave fewer than two points or a constant remainder are skipped.
///
/// Runs in O(n) using window sums over mean-centred data.
pub fn best_window_deletion(a: &[f64], b: &[f64], window: usize) -> Option<(usize, f64)> {
    let n = a.len();
    if window >= n || n - window < 2 {
        return None;
    }
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let x: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let y: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let total = Sums::over(&x, &y, 0..n);
    let mut win = Sums::over(&x, &y, 0..window);
    let kept = (n - window) as f64;
    let mut best: Option<(usize, f64)> = None;
    for start in 0..=n - window {
        if start > 0 {
            win.remove(x[start - 1], y[start - 1]);
            win.add(x[start + window - 1], y[start + window - 1]);
        }
        let s = total.minus(&win);
        let sxy = s.xy - s.x * s.y / kept;
        let sxx = s.xx - s.x * s.x / kept;
        let syy = s.yy - s.y * s.y / kept;
        if sxx <= 0.0 || syy <= 0.0 {
            continue;
        }
        let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((start, r));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    x: f64,
    y: f64,
    xx: f64,
    yy: f64,
    xy: f64,
}

impl Sums {
    fn over(x: &[f64], y: &[f64], range: std::ops::Range<usize>) -> Self {
        let mut s = Sums::default();
        for i in range {
            s.add(x[i], y[i]);
        }
        s
    }

    fn add(&mut self, x: f64, y: f64) {
        self.x += x;
        self.y += y;
        self.xx += x * x;
        self.yy += y * y;
        self.xy += x * y;
    }

    fn remove(&mut self, x: f64, y: f64) {
        self.x -= x;
        self.y -= y;
        self.xx -= x * x;
        self.yy -= y * y;
        self.xy -= x * y;
    }

    fn minus(&self, o: &Sums) -> Sums {
        Sums {
            x: self.x - o.x,
            y: self.y - o.y,
            xx: self.xx - o.xx,
            yy: self.yy - o.yy,
            xy: self.xy - o.xy,
        }
    }
}

/// SNR-based detector: a change is declared when the current noise level
/// exceeds the learned baseline, i.e. the current SNR drops below it.
#[derive(Debug, Clone, Default)]
pub struct SnrDetector {
    pub mode: SnrMode,
}

impl Detector for SnrDetector {
    fn name(&self) -> &str {
        "snr"
    }

    fn needs_noise_profile(&self) -> bool {
        true
    }

    fn detect(
        &self,
        existing: &Signature,
        recomputed: &Signature,
        ctx: &DetectionContext<'_>,
    ) -> Result<DetectionOutcome> {
        let profile = ctx
            .noise_profile
            .ok_or_else(|| Error::invalid("the snr detector requires a noise profile"))?;
        let d = profile.segments();
        let current = noisegen::segment_snrs(existing, recomputed, d)?;
        if current.segment_length != profile.segment_length {
            return Err(Error::Alignment(format!(
                "profile segments have length {}, grid of {} split {d} ways gives {}",
                profile.segment_length,
                existing.len(),
                current.segment_length
            )));
        }
        let (verdict, diagnostics) = match self.mode {
            SnrMode::PerSegment => {
                // report the violating segment, or the tightest one
                let mut worst: Option<(usize, f64)> = None;
                let mut violation = None;
                for (i, (cur, base)) in current.segment_snrs.iter().zip(&profile.segment_snrs).enumerate() {
                    if cur < base && violation.is_none() {
                        violation = Some(i);
                    }
                    if let (Some(c), Some(b)) = (cur.db(), base.db()) {
                        if worst.is_none_or(|(_, m)| c - b < m) {
                            worst = Some((i, c - b));
                        }
                    }
                }
                let seg = violation.or(worst.map(|(i, _)| i)).unwrap_or(0);
                let diag = Diagnostics {
                    snr_current: Some(current.segment_snrs[seg]),
                    snr_baseline: Some(profile.segment_snrs[seg]),
                    segment: Some(seg),
                    ..Diagnostics::default()
                };
                let verdict = if violation.is_some() {
                    Verdict::Change
                } else {
                    Verdict::NoChange
                };
                (verdict, diag)
            }
            SnrMode::Aggregate => {
                let whole = noisegen::segment_snrs(existing, recomputed, 1)?.segment_snrs[0];
                let floor = profile.segment_snrs.iter().copied().fold(Snr::Infinite, Snr::min);
                let verdict = if whole < floor {
                    Verdict::Change
                } else {
                    Verdict::NoChange
                };
                let diag = Diagnostics {
                    snr_current: Some(whole),
                    snr_baseline: Some(floor),
                    ..Diagnostics::default()
                };
                (verdict, diag)
            }
        };
        Ok(DetectionOutcome {
            verdict,
            diagnostics,
            rows: Vec::new(),
        })
    }
}

/// Two-sided CUSUM over residuals standardized by the existing row's
/// standard deviation.
#[derive(Debug, Clone, Default)]
pub struct CusumDetector {
    pub params: CusumParams,
}

impl CusumDetector {
    fn detect_row(&self, existing: &[f64], recomputed: &[f64]) -> Result<(Verdict, Diagnostics)> {
        let std = stats::std_dev(existing);
        if std == 0.0 {
            return Err(Error::ConstantSeries("existing".into()));
        }
        let CusumParams { k, h } = self.params;
        let (mut upper, mut lower) = (0.0f64, 0.0f64);
        let (mut upper_max, mut lower_max) = (0.0f64, 0.0f64);
        let mut alarm = None;
        for (t, (e, r)) in existing.iter().zip(recomputed).enumerate() {
            let z = (r - e) / std;
            upper = (upper + z - k).max(0.0);
            lower = (lower - z - k).max(0.0);
            upper_max = upper_max.max(upper);
            lower_max = lower_max.max(lower);
            if alarm.is_none() && (upper > h || lower > h) {
                alarm = Some(t);
            }
        }
        let diag = Diagnostics {
            cusum_upper_max: Some(upper_max),
            cusum_lower_max: Some(lower_max),
            alarm_index: alarm,
            ..Diagnostics::default()
        };
        let verdict = if alarm.is_some() {
            Verdict::Change
        } else {
            Verdict::NoChange
        };
        Ok((verdict, diag))
    }
}

impl Detector for CusumDetector {
    fn name(&self) -> &str {
        "cusum"
    }

    fn detect(
        &self,
        existing: &Signature,
        recomputed: &Signature,
        _ctx: &DetectionContext<'_>,
    ) -> Result<DetectionOutcome> {
        existing.check_same_shape(recomputed)?;
        let per_row = existing
            .rows()
            .iter()
            .zip(recomputed.rows())
            .map(|(e, r)| self.detect_row(&e.values, &r.values))
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectionOutcome::aggregate(existing, per_row))
    }
}

pub fn sliding_window_detect(
    existing: &Signature,
    recomputed: &Signature,
    th: &DetectorThresholds,
) -> Result<DetectionOutcome> {
    SlidingWindowDetector::new(*th)?.detect(existing, recomputed, &DetectionContext::default())
}

pub fn snr_detect(existing: &Signature, recomputed: &Signature, profile: &NoiseProfile) -> Result<DetectionOutcome> {
    SnrDetector::default().detect(existing, recomputed, &DetectionContext::with_profile(profile))
}

pub fn cusum_detect(existing: &Signature, recomputed: &Signature, k: f64, h: f64) -> Result<DetectionOutcome> {
    CusumDetector {
        params: CusumParams { k, h },
    }
    .detect(existing, recomputed, &DetectionContext::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{QosSeries, TimeGrid};
    use crate::noisegen::{inject, NoiseSpec};
    use crate::seed;
    use rand::Rng;

    fn signature(len: usize, level: f64, seed: u64) -> Signature {
        let mut rng = seed::rng(seed);
        let raw: Vec<f64> = (0..len)
            .map(|t| level + (t as f64 / 30.0).sin() + 0.5 * (t as f64 / 7.0).cos() + rng.random_range(-0.2..0.2))
            .collect();
        Signature::from_raw(
            "p",
            TimeGrid::days(len).unwrap(),
            vec![QosSeries::new("tp", raw).unwrap()],
        )
        .unwrap()
    }

    fn brute_force_best(a: &[f64], b: &[f64], w: usize) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for start in 0..=a.len() - w {
            let ka: Vec<f64> = a
                .iter()
                .enumerate()
                .filter(|(i, _)| *i < start || *i >= start + w)
                .map(|(_, v)| *v)
                .collect();
            let kb: Vec<f64> = b
                .iter()
                .enumerate()
                .filter(|(i, _)| *i < start || *i >= start + w)
                .map(|(_, v)| *v)
                .collect();
            if let Ok(r) = pcc(&ka, &kb) {
                if best.is_none_or(|(_, v)| r > v) {
                    best = Some((start, r));
                }
            }
        }
        best
    }

    #[test]
    fn identical_is_no_change_for_all_detectors() {
        let s = signature(360, 0.0, 1);
        let sw = sliding_window_detect(&s, &s, &DetectorThresholds::default()).unwrap();
        assert_eq!(sw.verdict, Verdict::NoChange);
        assert_eq!(sw.diagnostics.pcc, Some(1.0));
        assert_eq!(sw.diagnostics.rmse, Some(0.0));

        let profile = noisegen::segment_snrs(&s, &s, 12).unwrap();
        assert_eq!(snr_detect(&s, &s, &profile).unwrap().verdict, Verdict::NoChange);

        let c = cusum_detect(&s, &s, 0.5, 5.0).unwrap();
        assert_eq!(c.verdict, Verdict::NoChange);
        assert_eq!(c.diagnostics.cusum_upper_max, Some(0.0));
        assert_eq!(c.diagnostics.cusum_lower_max, Some(0.0));
    }

    #[test]
    fn attenuation_branch() {
        // zero-mean signature so that rms == 1 and rmse of 0.8x is 0.2
        let s = signature(360, 0.0, 2)
            .map_rows(|_, v| {
                let m = stats::mean(v);
                v.iter().map(|x| x - m).collect()
            })
            .unwrap();
        let rms = stats::mean_square(&s.rows()[0].values).sqrt();
        let att = inject(&s, &NoiseSpec::Attenuation { factor: 0.7 }, 0).unwrap();
        let out = sliding_window_detect(&s, &att, &DetectorThresholds::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Noise(NoiseKind::Attenuation));
        assert!((out.diagnostics.pcc.unwrap() - 1.0).abs() < 1e-12);
        assert!((out.diagnostics.rmse.unwrap() - 0.3 * rms).abs() < 1e-12);
    }

    #[test]
    fn spike_found_by_scan() {
        let s = signature(360, 0.0, 3);
        let spike = NoiseSpec::Spike {
            position: 200,
            width: 3,
            magnitude: 25.0,
        };
        let noisy = inject(&s, &spike, 0).unwrap();
        let p = pcc(&s.rows()[0].values, &noisy.rows()[0].values).unwrap();
        assert!(p < 0.6, "spike should break the shape, pcc {p}");
        let out = sliding_window_detect(&s, &noisy, &DetectorThresholds::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Noise(NoiseKind::Spike));
        let start = out.diagnostics.removed_window_start.unwrap();
        assert!(
            start <= 200 && start + 6 >= 203,
            "window {start} does not cover the spike"
        );
        // starts 197..=200 all remove the whole spike and tie up to rounding
        let (_, bf) = brute_force_best(&s.rows()[0].values, &noisy.rows()[0].values, 6).unwrap();
        assert!((out.diagnostics.best_window_pcc.unwrap() - bf).abs() < 1e-9);
    }

    #[test]
    fn spliced_segment_is_change() {
        let s = signature(360, 0.0, 4);
        let donor = signature(360, 0.0, 99)
            .map_rows(|_, v| v.iter().rev().map(|x| x * 3.0).collect())
            .unwrap();
        let spliced = s
            .map_rows(|_, v| {
                let mut out = v.to_vec();
                out[100..190].copy_from_slice(&donor.rows()[0].values[100..190]);
                out
            })
            .unwrap();
        let out = sliding_window_detect(&s, &spliced, &DetectorThresholds::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Change, "{out:?}");
        assert!(out.diagnostics.best_window_pcc.unwrap() < 0.6);
    }

    #[test]
    fn window_must_fit() {
        let s = signature(6, 0.0, 5);
        assert!(sliding_window_detect(&s, &s, &DetectorThresholds::default()).is_err());
        let bad = DetectorThresholds {
            t_d: 0.1,
            ..Default::default()
        };
        assert!(SlidingWindowDetector::new(bad).is_err());
    }

    #[test]
    fn snr_detector_examples() {
        let s = signature(360, 5.0, 6);
        let d = 12;
        let seg = 30;
        // baseline: residual of constant power in every segment
        let noise_at = |scale: f64, only: Option<usize>| {
            s.map_rows(|_, v| {
                v.iter()
                    .enumerate()
                    .map(|(t, x)| {
                        let on = only.is_none_or(|k| t / seg == k);
                        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                        if on {
                            x - scale * sign
                        } else {
                            *x
                        }
                    })
                    .collect()
            })
            .unwrap()
        };
        let baseline_rec = noise_at(0.5, None);
        let profile = noisegen::segment_snrs(&s, &baseline_rec, d).unwrap();

        // same residual -> equal SNR -> strict comparison says no change
        let same = snr_detect(&s, &baseline_rec, &profile).unwrap();
        assert_eq!(same.verdict, Verdict::NoChange);

        // doubling noise power (amplitude * sqrt 2) in one segment halves its ratio
        let worse = noise_at(0.5 * 2f64.sqrt(), Some(7));
        let mixed = s
            .map_rows(|i, v| {
                (0..v.len())
                    .map(|t| {
                        if t / seg == 7 {
                            worse.rows()[i].values[t]
                        } else {
                            baseline_rec.rows()[i].values[t]
                        }
                    })
                    .collect()
            })
            .unwrap();
        let out = snr_detect(&s, &mixed, &profile).unwrap();
        assert_eq!(out.verdict, Verdict::Change);
        assert_eq!(out.diagnostics.segment, Some(7));
        let cur = out.diagnostics.snr_current.unwrap().ratio().unwrap();
        let base = out.diagnostics.snr_baseline.unwrap().ratio().unwrap();
        assert!((cur / base - 0.5).abs() < 1e-9, "{cur} / {base}");

        let clean = snr_detect(&s, &s, &profile).unwrap();
        assert_eq!(clean.verdict, Verdict::NoChange);
        assert!(clean.diagnostics.snr_current.unwrap().is_infinite());

        let wrong = NoiseProfile::new(vec![noisegen::Snr::Ratio(1.0); 7], 30).unwrap();
        assert!(snr_detect(&s, &s, &wrong).is_err());
        let missing = SnrDetector::default().detect(&s, &s, &DetectionContext::default());
        assert!(missing.is_err());
    }

    #[test]
    fn snr_aggregate_mode() {
        let s = signature(360, 5.0, 7);
        let noisy = inject(&s, &NoiseSpec::Distortion { target_snr_db: 20.0 }, 1).unwrap();
        let profile = noisegen::segment_snrs(&s, &noisy, 12).unwrap();
        let det = SnrDetector {
            mode: SnrMode::Aggregate,
        };
        let out = det
            .detect(&s, &noisy, &DetectionContext::with_profile(&profile))
            .unwrap();
        assert_eq!(out.verdict, Verdict::NoChange);
        let louder = inject(&s, &NoiseSpec::Distortion { target_snr_db: 5.0 }, 1).unwrap();
        let out = det
            .detect(&s, &louder, &DetectionContext::with_profile(&profile))
            .unwrap();
        assert_eq!(out.verdict, Verdict::Change);
    }

    #[test]
    fn cusum_step_alarms_quickly() {
        let s = signature(360, 0.0, 8);
        let std = stats::std_dev(&s.rows()[0].values);
        let stepped = s
            .map_rows(|_, v| {
                v.iter()
                    .enumerate()
                    .map(|(t, x)| if t >= 180 { x + 2.0 * std } else { *x })
                    .collect()
            })
            .unwrap();
        let out = cusum_detect(&s, &stepped, 0.5, 5.0).unwrap();
        assert_eq!(out.verdict, Verdict::Change);
        // drift 1.5 per step crosses 5 on the 4th step
        assert_eq!(out.diagnostics.alarm_index, Some(183));
    }

    #[test]
    fn cusum_cannot_discount_spike() {
        let s = signature(360, 0.0, 9);
        let noisy = inject(&s, &NoiseSpec::spike(50), 0).unwrap();
        let out = cusum_detect(&s, &noisy, 0.5, 5.0).unwrap();
        assert_eq!(out.verdict, Verdict::Change);
        assert!((out.diagnostics.cusum_upper_max.unwrap() - 13.5).abs() < 1e-9);
    }

    #[test]
    fn multi_row_any_change_wins() {
        let a = signature(120, 0.0, 10);
        let b = signature(120, 0.0, 11);
        let rows = vec![
            a.rows()[0].clone(),
            QosSeries {
                parameter: "lat".into(),
                ..b.rows()[0].clone()
            },
        ];
        let two = Signature::new("p", a.grid().clone(), rows).unwrap();
        let broken = two
            .map_rows(|i, v| {
                if i == 1 {
                    v.iter().rev().copied().collect()
                } else {
                    v.to_vec()
                }
            })
            .unwrap();
        let out = sliding_window_detect(&two, &broken, &DetectorThresholds::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Change);
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[0].verdict, Verdict::NoChange);
        assert_eq!(out.rows[1].verdict, Verdict::Change);
    }

    #[test]
    fn outcome_json_shape() {
        let o = DetectionOutcome {
            verdict: Verdict::Noise(NoiseKind::Spike),
            diagnostics: Diagnostics {
                pcc: Some(0.5),
                removed_window_start: Some(4),
                ..Default::default()
            },
            rows: vec![],
        };
        let json = o.to_json();
        assert_eq!(
            json,
            r#"{"verdict":"noise","noise_kind":"spike","diagnostics":{"pcc":0.5,"removed_window_start":4}}"#
        );
        let back: DetectionOutcome = serde_json::from_str(&json).unwrap();
        assert_eq!(back, o);
        let nc = DetectionOutcome {
            verdict: Verdict::NoChange,
            diagnostics: Diagnostics::default(),
            rows: vec![],
        };
        assert_eq!(
            nc.to_json(),
            r#"{"verdict":"no_change","noise_kind":null,"diagnostics":{}}"#
        );
        assert!(
            serde_json::from_str::<DetectionOutcome>(r#"{"verdict":"noise","noise_kind":null,"diagnostics":{}}"#)
                .is_err()
        );
    }

    #[test]
    fn registry_lookup() {
        let reg = DetectorRegistry::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["cusum", "snr", "sw"]);
        let settings = DetectorSettings::default();
        for name in ["sw", "snr", "cusum"] {
            assert_eq!(reg.build(name, &settings).unwrap().name(), name);
        }
        assert!(reg.build("snr", &settings).unwrap().needs_noise_profile());
        let err = reg.build("bocpd", &settings).err().unwrap();
        assert!(err.to_string().contains("cusum, snr, sw"), "{err}");

        let mut custom = DetectorRegistry::empty();
        custom.register("always", |_| {
            Ok(Box::new(CusumDetector {
                params: CusumParams { k: 0.0, h: -1.0 },
            }))
        });
        assert!(custom.contains("always") && !custom.contains("sw"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn scan_matches_brute_force(seed in any::<u64>(), len in 12usize..200, w in 1usize..10, pos in 0usize..190, mag in -20.0f64..20.0) {
                prop_assume!(w < len && pos + 3 <= len);
                let s = signature(len, 3.0, seed);
                let noisy = inject(&s, &NoiseSpec::Spike { position: pos, width: 3, magnitude: mag }, 0).unwrap();
                let (a, b) = (&s.rows()[0].values, &noisy.rows()[0].values);
                let fast = best_window_deletion(a, b, w);
                let slow = brute_force_best(a, b, w);
                prop_assert_eq!(fast.is_some(), slow.is_some());
                if let (Some((fs, fv)), Some((_, sv))) = (fast, slow) {
                    prop_assert!((fv - sv).abs() < 1e-9, "{} vs {}", fv, sv);
                    let (ka, kb): (Vec<f64>, Vec<f64>) = a.iter().zip(b).enumerate()
                        .filter(|(i, _)| *i < fs || *i >= fs + w).map(|(_, (x, y))| (*x, *y)).unzip();
                    prop_assert!((pcc(&ka, &kb).unwrap() - sv).abs() < 1e-9);
                }
            }

            #[test]
            fn sw_no_change_on_identity(seed in any::<u64>(), s_p in -0.99f64..1.0, s_r in 0.0f64..1.0, extra in 0.0f64..1.0, w in 1usize..20) {
                let s = signature(100, 2.0, seed);
                let th = DetectorThresholds { s_p, s_r, t_d: s_r + extra, window: w };
                prop_assert_eq!(sliding_window_detect(&s, &s, &th).unwrap().verdict, Verdict::NoChange);
            }

            #[test]
            fn snr_verdict_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0, db in 5.0f64..30.0) {
                let s = signature(360, 4.0, seed);
                let monitor = inject(&s, &NoiseSpec::Distortion { target_snr_db: 20.0 }, seed ^ 1).unwrap();
                let current = inject(&s, &NoiseSpec::Distortion { target_snr_db: db }, seed ^ 2).unwrap();
                let profile = noisegen::segment_snrs(&s, &monitor, 12).unwrap();
                let v = snr_detect(&s, &current, &profile).unwrap().verdict;

                let scale = |x: &Signature| x.map_rows(|_, v| v.iter().map(|y| y * alpha).collect()).unwrap();
                let (s2, m2, c2) = (scale(&s), scale(&monitor), scale(&current));
                let p2 = noisegen::segment_snrs(&s2, &m2, 12).unwrap();
                // skip knife-edge cases where rounding could flip a strict comparison
                let margins: Vec<f64> = noisegen::segment_snrs(&s, &current, 12).unwrap().segment_snrs.iter()
                    .zip(&profile.segment_snrs)
                    .map(|(c, b)| (c.ratio().unwrap() / b.ratio().unwrap() - 1.0).abs())
                    .collect();
                prop_assume!(margins.iter().all(|m| *m > 1e-9));
                prop_assert_eq!(snr_detect(&s2, &c2, &p2).unwrap().verdict, v);
            }
        }
    }
}
