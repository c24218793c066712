//! Event-condition-action change-point detection.
//!
//! Trials whose similarity to the signature falls below the calibrated
//! threshold are anomalies; an event (a change point) fires when the number
//! of anomalies inside one aligned window of `window_length` timestamps
//! crosses the frequency threshold.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Signature, TrialExperience};
use crate::similarity::{self, Polarity, Similarity, SimilarityMethod};

/// Trials tying the boundary similarity within this tolerance count toward
/// the frequency threshold.
pub const BOUNDARY_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyThreshold {
    pub method: SimilarityMethod,
    pub value: f64,
}

impl AnomalyThreshold {
    /// Strictly less similar than the threshold.
    pub fn is_anomalous(&self, sim: f64) -> bool {
        Similarity {
            method: self.method,
            value: sim,
        }
        .is_worse_than(self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventConfig {
    pub window_length: usize,
    pub frequency_threshold: usize,
}

impl EventConfig {
    pub fn new(window_length: usize, frequency_threshold: usize) -> Result<Self> {
        if window_length == 0 || frequency_threshold == 0 {
            return Err(Error::invalid("window length and frequency threshold must be ≥ 1"));
        }
        Ok(Self {
            window_length,
            frequency_threshold,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub grid_index: usize,
    pub anomaly_count: usize,
    pub window_start: usize,
    pub window_length: usize,
}

/// Similarity between a trial (normalized) and the matching slice of the
/// signature row.
pub fn trial_similarity(exp: &TrialExperience, sig: &Signature, method: SimilarityMethod) -> Result<f64> {
    exp.check_within(sig.grid())?;
    let row = sig
        .row(&exp.parameter)
        .ok_or_else(|| Error::Alignment(format!("signature has no `{}` row", exp.parameter)))?;
    let normalized = similarity::normalize(&exp.values).map_err(|_| Error::ConstantSeries(exp.user_id.clone()))?;
    let slice = &row.values[exp.trial_start..exp.trial_start + exp.trial_length()];
    Ok(similarity::similarity(slice, &normalized, method)?.value)
}

/// Initial similarity threshold: the least similar of the past trials
/// (minimum similarity for PCC/CS, maximum distance for ED/RMSE).
pub fn calibrate_similarity_threshold(
    past: &[TrialExperience],
    sig: &Signature,
    method: SimilarityMethod,
) -> Result<AnomalyThreshold> {
    if past.is_empty() {
        return Err(Error::invalid("threshold calibration needs at least one past trial"));
    }
    let sims = past
        .iter()
        .map(|e| trial_similarity(e, sig, method))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnomalyThreshold {
        method,
        value: least_similar(&sims, method),
    })
}

pub(crate) fn least_similar(sims: &[f64], method: SimilarityMethod) -> f64 {
    match method.polarity() {
        Polarity::HigherIsSimilar => sims.iter().copied().fold(f64::INFINITY, f64::min),
        Polarity::LowerIsSimilar => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Initial frequency threshold: the largest number of past trials, within
/// any one aligned window, that sit exactly on the boundary similarity.
/// Floors at 1.
pub fn calibrate_frequency_threshold(
    past: &[TrialExperience],
    sig: &Signature,
    threshold: &AnomalyThreshold,
    window_length: usize,
) -> Result<EventConfig> {
    if window_length == 0 {
        return Err(Error::invalid("window length must be ≥ 1"));
    }
    let mut scored = Vec::with_capacity(past.len());
    for e in past {
        scored.push((e.trial_start, trial_similarity(e, sig, threshold.method)?));
    }
    let count = boundary_count_per_window(&scored, threshold.value, window_length);
    EventConfig::new(window_length, count.max(1))
}

/// Maximum per-window count of `(start, similarity)` pairs tying `boundary`.
pub(crate) fn boundary_count_per_window(scored: &[(usize, f64)], boundary: f64, window_length: usize) -> usize {
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for &(start, sim) in scored {
        if (sim - boundary).abs() <= BOUNDARY_TIE_TOLERANCE {
            *counts.entry(start / window_length).or_default() += 1;
        }
    }
    counts.into_values().max().unwrap_or(0)
}

/// Classifies a trial against the signature. Returns the verdict together
/// with the measured similarity.
pub fn is_anomalous(exp: &TrialExperience, sig: &Signature, threshold: &AnomalyThreshold) -> Result<(bool, f64)> {
    let sim = trial_similarity(exp, sig, threshold.method)?;
    Ok((threshold.is_anomalous(sim), sim))
}

/// Emits a change point at the last index of every aligned window
/// `[k * T_f, (k + 1) * T_f)` whose anomaly count strictly exceeds the
/// frequency threshold. `flags` must be sorted by index.
pub fn detect_events(flags: &[(usize, bool)], config: &EventConfig) -> Vec<ChangePoint> {
    let wl = config.window_length;
    let mut events = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    let flush = |window: usize, count: usize, events: &mut Vec<ChangePoint>| {
        if count > config.frequency_threshold {
            events.push(ChangePoint {
                grid_index: window * wl + wl - 1,
                anomaly_count: count,
                window_start: window * wl,
                window_length: wl,
            });
        }
    };
    for &(index, anomalous) in flags {
        let window = index / wl;
        match current {
            Some((w, count)) if w == window => current = Some((w, count + anomalous as usize)),
            Some((w, count)) => {
                flush(w, count, &mut events);
                current = Some((window, anomalous as usize));
            }
            None => current = Some((window, anomalous as usize)),
        }
    }
    if let Some((w, count)) = current {
        flush(w, count, &mut events);
    }
    events
}

/// One line of the anomaly-flag CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyFlag {
    pub index: usize,
    pub flag: bool,
    pub similarity: f64,
}

/// Reads the `index,flag,similarity` CSV.
pub fn read_flags(path: impl AsRef<Path>) -> Result<Vec<AnomalyFlag>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let mut flags = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if record.len() != 3 {
            return Err(Error::parse(path, line, "expected `index,flag,similarity`"));
        }
        let index = record[0]
            .parse()
            .map_err(|e| Error::parse(path, line, format!("bad index: {e}")))?;
        let flag = match &record[1] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::parse(path, line, format!("bad flag `{other}`"))),
        };
        let similarity = record[2]
            .parse()
            .map_err(|e| Error::parse(path, line, format!("bad similarity: {e}")))?;
        flags.push(AnomalyFlag {
            index,
            flag,
            similarity,
        });
    }
    if flags.windows(2).any(|w| w[0].index > w[1].index) {
        return Err(Error::invalid(format!(
            "{}: flags must be sorted by index",
            path.display()
        )));
    }
    Ok(flags)
}

pub fn write_flags(flags: &[AnomalyFlag], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "index,flag,similarity")?;
    for f in flags {
        writeln!(out, "{},{},{:?}", f.index, f.flag as u8, f.similarity)?;
    }
    out.flush()
}
