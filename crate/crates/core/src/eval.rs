//! Confusion accounting, detection metrics and the benchmark runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, BaselineMap, CorpusConfig, LabeledPair};
use crate::detect::{DetectionContext, DetectorRegistry, DetectorSettings, Verdict};
use crate::error::{Error, Result};
use crate::model::{Signature, TimeGrid};
use crate::noisegen::{self, NoiseProfile, ProfileAggregation};
use crate::seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Records one outcome. Only a `Change` verdict counts as positive.
    pub fn record(&mut self, changed: bool, verdict: Verdict) {
        match (changed, verdict.is_change()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// `outcomes` pairs the ground truth (`true` = changed) with a verdict.
pub fn score<I: IntoIterator<Item = (bool, Verdict)>>(outcomes: I) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for (changed, verdict) in outcomes {
        counts.record(changed, verdict);
    }
    counts
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// FP / (FP + TN); `None` without negatives.
pub fn fp_rate(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.fp, c.fp + c.tn)
}

/// TP / (TP + FN); `None` without positives.
pub fn tp_rate(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn accuracy(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp + c.tn, c.total())
}

/// TP / (TP + ½(FP + FN)); `None` when all three are zero.
pub fn f1(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp as f64 + 0.5 * (c.fp + c.fn_) as f64;
    (den > 0.0).then(|| c.tp as f64 / den)
}

pub const METRICS: [&str; 4] = ["fp_rate", "tp_rate", "accuracy", "f1"];

fn metric(name: &str, c: &ConfusionCounts) -> Option<f64> {
    match name {
        "fp_rate" => fp_rate(c),
        "tp_rate" => tp_rate(c),
        "accuracy" => accuracy(c),
        "f1" => f1(c),
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Mean and sample standard deviation over repeats; undefined cells are
/// skipped, and a metric undefined everywhere stays `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Self { mean: None, std: None };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let std = if defined.len() < 2 {
            0.0
        } else {
            (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            mean: Some(mean),
            std: Some(std),
        }
    }
}

pub const DEFAULT_SAMPLE_SIZES: [usize; 5] = [1000, 2000, 3000, 4000, 5000];
pub const DEFAULT_REPEATS: usize = 30;
pub const DEFAULT_SEGMENTS: usize = 12;
pub const DEFAULT_MONITORING_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub detectors: Vec<String>,
    pub sample_sizes: Vec<usize>,
    pub repeats: usize,
    pub settings: DetectorSettings,
    /// Number of noise-profile segments `d`.
    pub segments: usize,
    pub aggregation: ProfileAggregation,
    /// Size of the noise-only monitoring corpus relative to the
    /// evaluation corpus.
    pub monitoring_fraction: f64,
    pub grid_length: usize,
    pub trace_nodes: usize,
    pub trace_length: usize,
    /// Seed of the synthetic trace and provider jitter; base signatures
    /// stay fixed while `seed` varies.
    pub trace_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            detectors: vec!["sw".into(), "snr".into(), "cusum".into()],
            sample_sizes: DEFAULT_SAMPLE_SIZES.to_vec(),
            repeats: DEFAULT_REPEATS,
            settings: DetectorSettings::default(),
            segments: DEFAULT_SEGMENTS,
            aggregation: ProfileAggregation::Min,
            monitoring_fraction: DEFAULT_MONITORING_FRACTION,
            grid_length: 360,
            trace_nodes: 31,
            trace_length: 6486,
            trace_seed: 2016,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, registry: &DetectorRegistry) -> Result<()> {
        self.corpus.validate()?;
        self.settings.thresholds.validate()?;
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be ≥ 1"));
        }
        if self.detectors.is_empty() || self.sample_sizes.is_empty() {
            return Err(Error::invalid("need ≥1 detector and ≥1 sample size"));
        }
        for name in &self.detectors {
            if !registry.contains(name) {
                return Err(Error::UnknownDetector {
                    name: name.clone(),
                    available: registry.names().collect::<Vec<_>>().join(", "),
                });
            }
        }
        if let Some(&s) = self.sample_sizes.iter().find(|&&s| s == 0 || s > self.corpus.len()) {
            return Err(Error::invalid(format!(
                "sample size {s} must lie in [1, corpus size {}]",
                self.corpus.len()
            )));
        }
        if self.segments == 0 || self.segments > self.grid_length {
            return Err(Error::invalid("segments d must lie in [1, grid length]"));
        }
        if !(self.monitoring_fraction > 0.0) {
            return Err(Error::invalid("monitoring fraction must be positive"));
        }
        Ok(())
    }

    /// The five base signatures built from the shipped profiles.
    pub fn base_signatures(&self) -> Result<Vec<Signature>> {
        let trace = datagen::synthesize_trace(self.trace_nodes, self.trace_length, self.trace_seed)?;
        let grid = TimeGrid::days(self.grid_length)?;
        datagen::build_provider_signatures(
            &datagen::shipped_profiles(),
            &trace,
            &grid,
            &BaselineMap::shipped(),
            seed::derive(self.trace_seed, 1),
        )
    }

    pub fn monitoring_size(&self) -> usize {
        ((self.monitoring_fraction * self.corpus.len() as f64).round() as usize).max(1)
    }
}

/// Noise-only corpus with the evaluation corpus's noise composition.
pub fn monitoring_corpus(bases: &[Signature], config: &ExperimentConfig, seed: u64) -> Result<Vec<LabeledPair>> {
    let corpus = CorpusConfig {
        n_changed: 0,
        n_noisy: config.monitoring_size(),
        ..config.corpus.clone()
    };
    datagen::build_corpus(bases, &corpus, seed)
}

/// One baseline noise profile per base provider, learned from the
/// monitoring pairs drawn on that provider. A provider the monitoring
/// corpus never drew falls back to the profile pooled over all pairs.
pub fn learn_profiles(
    monitoring: &[LabeledPair],
    segments: usize,
    aggregation: ProfileAggregation,
) -> Result<BTreeMap<String, NoiseProfile>> {
    let mut per_provider: BTreeMap<String, Vec<NoiseProfile>> = BTreeMap::new();
    for pair in monitoring {
        let profile = noisegen::segment_snrs(&pair.existing, &pair.recomputed, segments)?;
        per_provider
            .entry(pair.provenance.base_provider.clone())
            .or_default()
            .push(profile);
    }
    let mut out = BTreeMap::new();
    let all: Vec<NoiseProfile> = per_provider.values().flatten().cloned().collect();
    out.insert(String::new(), NoiseProfile::combine(&all, aggregation)?);
    for (provider, profiles) in per_provider {
        out.insert(provider, NoiseProfile::combine(&profiles, aggregation)?);
    }
    Ok(out)
}

fn profile_for<'a>(profiles: &'a BTreeMap<String, NoiseProfile>, provider: &str) -> &'a NoiseProfile {
    profiles.get(provider).unwrap_or(&profiles[""])
}

/// Per-class detector behaviour on the full corpora, outside the four
/// metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorDiagnostics {
    /// Share of pairs of each class (`changed`, `spike`, …) judged `Change`.
    pub change_rate_by_class: BTreeMap<String, f64>,
    /// Share of noisy pairs whose `Noise` verdict names the injected kind.
    pub kind_accuracy: Option<f64>,
}

/// Metric table `{detector: {sample_size: {metric: {mean, std}}}}`.
pub type MetricTable = BTreeMap<String, BTreeMap<usize, BTreeMap<String, Summary>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config: ExperimentConfig,
    #[serde(flatten)]
    pub metrics: MetricTable,
    pub diagnostics: BTreeMap<String, DetectorDiagnostics>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self, detector: &str, sample_size: usize, metric: &str) -> Option<Summary> {
        self.metrics.get(detector)?.get(&sample_size)?.get(metric).copied()
    }

    /// Plot-ready rows `detector,sample_size,metric,mean,std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("detector,sample_size,metric,mean,std\n");
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
        for (detector, sizes) in &self.metrics {
            for (size, metrics) in sizes {
                for m in METRICS {
                    let s = metrics[m];
                    let _ = writeln!(out, "{detector},{size},{m},{},{}", fmt(s.mean), fmt(s.std));
                }
            }
        }
        out
    }
}

struct RepeatResult {
    /// Per detector, verdicts on every corpus pair.
    verdicts: Vec<Vec<Verdict>>,
    truth: Vec<bool>,
    classes: Vec<String>,
    kinds: Vec<Option<noisegen::NoiseKind>>,
    /// Per detector, per sample size.
    cells: Vec<Vec<ConfusionCounts>>,
}

fn run_repeat(
    config: &ExperimentConfig,
    registry: &DetectorRegistry,
    bases: &[Signature],
    repeat_seed: u64,
) -> Result<RepeatResult> {
    let corpus = datagen::build_corpus(bases, &config.corpus, seed::derive(repeat_seed, 0))?;
    let monitoring = monitoring_corpus(bases, config, seed::derive(repeat_seed, 1))?;
    let profiles = learn_profiles(&monitoring, config.segments, config.aggregation)?;

    let verdicts = config
        .detectors
        .iter()
        .map(|name| {
            let detector = registry.build(name, &config.settings)?;
            corpus
                .par_iter()
                .map(|pair| {
                    let ctx = if detector.needs_noise_profile() {
                        DetectionContext::with_profile(profile_for(&profiles, &pair.provenance.base_provider))
                    } else {
                        DetectionContext::default()
                    };
                    Ok(detector.detect(&pair.existing, &pair.recomputed, &ctx)?.verdict)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<bool> = corpus.iter().map(|p| p.label.is_changed()).collect();

    let samples: Vec<Vec<usize>> = config
        .sample_sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let mut rng = seed::rng(seed::derive(repeat_seed, 2 + i as u64));
            let mut idx = rand::seq::index::sample(&mut rng, corpus.len(), size).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    let cells = verdicts
        .iter()
        .map(|v| {
            samples
                .iter()
                .map(|idx| score(idx.iter().map(|&i| (truth[i], v[i]))))
                .collect()
        })
        .collect();
    Ok(RepeatResult {
        verdicts,
        truth,
        classes: corpus.iter().map(|p| p.label.class()).collect(),
        kinds: corpus.iter().map(|p| p.label.noise_kind()).collect(),
        cells,
    })
}

/// Runs every detector over `repeats` fresh corpora. Repeat `r` uses seed
/// `derive(seed, r)`; results do not depend on thread scheduling.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    run_experiment_with(config, &DetectorRegistry::default(), seed)
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    registry: &DetectorRegistry,
    seed: u64,
) -> Result<ExperimentReport> {
    config.validate(registry)?;
    run_on_bases(config, registry, &config.base_signatures()?, seed)
}

/// Like [`run_experiment_with`] over caller-supplied base signatures.
pub fn run_on_bases(
    config: &ExperimentConfig,
    registry: &DetectorRegistry,
    bases: &[Signature],
    seed: u64,
) -> Result<ExperimentReport> {
    config.validate(registry)?;
    let repeats = (0..config.repeats)
        .into_par_iter()
        .map(|r| {
            let result = run_repeat(config, registry, bases, seed::derive(seed, r as u64));
            log::info!("repeat {}/{} done", r + 1, config.repeats);
            result
        })
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = MetricTable::new();
    let mut diagnostics = BTreeMap::new();
    for (d, name) in config.detectors.iter().enumerate() {
        let table = metrics.entry(name.clone()).or_default();
        for (s, &size) in config.sample_sizes.iter().enumerate() {
            let cell = table.entry(size).or_default();
            for m in METRICS {
                let values: Vec<Option<f64>> = repeats.iter().map(|r| metric(m, &r.cells[d][s])).collect();
                cell.insert(m.to_string(), Summary::of(&values));
            }
        }

        let mut by_class: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        let (mut kind_hits, mut noisy) = (0u64, 0u64);
        for r in &repeats {
            for (i, verdict) in r.verdicts[d].iter().enumerate() {
                let entry = by_class.entry(r.classes[i].clone()).or_default();
                entry.0 += u64::from(verdict.is_change());
                entry.1 += 1;
                if !r.truth[i] {
                    noisy += 1;
                    if let (Verdict::Noise(k), Some(injected)) = (verdict, r.kinds[i]) {
                        kind_hits += u64::from(*k == injected);
                    }
                }
            }
        }
        diagnostics.insert(
            name.clone(),
            DetectorDiagnostics {
                change_rate_by_class: by_class
                    .into_iter()
                    .map(|(class, (hits, n))| (class, hits as f64 / n as f64))
                    .collect(),
                kind_accuracy: ratio(kind_hits, noisy),
            },
        );
    }
    Ok(ExperimentReport {
        seed,
        config: config.clone(),
        metrics,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub distortion_fraction: f64,
    pub report: ExperimentReport,
}

/// One experiment per distortion level, everything else (seed included)
/// held fixed.
pub fn sensitivity_analysis(base: &ExperimentConfig, levels: &[f64], seed: u64) -> Result<Vec<SensitivityPoint>> {
    if levels.is_empty() {
        return Err(Error::invalid("need ≥1 distortion level"));
    }
    if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid(format!("distortion level {l} outside [0, 1]")));
    }
    levels
        .iter()
        .map(|&level| {
            let mut config = base.clone();
            config.corpus.distortion_fraction = level;
            Ok(SensitivityPoint {
                distortion_fraction: level,
                report: run_experiment(&config, seed)?,
            })
        })
        .collect()
}
