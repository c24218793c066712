//! Synthetic benchmark data: workload traces, the workload-to-performance
//! baseline, per-provider QoS profiles, provider signatures and labeled
//! corpora of changed and noisy signature pairs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Signature, TimeGrid, TrialExperience};
use crate::noisegen::{self, NoiseKind, NoiseSpec};
use crate::seed;
use crate::signature::{generate_signature, paa, TrialCohort};

/// Per-node resource demand, as a fraction of the node's cores.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTrace {
    pub node_ids: Vec<String>,
    pub demands: Vec<Vec<f64>>,
}

impl WorkloadTrace {
    pub fn new(node_ids: Vec<String>, demands: Vec<Vec<f64>>) -> Result<Self> {
        if node_ids.is_empty() || node_ids.len() != demands.len() {
            return Err(Error::invalid("trace needs ≥1 node and one demand series per node"));
        }
        for (id, d) in node_ids.iter().zip(&demands) {
            if d.is_empty() {
                return Err(Error::invalid(format!("node `{id}` has no samples")));
            }
            if let Some(bad) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("node `{id}` demand {bad} outside [0, 1]")));
            }
        }
        Ok(Self { node_ids, demands })
    }

    pub fn nodes(&self) -> usize {
        self.node_ids.len()
    }
}

/// Reads a trace CSV with columns `node_id,timestamp,cores_requested,cores_total`.
/// Each node's samples are ordered by timestamp.
pub fn load_trace(path: impl AsRef<Path>) -> Result<WorkloadTrace> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    let expected = ["node_id", "timestamp", "cores_requested", "cores_total"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            path,
            1,
            format!("header must be `{}`", expected.join(",")),
        ));
    }
    let mut nodes: BTreeMap<String, Vec<(i64, f64)>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let num = |idx: usize| -> Result<f64> {
            record[idx]
                .parse::<f64>()
                .map_err(|e| Error::parse(path, line, format!("bad `{}`: {e}", expected[idx])))
        };
        let timestamp = record[1]
            .parse::<i64>()
            .map_err(|e| Error::parse(path, line, format!("bad timestamp: {e}")))?;
        let (requested, total) = (num(2)?, num(3)?);
        if !(total > 0.0) || requested < 0.0 {
            return Err(Error::parse(
                path,
                line,
                "cores must be non-negative with a positive total",
            ));
        }
        let fraction = requested / total;
        if fraction > 1.0 {
            return Err(Error::parse(
                path,
                line,
                format!("requested {requested} of {total} cores exceeds capacity"),
            ));
        }
        nodes
            .entry(record[0].to_string())
            .or_default()
            .push((timestamp, fraction));
    }
    let (ids, demands) = nodes
        .into_iter()
        .map(|(id, mut samples)| {
            samples.sort_by_key(|s| s.0);
            (id, samples.into_iter().map(|s| s.1).collect())
        })
        .unzip();
    WorkloadTrace::new(ids, demands)
}

/// Seeded synthetic trace: one mean-reverting bounded random walk of CPU
/// demand per node.
pub fn synthesize_trace(nodes: usize, length: usize, seed: u64) -> Result<WorkloadTrace> {
    if nodes == 0 || length == 0 {
        return Err(Error::invalid("trace needs ≥1 node and ≥1 timestamp"));
    }
    let step = Normal::new(0.0, 0.03).expect("valid normal");
    let demands = (0..nodes)
        .map(|n| {
            let mut rng = seed::rng(seed::derive(seed, n as u64));
            let centre: f64 = rng.random_range(0.25..0.75);
            let mut d = centre;
            (0..length)
                .map(|_| {
                    d += 0.01 * (centre - d) + step.sample(&mut rng);
                    d = d.clamp(0.0, 1.0);
                    d
                })
                .collect()
        })
        .collect();
    WorkloadTrace::new((0..nodes).map(|n| format!("n{}", n + 1)).collect(), demands)
}

/// Monotone workload-to-performance map with no variability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMap {
    /// `(demand fraction, operations/sec)`, demand strictly increasing from
    /// 0 to 1, performance strictly decreasing.
    breakpoints: Vec<(f64, f64)>,
}

impl BaselineMap {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::invalid("baseline map needs ≥2 breakpoints"));
        }
        if breakpoints[0].0 != 0.0 || breakpoints[breakpoints.len() - 1].0 != 1.0 {
            return Err(Error::invalid("baseline map must span demand 0 to 1"));
        }
        for w in breakpoints.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid("baseline demands must be strictly increasing"));
            }
            if !(w[1].1 < w[0].1) {
                return Err(Error::invalid(
                    "baseline performance must strictly decrease as demand grows",
                ));
            }
        }
        if breakpoints.iter().any(|b| !(b.1 > 0.0)) {
            return Err(Error::invalid("baseline performance must be positive"));
        }
        Ok(Self { breakpoints })
    }

    pub fn shipped() -> Self {
        let map: BaselineMap =
            serde_json::from_str(include_str!("../data/baseline_map.json")).expect("shipped baseline map parses");
        Self::new(map.breakpoints).expect("shipped baseline map is valid")
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    /// Piecewise-linear interpolation between breakpoints.
    pub fn performance(&self, demand: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&demand) {
            return Err(Error::OutOfBounds(format!("demand {demand} outside [0, 1]")));
        }
        let i = self
            .breakpoints
            .windows(2)
            .position(|w| demand <= w[1].0)
            .unwrap_or(self.breakpoints.len() - 2);
        let ((d0, p0), (d1, p1)) = (self.breakpoints[i], self.breakpoints[i + 1]);
        if demand == d1 {
            return Ok(p1);
        }
        Ok(p0 + (p1 - p0) * (demand - d0) / (d1 - d0))
    }
}

pub fn baseline_performance(map: &BaselineMap, demand: f64) -> Result<f64> {
    map.performance(demand)
}

/// A rule applying `multiplier` on `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub from: f64,
    pub to: f64,
    pub multiplier: f64,
}

fn check_tiling(rules: &[Rule], lo: f64, hi: f64, what: &str) -> Result<()> {
    if rules.is_empty() {
        return Err(Error::invalid(format!("{what} has no rules")));
    }
    if rules[0].from != lo || rules[rules.len() - 1].to != hi {
        return Err(Error::invalid(format!("{what} must span [{lo}, {hi}]")));
    }
    for w in rules.windows(2) {
        if w[0].to != w[1].from {
            return Err(Error::invalid(format!(
                "{what} rules overlap or leave a gap at {}",
                w[0].to
            )));
        }
    }
    for r in rules {
        if !(r.to > r.from) || !(r.multiplier > 0.0) {
            return Err(Error::invalid(format!("{what} rule {r:?} is empty or non-positive")));
        }
    }
    Ok(())
}

fn lookup(rules: &[Rule], x: f64) -> f64 {
    rules
        .iter()
        .find(|r| x >= r.from && x < r.to)
        .unwrap_or(&rules[rules.len() - 1])
        .multiplier
}

/// Relative performance index of one provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosProfile {
    pub provider_id: String,
    /// Demand intervals tiling `[0, 1]`, multiplier on the baseline.
    pub workload_map: Vec<Rule>,
    /// Grid-index intervals tiling `[0, grid length]`, multiplier on the
    /// expected performance.
    pub seasonal_map: Vec<Rule>,
    /// Scale of the uniform `[0, 1)` jitter on the final value.
    pub jitter_amplitude: f64,
}

impl QosProfile {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        check_tiling(&self.workload_map, 0.0, 1.0, "workload map")?;
        check_tiling(&self.seasonal_map, 0.0, grid.len() as f64, "seasonal map")?;
        if !(self.jitter_amplitude >= 0.0) {
            return Err(Error::invalid("jitter amplitude must be ≥ 0"));
        }
        Ok(())
    }

    pub fn workload_multiplier(&self, demand: f64) -> f64 {
        lookup(&self.workload_map, demand)
    }

    pub fn seasonal_multiplier(&self, t: usize) -> f64 {
        lookup(&self.seasonal_map, t as f64)
    }

    /// Final value for a uniform draw `u` in `[0, 1)`.
    pub fn performance_with(&self, baseline: &BaselineMap, demand: f64, t: usize, u: f64) -> Result<f64> {
        let expected = baseline.performance(demand)? * self.workload_multiplier(demand);
        Ok(expected * self.seasonal_multiplier(t) * (1.0 + self.jitter_amplitude * u))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The five hand-authored provider profiles shipped with the crate.
pub fn shipped_profiles() -> Vec<QosProfile> {
    [
        include_str!("../data/profiles/provider_a.json"),
        include_str!("../data/profiles/provider_b.json"),
        include_str!("../data/profiles/provider_c.json"),
        include_str!("../data/profiles/provider_d.json"),
        include_str!("../data/profiles/provider_e.json"),
    ]
    .iter()
    .map(|s| serde_json::from_str(s).expect("shipped profile parses"))
    .collect()
}

pub fn provider_performance(
    profile: &QosProfile,
    demand: f64,
    t: usize,
    baseline: &BaselineMap,
    seed: u64,
) -> Result<f64> {
    let u = if profile.jitter_amplitude == 0.0 {
        0.0
    } else {
        seed::rng(seed).random::<f64>()
    };
    profile.performance_with(baseline, demand, t, u)
}

/// Runs every node of `trace` through each provider's profile, reduces each
/// node's series to the grid with PAA and generates one signature per
/// provider.
pub fn build_provider_signatures(
    profiles: &[QosProfile],
    trace: &WorkloadTrace,
    grid: &TimeGrid,
    baseline: &BaselineMap,
    seed: u64,
) -> Result<Vec<Signature>> {
    for (i, p) in profiles.iter().enumerate() {
        p.validate(grid)?;
        if profiles[..i].iter().any(|q| q.provider_id == p.provider_id) {
            return Err(Error::invalid(format!("duplicate provider `{}`", p.provider_id)));
        }
    }
    profiles
        .par_iter()
        .enumerate()
        .map(|(pi, profile)| {
            let experiences = trace
                .node_ids
                .iter()
                .zip(&trace.demands)
                .enumerate()
                .map(|(ni, (id, demand))| {
                    if demand.len() < grid.len() {
                        return Err(Error::invalid(format!(
                            "node `{id}` has {} samples, fewer than the grid ({})",
                            demand.len(),
                            grid.len()
                        )));
                    }
                    let mut rng = seed::rng(seed::derive(seed::derive(seed, pi as u64), ni as u64));
                    let raw_len = demand.len();
                    let raw = demand
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| {
                            let day = i * grid.len() / raw_len;
                            let u = if profile.jitter_amplitude == 0.0 {
                                0.0
                            } else {
                                rng.random::<f64>()
                            };
                            profile.performance_with(baseline, d, day, u)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    TrialExperience::new(id.clone(), "throughput", 0, paa(&raw, grid.len())?)
                })
                .collect::<Result<Vec<_>>>()?;
            let cohort = TrialCohort::new(experiences)?;
            generate_signature(profile.provider_id.clone(), &[cohort], grid)
        })
        .collect()
}

/// Label of a corpus pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "lowercase")]
pub enum PairLabel {
    Changed,
    Noisy { noise: NoiseSpec },
}

impl PairLabel {
    pub fn is_changed(&self) -> bool {
        matches!(self, PairLabel::Changed)
    }

    pub fn noise_kind(&self) -> Option<NoiseKind> {
        match self {
            PairLabel::Changed => None,
            PairLabel::Noisy { noise } => Some(noise.kind()),
        }
    }

    /// Short class name: `changed`, `spike`, `attenuation` or `distortion`.
    pub fn class(&self) -> String {
        self.noise_kind()
            .map_or_else(|| "changed".to_string(), |k| k.to_string())
    }
}

/// How a pair was constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub index: usize,
    pub seed: u64,
    pub base_provider: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub donor_provider: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub segment: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise: Option<NoiseSpec>,
    /// Set for attenuation pairs added beyond the spike + AWGN composition.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub extension: bool,
}

impl Provenance {
    /// The label implied by the construction record.
    pub fn label(&self) -> PairLabel {
        match self.noise {
            Some(noise) => PairLabel::Noisy { noise },
            None => PairLabel::Changed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub existing: Signature,
    pub recomputed: Signature,
    pub label: PairLabel,
    pub provenance: Provenance,
}

/// Overwrites `[start, start + length)` of `original` with the donor's
/// values.
pub fn make_changed(
    original: &Signature,
    donor: &Signature,
    segment: (usize, usize),
    seed: u64,
) -> Result<LabeledPair> {
    let (start, length) = segment;
    if length == 0 {
        return Err(Error::invalid("changed segment must be non-empty"));
    }
    if start + length > original.len() {
        return Err(Error::OutOfBounds(format!(
            "segment [{start}, {}) exceeds grid length {}",
            start + length,
            original.len()
        )));
    }
    if donor.provider_id() == original.provider_id() {
        return Err(Error::invalid(format!(
            "donor must differ from the original provider `{}`",
            original.provider_id()
        )));
    }
    original.check_same_shape(donor)?;
    let recomputed = original.map_rows(|i, v| {
        let mut out = v.to_vec();
        out[start..start + length].copy_from_slice(&donor.rows()[i].values[start..start + length]);
        out
    })?;
    Ok(LabeledPair {
        existing: original.clone(),
        recomputed,
        label: PairLabel::Changed,
        provenance: Provenance {
            index: 0,
            seed,
            base_provider: original.provider_id().to_string(),
            donor_provider: Some(donor.provider_id().to_string()),
            segment: Some(segment),
            noise: None,
            extension: false,
        },
    })
}

pub fn make_noisy(original: &Signature, spec: &NoiseSpec, seed: u64) -> Result<LabeledPair> {
    let recomputed = noisegen::inject(original, spec, seed)?;
    Ok(LabeledPair {
        existing: original.clone(),
        recomputed,
        label: PairLabel::Noisy { noise: *spec },
        provenance: Provenance {
            index: 0,
            seed,
            base_provider: original.provider_id().to_string(),
            donor_provider: None,
            segment: None,
            noise: Some(*spec),
            extension: spec.kind() == NoiseKind::Attenuation,
        },
    })
}

pub const DEFAULT_SEGMENT_LENGTH: usize = 90;
pub const DEFAULT_ATTENUATION_SHARE: f64 = 0.10;
/// Corpus spike height in row standard deviations. Large enough that a
/// width-3 spike lifts RMSE above the attenuation ceiling, so the
/// sliding-window detector scans for it instead of calling it attenuation.
pub const DEFAULT_CORPUS_SPIKE_MAGNITUDE: f64 = 6.0;
pub const DEFAULT_ATTENUATION_RANGE: (f64, f64) = (0.90, 0.97);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_changed: usize,
    pub n_noisy: usize,
    /// Share of noisy pairs carrying AWGN distortion.
    pub distortion_fraction: f64,
    /// Share of noisy pairs carrying attenuation (forced to 0 when
    /// `no_attenuation`).
    pub attenuation_share: f64,
    /// Only spike and AWGN noise.
    pub no_attenuation: bool,
    pub segment_length: usize,
    pub spike_width: usize,
    pub spike_magnitude: f64,
    pub distortion_db: f64,
    /// Attenuation factors are drawn uniformly from this range.
    pub attenuation_range: (f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_changed: 3000,
            n_noisy: 3000,
            distortion_fraction: 0.5,
            attenuation_share: DEFAULT_ATTENUATION_SHARE,
            no_attenuation: false,
            segment_length: DEFAULT_SEGMENT_LENGTH,
            spike_width: noisegen::DEFAULT_SPIKE_WIDTH,
            spike_magnitude: DEFAULT_CORPUS_SPIKE_MAGNITUDE,
            distortion_db: noisegen::DEFAULT_DISTORTION_DB,
            attenuation_range: DEFAULT_ATTENUATION_RANGE,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.distortion_fraction) {
            return Err(Error::invalid("distortion fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.attenuation_share) {
            return Err(Error::invalid("attenuation share must lie in [0, 1]"));
        }
        let (lo, hi) = self.attenuation_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("attenuation range must satisfy 0 < lo ≤ hi < 1"));
        }
        if self.segment_length == 0 || self.spike_width == 0 {
            return Err(Error::invalid("segment length and spike width must be ≥ 1"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_changed + self.n_noisy
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Counts of (distortion, attenuation, spike) noisy pairs.
    pub fn noise_counts(&self) -> (usize, usize, usize) {
        let n = self.n_noisy;
        let distortion = ((self.distortion_fraction * n as f64).round() as usize).min(n);
        let share = if self.no_attenuation {
            0.0
        } else {
            self.attenuation_share
        };
        let attenuation = ((share * n as f64).round() as usize).min(n - distortion);
        (distortion, attenuation, n - distortion - attenuation)
    }

    fn noise_kind_at(&self, noisy_index: usize) -> NoiseKind {
        let (distortion, attenuation, _) = self.noise_counts();
        if noisy_index < distortion {
            NoiseKind::Distortion
        } else if noisy_index < distortion + attenuation {
            NoiseKind::Attenuation
        } else {
            NoiseKind::Spike
        }
    }
}

/// Builds `n_changed` changed pairs followed by `n_noisy` noisy pairs.
///
/// Each pair draws its base signature uniformly from `bases`; changed
/// pairs draw a different donor and a segment start uniformly. Pair `i`
/// uses seed `derive(seed, i)`, so the result does not depend on
/// scheduling.
pub fn build_corpus(bases: &[Signature], config: &CorpusConfig, seed: u64) -> Result<Vec<LabeledPair>> {
    config.validate()?;
    if bases.len() < 2 {
        return Err(Error::invalid("corpus needs at least two base signatures"));
    }
    let grid_len = bases[0].len();
    if config.segment_length > grid_len || config.spike_width > grid_len {
        return Err(Error::invalid("segment or spike wider than the grid"));
    }
    (0..config.len())
        .into_par_iter()
        .map(|index| {
            let pair_seed = seed::derive(seed, index as u64);
            let mut rng = seed::rng(pair_seed);
            let base_idx = rng.random_range(0..bases.len());
            let base = &bases[base_idx];
            let mut pair = if index < config.n_changed {
                let donor_idx = (base_idx + rng.random_range(1..bases.len())) % bases.len();
                let start = rng.random_range(0..=grid_len - config.segment_length);
                make_changed(base, &bases[donor_idx], (start, config.segment_length), pair_seed)?
            } else {
                let spec = match config.noise_kind_at(index - config.n_changed) {
                    NoiseKind::Distortion => NoiseSpec::Distortion {
                        target_snr_db: config.distortion_db,
                    },
                    NoiseKind::Attenuation => {
                        let (lo, hi) = config.attenuation_range;
                        NoiseSpec::Attenuation {
                            factor: if lo == hi { lo } else { rng.random_range(lo..hi) },
                        }
                    }
                    NoiseKind::Spike => NoiseSpec::Spike {
                        position: rng.random_range(0..=grid_len - config.spike_width),
                        width: config.spike_width,
                        magnitude: config.spike_magnitude,
                    },
                };
                make_noisy(base, &spec, rng.random())?
            };
            pair.provenance.index = index;
            pair.provenance.seed = pair_seed;
            Ok(pair)
        })
        .collect()
}

/// One manifest line per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub label: PairLabel,
    pub provenance: Provenance,
    pub existing_path: String,
    pub recomputed_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: CorpusConfig,
    pub pairs: Vec<ManifestEntry>,
}
