//! The performance noise model: spikes, attenuation and distortion.
//!
//! Injection is deterministic per `(spec, seed)` and never re-normalizes
//! its output, so the added noise stays measurable through [`residual`]
//! and [`snr`].

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::Signature;
use crate::seed;
use crate::stats;

pub const DEFAULT_SPIKE_WIDTH: usize = 3;
pub const DEFAULT_SPIKE_MAGNITUDE: f64 = 5.0;
pub const DEFAULT_DISTORTION_DB: f64 = 20.0;

/// Mean magnitude below which a noise series is treated as zero-mean.
const ZERO_MEAN_TOLERANCE: f64 = 1e-12;

fn default_width() -> usize {
    DEFAULT_SPIKE_WIDTH
}

fn default_magnitude() -> f64 {
    DEFAULT_SPIKE_MAGNITUDE
}

fn default_db() -> f64 {
    DEFAULT_DISTORTION_DB
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Spike,
    Attenuation,
    Distortion,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Spike => "spike",
            Self::Attenuation => "attenuation",
            Self::Distortion => "distortion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    /// Adds `magnitude` row standard deviations to `width` consecutive
    /// points starting at `position`.
    Spike {
        position: usize,
        #[serde(default = "default_width")]
        width: usize,
        #[serde(default = "default_magnitude")]
        magnitude: f64,
    },
    /// Multiplies every value by `factor`.
    Attenuation { factor: f64 },
    /// Adds white Gaussian noise at the given signal-to-noise ratio.
    Distortion {
        #[serde(default = "default_db")]
        target_snr_db: f64,
    },
}

impl NoiseSpec {
    pub fn spike(position: usize) -> Self {
        Self::Spike {
            position,
            width: DEFAULT_SPIKE_WIDTH,
            magnitude: DEFAULT_SPIKE_MAGNITUDE,
        }
    }

    pub fn kind(&self) -> NoiseKind {
        match self {
            Self::Spike { .. } => NoiseKind::Spike,
            Self::Attenuation { .. } => NoiseKind::Attenuation,
            Self::Distortion { .. } => NoiseKind::Distortion,
        }
    }

    pub fn validate(&self, grid_length: usize) -> Result<()> {
        match *self {
            Self::Spike {
                position,
                width,
                magnitude,
            } => {
                if width == 0 {
                    return Err(Error::invalid("spike width must be ≥ 1"));
                }
                if position + width > grid_length {
                    return Err(Error::OutOfBounds(format!(
                        "spike [{position}, {}) exceeds grid length {grid_length}",
                        position + width
                    )));
                }
                if !magnitude.is_finite() {
                    return Err(Error::invalid("spike magnitude must be finite"));
                }
            }
            Self::Attenuation { factor } => {
                if !(factor > 0.0 && factor < 1.0) {
                    return Err(Error::invalid(format!("attenuation factor {factor} not in (0, 1)")));
                }
            }
            Self::Distortion { target_snr_db } => {
                if !target_snr_db.is_finite() {
                    return Err(Error::invalid("distortion SNR must be finite"));
                }
            }
        }
        Ok(())
    }
}

/// Returns a noisy copy of `sig`. The output keeps its raw scale.
pub fn inject(sig: &Signature, spec: &NoiseSpec, seed: u64) -> Result<Signature> {
    spec.validate(sig.len())?;
    match *spec {
        NoiseSpec::Spike {
            position,
            width,
            magnitude,
        } => sig.map_rows(|_, v| {
            let bump = magnitude * stats::std_dev(v);
            let mut out = v.to_vec();
            for x in &mut out[position..position + width] {
                *x += bump;
            }
            out
        }),
        NoiseSpec::Attenuation { factor } => sig.map_rows(|_, v| v.iter().map(|x| x * factor).collect()),
        NoiseSpec::Distortion { target_snr_db } => sig.map_rows(|i, v| {
            let mut rng = seed::rng(seed::derive(seed, i as u64));
            let sigma = distortion_sigma(v, target_snr_db);
            v.iter()
                .map(|x| {
                    let z: f64 = rng.sample(StandardNormal);
                    x + sigma * z
                })
                .collect()
        }),
    }
}

/// Noise standard deviation giving `target_db` against the mean square of
/// `signal`.
pub fn distortion_sigma(signal: &[f64], target_db: f64) -> f64 {
    (stats::mean_square(signal) / 10f64.powf(target_db / 10.0)).sqrt()
}

/// Signal-to-noise power ratio. Zero noise power is the `Infinite`
/// sentinel rather than a floating-point infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Ratio(f64),
    Infinite,
}

impl Snr {
    pub fn ratio(self) -> Option<f64> {
        match self {
            Snr::Ratio(r) => Some(r),
            Snr::Infinite => None,
        }
    }

    pub fn db(self) -> Option<f64> {
        self.ratio().map(|r| 10.0 * r.log10())
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Snr::Infinite)
    }

    pub fn min(self, other: Snr) -> Snr {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl PartialOrd for Snr {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Snr::Infinite, Snr::Infinite) => Some(Ordering::Equal),
            (Snr::Infinite, Snr::Ratio(_)) => Some(Ordering::Greater),
            (Snr::Ratio(_), Snr::Infinite) => Some(Ordering::Less),
            (Snr::Ratio(a), Snr::Ratio(b)) => a.partial_cmp(b),
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Ratio(r) => write!(f, "{r} ({:.2} dB)", 10.0 * r.log10()),
            Snr::Infinite => f.write_str("inf"),
        }
    }
}

/// Serialized as the ratio, or the string `"inf"`.
impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Snr::Ratio(r) => s.serialize_f64(*r),
            Snr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) => Ok(Snr::Ratio(r)),
            Raw::Str(s) if s == "inf" => Ok(Snr::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid SNR `{s}`"))),
        }
    }
}

/// `E[S²] / E[N²]`; when the noise is zero-mean its variance is used as
/// the noise power.
pub fn snr(signal: &[f64], noise: &[f64]) -> Result<Snr> {
    if signal.len() != noise.len() {
        return Err(Error::LengthMismatch {
            expected: signal.len(),
            found: noise.len(),
        });
    }
    if signal.is_empty() {
        return Err(Error::invalid("SNR of empty series"));
    }
    let noise_power = if stats::mean(noise).abs() <= ZERO_MEAN_TOLERANCE {
        stats::variance(noise)
    } else {
        stats::mean_square(noise)
    };
    if noise_power == 0.0 {
        return Ok(Snr::Infinite);
    }
    Ok(Snr::Ratio(stats::mean_square(signal) / noise_power))
}

/// Per-row residual `existing - recomputed`.
pub fn residual(existing: &Signature, recomputed: &Signature) -> Result<Vec<Vec<f64>>> {
    existing.check_same_shape(recomputed)?;
    Ok(existing
        .rows()
        .iter()
        .zip(recomputed.rows())
        .map(|(e, r)| e.values.iter().zip(&r.values).map(|(a, b)| a - b).collect())
        .collect())
}

/// Baseline noise level per monitoring segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub segment_snrs: Vec<Snr>,
    pub segment_length: usize,
}

impl NoiseProfile {
    pub fn new(segment_snrs: Vec<Snr>, segment_length: usize) -> Result<Self> {
        if segment_snrs.is_empty() || segment_length == 0 {
            return Err(Error::invalid("noise profile needs d ≥ 1 segments of positive length"));
        }
        Ok(Self {
            segment_snrs,
            segment_length,
        })
    }

    pub fn segments(&self) -> usize {
        self.segment_snrs.len()
    }

    /// Element-wise combination of profiles learned on the same segmentation.
    pub fn combine(profiles: &[NoiseProfile], aggregation: ProfileAggregation) -> Result<NoiseProfile> {
        let first = profiles
            .first()
            .ok_or_else(|| Error::invalid("no noise profiles to combine"))?;
        if profiles
            .iter()
            .any(|p| p.segment_length != first.segment_length || p.segments() != first.segments())
        {
            return Err(Error::Alignment("noise profiles use different segmentations".into()));
        }
        let snrs = (0..first.segments())
            .map(|i| {
                let column: Vec<Snr> = profiles.iter().map(|p| p.segment_snrs[i]).collect();
                aggregation.apply(&column)
            })
            .collect();
        NoiseProfile::new(snrs, first.segment_length)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profile: NoiseProfile = serde_json::from_str(&text)?;
        NoiseProfile::new(profile.segment_snrs, profile.segment_length)
    }
}

/// How per-segment SNRs from several monitoring observations are merged
/// into one baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ProfileAggregation {
    /// Lowest SNR seen: the noisiest observation still counts as noise.
    Min,
    /// Empirical quantile (in dB) of the finite observations; infinite
    /// observations rank above every finite one.
    Quantile { q: f64 },
}

impl ProfileAggregation {
    fn apply(&self, column: &[Snr]) -> Snr {
        match *self {
            ProfileAggregation::Min => column.iter().copied().fold(Snr::Infinite, Snr::min),
            ProfileAggregation::Quantile { q } => {
                let mut sorted = column.to_vec();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
                let idx = ((q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).round()) as usize;
                sorted[idx]
            }
        }
    }
}

/// Per-segment SNR of the existing signature against its residual, pooling
/// all rows. The segments are `[i * L, (i + 1) * L)` with `L = len / d`.
pub fn segment_snrs(existing: &Signature, recomputed: &Signature, d: usize) -> Result<NoiseProfile> {
    if d == 0 {
        return Err(Error::invalid("number of segments d must be ≥ 1"));
    }
    let noise = residual(existing, recomputed)?;
    let seg = existing.len() / d;
    if seg == 0 {
        return Err(Error::invalid(format!(
            "{d} segments do not fit a grid of {}",
            existing.len()
        )));
    }
    let snrs = (0..d)
        .map(|i| {
            let range = i * seg..(i + 1) * seg;
            let signal: Vec<f64> = existing
                .rows()
                .iter()
                .flat_map(|r| r.values[range.clone()].iter().copied())
                .collect();
            let n: Vec<f64> = noise.iter().flat_map(|r| r[range.clone()].iter().copied()).collect();
            snr(&signal, &n)
        })
        .collect::<Result<Vec<_>>>()?;
    NoiseProfile::new(snrs, seg)
}

/// Learns the baseline profile from `d` recomputed slices, one per
/// monitoring segment, that tile the start of the grid.
pub fn learn_noise_profile(existing: &Signature, recomputed_segments: &[Signature], d: usize) -> Result<NoiseProfile> {
    if d == 0 {
        return Err(Error::invalid("number of segments d must be ≥ 1"));
    }
    if recomputed_segments.len() != d {
        return Err(Error::Alignment(format!(
            "expected {d} recomputed segments, got {}",
            recomputed_segments.len()
        )));
    }
    let seg = recomputed_segments[0].len();
    if d * seg > existing.len() {
        return Err(Error::Alignment(format!(
            "{d} segments of length {seg} exceed grid length {}",
            existing.len()
        )));
    }
    let snrs = recomputed_segments
        .iter()
        .enumerate()
        .map(|(i, slice)| {
            if slice.len() != seg {
                return Err(Error::Alignment(format!(
                    "segment {i} has length {}, expected {seg}",
                    slice.len()
                )));
            }
            let reference = existing.slice(i * seg, seg)?;
            let noise = residual(&reference, slice)?;
            let signal: Vec<f64> = reference.rows().iter().flat_map(|r| r.values.iter().copied()).collect();
            let n: Vec<f64> = noise.into_iter().flatten().collect();
            snr(&signal, &n)
        })
        .collect::<Result<Vec<_>>>()?;
    NoiseProfile::new(snrs, seg)
}
