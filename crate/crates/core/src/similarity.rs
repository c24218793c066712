//! Normalization and the similarity / distance measures used to compare a
//! trial experience or recomputed signature against an existing signature.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Which direction of a measure means "more similar".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherIsSimilar,
    LowerIsSimilar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMethod {
    Pcc,
    #[serde(rename = "ed")]
    Euclidean,
    #[serde(rename = "cs")]
    Cosine,
    Rmse,
}

impl SimilarityMethod {
    pub const ALL: [SimilarityMethod; 4] = [Self::Pcc, Self::Euclidean, Self::Cosine, Self::Rmse];

    pub fn polarity(self) -> Polarity {
        match self {
            Self::Pcc | Self::Cosine => Polarity::HigherIsSimilar,
            Self::Euclidean | Self::Rmse => Polarity::LowerIsSimilar,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pcc => "pcc",
            Self::Euclidean => "ed",
            Self::Cosine => "cs",
            Self::Rmse => "rmse",
        }
    }
}

impl fmt::Display for SimilarityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pcc" => Ok(Self::Pcc),
            "ed" | "euclidean" => Ok(Self::Euclidean),
            "cs" | "cosine" => Ok(Self::Cosine),
            "rmse" => Ok(Self::Rmse),
            other => Err(Error::invalid(format!(
                "unknown similarity method `{other}` (expected pcc, ed, cs or rmse)"
            ))),
        }
    }
}

/// A measured value together with the polarity of the measure that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub method: SimilarityMethod,
    pub value: f64,
}

impl Similarity {
    pub fn polarity(&self) -> Polarity {
        self.method.polarity()
    }

    /// True when `self` is strictly less similar than `other` under the
    /// method's polarity.
    pub fn is_worse_than(&self, other: f64) -> bool {
        match self.polarity() {
            Polarity::HigherIsSimilar => self.value < other,
            Polarity::LowerIsSimilar => self.value > other,
        }
    }
}

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < min {
        return Err(Error::invalid(format!(
            "series needs at least {min} points, got {}",
            a.len()
        )));
    }
    Ok(())
}

/// Divides `values` by their population standard deviation.
pub fn normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("normalization needs at least 2 points"));
    }
    let std = stats::std_dev(values);
    if std == 0.0 || !std.is_finite() {
        return Err(Error::ConstantSeries("trial".into()));
    }
    Ok(values.iter().map(|v| v / std).collect())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b, 1)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Root mean squared error, `euclidean(a, b) / sqrt(n)`.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(euclidean(a, b)? / (a.len() as f64).sqrt())
}

/// Pearson correlation, clamped to `[-1, 1]`.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b, 2)?;
    let ma = stats::mean(a);
    let mb = stats::mean(b);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input series"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b, 1)?;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedAngle);
    }
    // Through the chord between the unit vectors rather than dot / (|a||b|):
    // accurate near ±1, so positive rescalings give exactly 1.
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    let c = if diff <= sum { 1.0 - diff / 2.0 } else { sum / 2.0 - 1.0 };
    Ok(c.clamp(-1.0, 1.0))
}

pub fn similarity(a: &[f64], b: &[f64], method: SimilarityMethod) -> Result<Similarity> {
    let value = match method {
        SimilarityMethod::Pcc => pcc(a, b)?,
        SimilarityMethod::Euclidean => euclidean(a, b)?,
        SimilarityMethod::Cosine => cosine(a, b)?,
        SimilarityMethod::Rmse => rmse(a, b)?,
    };
    Ok(Similarity { method, value })
}
