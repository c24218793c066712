//! Domain types shared by every stage of the pipeline, and the signature
//! CSV format.
//!
//! A [`Signature`] is a matrix whose rows are QoS parameters and whose
//! columns are timestamps of a [`TimeGrid`]. Signatures built from raw
//! performance data are normalized so every row has unit population
//! standard deviation. Noisy copies produced by injection keep their raw
//! scale, so the type itself only enforces shape and finiteness; use
//! [`Signature::is_normalized`] to check the scaling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Tolerance on the unit standard deviation of a normalized row.
pub const UNIT_STD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    length: usize,
    resolution: String,
}

impl TimeGrid {
    pub fn new(length: usize, resolution: impl Into<String>) -> Result<Self> {
        if length < 2 {
            return Err(Error::invalid(format!(
                "time grid needs at least 2 timestamps, got {length}"
            )));
        }
        Ok(Self {
            length,
            resolution: resolution.into(),
        })
    }

    /// Daily grid, the resolution used throughout the benchmark.
    pub fn days(length: usize) -> Result<Self> {
        Self::new(length, "day")
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn resolution(&self) -> &str {
        &self.resolution
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosSeries {
    pub parameter: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub unit: String,
}

impl QosSeries {
    pub fn new(parameter: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let series = Self {
            parameter: parameter.into(),
            values,
            unit: String::new(),
        };
        series.check_finite()?;
        Ok(series)
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = unit.into();
        self
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(self.parameter.clone()))
        }
    }

    pub fn std_dev(&self) -> f64 {
        stats::std_dev(&self.values)
    }

    pub fn is_normalized(&self) -> bool {
        (self.std_dev() - 1.0).abs() < UNIT_STD_TOLERANCE
    }

    /// Divides the series by its population standard deviation.
    pub fn normalized(&self) -> Result<Self> {
        let std = self.std_dev();
        if std == 0.0 || !std.is_finite() {
            return Err(Error::ConstantSeries(self.parameter.clone()));
        }
        Ok(Self {
            parameter: self.parameter.clone(),
            values: self.values.iter().map(|v| v / std).collect(),
            unit: self.unit.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    provider_id: String,
    grid: TimeGrid,
    rows: Vec<QosSeries>,
}

impl Signature {
    /// Builds a signature from rows that are already on `grid`, without
    /// rescaling them.
    pub fn new(provider_id: impl Into<String>, grid: TimeGrid, rows: Vec<QosSeries>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySignature);
        }
        for row in &rows {
            if row.values.len() != grid.len() {
                return Err(Error::LengthMismatch {
                    expected: grid.len(),
                    found: row.values.len(),
                });
            }
            row.check_finite()?;
        }
        Ok(Self {
            provider_id: provider_id.into(),
            grid,
            rows,
        })
    }

    /// Builds a signature from raw rows, dividing each by its population
    /// standard deviation. Constant rows are rejected.
    pub fn from_raw(provider_id: impl Into<String>, grid: TimeGrid, rows: Vec<QosSeries>) -> Result<Self> {
        let rows = rows.iter().map(QosSeries::normalized).collect::<Result<Vec<_>>>()?;
        Self::new(provider_id, grid, rows)
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn rows(&self) -> &[QosSeries] {
        &self.rows
    }

    pub fn row(&self, parameter: &str) -> Option<&QosSeries> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_normalized(&self) -> bool {
        self.rows.iter().all(QosSeries::is_normalized)
    }

    pub fn with_provider_id(mut self, provider_id: impl Into<String>) -> Self {
        self.provider_id = provider_id.into();
        self
    }

    /// Applies `f` to every row's values, keeping parameter names and grid.
    pub fn map_rows<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[f64]) -> Vec<f64>,
    {
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| QosSeries {
                parameter: r.parameter.clone(),
                values: f(i, &r.values),
                unit: r.unit.clone(),
            })
            .collect();
        Self::new(self.provider_id.clone(), self.grid.clone(), rows)
    }

    /// Contiguous time slice `[start, start + length)` of every row.
    pub fn slice(&self, start: usize, length: usize) -> Result<Self> {
        if start + length > self.len() {
            return Err(Error::OutOfBounds(format!(
                "slice [{start}, {}) exceeds grid length {}",
                start + length,
                self.len()
            )));
        }
        let grid = TimeGrid::new(length, self.grid.resolution.clone())?;
        let rows = self
            .rows
            .iter()
            .map(|r| QosSeries {
                parameter: r.parameter.clone(),
                values: r.values[start..start + length].to_vec(),
                unit: r.unit.clone(),
            })
            .collect();
        Self::new(self.provider_id.clone(), grid, rows)
    }

    /// Errors unless `other` has the same grid length and parameter rows.
    pub fn check_same_shape(&self, other: &Signature) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        if self.rows.len() != other.rows.len()
            || self
                .rows
                .iter()
                .zip(&other.rows)
                .any(|(a, b)| a.parameter != b.parameter)
        {
            return Err(Error::Alignment(format!(
                "signatures `{}` and `{}` have different parameter rows",
                self.provider_id, other.provider_id
            )));
        }
        Ok(())
    }
}

/// One user's observed QoS series over a trial window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialExperience {
    pub user_id: String,
    pub parameter: String,
    pub trial_start: usize,
    pub values: Vec<f64>,
}

impl TrialExperience {
    pub fn new(
        user_id: impl Into<String>,
        parameter: impl Into<String>,
        trial_start: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let exp = Self {
            user_id: user_id.into(),
            parameter: parameter.into(),
            trial_start,
            values,
        };
        if exp.values.is_empty() {
            return Err(Error::invalid(format!("trial of `{}` is empty", exp.user_id)));
        }
        if !exp.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(exp.user_id.clone()));
        }
        Ok(exp)
    }

    pub fn trial_length(&self) -> usize {
        self.values.len()
    }

    /// Checks the trial fits inside `grid` and is strictly shorter than it.
    pub fn check_within(&self, grid: &TimeGrid) -> Result<()> {
        if self.trial_length() >= grid.len() {
            return Err(Error::invalid(format!(
                "trial length {} must be shorter than the grid ({})",
                self.trial_length(),
                grid.len()
            )));
        }
        if self.trial_start + self.trial_length() > grid.len() {
            return Err(Error::OutOfBounds(format!(
                "trial [{}, {}) of `{}` exceeds grid length {}",
                self.trial_start,
                self.trial_start + self.trial_length(),
                self.user_id,
                grid.len()
            )));
        }
        Ok(())
    }
}

/// Result of reading a signature file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSignature {
    pub signature: Signature,
    /// Parameters whose stored rows were not unit-std and were rescaled.
    pub renormalized: Vec<String>,
}

/// Reads a signature CSV. The provider id is taken from the file stem.
///
/// Rows that are not unit-std are re-normalized and listed in
/// [`LoadedSignature::renormalized`]; constant rows are an error.
pub fn read_signature(path: impl AsRef<Path>) -> Result<LoadedSignature> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let provider = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_signature(&text, provider, path)
}

/// Reads a recomputed (possibly noisy) signature exactly as stored, without
/// re-normalizing, so injected noise stays measurable.
pub fn read_signature_raw(path: impl AsRef<Path>) -> Result<Signature> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let provider = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_rows(&text, provider, path, false).map(|l| l.signature)
}

/// Parses signature CSV text; `origin` is used only in error messages.
pub fn parse_signature(text: &str, provider_id: impl Into<String>, origin: &Path) -> Result<LoadedSignature> {
    parse_rows(text, provider_id, origin, true)
}

fn parse_rows(text: &str, provider_id: impl Into<String>, origin: &Path, normalize: bool) -> Result<LoadedSignature> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "missing header line"))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first().map(|c| c.trim()) != Some("parameter") {
        return Err(Error::parse(origin, 1, "header must start with `parameter`"));
    }
    for (i, c) in columns.iter().enumerate().skip(1) {
        if c.trim() != format!("t{}", i - 1) {
            return Err(Error::parse(
                origin,
                1,
                format!("expected column `t{}`, found `{c}`", i - 1),
            ));
        }
    }
    let length = columns.len() - 1;

    let mut rows = Vec::new();
    let mut renormalized = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or_default().trim().to_string();
        if name.is_empty() {
            return Err(Error::parse(origin, lineno, "empty parameter name"));
        }
        let values = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(origin, lineno, format!("bad value `{f}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != length {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected {length} values, found {}", values.len()),
            ));
        }
        let series = QosSeries::new(name, values).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        if !normalize || series.is_normalized() {
            rows.push(series);
        } else {
            let normalized = series.normalized()?;
            renormalized.push(normalized.parameter.clone());
            rows.push(normalized);
        }
    }
    if !renormalized.is_empty() {
        log::warn!(
            "{}: re-normalized non-unit-std rows: {}",
            origin.display(),
            renormalized.join(", ")
        );
    }
    let grid = TimeGrid::days(length)?;
    let signature = Signature::new(provider_id, grid, rows)?;
    Ok(LoadedSignature {
        signature,
        renormalized,
    })
}

/// Renders a signature in the CSV format: `parameter,t0,...` header, one
/// line per row, values in shortest round-trip decimal form, LF endings.
pub fn format_signature(sig: &Signature) -> String {
    let mut out = String::from("parameter");
    for t in 0..sig.len() {
        let _ = write!(out, ",t{t}");
    }
    out.push('\n');
    for row in sig.rows() {
        out.push_str(&row.parameter);
        for v in &row.values {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn write_signature(sig: &Signature, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_signature(sig)).map_err(|e| Error::io(path, e))
}
