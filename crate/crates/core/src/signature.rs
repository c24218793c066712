//! Signature generation by normalized averaging of aligned trial
//! experiences, and piecewise aggregate approximation (PAA) for
//! down-sampling raw traces onto the signature grid.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{QosSeries, Signature, TimeGrid, TrialExperience};

/// Trial experiences of several users for one parameter over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialCohort {
    parameter: String,
    start: usize,
    length: usize,
    experiences: Vec<TrialExperience>,
}

impl TrialCohort {
    pub fn new(experiences: Vec<TrialExperience>) -> Result<Self> {
        let first = experiences
            .first()
            .ok_or_else(|| Error::Alignment("cohort has no experiences".into()))?;
        let (parameter, start, length) = (first.parameter.clone(), first.trial_start, first.trial_length());
        for e in &experiences {
            if e.parameter != parameter || e.trial_start != start || e.trial_length() != length {
                return Err(Error::Alignment(format!(
                    "experience of `{}` ({} @ {}+{}) does not match cohort window ({parameter} @ {start}+{length})",
                    e.user_id,
                    e.parameter,
                    e.trial_start,
                    e.trial_length()
                )));
            }
        }
        Ok(Self {
            parameter,
            start,
            length,
            experiences,
        })
    }

    pub fn parameter(&self) -> &str {
        &self.parameter
    }

    pub fn window(&self) -> (usize, usize) {
        (self.start, self.length)
    }

    pub fn experiences(&self) -> &[TrialExperience] {
        &self.experiences
    }

    /// Per-timestamp mean across users.
    pub fn mean_series(&self) -> Vec<f64> {
        let k = self.experiences.len() as f64;
        (0..self.length)
            .map(|t| self.experiences.iter().map(|e| e.values[t]).sum::<f64>() / k)
            .collect()
    }
}

/// Builds a signature from cohorts covering the full grid, one per
/// parameter: average across users per timestamp, then divide each mean
/// series by its population standard deviation.
pub fn generate_signature(
    provider_id: impl Into<String>,
    cohorts: &[TrialCohort],
    grid: &TimeGrid,
) -> Result<Signature> {
    if cohorts.is_empty() {
        return Err(Error::Alignment("no cohorts supplied".into()));
    }
    let mut rows = Vec::with_capacity(cohorts.len());
    for cohort in cohorts {
        if cohort.window() != (0, grid.len()) {
            return Err(Error::Alignment(format!(
                "cohort for `{}` covers {:?}, expected the full grid (0, {})",
                cohort.parameter,
                cohort.window(),
                grid.len()
            )));
        }
        if rows.iter().any(|r: &QosSeries| r.parameter == cohort.parameter) {
            return Err(Error::Alignment(format!(
                "parameter `{}` appears in more than one cohort",
                cohort.parameter
            )));
        }
        rows.push(QosSeries::new(cohort.parameter.clone(), cohort.mean_series())?);
    }
    Signature::from_raw(provider_id, grid.clone(), rows)
}

/// Recomputes a signature from the experiences of current trial users.
/// Same contract as [`generate_signature`].
pub fn recompute_signature(
    provider_id: impl Into<String>,
    current_cohorts: &[TrialCohort],
    grid: &TimeGrid,
) -> Result<Signature> {
    generate_signature(provider_id, current_cohorts, grid)
}

/// Frame boundaries `round(j * len / target)` for `j = 0..=target`, with
/// halves rounded up.
fn frame_bounds(len: usize, target: usize) -> impl Iterator<Item = usize> {
    (0..=target).map(move |j| (2 * j * len + target) / (2 * target))
}

/// Piecewise aggregate approximation: the mean of each of `target_length`
/// contiguous frames.
pub fn paa(values: &[f64], target_length: usize) -> Result<Vec<f64>> {
    if target_length == 0 {
        return Err(Error::invalid("PAA target length must be positive"));
    }
    if target_length > values.len() {
        return Err(Error::invalid(format!(
            "PAA target length {target_length} exceeds input length {}",
            values.len()
        )));
    }
    let bounds: Vec<usize> = frame_bounds(values.len(), target_length).collect();
    Ok(bounds
        .windows(2)
        .map(|w| {
            let frame = &values[w[0]..w[1]];
            frame.iter().sum::<f64>() / frame.len() as f64
        })
        .collect())
}

/// Reads the trial cohort CSV (`user_id,parameter,start,v0,v1,...`) and
/// groups rows into cohorts by `(parameter, start, length)`.
pub fn read_cohorts(path: impl AsRef<Path>) -> Result<Vec<TrialCohort>> {
    let experiences = read_experiences(path)?;
    let mut groups: BTreeMap<(String, usize, usize), Vec<TrialExperience>> = BTreeMap::new();
    for e in experiences {
        groups
            .entry((e.parameter.clone(), e.trial_start, e.trial_length()))
            .or_default()
            .push(e);
    }
    groups.into_values().map(TrialCohort::new).collect()
}

/// Reads the trial cohort CSV as a flat list of experiences.
pub fn read_experiences(path: impl AsRef<Path>) -> Result<Vec<TrialExperience>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() < 4 || &headers[0] != "user_id" || &headers[1] != "parameter" || &headers[2] != "start" {
        return Err(Error::parse(path, 1, "header must be `user_id,parameter,start,v0,...`"));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() < 4 {
            return Err(Error::parse(
                path,
                line,
                "row needs a user, parameter, start and ≥1 value",
            ));
        }
        let start = record[2]
            .parse::<usize>()
            .map_err(|e| Error::parse(path, line, format!("bad start `{}`: {e}", &record[2])))?;
        let values = record
            .iter()
            .skip(3)
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::parse(path, line, format!("bad value `{f}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(
            TrialExperience::new(&record[0], &record[1], start, values)
                .map_err(|e| Error::parse(path, line, e.to_string()))?,
        );
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::parse(path, line, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(user: &str, values: &[f64]) -> TrialExperience {
        TrialExperience::new(user, "tp", 0, values.to_vec()).unwrap()
    }

    fn cohort(users: &[&[f64]]) -> TrialCohort {
        TrialCohort::new(
            users
                .iter()
                .enumerate()
                .map(|(i, v)| exp(&format!("u{i}"), v))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_user_signature() {
        let grid = TimeGrid::days(3).unwrap();
        let sig = generate_signature("p", &[cohort(&[&[2.0, 4.0, 6.0]])], &grid).unwrap();
        let expected = [1.224_744_871_391_589, 2.449_489_742_783_178, 3.674_234_614_174_767];
        for (g, e) in sig.rows()[0].values.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn symmetric_users_cancel_to_constant() {
        let grid = TimeGrid::days(3).unwrap();
        let err = generate_signature("p", &[cohort(&[&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]])], &grid).unwrap_err();
        assert!(matches!(err, Error::ConstantSeries(_)));
    }

    #[test]
    fn identical_users_match_single_user() {
        let grid = TimeGrid::days(4).unwrap();
        let v = [3.0, 1.0, 4.0, 1.5];
        let one = generate_signature("p", &[cohort(&[&v])], &grid).unwrap();
        let many = generate_signature("p", &[cohort(&[&v, &v, &v, &v])], &grid).unwrap();
        for (a, b) in one.rows()[0].values.iter().zip(&many.rows()[0].values) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = recompute_signature("p", &[cohort(&[&v])], &grid).unwrap();
        assert_eq!(one, again);
    }

    #[test]
    fn alignment_errors() {
        let grid = TimeGrid::days(3).unwrap();
        assert!(matches!(recompute_signature("p", &[], &grid), Err(Error::Alignment(_))));
        assert!(matches!(TrialCohort::new(vec![]), Err(Error::Alignment(_))));
        let a = exp("a", &[1.0, 2.0, 3.0]);
        let b = TrialExperience::new("b", "tp", 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(TrialCohort::new(vec![a.clone(), b]), Err(Error::Alignment(_))));
        let short = TrialCohort::new(vec![exp("a", &[1.0, 2.0])]).unwrap();
        assert!(matches!(
            generate_signature("p", &[short], &grid),
            Err(Error::Alignment(_))
        ));
        let c1 = TrialCohort::new(vec![a.clone()]).unwrap();
        assert!(matches!(
            generate_signature("p", &[c1.clone(), c1], &grid),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn paa_examples() {
        assert_eq!(paa(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![1.5, 3.5]);
        let v = [0.3, 9.0, -1.0, 2.0, 5.5];
        assert_eq!(paa(&v, v.len()).unwrap(), v.to_vec());
        assert!(paa(&v, 0).is_err());
        assert!(paa(&v, 6).is_err());
        // 5 into 2: bounds 0, round(2.5)=3, 5
        assert_eq!(paa(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap(), vec![2.0, 4.5]);
    }

    #[test]
    fn paa_of_long_trace() {
        let raw: Vec<f64> = (0..65_000).map(|i| (i % 97) as f64).collect();
        let out = paa(&raw, 360).unwrap();
        assert_eq!(out.len(), 360);
        let sizes: Vec<usize> = frame_bounds(65_000, 360)
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect();
        assert!(sizes.iter().all(|&s| s == 180 || s == 181), "{sizes:?}");
    }

    #[test]
    fn cohort_csv_groups_by_window() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        std::fs::write(
            &path,
            "user_id,parameter,start,v0,v1,v2\nu1,tp,0,2,4,6\nu2,tp,0,2,4,6\nu3,lat,0,1,2,4\n",
        )
        .unwrap();
        let cohorts = read_cohorts(&path).unwrap();
        assert_eq!(cohorts.len(), 2);
        let tp = cohorts.iter().find(|c| c.parameter() == "tp").unwrap();
        assert_eq!(tp.experiences().len(), 2);
        std::fs::write(&path, "user,parameter,start,v0\nu1,tp,0,2\n").unwrap();
        assert!(read_cohorts(&path).is_err());
        std::fs::write(&path, "user_id,parameter,start,v0\nu1,tp,x,2\n").unwrap();
        assert!(matches!(read_cohorts(&path), Err(Error::Parse { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn users() -> impl Strategy<Value = Vec<Vec<f64>>> {
            (3usize..40, 1usize..8)
                .prop_flat_map(|(len, k)| prop::collection::vec(prop::collection::vec(1.0f64..1000.0, len), k))
        }

        fn build(users: &[Vec<f64>]) -> Result<Signature> {
            let grid = TimeGrid::days(users[0].len()).unwrap();
            let exps = users
                .iter()
                .enumerate()
                .map(|(i, v)| exp(&format!("u{i}"), v))
                .collect();
            generate_signature("p", &[TrialCohort::new(exps).unwrap()], &grid)
        }

        proptest! {
            #[test]
            fn permutation_invariant(users in users(), rot in 0usize..8) {
                let mut rotated = users.clone();
                let k = rotated.len();
                rotated.rotate_left(rot % k);
                if let (Ok(a), Ok(b)) = (build(&users), build(&rotated)) {
                    for (x, y) in a.rows()[0].values.iter().zip(&b.rows()[0].values) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
            }

            #[test]
            fn common_scale_invariant(users in users(), scale in 0.001f64..1000.0) {
                let scaled: Vec<Vec<f64>> = users.iter().map(|u| u.iter().map(|v| v * scale).collect()).collect();
                if let (Ok(a), Ok(b)) = (build(&users), build(&scaled)) {
                    for (x, y) in a.rows()[0].values.iter().zip(&b.rows()[0].values) {
                        prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
                    }
                }
            }

            #[test]
            fn paa_preserves_mean_when_divisible(frames in 1usize..30, per in 1usize..20, seed in any::<u64>()) {
                use rand::Rng;
                let mut rng = crate::seed::rng(seed);
                let v: Vec<f64> = (0..frames * per).map(|_| rng.random_range(-5.0..5.0)).collect();
                let out = paa(&v, frames).unwrap();
                let m_in = v.iter().sum::<f64>() / v.len() as f64;
                let m_out = out.iter().sum::<f64>() / out.len() as f64;
                prop_assert!((m_in - m_out).abs() < 1e-12);
            }
        }
    }
}
