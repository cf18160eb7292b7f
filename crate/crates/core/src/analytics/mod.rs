//! Reward-distribution summaries, variance ranking and CSV report emission.

mod dip;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use dip::dip_statistic;

pub const DEFAULT_BINS: usize = 50;

/// Bounds of the low and high extremal regions, both inclusive.
pub const EXTREMAL_LOW: f64 = 0.1;
pub const EXTREMAL_HIGH: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("cannot summarize an empty sample")]
    Empty,
    #[error("score {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("report i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("report csv on {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub min: f64,
    pub max: f64,
    /// Counts over equal-width bins of [0, 1]; the last bin is right-closed.
    pub histogram: Vec<u64>,
    pub dip: f64,
    pub extremal_mass: f64,
}

/// Bin index of `x` in `bins` equal-width bins over [0, 1].
pub fn bin_index(x: f64, bins: usize) -> usize {
    ((x * bins as f64) as usize).min(bins - 1)
}

pub fn summarize(scores: &[f64], bins: usize) -> Result<DistributionSummary, AnalyticsError> {
    if scores.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    if bins == 0 {
        return Err(AnalyticsError::NoBins);
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(AnalyticsError::OutOfRange { index, value });
    }

    // Moments are taken over the sorted sample so the result does not depend
    // on arrival order down to the last bit.
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut histogram = vec![0u64; bins];
    let mut extremal = 0usize;
    for (i, &x) in sorted.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
        histogram[bin_index(x, bins)] += 1;
        if x <= EXTREMAL_LOW || x >= EXTREMAL_HIGH {
            extremal += 1;
        }
    }
    let n = sorted.len();
    Ok(DistributionSummary {
        n,
        mean,
        variance: (m2 / n as f64).max(0.0),
        min: sorted[0],
        max: sorted[n - 1],
        histogram,
        dip: dip_statistic(&sorted),
        extremal_mass: extremal as f64 / n as f64,
    })
}

/// Population variance of each group, ranked descending with ties broken by
/// ascending prompt id. Groups with fewer than two scores are returned
/// separately.
pub fn rank_by_intra_prompt_variance(
    groups: &BTreeMap<String, Vec<f64>>,
) -> (Vec<(String, f64)>, Vec<String>) {
    let mut ranked = Vec::new();
    let mut excluded = Vec::new();
    for (id, scores) in groups {
        if scores.len() < 2 {
            excluded.push(id.clone());
            continue;
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &x) in sorted.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        ranked.push((id.clone(), (m2 / sorted.len() as f64).max(0.0)));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    (ranked, excluded)
}

/// Keeps filenames portable whatever the prompt id looks like.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_histogram(path: &Path, histogram: &[u64]) -> Result<(), AnalyticsError> {
    let csv_err = |source| AnalyticsError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
    let bins = histogram.len();
    for (i, count) in histogram.iter().enumerate() {
        let lo = i as f64 / bins as f64;
        let hi = (i + 1) as f64 / bins as f64;
        w.write_record([lo.to_string(), hi.to_string(), count.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|source| AnalyticsError::Io { path: path.to_path_buf(), source })
}

/// Writes `summary.csv`, one `hist_<prompt>.csv` per prompt and one
/// `global_hist_<reward>.csv` per global summary into `dir`. Returns the
/// written paths in write order.
pub fn emit_report(
    per_prompt: &BTreeMap<String, DistributionSummary>,
    global: &BTreeMap<String, DistributionSummary>,
    dir: &Path,
) -> Result<Vec<PathBuf>, AnalyticsError> {
    fs::create_dir_all(dir).map_err(|source| AnalyticsError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();

    let summary_path = dir.join("summary.csv");
    let csv_err = |source| AnalyticsError::Csv { path: summary_path.clone(), source };
    let mut w = csv::Writer::from_path(&summary_path).map_err(csv_err)?;
    w.write_record(["prompt_id", "n", "mean", "variance", "min", "max", "dip", "extremal_mass"])
        .map_err(csv_err)?;
    for (id, s) in per_prompt {
        w.write_record([
            id.clone(),
            s.n.to_string(),
            s.mean.to_string(),
            s.variance.to_string(),
            s.min.to_string(),
            s.max.to_string(),
            s.dip.to_string(),
            s.extremal_mass.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| AnalyticsError::Io { path: summary_path.clone(), source })?;
    written.push(summary_path.clone());

    for (id, s) in per_prompt {
        let path = dir.join(format!("hist_{}.csv", file_stem(id)));
        write_histogram(&path, &s.histogram)?;
        written.push(path);
    }
    for (reward, s) in global {
        let path = dir.join(format!("global_hist_{}.csv", file_stem(reward)));
        write_histogram(&path, &s.histogram)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evenly_spaced_extremal_mass() {
        let scores: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let s = summarize(&scores, DEFAULT_BINS).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert_eq!(s.extremal_mass, 22.0 / 101.0);
        assert_eq!(s.histogram.iter().sum::<u64>(), 101);
        // 1.0 lands in the right-closed last bin.
        assert_eq!(s.histogram[49], 3);
    }

    #[test]
    fn single_score() {
        let s = summarize(&[0.5], 10).unwrap();
        assert_eq!((s.mean, s.variance, s.extremal_mass), (0.5, 0.0, 0.0));
        assert!(s.dip >= 0.0 && s.dip <= 0.25);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(summarize(&[], 10), Err(AnalyticsError::Empty)));
        assert!(matches!(
            summarize(&[0.2, 1.5], 10),
            Err(AnalyticsError::OutOfRange { index: 1, .. })
        ));
        assert!(matches!(summarize(&[f64::NAN], 10), Err(AnalyticsError::OutOfRange { .. })));
    }

    #[test]
    fn ranking_orders_and_excludes() {
        let groups: BTreeMap<String, Vec<f64>> = [
            ("b".to_string(), vec![0.5, 0.5]),
            ("a".to_string(), vec![0.0, 1.0]),
            ("c".to_string(), vec![0.2]),
            ("d".to_string(), vec![1.0, 0.0]),
        ]
        .into_iter()
        .collect();
        let (ranked, excluded) = rank_by_intra_prompt_variance(&groups);
        let ids: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a", "d", "b"]);
        assert_eq!(ranked[0].1, 0.25);
        assert_eq!(excluded, ["c"]);
    }
}
