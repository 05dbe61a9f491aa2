//! Cohort outcome statistics with explicit censoring rules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CensoredDuration, DigitalTwin, ResponseCategory};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("median of an empty set is undefined")]
    Empty,
    #[error("non-finite value in input")]
    NonFinite,
}

/// Median with the even-count midpoint rule.
pub fn median(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

fn range(values: &[f64]) -> Option<[f64; 2]> {
    let min = values.iter().copied().reduce(f64::min)?;
    let max = values.iter().copied().reduce(f64::max)?;
    Some([min, max])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CensoringPolicy {
    /// Censored observations contribute their observed lower bound.
    #[default]
    ObservedBound,
    /// Censored observations are dropped.
    ExcludeCensored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoredStats {
    pub median: Option<f64>,
    pub range: Option<[f64; 2]>,
    pub n_known: usize,
    pub n_censored: usize,
}

/// Median and range over the numeric durations selected by `policy`.
/// Durations without a value never contribute.
pub fn censored_summary<'a, I>(durations: I, policy: CensoringPolicy) -> CensoredStats
where
    I: IntoIterator<Item = &'a CensoredDuration>,
{
    let mut values = Vec::new();
    let mut n_censored = 0;
    for d in durations {
        let Some(m) = d.months else { continue };
        if d.censored {
            n_censored += 1;
            if policy == CensoringPolicy::ExcludeCensored {
                continue;
            }
        }
        values.push(m);
    }
    CensoredStats {
        median: median(&values).ok(),
        range: range(&values),
        n_known: values.len(),
        n_censored,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineStats {
    pub n: usize,
    pub excluded: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub range: Option<[f64; 2]>,
}

/// Statistics over the treatment line of the study therapy; twins without
/// a line are excluded and counted.
pub fn line_stats(twins: &[DigitalTwin]) -> LineStats {
    let lines: Vec<f64> = twins.iter().filter_map(|t| t.treatment_line).map(f64::from).collect();
    LineStats {
        n: lines.len(),
        excluded: twins.len() - lines.len(),
        mean: (!lines.is_empty()).then(|| lines.iter().sum::<f64>() / lines.len() as f64),
        median: median(&lines).ok(),
        range: range(&lines),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitalStatus {
    Alive,
    Deceased,
    Unknown,
}

/// Vital status at data cut-off, read from the overall-survival record.
pub fn vital_status(twin: &DigitalTwin) -> VitalStatus {
    let raw = twin.os.raw.to_lowercase();
    if ["deceased", "died", "death", "dead"].iter().any(|w| raw.contains(w)) {
        VitalStatus::Deceased
    } else if raw.contains("alive") || raw.contains("ongoing") || twin.os.censored {
        VitalStatus::Alive
    } else {
        VitalStatus::Unknown
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n: usize,
    pub median_pfs: Option<f64>,
    pub pfs_range: Option<[f64; 2]>,
    pub pfs_known: usize,
    pub pfs_censored: usize,
    pub median_os: Option<f64>,
    pub os_range: Option<[f64; 2]>,
    pub os_known: usize,
    pub os_censored: usize,
    pub mean_line: Option<f64>,
    pub median_line: Option<f64>,
    pub line_range: Option<[f64; 2]>,
    pub median_cps: Option<f64>,
    pub cps_range: Option<[f64; 2]>,
    pub median_tmb: Option<f64>,
    pub tmb_range: Option<[f64; 2]>,
    /// Best (first recorded) response per twin.
    pub response_counts: BTreeMap<ResponseCategory, usize>,
    /// Full response sequences such as `"PR→PD"`.
    pub trajectory_counts: BTreeMap<String, usize>,
    pub vital_status_counts: BTreeMap<VitalStatus, usize>,
}

pub fn summarize(twins: &[DigitalTwin]) -> CohortSummary {
    summarize_with(twins, CensoringPolicy::default())
}

pub fn summarize_with(twins: &[DigitalTwin], policy: CensoringPolicy) -> CohortSummary {
    let pfs = censored_summary(twins.iter().map(|t| &t.pfs), policy);
    let os = censored_summary(twins.iter().map(|t| &t.os), policy);
    let lines = line_stats(twins);
    let cps: Vec<f64> = twins.iter().filter_map(|t| t.biomarkers.cps()).collect();
    let tmb: Vec<f64> = twins.iter().filter_map(|t| t.biomarkers.tmb).collect();

    let mut response_counts = BTreeMap::new();
    let mut trajectory_counts = BTreeMap::new();
    for t in twins {
        if let Some(best) = t.study_response.best() {
            *response_counts.entry(best).or_insert(0) += 1;
            let seq = t
                .study_response
                .categories
                .iter()
                .map(|c| c.code())
                .collect::<Vec<_>>()
                .join("→");
            *trajectory_counts.entry(seq).or_insert(0) += 1;
        }
    }
    let mut vital_status_counts: BTreeMap<VitalStatus, usize> =
        [VitalStatus::Alive, VitalStatus::Deceased, VitalStatus::Unknown]
            .into_iter()
            .map(|v| (v, 0))
            .collect();
    for t in twins {
        *vital_status_counts.entry(vital_status(t)).or_insert(0) += 1;
    }

    CohortSummary {
        n: twins.len(),
        median_pfs: pfs.median,
        pfs_range: pfs.range,
        pfs_known: pfs.n_known,
        pfs_censored: pfs.n_censored,
        median_os: os.median,
        os_range: os.range,
        os_known: os.n_known,
        os_censored: os.n_censored,
        mean_line: lines.mean,
        median_line: lines.median,
        line_range: lines.range,
        median_cps: median(&cps).ok(),
        cps_range: range(&cps),
        median_tmb: median(&tmb).ok(),
        tmb_range: range(&tmb),
        response_counts,
        trajectory_counts,
        vital_status_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Source;
    use crate::parse::parse_duration;
    use proptest::prelude::*;

    fn durations(raws: &[&str]) -> Vec<CensoredDuration> {
        raws.iter()
            .map(|r| parse_duration(r).value.unwrap_or_default())
            .collect()
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[40., 40., 41., 75., 81., 85., 95.]), Ok(75.0));
        assert_eq!(median(&[5.0]), Ok(5.0));
        assert_eq!(median(&[1., 2., 3., 100.]), Ok(2.5));
        assert_eq!(median(&[]), Err(StatsError::Empty));
    }

    #[test]
    fn literature_pfs_and_os() {
        let pfs = durations(&[
            "10",
            "3.3",
            "0.9",
            "1.6",
            "2.6",
            "1.9",
            "- (ongoing)",
            "11.2",
            ">12 (ongoing)",
            ">36 (ongoing)",
            "4",
            "2",
            ">5 (ongoing)",
            ">15 (ongoing)",
        ]);
        let s = censored_summary(&pfs, CensoringPolicy::ObservedBound);
        assert_eq!(s.n_known, 13);
        assert_eq!(s.median, Some(4.0));

        let os = durations(&[
            "16 (deceased)",
            "9.9 (deceased)",
            "2.8 (deceased)",
            "2.4 (deceased)",
            "2.8 (deceased)",
            "2.1 (deceased)",
            "4.4 (alive at data cut-off)",
            "12.6 (alive at data cut-off)",
            "39 (alive at data cut-off)",
            "45 (alive at data cut-off)",
            "n/a",
            "48 (alive at data cut-off)",
        ]);
        let s = censored_summary(&os, CensoringPolicy::ObservedBound);
        assert_eq!(s.n_known, 11);
        assert_eq!(s.median, Some(9.9));
        assert_eq!(s.range, Some([2.1, 48.0]));
    }

    #[test]
    fn all_unknown_has_no_median() {
        let d = durations(&["n/a", "- (ongoing)"]);
        let s = censored_summary(&d, CensoringPolicy::ObservedBound);
        assert_eq!(s.median, None);
        assert_eq!(s.n_known, 0);
    }

    #[test]
    fn exclude_censored_policy() {
        let d = durations(&["1", ">30 (ongoing)", "3"]);
        let s = censored_summary(&d, CensoringPolicy::ExcludeCensored);
        assert_eq!(s.median, Some(2.0));
        assert_eq!(s.n_censored, 1);
    }

    fn with_line(line: u32) -> DigitalTwin {
        let mut t = DigitalTwin::new(format!("t{line}"), Source::Institutional, "x");
        t.treatment_line = Some(line);
        t
    }

    #[test]
    fn line_stats_examples() {
        let twins: Vec<_> = [3, 3, 2, 4, 2, 3, 3].into_iter().map(with_line).collect();
        let s = line_stats(&twins);
        assert!((s.mean.unwrap() - 20.0 / 7.0).abs() < 1e-12);
        assert_eq!(s.range, Some([2.0, 4.0]));

        let s = line_stats(&[with_line(3)]);
        assert_eq!((s.mean, s.median), (Some(3.0), Some(3.0)));

        let mut no_line = with_line(1);
        no_line.treatment_line = None;
        let s = line_stats(&[with_line(2), no_line]);
        assert_eq!((s.n, s.excluded), (1, 1));
    }

    #[test]
    fn empty_cohort() {
        let s = summarize(&[]);
        assert_eq!(s.n, 0);
        assert_eq!(s.median_pfs, None);
        assert_eq!(s.vital_status_counts.values().sum::<usize>(), 0);
    }

    proptest! {
        #[test]
        fn median_is_permutation_invariant_and_bounded(mut v in prop::collection::vec(-1e6f64..1e6, 1..40), seed in any::<u64>()) {
            let m = median(&v).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= m && m <= hi);
            // deterministic shuffle
            let n = v.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(median(&v).unwrap(), m);
        }

        #[test]
        fn adding_max_never_lowers_median(v in prop::collection::vec(0f64..500.0, 1..30), extra in 0f64..100.0, censored in any::<bool>()) {
            let ds: Vec<CensoredDuration> = v.iter().map(|m| CensoredDuration { months: Some(*m), censored: false, raw: String::new() }).collect();
            let before = censored_summary(&ds, CensoringPolicy::ObservedBound).median.unwrap();
            let max = v.iter().copied().fold(0.0, f64::max);
            let mut more = ds.clone();
            more.push(CensoredDuration { months: Some(max + extra), censored, raw: String::new() });
            let after = censored_summary(&more, CensoringPolicy::ObservedBound).median.unwrap();
            prop_assert!(after >= before);
        }
    }
}
