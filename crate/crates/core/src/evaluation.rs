//! Rule scoring: classification-style counts against observed block
//! outcomes, their summary metrics, squared deviation from an oracle, and
//! size-weighted allocation summaries.

use serde::{Deserialize, Serialize};

use crate::data::ClusterData;
use crate::error::{Error, Result};
use crate::estimands::Target;

/// Classification counts of a rule against observed cluster outcomes.
///
/// A cluster is a true positive when its observed mean outcome exceeds the
/// target and its observed treated fraction exceeds the rule's allocation;
/// the remaining cells follow with weak inequalities on the "negative"
/// sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Tabulates confusion counts for per-cluster allocations `predictions`.
pub fn confusion(
    clusters: &[ClusterData],
    predictions: &[f64],
    target: Target,
) -> Result<ConfusionCounts> {
    if clusters.len() != predictions.len() {
        return Err(Error::InvalidData(format!(
            "{} clusters but {} predictions",
            clusters.len(),
            predictions.len()
        )));
    }
    let mut c = ConfusionCounts { tp: 0, tn: 0, fp: 0, fn_: 0 };
    for (cluster, &theta) in clusters.iter().zip(predictions) {
        let outcome_high = cluster.ybar() > target.value();
        let allocated_high = cluster.abar() > theta;
        match (outcome_high, allocated_high) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Accuracy, two-sided F1 (sum of the F1 and the label-flipped F1, range
/// [0, 2]), and the Matthews correlation coefficient (zero by convention
/// when any denominator factor vanishes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub f1_two_sided: f64,
    pub mcc: f64,
}

pub fn metrics(counts: &ConfusionCounts) -> Result<MetricsSummary> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::InvalidData("no evaluated clusters".into()));
    }
    let (tp, tn, fp, fnn) =
        (counts.tp as f64, counts.tn as f64, counts.fp as f64, counts.fn_ as f64);
    let accuracy = (tp + tn) / total as f64;
    let f1_pos = if 2.0 * tp + fp + fnn > 0.0 { 2.0 * tp / (2.0 * tp + fp + fnn) } else { 0.0 };
    let f1_neg = if 2.0 * tn + fp + fnn > 0.0 { 2.0 * tn / (2.0 * tn + fp + fnn) } else { 0.0 };
    let denom = (tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn);
    let mcc = if denom > 0.0 { (tp * tn - fp * fnn) / denom.sqrt() } else { 0.0 };
    Ok(MetricsSummary { accuracy, f1_two_sided: f1_pos + f1_neg, mcc })
}

/// Per-cluster squared deviations between a rule and an oracle, plus the
/// mean.
pub fn squared_deviation(predictions: &[f64], oracle: &[f64]) -> Result<(Vec<f64>, f64)> {
    if predictions.len() != oracle.len() || predictions.is_empty() {
        return Err(Error::InvalidData("prediction/oracle length mismatch".into()));
    }
    let devs: Vec<f64> =
        predictions.iter().zip(oracle).map(|(p, o)| (p - o) * (p - o)).collect();
    let mean = devs.iter().sum::<f64>() / devs.len() as f64;
    Ok((devs, mean))
}

/// One group's size-weighted mean allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMeanOmar {
    pub group: String,
    pub weighted_mean: f64,
    pub total_weight: f64,
}

/// Size-weighted mean allocations per group and overall:
/// sum(w_i theta_i) / sum(w_i) over each group's clusters.
pub fn weighted_mean_omar(
    predictions: &[f64],
    groups: &[String],
    weights: &[f64],
) -> Result<(Vec<GroupMeanOmar>, f64)> {
    if predictions.len() != groups.len() || predictions.len() != weights.len() {
        return Err(Error::InvalidData("prediction/group/weight length mismatch".into()));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidData("nothing to aggregate".into()));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidData("weights must be positive".into()));
    }
    let mut keys: Vec<String> = groups.to_vec();
    keys.sort();
    keys.dedup();
    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        let (mut num, mut den) = (0.0, 0.0);
        for ((p, g), w) in predictions.iter().zip(groups).zip(weights) {
            if *g == key {
                num += p * w;
                den += w;
            }
        }
        out.push(GroupMeanOmar { group: key, weighted_mean: num / den, total_weight: den });
    }
    let num: f64 = predictions.iter().zip(weights).map(|(p, w)| p * w).sum();
    let den: f64 = weights.iter().sum();
    Ok((out, num / den))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Household;
    use approx::assert_abs_diff_eq;

    fn cluster(ybar_n: (usize, usize), abar_n: usize) -> ClusterData {
        let (y_count, n) = ybar_n;
        let hh = (0..n)
            .map(|j| Household {
                y: u8::from(j < y_count),
                a: u8::from(j < abar_n),
                x: vec![0.0],
            })
            .collect();
        ClusterData::new("t", hh).unwrap()
    }

    #[test]
    fn boundary_rules_land_in_expected_cells() {
        let clusters =
            vec![cluster((3, 4), 2), cluster((1, 4), 2), cluster((3, 4), 0), cluster((1, 4), 0)];
        let t = Target::new(0.5).unwrap();
        // theta = 0: any treated cluster has abar > 0.
        let c = confusion(&clusters, &[0.0; 4], t).unwrap();
        assert_eq!((c.tp, c.fp), (1, 1));
        assert_eq!((c.tn, c.fn_), (1, 1));
        // theta = 1: no cluster exceeds, so only TN/FN.
        let c = confusion(&clusters, &[1.0; 4], t).unwrap();
        assert_eq!(c.tp + c.fp, 0);
        assert_eq!(c.tn + c.fn_, 4);
    }

    #[test]
    fn hand_tabulated_fixture() {
        // Six clusters, target 0.5, rule 0.5 for every cluster.
        let clusters = vec![
            cluster((3, 4), 3), // ybar .75 > .5, abar .75 > .5 -> TP
            cluster((3, 4), 2), // ybar .75 > .5, abar .5 <= .5 -> FN
            cluster((2, 4), 3), // ybar .5 <= .5, abar .75 > .5 -> FP
            cluster((2, 4), 2), // TN
            cluster((4, 4), 4), // TP
            cluster((0, 4), 0), // TN
        ];
        let c = confusion(&clusters, &[0.5; 6], Target::new(0.5).unwrap()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, tn: 2, fp: 1, fn_: 1 });
    }

    #[test]
    fn perfect_classification_metrics() {
        let m = metrics(&ConfusionCounts { tp: 5, tn: 7, fp: 0, fn_: 0 }).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1_two_sided, 2.0);
        assert_eq!(m.mcc, 1.0);
    }

    #[test]
    fn uninformative_counts() {
        let m = metrics(&ConfusionCounts { tp: 25, tn: 25, fp: 25, fn_: 25 }).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.mcc, 0.0);
        assert_abs_diff_eq!(m.f1_two_sided, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mcc_formula_fixture() {
        // Independent evaluation: (40*30 - 20*10) / sqrt(60*50*50*40).
        let m = metrics(&ConfusionCounts { tp: 40, tn: 30, fp: 20, fn_: 10 }).unwrap();
        let expected = (40.0 * 30.0 - 20.0 * 10.0) / (60.0f64 * 50.0 * 50.0 * 40.0).sqrt();
        assert_abs_diff_eq!(m.mcc, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(m.mcc, 0.408_248_290_463_863, epsilon = 1e-12);
    }

    #[test]
    fn zero_denominator_conventions() {
        for c in [
            ConfusionCounts { tp: 0, tn: 5, fp: 0, fn_: 0 },
            ConfusionCounts { tp: 5, tn: 0, fp: 0, fn_: 0 },
            ConfusionCounts { tp: 2, tn: 0, fp: 0, fn_: 3 },
            ConfusionCounts { tp: 0, tn: 2, fp: 3, fn_: 0 },
        ] {
            let m = metrics(&c).unwrap();
            assert_eq!(m.mcc, 0.0);
            assert!(m.f1_two_sided.is_finite());
            assert!((0.0..=1.0).contains(&m.accuracy));
        }
        assert!(metrics(&ConfusionCounts { tp: 0, tn: 0, fp: 0, fn_: 0 }).is_err());
    }

    #[test]
    fn metric_ranges_hold_for_random_counts() {
        let mut state = 12345u64;
        for _ in 0..10_000 {
            state = crate::util::mix64(state);
            let c = ConfusionCounts {
                tp: (state % 50) as usize,
                tn: ((state >> 8) % 50) as usize,
                fp: ((state >> 16) % 50) as usize,
                fn_: ((state >> 24) % 50) as usize,
            };
            if c.total() == 0 {
                continue;
            }
            let m = metrics(&c).unwrap();
            assert!((0.0..=1.0).contains(&m.accuracy));
            assert!((0.0..=2.0).contains(&m.f1_two_sided));
            assert!((-1.0..=1.0).contains(&m.mcc));
        }
    }

    #[test]
    fn confusion_is_order_invariant() {
        let clusters =
            vec![cluster((3, 4), 3), cluster((1, 4), 2), cluster((2, 4), 1), cluster((4, 4), 0)];
        let preds = [0.3, 0.6, 0.1, 0.9];
        let t = Target::new(0.6).unwrap();
        let a = confusion(&clusters, &preds, t).unwrap();
        let rev_clusters: Vec<ClusterData> = clusters.iter().rev().cloned().collect();
        let rev_preds: Vec<f64> = preds.iter().rev().copied().collect();
        let b = confusion(&rev_clusters, &rev_preds, t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn squared_deviation_basics() {
        let (devs, mean) = squared_deviation(&[0.2, 0.5], &[0.2, 0.5]).unwrap();
        assert_eq!(devs, vec![0.0, 0.0]);
        assert_eq!(mean, 0.0);
        let (devs, mean) = squared_deviation(&[0.3, 0.6], &[0.2, 0.5]).unwrap();
        for d in devs {
            assert_abs_diff_eq!(d, 0.01, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(mean, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn weighted_mean_single_group_equal_sizes_is_arithmetic_mean() {
        let preds = [0.2, 0.4, 0.9];
        let groups = vec!["g".to_string(); 3];
        let weights = [5.0, 5.0, 5.0];
        let (per_group, overall) = weighted_mean_omar(&preds, &groups, &weights).unwrap();
        assert_eq!(per_group.len(), 1);
        assert_abs_diff_eq!(per_group[0].weighted_mean, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(overall, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weight_dominant_cluster_pulls_mean() {
        let preds = [0.8, 0.1];
        let groups = vec!["g".to_string(); 2];
        let weights = [100.0, 1.0];
        let (_, overall) = weighted_mean_omar(&preds, &groups, &weights).unwrap();
        assert!((overall - 0.8).abs() < 0.01);
    }

    #[test]
    fn two_group_fixture_matches_hand_computation() {
        let preds = [0.2, 0.6, 1.0];
        let groups = vec!["a".to_string(), "a".to_string(), "b".to_string()];
        let weights = [2.0, 4.0, 3.0];
        let (per_group, overall) = weighted_mean_omar(&preds, &groups, &weights).unwrap();
        assert_abs_diff_eq!(per_group[0].weighted_mean, (0.4 + 2.4) / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(per_group[1].weighted_mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(overall, (0.4 + 2.4 + 3.0) / 9.0, epsilon = 1e-12);
        assert!(weighted_mean_omar(&preds, &groups, &[1.0, 0.0, 1.0]).is_err());
    }
}
