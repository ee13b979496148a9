//! Trial-by-trial agreement between a model and human observers on the same
//! samples: accuracy gap, observed consistency and error consistency (Cohen's
//! kappa over binary correctness).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRecord {
    pub sample_id: String,
    /// Distortion or stimulus condition the sample belongs to.
    #[serde(default)]
    pub condition: String,
    pub decision: usize,
    pub correct: bool,
    /// When present, `correct` must agree with `decision == truth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyAveraging {
    /// Mean over conditions of the per-condition gap.
    #[default]
    ConditionGroups,
    /// Gap of the pooled accuracies.
    Samples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub accuracy_difference: f64,
    pub observed_consistency: f64,
    pub error_consistency: f64,
    /// Fraction of samples with identical decisions, right or wrong.
    pub raw_agreement: f64,
    pub model_accuracy: f64,
    pub human_accuracy: f64,
    pub num_samples: usize,
}

fn index(records: &[DecisionRecord], who: &str) -> Result<BTreeMap<String, DecisionRecord>> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(t) = r.truth {
            if (r.decision == t) != r.correct {
                return Err(Error::Data(format!("{who} record {}: correct flag disagrees with truth", r.sample_id)));
            }
        }
        if out.insert(r.sample_id.clone(), r.clone()).is_some() {
            return Err(Error::IdMismatch(format!("duplicate {who} sample {}", r.sample_id)));
        }
    }
    Ok(out)
}

fn accuracy<'a>(it: impl Iterator<Item = &'a DecisionRecord>) -> f64 {
    let (mut n, mut c) = (0usize, 0usize);
    for r in it {
        n += 1;
        c += usize::from(r.correct);
    }
    c as f64 / n as f64
}

pub fn human_consistency(
    model: &[DecisionRecord],
    human: &[DecisionRecord],
    averaging: AccuracyAveraging,
) -> Result<ConsistencyReport> {
    let m = index(model, "model")?;
    let h = index(human, "human")?;
    let (mk, hk): (BTreeSet<&String>, BTreeSet<&String>) = (m.keys().collect(), h.keys().collect());
    if mk != hk {
        let missing: Vec<&&String> = mk.symmetric_difference(&hk).take(5).collect();
        return Err(Error::IdMismatch(format!("{} ids differ, e.g. {missing:?}", mk.symmetric_difference(&hk).count())));
    }
    if m.is_empty() {
        return Err(Error::EmptyInput("no decisions".into()));
    }
    let n = m.len();
    let acc_m = accuracy(m.values());
    let acc_h = accuracy(h.values());
    let pairs: Vec<(&DecisionRecord, &DecisionRecord)> = m.iter().map(|(k, r)| (r, &h[k])).collect();
    let c_obs = pairs.iter().filter(|(a, b)| a.correct == b.correct).count() as f64 / n as f64;
    let raw = pairs.iter().filter(|(a, b)| a.decision == b.decision).count() as f64 / n as f64;
    let c_exp = acc_m * acc_h + (1.0 - acc_m) * (1.0 - acc_h);
    let kappa = if c_exp >= 1.0 { 0.0 } else { (c_obs - c_exp) / (1.0 - c_exp) };

    let accuracy_difference = match averaging {
        AccuracyAveraging::Samples => (acc_m - acc_h).abs(),
        AccuracyAveraging::ConditionGroups => {
            let mut groups: BTreeMap<&str, Vec<(&DecisionRecord, &DecisionRecord)>> = BTreeMap::new();
            for &(a, b) in &pairs {
                groups.entry(a.condition.as_str()).or_default().push((a, b));
            }
            let gaps: Vec<f64> = groups
                .values()
                .map(|g| (accuracy(g.iter().map(|p| p.0)) - accuracy(g.iter().map(|p| p.1))).abs())
                .collect();
            gaps.iter().sum::<f64>() / gaps.len() as f64
        }
    };
    Ok(ConsistencyReport {
        accuracy_difference,
        observed_consistency: c_obs,
        error_consistency: kappa,
        raw_agreement: raw,
        model_accuracy: acc_m,
        human_accuracy: acc_h,
        num_samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn recs(flags: &[bool]) -> Vec<DecisionRecord> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &c)| DecisionRecord {
                sample_id: format!("s{i}"),
                condition: format!("c{}", i % 2),
                decision: usize::from(!c),
                correct: c,
                truth: Some(0),
            })
            .collect()
    }

    #[test]
    fn identical_vectors_give_kappa_one() {
        let f = [true, false, true, false];
        let r = human_consistency(&recs(&f), &recs(&f), AccuracyAveraging::Samples).unwrap();
        assert_eq!(r.observed_consistency, 1.0);
        assert_eq!(r.error_consistency, 1.0);
        assert_eq!(r.accuracy_difference, 0.0);
        assert_eq!(r.raw_agreement, 1.0);
    }

    #[test]
    fn three_quarter_agreement_gives_half() {
        // acc 0.5 each, 6 of 8 flags agree
        let a = [true, true, true, true, false, false, false, false];
        let b = [true, true, true, false, true, false, false, false];
        let r = human_consistency(&recs(&a), &recs(&b), AccuracyAveraging::Samples).unwrap();
        assert_eq!(r.observed_consistency, 0.75);
        assert!((r.error_consistency - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_expectation_gives_zero() {
        let f = [true; 5];
        assert_eq!(human_consistency(&recs(&f), &recs(&f), AccuracyAveraging::Samples).unwrap().error_consistency, 0.0);
    }

    #[test]
    fn condition_groups_average_the_gap() {
        // condition c0 (even ids): model 2/2, human 0/2; c1: both 1/2
        let m = recs(&[true, true, true, false]);
        let h = recs(&[false, true, false, false]);
        let grouped = human_consistency(&m, &h, AccuracyAveraging::ConditionGroups).unwrap();
        let pooled = human_consistency(&m, &h, AccuracyAveraging::Samples).unwrap();
        assert!((grouped.accuracy_difference - 0.5).abs() < 1e-15);
        assert!((pooled.accuracy_difference - 0.5).abs() < 1e-15);
        // opposite gaps cancel only when pooled
        let m = recs(&[true, false, true, false]);
        let h = recs(&[false, true, false, true]);
        assert_eq!(human_consistency(&m, &h, AccuracyAveraging::ConditionGroups).unwrap().accuracy_difference, 1.0);
        assert_eq!(human_consistency(&m, &h, AccuracyAveraging::Samples).unwrap().accuracy_difference, 0.0);
    }

    #[test]
    fn id_and_flag_errors() {
        let a = recs(&[true, false]);
        let mut b = a.clone();
        b[1].sample_id = "other".into();
        assert!(matches!(human_consistency(&a, &b, AccuracyAveraging::Samples), Err(Error::IdMismatch(_))));
        let mut dup = a.clone();
        dup[1].sample_id = "s0".into();
        assert!(matches!(human_consistency(&dup, &a, AccuracyAveraging::Samples), Err(Error::IdMismatch(_))));
        let mut bad = a.clone();
        bad[0].correct = false;
        assert!(matches!(human_consistency(&bad, &a, AccuracyAveraging::Samples), Err(Error::Data(_))));
    }

    #[test]
    fn independent_observers_have_near_zero_kappa() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        let r = human_consistency(&recs(&a), &recs(&b), AccuracyAveraging::Samples).unwrap();
        assert!(r.error_consistency.abs() < 0.03, "kappa {}", r.error_consistency);
    }

    proptest! {
        #[test]
        fn kappa_bounded_and_cobs_above_inclusion_exclusion(
            pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)
        ) {
            let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let r = human_consistency(&recs(&a), &recs(&b), AccuracyAveraging::Samples).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r.error_consistency));
            prop_assert!(r.observed_consistency >= r.model_accuracy + r.human_accuracy - 1.0 - 1e-12);
            let same = human_consistency(&recs(&a), &recs(&a), AccuracyAveraging::Samples).unwrap();
            if r.model_accuracy > 0.0 && r.model_accuracy < 1.0 {
                prop_assert!((same.error_consistency - 1.0).abs() < 1e-12);
            }
        }
    }
}
