//! Late fusion of branch logits and answer recommendation.

use std::collections::BTreeSet;

use crate::data::{normalize_answer, AnswerVocabulary};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{population_std, Tensor};

/// `sum(L) + max(L) + mean(L)` over a list of same-shape logit vectors.
pub fn late_fuse_on_tape(tape: &mut Tape<'_>, logits: &[Var]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Argument("late fusion needs at least one logit vector".into()));
    }
    let sum = tape.sum_list(logits)?;
    let max = tape.max_list(logits)?;
    let mean = tape.mean_list(logits)?;
    let sm = tape.add(sum, max)?;
    tape.add(sm, mean)
}

/// Value-level [`late_fuse_on_tape`].
pub fn late_fuse(logits: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = logits.iter().map(|l| tape.constant_ref(l)).collect();
    let out = late_fuse_on_tape(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Answer indices named by the detected objects, with the credit factor
/// applied to them.
#[derive(Clone, Debug, PartialEq)]
pub struct RecommendationList {
    pub indices: BTreeSet<usize>,
    pub credit: f64,
}

/// Collects every object name and attribute that, after normalisation,
/// exactly matches an answer in the vocabulary.
pub fn build_recommendation_list(
    object_names: &[String],
    object_attributes: &[Vec<String>],
    answers: &AnswerVocabulary,
    credit: f64,
) -> Result<RecommendationList> {
    if !(credit >= 0.0 && credit.is_finite()) {
        return Err(Error::Config(format!(
            "credit must be a finite value ≥ 0, got {credit}"
        )));
    }
    let indices = object_names
        .iter()
        .chain(object_attributes.iter().flatten())
        .filter_map(|w| answers.get(&normalize_answer(w)))
        .collect();
    Ok(RecommendationList { indices, credit })
}

/// Adds `credit · std(logits)` (population standard deviation) to the
/// recommended entries; every other entry is untouched.
pub fn apply_credit(logits: &Tensor, list: &RecommendationList) -> Result<Tensor> {
    if let Some(&last) = list.indices.last() {
        if last >= logits.len() {
            return Err(Error::Argument(format!(
                "recommended answer {last} out of range for {} logits",
                logits.len()
            )));
        }
    }
    let bonus = list.credit * population_std(logits.data());
    let mut out = logits.clone();
    for &i in &list.indices {
        out.data_mut()[i] += bonus;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec())
    }

    #[test]
    fn late_fuse_examples() {
        let out = late_fuse(&[row(&[1.0, 4.0]), row(&[3.0, 2.0])]).unwrap();
        assert_eq!(out.data(), &[4.0 + 3.0 + 2.0, 6.0 + 4.0 + 3.0]);
        let single = late_fuse(&[row(&[1.5, -2.0])]).unwrap();
        assert_eq!(single.data(), &[4.5, -6.0]);
        assert!(late_fuse(&[]).is_err());
        assert!(late_fuse(&[row(&[1.0]), row(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn credit_example() {
        let answers =
            AnswerVocabulary::from_answers(vec!["cow".into(), "dog".into(), "red".into()]).unwrap();
        let list = build_recommendation_list(
            &["Cow".into(), "boat".into()],
            &[vec!["red".into()], vec![]],
            &answers,
            1.0,
        )
        .unwrap();
        assert_eq!(list.indices, BTreeSet::from([0, 2]));
        let logits = row(&[1.0, 2.0, 3.0]);
        let std = (2.0f64 / 3.0).sqrt();
        let out = apply_credit(&logits, &list).unwrap();
        assert_eq!(out.data(), &[1.0 + std, 2.0, 3.0 + std]);
    }

    #[test]
    fn credit_rejects_bad_inputs() {
        let answers = AnswerVocabulary::from_answers(vec!["a".into()]).unwrap();
        assert!(build_recommendation_list(&[], &[], &answers, -1.0).is_err());
        assert!(build_recommendation_list(&[], &[], &answers, f64::NAN).is_err());
        let list = RecommendationList {
            indices: BTreeSet::from([3]),
            credit: 1.0,
        };
        assert!(apply_credit(&row(&[0.0, 1.0]), &list).is_err());
    }

    fn logit_lists() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 1usize..5).prop_flat_map(|(n, m)| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, n), m)
        })
    }

    proptest! {
        #[test]
        fn fusion_of_identical_copies_scales(v in prop::collection::vec(-10.0f64..10.0, 1..6), m in 1usize..5) {
            let list: Vec<Tensor> = (0..m).map(|_| row(&v)).collect();
            let out = late_fuse(&list).unwrap();
            for (o, x) in out.data().iter().zip(&v) {
                prop_assert!((o - (m as f64 + 2.0) * x).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn fusion_is_order_invariant(lists in logit_lists()) {
            let tensors: Vec<Tensor> = lists.iter().map(|l| row(l)).collect();
            let mut reversed = tensors.clone();
            reversed.reverse();
            let a = late_fuse(&tensors).unwrap();
            let b = late_fuse(&reversed).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn credit_touches_only_listed_entries(
            v in prop::collection::vec(-10.0f64..10.0, 1..8),
            picks in prop::collection::btree_set(0usize..8, 0..4),
            credit in 0.0f64..3.0,
        ) {
            let logits = row(&v);
            let indices: BTreeSet<usize> = picks.into_iter().filter(|&i| i < v.len()).collect();
            let list = RecommendationList { indices: indices.clone(), credit };
            let out = apply_credit(&logits, &list).unwrap();
            let bonus = credit * population_std(logits.data());
            for (i, (o, x)) in out.data().iter().zip(&v).enumerate() {
                if indices.contains(&i) {
                    prop_assert!((o - x - bonus).abs() <= 1e-12);
                    prop_assert!(*o >= *x);
                } else {
                    prop_assert_eq!(o, x);
                }
            }
            let zero = RecommendationList { indices, credit: 0.0 };
            prop_assert_eq!(apply_credit(&logits, &zero).unwrap(), logits);
        }
    }
}
