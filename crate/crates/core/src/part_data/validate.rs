//! Annotation-rule checks. Violations are collected, never thrown.

use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use super::record::{AnnotationRecord, Source};
use super::vocab::{check_relation, first_cycle, PartVocabulary};

/// Rule identifiers used in [`Violation::rule`].
pub mod rules {
    /// Masks overlap without a declared inclusion relation.
    pub const OVERLAP: &str = "a";
    /// Part masks do not cover the supplied object foreground.
    pub const COVERAGE: &str = "a-coverage";
    /// Part id outside the object's vocabulary list.
    pub const VOCAB: &str = "b";
    /// Inclusion relations contain a cycle or name foreign parts.
    pub const INCLUSION: &str = "c";
    /// Object's part-category count outside 3..=8 without exemption.
    pub const PART_COUNT: &str = "d";
    /// Malformed record: empty mask, mismatched dimensions, bad score.
    pub const STRUCTURE: &str = "structure";
}

pub const MIN_PARTS_PER_OBJECT: usize = 3;
pub const MAX_PARTS_PER_OBJECT: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self { passed: violations.is_empty(), violations }
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

pub fn validate_annotation(record: &AnnotationRecord, vocab: &PartVocabulary) -> ValidationReport {
    validate_with_foreground(record, vocab, None)
}

/// Like [`validate_annotation`], additionally checking that the part masks
/// jointly cover `foreground` exactly when it is supplied.
pub fn validate_with_foreground(
    record: &AnnotationRecord,
    vocab: &PartVocabulary,
    foreground: Option<&BinaryMask>,
) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |rule: &str, detail: String| out.push(Violation { rule: rule.to_string(), detail });

    let dims = match record.dims() {
        Ok(d) => d,
        Err(e) => {
            push(rules::STRUCTURE, e.to_string());
            return ValidationReport::from_violations(out);
        }
    };

    match vocab.parts_of(record.object_id) {
        Err(_) => push(rules::VOCAB, format!("object {} not in vocabulary", record.object_id)),
        Ok(parts) => {
            let n = parts.len();
            if !vocab.is_count_exempt(record.object_id) && !(MIN_PARTS_PER_OBJECT..=MAX_PARTS_PER_OBJECT).contains(&n) {
                push(
                    rules::PART_COUNT,
                    format!(
                        "object {} has {n} part categories, expected {MIN_PARTS_PER_OBJECT}..={MAX_PARTS_PER_OBJECT}",
                        record.object_id
                    ),
                );
            }
        }
    }

    for (i, inst) in record.instances.iter().enumerate() {
        if !vocab.part_belongs(record.object_id, inst.part_id) {
            push(rules::VOCAB, format!("instance {i}: part {} not a part of object {}", inst.part_id, record.object_id));
        }
        if inst.mask.is_empty() {
            push(rules::STRUCTURE, format!("instance {i} has an empty mask"));
        }
        if let Some(s) = inst.score {
            if !(0.0..=1.0).contains(&s) {
                push(rules::STRUCTURE, format!("instance {i} score {s} outside [0, 1]"));
            }
        }
    }

    for r in &record.inclusions {
        if r.object_id != record.object_id {
            push(rules::INCLUSION, format!("relation {r:?} names object {} in a record of object {}", r.object_id, record.object_id));
        } else if let Err(e) = check_relation(vocab, r) {
            push(rules::INCLUSION, e.to_string());
        }
    }
    if let Some(obj) = first_cycle(&record.inclusions) {
        push(rules::INCLUSION, format!("inclusion relations of object {obj} form a cycle"));
    }

    let declared = |a: usize, b: usize| {
        record.inclusions.iter().any(|r| (r.child_part == a && r.parent_part == b) || (r.child_part == b && r.parent_part == a))
    };
    // pseudo masks may overlap; composition resolves them by score
    let check_overlap = record.source == Source::Human;
    for i in (0..record.instances.len()).filter(|_| check_overlap) {
        for j in i + 1..record.instances.len() {
            let (a, b) = (&record.instances[i], &record.instances[j]);
            let Ok(overlap) = a.mask.intersection_area(&b.mask) else { continue };
            if overlap > 0 && !declared(a.part_id, b.part_id) {
                push(
                    rules::OVERLAP,
                    format!("instances {i} (part {}) and {j} (part {}) overlap on {overlap} px", a.part_id, b.part_id),
                );
            }
        }
    }

    if let (Some(fg), Some((h, w))) = (foreground, dims) {
        if fg.dims() != (h, w) {
            push(rules::STRUCTURE, format!("foreground {:?} vs masks {:?}", fg.dims(), (h, w)));
        } else {
            let mut union = BinaryMask::new(h, w);
            for inst in &record.instances {
                let _ = union.union_with(&inst.mask);
            }
            let missed = fg.data().iter().zip(union.data()).filter(|(f, u)| **f && !**u).count();
            let spill = fg.data().iter().zip(union.data()).filter(|(f, u)| !**f && **u).count();
            if missed > 0 || spill > 0 {
                push(rules::COVERAGE, format!("{missed} foreground px uncovered, {spill} part px outside the object"));
            }
        }
    }

    ValidationReport::from_violations(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::part_data::record::PartInstanceMask;
    use crate::part_data::vocab::InclusionRelation;

    fn vocab() -> PartVocabulary {
        PartVocabulary::new(vec![vec![0, 1, 2], (3..12).collect(), vec![12]]).unwrap()
    }

    fn rec(object_id: usize, instances: Vec<(usize, BinaryMask)>) -> AnnotationRecord {
        let mut r = AnnotationRecord::new("x", object_id, Source::Human);
        r.instances = instances.into_iter().map(|(p, m)| PartInstanceMask::new(m, p).unwrap()).collect();
        r
    }

    #[test]
    fn disjoint_valid_record_passes() {
        let r = rec(0, vec![(0, BinaryMask::from_fn(2, 2, |y, _| y == 0)), (1, BinaryMask::from_fn(2, 2, |y, _| y == 1))]);
        let rep = validate_annotation(&r, &vocab());
        assert!(rep.passed, "{:?}", rep.violations);
    }

    #[test]
    fn overlap_without_inclusion_flags_rule_a() {
        let mut r = rec(0, vec![(0, BinaryMask::from_fn(2, 2, |_, _| true)), (1, BinaryMask::from_fn(2, 2, |y, _| y == 0))]);
        let rep = validate_annotation(&r, &vocab());
        assert!(!rep.passed && rep.has_rule(rules::OVERLAP));
        r.inclusions.push(InclusionRelation { object_id: 0, child_part: 1, parent_part: 0 });
        assert!(validate_annotation(&r, &vocab()).passed);
    }

    #[test]
    fn nine_part_object_flags_rule_d() {
        let r = rec(1, vec![(3, BinaryMask::from_fn(2, 2, |_, _| true))]);
        let rep = validate_annotation(&r, &vocab());
        assert!(rep.has_rule(rules::PART_COUNT));
        let exempt = vocab().with_count_exempt([1, 2].into()).unwrap();
        assert!(validate_annotation(&r, &exempt).passed);
    }

    #[test]
    fn foreign_part_and_cycle() {
        let mut r = rec(0, vec![(5, BinaryMask::from_fn(1, 1, |_, _| true))]);
        r.inclusions = vec![
            InclusionRelation { object_id: 0, child_part: 0, parent_part: 1 },
            InclusionRelation { object_id: 0, child_part: 1, parent_part: 0 },
        ];
        let rep = validate_annotation(&r, &vocab());
        assert!(rep.has_rule(rules::VOCAB));
        assert!(rep.has_rule(rules::INCLUSION));
    }

    #[test]
    fn coverage_checked_only_with_foreground() {
        let r = rec(0, vec![(0, BinaryMask::from_fn(2, 2, |y, _| y == 0))]);
        let full = BinaryMask::from_fn(2, 2, |_, _| true);
        assert!(validate_annotation(&r, &vocab()).passed);
        let rep = validate_with_foreground(&r, &vocab(), Some(&full));
        assert!(rep.has_rule(rules::COVERAGE));
        let top = BinaryMask::from_fn(2, 2, |y, _| y == 0);
        assert!(validate_with_foreground(&r, &vocab(), Some(&top)).passed);
    }

    #[test]
    fn mismatched_dims_are_structural() {
        let r = rec(0, vec![(0, BinaryMask::from_fn(2, 2, |_, _| true)), (1, BinaryMask::from_fn(3, 2, |_, _| true))]);
        assert!(validate_annotation(&r, &vocab()).has_rule(rules::STRUCTURE));
    }
}
