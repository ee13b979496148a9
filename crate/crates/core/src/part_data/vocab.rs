use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared parent/child pair permitting two part masks to overlap,
/// e.g. `horn` inside `head`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InclusionRelation {
    pub object_id: usize,
    pub child_part: usize,
    pub parent_part: usize,
}

/// Object categories and their object-scoped part categories.
///
/// Parts never cross objects: `cat:head` and `bird:head` are two distinct
/// part ids even though they share a name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct PartVocabulary {
    parts_of: Vec<Vec<usize>>,
    owner: Vec<usize>,
    object_names: Vec<String>,
    part_names: Vec<String>,
    inclusions: Vec<InclusionRelation>,
    count_exempt: BTreeSet<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRepr {
    num_objects: usize,
    num_parts: usize,
    parts_of: Vec<Vec<usize>>,
    #[serde(default)]
    object_names: Vec<String>,
    #[serde(default)]
    part_names: Vec<String>,
    #[serde(default)]
    inclusions: Vec<InclusionRelation>,
    /// Objects exempt from the 3..=8 parts-per-object rule.
    #[serde(default)]
    count_exempt: BTreeSet<usize>,
}

impl TryFrom<VocabRepr> for PartVocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        if r.parts_of.len() != r.num_objects {
            return Err(Error::VocabMismatch(format!(
                "num_objects is {} but parts_of has {} entries",
                r.num_objects,
                r.parts_of.len()
            )));
        }
        let v = PartVocabulary::new(r.parts_of)?
            .with_names(r.object_names, r.part_names)?
            .with_inclusions(r.inclusions)?
            .with_count_exempt(r.count_exempt)?;
        if v.num_parts() != r.num_parts {
            return Err(Error::VocabMismatch(format!("num_parts is {} but lists cover {}", r.num_parts, v.num_parts())));
        }
        Ok(v)
    }
}

impl From<PartVocabulary> for VocabRepr {
    fn from(v: PartVocabulary) -> Self {
        VocabRepr {
            num_objects: v.num_objects(),
            num_parts: v.num_parts(),
            parts_of: v.parts_of,
            object_names: v.object_names,
            part_names: v.part_names,
            inclusions: v.inclusions,
            count_exempt: v.count_exempt,
        }
    }
}

impl PartVocabulary {
    /// Builds a vocabulary from per-object part lists. Part ids must cover
    /// `0..K` with each id owned by exactly one object.
    pub fn new(parts_of: Vec<Vec<usize>>) -> Result<Self> {
        let k: usize = parts_of.iter().map(|p| p.len()).sum();
        let mut owner = vec![usize::MAX; k];
        for (obj, parts) in parts_of.iter().enumerate() {
            if parts.is_empty() {
                return Err(Error::VocabMismatch(format!("object {obj} has no parts")));
            }
            for &p in parts {
                if p >= k {
                    return Err(Error::VocabMismatch(format!("part id {p} outside 0..{k}")));
                }
                if owner[p] != usize::MAX {
                    let what = if owner[p] == obj { "listed twice for" } else { "shared by" };
                    return Err(Error::VocabMismatch(format!("part {p} {what} object {obj}")));
                }
                owner[p] = obj;
            }
        }
        Ok(Self {
            parts_of,
            owner,
            object_names: Vec::new(),
            part_names: Vec::new(),
            inclusions: Vec::new(),
            count_exempt: BTreeSet::new(),
        })
    }

    pub fn with_names(mut self, object_names: Vec<String>, part_names: Vec<String>) -> Result<Self> {
        if !object_names.is_empty() && object_names.len() != self.num_objects() {
            return Err(Error::VocabMismatch("object name count differs from num_objects".into()));
        }
        if !part_names.is_empty() && part_names.len() != self.num_parts() {
            return Err(Error::VocabMismatch("part name count differs from num_parts".into()));
        }
        self.object_names = object_names;
        self.part_names = part_names;
        Ok(self)
    }

    /// Attaches the inclusion dictionary. Relations must name parts of the
    /// given object and be acyclic per object.
    pub fn with_inclusions(mut self, mut inclusions: Vec<InclusionRelation>) -> Result<Self> {
        for r in &inclusions {
            check_relation(&self, r)?;
        }
        inclusions.sort();
        inclusions.dedup();
        if let Some(obj) = first_cycle(&inclusions) {
            return Err(Error::VocabMismatch(format!("inclusion relations of object {obj} form a cycle")));
        }
        self.inclusions = inclusions;
        Ok(self)
    }

    pub fn with_count_exempt(mut self, exempt: BTreeSet<usize>) -> Result<Self> {
        if let Some(&o) = exempt.iter().find(|&&o| o >= self.num_objects()) {
            return Err(Error::VocabMismatch(format!("exempt object {o} out of range")));
        }
        self.count_exempt = exempt;
        Ok(self)
    }

    pub fn num_objects(&self) -> usize {
        self.parts_of.len()
    }

    pub fn num_parts(&self) -> usize {
        self.owner.len()
    }

    pub fn parts_of(&self, object_id: usize) -> Result<&[usize]> {
        self.parts_of
            .get(object_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::VocabMismatch(format!("object {object_id} not in vocabulary")))
    }

    pub fn owner_of(&self, part_id: usize) -> Option<usize> {
        self.owner.get(part_id).copied()
    }

    pub fn part_belongs(&self, object_id: usize, part_id: usize) -> bool {
        self.owner_of(part_id) == Some(object_id)
    }

    pub fn object_name(&self, object_id: usize) -> String {
        self.object_names.get(object_id).cloned().unwrap_or_else(|| format!("object{object_id}"))
    }

    pub fn part_name(&self, part_id: usize) -> String {
        self.part_names.get(part_id).cloned().unwrap_or_else(|| format!("part{part_id}"))
    }

    pub fn inclusions(&self) -> &[InclusionRelation] {
        &self.inclusions
    }

    /// Inclusion relations declared for one object.
    pub fn inclusions_of(&self, object_id: usize) -> Vec<InclusionRelation> {
        self.inclusions.iter().filter(|r| r.object_id == object_id).copied().collect()
    }

    pub fn is_count_exempt(&self, object_id: usize) -> bool {
        self.count_exempt.contains(&object_id)
    }
}

pub(crate) fn check_relation(vocab: &PartVocabulary, r: &InclusionRelation) -> Result<()> {
    if r.child_part == r.parent_part {
        return Err(Error::VocabMismatch(format!("part {} cannot include itself", r.child_part)));
    }
    for p in [r.child_part, r.parent_part] {
        if !vocab.part_belongs(r.object_id, p) {
            return Err(Error::VocabMismatch(format!("inclusion part {p} is not a part of object {}", r.object_id)));
        }
    }
    Ok(())
}

/// Returns the first object whose relation graph contains a cycle.
pub(crate) fn first_cycle(relations: &[InclusionRelation]) -> Option<usize> {
    let objects: BTreeSet<usize> = relations.iter().map(|r| r.object_id).collect();
    for obj in objects {
        let edges: Vec<(usize, usize)> =
            relations.iter().filter(|r| r.object_id == obj).map(|r| (r.child_part, r.parent_part)).collect();
        let nodes: BTreeSet<usize> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
        // Kahn's algorithm: a cycle leaves nodes with nonzero in-degree.
        let mut indeg: std::collections::BTreeMap<usize, usize> = nodes.iter().map(|&n| (n, 0)).collect();
        for &(_, b) in &edges {
            *indeg.get_mut(&b).unwrap() += 1;
        }
        let mut queue: Vec<usize> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut seen = 0;
        while let Some(n) = queue.pop() {
            seen += 1;
            for &(a, b) in &edges {
                if a == n {
                    let d = indeg.get_mut(&b).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        queue.push(b);
                    }
                }
            }
        }
        if seen != nodes.len() {
            return Some(obj);
        }
    }
    None
}
