//! Composite (one-hot) part masks and their derived views.

use std::collections::BTreeSet;

use super::mask::{BinaryMask, LabelGrid};
use super::record::{AnnotationRecord, Source};
use super::vocab::{InclusionRelation, PartVocabulary};
use crate::error::{Error, Result};

/// Per-pixel channel index in `0..=K`; channel `K` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositeMask {
    pub labels: LabelGrid,
    pub num_parts: usize,
}

impl CompositeMask {
    pub fn new(labels: LabelGrid, num_parts: usize) -> Result<Self> {
        if let Some(&bad) = labels.data().iter().find(|&&l| l > num_parts) {
            return Err(Error::Data(format!("label {bad} outside 0..={num_parts}")));
        }
        Ok(Self { labels, num_parts })
    }

    pub fn background(&self) -> usize {
        self.num_parts
    }

    pub fn num_channels(&self) -> usize {
        self.num_parts + 1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    /// Pixels carrying any part label.
    pub fn foreground(&self) -> BinaryMask {
        let (h, w) = self.dims();
        BinaryMask::from_fn(h, w, |y, x| self.labels.get(y, x) != self.num_parts)
    }

    /// Expands to a dense `(K+1) x H x W` one-hot array.
    pub fn one_hot(&self) -> Vec<f64> {
        let (h, w) = self.dims();
        let mut out = vec![0.0; self.num_channels() * h * w];
        for (i, &l) in self.labels.data().iter().enumerate() {
            out[l * h * w + i] = 1.0;
        }
        out
    }
}

/// True when `descendant` is (transitively) included in `ancestor`.
fn is_included(relations: &[InclusionRelation], descendant: usize, ancestor: usize) -> bool {
    let mut frontier = vec![descendant];
    let mut seen = BTreeSet::new();
    while let Some(p) = frontier.pop() {
        for r in relations.iter().filter(|r| r.child_part == p) {
            if r.parent_part == ancestor {
                return true;
            }
            if seen.insert(r.parent_part) {
                frontier.push(r.parent_part);
            }
        }
    }
    false
}

/// Flattens the record's instances into one label per pixel.
///
/// Human records: uncovered pixels are background; where instances overlap
/// the covering parts must form an inclusion chain and the innermost part
/// wins, anything else is an [`Error::Overlap`]. Pseudo records: the
/// higher-scoring instance wins at overlaps (earlier instance on ties).
pub fn compose_mask(record: &AnnotationRecord, vocab: &PartVocabulary) -> Result<CompositeMask> {
    let Some((h, w)) = record.dims()? else {
        return Err(Error::EmptyInput(format!("record {} has no instances to size the mask", record.image_id)));
    };
    compose_mask_sized(record, vocab, h, w)
}

/// [`compose_mask`] with explicit dimensions, so records without instances
/// (e.g. pseudo records whose outputs were all dropped) compose to pure
/// background.
pub fn compose_mask_sized(record: &AnnotationRecord, vocab: &PartVocabulary, h: usize, w: usize) -> Result<CompositeMask> {
    let k = vocab.num_parts();
    vocab.parts_of(record.object_id)?;
    for inst in &record.instances {
        if !vocab.part_belongs(record.object_id, inst.part_id) {
            return Err(Error::VocabMismatch(format!(
                "record {}: part {} does not belong to object {}",
                record.image_id, inst.part_id, record.object_id
            )));
        }
    }
    if let Some(d) = record.dims()? {
        if d != (h, w) {
            return Err(Error::Dimension(format!("record {} masks are {d:?}, expected {:?}", record.image_id, (h, w))));
        }
    }
    let mut labels = LabelGrid::filled(h, w, k);
    let mut covering: Vec<usize> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            covering.clear();
            covering.extend(record.instances.iter().enumerate().filter(|(_, i)| i.mask.get(y, x)).map(|(n, _)| n));
            let label = match covering.len() {
                0 => k,
                1 => record.instances[covering[0]].part_id,
                _ => match record.source {
                    Source::Pseudo => {
                        let best = covering
                            .iter()
                            .copied()
                            .reduce(|a, b| {
                                let (sa, sb) = (record.instances[a].score.unwrap_or(0.0), record.instances[b].score.unwrap_or(0.0));
                                if sb > sa {
                                    b
                                } else {
                                    a
                                }
                            })
                            .unwrap();
                        record.instances[best].part_id
                    }
                    Source::Human => innermost(record, &covering).ok_or_else(|| {
                        let parts: Vec<usize> = covering.iter().map(|&c| record.instances[c].part_id).collect();
                        Error::Overlap(format!("record {} pixel ({y},{x}) covered by parts {:?}", record.image_id, parts))
                    })?,
                },
            };
            labels.set(y, x, label);
        }
    }
    CompositeMask::new(labels, k)
}

/// The covering part included in every other covering part, if any.
fn innermost(record: &AnnotationRecord, covering: &[usize]) -> Option<usize> {
    let parts: Vec<usize> = covering.iter().map(|&c| record.instances[c].part_id).collect();
    parts
        .iter()
        .copied()
        .find(|&cand| {
            let mut same = 0;
            parts.iter().all(|&other| {
                if other == cand {
                    same += 1;
                    same == 1
                } else {
                    is_included(&record.inclusions, cand, other)
                }
            })
        })
}

/// Union of all part masks.
pub fn object_mask_from_parts(record: &AnnotationRecord) -> Result<BinaryMask> {
    let first = record
        .instances
        .first()
        .ok_or_else(|| Error::EmptyInput(format!("record {} has no part instances", record.image_id)))?;
    let mut out = first.mask.clone();
    for inst in &record.instances[1..] {
        out.union_with(&inst.mask)?;
    }
    Ok(out)
}

/// Mode pooling over `factor x factor` blocks; ties go to the smallest
/// label.
pub fn downsample_mask(m: &CompositeMask, factor: usize) -> Result<CompositeMask> {
    let (h, w) = m.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!("{h}x{w} mask is not divisible by factor {factor}")));
    }
    if factor == 1 {
        return Ok(m.clone());
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut counts = vec![0usize; m.num_channels()];
    let mut out = LabelGrid::filled(ho, wo, m.background());
    for oy in 0..ho {
        for ox in 0..wo {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    counts[m.labels.get(y, x)] += 1;
                }
            }
            let mut best = 0;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out.set(oy, ox, best);
        }
    }
    CompositeMask::new(out, m.num_parts)
}
