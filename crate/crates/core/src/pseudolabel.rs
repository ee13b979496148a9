//! Pseudo part labels from raw segmentation outputs, with the category
//! filter that restricts labels to the parts of the known object class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mpm::{seg_probabilities, MpmModel};
use crate::part_data::{AnnotationRecord, BinaryMask, CompositeMask, PartInstanceMask, PartVocabulary, Source};

/// One segmented region and its part-probability vector `v_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSegOutput {
    pub mask: BinaryMask,
    pub probs: Vec<f64>,
}

impl RawSegOutput {
    pub fn new(mask: BinaryMask, probs: Vec<f64>) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::EmptyInput("segmentation output mask is empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("part probability {p} outside [0, 1]")));
        }
        Ok(Self { mask, probs })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Instances whose best filtered probability is below this are dropped.
    pub score_threshold: f64,
    pub max_instances_per_image: usize,
    /// Apply the category filter; off only for ablations.
    pub category_filter: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, max_instances_per_image: 32, category_filter: true }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!("score_threshold {} outside [0, 1]", self.score_threshold)));
        }
        Ok(())
    }
}

/// Zeroes every probability whose part does not belong to `object_id`.
pub fn category_filter(probs: &[f64], object_id: usize, vocab: &PartVocabulary) -> Result<Vec<f64>> {
    if probs.len() != vocab.num_parts() {
        return Err(Error::VocabMismatch(format!("{} probabilities for a vocabulary of {} parts", probs.len(), vocab.num_parts())));
    }
    let parts = vocab
        .parts_of(object_id)
        .map_err(|_| Error::VocabMismatch(format!("object {object_id} not in vocabulary")))?;
    let mut out = vec![0.0; probs.len()];
    for &p in parts {
        out[p] = probs[p];
    }
    Ok(out)
}

/// Smallest index attaining the maximum; [`Error::AllZero`] when nothing is
/// positive.
pub fn assign_part_label(filtered: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in filtered.iter().enumerate() {
        if v > 0.0 && best.map_or(true, |b| v > filtered[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::AllZero)
}

pub fn generate_pseudo_record(
    image_id: &str,
    outputs: &[RawSegOutput],
    object_id: usize,
    vocab: &PartVocabulary,
    cfg: &PseudoLabelConfig,
) -> Result<AnnotationRecord> {
    cfg.validate()?;
    if let Some(first) = outputs.first() {
        if let Some(o) = outputs.iter().find(|o| o.mask.dims() != first.mask.dims()) {
            return Err(Error::Dimension(format!("output masks {:?} and {:?} differ", first.mask.dims(), o.mask.dims())));
        }
    }
    let mut kept: Vec<(f64, PartInstanceMask)> = Vec::new();
    for out in outputs {
        let filtered = if cfg.category_filter {
            category_filter(&out.probs, object_id, vocab)?
        } else {
            if out.probs.len() != vocab.num_parts() {
                return Err(Error::VocabMismatch(format!("{} probabilities for {} parts", out.probs.len(), vocab.num_parts())));
            }
            out.probs.clone()
        };
        let label = match assign_part_label(&filtered) {
            Ok(l) => l,
            Err(Error::AllZero) => continue,
            Err(e) => return Err(e),
        };
        let score = filtered[label];
        if score < cfg.score_threshold {
            continue;
        }
        kept.push((score, PartInstanceMask::new(out.mask.clone(), label)?.with_score(score)?));
    }
    kept.sort_by(|a, b| b.0.total_cmp(&a.0));
    kept.truncate(cfg.max_instances_per_image);
    let mut rec = AnnotationRecord::new(image_id, object_id, Source::Pseudo);
    rec.instances = kept.into_iter().map(|(_, m)| m).collect();
    Ok(rec)
}

/// Splits a dense `(K+1) x H x W` probability map (channel `K` background)
/// into connected regions of equal argmax label. Each region's `v_p` is the
/// mean part probability over its pixels. Regions smaller than `min_area`
/// are discarded.
pub fn regions_from_probs(probs: &[f64], num_parts: usize, h: usize, w: usize, min_area: usize) -> Result<Vec<RawSegOutput>> {
    let hw = h * w;
    if probs.len() != (num_parts + 1) * hw {
        return Err(Error::Shape(format!("probability map of {} values, expected {}", probs.len(), (num_parts + 1) * hw)));
    }
    let label: Vec<usize> = (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..=num_parts {
                if probs[c * hw + i] > probs[best * hw + i] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let mut seen = vec![false; hw];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..hw {
        if seen[start] || label[start] == num_parts {
            continue;
        }
        let l = label[start];
        let mut region = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            region.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && label[j] == l {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if region.len() < min_area {
            continue;
        }
        let mut mask = BinaryMask::new(h, w);
        let mut v = vec![0.0; num_parts];
        for &i in &region {
            mask.set(i / w, i % w, true);
            for (c, vc) in v.iter_mut().enumerate() {
                *vc += probs[c * hw + i];
            }
        }
        v.iter_mut().for_each(|x| *x = (*x / region.len() as f64).clamp(0.0, 1.0));
        out.push(RawSegOutput::new(mask, v)?);
    }
    Ok(out)
}

/// Fraction of pseudo instances whose label equals the majority ground-truth
/// label under their mask (background majority counts as wrong). Returns
/// `(correct, total)`.
pub fn label_accuracy(record: &AnnotationRecord, truth: &CompositeMask) -> Result<(usize, usize)> {
    let mut correct = 0;
    for inst in &record.instances {
        if inst.mask.dims() != truth.dims() {
            return Err(Error::Dimension(format!("instance {:?} vs truth {:?}", inst.mask.dims(), truth.dims())));
        }
        let mut counts = vec![0usize; truth.num_channels()];
        for (&m, &l) in inst.mask.data().iter().zip(truth.labels.data()) {
            if m {
                counts[l] += 1;
            }
        }
        let mut best = 0;
        for (l, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = l;
            }
        }
        if best == inst.part_id && best != truth.background() {
            correct += 1;
        }
    }
    Ok((correct, record.instances.len()))
}

/// Pseudo records for `images` (with known object classes) from the finest
/// segmentation head of `model`, processed `batch` images at a time.
pub fn label_with_model(
    model: &MpmModel,
    images: &[(String, RgbImage, usize)],
    vocab: &PartVocabulary,
    cfg: &PseudoLabelConfig,
    min_area: usize,
    batch: usize,
) -> Result<Vec<AnnotationRecord>> {
    let k1 = model.mpm.as_ref().map(|c| c.seg_classes).ok_or_else(|| Error::Spec("model has no segmentation heads".into()))?;
    if k1 != vocab.num_parts() + 1 {
        return Err(Error::VocabMismatch(format!("model predicts {k1} channels, vocabulary has {} parts", vocab.num_parts())));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let xs: Vec<_> = chunk.iter().map(|(_, im, _)| im.to_tensor()).collect();
        let probs = seg_probabilities(model, &crate::tensor::Tensor::stack(&xs)?)?;
        for ((id, im, object_id), p) in chunk.iter().zip(&probs) {
            let regions = regions_from_probs(p, vocab.num_parts(), im.height, im.width, min_area)?;
            out.push(generate_pseudo_record(id, &regions, *object_id, vocab, cfg)?);
        }
    }
    Ok(out)
}
