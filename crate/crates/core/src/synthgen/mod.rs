//! Procedural part-annotated classification data.
//!
//! Every class is a fixed template of textured primitives (a body plus
//! attached heads, limbs, fins and blocks, sometimes a spot included in the
//! body). Samples jitter the pose, recolour nothing, and place the object on
//! a random gradient background with clutter shapes.

pub mod shapes;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::{derive_seed, standard_normal};
use crate::part_data::{AnnotationRecord, BinaryMask, InclusionRelation, PartInstanceMask, PartVocabulary, Source};
use shapes::{Shape, Texture, PALETTE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_objects: usize,
    /// Inclusive range of part categories per object.
    pub parts_per_object: [usize; 2],
    pub image_size: usize,
    pub samples_per_class: usize,
    pub noise_level: f64,
    pub seed: u64,
    /// Consecutive classes come in pairs that differ in one part only.
    pub confusable_pairs: bool,
    /// Distractor shapes drawn into the background.
    pub clutter: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_objects: 10,
            parts_per_object: [3, 6],
            image_size: 64,
            samples_per_class: 50,
            noise_level: 0.03,
            seed: 0,
            confusable_pairs: false,
            clutter: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.parts_per_object;
        if self.num_objects < 2 {
            return Err(Error::Spec(format!("num_objects must be >= 2, got {}", self.num_objects)));
        }
        if lo < 3 || hi > 8 || lo > hi {
            return Err(Error::Spec(format!("parts_per_object must lie within [3, 8], got [{lo}, {hi}]")));
        }
        if self.image_size < 16 {
            return Err(Error::Spec(format!("image_size must be >= 16, got {}", self.image_size)));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Spec(format!("samples_per_class must be >= 2, got {}", self.samples_per_class)));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Spec(format!("noise_level must lie in [0, 1], got {}", self.noise_level)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartTemplate {
    pub name: String,
    pub shape: Shape,
    pub primary: [u8; 3],
    pub secondary: [u8; 3],
    pub texture: Texture,
    /// Index of the enclosing part within the class, for included parts.
    pub parent: Option<usize>,
}

/// Parts in painter order (later parts occlude earlier ones).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTemplate {
    pub parts: Vec<PartTemplate>,
}

pub struct SynthDataset {
    pub images: Vec<RgbImage>,
    pub records: Vec<AnnotationRecord>,
    pub vocab: PartVocabulary,
    /// Pixels painted by the object, per image.
    pub foregrounds: Vec<BinaryMask>,
    pub templates: Vec<ClassTemplate>,
}

fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

fn two_colors(rng: &mut impl Rng) -> ([u8; 3], [u8; 3]) {
    let a = rng.gen_range(0..PALETTE.len());
    let mut b = rng.gen_range(0..PALETTE.len() - 1);
    if b >= a {
        b += 1;
    }
    (PALETTE[a], PALETTE[b])
}

const ATTACHMENT_KINDS: [&str; 4] = ["head", "limb", "fin", "block"];

fn attachment(kind: &str, theta: f64, radius: f64, rng: &mut impl Rng) -> Shape {
    let (s, c) = theta.sin_cos();
    let (ax, ay) = (radius * c, radius * s);
    match kind {
        "head" => {
            let r = rng.gen_range(4.0..6.0);
            Shape::Ellipse { cx: ax + 0.6 * r * c, cy: ay + 0.6 * r * s, rx: r, ry: r * rng.gen_range(0.8..1.0), angle: theta }
        }
        "limb" => {
            let len = rng.gen_range(7.0..11.0);
            Shape::Capsule { x0: 0.8 * ax, y0: 0.8 * ay, x1: ax + len * c, y1: ay + len * s, r: rng.gen_range(1.6..2.4) }
        }
        "fin" => {
            let half = rng.gen_range(3.0..5.0);
            let len = rng.gen_range(7.0..10.0);
            Shape::Triangle {
                pts: [(ax - half * s, ay + half * c), (ax + half * s, ay - half * c), (ax + len * c, ay + len * s)],
            }
        }
        _ => {
            let (hw, hh) = (rng.gen_range(3.0..5.0), rng.gen_range(2.0..3.5));
            Shape::Rect { cx: ax + hw * 0.8 * c, cy: ay + hw * 0.8 * s, hw, hh, angle: -theta }
        }
    }
}

fn class_template(seed: u64, class: usize, num_parts: usize) -> ClassTemplate {
    let mut rng = rng_for(seed, &format!("class/{class}"));
    let (rx, ry) = (rng.gen_range(9.0..13.0), rng.gen_range(6.0..10.0));
    let body_angle = rng.gen_range(0.0..PI);
    let body = if rng.gen_bool(0.5) {
        Shape::Ellipse { cx: 0.0, cy: 0.0, rx, ry, angle: body_angle }
    } else {
        Shape::Rect { cx: 0.0, cy: 0.0, hw: rx * 0.85, hh: ry * 0.85, angle: body_angle }
    };
    let (p, q) = two_colors(&mut rng);
    let mut parts = vec![PartTemplate {
        name: "body".into(),
        shape: body,
        primary: p,
        secondary: q,
        texture: Texture::random(&mut rng),
        parent: None,
    }];
    let spot = num_parts >= 4 && rng.gen_bool(0.5);
    let n_attach = num_parts - 1 - usize::from(spot);
    let offset = rng.gen_range(0.0..2.0 * PI);
    let mean_r = (rx + ry) / 2.0;
    for i in 0..n_attach {
        let theta = offset + 2.0 * PI * i as f64 / n_attach as f64 + rng.gen_range(-0.3..0.3);
        let kind = ATTACHMENT_KINDS[rng.gen_range(0..ATTACHMENT_KINDS.len())];
        let (p, q) = two_colors(&mut rng);
        parts.push(PartTemplate {
            name: format!("{kind}{i}"),
            shape: attachment(kind, theta, mean_r * 0.85, &mut rng),
            primary: p,
            secondary: q,
            texture: Texture::random(&mut rng),
            parent: None,
        });
    }
    if spot {
        let (p, _) = two_colors(&mut rng);
        let r = rng.gen_range(2.5..3.5);
        parts.push(PartTemplate {
            name: "spot".into(),
            shape: Shape::Ellipse { cx: rng.gen_range(-2.0..2.0), cy: rng.gen_range(-2.0..2.0), rx: r, ry: r, angle: 0.0 },
            primary: p,
            secondary: p,
            texture: Texture::Solid,
            parent: Some(0),
        });
    }
    ClassTemplate { parts }
}

/// Copy of `base` with one attachment replaced by a different primitive.
fn confusable_variant(seed: u64, class: usize, base: &ClassTemplate) -> ClassTemplate {
    let mut rng = rng_for(seed, &format!("variant/{class}"));
    let mut out = base.clone();
    let candidates: Vec<usize> = (1..out.parts.len()).filter(|&i| out.parts[i].parent.is_none()).collect();
    let idx = candidates[rng.gen_range(0..candidates.len())];
    let (cx, cy) = out.parts[idx].shape.center();
    let theta = cy.atan2(cx);
    let old_kind = out.parts[idx].shape.kind();
    // head, block, fin and limb render as shape kinds 0..4 in that order
    let kinds: Vec<&str> = ["head", "block", "fin", "limb"]
        .into_iter()
        .enumerate()
        .filter(|&(k, _)| k != old_kind)
        .map(|(_, name)| name)
        .collect();
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let mean_r = (cx * cx + cy * cy).sqrt().clamp(6.0, 12.0) * 0.8;
    out.parts[idx].shape = attachment(kind, theta, mean_r, &mut rng);
    out.parts[idx].name = format!("{kind}{idx}");
    out
}

/// Templates for all classes and the matching vocabulary.
pub fn build_templates(spec: &SynthSpec) -> Result<(Vec<ClassTemplate>, PartVocabulary)> {
    spec.validate()?;
    let [lo, hi] = spec.parts_per_object;
    let mut templates = Vec::with_capacity(spec.num_objects);
    for c in 0..spec.num_objects {
        let mut count_rng = rng_for(spec.seed, &format!("count/{c}"));
        let t = if spec.confusable_pairs && c % 2 == 1 {
            confusable_variant(spec.seed, c, &templates[c - 1])
        } else {
            class_template(spec.seed, c, count_rng.gen_range(lo..=hi))
        };
        templates.push(t);
    }
    let mut parts_of = Vec::new();
    let mut part_names = Vec::new();
    let mut inclusions = Vec::new();
    let mut next = 0;
    for (c, t) in templates.iter().enumerate() {
        let ids: Vec<usize> = (next..next + t.parts.len()).collect();
        for (j, p) in t.parts.iter().enumerate() {
            part_names.push(format!("class{c}:{}", p.name));
            if let Some(parent) = p.parent {
                inclusions.push(InclusionRelation { object_id: c, child_part: ids[j], parent_part: ids[parent] });
            }
        }
        next += t.parts.len();
        parts_of.push(ids);
    }
    let object_names = (0..spec.num_objects).map(|c| format!("class{c}")).collect();
    let vocab = PartVocabulary::new(parts_of)?.with_names(object_names, part_names)?.with_inclusions(inclusions)?;
    Ok((templates, vocab))
}

pub fn sample_id(class: usize, index: usize) -> String {
    format!("c{class:03}_{index:05}")
}

struct Rendered {
    image: RgbImage,
    /// Topmost object part per pixel, `None` off the object.
    top: Vec<Option<usize>>,
}

/// Template units to pixels at 64x64; objects cover roughly a third of the frame.
const OBJECT_SCALE: f64 = 1.6;

fn render(spec: &SynthSpec, template: &ClassTemplate, class: usize, index: usize) -> Rendered {
    let n = spec.image_size;
    let unit = n as f64 / 64.0;
    let mut rng = rng_for(spec.seed, &format!("sample/{class}/{index}"));
    let scale = rng.gen_range(0.85..1.15) * unit * OBJECT_SCALE;
    let rot = rng.gen_range(-0.35..0.35);
    let shift = 0.08 * n as f64;
    let (tx, ty) = (n as f64 / 2.0 + rng.gen_range(-shift..shift), n as f64 / 2.0 + rng.gen_range(-shift..shift));
    let (sr, cr) = (rot as f64).sin_cos();
    let to_object = |px: f64, py: f64| {
        let (dx, dy) = ((px - tx) / scale, (py - ty) / scale);
        (cr * dx + sr * dy, -sr * dx + cr * dy)
    };

    let bg0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(30.0..150.0));
    let bg1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(30.0..150.0));
    let grad = rng.gen_range(0.0..2.0 * PI);
    let clutter: Vec<(Shape, [u8; 3], [u8; 3], Texture)> = (0..spec.clutter)
        .map(|_| {
            let (cx, cy) = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
            let r = rng.gen_range(2.0..5.0) * unit;
            let shape = match rng.gen_range(0..3) {
                0 => Shape::Ellipse { cx, cy, rx: r, ry: r * rng.gen_range(0.5..1.0), angle: rng.gen_range(0.0..PI) },
                1 => Shape::Rect { cx, cy, hw: r, hh: r * rng.gen_range(0.4..1.0), angle: rng.gen_range(0.0..PI) },
                _ => {
                    let a = rng.gen_range(0.0..PI);
                    Shape::Capsule { x0: cx, y0: cy, x1: cx + 2.0 * r * a.cos(), y1: cy + 2.0 * r * a.sin(), r: unit * 1.5 }
                }
            };
            let (p, q) = two_colors(&mut rng);
            (shape, p, q, Texture::random(&mut rng))
        })
        .collect();

    let mut image = RgbImage::new(n, n);
    let mut top = vec![None; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = 0.5 + 0.5 * ((px * grad.cos() + py * grad.sin()) / n as f64 * 2.0 - 1.0);
            let mut col: [u8; 3] = std::array::from_fn(|c| (bg0[c] * (1.0 - t) + bg1[c] * t).round() as u8);
            for (shape, p, q, tex) in &clutter {
                if shape.contains(px, py) {
                    col = if tex.secondary(px / unit, py / unit) { *q } else { *p };
                }
            }
            let (u, v) = to_object(px, py);
            let hit = template.parts.iter().rposition(|p| p.shape.contains(u, v));
            if let Some(j) = hit {
                let part = &template.parts[j];
                col = if part.texture.secondary(u, v) { part.secondary } else { part.primary };
            }
            top[y * n + x] = hit;
            image.set(y, x, col);
        }
    }

    if spec.noise_level > 0.0 {
        let mut noise = rng_for(spec.seed, &format!("noise/{class}/{index}"));
        let sigma = spec.noise_level * 255.0;
        for b in image.data.iter_mut() {
            *b = (*b as f64 + sigma * standard_normal(&mut noise)).round().clamp(0.0, 255.0) as u8;
        }
    }
    Rendered { image, top }
}

/// Part `j` covers its own topmost pixels and those of parts it encloses.
fn part_masks(template: &ClassTemplate, top: &[Option<usize>], n: usize) -> Vec<BinaryMask> {
    let encloses = |outer: usize, mut inner: usize| loop {
        if inner == outer {
            return true;
        }
        match template.parts[inner].parent {
            Some(p) => inner = p,
            None => return false,
        }
    };
    (0..template.parts.len())
        .map(|j| BinaryMask::from_fn(n, n, |y, x| top[y * n + x].is_some_and(|t| encloses(j, t))))
        .collect()
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    let (templates, vocab) = build_templates(spec)?;
    let n = spec.image_size;
    let mut images = Vec::new();
    let mut records = Vec::new();
    let mut foregrounds = Vec::new();
    for (c, t) in templates.iter().enumerate() {
        let ids = vocab.parts_of(c)?.to_vec();
        for i in 0..spec.samples_per_class {
            let r = render(spec, t, c, i);
            let mut rec = AnnotationRecord::new(sample_id(c, i), c, Source::Human);
            for (j, m) in part_masks(t, &r.top, n).into_iter().enumerate() {
                if !m.is_empty() {
                    rec.instances.push(PartInstanceMask::new(m, ids[j])?);
                }
            }
            rec.inclusions = vocab.inclusions_of(c);
            foregrounds.push(BinaryMask::from_fn(n, n, |y, x| r.top[y * n + x].is_some()));
            images.push(r.image);
            records.push(rec);
        }
    }
    Ok(SynthDataset { images, records, vocab, foregrounds, templates })
}

/// Record indices of the three splits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-balanced split: within each object class the records are sorted
/// by image id, shuffled with a per-class seed and cut by `ratios`.
pub fn split_dataset(records: &[AnnotationRecord], ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Ratio(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.object_id).or_default().push(i);
    }
    let mut out = SplitIndices::default();
    for (class, mut idx) in by_class {
        idx.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id));
        idx.shuffle(&mut rng_for(seed, &format!("split/{class}")));
        let n = idx.len();
        let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for v in [&mut out.train, &mut out.val, &mut out.test] {
        v.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::part_data::{compose_mask, validate_with_foreground};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec { num_objects: 4, samples_per_class: 5, seed, ..Default::default() }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.records, b.records);
        let c = generate_dataset(&small(4)).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn counts_and_vocab() {
        let spec = SynthSpec { num_objects: 2, samples_per_class: 10, ..Default::default() };
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(d.records.len(), 20);
        assert_eq!(d.vocab.num_objects(), 2);
    }

    #[test]
    fn records_validate_and_cover_foreground() {
        for seed in 0..3 {
            let spec = SynthSpec { parts_per_object: [3, 8], ..small(seed) };
            let d = generate_dataset(&spec).unwrap();
            for (r, fg) in d.records.iter().zip(&d.foregrounds) {
                let rep = validate_with_foreground(r, &d.vocab, Some(fg));
                assert!(rep.passed, "{}: {:?}", r.image_id, rep.violations);
                compose_mask(r, &d.vocab).unwrap();
            }
        }
    }

    #[test]
    fn noise_only_changes_pixels() {
        let clean = generate_dataset(&SynthSpec { noise_level: 0.0, ..small(1) }).unwrap();
        let noisy = generate_dataset(&SynthSpec { noise_level: 0.2, ..small(1) }).unwrap();
        assert_eq!(clean.records, noisy.records);
        assert_ne!(clean.images, noisy.images);
    }

    #[test]
    fn spec_errors() {
        for bad in [
            SynthSpec { num_objects: 1, ..Default::default() },
            SynthSpec { parts_per_object: [2, 5], ..Default::default() },
            SynthSpec { parts_per_object: [3, 9], ..Default::default() },
            SynthSpec { image_size: 8, ..Default::default() },
            SynthSpec { samples_per_class: 1, ..Default::default() },
            SynthSpec { noise_level: 1.5, ..Default::default() },
        ] {
            assert!(matches!(generate_dataset(&bad), Err(Error::Spec(_))));
        }
    }

    #[test]
    fn confusable_pairs_differ_in_one_part() {
        let spec = SynthSpec { confusable_pairs: true, ..small(2) };
        let (t, vocab) = build_templates(&spec).unwrap();
        for pair in t.chunks(2) {
            assert_eq!(pair[0].parts.len(), pair[1].parts.len());
            let differing = pair[0].parts.iter().zip(&pair[1].parts).filter(|(a, b)| a.shape != b.shape).count();
            assert_eq!(differing, 1);
        }
        assert!(vocab.parts_of(0).unwrap().iter().all(|p| !vocab.parts_of(1).unwrap().contains(p)));
    }

    #[test]
    fn split_ratios() {
        let d = generate_dataset(&SynthSpec { num_objects: 3, samples_per_class: 10, ..Default::default() }).unwrap();
        let s = split_dataset(&d.records, [0.8, 0.1, 0.1], 7).unwrap();
        for c in 0..3 {
            let count = |v: &[usize]| v.iter().filter(|&&i| d.records[i].object_id == c).count();
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (8, 1, 1));
        }
        let all = split_dataset(&d.records, [1.0, 0.0, 0.0], 7).unwrap();
        assert_eq!(all.train.len(), 30);
        assert!(matches!(split_dataset(&d.records, [0.5, 0.4, 0.2], 7), Err(Error::Ratio(_))));
    }

    #[test]
    fn split_ignores_input_order() {
        let d = generate_dataset(&SynthSpec { num_objects: 3, samples_per_class: 10, ..Default::default() }).unwrap();
        let ids = |recs: &[AnnotationRecord], idx: &[usize]| {
            let mut v: Vec<String> = idx.iter().map(|&i| recs[i].image_id.clone()).collect();
            v.sort();
            v
        };
        let a = split_dataset(&d.records, [0.6, 0.2, 0.2], 11).unwrap();
        let mut shuffled = d.records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let b = split_dataset(&shuffled, [0.6, 0.2, 0.2], 11).unwrap();
        assert_eq!(ids(&d.records, &a.train), ids(&shuffled, &b.train));
        assert_eq!(ids(&d.records, &a.test), ids(&shuffled, &b.test));
    }
}
