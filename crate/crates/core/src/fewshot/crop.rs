use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::derive_seed;
use crate::part_data::{AnnotationRecord, PartInstanceMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    /// Number of crops `l`.
    pub parts: usize,
    /// Output `(height, width)`; `None` keeps the source image size.
    pub size: Option<(usize, usize)>,
    /// Fill missing parts with seeded random rectangles.
    pub fallback: bool,
    pub seed: u64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self { parts: 3, size: None, fallback: true, seed: 0 }
    }
}

/// Area descending, then part id; the remaining keys only make the order
/// total so that instance permutations cannot change it.
fn rank(a: &PartInstanceMask, b: &PartInstanceMask) -> Ordering {
    b.mask
        .area()
        .cmp(&a.mask.area())
        .then(a.part_id.cmp(&b.part_id))
        .then_with(|| a.mask.bbox().cmp(&b.mask.bbox()))
        .then_with(|| a.mask.data().cmp(b.mask.data()))
}

/// Tight bounding-box crops of the `l` largest part instances, resized
/// bilinearly. Missing crops are random rectangles of the image, seeded by
/// image id and slot.
pub fn crop_largest_parts(image: &RgbImage, record: &AnnotationRecord, spec: &CropSpec) -> Result<Vec<RgbImage>> {
    if spec.parts == 0 {
        return Err(Error::Spec("at least one crop is required".into()));
    }
    let (h, w) = (image.height, image.width);
    if let Some((rh, rw)) = record.dims()? {
        if (rh, rw) != (h, w) {
            return Err(Error::Dimension(format!("record masks {rh}x{rw}, image {h}x{w}")));
        }
    }
    if record.instances.is_empty() && !spec.fallback {
        return Err(Error::EmptyRecord);
    }
    let (oh, ow) = spec.size.unwrap_or((h, w));
    let mut ranked: Vec<&PartInstanceMask> = record.instances.iter().collect();
    ranked.sort_by(|a, b| rank(a, b));
    let mut out = Vec::with_capacity(spec.parts);
    for (slot, inst) in ranked.iter().take(spec.parts).enumerate() {
        let (y0, x0, y1, x1) = inst.mask.bbox().ok_or_else(|| Error::Data(format!("empty mask in slot {slot}")))?;
        out.push(image.crop(y0, x0, y1, x1).resize_bilinear(oh, ow));
    }
    for slot in out.len()..spec.parts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("crop/{}/{slot}", record.image_id)));
        let ch = rng.gen_range(h.div_ceil(4)..=(3 * h / 4).max(h.div_ceil(4)));
        let cw = rng.gen_range(w.div_ceil(4)..=(3 * w / 4).max(w.div_ceil(4)));
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        out.push(image.crop(y0, x0, y0 + ch, x0 + cw).resize_bilinear(oh, ow));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::part_data::{BinaryMask, Source};

    fn gradient_image(h: usize, w: usize) -> RgbImage {
        let mut im = RgbImage::new(h, w);
        for y in 0..h {
            for x in 0..w {
                im.set(y, x, [(y * 7) as u8, (x * 11) as u8, ((x + y) * 3) as u8]);
            }
        }
        im
    }

    fn block(h: usize, w: usize, y0: usize, x0: usize, hh: usize, ww: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (y0..y0 + hh).contains(&y) && (x0..x0 + ww).contains(&x))
    }

    fn record(parts: &[(BinaryMask, usize)]) -> AnnotationRecord {
        let mut r = AnnotationRecord::new("img", 0, Source::Human);
        for (m, id) in parts {
            r.instances.push(PartInstanceMask::new(m.clone(), *id).unwrap());
        }
        r
    }

    #[test]
    fn crops_follow_area_order() {
        let im = gradient_image(20, 20);
        // areas 100, 50, 10
        let r = record(&[(block(20, 20, 0, 0, 2, 5), 7), (block(20, 20, 10, 10, 10, 10), 2), (block(20, 20, 0, 10, 5, 10), 4)]);
        let spec = CropSpec { size: Some((4, 4)), ..Default::default() };
        let crops = crop_largest_parts(&im, &r, &spec).unwrap();
        let expect = [(10, 10, 20, 20), (0, 10, 5, 20), (0, 0, 2, 5)];
        for (c, (y0, x0, y1, x1)) in crops.iter().zip(expect) {
            assert_eq!(c, &im.crop(y0, x0, y1, x1).resize_bilinear(4, 4));
        }
    }

    #[test]
    fn full_image_part_is_identity() {
        let im = gradient_image(9, 13);
        let r = record(&[(BinaryMask::from_fn(9, 13, |_, _| true), 0)]);
        let crops = crop_largest_parts(&im, &r, &CropSpec { parts: 1, ..Default::default() }).unwrap();
        assert_eq!(crops, vec![im]);
    }

    #[test]
    fn fallback_is_seeded() {
        let im = gradient_image(16, 16);
        let r = record(&[(block(16, 16, 0, 0, 4, 4), 0), (block(16, 16, 8, 8, 3, 3), 1)]);
        let spec = CropSpec::default();
        let a = crop_largest_parts(&im, &r, &spec).unwrap();
        let b = crop_largest_parts(&im, &r, &spec).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[2], b[2]);
        let c = crop_largest_parts(&im, &r, &CropSpec { seed: 1, ..spec }).unwrap();
        assert_eq!(a[..2], c[..2]);
    }

    #[test]
    fn empty_record_without_fallback_fails() {
        let im = gradient_image(8, 8);
        let r = record(&[]);
        assert!(matches!(crop_largest_parts(&im, &r, &CropSpec { fallback: false, ..Default::default() }), Err(Error::EmptyRecord)));
        assert_eq!(crop_largest_parts(&im, &r, &CropSpec::default()).unwrap().len(), 3);
    }

    #[test]
    fn permutation_invariant() {
        let im = gradient_image(12, 12);
        // equal areas and ids force the secondary keys
        let parts = vec![
            (block(12, 12, 0, 0, 3, 3), 1),
            (block(12, 12, 6, 6, 3, 3), 1),
            (block(12, 12, 0, 6, 2, 2), 0),
            (block(12, 12, 8, 0, 4, 1), 2),
        ];
        let spec = CropSpec { parts: 4, ..Default::default() };
        let base = crop_largest_parts(&im, &record(&parts), &spec).unwrap();
        for rot in 1..parts.len() {
            let mut p = parts.clone();
            p.rotate_left(rot);
            p.swap(0, 1);
            assert_eq!(crop_largest_parts(&im, &record(&p), &spec).unwrap(), base);
        }
    }
}
