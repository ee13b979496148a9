//! COCO-style average precision: greedy score-ordered matching per image and
//! category, 101-point interpolated precision/recall integral.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{box_iou, mask_iou};
use crate::error::{Error, Result};
use crate::part_data::{BinaryMask, Rle};

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionRepr", into = "RegionRepr")]
pub enum Region {
    Mask(BinaryMask),
    /// `[x0, y0, x1, y1]`
    Box([f64; 4]),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum RegionRepr {
    Mask(Rle),
    Box([f64; 4]),
}

impl TryFrom<RegionRepr> for Region {
    type Error = Error;
    fn try_from(r: RegionRepr) -> Result<Self> {
        Ok(match r {
            RegionRepr::Mask(rle) => Region::Mask(rle.decode()?),
            RegionRepr::Box(b) => Region::Box(b),
        })
    }
}

impl From<Region> for RegionRepr {
    fn from(r: Region) -> Self {
        match r {
            Region::Mask(m) => RegionRepr::Mask(m.to_rle()),
            Region::Box(b) => RegionRepr::Box(b),
        }
    }
}

impl Region {
    fn validate(&self) -> Result<()> {
        if let Region::Box(b) = self {
            if !(b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1]) {
                return Err(Error::Data(format!("degenerate box {b:?}")));
            }
        }
        Ok(())
    }

    pub fn iou(&self, other: &Region) -> Result<f64> {
        match (self, other) {
            (Region::Mask(a), Region::Mask(b)) => mask_iou(a, b),
            (Region::Box(a), Region::Box(b)) => Ok(box_iou(a, b)),
            _ => Err(Error::Data("cannot compare a mask with a box".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: String,
    pub category: usize,
    pub score: f64,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub image_id: String,
    pub category: usize,
    pub region: Region,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Data(format!("detection score {} outside [0, 1]", self.score)));
        }
        self.region.validate()
    }
}

/// True-positive flags and scores of all detections of one category, in
/// global score order.
fn match_category(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> Result<Vec<(f64, bool)>> {
    let mut by_image: BTreeMap<&str, (Vec<&Detection>, Vec<&GroundTruth>)> = BTreeMap::new();
    for d in dets {
        by_image.entry(&d.image_id).or_default().0.push(d);
    }
    for g in gts {
        by_image.entry(&g.image_id).or_default().1.push(g);
    }
    let mut out = Vec::with_capacity(dets.len());
    for (_, (mut ds, gs)) in by_image {
        ds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; gs.len()];
        for d in ds {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gs.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = d.region.iou(&g.region)?;
                if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            out.push((d.score, best.is_some()));
        }
    }
    // stable: equal scores keep image order, then in-image order
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(out)
}

fn interpolated_ap(matches: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(matches.len());
    let mut precision = Vec::with_capacity(matches.len());
    for (i, &(_, hit)) in matches.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP per category at one IoU threshold. Categories without ground truth
/// are left out; a category with ground truth but no detections scores 0.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Result<BTreeMap<usize, f64>> {
    for d in dets {
        d.validate()?;
    }
    for g in gts {
        g.region.validate()?;
    }
    let cats: BTreeSet<usize> = gts.iter().map(|g| g.category).collect();
    let mut out = BTreeMap::new();
    for c in cats {
        let ds: Vec<&Detection> = dets.iter().filter(|d| d.category == c).collect();
        let gs: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c).collect();
        let m = match_category(&ds, &gs, iou_threshold)?;
        out.insert(c, interpolated_ap(&m, gs.len()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over categories and the ten thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Threshold-averaged AP per category.
    pub per_category: BTreeMap<usize, f64>,
}

pub fn coco_summary(dets: &[Detection], gts: &[GroundTruth]) -> Result<ApSummary> {
    let mean = |m: &BTreeMap<usize, f64>| if m.is_empty() { 0.0 } else { m.values().sum::<f64>() / m.len() as f64 };
    let mut per_category: BTreeMap<usize, f64> = BTreeMap::new();
    let (mut ap50, mut ap75) = (0.0, 0.0);
    for (i, &t) in IOU_THRESHOLDS.iter().enumerate() {
        let m = average_precision(dets, gts, t)?;
        if i == 0 {
            ap50 = mean(&m);
        }
        if i == 5 {
            ap75 = mean(&m);
        }
        for (c, v) in m {
            *per_category.entry(c).or_default() += v / IOU_THRESHOLDS.len() as f64;
        }
    }
    Ok(ApSummary { ap: mean(&per_category), ap50, ap75, per_category })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn det(img: &str, c: usize, s: f64, b: [f64; 4]) -> Detection {
        Detection { image_id: img.into(), category: c, score: s, region: Region::Box(b) }
    }

    fn gt(img: &str, c: usize, b: [f64; 4]) -> GroundTruth {
        GroundTruth { image_id: img.into(), category: c, region: Region::Box(b) }
    }

    #[test]
    fn threshold_forced_single_match() {
        // IoU 0.6: 6 / 10
        let g = vec![gt("a", 0, [0.0, 0.0, 8.0, 1.0])];
        let d = vec![det("a", 0, 0.9, [2.0, 0.0, 10.0, 1.0])];
        assert!((g[0].region.iou(&d[0].region).unwrap() - 0.6).abs() < 1e-12);
        let s = coco_summary(&d, &g).unwrap();
        assert_eq!(s.ap50, 1.0);
        assert_eq!(s.ap75, 0.0);
    }

    #[test]
    fn no_detections_scores_zero() {
        let g = vec![gt("a", 3, [0.0, 0.0, 1.0, 1.0])];
        assert_eq!(average_precision(&[], &g, 0.5).unwrap()[&3], 0.0);
        assert_eq!(coco_summary(&[], &g).unwrap().ap, 0.0);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let g = vec![gt("a", 0, [0.0, 0.0, 1.0, 1.0])];
        assert!(average_precision(&[det("a", 0, 1.5, [0.0, 0.0, 1.0, 1.0])], &g, 0.5).is_err());
        assert!(average_precision(&[det("a", 0, 0.5, [1.0, 0.0, 1.0, 1.0])], &g, 0.5).is_err());
    }

    #[test]
    fn masks_round_trip_through_json() {
        let m = BinaryMask::from_fn(4, 5, |y, x| y > x);
        let d = Detection { image_id: "i".into(), category: 1, score: 0.5, region: Region::Mask(m) };
        let back: Detection = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    /// Independent matcher: repeatedly hand the highest-scoring unprocessed
    /// detection the best still-free ground truth, then take the maximum
    /// precision at recall >= r over every prefix of the ranking.
    fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], c: usize, thr: f64) -> f64 {
        let gs: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c).collect();
        let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.category == c).collect();
        ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut free: Vec<bool> = vec![true; gs.len()];
        let mut hits = Vec::new();
        for d in &ds {
            let cands: Vec<(usize, f64)> = (0..gs.len())
                .filter(|&j| free[j] && gs[j].image_id == d.image_id)
                .map(|j| (j, d.region.iou(&gs[j].region).unwrap()))
                .filter(|&(_, iou)| iou >= thr)
                .collect();
            let pick = cands.iter().copied().reduce(|a, b| if b.1 > a.1 { b } else { a });
            if let Some((j, _)) = pick {
                free[j] = false;
            }
            hits.push(pick.is_some());
        }
        let prefix = |k: usize| {
            let tp = hits[..k].iter().filter(|&&h| h).count();
            (tp as f64 / gs.len() as f64, tp as f64 / k as f64)
        };
        (0..=100)
            .map(|r| {
                let level = r as f64 / 100.0;
                (1..=hits.len()).map(prefix).filter(|&(rc, _)| rc >= level).map(|(_, p)| p).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0
    }

    fn random_instance(rng: &mut impl Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
        let rbox = |rng: &mut dyn rand::RngCore| {
            let x0 = rng.gen_range(0.0..6.0);
            let y0 = rng.gen_range(0.0..6.0);
            [x0, y0, x0 + rng.gen_range(1.0..4.0), y0 + rng.gen_range(1.0..4.0)]
        };
        let imgs = ["p", "q"];
        let nd = rng.gen_range(0..=5);
        let ng = rng.gen_range(1..=5);
        let gts = (0..ng).map(|_| gt(imgs[rng.gen_range(0..2)], rng.gen_range(0..2), rbox(rng))).collect();
        let dets = (0..nd).map(|_| det(imgs[rng.gen_range(0..2)], rng.gen_range(0..2), rng.gen_range(0.0..1.0), rbox(rng))).collect();
        (dets, gts)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle_in_every_input_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let (dets, gts) = random_instance(&mut rng);
            for thr in [0.1, 0.5, 0.75] {
                let cats: BTreeSet<usize> = gts.iter().map(|g| g.category).collect();
                let expect: BTreeMap<usize, f64> = cats.iter().map(|&c| (c, oracle_ap(&dets, &gts, c, thr))).collect();
                for perm in permutations(dets.len()) {
                    let ds: Vec<Detection> = perm.iter().map(|&i| dets[i].clone()).collect();
                    let got = average_precision(&ds, &gts, thr).unwrap();
                    assert_eq!(got.len(), expect.len());
                    for (c, v) in &expect {
                        assert!((got[c] - v).abs() < 1e-12, "cat {c}: {} vs oracle {v}", got[c]);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn invariant_to_score_rescaling(seed in 0u64..10_000, c in 0.01f64..1.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (dets, gts) = random_instance(&mut rng);
            let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * c, ..d.clone() }).collect();
            prop_assert_eq!(average_precision(&dets, &gts, 0.5).unwrap(), average_precision(&scaled, &gts, 0.5).unwrap());
        }

        #[test]
        fn dropping_a_false_positive_never_hurts(seed in 0u64..10_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (dets, gts) = random_instance(&mut rng);
            let base = average_precision(&dets, &gts, 0.5).unwrap();
            for i in 0..dets.len() {
                let c = dets[i].category;
                let mut fewer = dets.clone();
                fewer.remove(i);
                let cat: Vec<Detection> = dets.iter().filter(|d| d.category == c).cloned().collect();
                let gs: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c).collect();
                let refs: Vec<&Detection> = cat.iter().collect();
                let Ok(m) = match_category(&refs, &gs, 0.5) else { continue };
                let is_fp = m.iter().any(|&(s, hit)| !hit && s == dets[i].score);
                if is_fp && !gs.is_empty() {
                    let after = average_precision(&fewer, &gts, 0.5).unwrap();
                    prop_assert!(after[&c] >= base[&c] - 1e-12);
                }
            }
        }
    }
}
