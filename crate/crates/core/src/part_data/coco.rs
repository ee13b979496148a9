//! Import of COCO-format part annotation files.
//!
//! Each COCO category is one part; its `supercategory` names the owning
//! object. Part ids are assigned in ascending category-id order, object ids
//! in order of first appearance along that ordering. An optional top-level
//! `part_inclusions` dictionary maps child category id to parent category id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mask::{BinaryMask, Rle};
use super::record::{AnnotationRecord, PartInstanceMask, Source};
use super::vocab::{InclusionRelation, PartVocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
    #[serde(default)]
    pub part_inclusions: BTreeMap<String, u64>,
}

#[derive(Debug, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

#[derive(Debug, Deserialize)]
pub struct CocoAnnotation {
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default)]
    pub score: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [usize; 2], counts: RleCounts },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u32>),
    Compressed(String),
}

/// One row of the category-id to part-id table emitted on import.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub category_id: u64,
    pub part_id: usize,
    pub object_id: usize,
    pub name: String,
    pub object_name: String,
}

pub struct CocoImport {
    pub vocab: PartVocabulary,
    pub records: Vec<AnnotationRecord>,
    pub mapping: Vec<CategoryMapping>,
    /// Image id (file stem) to original file name.
    pub file_names: BTreeMap<String, String>,
}

pub fn import_coco(json: &str) -> Result<CocoImport> {
    let file: CocoFile = serde_json::from_str(json).map_err(|e| Error::Data(format!("COCO json: {e}")))?;
    let mut cats: Vec<&CocoCategory> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);

    let mut object_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut object_names = Vec::new();
    let mut parts_of: Vec<Vec<usize>> = Vec::new();
    let mut part_names = Vec::new();
    let mut mapping = Vec::new();
    let mut part_of_cat = BTreeMap::new();
    for (part_id, c) in cats.iter().enumerate() {
        let obj_name = if c.supercategory.is_empty() { c.name.clone() } else { c.supercategory.clone() };
        let obj = *object_ids.entry(obj_name.clone()).or_insert_with(|| {
            object_names.push(obj_name.clone());
            parts_of.push(Vec::new());
            parts_of.len() - 1
        });
        parts_of[obj].push(part_id);
        part_names.push(format!("{obj_name}:{}", c.name));
        part_of_cat.insert(c.id, (part_id, obj));
        mapping.push(CategoryMapping { category_id: c.id, part_id, object_id: obj, name: c.name.clone(), object_name: obj_name });
    }

    let mut inclusions = Vec::new();
    for (child, parent) in &file.part_inclusions {
        let child: u64 = child.parse().map_err(|_| Error::Data(format!("inclusion key `{child}` is not a category id")))?;
        let (&(cp, co), &(pp, po)) = match (part_of_cat.get(&child), part_of_cat.get(parent)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Data(format!("inclusion {child} -> {parent} names an unknown category"))),
        };
        if co != po {
            return Err(Error::Data(format!("inclusion {child} -> {parent} crosses objects")));
        }
        inclusions.push(InclusionRelation { object_id: co, child_part: cp, parent_part: pp });
    }

    let vocab = PartVocabulary::new(parts_of)?.with_names(object_names, part_names)?.with_inclusions(inclusions)?;

    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut records = Vec::new();
    let mut file_names = BTreeMap::new();
    for img in &file.images {
        let Some(anns) = by_image.get(&img.id) else { continue };
        let stem = std::path::Path::new(&img.file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| img.id.to_string());
        let mut object = None;
        let mut instances = Vec::new();
        let mut any_score = false;
        for a in anns {
            let &(part_id, obj) = part_of_cat
                .get(&a.category_id)
                .ok_or_else(|| Error::Data(format!("image {}: unknown category {}", img.id, a.category_id)))?;
            match object {
                None => object = Some(obj),
                Some(o) if o != obj => {
                    return Err(Error::Data(format!("image {} mixes parts of objects {o} and {obj}", img.id)));
                }
                _ => {}
            }
            let mask = match &a.segmentation {
                Segmentation::Polygons(polys) => rasterize_polygons(polys, img.height, img.width),
                Segmentation::Rle { size, counts } => {
                    let rle = match counts {
                        RleCounts::Raw(c) => Rle { size: *size, counts: c.clone() },
                        RleCounts::Compressed(s) => Rle::from_compressed(*size, s)?,
                    };
                    rle.decode()?
                }
            };
            if mask.dims() != (img.height, img.width) {
                return Err(Error::Dimension(format!("image {}: mask {:?} vs image {}x{}", img.id, mask.dims(), img.height, img.width)));
            }
            if mask.is_empty() {
                continue;
            }
            let mut inst = PartInstanceMask::new(mask, part_id)?;
            if let Some(s) = a.score {
                inst = inst.with_score(s)?;
                any_score = true;
            }
            instances.push(inst);
        }
        let Some(object_id) = object else { continue };
        let source = if any_score { Source::Pseudo } else { Source::Human };
        let mut rec = AnnotationRecord::new(stem.clone(), object_id, source);
        rec.instances = instances;
        rec.inclusions = vocab.inclusions_of(object_id);
        file_names.insert(stem, img.file_name.clone());
        records.push(rec);
    }
    Ok(CocoImport { vocab, records, mapping, file_names })
}

/// Even-odd fill of pixel centers.
pub fn rasterize_polygons(polys: &[Vec<f64>], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    for poly in polys {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for y in 0..height {
            let cy = y as f64 + 0.5;
            let mut xs = Vec::new();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= cy && cy < y1) || (y1 <= cy && cy < y0) {
                    xs.push(x0 + (cy - y0) / (y1 - y0) * (x1 - x0));
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for pair in xs.chunks_exact(2) {
                for x in 0..width {
                    let cx = x as f64 + 0.5;
                    if cx >= pair[0] && cx < pair[1] {
                        mask.set(y, x, !mask.get(y, x));
                    }
                }
            }
        }
    }
    mask
}
