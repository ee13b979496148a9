use serde::{Deserialize, Serialize};

use super::mask::{BinaryMask, Rle};
use super::vocab::InclusionRelation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Human,
    Pseudo,
}

/// One part instance: its mask, part category, and optional confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct PartInstanceMask {
    pub mask: BinaryMask,
    pub part_id: usize,
    pub score: Option<f64>,
}

impl PartInstanceMask {
    pub fn new(mask: BinaryMask, part_id: usize) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Data(format!("instance of part {part_id} has an empty mask")));
        }
        Ok(Self { mask, part_id, score: None })
    }

    pub fn with_score(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Data(format!("instance score {score} outside [0, 1]")));
        }
        self.score = Some(score);
        Ok(self)
    }
}

/// Part annotation of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub object_id: usize,
    pub instances: Vec<PartInstanceMask>,
    pub inclusions: Vec<InclusionRelation>,
    pub source: Source,
}

impl AnnotationRecord {
    pub fn new(image_id: impl Into<String>, object_id: usize, source: Source) -> Self {
        Self { image_id: image_id.into(), object_id, instances: Vec::new(), inclusions: Vec::new(), source }
    }

    /// Shared `(H, W)` of the instance masks; `None` for empty records.
    pub fn dims(&self) -> Result<Option<(usize, usize)>> {
        let mut dims = None;
        for inst in &self.instances {
            match dims {
                None => dims = Some(inst.mask.dims()),
                Some(d) if d != inst.mask.dims() => {
                    return Err(Error::Dimension(format!(
                        "record {}: masks of size {:?} and {:?}",
                        self.image_id,
                        d,
                        inst.mask.dims()
                    )))
                }
                _ => {}
            }
        }
        Ok(dims)
    }
}

/// Serialized form of one record (one JSON line in the store).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub image_id: String,
    pub object_id: usize,
    pub source: Source,
    pub instances: Vec<InstanceEntry>,
    #[serde(default)]
    pub inclusions: Vec<InclusionRelation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub part_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub rle: Rle,
}

impl From<&AnnotationRecord> for RecordEntry {
    fn from(r: &AnnotationRecord) -> Self {
        RecordEntry {
            image_id: r.image_id.clone(),
            object_id: r.object_id,
            source: r.source,
            instances: r
                .instances
                .iter()
                .map(|i| InstanceEntry { part_id: i.part_id, score: i.score, rle: i.mask.to_rle() })
                .collect(),
            inclusions: r.inclusions.clone(),
        }
    }
}

impl TryFrom<RecordEntry> for AnnotationRecord {
    type Error = Error;

    fn try_from(e: RecordEntry) -> Result<Self> {
        let instances = e
            .instances
            .into_iter()
            .map(|i| {
                let inst = PartInstanceMask::new(i.rle.decode()?, i.part_id)?;
                match i.score {
                    Some(s) => inst.with_score(s),
                    None => Ok(inst),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = AnnotationRecord {
            image_id: e.image_id,
            object_id: e.object_id,
            instances,
            inclusions: e.inclusions,
            source: e.source,
        };
        rec.dims()?;
        Ok(rec)
    }
}
