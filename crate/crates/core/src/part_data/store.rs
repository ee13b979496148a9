//! On-disk annotation store.
//!
//! ```text
//! <store>/
//!   vocab.json       vocabulary manifest (ids, names, parts_of, inclusions)
//!   records.jsonl    one RecordEntry per line, masks as COCO RLE
//!   images/<id>.png  optional 8-bit RGB images
//!   splits.json      optional {"train": [...], "val": [...], "test": [...]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{AnnotationRecord, RecordEntry};
use super::vocab::PartVocabulary;
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const VOCAB_FILE: &str = "vocab.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub struct AnnotationStore {
    root: PathBuf,
}

impl AnnotationStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn image_path(&self, image_id: &str) -> PathBuf {
        self.root.join(IMAGES_DIR).join(format!("{image_id}.png"))
    }

    pub fn write_vocab(&self, vocab: &PartVocabulary) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        write_json(&self.path(VOCAB_FILE), vocab)
    }

    pub fn read_vocab(&self) -> Result<PartVocabulary> {
        read_json(&self.path(VOCAB_FILE))
    }

    pub fn write_records(&self, records: &[AnnotationRecord]) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let p = self.path(RECORDS_FILE);
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(&RecordEntry::from(r))?);
            out.push('\n');
        }
        fs::write(&p, out).map_err(|e| Error::io(&p, e))
    }

    pub fn read_records(&self) -> Result<Vec<AnnotationRecord>> {
        let p = self.path(RECORDS_FILE);
        let f = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        let mut out = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&p, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: RecordEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", p.display(), n + 1)))?;
            out.push(AnnotationRecord::try_from(entry)?);
        }
        Ok(out)
    }

    pub fn write_image(&self, image_id: &str, img: &RgbImage) -> Result<()> {
        let dir = self.root.join(IMAGES_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        img.save_png(&self.image_path(image_id))
    }

    pub fn read_image(&self, image_id: &str) -> Result<RgbImage> {
        RgbImage::load_png(&self.image_path(image_id))
    }

    /// Images for every record, in record order.
    pub fn read_images(&self, records: &[AnnotationRecord]) -> Result<Vec<RgbImage>> {
        records.iter().map(|r| self.read_image(&r.image_id)).collect()
    }

    pub fn write_splits(&self, splits: &Splits) -> Result<()> {
        write_json(&self.path(SPLITS_FILE), splits)
    }

    pub fn read_splits(&self) -> Result<Splits> {
        read_json(&self.path(SPLITS_FILE))
    }

    /// Record index by image id.
    pub fn index(records: &[AnnotationRecord]) -> BTreeMap<&str, usize> {
        records.iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect()
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
