//! Part annotation data model: vocabulary, records, composite masks,
//! annotation-rule validation, statistics, and persistence.

pub mod coco;
pub mod compose;
pub mod mask;
pub mod record;
pub mod stats;
pub mod store;
pub mod validate;
pub mod vocab;

pub use compose::{compose_mask, compose_mask_sized, downsample_mask, object_mask_from_parts, CompositeMask};
pub use mask::{BinaryMask, LabelGrid, Rle};
pub use record::{AnnotationRecord, PartInstanceMask, Source};
pub use stats::{density_histogram, DensityHistogram};
pub use store::{AnnotationStore, Splits};
pub use validate::{validate_annotation, validate_with_foreground, ValidationReport, Violation};
pub use vocab::{InclusionRelation, PartVocabulary};
