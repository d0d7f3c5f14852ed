//! Annotation import, canonical manifests, patch extraction and augmentation.

pub mod augment;
pub mod import;
pub mod manifest;
pub mod patch;
pub mod reader;
pub mod synthetic;

pub use augment::{augment, AugmentPolicy};
pub use import::{import_manifest, CocoMapping, CsvMapping, ImportReport, MappingConfig, PUBLISHED_DATASETS};
pub use manifest::{AnnotationRecord, DatasetManifest, ImageInfo, Label, LabelCounts, MANIFEST_SCHEMA_VERSION};
pub use patch::{denormalize, extract_patch, normalize, sample_random_patch, BorderPolicy, PatchSpec};
pub use reader::{resolve_image_root, FileImageStore, MemoryImageStore, RawPatch, TileReader, IMAGE_ROOT_ENV};
pub use synthetic::{generate as generate_synthetic, SyntheticConfig, SyntheticDataset, SyntheticStore};
