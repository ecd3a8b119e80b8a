//! File formats, run configuration, manifests and image export.

pub mod config;
pub mod dataset;
pub mod export;
pub mod field;
pub mod manifest;

pub use config::RunConfig;
pub use dataset::{read_dataset, write_dataset, LoadedImage};
pub use export::{export_labels_png, export_panel, export_scalar_png, Slice};
pub use field::{read_any, read_field, write_field, write_field_as, AnyField, Dtype, FieldFile, FormatError};
pub use manifest::Manifest;
