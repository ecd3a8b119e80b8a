//! Dataset directories: an index file plus one field file per image and
//! label map.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{LabelMap, Subject};
use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::io::field::{read_field, write_field};

pub const INDEX_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Free-form provenance, e.g. an augmentation lineage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

/// An image with optional labels as read from a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub id: String,
    pub image: ScalarField,
    pub labels: Option<LabelMap>,
}

impl LoadedImage {
    pub fn into_subject(self) -> Result<Subject> {
        let labels = self
            .labels
            .ok_or_else(|| Error::InvalidLabels(format!("{} has no label map", self.id)))?;
        Subject::new(self.id, self.image, labels)
    }
}

/// Writes images (and labels) as `<id>_image.gf` / `<id>_labels.gf` plus the index.
pub fn write_dataset(
    dir: &Path,
    items: &[(String, &ScalarField, Option<&LabelMap>, Option<serde_json::Value>)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = DatasetIndex::default();
    for (id, image, labels, meta) in items {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::InvalidConfig(format!("id {id:?} is not a valid file stem")));
        }
        let image_file = PathBuf::from(format!("{id}_image.gf"));
        write_field(dir.join(&image_file), *image)?;
        let labels_file = match labels {
            Some(l) => {
                let f = PathBuf::from(format!("{id}_labels.gf"));
                write_field(dir.join(&f), *l)?;
                Some(f)
            }
            None => None,
        };
        index.entries.push(DatasetEntry { id: id.clone(), image: image_file, labels: labels_file, meta: meta.clone() });
    }
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<LoadedImage>> {
    read_index(dir)?
        .entries
        .into_iter()
        .map(|e| {
            Ok(LoadedImage {
                image: read_field(dir.join(&e.image))?,
                labels: e.labels.map(|l| read_field(dir.join(l))).transpose()?,
                id: e.id,
            })
        })
        .collect()
}
