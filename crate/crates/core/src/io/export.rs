//! 8-bit PNG export of 2D fields or slices of 3D ones.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::augment::LabelMap;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField};

/// Fixed label palette; label `l` uses entry `l % 16`. Entry 0 is black.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [255, 255, 255],
];

/// Axis held fixed and its index, for 3D inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub axis: usize,
    pub index: usize,
}

/// Flat indices of the exported plane in image row-major order, with its size.
fn plane(grid: &GridSpec, slice: Option<Slice>) -> Result<(u32, u32, Vec<usize>)> {
    let dims = grid.dims3();
    let (fixed, k) = match (grid.ndim(), slice) {
        (2, None) => (2, 0),
        (2, Some(s)) if s.axis == 2 && s.index == 0 => (2, 0),
        (2, Some(s)) => return Err(Error::InvalidConfig(format!("slice {s:?} on a 2D field"))),
        (_, None) => return Err(Error::InvalidConfig("3D export needs a slice axis and index".into())),
        (_, Some(s)) => {
            if s.axis > 2 || s.index >= dims[s.axis] {
                return Err(Error::InvalidConfig(format!("slice index {} out of range on axis {}", s.index, s.axis)));
            }
            (s.axis, s.index)
        }
    };
    let axes: Vec<usize> = (0..3).filter(|&a| a != fixed).collect();
    let (u, v) = (axes[0], axes[1]);
    let mut idx = Vec::with_capacity(dims[u] * dims[v]);
    for j in 0..dims[v] {
        for i in 0..dims[u] {
            let mut ijk = [0; 3];
            ijk[u] = i;
            ijk[v] = j;
            ijk[fixed] = k;
            idx.push(grid.flat_index(ijk));
        }
    }
    Ok((dims[u] as u32, dims[v] as u32, idx))
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Export(format!("{}: {other}", path.display())),
    }
}

/// Grayscale with min-max windowing; a constant field maps to mid-gray.
pub fn export_scalar_png(field: &ScalarField, path: &Path, slice: Option<Slice>) -> Result<()> {
    let (w, h, idx) = plane(field.grid(), slice)?;
    let v = field.values();
    let lo = idx.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
    let hi = idx.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max);
    let px: Vec<u8> = idx
        .iter()
        .map(|&i| if hi > lo { ((v[i] - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect();
    GrayImage::from_raw(w, h, px).expect("buffer size").save(path).map_err(|e| save_err(path, e))
}

pub fn export_labels_png(labels: &LabelMap, path: &Path, slice: Option<Slice>) -> Result<()> {
    let (w, h, idx) = plane(labels.grid(), slice)?;
    let l = labels.labels();
    let px: Vec<u8> = idx.iter().flat_map(|&i| PALETTE[l[i] as usize % 16]).collect();
    RgbImage::from_raw(w, h, px).expect("buffer size").save(path).map_err(|e| save_err(path, e))
}

/// File name of one cell of a λ×t panel.
pub fn panel_file_name(prefix: &str, lambda1: f64, t: f64) -> String {
    format!("{prefix}_lambda{lambda1:.3}_t{t:+.3}.png")
}

/// Writes one image per `(λ₁, t, image)` cell into `dir`.
pub fn export_panel(cells: &[(f64, f64, ScalarField)], dir: &Path, prefix: &str, slice: Option<Slice>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cells
        .iter()
        .map(|(l, t, im)| {
            let p = dir.join(panel_file_name(prefix, *l, *t));
            export_scalar_png(im, &p, slice)?;
            Ok(p)
        })
        .collect()
}
