//! `GEOFLOW1` field files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "GEOFLOW1"
//! kind     u8       0 scalar, 1 vector, 2 labels, 3 map
//! dtype    u8       0 f32, 1 f64, 2 u16
//! ndim     u8
//! ncomp    u8
//! dims     ndim x u32
//! spacing  ndim x f64
//! origin   ndim x f64
//! aux      u32      label count for label files, 0 otherwise
//! payload  row-major, x fastest, components interleaved per point
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::LabelMap;
use crate::error::{Error, Result};
use crate::grid::{DeformationMap, GridSpec, ScalarField, VectorField};

pub const MAGIC: &[u8; 8] = b"GEOFLOW1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: not a GEOFLOW1 file")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("payload size mismatch: header implies {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },
    #[error("kind mismatch: expected {expected:?}, file holds {found:?}")]
    KindMismatch { expected: FieldKind, found: FieldKind },
    #[error("dtype {dtype:?} not allowed for {kind:?} fields")]
    DtypeMismatch { kind: FieldKind, dtype: Dtype },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("value out of range for {0:?}")]
    ValueRange(Dtype),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic => "bad_magic",
            FormatError::TruncatedHeader => "truncated_header",
            FormatError::PayloadSize { .. } => "payload_size",
            FormatError::KindMismatch { .. } => "kind_mismatch",
            FormatError::DtypeMismatch { .. } => "dtype_mismatch",
            FormatError::BadHeader(_) => "bad_header",
            FormatError::ValueRange(_) => "value_range",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Scalar,
    Vector,
    Labels,
    Map,
}

impl FieldKind {
    fn tag(self) -> u8 {
        match self {
            FieldKind::Scalar => 0,
            FieldKind::Vector => 1,
            FieldKind::Labels => 2,
            FieldKind::Map => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => FieldKind::Scalar,
            1 => FieldKind::Vector,
            2 => FieldKind::Labels,
            3 => FieldKind::Map,
            _ => return None,
        })
    }

    fn allows(self, dtype: Dtype) -> bool {
        match self {
            FieldKind::Labels => dtype == Dtype::U16,
            _ => dtype != Dtype::U16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U16,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U16 => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::U16,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldFileHeader {
    pub kind: FieldKind,
    pub dtype: Dtype,
    pub grid: GridSpec,
    pub ncomp: usize,
    pub label_count: u32,
}

impl FieldFileHeader {
    pub fn encoded_len(&self) -> usize {
        12 + self.grid.ndim() * (4 + 8 + 8) + 4
    }

    pub fn payload_len(&self) -> usize {
        self.grid.len() * self.ncomp * self.dtype.size()
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        let d = self.grid.ndim();
        out.extend_from_slice(&[self.kind.tag(), self.dtype.tag(), d as u8, self.ncomp as u8]);
        for &n in self.grid.dims() {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for &h in self.grid.spacing() {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for &o in self.grid.origin() {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.extend_from_slice(&self.label_count.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or(FormatError::TruncatedHeader)?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses the header; returns it with the payload offset.
pub fn parse_header(bytes: &[u8]) -> Result<(FieldFileHeader, usize), FormatError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) { FormatError::TruncatedHeader } else { FormatError::BadMagic });
    }
    if &bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let kind_tag = r.u8()?;
    let dtype_tag = r.u8()?;
    let ndim = r.u8()? as usize;
    let ncomp = r.u8()? as usize;
    let kind = FieldKind::from_tag(kind_tag).ok_or_else(|| FormatError::BadHeader(format!("unknown kind {kind_tag}")))?;
    let dtype = Dtype::from_tag(dtype_tag).ok_or_else(|| FormatError::BadHeader(format!("unknown dtype {dtype_tag}")))?;
    if !kind.allows(dtype) {
        return Err(FormatError::DtypeMismatch { kind, dtype });
    }
    if !(2..=3).contains(&ndim) {
        return Err(FormatError::BadHeader(format!("ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let mut spacing = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        spacing.push(r.f64()?);
    }
    let mut origin = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        origin.push(r.f64()?);
    }
    let label_count = r.u32()?;
    let grid = GridSpec::new(&dims, &spacing, &origin).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    let want_comp = match kind {
        FieldKind::Scalar | FieldKind::Labels => 1,
        FieldKind::Vector | FieldKind::Map => ndim,
    };
    if ncomp != want_comp {
        return Err(FormatError::BadHeader(format!("{ncomp} components for a {kind:?} field")));
    }
    match kind {
        FieldKind::Labels if label_count == 0 || label_count > u16::MAX as u32 + 1 => {
            return Err(FormatError::BadHeader(format!("label count {label_count}")));
        }
        FieldKind::Labels => {}
        _ if label_count != 0 => return Err(FormatError::BadHeader("aux must be 0".into())),
        _ => {}
    }
    Ok((FieldFileHeader { kind, dtype, grid, ncomp, label_count }, r.pos))
}

/// Types storable in a field file.
pub trait FieldFile: Sized {
    const KIND: FieldKind;
    const DEFAULT_DTYPE: Dtype;

    fn grid(&self) -> &GridSpec;
    fn label_count(&self) -> u32 {
        0
    }
    /// Component planes as f64 (labels are exact).
    fn planes(&self) -> Vec<Vec<f64>>;
    fn from_planes(header: &FieldFileHeader, planes: Vec<Vec<f64>>) -> Result<Self>;
}

impl FieldFile for ScalarField {
    const KIND: FieldKind = FieldKind::Scalar;
    const DEFAULT_DTYPE: Dtype = Dtype::F32;

    fn grid(&self) -> &GridSpec {
        ScalarField::grid(self)
    }
    fn planes(&self) -> Vec<Vec<f64>> {
        vec![self.values().to_vec()]
    }
    fn from_planes(h: &FieldFileHeader, mut planes: Vec<Vec<f64>>) -> Result<Self> {
        ScalarField::new(h.grid.clone(), planes.remove(0))
    }
}

impl FieldFile for VectorField {
    const KIND: FieldKind = FieldKind::Vector;
    // Momenta must round-trip exactly for cached registrations to reproduce.
    const DEFAULT_DTYPE: Dtype = Dtype::F64;

    fn grid(&self) -> &GridSpec {
        VectorField::grid(self)
    }
    fn planes(&self) -> Vec<Vec<f64>> {
        self.components().to_vec()
    }
    fn from_planes(h: &FieldFileHeader, planes: Vec<Vec<f64>>) -> Result<Self> {
        VectorField::new(h.grid.clone(), planes)
    }
}

impl FieldFile for DeformationMap {
    const KIND: FieldKind = FieldKind::Map;
    const DEFAULT_DTYPE: Dtype = Dtype::F32;

    fn grid(&self) -> &GridSpec {
        DeformationMap::grid(self)
    }
    fn planes(&self) -> Vec<Vec<f64>> {
        self.coords().to_vec()
    }
    fn from_planes(h: &FieldFileHeader, planes: Vec<Vec<f64>>) -> Result<Self> {
        DeformationMap::new(h.grid.clone(), planes)
    }
}

impl FieldFile for LabelMap {
    const KIND: FieldKind = FieldKind::Labels;
    const DEFAULT_DTYPE: Dtype = Dtype::U16;

    fn grid(&self) -> &GridSpec {
        LabelMap::grid(self)
    }
    fn label_count(&self) -> u32 {
        LabelMap::label_count(self) as u32
    }
    fn planes(&self) -> Vec<Vec<f64>> {
        vec![self.labels().iter().map(|&l| l as f64).collect()]
    }
    fn from_planes(h: &FieldFileHeader, planes: Vec<Vec<f64>>) -> Result<Self> {
        let labels = planes[0].iter().map(|&v| v as u16).collect();
        LabelMap::new(h.grid.clone(), labels, h.label_count as usize)
    }
}

pub fn encode<F: FieldFile>(field: &F, dtype: Dtype) -> Result<Vec<u8>> {
    if !F::KIND.allows(dtype) {
        return Err(FormatError::DtypeMismatch { kind: F::KIND, dtype }.into());
    }
    let planes = field.planes();
    let header = FieldFileHeader {
        kind: F::KIND,
        dtype,
        grid: field.grid().clone(),
        ncomp: planes.len(),
        label_count: field.label_count(),
    };
    let mut out = Vec::with_capacity(header.encoded_len() + header.payload_len());
    header.write(&mut out);
    let n = header.grid.len();
    for i in 0..n {
        for p in &planes {
            let v = p[i];
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => {
                    let x = v as f32;
                    if !x.is_finite() {
                        return Err(FormatError::ValueRange(dtype).into());
                    }
                    out.extend_from_slice(&x.to_le_bytes())
                }
                Dtype::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode<F: FieldFile>(bytes: &[u8]) -> Result<F> {
    let (h, off) = parse_header(bytes)?;
    if h.kind != F::KIND {
        return Err(FormatError::KindMismatch { expected: F::KIND, found: h.kind }.into());
    }
    let planes = decode_payload(&h, &bytes[off..])?;
    F::from_planes(&h, planes)
}

fn decode_payload(h: &FieldFileHeader, payload: &[u8]) -> Result<Vec<Vec<f64>>, FormatError> {
    let expected = h.payload_len();
    if payload.len() != expected {
        return Err(FormatError::PayloadSize { expected, found: payload.len() });
    }
    let n = h.grid.len();
    let sz = h.dtype.size();
    let mut planes = vec![vec![0.0; n]; h.ncomp];
    for (k, chunk) in payload.chunks_exact(sz).enumerate() {
        let v = match h.dtype {
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
            Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            Dtype::U16 => u16::from_le_bytes(chunk.try_into().unwrap()) as f64,
        };
        planes[k % h.ncomp][k / h.ncomp] = v;
    }
    Ok(planes)
}

pub fn write_field<F: FieldFile>(path: impl AsRef<Path>, field: &F) -> Result<()> {
    write_field_as(path, field, F::DEFAULT_DTYPE)
}

pub fn write_field_as<F: FieldFile>(path: impl AsRef<Path>, field: &F, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(field, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field<F: FieldFile>(path: impl AsRef<Path>) -> Result<F> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// A field of whatever kind the file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyField {
    Scalar(ScalarField),
    Vector(VectorField),
    Labels(LabelMap),
    Map(DeformationMap),
}

impl AnyField {
    pub fn grid(&self) -> &GridSpec {
        match self {
            AnyField::Scalar(f) => f.grid(),
            AnyField::Vector(f) => f.grid(),
            AnyField::Labels(f) => f.grid(),
            AnyField::Map(f) => f.grid(),
        }
    }
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, _) = parse_header(&bytes)?;
    Ok(match h.kind {
        FieldKind::Scalar => AnyField::Scalar(decode(&bytes)?),
        FieldKind::Vector => AnyField::Vector(decode(&bytes)?),
        FieldKind::Labels => AnyField::Labels(decode(&bytes)?),
        FieldKind::Map => AnyField::Map(decode(&bytes)?),
    })
}
