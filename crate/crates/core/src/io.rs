//! Volume persistence in single-file little-endian NIfTI-1, plus CSV and
//! JSON writers for results.
//!
//! Orientation is carried by spacing and origin only; rotations in the
//! qform/sform are ignored on read and never written.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Geometry, LabelMap, VectorField, Volume};
use crate::transform::DisplacementField;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const INTENT_VECTOR: i16 = 1007;
const UNITS_MM: u8 = 2;
const MAX_EXTENT: usize = 32767;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Float32,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            Self::Uint8 => 2,
            Self::Int16 => 4,
            Self::Float32 => 16,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Self::Uint8),
            4 => Ok(Self::Int16),
            16 => Ok(Self::Float32),
            other => Err(Error::UnsupportedFormat(format!(
                "NIfTI datatype {other} (supported: uint8, int16, float32)"
            ))),
        }
    }

    fn bytes(self) -> usize {
        match self {
            Self::Uint8 => 1,
            Self::Int16 => 2,
            Self::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub datatype: DataType,
    pub vector_components: usize,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub vox_offset: usize,
}

impl VolumeHeader {
    fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, self.origin)
    }

    fn voxels(&self) -> usize {
        self.dims.iter().product::<usize>() * self.vector_components
    }

    fn scaling(&self) -> Option<(f64, f64)> {
        if self.scl_slope == 0.0 || (self.scl_slope == 1.0 && self.scl_inter == 0.0) {
            None
        } else {
            Some((self.scl_slope, self.scl_inter))
        }
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        let put_i16 =
            |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
        let put_f32 =
            |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
        h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        h[38] = b'r';
        let ndim = if self.vector_components == 1 { 3 } else { 5 };
        let mut dim = [
            ndim,
            self.dims[0] as i16,
            self.dims[1] as i16,
            self.dims[2] as i16,
            1,
            1,
            1,
            1,
        ];
        if self.vector_components > 1 {
            dim[5] = self.vector_components as i16;
        }
        for (k, d) in dim.iter().enumerate() {
            put_i16(&mut h, 40 + 2 * k, *d);
        }
        if self.vector_components > 1 {
            put_i16(&mut h, 68, INTENT_VECTOR);
        }
        put_i16(&mut h, 70, self.datatype.code());
        put_i16(&mut h, 72, 8 * self.datatype.bytes() as i16);
        let pixdim = [
            1.0,
            self.spacing[0],
            self.spacing[1],
            self.spacing[2],
            1.0,
            1.0,
            1.0,
            1.0,
        ];
        for (k, p) in pixdim.iter().enumerate() {
            put_f32(&mut h, 76 + 4 * k, *p as f32);
        }
        put_f32(&mut h, 108, VOX_OFFSET as f32);
        put_f32(&mut h, 112, 1.0);
        put_f32(&mut h, 116, 0.0);
        h[123] = UNITS_MM;
        // qform: identity rotation, translation = origin
        put_i16(&mut h, 252, 1);
        put_i16(&mut h, 254, 1);
        for a in 0..3 {
            put_f32(&mut h, 268 + 4 * a, self.origin[a] as f32);
            let row = 280 + 16 * a;
            put_f32(&mut h, row + 4 * a, self.spacing[a] as f32);
            put_f32(&mut h, row + 12, self.origin[a] as f32);
        }
        h[344..348].copy_from_slice(MAGIC);
        h
    }

    fn parse(bytes: &[u8], origin_label: &str) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::CorruptFile(format!(
                "{origin_label}: {} bytes is shorter than a NIfTI-1 header",
                bytes.len()
            )));
        }
        let i16_at = |at: usize| i16::from_le_bytes([bytes[at], bytes[at + 1]]);
        let f32_at = |at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
        let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let magic = &bytes[344..348];
        if sizeof_hdr == 540 {
            return Err(Error::UnsupportedFormat(format!(
                "{origin_label}: NIfTI-2 is not supported"
            )));
        }
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::UnsupportedFormat(format!(
                "{origin_label}: big-endian NIfTI is not supported"
            )));
        }
        if magic == b"ni1\0" {
            return Err(Error::UnsupportedFormat(format!(
                "{origin_label}: two-file (.hdr/.img) NIfTI is not supported"
            )));
        }
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{origin_label}: bad NIfTI-1 magic {magic:?}"
            )));
        }
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::Format(format!(
                "{origin_label}: sizeof_hdr is {sizeof_hdr}"
            )));
        }
        let dim: Vec<i16> = (0..8).map(|k| i16_at(40 + 2 * k)).collect();
        let ndim = dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::Format(format!("{origin_label}: dim[0] = {ndim}")));
        }
        let extent = |k: usize| -> Result<usize> {
            if k as i16 > ndim {
                return Ok(1);
            }
            let d = dim[k];
            if d < 1 {
                return Err(Error::Format(format!("{origin_label}: dim[{k}] = {d}")));
            }
            Ok(d as usize)
        };
        let dims = [extent(1)?, extent(2)?, extent(3)?];
        if extent(4)? != 1 || extent(6)? != 1 || extent(7)? != 1 {
            return Err(Error::UnsupportedFormat(format!(
                "{origin_label}: only single-frame volumes are supported"
            )));
        }
        let vector_components = extent(5)?;
        if vector_components != 1 && vector_components != 3 {
            return Err(Error::UnsupportedFormat(format!(
                "{origin_label}: {vector_components} components per voxel"
            )));
        }
        let datatype = DataType::from_code(i16_at(70))?;
        let pix = |k: usize| {
            let p = f32_at(76 + 4 * k).abs();
            if p > 0.0 && p.is_finite() {
                p
            } else {
                1.0
            }
        };
        let spacing = [pix(1), pix(2), pix(3)];
        let origin = if i16_at(252) > 0 {
            [f32_at(268), f32_at(272), f32_at(276)]
        } else if i16_at(254) > 0 {
            [f32_at(292), f32_at(308), f32_at(324)]
        } else {
            [0.0; 3]
        };
        let vox = f32_at(108);
        if !(vox >= VOX_OFFSET as f64 && vox.fract() == 0.0) {
            return Err(Error::Format(format!(
                "{origin_label}: vox_offset {vox} < 352"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            datatype,
            vector_components,
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            vox_offset: vox as usize,
        })
    }
}

/// Contents of a NIfTI file, classified by datatype and component count.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiData {
    Scalar(Volume),
    Labels(LabelMap),
    Displacement(DisplacementField),
}

impl NiftiData {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Scalar(_) => "scalar volume",
            Self::Labels(_) => "label map",
            Self::Displacement(_) => "displacement field",
        }
    }
}

fn check_extent(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d > MAX_EXTENT) {
        return Err(Error::invalid(format!(
            "dims {dims:?} exceed the NIfTI-1 limit of {MAX_EXTENT}"
        )));
    }
    Ok(())
}

fn header_for(geometry: &Geometry, datatype: DataType, components: usize) -> Result<VolumeHeader> {
    check_extent(geometry.dims)?;
    Ok(VolumeHeader {
        dims: geometry.dims,
        spacing: geometry.spacing,
        origin: geometry.origin,
        datatype,
        vector_components: components,
        scl_slope: 1.0,
        scl_inter: 0.0,
        vox_offset: VOX_OFFSET,
    })
}

/// Float32 encoding of a scalar volume. The mask is not stored.
pub fn encode_scalar(v: &Volume) -> Result<Vec<u8>> {
    let mut out = header_for(v.geometry(), DataType::Float32, 1)?.to_bytes();
    out.reserve(4 * v.data().len());
    for &x in v.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Int16 encoding of a label map.
pub fn encode_labels(l: &LabelMap) -> Result<Vec<u8>> {
    if let Some(&big) = l.labels().iter().find(|&&x| x > i16::MAX as u32) {
        return Err(Error::invalid(format!("label {big} does not fit in int16")));
    }
    let mut out = header_for(l.geometry(), DataType::Int16, 1)?.to_bytes();
    for &x in l.labels() {
        out.extend_from_slice(&(x as i16).to_le_bytes());
    }
    Ok(out)
}

/// Uint8 encoding of a boolean mask (0/1).
pub fn encode_mask(geometry: &Geometry, mask: &[bool]) -> Result<Vec<u8>> {
    if mask.len() != geometry.len() {
        return Err(Error::invalid("mask dims do not match geometry"));
    }
    let mut out = header_for(geometry, DataType::Uint8, 1)?.to_bytes();
    out.extend(mask.iter().map(|&m| m as u8));
    Ok(out)
}

/// Three-component float32 encoding with vectors converted to millimetres.
pub fn encode_displacement(u: &DisplacementField) -> Result<Vec<u8>> {
    let g = u.geometry();
    let mut out = header_for(g, DataType::Float32, 3)?.to_bytes();
    for c in 0..3 {
        for v in u.vectors() {
            out.extend_from_slice(&((v[c] * g.spacing[c]) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a complete single-file NIfTI-1 image held in memory.
pub fn decode(bytes: &[u8], origin_label: &str) -> Result<NiftiData> {
    let h = VolumeHeader::parse(bytes, origin_label)?;
    let geometry = h.geometry()?;
    let size = h.datatype.bytes();
    let need = h.vox_offset + h.voxels() * size;
    if bytes.len() < need {
        return Err(Error::CorruptFile(format!(
            "{origin_label}: {} bytes, header requires {need}",
            bytes.len()
        )));
    }
    let raw = &bytes[h.vox_offset..need];
    let values: Vec<f64> = match h.datatype {
        DataType::Uint8 => raw.iter().map(|&b| b as f64).collect(),
        DataType::Int16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DataType::Float32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let scaled = |values: Vec<f64>| match h.scaling() {
        Some((m, b)) => values.into_iter().map(|x| m * x + b).collect(),
        None => values,
    };
    if h.vector_components == 3 {
        let values = scaled(values);
        let n = geometry.len();
        let vectors = (0..n)
            .map(|i| std::array::from_fn(|c| values[c * n + i] / geometry.spacing[c]))
            .collect();
        let field = VectorField::new(geometry, vectors)
            .map_err(|e| Error::CorruptFile(format!("{origin_label}: {e}")))?;
        return Ok(NiftiData::Displacement(DisplacementField::direct(field)));
    }
    if h.datatype != DataType::Float32 && h.scaling().is_none() {
        if let Some(neg) = values.iter().find(|&&x| x < 0.0) {
            return Err(Error::Format(format!(
                "{origin_label}: negative label {neg}"
            )));
        }
        let labels = values.into_iter().map(|x| x as u32).collect();
        return Ok(NiftiData::Labels(LabelMap::new(geometry, labels)?));
    }
    let v = Volume::new(geometry, scaled(values))
        .map_err(|e| Error::CorruptFile(format!("{origin_label}: {e}")))?;
    Ok(NiftiData::Scalar(v))
}

fn check_extension(path: &Path) -> Result<()> {
    let name = path.to_string_lossy();
    if name.ends_with(".gz") {
        return Err(Error::UnsupportedFormat(format!(
            "{name}: compressed NIfTI is not supported"
        )));
    }
    Ok(())
}

/// Reads a `.nii` file. Integer files without intensity scaling load as label
/// maps, three-component files as displacement fields (in voxels), anything
/// else as a scalar volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<NiftiData> {
    let path = path.as_ref();
    check_extension(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn read_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let path = path.as_ref();
    check_extension(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    VolumeHeader::parse(&bytes, &path.display().to_string())
}

/// Reads any scalar file as intensities; label maps are converted.
pub fn read_scalar(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match read_volume(path)? {
        NiftiData::Scalar(v) => Ok(v),
        NiftiData::Labels(l) => Volume::new(
            *l.geometry(),
            l.labels().iter().map(|&x| x as f64).collect(),
        ),
        NiftiData::Displacement(_) => Err(Error::invalid(format!(
            "{}: expected a scalar volume, found a displacement field",
            path.display()
        ))),
    }
}

/// Reads a label map; float files are accepted when every value is a
/// non-negative integer.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match read_volume(path)? {
        NiftiData::Labels(l) => Ok(l),
        NiftiData::Scalar(v) if v.data().iter().all(|&x| x >= 0.0 && x.fract() == 0.0) => {
            LabelMap::new(*v.geometry(), v.data().iter().map(|&x| x as u32).collect())
        }
        other => Err(Error::invalid(format!(
            "{}: expected a label map, found a {}",
            path.display(),
            other.kind()
        ))),
    }
}

/// Reads a label-like file as a boolean mask (non-zero voxels).
pub fn read_mask(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    Ok(read_labels(path)?.foreground())
}

pub fn read_displacement(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    match read_volume(path)? {
        NiftiData::Displacement(u) => Ok(u),
        other => Err(Error::invalid(format!(
            "{}: expected a displacement field, found a {}",
            path.display(),
            other.kind()
        ))),
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_volume(data: &NiftiData, path: impl AsRef<Path>) -> Result<()> {
    let bytes = match data {
        NiftiData::Scalar(v) => encode_scalar(v)?,
        NiftiData::Labels(l) => encode_labels(l)?,
        NiftiData::Displacement(u) => encode_displacement(u)?,
    };
    write_atomic(path, &bytes)
}

pub fn write_scalar(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_scalar(v)?)
}

pub fn write_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_labels(l)?)
}

pub fn write_mask(geometry: &Geometry, mask: &[bool], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_mask(geometry, mask)?)
}

pub fn write_displacement(u: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_displacement(u)?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::invalid(format!("cannot serialize JSON: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// CSV with a header row taken from the record field names.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("cannot serialize CSV row: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid(format!("cannot flush CSV: {e}")))
}

pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}
