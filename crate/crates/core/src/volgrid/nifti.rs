//! Strict single-file NIfTI-1 subset.
//!
//! Reads little-endian `n+1\0` files with `dim[0] == 3` and datatype uint8,
//! int16, int32, float32 or float64. Writes float32 volumes and uint8 label
//! maps with a 348-byte header, a zeroed 4-byte extension flag and
//! `vox_offset = 352`. `qoffset` holds the center of voxel (0, 0, 0).

use std::fs;
use std::path::Path;

use super::{Grid, LabelMap, Volume, MAX_LABEL};
use crate::error::{QcError, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

struct Header {
    grid: Grid,
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn rd_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn rd_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn bytes_per_voxel(datatype: i16) -> Option<usize> {
    match datatype {
        DT_UINT8 => Some(1),
        DT_INT16 => Some(2),
        DT_INT32 | DT_FLOAT32 => Some(4),
        DT_FLOAT64 => Some(8),
        _ => None,
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(QcError::CorruptHeader(format!(
            "file has {} bytes, header needs {HEADER_SIZE}",
            bytes.len()
        )));
    }
    if rd_i32(bytes, 0) != HEADER_SIZE as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(QcError::UnsupportedFormat("big-endian NIfTI".into()));
        }
        return Err(QcError::CorruptHeader("sizeof_hdr is not 348".into()));
    }
    if &bytes[344..348] != MAGIC {
        return Err(QcError::UnsupportedFormat(
            "magic is not \"n+1\" (only single-file NIfTI-1 is supported)".into(),
        ));
    }
    let ndim = rd_i16(bytes, 40);
    if ndim != 3 {
        return Err(QcError::UnsupportedFormat(format!(
            "dim[0] = {ndim}, only 3-D volumes are supported"
        )));
    }
    let datatype = rd_i16(bytes, 70);
    if bytes_per_voxel(datatype).is_none() {
        return Err(QcError::UnsupportedFormat(format!("datatype code {datatype}")));
    }
    let mut dims = [0usize; 3];
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        let d = rd_i16(bytes, 42 + 2 * a);
        if d < 1 {
            return Err(QcError::CorruptHeader(format!("dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
        let s = rd_f32(bytes, 80 + 4 * a);
        if !(s.is_finite() && s > 0.0) {
            return Err(QcError::CorruptHeader(format!("pixdim[{}] = {s}", a + 1)));
        }
        spacing[a] = s as f64;
    }
    let vox_offset = rd_f32(bytes, 108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(QcError::CorruptHeader(format!("vox_offset = {vox_offset}")));
    }
    let mut origin = [0.0f64; 3];
    for a in 0..3 {
        let q = rd_f32(bytes, 268 + 4 * a);
        if !q.is_finite() {
            return Err(QcError::CorruptHeader(format!("qoffset[{a}] = {q}")));
        }
        // Stored offset is the first voxel center; the grid keeps its corner.
        origin[a] = q as f64 - 0.5 * spacing[a];
    }
    let grid = Grid::new(dims, spacing, origin)
        .map_err(|e| QcError::CorruptHeader(e.to_string()))?;
    Ok(Header {
        grid,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: rd_f32(bytes, 112),
        scl_inter: rd_f32(bytes, 116),
    })
}

/// Voxel values with scaling applied, in file order.
fn decode_payload(bytes: &[u8], h: &Header) -> Result<Vec<f64>> {
    let bpv = bytes_per_voxel(h.datatype).expect("validated datatype");
    let n = h.grid.len();
    let end = h.vox_offset + n * bpv;
    if bytes.len() < end {
        return Err(QcError::CorruptHeader(format!(
            "payload truncated: need {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[h.vox_offset..end];
    let raw: Vec<f64> = match h.datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_INT32 => payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DT_FLOAT64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        _ => unreachable!(),
    };
    Ok(apply_scaling(raw, h))
}

fn apply_scaling(mut values: Vec<f64>, h: &Header) -> Vec<f64> {
    let slope = h.scl_slope as f64;
    let inter = h.scl_inter as f64;
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    values
}

fn read_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| QcError::io(path, e))?;
    let header = parse_header(&bytes)?;
    Ok((header, bytes))
}

/// Loads an intensity volume. Float32 payloads without scaling round-trip
/// bit-exactly; other types are converted.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (h, bytes) = read_file(path.as_ref())?;
    let values = if h.datatype == DT_FLOAT32 && (h.scl_slope == 0.0 || (h.scl_slope == 1.0 && h.scl_inter == 0.0)) {
        let n = h.grid.len();
        let end = h.vox_offset + 4 * n;
        if bytes.len() < end {
            return Err(QcError::CorruptHeader("payload truncated".into()));
        }
        bytes[h.vox_offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        decode_payload(&bytes, &h)?
            .into_iter()
            .map(|v| v as f32)
            .collect()
    };
    Volume::new(h.grid, values)
}

/// Loads a label map; every voxel must be an integer in `0..=3`.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (h, bytes) = read_file(path.as_ref())?;
    let values = decode_payload(&bytes, &h)?;
    let labels = values
        .into_iter()
        .map(|v| {
            if v.fract() == 0.0 && (0.0..=MAX_LABEL as f64).contains(&v) {
                Ok(v as u8)
            } else {
                Err(QcError::InvalidLabel { value: v })
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(h.grid, labels)
}

fn build_header(grid: &Grid, datatype: i16, bitpix: i16, cal_max: f32) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, grid.dims[a] as i16);
    }
    for a in 4..8 {
        put_i16(&mut h, 40 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.spacing[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: millimeters
    h[123] = 2;
    put_f32(&mut h, 124, cal_max);
    h[148..148 + 5].copy_from_slice(b"rcaqc");
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    let first_center: Vec<f32> = (0..3)
        .map(|a| (grid.origin[a] + 0.5 * grid.spacing[a]) as f32)
        .collect();
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, first_center[a]);
    }
    // sform rows: diagonal spacing with the same offset
    for a in 0..3 {
        let row = 280 + 16 * a;
        put_f32(&mut h, row + 4 * a, grid.spacing[a] as f32);
        put_f32(&mut h, row + 12, first_center[a]);
    }
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn check_dims(grid: &Grid) -> Result<()> {
    if grid.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(QcError::InvalidData(format!(
            "dims {:?} exceed the NIfTI-1 limit",
            grid.dims
        )));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| QcError::io(path, e))
}

/// Writes a float32 NIfTI-1 file.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let grid = v.grid();
    grid.validate()?;
    check_dims(grid)?;
    if let Some(pos) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(QcError::InvalidData(format!("non-finite intensity at voxel {pos}")));
    }
    let mut bytes = build_header(grid, DT_FLOAT32, 32, 0.0);
    bytes.reserve(4 * grid.len());
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path.as_ref(), &bytes)
}

/// Writes a uint8 NIfTI-1 file.
pub fn save_label_map(lm: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let grid = lm.grid();
    grid.validate()?;
    check_dims(grid)?;
    let mut bytes = build_header(grid, DT_UINT8, 8, MAX_LABEL as f32);
    bytes.extend_from_slice(lm.labels());
    write_file(path.as_ref(), &bytes)
}
