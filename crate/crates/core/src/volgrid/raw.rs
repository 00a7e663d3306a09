//! Header-less raw format: 24-byte little-endian header (three u32 dims,
//! three f32 spacings) followed by the payload, f32 for volumes and u8 for
//! label maps. Origin is not stored and reads back as zero.

use std::fs;
use std::path::Path;

use super::{Grid, LabelMap, Volume};
use crate::error::{QcError, Result};

const RAW_HEADER: usize = 24;

fn header(grid: &Grid) -> Vec<u8> {
    let mut h = Vec::with_capacity(RAW_HEADER);
    for d in grid.dims {
        h.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing {
        h.extend_from_slice(&(s as f32).to_le_bytes());
    }
    h
}

fn parse(bytes: &[u8], elem: usize) -> Result<(Grid, &[u8])> {
    if bytes.len() < RAW_HEADER {
        return Err(QcError::CorruptHeader("raw header truncated".into()));
    }
    let mut dims = [0usize; 3];
    let mut spacing = [0.0; 3];
    for a in 0..3 {
        dims[a] = u32::from_le_bytes(bytes[4 * a..4 * a + 4].try_into().unwrap()) as usize;
        spacing[a] = f32::from_le_bytes(bytes[12 + 4 * a..16 + 4 * a].try_into().unwrap()) as f64;
    }
    let grid = Grid::new(dims, spacing, [0.0; 3]).map_err(|e| QcError::CorruptHeader(e.to_string()))?;
    let payload = &bytes[RAW_HEADER..];
    if payload.len() != grid.len() * elem {
        return Err(QcError::CorruptHeader(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            grid.len() * elem
        )));
    }
    Ok((grid, payload))
}

pub fn write_raw_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = header(v.grid());
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path.as_ref(), bytes).map_err(|e| QcError::io(path.as_ref(), e))
}

pub fn write_raw_labels(lm: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = header(lm.grid());
    bytes.extend_from_slice(lm.labels());
    fs::write(path.as_ref(), bytes).map_err(|e| QcError::io(path.as_ref(), e))
}

pub fn read_raw_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = fs::read(path.as_ref()).map_err(|e| QcError::io(path.as_ref(), e))?;
    let (grid, payload) = parse(&bytes, 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(grid, data)
}

pub fn read_raw_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let bytes = fs::read(path.as_ref()).map_err(|e| QcError::io(path.as_ref(), e))?;
    let (grid, payload) = parse(&bytes, 1)?;
    LabelMap::new(grid, payload.to_vec())
}
