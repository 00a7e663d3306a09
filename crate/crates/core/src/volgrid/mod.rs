//! Volumetric grids: intensity volumes, label maps, reference sets and
//! their on-disk formats.
//!
//! Every grid is axis-aligned. A voxel with index `(i, j, k)` has its center
//! at `origin + (index + 0.5) * spacing` in millimeters; data is stored with
//! x varying fastest.

mod nifti;
mod raw;

pub use nifti::{load_label_map, load_volume, save_label_map, save_volume};
pub use raw::{read_raw_labels, read_raw_volume, write_raw_labels, write_raw_volume};

use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};

/// Highest valid label code.
pub const MAX_LABEL: u8 = 3;
pub const BACKGROUND: u8 = 0;

/// Foreground tissue classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Class {
    /// Left-ventricular cavity.
    Lvc = 1,
    /// Left-ventricular myocardium.
    Lvm = 2,
    /// Right-ventricular cavity.
    Rvc = 3,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Lvc, Class::Lvm, Class::Rvc];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Class> {
        match code {
            1 => Some(Class::Lvc),
            2 => Some(Class::Lvm),
            3 => Some(Class::Rvc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Lvc => "LVC",
            Class::Lvm => "LVM",
            Class::Rvc => "RVC",
        }
    }
}

/// Geometry shared by volumes and label maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Millimeters per voxel.
    pub spacing: [f64; 3],
    /// Millimeters; the corner of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Grid> {
        let grid = Grid {
            dims,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(QcError::InvalidData(format!(
                "dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(QcError::InvalidData(format!(
                "spacing must be finite and > 0, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(QcError::InvalidData(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Physical position of a voxel center.
    #[inline]
    pub fn voxel_center(&self, ijk: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + (ijk[0] as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (ijk[1] as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (ijk[2] as f64 + 0.5) * self.spacing[2],
        ]
    }

    /// Physical coordinate of the center of voxel `i` along `axis`.
    #[inline]
    pub fn axis_center(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + (i as f64 + 0.5) * self.spacing[axis]
    }

    /// Continuous voxel index of a physical point; voxel centers map to
    /// integers.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0] - 0.5,
            (p[1] - self.origin[1]) / self.spacing[1] - 0.5,
            (p[2] - self.origin[2]) / self.spacing[2] - 0.5,
        ]
    }

    /// Physical extent `[min, max]` per axis.
    pub fn extent(&self) -> [[f64; 2]; 3] {
        let mut e = [[0.0; 2]; 3];
        for a in 0..3 {
            e[a] = [
                self.origin[a],
                self.origin[a] + self.dims[a] as f64 * self.spacing[a],
            ];
        }
        e
    }

    /// Exact equality of geometry.
    pub fn same_as(&self, other: &Grid) -> bool {
        self == other
    }

    pub(crate) fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(QcError::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Scalar intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Volume> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(QcError::InvalidData(format!(
                "data length {} does not match {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(QcError::InvalidData(format!(
                "non-finite intensity at voxel {pos}"
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Result<Volume> {
        Volume::new(grid, vec![value; grid.len()])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }
}

/// Integer class map; every voxel holds a code in `0..=3`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<LabelMap> {
        grid.validate()?;
        if labels.len() != grid.len() {
            return Err(QcError::InvalidData(format!(
                "label length {} does not match {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
            return Err(QcError::InvalidLabel { value: bad as f64 });
        }
        Ok(LabelMap { grid, labels })
    }

    pub fn background(grid: Grid) -> Result<LabelMap> {
        LabelMap::new(grid, vec![BACKGROUND; grid.len()])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.grid.index(i, j, k)]
    }

    pub fn count(&self, code: u8) -> usize {
        self.labels.iter().filter(|&&l| l == code).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != BACKGROUND).count()
    }

    pub fn contains(&self, code: u8) -> bool {
        self.labels.contains(&code)
    }
}

/// Atlas images with trusted segmentations.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    entries: Vec<(Volume, LabelMap)>,
}

impl ReferenceSet {
    pub fn new(entries: Vec<(Volume, LabelMap)>) -> Result<ReferenceSet> {
        if entries.is_empty() {
            return Err(QcError::NoReferences);
        }
        for (n, (img, lab)) in entries.iter().enumerate() {
            img.grid().ensure_same(lab.grid()).map_err(|e| {
                QcError::GridMismatch(format!("reference {n}: {e}"))
            })?;
            for class in Class::ALL {
                if !lab.contains(class.code()) {
                    return Err(QcError::InvalidData(format!(
                        "reference {n} has no {} voxels",
                        class.name()
                    )));
                }
            }
        }
        Ok(ReferenceSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Volume, LabelMap)] {
        &self.entries
    }

    pub fn get(&self, n: usize) -> Option<&(Volume, LabelMap)> {
        self.entries.get(n)
    }

    /// Subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Result<ReferenceSet> {
        let entries = indices
            .iter()
            .map(|&i| {
                self.entries.get(i).cloned().ok_or_else(|| {
                    QcError::InvalidParams(format!("reference index {i} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ReferenceSet::new(entries)
    }
}

/// Anything with a mass distribution over a grid.
pub trait MassDistribution {
    fn mass_grid(&self) -> &Grid;
    fn mass_at(&self, idx: usize) -> f64;
}

impl MassDistribution for Volume {
    fn mass_grid(&self) -> &Grid {
        &self.grid
    }
    fn mass_at(&self, idx: usize) -> f64 {
        self.data[idx] as f64
    }
}

impl MassDistribution for LabelMap {
    fn mass_grid(&self) -> &Grid {
        &self.grid
    }
    fn mass_at(&self, idx: usize) -> f64 {
        if self.labels[idx] != BACKGROUND {
            1.0
        } else {
            0.0
        }
    }
}

/// Mass-weighted mean voxel-center position in millimeters. Volumes are
/// weighted by intensity, label maps by foreground membership.
pub fn center_of_mass<M: MassDistribution + ?Sized>(m: &M) -> Result<[f64; 3]> {
    let grid = m.mass_grid();
    let [nx, ny, nz] = grid.dims;
    // Accumulate per axis index so each coordinate is computed once.
    let mut total = 0.0;
    let mut sx = vec![0.0; nx];
    let mut sy = vec![0.0; ny];
    let mut sz = vec![0.0; nz];
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let w = m.mass_at(idx);
                idx += 1;
                if w != 0.0 {
                    sx[i] += w;
                    sy[j] += w;
                    sz[k] += w;
                    total += w;
                }
            }
        }
    }
    if total == 0.0 || !total.is_finite() {
        return Err(QcError::EmptyMass);
    }
    let weighted = |axis: usize, sums: &[f64]| -> f64 {
        sums.iter()
            .enumerate()
            .map(|(i, w)| w * grid.axis_center(axis, i))
            .sum::<f64>()
            / total
    };
    Ok([weighted(0, &sx), weighted(1, &sy), weighted(2, &sz)])
}
