//! Synthetic cardiac phantoms with graded-quality segmentations.
//!
//! A phantom is a torso ellipsoid holding an ellipsoidal left-ventricular
//! cavity, an ellipsoidal myocardial shell around it and a right-ventricular
//! crescent (an ellipsoid with the left ventricle cut out). Degradation
//! operators damage a ground-truth label map by an amount set by a single
//! severity in `[0, 1]`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};
use crate::rca::TestCase;
use crate::volgrid::{Grid, LabelMap, ReferenceSet, Volume, BACKGROUND};

/// Mean intensity of each tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueIntensities {
    pub air: f64,
    pub body: f64,
    pub lvc: f64,
    pub lvm: f64,
    pub rvc: f64,
}

impl Default for TissueIntensities {
    fn default() -> Self {
        TissueIntensities {
            air: 0.0,
            body: 0.35,
            lvc: 0.9,
            lvm: 0.15,
            rvc: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Physical LV center (mm).
    pub lv_center: [f64; 3],
    /// LV cavity semi-axes (mm).
    pub lv_radii: [f64; 3],
    pub myo_thickness: f64,
    /// RV ellipsoid center relative to the LV center (mm).
    pub rv_offset: [f64; 3],
    pub rv_radii: [f64; 3],
    /// Torso semi-axes (mm), centered on the grid.
    pub body_radii: [f64; 3],
    pub intensities: TissueIntensities,
    pub noise_sigma: f64,
    /// Amplitude of a smooth multiplicative pattern on the tissue
    /// intensities, anchored to the LV center; 0 gives flat tissue.
    pub texture: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [64, 64, 64],
            spacing: [2.0, 2.0, 2.0],
            lv_center: [54.0, 64.0, 64.0],
            lv_radii: [16.0, 16.0, 22.0],
            myo_thickness: 7.0,
            rv_offset: [22.0, 4.0, 0.0],
            rv_radii: [22.0, 26.0, 24.0],
            body_radii: [58.0, 50.0, 60.0],
            intensities: TissueIntensities::default(),
            noise_sigma: 0.04,
            texture: 0.0,
            seed: 0,
        }
    }
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

impl PhantomParams {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3]).map_err(|e| QcError::InvalidPhantom(e.to_string()))
    }

    pub fn rv_center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.lv_center[a] + self.rv_offset[a])
    }

    pub fn lv_outer_radii(&self) -> [f64; 3] {
        self.lv_radii.map(|r| r + self.myo_thickness)
    }

    pub fn body_center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * self.dims[a] as f64 * self.spacing[a])
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let bad = |m: String| Err(QcError::InvalidPhantom(m));
        let positive = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.lv_radii) || !positive(&self.rv_radii) || !positive(&self.body_radii) {
            return bad("radii must be > 0".into());
        }
        if !(self.myo_thickness.is_finite() && self.myo_thickness > 0.0) {
            return bad("myocardium thickness must be > 0".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0".into());
        }
        if !(0.0..0.5).contains(&self.texture) {
            return bad("texture must lie in [0, 0.5)".into());
        }
        // Every shape must stay one voxel clear of the grid boundary.
        let extent = grid.extent();
        let shapes = [
            ("LV", self.lv_center, self.lv_outer_radii()),
            ("RV", self.rv_center(), self.rv_radii),
        ];
        for (name, c, r) in shapes {
            for a in 0..3 {
                let lo = extent[a][0] + self.spacing[a];
                let hi = extent[a][1] - self.spacing[a];
                if c[a] - r[a] < lo || c[a] + r[a] > hi {
                    return bad(format!("{name} ellipsoid leaves the grid along axis {a}"));
                }
            }
        }
        Ok(())
    }

    /// Label of the tissue at a physical point.
    pub fn label_at(&self, p: [f64; 3]) -> u8 {
        if inside(p, self.lv_center, self.lv_radii) {
            1
        } else if inside(p, self.lv_center, self.lv_outer_radii()) {
            2
        } else if inside(p, self.rv_center(), self.rv_radii) {
            3
        } else {
            BACKGROUND
        }
    }

    /// Noise-free image intensity at a physical point.
    pub fn intensity_at(&self, p: [f64; 3]) -> f64 {
        self.tissue_intensity(p, self.label_at(p))
    }

    fn tissue_intensity(&self, p: [f64; 3], label: u8) -> f64 {
        let t = &self.intensities;
        let base = match label {
            1 => t.lvc,
            2 => t.lvm,
            3 => t.rvc,
            _ if inside(p, self.body_center(), self.body_radii) => t.body,
            _ => return t.air,
        };
        if self.texture == 0.0 {
            return base;
        }
        let [x, y, z] = [0, 1, 2].map(|a| p[a] - self.lv_center[a]);
        let pattern = (x / 7.0).sin() * (y / 9.0).cos() + (z / 8.0 + x / 13.0).sin() * (y / 6.0).sin();
        base * (1.0 + self.texture * pattern)
    }
}

/// Image and ground-truth labels of one phantom.
pub fn generate_phantom(p: &PhantomParams) -> Result<(Volume, LabelMap)> {
    p.validate()?;
    let grid = p.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| QcError::InvalidPhantom(e.to_string()))?;
    let mut labels = Vec::with_capacity(grid.len());
    let mut data = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let c = grid.voxel_center(grid.coords(idx));
        let l = p.label_at(c);
        labels.push(l);
        let mut v = p.tissue_intensity(c, l);
        if p.noise_sigma > 0.0 {
            v += noise.sample(&mut rng);
        }
        data.push(v as f32);
    }
    Ok((Volume::new(grid, data)?, LabelMap::new(grid, labels)?))
}

/// Ways of damaging a segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeOp {
    /// Peel up to 2.5 voxel layers off every class.
    Erode,
    /// Grow every class up to 2 voxel layers into background.
    Dilate,
    /// Shift the whole map by up to 8 mm in a random direction.
    Translate,
    /// Give boundary voxels a random neighbor's label.
    BoundaryJitter,
    /// Blank up to half of the slices that contain foreground.
    DropSlices,
    /// Relabel up to 40 random balls inside the foreground.
    RelabelNoise,
}

impl DegradeOp {
    pub const ALL: [DegradeOp; 6] = [
        DegradeOp::Erode,
        DegradeOp::Dilate,
        DegradeOp::Translate,
        DegradeOp::BoundaryJitter,
        DegradeOp::DropSlices,
        DegradeOp::RelabelNoise,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub severity: f64,
    pub operators: Vec<DegradeOp>,
    pub seed: u64,
}

/// 6-connected neighbor indices of a voxel.
fn neighbors(grid: &Grid, idx: usize) -> impl Iterator<Item = usize> + '_ {
    let [i, j, k] = grid.coords(idx);
    let [nx, ny, nz] = grid.dims;
    let plane = nx * ny;
    [
        (i > 0).then(|| idx - 1),
        (i + 1 < nx).then(|| idx + 1),
        (j > 0).then(|| idx - nx),
        (j + 1 < ny).then(|| idx + nx),
        (k > 0).then(|| idx - plane),
        (k + 1 < nz).then(|| idx + plane),
    ]
    .into_iter()
    .flatten()
}

/// Runs `layers` full passes of `step` plus one partial pass applied to each
/// candidate with probability equal to the fractional part.
fn layered(labels: &mut Vec<u8>, depth: f64, rng: &mut ChaCha8Rng, step: impl Fn(&[u8], usize) -> Option<u8>) {
    let full = depth.floor() as usize;
    let frac = depth - depth.floor();
    for pass in 0..=full {
        let p = if pass < full { 1.0 } else { frac };
        if p <= 0.0 {
            continue;
        }
        let prev = labels.clone();
        for idx in 0..prev.len() {
            if let Some(new) = step(&prev, idx) {
                if p >= 1.0 || rng.random::<f64>() < p {
                    labels[idx] = new;
                }
            }
        }
    }
}

fn erode(grid: &Grid, labels: &mut Vec<u8>, depth: f64, rng: &mut ChaCha8Rng) {
    layered(labels, depth, rng, |prev, idx| {
        let l = prev[idx];
        (l != BACKGROUND && neighbors(grid, idx).any(|n| prev[n] != l)).then_some(BACKGROUND)
    });
}

fn dilate(grid: &Grid, labels: &mut Vec<u8>, depth: f64, rng: &mut ChaCha8Rng) {
    layered(labels, depth, rng, |prev, idx| {
        if prev[idx] != BACKGROUND {
            return None;
        }
        neighbors(grid, idx).map(|n| prev[n]).filter(|&l| l != BACKGROUND).max()
    });
}

fn translate(grid: &Grid, labels: &[u8], shift: [isize; 3]) -> Vec<u8> {
    let mut out = vec![BACKGROUND; labels.len()];
    let [nx, ny, nz] = grid.dims.map(|d| d as isize);
    for (idx, &l) in labels.iter().enumerate() {
        if l == BACKGROUND {
            continue;
        }
        let c = grid.coords(idx);
        let (x, y, z) = (c[0] as isize + shift[0], c[1] as isize + shift[1], c[2] as isize + shift[2]);
        if (0..nx).contains(&x) && (0..ny).contains(&y) && (0..nz).contains(&z) {
            out[grid.index(x as usize, y as usize, z as usize)] = l;
        }
    }
    out
}

fn boundary_jitter(grid: &Grid, labels: &mut [u8], prob: f64, rng: &mut ChaCha8Rng) {
    let prev = labels.to_vec();
    for idx in 0..prev.len() {
        let different: Vec<u8> = neighbors(grid, idx).map(|n| prev[n]).filter(|&l| l != prev[idx]).collect();
        if !different.is_empty() && rng.random::<f64>() < prob {
            labels[idx] = different[rng.random_range(0..different.len())];
        }
    }
}

fn drop_slices(grid: &Grid, labels: &mut [u8], fraction: f64, rng: &mut ChaCha8Rng) {
    let [nx, ny, nz] = grid.dims;
    let plane = nx * ny;
    let occupied: Vec<usize> = (0..nz)
        .filter(|&k| labels[k * plane..(k + 1) * plane].iter().any(|&l| l != BACKGROUND))
        .collect();
    let n_drop = (fraction * occupied.len() as f64).round() as usize;
    if n_drop == 0 {
        return;
    }
    for pick in sample(rng, occupied.len(), n_drop) {
        let k = occupied[pick];
        labels[k * plane..(k + 1) * plane].fill(BACKGROUND);
    }
}

fn relabel_noise(grid: &Grid, labels: &mut [u8], count: usize, rng: &mut ChaCha8Rng) {
    let fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != BACKGROUND).collect();
    if fg.is_empty() {
        return;
    }
    for _ in 0..count {
        let center = grid.coords(fg[rng.random_range(0..fg.len())]);
        let radius = rng.random_range(1..=3i64) as isize;
        let from = labels[grid.index(center[0], center[1], center[2])];
        let to = loop {
            let l = rng.random_range(0..=3u8);
            if l != from {
                break l;
            }
        };
        for dz in -radius..=radius {
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    if dx * dx + dy * dy + dz * dz > radius * radius {
                        continue;
                    }
                    let p = [center[0] as isize + dx, center[1] as isize + dy, center[2] as isize + dz];
                    if (0..3).all(|a| (0..grid.dims[a] as isize).contains(&p[a])) {
                        let idx = grid.index(p[0] as usize, p[1] as usize, p[2] as usize);
                        if labels[idx] == from {
                            labels[idx] = to;
                        }
                    }
                }
            }
        }
    }
}

/// Damages `gt` according to `spec`. Severity 0 returns `gt` unchanged.
pub fn degrade(gt: &LabelMap, spec: &DegradeSpec) -> Result<LabelMap> {
    let s = spec.severity;
    if !(0.0..=1.0).contains(&s) {
        return Err(QcError::InvalidParams(format!("severity {s} outside [0, 1]")));
    }
    if s == 0.0 {
        return Ok(gt.clone());
    }
    let grid = *gt.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = gt.labels().to_vec();
    let mut ops = spec.operators.clone();
    ops.sort();
    ops.dedup();
    // Fixed application order regardless of how the operators were listed.
    let order = [
        DegradeOp::Translate,
        DegradeOp::Dilate,
        DegradeOp::Erode,
        DegradeOp::BoundaryJitter,
        DegradeOp::RelabelNoise,
        DegradeOp::DropSlices,
    ];
    for op in order.into_iter().filter(|o| ops.contains(o)) {
        match op {
            DegradeOp::Translate => {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let cos_phi: f64 = rng.random_range(-1.0..1.0);
                let sin_phi = (1.0 - cos_phi * cos_phi).sqrt();
                let dir = [sin_phi * theta.cos(), sin_phi * theta.sin(), cos_phi];
                let len = 8.0 * s;
                let shift = [0, 1, 2].map(|a| (len * dir[a] / grid.spacing[a]).round() as isize);
                labels = translate(&grid, &labels, shift);
            }
            DegradeOp::Dilate => dilate(&grid, &mut labels, 2.0 * s, &mut rng),
            DegradeOp::Erode => erode(&grid, &mut labels, 2.5 * s, &mut rng),
            DegradeOp::BoundaryJitter => boundary_jitter(&grid, &mut labels, 0.8 * s, &mut rng),
            DegradeOp::RelabelNoise => relabel_noise(&grid, &mut labels, (40.0 * s).round() as usize, &mut rng),
            DegradeOp::DropSlices => drop_slices(&grid, &mut labels, 0.5 * s, &mut rng),
        }
    }
    LabelMap::new(grid, labels)
}

/// SplitMix64 finalizer; derives independent seeds for named streams.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_REFERENCE: u64 = 1;
const STREAM_CASE: u64 = 2;
const STREAM_DEGRADE: u64 = 3;

/// Phantom parameters jittered around the defaults.
pub fn jittered_params(base: &PhantomParams, seed: u64) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = base.clone();
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    for a in 0..3 {
        p.lv_center[a] += u(-6.0, 6.0);
    }
    for a in 0..3 {
        p.lv_radii[a] *= u(0.85, 1.15);
    }
    p.myo_thickness += u(-1.5, 1.5);
    for a in 0..3 {
        p.rv_offset[a] += u(-3.0, 3.0);
    }
    for a in 0..3 {
        p.rv_radii[a] *= u(0.85, 1.15);
    }
    for a in 0..3 {
        p.body_radii[a] += u(-4.0, 4.0);
    }
    let t = &mut p.intensities;
    t.body *= u(0.9, 1.1);
    t.lvc *= u(0.9, 1.1);
    t.lvm *= u(0.9, 1.1);
    t.rvc *= u(0.9, 1.1);
    p.seed = derive_seed(seed, 0, 0);
    p
}

/// Provenance of one generated phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord {
    pub id: String,
    pub params: PhantomParams,
}

/// Provenance of one generated test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub params: PhantomParams,
    pub degrade: DegradeSpec,
}

/// A reference set and test cases with ground truth, generated together.
#[derive(Debug, Clone)]
pub struct Battery {
    pub references: ReferenceSet,
    pub reference_records: Vec<PhantomRecord>,
    pub cases: Vec<TestCase>,
    pub case_records: Vec<CaseRecord>,
}

/// Operator sets cycled through by [`make_battery`].
pub const BATTERY_OPERATOR_SETS: [&[DegradeOp]; 5] = [
    &[DegradeOp::Erode, DegradeOp::DropSlices],
    &[DegradeOp::Translate, DegradeOp::BoundaryJitter],
    &[DegradeOp::RelabelNoise, DegradeOp::Dilate],
    &[DegradeOp::Translate, DegradeOp::Erode, DegradeOp::RelabelNoise],
    &[DegradeOp::DropSlices, DegradeOp::BoundaryJitter, DegradeOp::Dilate],
];

/// Generates `n_refs` reference phantoms and `n_cases` test phantoms whose
/// segmentations are degraded with severities cycling through `severities`.
/// Reference and case parameters come from disjoint seed streams.
pub fn make_battery(n_cases: usize, n_refs: usize, severities: &[f64], seed: u64) -> Result<Battery> {
    make_battery_with(&PhantomParams::default(), n_cases, n_refs, severities, seed)
}

/// [`make_battery`] around a custom base phantom.
pub fn make_battery_with(base: &PhantomParams, n_cases: usize, n_refs: usize, severities: &[f64], seed: u64) -> Result<Battery> {
    use rayon::prelude::*;

    if n_cases < 1 || n_refs < 1 {
        return Err(QcError::InvalidParams("battery needs at least one case and one reference".into()));
    }
    if severities.is_empty() {
        return Err(QcError::InvalidParams("no severities given".into()));
    }
    let reference_records: Vec<PhantomRecord> = (0..n_refs)
        .map(|n| PhantomRecord {
            id: format!("ref{n:03}"),
            params: jittered_params(base, derive_seed(seed, STREAM_REFERENCE, n as u64)),
        })
        .collect();
    let case_records: Vec<CaseRecord> = (0..n_cases)
        .map(|i| {
            let s_idx = i % severities.len();
            let cycle = i / severities.len();
            CaseRecord {
                id: format!("case{i:03}"),
                params: jittered_params(base, derive_seed(seed, STREAM_CASE, i as u64)),
                degrade: DegradeSpec {
                    severity: severities[s_idx],
                    operators: BATTERY_OPERATOR_SETS[(s_idx + cycle) % BATTERY_OPERATOR_SETS.len()].to_vec(),
                    seed: derive_seed(seed, STREAM_DEGRADE, i as u64),
                },
            }
        })
        .collect();
    let refs = reference_records
        .par_iter()
        .map(|r| generate_phantom(&r.params))
        .collect::<Result<Vec<_>>>()?;
    let cases = case_records
        .par_iter()
        .map(|c| {
            let (image, gt) = generate_phantom(&c.params)?;
            let seg = degrade(&gt, &c.degrade)?;
            TestCase::new(c.id.clone(), image, seg, Some(gt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Battery {
        references: ReferenceSet::new(refs)?,
        reference_records,
        cases,
        case_records,
    })
}
