//! Reference-to-test registration and label warping.
//!
//! A reference image is first shifted so its intensity center of mass lands
//! on the test image's, then refined with a cubic B-spline free-form
//! deformation that maximizes local normalized cross-correlation under a
//! bending-energy penalty. Optimization is plain gradient descent with
//! backtracking, run coarse-to-fine over an image pyramid.
//!
//! Transforms map test (fixed) space to reference (moving) space: a fixed
//! point `x` samples the moving image at `x - translation + u(x)`, where
//! `u` is the spline displacement.

mod bspline;
mod image;
mod similarity;

use std::cell::RefCell;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};
use crate::volgrid::{center_of_mass, Grid, LabelMap, Volume, BACKGROUND};

use bspline::{bending_energy, Lattice, SplineBasis};
use image::Image;
use similarity::LnccFixed;

/// Rigid shift in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Translation {
    pub d: [f64; 3],
}

/// Registration settings. Every field has a default, so a partial JSON
/// object is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegParams {
    /// Pyramid levels; level `l` (0 = finest) is downsampled by `2^l`.
    pub levels: usize,
    /// Knot spacing of the control lattice (mm).
    pub control_spacing_mm: f64,
    /// Edge length of the cubic correlation window in voxels (odd).
    pub ncc_window: usize,
    pub bending_weight: f64,
    /// Iteration cap per pyramid level.
    pub max_iterations: usize,
    /// Largest control-point move per step, in voxels of the current level.
    pub step_voxels: f64,
    /// A level stops once an accepted step improves the objective by less
    /// than this fraction of the total improvement made on that level.
    pub tolerance: f64,
}

impl Default for RegParams {
    fn default() -> Self {
        RegParams {
            levels: 3,
            control_spacing_mm: 16.0,
            ncc_window: 5,
            bending_weight: 1e-3,
            max_iterations: 100,
            step_voxels: 1.0,
            tolerance: 0.01,
        }
    }
}

impl RegParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(QcError::InvalidParams(msg.to_string()));
        if self.levels < 1 {
            return bad("levels must be >= 1");
        }
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1");
        }
        if !(self.control_spacing_mm.is_finite() && self.control_spacing_mm > 0.0) {
            return bad("control_spacing_mm must be > 0");
        }
        if self.ncc_window < 1 || self.ncc_window % 2 == 0 {
            return bad("ncc_window must be odd");
        }
        if !(self.bending_weight.is_finite() && self.bending_weight >= 0.0) {
            return bad("bending_weight must be >= 0");
        }
        if !(self.step_voxels.is_finite() && self.step_voxels > 0.0) {
            return bad("step_voxels must be > 0");
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return bad("tolerance must be >= 0");
        }
        Ok(())
    }
}

/// Fixed-to-moving transform: translation plus B-spline displacement defined
/// over the fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    grid: Grid,
    lattice: Lattice,
    /// Per-component knot displacements (mm), x fastest.
    coefficients: [Vec<f64>; 3],
    translation: Translation,
}

impl DeformationField {
    /// Pure translation bound to `grid`.
    pub fn from_translation(grid: Grid, translation: Translation, control_spacing_mm: f64) -> DeformationField {
        let lattice = Lattice::covering(&grid, control_spacing_mm);
        let n = lattice.len();
        DeformationField {
            grid,
            lattice,
            coefficients: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            translation,
        }
    }

    pub fn identity(grid: Grid) -> DeformationField {
        Self::from_translation(grid, Translation::default(), RegParams::default().control_spacing_mm)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn translation(&self) -> Translation {
        self.translation
    }

    pub fn control_spacing(&self) -> f64 {
        self.lattice.spacing
    }

    pub fn control_dims(&self) -> [usize; 3] {
        self.lattice.dims
    }

    /// Knot displacement vectors (mm), x fastest.
    pub fn coefficients(&self) -> Vec<[f64; 3]> {
        (0..self.lattice.len())
            .map(|i| [self.coefficients[0][i], self.coefficients[1][i], self.coefficients[2][i]])
            .collect()
    }

    /// Largest knot displacement magnitude (mm).
    pub fn max_coefficient(&self) -> f64 {
        self.coefficients()
            .iter()
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Spline displacement `u` at every voxel of the bound grid, one vector
    /// per component.
    pub fn spline_displacement(&self) -> [Vec<f64>; 3] {
        let basis = SplineBasis::new(&self.grid, &self.lattice);
        let mut out = [vec![0.0; self.grid.len()], vec![0.0; self.grid.len()], vec![0.0; self.grid.len()]];
        for c in 0..3 {
            basis.eval(&self.coefficients[c], &mut out[c]);
        }
        out
    }

    /// Moving-space position sampled by every voxel of the bound grid.
    pub fn source_positions(&self) -> Vec<[f64; 3]> {
        let u = self.spline_displacement();
        let d = self.translation.d;
        (0..self.grid.len())
            .map(|idx| {
                let x = self.grid.voxel_center(self.grid.coords(idx));
                [
                    x[0] - d[0] + u[0][idx],
                    x[1] - d[1] + u[1][idx],
                    x[2] - d[2] + u[2][idx],
                ]
            })
            .collect()
    }
}

/// Translation superposing the intensity centers of mass: `CoM(test) - CoM(ref)`.
pub fn com_align(ref_img: &Volume, test_img: &Volume) -> Result<Translation> {
    let r = center_of_mass(ref_img)?;
    let t = center_of_mass(test_img)?;
    Ok(Translation {
        d: [t[0] - r[0], t[1] - r[1], t[2] - r[2]],
    })
}

/// Everything the optimizer needs at one pyramid level.
struct LevelProblem<'a> {
    fixed_grid: Grid,
    moving: &'a Image,
    basis: SplineBasis,
    lncc: LnccFixed,
    /// Per axis: moving-grid continuous index of each translated fixed
    /// voxel center.
    axis_index: [Vec<f64>; 3],
    lattice: Lattice,
    bending_weight: f64,
    scratch: RefCell<Scratch>,
}

/// Buffers reused across evaluations.
#[derive(Default)]
struct Scratch {
    u: [Vec<f64>; 3],
    warped: Vec<f64>,
    mgrad: [Vec<f64>; 3],
    dsim: Vec<f64>,
}

impl<'a> LevelProblem<'a> {
    fn new(fixed: &Image, moving: &'a Image, lattice: Lattice, translation: [f64; 3], params: &RegParams) -> LevelProblem<'a> {
        let fg = fixed.grid;
        let mg = moving.grid;
        let axis_index = [0, 1, 2].map(|a| {
            (0..fg.dims[a])
                .map(|i| (fg.axis_center(a, i) - translation[a] - mg.origin[a]) / mg.spacing[a] - 0.5)
                .collect()
        });
        LevelProblem {
            fixed_grid: fg,
            moving,
            basis: SplineBasis::new(&fg, &lattice),
            lncc: LnccFixed::new(&fixed.data, fg.dims, params.ncc_window),
            axis_index,
            lattice,
            bending_weight: params.bending_weight,
            scratch: RefCell::new(Scratch::default()),
        }
    }

    /// Objective `-LNCC + w * bending`; gradient with respect to the knot
    /// coefficients when requested.
    fn evaluate(&self, coeffs: &[Vec<f64>; 3], grad: Option<&mut [Vec<f64>; 3]>) -> f64 {
        let n = self.fixed_grid.len();
        let mut scratch = self.scratch.borrow_mut();
        let Scratch { u, warped, mgrad, dsim } = &mut *scratch;
        for c in 0..3 {
            u[c].resize(n, 0.0);
            self.basis.eval(&coeffs[c], &mut u[c]);
        }
        let want_grad = grad.is_some();
        let inv = self.moving.grid.spacing.map(|s| 1.0 / s);
        warped.resize(n, 0.0);
        if want_grad {
            for m in mgrad.iter_mut() {
                m.resize(n, 0.0);
            }
        }
        let [nx, ny, nz] = self.fixed_grid.dims;
        let [mx, my, mz] = mgrad;
        let mut start = 0;
        for k in 0..nz {
            let tz = self.axis_index[2][k];
            for j in 0..ny {
                let ty = self.axis_index[1][j];
                let row = start..start + nx;
                start += nx;
                let disp = u[0][row.clone()].iter().zip(&u[1][row.clone()]).zip(&u[2][row.clone()]);
                for (n, (&tx, ((ux, uy), uz))) in self.axis_index[0][..nx].iter().zip(disp).enumerate() {
                    let (v, g) = self.moving.sample_with_gradient([tx + ux * inv[0], ty + uy * inv[1], tz + uz * inv[2]]);
                    let idx = row.start + n;
                    warped[idx] = v;
                    if want_grad {
                        mx[idx] = g[0] * inv[0];
                        my[idx] = g[1] * inv[1];
                        mz[idx] = g[2] * inv[2];
                    }
                }
            }
        }
        match grad {
            None => {
                let sim = self.lncc.evaluate(warped, None);
                -sim + self.bending_weight * bending_energy(&self.lattice, coeffs, None)
            }
            Some(g) => {
                let sim = self.lncc.evaluate(warped, Some(dsim));
                // d(-sim)/du_c = -dsim * dI/dx_c, reusing `u` as the buffer
                for c in 0..3 {
                    for ((o, d), m) in u[c].iter_mut().zip(dsim.iter()).zip(&mgrad[c]) {
                        *o = -d * m;
                    }
                    self.basis.adjoint(&u[c], &mut g[c]);
                }
                if self.bending_weight > 0.0 {
                    let mut bg = [vec![0.0; self.lattice.len()], vec![0.0; self.lattice.len()], vec![0.0; self.lattice.len()]];
                    let be = bending_energy(&self.lattice, coeffs, Some(&mut bg));
                    for c in 0..3 {
                        for (gi, bi) in g[c].iter_mut().zip(&bg[c]) {
                            *gi += self.bending_weight * bi;
                        }
                    }
                    -sim + self.bending_weight * be
                } else {
                    -sim
                }
            }
        }
    }
}

fn dot(a: &[Vec<f64>; 3], b: &[Vec<f64>; 3]) -> f64 {
    (0..3)
        .map(|c| a[c].iter().zip(&b[c]).map(|(x, y)| x * y).sum::<f64>())
        .sum()
}

/// Gradient descent with Armijo backtracking on one level. The first trial
/// step of each iteration is the Barzilai-Borwein length from the previous
/// iteration, capped so no knot moves further than `step_voxels` voxels.
fn optimize_level(problem: &LevelProblem, coeffs: &mut [Vec<f64>; 3], params: &RegParams, level_spacing: f64) -> Result<f64> {
    let k = problem.lattice.len();
    let zeros = || [vec![0.0; k], vec![0.0; k], vec![0.0; k]];
    let max_move = params.step_voxels * level_spacing;
    let min_move = max_move * 1e-3;
    let mut grad = zeros();
    let mut energy = problem.evaluate(coeffs, Some(&mut grad));
    if !energy.is_finite() {
        return Err(QcError::DivergedRegistration(format!("initial objective {energy}")));
    }
    let start = energy;
    let mut bb: Option<f64> = None;
    let mut trial = zeros();
    let mut trial_grad = zeros();
    for iter in 0..params.max_iterations {
        let gmax = (0..k)
            .map(|i| (grad[0][i].powi(2) + grad[1][i].powi(2) + grad[2][i].powi(2)).sqrt())
            .fold(0.0, f64::max);
        if !gmax.is_finite() {
            return Err(QcError::DivergedRegistration("non-finite gradient".into()));
        }
        if gmax == 0.0 {
            break;
        }
        let gg = dot(&grad, &grad);
        let cap = max_move / gmax;
        let mut a = bb.map_or(cap, |b| b.min(cap));
        let mut accepted = None;
        while a * gmax >= min_move {
            for c in 0..3 {
                for ((t, x), g) in trial[c].iter_mut().zip(&coeffs[c]).zip(&grad[c]) {
                    *t = x - a * g;
                }
            }
            let e = problem.evaluate(&trial, Some(&mut trial_grad));
            if !e.is_finite() {
                return Err(QcError::DivergedRegistration(format!("objective {e} at iteration {iter}")));
            }
            if e <= energy - 1e-4 * a * gg {
                accepted = Some(e);
                break;
            }
            a *= 0.5;
        }
        let Some(e) = accepted else {
            debug!("level converged after {iter} iterations (no descent step)");
            break;
        };
        // s = -a * grad, y = trial_grad - grad
        let sy: f64 = -a * (dot(&grad, &trial_grad) - gg);
        bb = (sy > 0.0).then(|| a * a * gg / sy);
        std::mem::swap(coeffs, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        let improvement = energy - e;
        energy = e;
        if improvement <= params.tolerance * (start - energy) {
            debug!("level converged after {} iterations (tolerance)", iter + 1);
            break;
        }
    }
    Ok(energy)
}

/// Registers `moving` onto `fixed`, starting from the translation `init`.
pub fn ffd_register(moving: &Volume, fixed: &Volume, init: Translation, params: &RegParams) -> Result<DeformationField> {
    params.validate()?;
    if init.d.iter().any(|v| !v.is_finite()) {
        return Err(QcError::InvalidParams("non-finite initial translation".into()));
    }
    let mut field = DeformationField::from_translation(*fixed.grid(), init, params.control_spacing_mm);
    let fixed_pyr = Image::from_volume(fixed).pyramid(params.levels);
    let moving_pyr = Image::from_volume(moving).pyramid(params.levels);
    for (level, (f, m)) in fixed_pyr.iter().zip(&moving_pyr).enumerate() {
        let problem = LevelProblem::new(f, m, field.lattice, init.d, params);
        let level_spacing = f.grid.spacing.iter().sum::<f64>() / 3.0;
        let e = optimize_level(&problem, &mut field.coefficients, params, level_spacing)?;
        debug!("level {level}: dims {:?} objective {e:.6}", f.grid.dims);
    }
    Ok(field)
}

/// Objective value (`-LNCC + w * bending`) of a field on the full-resolution
/// images.
pub fn registration_objective(moving: &Volume, fixed: &Volume, field: &DeformationField, params: &RegParams) -> Result<f64> {
    params.validate()?;
    fixed.grid().ensure_same(field.grid())?;
    let f = Image::from_volume(fixed);
    let m = Image::from_volume(moving);
    let problem = LevelProblem::new(&f, &m, field.lattice, field.translation.d, params);
    Ok(problem.evaluate(&field.coefficients, None))
}

/// Pulls labels from `labels` (moving space) onto `target_grid` with
/// nearest-neighbor lookup; sources outside the label grid read background.
pub fn warp_labels(labels: &LabelMap, field: &DeformationField, target_grid: &Grid) -> Result<LabelMap> {
    target_grid.ensure_same(field.grid())?;
    let src = labels.grid();
    let [nx, ny, nz] = src.dims;
    let out = field
        .source_positions()
        .into_iter()
        .map(|p| {
            let t = src.continuous_index(p);
            let r = [t[0].round(), t[1].round(), t[2].round()];
            if r[0] < 0.0 || r[1] < 0.0 || r[2] < 0.0 || r[0] >= nx as f64 || r[1] >= ny as f64 || r[2] >= nz as f64 {
                BACKGROUND
            } else {
                labels.get(r[0] as usize, r[1] as usize, r[2] as usize)
            }
        })
        .collect();
    LabelMap::new(*target_grid, out)
}

/// Pulls intensities from `image` onto `target_grid` by trilinear
/// interpolation with edge clamping.
pub fn warp_volume(image: &Volume, field: &DeformationField, target_grid: &Grid) -> Result<Volume> {
    target_grid.ensure_same(field.grid())?;
    let img = Image::from_volume(image);
    let data = field
        .source_positions()
        .into_iter()
        .map(|p| img.sample_with_gradient(img.grid.continuous_index(p)).0 as f32)
        .collect();
    Volume::new(*target_grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(grid: Grid, center: [f64; 3], radius: [f64; 3]) -> Volume {
        let data = (0..grid.len())
            .map(|idx| {
                let p = grid.voxel_center(grid.coords(idx));
                let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / radius[a]).powi(2)).sum();
                (-r2).exp() as f32
            })
            .collect();
        Volume::new(grid, data).unwrap()
    }

    #[test]
    fn com_align_identity_and_shift() {
        let g = Grid::new([24, 24, 24], [1.0; 3], [0.0; 3]).unwrap();
        let a = blob(g, [10.0, 12.0, 12.0], [3.0, 4.0, 2.0]);
        assert_eq!(com_align(&a, &a).unwrap().d, [0.0, 0.0, 0.0]);

        // same image content on a grid shifted by 10 mm
        let shifted = Grid::new(g.dims, g.spacing, [10.0, 0.0, 0.0]).unwrap();
        let b = Volume::new(shifted, a.data().to_vec()).unwrap();
        let t = com_align(&a, &b).unwrap();
        assert!((t.d[0] - 10.0).abs() < 1e-9 && t.d[1].abs() < 1e-9 && t.d[2].abs() < 1e-9);
    }

    #[test]
    fn com_align_matches_weighted_mean_oracle() {
        let g = Grid::new([16, 12, 10], [1.5, 1.0, 2.0], [-3.0, 2.0, 0.0]).unwrap();
        let a = blob(g, [5.0, 8.0, 6.0], [2.0, 3.0, 4.0]);
        let b = blob(g, [12.0, 6.0, 11.0], [4.0, 2.0, 3.0]);
        let oracle = |v: &Volume| {
            let mut s = [0.0; 3];
            let mut w = 0.0;
            for k in 0..g.dims[2] {
                for j in 0..g.dims[1] {
                    for i in 0..g.dims[0] {
                        let m = v.get(i, j, k) as f64;
                        let p = g.voxel_center([i, j, k]);
                        for a in 0..3 {
                            s[a] += m * p[a];
                        }
                        w += m;
                    }
                }
            }
            s.map(|x| x / w)
        };
        let t = com_align(&a, &b).unwrap();
        let (oa, ob) = (oracle(&a), oracle(&b));
        for ax in 0..3 {
            assert!((t.d[ax] - (ob[ax] - oa[ax])).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_by_one_voxel_translation_shifts_labels() {
        let g = Grid::new([5, 3, 3], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let labels: Vec<u8> = (0..g.len()).map(|i| (g.coords(i)[0] % 4) as u8).collect();
        let lm = LabelMap::new(g, labels).unwrap();
        let field = DeformationField::from_translation(g, Translation { d: [2.0, 0.0, 0.0] }, 4.0);
        let w = warp_labels(&lm, &field, &g).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                assert_eq!(w.get(0, j, k), 0);
                for i in 1..5 {
                    assert_eq!(w.get(i, j, k), lm.get(i - 1, j, k));
                }
            }
        }
        let id = DeformationField::identity(g);
        assert_eq!(warp_labels(&lm, &id, &g).unwrap(), lm);
        let other = Grid::new([4, 3, 3], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        assert!(warp_labels(&lm, &id, &other).is_err());
    }

    #[test]
    fn identity_registration_stays_near_zero() {
        let g = Grid::new([24, 24, 24], [2.0; 3], [0.0; 3]).unwrap();
        let v = blob(g, [22.0, 26.0, 24.0], [8.0, 6.0, 10.0]);
        let params = RegParams {
            control_spacing_mm: 12.0,
            ..RegParams::default()
        };
        let f = ffd_register(&v, &v, Translation::default(), &params).unwrap();
        assert!(f.max_coefficient() < 0.5, "{}", f.max_coefficient());
        let id = DeformationField::from_translation(g, Translation::default(), 12.0);
        let e_id = registration_objective(&v, &v, &id, &params).unwrap();
        let e = registration_objective(&v, &v, &f, &params).unwrap();
        assert!(e <= e_id + 1e-9);
    }

    #[test]
    fn recovers_small_shift() {
        let g = Grid::new([24, 24, 24], [2.0; 3], [0.0; 3]).unwrap();
        let fixed = blob(g, [24.0, 24.0, 24.0], [8.0, 6.0, 10.0]);
        let moving = blob(g, [27.0, 22.0, 24.0], [8.0, 6.0, 10.0]);
        let params = RegParams {
            control_spacing_mm: 12.0,
            ..RegParams::default()
        };
        let f = ffd_register(&moving, &fixed, Translation::default(), &params).unwrap();
        let u = f.spline_displacement();
        let c = g.index(12, 12, 12);
        assert!((u[0][c] - 3.0).abs() < 0.75, "{}", u[0][c]);
        assert!((u[1][c] + 2.0).abs() < 0.75, "{}", u[1][c]);
    }

    #[test]
    fn rejects_bad_params() {
        let g = Grid::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 1.0).unwrap();
        for p in [
            RegParams { levels: 0, ..RegParams::default() },
            RegParams { max_iterations: 0, ..RegParams::default() },
            RegParams { ncc_window: 4, ..RegParams::default() },
            RegParams { control_spacing_mm: 0.0, ..RegParams::default() },
        ] {
            assert!(matches!(ffd_register(&v, &v, Translation::default(), &p), Err(QcError::InvalidParams(_))));
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let g = Grid::new([12, 10, 8], [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let fixed = Image::from_volume(&blob(g, [12.0, 10.0, 12.0], [5.0, 4.0, 6.0]));
        let moving = Image::from_volume(&blob(g, [13.0, 9.0, 11.0], [5.0, 5.0, 5.0]));
        let lattice = Lattice::covering(&g, 8.0);
        let params = RegParams {
            ncc_window: 3,
            bending_weight: 0.1,
            ..RegParams::default()
        };
        let problem = LevelProblem::new(&fixed, &moving, lattice, [0.5, -0.3, 0.2], &params);
        let k = lattice.len();
        let coeffs: [Vec<f64>; 3] = [0, 1, 2].map(|c| (0..k).map(|i| (((i * 7 + c) % 5) as f64 - 2.0) * 0.2).collect());
        let mut grad = [vec![0.0; k], vec![0.0; k], vec![0.0; k]];
        problem.evaluate(&coeffs, Some(&mut grad));
        let center = lattice.dims[0] * (2 + lattice.dims[1] * 2) + 2;
        for (c, i) in [(0, center), (1, center + 1), (2, center + lattice.dims[0])] {
            let h = 1e-5;
            let mut p = coeffs.clone();
            p[c][i] += h;
            let ep = problem.evaluate(&p, None);
            p[c][i] -= 2.0 * h;
            let em = problem.evaluate(&p, None);
            let fd = (ep - em) / (2.0 * h);
            assert!((fd - grad[c][i]).abs() < 1e-3 * fd.abs().max(1e-4), "{fd} vs {}", grad[c][i]);
        }
    }

    #[test]
    fn params_from_partial_json() {
        let p: RegParams = serde_json::from_str(r#"{"levels": 2}"#).unwrap();
        assert_eq!(p.levels, 2);
        assert_eq!(p.control_spacing_mm, 16.0);
        assert!(serde_json::from_str::<RegParams>(r#"{"level": 2}"#).is_err());
    }
}

