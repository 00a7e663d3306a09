//! Helpers shared by integration tests: random label maps and a brute-force
//! metric oracle that shares no code with the library.

#![allow(dead_code)]

use rand::Rng;
use rcaqc::metrics::{ClassMetrics, MetricSet};
use rcaqc::volgrid::{Class, Grid, LabelMap};

/// A label map of random blobs plus scattered noise on a random grid of at
/// most `max_dim` voxels per axis.
pub fn random_grid(rng: &mut impl Rng, max_dim: usize) -> Grid {
    let dims = [0; 3].map(|_| rng.random_range(1..=max_dim));
    let spacing = [0; 3].map(|_| rng.random_range(0.5..3.0));
    let origin = [0; 3].map(|_| rng.random_range(-20.0..20.0));
    Grid::new(dims, spacing, origin).unwrap()
}

pub fn random_labels(rng: &mut impl Rng, grid: Grid) -> LabelMap {
    let [nx, ny, nz] = grid.dims;
    let mut labels = vec![0u8; grid.len()];
    let blobs = rng.random_range(0..5);
    for _ in 0..blobs {
        let code = rng.random_range(1..=3u8);
        let c = [nx, ny, nz].map(|n| rng.random_range(0.0..n as f64));
        let r = [0; 3].map(|_| rng.random_range(0.5..5.0));
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let d = ((i as f64 - c[0]) / r[0]).powi(2) + ((j as f64 - c[1]) / r[1]).powi(2) + ((k as f64 - c[2]) / r[2]).powi(2);
                    if d <= 1.0 {
                        labels[i + nx * (j + ny * k)] = code;
                    }
                }
            }
        }
    }
    let flips = rng.random_range(0..=labels.len() / 8);
    for _ in 0..flips {
        let idx = rng.random_range(0..labels.len());
        labels[idx] = rng.random_range(0..=3u8);
    }
    LabelMap::new(grid, labels).unwrap()
}

/// Mask voxels with a 6-neighbor outside the mask; voxels on the grid
/// border always count.
fn brute_surface(grid: &Grid, mask: &[bool]) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = grid.dims;
    let at = |i: isize, j: isize, k: isize| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            false
        } else {
            mask[i as usize + nx * (j as usize + ny * k as usize)]
        }
    };
    let mut out = Vec::new();
    for k in 0..nz as isize {
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                if !at(i, j, k) {
                    continue;
                }
                let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if nbrs.iter().any(|&(a, b, c)| !at(i + a, j + b, k + c)) {
                    out.push([
                        grid.origin[0] + (i as f64 + 0.5) * grid.spacing[0],
                        grid.origin[1] + (j as f64 + 0.5) * grid.spacing[1],
                        grid.origin[2] + (k as f64 + 0.5) * grid.spacing[2],
                    ]);
                }
            }
        }
    }
    out
}

fn nearest(p: &[f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter()
        .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Metrics of two masks from first principles; `None` when both are empty.
pub fn brute_binary(grid: &Grid, a: &[bool], b: &[bool]) -> Option<ClassMetrics> {
    let na = a.iter().filter(|&&x| x).count();
    let nb = b.iter().filter(|&&x| x).count();
    if na == 0 && nb == 0 {
        return None;
    }
    if na == 0 || nb == 0 {
        return Some(ClassMetrics {
            dsc: 0.0,
            msd: f64::INFINITY,
            rms: f64::INFINITY,
            hd: f64::INFINITY,
        });
    }
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let sa = brute_surface(grid, a);
    let sb = brute_surface(grid, b);
    let mut d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    d.extend(sb.iter().map(|p| nearest(p, &sa)));
    let n = d.len() as f64;
    Some(ClassMetrics {
        dsc: 2.0 * both as f64 / (na + nb) as f64,
        msd: d.iter().sum::<f64>() / n,
        rms: (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
        hd: d.iter().copied().fold(0.0, f64::max),
    })
}

pub fn brute_metrics(a: &LabelMap, b: &LabelMap) -> MetricSet {
    let grid = *a.grid();
    let mut set = MetricSet::default();
    for c in Class::ALL {
        let ma: Vec<bool> = a.labels().iter().map(|&l| l == c.code()).collect();
        let mb: Vec<bool> = b.labels().iter().map(|&l| l == c.code()).collect();
        if let Some(m) = brute_binary(&grid, &ma, &mb) {
            set.per_class.insert(c, m);
        }
    }
    if !set.per_class.is_empty() {
        let n = set.per_class.len() as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| set.per_class.values().map(f).sum::<f64>() / n;
        set.class_average = Some(ClassMetrics {
            dsc: mean(|m| m.dsc),
            msd: mean(|m| m.msd),
            rms: mean(|m| m.rms),
            hd: mean(|m| m.hd),
        });
    }
    let fa: Vec<bool> = a.labels().iter().map(|&l| l != 0).collect();
    let fb: Vec<bool> = b.labels().iter().map(|&l| l != 0).collect();
    set.whole_heart = brute_binary(&grid, &fa, &fb);
    set
}

/// Relative closeness; equal infinities match.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}

/// First mismatch between two metric sets, if any.
pub fn compare_sets(got: &MetricSet, want: &MetricSet, tol: f64) -> Option<String> {
    use rcaqc::metrics::{Metric, Scope};
    for scope in Scope::ALL {
        match (got.get(scope), want.get(scope)) {
            (None, None) => {}
            (Some(g), Some(w)) => {
                for m in Metric::ALL {
                    if !rel_close(g.get(m), w.get(m), tol) {
                        return Some(format!("{} {}: {} vs {}", scope.name(), m.name(), g.get(m), w.get(m)));
                    }
                }
            }
            (g, w) => return Some(format!("{}: presence {:?} vs {:?}", scope.name(), g.is_some(), w.is_some())),
        }
    }
    None
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// A phantom pair related by a known smooth deformation.
pub struct Deformed {
    pub fixed: rcaqc::volgrid::Volume,
    pub fixed_labels: LabelMap,
    pub moving: rcaqc::volgrid::Volume,
    pub moving_labels: LabelMap,
    /// True moving-space position of each fixed voxel center.
    pub truth: Vec<[f64; 3]>,
}

/// Displacement `u(x)` with components `amp * sin(2 pi x_{a+1} / wavelength)`.
pub fn sinusoid(x: [f64; 3], amp: f64, wavelength: f64) -> [f64; 3] {
    let w = 2.0 * std::f64::consts::PI / wavelength;
    [amp * (w * x[1]).sin(), amp * (w * x[2]).sin(), amp * (w * x[0]).sin()]
}

/// The fixed image samples the noise-free phantom at `x`; the moving image
/// satisfies `moving(x + u(x)) = fixed(x)`, built by inverting `y = x + u(x)`
/// with fixed-point iteration.
pub fn deformed_pair(p: &rcaqc::phantom::PhantomParams, amp: f64, wavelength: f64) -> Deformed {
    use rcaqc::volgrid::Volume;
    let grid = p.grid().unwrap();
    let centers: Vec<[f64; 3]> = (0..grid.len()).map(|i| grid.voxel_center(grid.coords(i))).collect();
    let inverse = |y: [f64; 3]| {
        let mut x = y;
        for _ in 0..60 {
            let u = sinusoid(x, amp, wavelength);
            x = [y[0] - u[0], y[1] - u[1], y[2] - u[2]];
        }
        x
    };
    let pre: Vec<[f64; 3]> = centers.iter().map(|&y| inverse(y)).collect();
    Deformed {
        fixed: Volume::new(grid, centers.iter().map(|&x| p.intensity_at(x) as f32).collect()).unwrap(),
        fixed_labels: LabelMap::new(grid, centers.iter().map(|&x| p.label_at(x)).collect()).unwrap(),
        moving: Volume::new(grid, pre.iter().map(|&x| p.intensity_at(x) as f32).collect()).unwrap(),
        moving_labels: LabelMap::new(grid, pre.iter().map(|&x| p.label_at(x)).collect()).unwrap(),
        truth: centers
            .iter()
            .map(|&x| {
                let u = sinusoid(x, amp, wavelength);
                [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
            })
            .collect(),
    }
}

/// Mean distance, in voxels, between recovered and true source positions
/// over the heart voxels of the fixed image.
pub fn heart_error_voxels(d: &Deformed, recovered: &[[f64; 3]]) -> f64 {
    let s = d.fixed.grid().spacing;
    let (sum, n) = d
        .fixed_labels
        .labels()
        .iter()
        .zip(recovered.iter().zip(&d.truth))
        .filter(|(&l, _)| l != 0)
        .fold((0.0, 0usize), |(sum, n), (_, (r, t))| {
            let e = (0..3).map(|a| ((r[a] - t[a]) / s[a]).powi(2)).sum::<f64>().sqrt();
            (sum + e, n + 1)
        });
    sum / n as f64
}

/// Random finite f32 bit patterns, including subnormals and negative zero.
pub fn random_volume(rng: &mut impl Rng, max_dim: usize) -> rcaqc::volgrid::Volume {
    let grid = random_grid(rng, max_dim);
    let data = (0..grid.len())
        .map(|_| loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        })
        .collect();
    rcaqc::volgrid::Volume::new(grid, data).unwrap()
}

/// Saves and reloads a random volume and label map; describes the first
/// difference found.
pub fn nifti_round_trip(rng: &mut impl Rng, dir: &std::path::Path, n: usize) -> Result<(), String> {
    use rcaqc::volgrid::{load_label_map, load_volume, save_label_map, save_volume};
    let vol = random_volume(rng, 20);
    let labels = random_labels(rng, *vol.grid());
    let vp = dir.join(format!("v{n}.nii"));
    let lp = dir.join(format!("l{n}.nii"));
    save_volume(&vol, &vp).map_err(|e| e.to_string())?;
    save_label_map(&labels, &lp).map_err(|e| e.to_string())?;
    let v2 = load_volume(&vp).map_err(|e| e.to_string())?;
    let l2 = load_label_map(&lp).map_err(|e| e.to_string())?;
    let same_bits = vol.data().len() == v2.data().len() && vol.data().iter().zip(v2.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same_bits {
        return Err(format!("volume {n}: payload differs"));
    }
    if labels.labels() != l2.labels() {
        return Err(format!("labels {n}: payload differs"));
    }
    for (g, h) in [(vol.grid(), v2.grid()), (labels.grid(), l2.grid())] {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(1.0);
        if g.dims != h.dims || (0..3).any(|a| !close(g.spacing[a], h.spacing[a]) || !close(g.origin[a], h.origin[a])) {
            return Err(format!("case {n}: geometry {g:?} vs {h:?}"));
        }
    }
    Ok(())
}

pub fn seeded_pair(seed: u64, max_dim: usize) -> (LabelMap, LabelMap) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grid = random_grid(&mut rng, max_dim);
    (random_labels(&mut rng, grid), random_labels(&mut rng, grid))
}

fn with_grid(lm: &LabelMap, grid: Grid) -> LabelMap {
    LabelMap::new(grid, lm.labels().to_vec()).unwrap()
}

fn all_values(m: &MetricSet) -> Vec<(rcaqc::metrics::Scope, rcaqc::metrics::Metric, f64)> {
    use rcaqc::metrics::{Metric, Scope};
    Scope::ALL
        .iter()
        .flat_map(|&s| Metric::ALL.iter().filter_map(move |&k| m.value(s, k).map(|v| (s, k, v))))
        .collect()
}

pub fn check_symmetry(a: &LabelMap, b: &LabelMap) -> Result<(), String> {
    use rcaqc::metrics::full_metrics;
    let ab = full_metrics(a, b).unwrap();
    let ba = full_metrics(b, a).unwrap();
    compare_sets(&ab, &ba, 1e-12).map_or(Ok(()), Err)
}

/// DSC in [0, 1] and `msd <= rms <= hd` for every class and the whole heart.
pub fn check_ordering(a: &LabelMap, b: &LabelMap) -> Result<(), String> {
    use rcaqc::metrics::{full_metrics, Scope};
    let m = full_metrics(a, b).unwrap();
    for scope in Scope::ALL {
        if let Some(c) = m.get(scope) {
            if !(0.0..=1.0).contains(&c.dsc) {
                return Err(format!("{}: dsc {}", scope.name(), c.dsc));
            }
            let ok = c.msd <= c.rms * (1.0 + 1e-12) && c.rms <= c.hd * (1.0 + 1e-12);
            if scope != Scope::Average && !ok {
                return Err(format!("{}: {c:?}", scope.name()));
            }
        }
    }
    Ok(())
}

/// Scaling the spacing (and origin) by `s` scales distances by `s` and
/// leaves DSC unchanged.
pub fn check_scale(a: &LabelMap, b: &LabelMap, s: f64) -> Result<(), String> {
    use rcaqc::metrics::{full_metrics, Metric};
    let g = *a.grid();
    let scaled = Grid::new(g.dims, g.spacing.map(|x| x * s), g.origin.map(|x| x * s)).unwrap();
    let v1 = all_values(&full_metrics(a, b).unwrap());
    let v2 = all_values(&full_metrics(&with_grid(a, scaled), &with_grid(b, scaled)).unwrap());
    if v1.len() != v2.len() {
        return Err("entry count changed".into());
    }
    for ((scope, k, x), (_, _, y)) in v1.into_iter().zip(v2) {
        let want = if k == Metric::Dsc { x } else { x * s };
        if !rel_close(y, want, 1e-9) {
            return Err(format!("{} {}: {y} vs {want}", scope.name(), k.name()));
        }
    }
    Ok(())
}

/// Moving both maps together leaves every metric unchanged.
pub fn check_translation(a: &LabelMap, b: &LabelMap, shift: [f64; 3]) -> Result<(), String> {
    use rcaqc::metrics::full_metrics;
    let g = *a.grid();
    let moved = Grid::new(g.dims, g.spacing, [0, 1, 2].map(|i| g.origin[i] + shift[i])).unwrap();
    let m1 = full_metrics(a, b).unwrap();
    let m2 = full_metrics(&with_grid(a, moved), &with_grid(b, moved)).unwrap();
    compare_sets(&m1, &m2, 1e-9).map_or(Ok(()), Err)
}
