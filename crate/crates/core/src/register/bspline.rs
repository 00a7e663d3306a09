//! Uniform cubic B-spline control lattice evaluated separably on axis-aligned
//! voxel grids.

use std::cell::RefCell;

use crate::volgrid::Grid;

#[inline]
pub(crate) fn cubic_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Control lattice geometry: knot `k` along an axis sits at
/// `origin + k * spacing`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Lattice {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl Lattice {
    /// Lattice covering the physical extent of `grid` with one knot of
    /// padding below and two above, as cubic support requires.
    pub fn covering(grid: &Grid, spacing: f64) -> Lattice {
        let mut origin = [0.0; 3];
        let mut dims = [0; 3];
        for a in 0..3 {
            let [lo, hi] = grid.extent()[a];
            origin[a] = lo - spacing;
            dims[a] = ((hi - lo) / spacing).floor() as usize + 4;
        }
        Lattice {
            origin,
            spacing,
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Per-voxel support indices and weights along one axis. Support outside the
/// lattice gets weight zero.
#[derive(Debug, Clone)]
struct AxisBasis {
    idx: Vec<[usize; 4]>,
    w: Vec<[f64; 4]>,
}

impl AxisBasis {
    fn new(grid: &Grid, lattice: &Lattice, axis: usize) -> AxisBasis {
        let n = grid.dims[axis];
        let k = lattice.dims[axis] as isize;
        let mut idx = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for i in 0..n {
            let t = (grid.axis_center(axis, i) - lattice.origin[axis]) / lattice.spacing;
            let cell = t.floor();
            let mut weights = cubic_weights(t - cell);
            let mut ids = [0usize; 4];
            for a in 0..4 {
                let c = cell as isize - 1 + a as isize;
                if (0..k).contains(&c) {
                    ids[a] = c as usize;
                } else {
                    weights[a] = 0.0;
                }
            }
            idx.push(ids);
            w.push(weights);
        }
        AxisBasis { idx, w }
    }
}

/// Tensor-product basis mapping lattice coefficients to voxel values of one
/// grid, and back (adjoint).
#[derive(Debug, Clone)]
pub(crate) struct SplineBasis {
    lattice: Lattice,
    dims: [usize; 3],
    axes: [AxisBasis; 3],
    /// Intermediate passes, reused across calls.
    scratch: RefCell<[Vec<f64>; 2]>,
}

impl SplineBasis {
    pub fn new(grid: &Grid, lattice: &Lattice) -> SplineBasis {
        SplineBasis {
            lattice: *lattice,
            dims: grid.dims,
            axes: [
                AxisBasis::new(grid, lattice, 0),
                AxisBasis::new(grid, lattice, 1),
                AxisBasis::new(grid, lattice, 2),
            ],
            scratch: RefCell::default(),
        }
    }

    /// Dense values on the grid from one coefficient component.
    pub fn eval(&self, coeffs: &[f64], out: &mut [f64]) {
        let [kx, ky, kz] = self.lattice.dims;
        let [nx, ny, nz] = self.dims;
        debug_assert_eq!(coeffs.len(), kx * ky * kz);
        let mut guard = self.scratch.borrow_mut();
        let [t1, t2] = &mut *guard;
        // x pass: (nx, ky, kz)
        t1.resize(nx * ky * kz, 0.0);
        let t1 = &mut t1[..];
        for kk in 0..kz {
            for kj in 0..ky {
                let row = &coeffs[kx * (kj + ky * kk)..];
                let dst = &mut t1[nx * (kj + ky * kk)..nx * (kj + ky * kk) + nx];
                for (i, d) in dst.iter_mut().enumerate() {
                    let id = &self.axes[0].idx[i];
                    let w = &self.axes[0].w[i];
                    *d = w[0] * row[id[0]] + w[1] * row[id[1]] + w[2] * row[id[2]] + w[3] * row[id[3]];
                }
            }
        }
        // y pass: (nx, ny, kz)
        t2.clear();
        t2.resize(nx * ny * kz, 0.0);
        let t2 = &mut t2[..];
        for kk in 0..kz {
            for j in 0..ny {
                let id = self.axes[1].idx[j];
                let w = self.axes[1].w[j];
                let dst = nx * (j + ny * kk);
                for a in 0..4 {
                    if w[a] == 0.0 {
                        continue;
                    }
                    let src = nx * (id[a] + ky * kk);
                    for i in 0..nx {
                        t2[dst + i] += w[a] * t1[src + i];
                    }
                }
            }
        }
        // z pass; the first contributing tap overwrites
        let plane = nx * ny;
        for k in 0..nz {
            let id = self.axes[2].idx[k];
            let w = self.axes[2].w[k];
            let dst = &mut out[plane * k..plane * (k + 1)];
            let mut first = true;
            for a in 0..4 {
                if w[a] == 0.0 {
                    continue;
                }
                let src = &t2[plane * id[a]..plane * (id[a] + 1)];
                if first {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = w[a] * s;
                    }
                    first = false;
                } else {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w[a] * s;
                    }
                }
            }
            if first {
                dst.fill(0.0);
            }
        }
    }

    /// Adjoint of [`SplineBasis::eval`]: accumulates voxel values onto the
    /// lattice.
    pub fn adjoint(&self, values: &[f64], coeffs: &mut [f64]) {
        let [kx, ky, kz] = self.lattice.dims;
        let [nx, ny, nz] = self.dims;
        let plane = nx * ny;
        let mut guard = self.scratch.borrow_mut();
        let [t1, t2] = &mut *guard;
        t2.clear();
        t2.resize(nx * ny * kz, 0.0);
        let t2 = &mut t2[..];
        for k in 0..nz {
            let id = self.axes[2].idx[k];
            let w = self.axes[2].w[k];
            let src = &values[plane * k..plane * (k + 1)];
            for a in 0..4 {
                if w[a] == 0.0 {
                    continue;
                }
                let dst = &mut t2[plane * id[a]..plane * (id[a] + 1)];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w[a] * s;
                }
            }
        }
        t1.clear();
        t1.resize(nx * ky * kz, 0.0);
        let t1 = &mut t1[..];
        for kk in 0..kz {
            for j in 0..ny {
                let id = self.axes[1].idx[j];
                let w = self.axes[1].w[j];
                let src = nx * (j + ny * kk);
                for a in 0..4 {
                    if w[a] == 0.0 {
                        continue;
                    }
                    let dst = nx * (id[a] + ky * kk);
                    for i in 0..nx {
                        t1[dst + i] += w[a] * t2[src + i];
                    }
                }
            }
        }
        coeffs.iter_mut().for_each(|c| *c = 0.0);
        for kk in 0..kz {
            for kj in 0..ky {
                let src = &t1[nx * (kj + ky * kk)..nx * (kj + ky * kk) + nx];
                let row = kx * (kj + ky * kk);
                for (i, s) in src.iter().enumerate() {
                    let id = &self.axes[0].idx[i];
                    let w = &self.axes[0].w[i];
                    for a in 0..4 {
                        coeffs[row + id[a]] += w[a] * s;
                    }
                }
            }
        }
    }
}

/// Dense `K^T K` for the 3-tap kernel `k` at offsets `-1, 0, +1` with zero
/// padding on an axis of length `n`.
fn gram(k: [f64; 3], n: usize) -> Vec<f64> {
    let mut kmat = vec![0.0; n * n];
    for i in 0..n {
        for (o, &w) in k.iter().enumerate() {
            if let Some(j) = (i + o).checked_sub(1).filter(|&j| j < n) {
                kmat[i * n + j] = w;
            }
        }
    }
    let mut g = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            g[a * n + b] = (0..n).map(|i| kmat[i * n + a] * kmat[i * n + b]).sum();
        }
    }
    g
}

/// Applies the symmetric pentadiagonal `m` (n x n) along `axis`.
fn apply_gram(src: &[f64], dims: [usize; 3], axis: usize, m: &[f64]) -> Vec<f64> {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis];
    let band = |c: usize| c.saturating_sub(2)..(c + 3).min(n);
    let mut dst = vec![0.0; src.len()];
    // Blocks of n rows of `stride` elements; row c is position c on the axis.
    for (sb, db) in src.chunks_exact(n * stride).zip(dst.chunks_exact_mut(n * stride)) {
        for c in 0..n {
            let out = &mut db[c * stride..(c + 1) * stride];
            for j in band(c) {
                let w = m[c * n + j];
                for (o, v) in out.iter_mut().zip(&sb[j * stride..(j + 1) * stride]) {
                    *o += w * v;
                }
            }
        }
    }
    dst
}

/// Discrete bending energy of the displacement, evaluated at the knots and
/// averaged over them, with its gradient added into `grad`.
pub(crate) fn bending_energy(lattice: &Lattice, coeffs: &[Vec<f64>; 3], grad: Option<&mut [Vec<f64>; 3]>) -> f64 {
    let h = lattice.spacing;
    let s = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];
    let d1 = [-0.5 / h, 0.0, 0.5 / h];
    let d2 = [1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h)];
    // Per axis, Gram matrices of the smoothing, first and second derivative
    // stencils.
    let [gs, g1, g2] = [s, d1, d2].map(|k| lattice.dims.map(|n| gram(k, n)));
    // Each squared term |Kx Ky Kz c|^2 equals c . (Gx Gy Gz) c. Terms are
    // grouped by their z factor so the z pass is shared.
    let groups: [(&[Vec<f64>; 3], &[(&[Vec<f64>; 3], &[Vec<f64>; 3], f64)]); 3] = [
        (&gs, &[(&gs, &g2, 1.0), (&g2, &gs, 1.0), (&g1, &g1, 2.0)]),
        (&g2, &[(&gs, &gs, 1.0)]),
        (&g1, &[(&gs, &g1, 2.0), (&g1, &gs, 2.0)]),
    ];
    let norm = 1.0 / lattice.len() as f64;
    let dims = lattice.dims;
    let mut energy = 0.0;
    let mut grad = grad;
    for comp in 0..3 {
        let c = &coeffs[comp];
        let mut qc = vec![0.0; c.len()];
        for (gz, terms) in groups {
            let zc = apply_gram(c, dims, 2, &gz[2]);
            for &(gy, gx, weight) in terms {
                let xyz = apply_gram(&apply_gram(&zc, dims, 1, &gy[1]), dims, 0, &gx[0]);
                for (q, v) in qc.iter_mut().zip(xyz) {
                    *q += weight * v;
                }
            }
        }
        energy += norm * c.iter().zip(&qc).map(|(a, b)| a * b).sum::<f64>();
        if let Some(g) = grad.as_deref_mut() {
            for (gi, q) in g[comp].iter_mut().zip(qc) {
                *gi += 2.0 * norm * q;
            }
        }
    }
    energy
}
