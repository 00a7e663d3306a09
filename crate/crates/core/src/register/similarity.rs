//! Local normalized cross-correlation over cubic windows clipped at the
//! grid boundary, with its exact derivative with respect to the moving
//! intensities.

use std::cell::RefCell;

/// Clipped box sums over a `(2r+1)^3` window.
#[derive(Debug, Clone)]
pub(crate) struct BoxFilter {
    dims: [usize; 3],
    radius: usize,
    /// Number of in-grid voxels in each window.
    pub counts: Vec<f64>,
}

impl BoxFilter {
    pub fn new(dims: [usize; 3], radius: usize) -> BoxFilter {
        let axis_counts = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| ((i + radius).min(n - 1) - i.saturating_sub(radius) + 1) as f64)
                .collect()
        };
        let cx = axis_counts(dims[0]);
        let cy = axis_counts(dims[1]);
        let cz = axis_counts(dims[2]);
        let mut counts = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in &cz {
            for y in &cy {
                for x in &cx {
                    counts.push(x * y * z);
                }
            }
        }
        BoxFilter { dims, radius, counts }
    }

    /// The operator is symmetric, so this is also its adjoint.
    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        self.apply_into(src, &mut out, &mut Vec::new());
        out
    }

    /// [`BoxFilter::apply`] writing into `out`, with `tmp` as scratch.
    pub fn apply_into(&self, src: &[f64], out: &mut [f64], tmp: &mut Vec<f64>) {
        let [nx, ny, nz] = self.dims;
        let r = self.radius;
        let a = out;
        for (line, dst) in src.chunks_exact(nx).zip(a.chunks_exact_mut(nx)) {
            dst.copy_from_slice(line);
            for o in 1..=r.min(nx - 1) {
                for (d, s) in dst[o..].iter_mut().zip(&line[..nx - o]) {
                    *d += s;
                }
                for (d, s) in dst[..nx - o].iter_mut().zip(&line[o..]) {
                    *d += s;
                }
            }
        }
        tmp.resize(src.len(), 0.0);
        for (slab_in, slab_out) in a.chunks_exact(nx * ny).zip(tmp.chunks_exact_mut(nx * ny)) {
            sliding_sum(slab_in, slab_out, nx, ny, r);
        }
        sliding_sum(tmp, a, nx * ny, nz, r);
    }
}

/// Sums of `2r+1` consecutive rows (clipped), each row `width` long.
fn sliding_sum(src: &[f64], out: &mut [f64], width: usize, rows: usize, r: usize) {
    let row = |j: usize| &src[j * width..(j + 1) * width];
    let (first, rest) = out.split_at_mut(width);
    first.fill(0.0);
    for j in 0..=r.min(rows - 1) {
        for (o, s) in first.iter_mut().zip(row(j)) {
            *o += s;
        }
    }
    let mut prev: &[f64] = first;
    for (j, cur) in (1..rows).zip(rest.chunks_exact_mut(width)) {
        match (j + r < rows, j > r) {
            (true, true) => {
                let (add, sub) = (row(j + r), row(j - r - 1));
                for (((o, p), a), s) in cur.iter_mut().zip(prev).zip(add).zip(sub) {
                    *o = p + a - s;
                }
            }
            (true, false) => {
                for ((o, p), a) in cur.iter_mut().zip(prev).zip(row(j + r)) {
                    *o = p + a;
                }
            }
            (false, true) => {
                for ((o, p), s) in cur.iter_mut().zip(prev).zip(row(j - r - 1)) {
                    *o = p - s;
                }
            }
            (false, false) => cur.copy_from_slice(prev),
        }
        prev = cur;
    }
}

/// Fixed-image statistics reused across evaluations.
#[derive(Debug, Clone)]
pub(crate) struct LnccFixed {
    pub filter: BoxFilter,
    fixed: Vec<f64>,
    sum_i: Vec<f64>,
    /// Per window: `1 / n`, the fixed mean and `1 / (fixed variance sum +
    /// eps_fixed * n)`.
    inv_n: Vec<f64>,
    mean_i: Vec<f64>,
    inv_ivar: Vec<f64>,
    /// Per-voxel variance floor for the moving windows.
    eps_moving: f64,
    scratch: RefCell<[Vec<f64>; 5]>,
}

impl LnccFixed {
    pub fn new(fixed: &[f64], dims: [usize; 3], window: usize) -> LnccFixed {
        let filter = BoxFilter::new(dims, window / 2);
        let sum_i = filter.apply(fixed);
        let sq: Vec<f64> = fixed.iter().map(|v| v * v).collect();
        let sum_ii = filter.apply(&sq);
        // Fixed windows with variance far below the image's are down-weighted.
        // The moving floor only guards the division: any larger value would
        // reward inflating moving contrast.
        let mean = fixed.iter().sum::<f64>() / fixed.len() as f64;
        let var = fixed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fixed.len() as f64;
        let var = var.max(1e-12);
        let eps_fixed = 1e-3 * var;
        let inv_n: Vec<f64> = filter.counts.iter().map(|n| 1.0 / n).collect();
        let mean_i: Vec<f64> = sum_i.iter().zip(&inv_n).map(|(s, r)| s * r).collect();
        let inv_ivar = (0..fixed.len())
            .map(|v| {
                let ivar = (sum_ii[v] - sum_i[v] * mean_i[v]).max(0.0);
                1.0 / (ivar + eps_fixed * filter.counts[v])
            })
            .collect();
        LnccFixed {
            eps_moving: 1e-9 * var,
            filter,
            fixed: fixed.to_vec(),
            sum_i,
            inv_n,
            mean_i,
            inv_ivar,
            scratch: RefCell::default(),
        }
    }

    /// Mean local squared correlation between the fixed image and `moving`;
    /// when `grad` is given it receives d(mean)/d(moving).
    pub fn evaluate(&self, moving: &[f64], grad: Option<&mut Vec<f64>>) -> f64 {
        let len = moving.len();
        let n_vox = len as f64;
        let mut guard = self.scratch.borrow_mut();
        let [sum_j, sum_jj, sum_ij, tmp, input] = &mut *guard;
        for b in [&mut *sum_j, &mut *sum_jj, &mut *sum_ij, &mut *input] {
            b.resize(len, 0.0);
        }
        self.filter.apply_into(moving, sum_j, tmp);
        for (o, v) in input.iter_mut().zip(moving) {
            *o = v * v;
        }
        self.filter.apply_into(input, sum_jj, tmp);
        for ((o, j), i) in input.iter_mut().zip(moving).zip(&self.fixed) {
            *o = i * j;
        }
        self.filter.apply_into(input, sum_ij, tmp);

        let Some(out) = grad else {
            let mut total = 0.0;
            for v in 0..len {
                let (cc, ..) = self.local(v, sum_j[v], sum_jj[v], sum_ij[v]);
                total += cc;
            }
            return total / n_vox;
        };
        // Overwrite the window sums in place with the per-window derivative
        // terms alpha, beta, gamma.
        let mut total = 0.0;
        for v in 0..len {
            let (cc, alpha, beta, gamma) = self.local(v, sum_j[v], sum_jj[v], sum_ij[v]);
            total += cc;
            sum_j[v] = alpha;
            sum_jj[v] = beta;
            sum_ij[v] = gamma;
        }
        out.resize(len, 0.0);
        self.filter.apply_into(sum_j, out, tmp);
        self.filter.apply_into(sum_jj, input, tmp);
        for (o, (b, m)) in out.iter_mut().zip(input.iter().zip(moving)) {
            *o += 2.0 * m * b;
        }
        self.filter.apply_into(sum_ij, input, tmp);
        for (o, (g, i)) in out.iter_mut().zip(input.iter().zip(&self.fixed)) {
            *o = (*o + i * g) / n_vox;
        }
        total / n_vox
    }

    /// Squared correlation of window `v` and its partial derivatives with
    /// respect to the window sums of J, J^2 and I*J.
    #[inline(always)]
    fn local(&self, v: usize, sj: f64, sjj: f64, sij: f64) -> (f64, f64, f64, f64) {
        let n = self.filter.counts[v];
        let mean_j = sj * self.inv_n[v];
        let cross = sij - self.sum_i[v] * mean_j;
        let jvar = (sjj - sj * mean_j).max(0.0);
        let inv_jreg = 1.0 / (jvar + self.eps_moving * n);
        let inv_denom = self.inv_ivar[v] * inv_jreg;
        let cc = cross * cross * inv_denom;
        let gamma = 2.0 * cross * inv_denom;
        let beta = -cc * inv_jreg;
        let alpha = -gamma * self.mean_i[v] - 2.0 * beta * mean_j;
        (cc, alpha, beta, gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_filter_matches_brute_force() {
        let dims = [5, 4, 3];
        let f = BoxFilter::new(dims, 1);
        let src: Vec<f64> = (0..60).map(|i| ((i * 7) % 9) as f64).collect();
        let out = f.apply(&src);
        for k in 0..3i64 {
            for j in 0..4i64 {
                for i in 0..5i64 {
                    let mut s = 0.0;
                    let mut c = 0.0;
                    for dk in -1..=1 {
                        for dj in -1..=1 {
                            for di in -1..=1 {
                                let (x, y, z) = (i + di, j + dj, k + dk);
                                if (0..5).contains(&x) && (0..4).contains(&y) && (0..3).contains(&z) {
                                    s += src[(x + 5 * (y + 4 * z)) as usize];
                                    c += 1.0;
                                }
                            }
                        }
                    }
                    let idx = (i + 5 * (j + 4 * k)) as usize;
                    assert_eq!(out[idx], s);
                    assert_eq!(f.counts[idx], c);
                }
            }
        }
    }

    #[test]
    fn self_similarity_near_one_and_gradient_matches_differences() {
        let dims = [6, 5, 4];
        let fixed: Vec<f64> = (0..120).map(|i| (((i * 31) % 17) as f64).sin()).collect();
        let l = LnccFixed::new(&fixed, dims, 3);
        let s = l.evaluate(&fixed, None);
        assert!(s > 0.99 && s <= 1.0, "{s}");

        let moving: Vec<f64> = (0..120).map(|i| (((i * 13) % 7) as f64).cos()).collect();
        let mut g = Vec::new();
        let e0 = l.evaluate(&moving, Some(&mut g));
        for p in [0usize, 33, 77, 119] {
            let mut m = moving.clone();
            let h = 1e-6;
            m[p] += h;
            let e1 = l.evaluate(&m, None);
            m[p] -= 2.0 * h;
            let e2 = l.evaluate(&m, None);
            let fd = (e1 - e2) / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-6 + 1e-4 * fd.abs(), "{p}: {fd} vs {}", g[p]);
        }
        assert!(e0 < s);
    }
}
