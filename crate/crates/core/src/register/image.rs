//! Working-precision images, Gaussian pyramids and trilinear sampling.

use crate::volgrid::{Grid, Volume};

#[derive(Debug, Clone)]
pub(crate) struct Image {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Image {
    pub fn from_volume(v: &Volume) -> Image {
        Image {
            grid: *v.grid(),
            data: v.data().iter().map(|&x| x as f64).collect(),
        }
    }

    /// `[1 2 1] / 4` blur along each axis (edges replicated), then 2×2×2
    /// block averaging. Axes of length 1 are left alone.
    pub fn downsample(&self) -> Image {
        let blurred = self.blur();
        let d = self.grid.dims;
        let factor: [usize; 3] = [0, 1, 2].map(|a| if d[a] > 1 { 2 } else { 1 });
        let nd: [usize; 3] = [0, 1, 2].map(|a| d[a].div_ceil(factor[a]));
        let spacing: [f64; 3] = [0, 1, 2].map(|a| self.grid.spacing[a] * factor[a] as f64);
        let grid = Grid {
            dims: nd,
            spacing,
            origin: self.grid.origin,
        };
        let mut data = vec![0.0; grid.len()];
        for k in 0..nd[2] {
            for j in 0..nd[1] {
                for i in 0..nd[0] {
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for dk in 0..factor[2] {
                        for dj in 0..factor[1] {
                            for di in 0..factor[0] {
                                let (x, y, z) = (i * factor[0] + di, j * factor[1] + dj, k * factor[2] + dk);
                                if x < d[0] && y < d[1] && z < d[2] {
                                    sum += blurred[self.grid.index(x, y, z)];
                                    n += 1;
                                }
                            }
                        }
                    }
                    data[grid.index(i, j, k)] = sum / n as f64;
                }
            }
        }
        Image { grid, data }
    }

    fn blur(&self) -> Vec<f64> {
        let d = self.grid.dims;
        let mut a = self.data.clone();
        let mut b = vec![0.0; a.len()];
        for axis in 0..3 {
            let n = d[axis];
            if n == 1 {
                continue;
            }
            let stride = match axis {
                0 => 1,
                1 => d[0],
                _ => d[0] * d[1],
            };
            for (idx, out) in b.iter_mut().enumerate() {
                let c = (idx / stride) % n;
                let lo = if c > 0 { a[idx - stride] } else { a[idx] };
                let hi = if c + 1 < n { a[idx + stride] } else { a[idx] };
                *out = 0.25 * lo + 0.5 * a[idx] + 0.25 * hi;
            }
            std::mem::swap(&mut a, &mut b);
        }
        a
    }

    /// Levels from coarsest to finest; each coarser level halves resolution.
    pub fn pyramid(self, levels: usize) -> Vec<Image> {
        let mut out = vec![self];
        for _ in 1..levels {
            let next = out.last().unwrap().downsample();
            out.push(next);
        }
        out.reverse();
        out
    }

    /// Trilinear sample at a continuous voxel index with edge clamping;
    /// returns the value and its gradient with respect to the index.
    #[inline(always)]
    pub fn sample_with_gradient(&self, t: [f64; 3]) -> (f64, [f64; 3]) {
        let d = self.grid.dims;
        let mut i0 = [0usize; 3];
        let mut f = [0.0f64; 3];
        let mut inside = [true; 3];
        for a in 0..3 {
            let n = d[a];
            if n == 1 {
                inside[a] = false;
                continue;
            }
            let max = (n - 1) as f64;
            let mut x = t[a];
            if x.is_nan() {
                return (f64::NAN, [f64::NAN; 3]);
            }
            if x <= 0.0 {
                x = 0.0;
                inside[a] = t[a] == 0.0;
            } else if x >= max {
                x = max;
                inside[a] = t[a] == max;
            }
            // SAFETY: x is not NaN and lies in [0, n - 1] after the clamp,
            // so it fits in i64 and truncation is floor. Signed conversions
            // are single instructions on x86-64.
            let base = unsafe { x.to_int_unchecked::<i64>() }.min(n as i64 - 2);
            i0[a] = base as usize;
            f[a] = x - base as f64;
        }
        let sx = if d[0] > 1 { 1 } else { 0 };
        let sy = if d[1] > 1 { d[0] } else { 0 };
        let sz = if d[2] > 1 { d[0] * d[1] } else { 0 };
        let base = self.grid.index(i0[0], i0[1], i0[2]);
        let c000 = self.data[base];
        let c100 = self.data[base + sx];
        let c010 = self.data[base + sy];
        let c110 = self.data[base + sx + sy];
        let c001 = self.data[base + sz];
        let c101 = self.data[base + sx + sz];
        let c011 = self.data[base + sy + sz];
        let c111 = self.data[base + sx + sy + sz];
        let [fx, fy, fz] = f;
        let c00 = c000 + fx * (c100 - c000);
        let c10 = c010 + fx * (c110 - c010);
        let c01 = c001 + fx * (c101 - c001);
        let c11 = c011 + fx * (c111 - c011);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        let value = c0 + fz * (c1 - c0);

        let mut g = [0.0; 3];
        if inside[0] {
            let a0 = (c100 - c000) + fy * ((c110 - c010) - (c100 - c000));
            let a1 = (c101 - c001) + fy * ((c111 - c011) - (c101 - c001));
            g[0] = a0 + fz * (a1 - a0);
        }
        if inside[1] {
            g[1] = (c10 - c00) + fz * ((c11 - c01) - (c10 - c00));
        }
        if inside[2] {
            g[2] = c1 - c0;
        }
        (value, g)
    }
}
