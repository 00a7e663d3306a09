//! Overlap and surface-distance metrics between label maps.
//!
//! Surfaces are the centers of class voxels with at least one 6-connected
//! neighbor outside the class (voxels on the grid edge always count).
//! Directed surface distances are computed with an exact anisotropic
//! Euclidean distance transform; MSD, RMS and HD pool both directions.
//!
//! A class present in only one of the two maps has DSC 0 and unbounded
//! distances (`f64::INFINITY`, serialized as `"unbounded"`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};
use crate::volgrid::{Class, Grid, LabelMap, BACKGROUND};

/// Quality scores for one class (or aggregate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    #[serde(with = "unbounded")]
    pub msd: f64,
    #[serde(with = "unbounded")]
    pub rms: f64,
    #[serde(with = "unbounded")]
    pub hd: f64,
}

impl ClassMetrics {
    pub const PERFECT: ClassMetrics = ClassMetrics {
        dsc: 1.0,
        msd: 0.0,
        rms: 0.0,
        hd: 0.0,
    };

    /// Score given to a comparison that could not be made.
    pub const WORST: ClassMetrics = ClassMetrics {
        dsc: 0.0,
        msd: f64::INFINITY,
        rms: f64::INFINITY,
        hd: f64::INFINITY,
    };

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Dsc => self.dsc,
            Metric::Msd => self.msd,
            Metric::Rms => self.rms,
            Metric::Hd => self.hd,
        }
    }

    pub fn set(&mut self, metric: Metric, value: f64) {
        match metric {
            Metric::Dsc => self.dsc = value,
            Metric::Msd => self.msd = value,
            Metric::Rms => self.rms = value,
            Metric::Hd => self.hd = value,
        }
    }
}

/// The four quality metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dsc,
    Msd,
    Rms,
    Hd,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dsc, Metric::Msd, Metric::Rms, Metric::Hd];

    /// DSC improves upwards, distances downwards.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dsc)
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Msd => "msd",
            Metric::Rms => "rms",
            Metric::Hd => "hd",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = QcError;
    fn from_str(s: &str) -> Result<Metric> {
        match s.to_ascii_lowercase().as_str() {
            "dsc" => Ok(Metric::Dsc),
            "msd" => Ok(Metric::Msd),
            "rms" => Ok(Metric::Rms),
            "hd" => Ok(Metric::Hd),
            other => Err(QcError::InvalidParams(format!("unknown metric {other:?}"))),
        }
    }
}

/// Which entry of a [`MetricSet`] is meant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scope {
    Class(Class),
    Average,
    WholeHeart,
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Scope::Class(Class::Lvc),
        Scope::Class(Class::Lvm),
        Scope::Class(Class::Rvc),
        Scope::Average,
        Scope::WholeHeart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Class(c) => c.name(),
            Scope::Average => "AVG",
            Scope::WholeHeart => "WH",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = QcError;
    fn from_str(s: &str) -> Result<Scope> {
        match s.to_ascii_uppercase().as_str() {
            "LVC" => Ok(Scope::Class(Class::Lvc)),
            "LVM" => Ok(Scope::Class(Class::Lvm)),
            "RVC" => Ok(Scope::Class(Class::Rvc)),
            "AVG" | "AVERAGE" => Ok(Scope::Average),
            "WH" | "WHOLE_HEART" | "WHOLEHEART" => Ok(Scope::WholeHeart),
            other => Err(QcError::InvalidParams(format!("unknown scope {other:?}"))),
        }
    }
}

/// Per-class, class-averaged and whole-heart metrics for one comparison.
/// Classes absent from both maps have no entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub per_class: BTreeMap<Class, ClassMetrics>,
    pub class_average: Option<ClassMetrics>,
    pub whole_heart: Option<ClassMetrics>,
}

impl MetricSet {
    pub fn get(&self, scope: Scope) -> Option<&ClassMetrics> {
        match scope {
            Scope::Class(c) => self.per_class.get(&c),
            Scope::Average => self.class_average.as_ref(),
            Scope::WholeHeart => self.whole_heart.as_ref(),
        }
    }

    pub fn value(&self, scope: Scope, metric: Metric) -> Option<f64> {
        self.get(scope).map(|m| m.get(metric))
    }

    pub fn insert(&mut self, scope: Scope, m: ClassMetrics) {
        match scope {
            Scope::Class(c) => {
                self.per_class.insert(c, m);
            }
            Scope::Average => self.class_average = Some(m),
            Scope::WholeHeart => self.whole_heart = Some(m),
        }
    }

    /// Mean of the present per-class entries, field by field.
    pub fn average_of(per_class: &BTreeMap<Class, ClassMetrics>) -> Option<ClassMetrics> {
        if per_class.is_empty() {
            return None;
        }
        let n = per_class.len() as f64;
        let mut avg = ClassMetrics {
            dsc: 0.0,
            msd: 0.0,
            rms: 0.0,
            hd: 0.0,
        };
        for m in per_class.values() {
            for metric in Metric::ALL {
                avg.set(metric, avg.get(metric) + m.get(metric));
            }
        }
        for metric in Metric::ALL {
            avg.set(metric, avg.get(metric) / n);
        }
        Some(avg)
    }
}

fn class_mask(lm: &LabelMap, code: u8) -> Vec<bool> {
    lm.labels().iter().map(|&l| l == code).collect()
}

fn foreground_mask(lm: &LabelMap) -> Vec<bool> {
    lm.labels().iter().map(|&l| l != BACKGROUND).collect()
}

fn dice_masks(a: &[bool], b: &[bool]) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Dice similarity coefficient of one class. Two empty sets score 1.
pub fn dice(a: &LabelMap, b: &LabelMap, code: u8) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    Ok(dice_masks(&class_mask(a, code), &class_mask(b, code)))
}

/// Indices of boundary voxels of a mask.
fn surface_indices(grid: &Grid, mask: &[bool]) -> Vec<usize> {
    let [nx, ny, nz] = grid.dims;
    let mut out = Vec::new();
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if mask[idx] {
                    let boundary = i == 0
                        || j == 0
                        || k == 0
                        || i + 1 == nx
                        || j + 1 == ny
                        || k + 1 == nz
                        || !mask[idx - 1]
                        || !mask[idx + 1]
                        || !mask[idx - nx]
                        || !mask[idx + nx]
                        || !mask[idx - nx * ny]
                        || !mask[idx + nx * ny];
                    if boundary {
                        out.push(idx);
                    }
                }
                idx += 1;
            }
        }
    }
    out
}

/// Centers (mm) of the boundary voxels of one class.
pub fn surface_voxels(lm: &LabelMap, code: u8) -> Vec<[f64; 3]> {
    let grid = lm.grid();
    surface_indices(grid, &class_mask(lm, code))
        .into_iter()
        .map(|idx| grid.voxel_center(grid.coords(idx)))
        .collect()
}

/// 1-D exact squared distance transform (lower envelope of parabolas) with
/// sample positions `i * step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                        / (2.0 * (pos(q) - pos(p)));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while j + 1 < v.len() && z[j + 1] < x {
            j += 1;
        }
        let d = x - pos(v[j]);
        *o = d * d + f[v[j]];
    }
}

/// Squared physical distance from every voxel in `[lo, hi)` to the nearest
/// feature voxel, laid out over that sub-box with x fastest.
fn squared_edt_box(grid: &Grid, features: &[usize], lo: [usize; 3], hi: [usize; 3]) -> Vec<f64> {
    let b = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let len = b[0] * b[1] * b[2];
    let mut d = vec![f64::INFINITY; len];
    for &idx in features {
        let [i, j, k] = grid.coords(idx);
        d[(i - lo[0]) + b[0] * ((j - lo[1]) + b[1] * (k - lo[2]))] = 0.0;
    }
    let mut line = Vec::new();
    let mut res = Vec::new();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = b[axis];
        let stride = match axis {
            0 => 1,
            1 => b[0],
            _ => b[0] * b[1],
        };
        line.resize(n, 0.0);
        res.resize(n, 0.0);
        for start in 0..len {
            // visit each line once, from its first element
            let c = match axis {
                0 => start % b[0],
                1 => (start / b[0]) % b[1],
                _ => start / (b[0] * b[1]),
            };
            if c != 0 {
                continue;
            }
            for q in 0..n {
                line[q] = d[start + q * stride];
            }
            edt_1d(&line, grid.spacing[axis], &mut res, &mut v, &mut z);
            for q in 0..n {
                d[start + q * stride] = res[q];
            }
        }
    }
    d
}

fn bounding_box(grid: &Grid, sets: &[&[usize]]) -> ([usize; 3], [usize; 3]) {
    let mut lo = grid.dims;
    let mut hi = [0usize; 3];
    for set in sets {
        for &idx in *set {
            let c = grid.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
    }
    (lo, hi)
}

fn directed_distances(grid: &Grid, from: &[usize], to: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = bounding_box(grid, &[from, to]);
    let bx = hi[0] - lo[0];
    let by = hi[1] - lo[1];
    let local = |idx: usize| {
        let [i, j, k] = grid.coords(idx);
        (i - lo[0]) + bx * ((j - lo[1]) + by * (k - lo[2]))
    };
    let to_edt = squared_edt_box(grid, to, lo, hi);
    let from_edt = squared_edt_box(grid, from, lo, hi);
    let ab = from.iter().map(|&i| to_edt[local(i)].sqrt()).collect();
    let ba = to.iter().map(|&i| from_edt[local(i)].sqrt()).collect();
    (ab, ba)
}

fn mask_surface_distances(grid: &Grid, a: &[bool], b: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let sa = surface_indices(grid, a);
    let sb = surface_indices(grid, b);
    if sa.is_empty() || sb.is_empty() {
        return Err(QcError::UndefinedDistance);
    }
    Ok(directed_distances(grid, &sa, &sb))
}

/// Distances (mm) from each surface point of `a` to the surface of `b`,
/// and from each surface point of `b` to the surface of `a`, in voxel
/// index order.
pub fn surface_distances(a: &LabelMap, b: &LabelMap, code: u8) -> Result<(Vec<f64>, Vec<f64>)> {
    a.grid().ensure_same(b.grid())?;
    mask_surface_distances(a.grid(), &class_mask(a, code), &class_mask(b, code))
}

fn pooled<'a>(ab: &'a [f64], ba: &'a [f64]) -> Result<impl Iterator<Item = f64> + Clone + 'a> {
    if ab.is_empty() || ba.is_empty() {
        return Err(QcError::UndefinedDistance);
    }
    Ok(ab.iter().chain(ba).copied())
}

/// Mean of the pooled bidirectional distances.
pub fn msd(ab: &[f64], ba: &[f64]) -> Result<f64> {
    let n = (ab.len() + ba.len()) as f64;
    Ok(pooled(ab, ba)?.sum::<f64>() / n)
}

/// Root mean square of the pooled bidirectional distances.
pub fn rms(ab: &[f64], ba: &[f64]) -> Result<f64> {
    let n = (ab.len() + ba.len()) as f64;
    Ok((pooled(ab, ba)?.map(|d| d * d).sum::<f64>() / n).sqrt())
}

/// Hausdorff distance: the largest pooled distance.
pub fn hd(ab: &[f64], ba: &[f64]) -> Result<f64> {
    Ok(pooled(ab, ba)?.fold(0.0, f64::max))
}

/// Merges all foreground classes into label 1.
pub fn whole_heart(lm: &LabelMap) -> LabelMap {
    let labels = lm
        .labels()
        .iter()
        .map(|&l| u8::from(l != BACKGROUND))
        .collect();
    LabelMap::new(*lm.grid(), labels).expect("binary labels are valid")
}

/// Metrics of one binary structure; `None` when absent from both masks.
fn binary_metrics(grid: &Grid, a: &[bool], b: &[bool]) -> Option<ClassMetrics> {
    let in_a = a.iter().any(|&x| x);
    let in_b = b.iter().any(|&x| x);
    match (in_a, in_b) {
        (false, false) => None,
        (true, true) => {
            let dsc = dice_masks(a, b);
            let (ab, ba) = mask_surface_distances(grid, a, b).expect("both surfaces non-empty");
            Some(ClassMetrics {
                dsc,
                msd: msd(&ab, &ba).unwrap(),
                rms: rms(&ab, &ba).unwrap(),
                hd: hd(&ab, &ba).unwrap(),
            })
        }
        _ => Some(ClassMetrics::WORST),
    }
}

/// Every metric for every class, their class average and the whole heart.
pub fn full_metrics(a: &LabelMap, b: &LabelMap) -> Result<MetricSet> {
    a.grid().ensure_same(b.grid())?;
    let grid = a.grid();
    let mut per_class = BTreeMap::new();
    for class in Class::ALL {
        let ma = class_mask(a, class.code());
        let mb = class_mask(b, class.code());
        if let Some(m) = binary_metrics(grid, &ma, &mb) {
            per_class.insert(class, m);
        }
    }
    let whole_heart = binary_metrics(grid, &foreground_mask(a), &foreground_mask(b));
    Ok(MetricSet {
        class_average: MetricSet::average_of(&per_class),
        per_class,
        whole_heart,
    })
}

/// Serializes infinite distances as the string `"unbounded"`.
pub mod unbounded {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub const TOKEN: &str = "unbounded";

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(TOKEN)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a number or \"{TOKEN}\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                if v == TOKEN {
                    Ok(f64::INFINITY)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }

    /// Text form used in CSV cells.
    pub fn format(v: f64) -> String {
        if v.is_finite() {
            format!("{v}")
        } else {
            TOKEN.to_string()
        }
    }
}
