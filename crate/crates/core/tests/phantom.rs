use std::f64::consts::PI;

use rcaqc::metrics::{dice, full_metrics, whole_heart};
use rcaqc::phantom::{degrade, generate_phantom, make_battery, DegradeOp, DegradeSpec, PhantomParams, BATTERY_OPERATOR_SETS};

fn ellipsoid_volume(r: [f64; 3]) -> f64 {
    4.0 / 3.0 * PI * r[0] * r[1] * r[2]
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Volume of `rv minus lv_outer` by midpoint quadrature on a 0.25 mm lattice.
fn crescent_volume(p: &PhantomParams) -> f64 {
    let c = p.rv_center();
    let r = p.rv_radii;
    let h = 0.25;
    let mut count = 0usize;
    let n = [0, 1, 2].map(|a| (2.0 * r[a] / h).ceil() as usize);
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let q = [
                    c[0] - r[0] + (i as f64 + 0.5) * h,
                    c[1] - r[1] + (j as f64 + 0.5) * h,
                    c[2] - r[2] + (k as f64 + 0.5) * h,
                ];
                if inside(q, c, r) && !inside(q, p.lv_center, p.lv_outer_radii()) {
                    count += 1;
                }
            }
        }
    }
    count as f64 * h * h * h
}

#[test]
fn label_volumes_match_continuous_shapes() {
    let p = PhantomParams::default();
    let (_, lab) = generate_phantom(&p).unwrap();
    let voxel = p.spacing.iter().product::<f64>();
    let lvc = ellipsoid_volume(p.lv_radii);
    let lvm = ellipsoid_volume(p.lv_outer_radii()) - lvc;
    let rvc = crescent_volume(&p);
    for (code, want) in [(1u8, lvc), (2, lvm), (3, rvc)] {
        let got = lab.count(code) as f64 * voxel;
        assert!((got - want).abs() / want < 0.05, "label {code}: {got} vs {want}");
    }
}

fn wh_dsc(a: &rcaqc::volgrid::LabelMap, b: &rcaqc::volgrid::LabelMap) -> f64 {
    dice(&whole_heart(a), &whole_heart(b), 1).unwrap()
}

#[test]
fn severe_slice_drop_and_erosion_halves_overlap() {
    let (_, gt) = generate_phantom(&PhantomParams::default()).unwrap();
    let spec = DegradeSpec {
        severity: 1.0,
        operators: vec![DegradeOp::DropSlices, DegradeOp::Erode],
        seed: 5,
    };
    let d = wh_dsc(&degrade(&gt, &spec).unwrap(), &gt);
    assert!(d < 0.5, "{d}");
}

#[test]
fn mean_overlap_decreases_with_severity() {
    let severities = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut sets: Vec<Vec<DegradeOp>> = BATTERY_OPERATOR_SETS.iter().map(|s| s.to_vec()).collect();
    sets.push(DegradeOp::ALL.to_vec());
    sets.extend(DegradeOp::ALL.iter().map(|&op| vec![op]));
    let (_, gt) = generate_phantom(&PhantomParams::default()).unwrap();
    for ops in sets {
        let means: Vec<f64> = severities
            .iter()
            .map(|&s| {
                (0..20u64)
                    .map(|seed| {
                        let spec = DegradeSpec {
                            severity: s,
                            operators: ops.clone(),
                            seed,
                        };
                        wh_dsc(&degrade(&gt, &spec).unwrap(), &gt)
                    })
                    .sum::<f64>()
                    / 20.0
            })
            .collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]), "{ops:?}: {means:?}");
    }
}

#[test]
fn battery_is_reproducible_and_references_distinct() {
    let a = make_battery(6, 5, &[0.0, 0.5, 1.0], 99).unwrap();
    let b = make_battery(6, 5, &[0.0, 0.5, 1.0], 99).unwrap();
    assert_eq!(a.reference_records, b.reference_records);
    assert_eq!(a.case_records, b.case_records);
    for (x, y) in a.cases.iter().zip(&b.cases) {
        assert_eq!(x.seg, y.seg);
        assert_eq!(x.gt, y.gt);
        assert!(x.image.data().iter().zip(y.image.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    for (i, r) in a.reference_records.iter().enumerate() {
        for s in &a.reference_records[i + 1..] {
            assert_ne!(r.params, s.params);
        }
        for c in &a.case_records {
            assert_ne!(r.params, c.params);
        }
    }
    let c = make_battery(6, 5, &[0.0, 0.5, 1.0], 100).unwrap();
    assert_ne!(a.case_records, c.case_records);
}

#[test]
fn battery_spans_the_quality_range() {
    let b = make_battery(50, 1, &[0.0, 0.25, 0.5, 0.75, 1.0], 2024).unwrap();
    let dscs: Vec<f64> = b
        .cases
        .iter()
        .map(|tc| full_metrics(&tc.seg, tc.gt.as_ref().unwrap()).unwrap().whole_heart.unwrap().dsc)
        .collect();
    let lo = dscs.iter().copied().fold(1.0, f64::min);
    let hi = dscs.iter().copied().fold(0.0, f64::max);
    assert!(lo < 0.4 && hi > 0.95, "{lo} {hi}");
    for (tc, rec) in b.cases.iter().zip(&b.case_records) {
        if rec.degrade.severity == 0.0 {
            assert_eq!(&tc.seg, tc.gt.as_ref().unwrap());
        }
    }
}
