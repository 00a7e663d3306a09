mod common;

use common::{brute_metrics, check_ordering, check_scale, check_symmetry, check_translation, compare_sets, seeded_pair};
use proptest::prelude::*;
use rcaqc::metrics::{full_metrics, MetricSet};
use rcaqc::volgrid::{Grid, LabelMap};

#[test]
fn matches_brute_force_oracle() {
    for seed in 0..60 {
        let (a, b) = seeded_pair(seed, 12);
        let got = full_metrics(&a, &b).unwrap();
        let want = brute_metrics(&a, &b);
        if let Some(diff) = compare_sets(&got, &want, 1e-9) {
            panic!("seed {seed}: {diff}");
        }
    }
}

#[test]
fn empty_maps_have_no_entries() {
    let g = Grid::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
    let e = LabelMap::background(g).unwrap();
    assert_eq!(full_metrics(&e, &e).unwrap(), MetricSet::default());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn symmetric(seed in any::<u64>()) {
        let (a, b) = seeded_pair(seed, 10);
        check_symmetry(&a, &b).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn distance_ordering(seed in any::<u64>()) {
        let (a, b) = seeded_pair(seed, 10);
        check_ordering(&a, &b).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn spacing_scale_equivariance(seed in any::<u64>(), s in 0.25f64..4.0) {
        let (a, b) = seeded_pair(seed, 10);
        check_scale(&a, &b, s).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn translation_invariance(seed in any::<u64>(), shift in proptest::array::uniform3(-50.0f64..50.0)) {
        let (a, b) = seeded_pair(seed, 10);
        check_translation(&a, &b, shift).map_err(TestCaseError::fail)?;
    }
}
