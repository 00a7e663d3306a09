use rcaqc::metrics::{ClassMetrics, Metric, MetricSet, Scope};
use rcaqc::phantom::{generate_phantom, jittered_params, PhantomParams};
use rcaqc::rca::{best_of, predict_quality, rca_report, RcaPrediction, ReferenceOutcome, TestCase};
use rcaqc::register::RegParams;
use rcaqc::volgrid::{LabelMap, ReferenceSet, Volume};

fn small() -> PhantomParams {
    PhantomParams {
        dims: [32, 32, 32],
        spacing: [4.0; 3],
        ..PhantomParams::default()
    }
}

fn refs(n: u64) -> ReferenceSet {
    ReferenceSet::new((0..n).map(|i| generate_phantom(&jittered_params(&small(), 100 + i)).unwrap()).collect()).unwrap()
}

#[test]
fn identical_reference_predicts_near_perfect_overlap() {
    let (img, lab) = generate_phantom(&small()).unwrap();
    let tc = TestCase::new("self", img.clone(), lab.clone(), Some(lab.clone())).unwrap();
    let set = ReferenceSet::new(vec![(img, lab)]).unwrap();
    let pred = predict_quality(&tc, &set, &RegParams::default()).unwrap();
    let wh = pred.predicted.value(Scope::WholeHeart, Metric::Dsc).unwrap();
    assert!(wh >= 0.95, "{wh}");
}

#[test]
fn empty_segmentation_scores_zero() {
    let (img, lab) = generate_phantom(&small()).unwrap();
    let empty = LabelMap::background(*lab.grid()).unwrap();
    let tc = TestCase::new("empty", img, empty, Some(lab)).unwrap();
    let pred = predict_quality(&tc, &refs(3), &RegParams::default()).unwrap();
    for scope in [Scope::WholeHeart, Scope::Average] {
        let m = pred.predicted.get(scope).unwrap();
        assert_eq!(*m, ClassMetrics::WORST, "{}", scope.name());
    }
    let real = tc.real_metrics().unwrap().unwrap();
    assert_eq!(real.value(Scope::WholeHeart, Metric::Dsc), Some(0.0));
}

#[test]
fn blank_image_yields_sentinels() {
    let (_, lab) = generate_phantom(&small()).unwrap();
    let blank = Volume::filled(*lab.grid(), 0.0).unwrap();
    let tc = TestCase::new("blank", blank, lab, None).unwrap();
    let pred = predict_quality(&tc, &refs(2), &RegParams::default()).unwrap();
    assert!(pred.per_reference.iter().all(|o| o.failure.is_some()));
    assert_eq!(pred.predicted.get(Scope::WholeHeart), Some(&ClassMetrics::WORST));
}

#[test]
fn prediction_ignores_reference_order() {
    let (img, lab) = generate_phantom(&jittered_params(&small(), 7)).unwrap();
    let tc = TestCase::new("c", img, lab, None).unwrap();
    let set = refs(4);
    let a = predict_quality(&tc, &set, &RegParams::default()).unwrap();
    let order = [2usize, 0, 3, 1];
    let b = predict_quality(&tc, &set.subset(&order).unwrap(), &RegParams::default()).unwrap();
    assert_eq!(a.predicted, b.predicted);
    let wa = a.wh_dsc_winner().unwrap();
    let wb = order[b.wh_dsc_winner().unwrap()];
    assert_eq!(
        a.per_reference[wa].metrics.value(Scope::WholeHeart, Metric::Dsc),
        a.per_reference[wb].metrics.value(Scope::WholeHeart, Metric::Dsc)
    );
}

#[test]
fn report_spans_the_ranking() {
    let (img, lab) = generate_phantom(&jittered_params(&small(), 9)).unwrap();
    let tc = TestCase::new("c", img, lab.clone(), Some(lab)).unwrap();
    let set = refs(5);
    let pred = predict_quality(&tc, &set, &RegParams::default()).unwrap();
    let wh = |m: &MetricSet| m.value(Scope::WholeHeart, Metric::Dsc).unwrap();

    let all = rca_report(&pred, &tc, &set, 10).unwrap();
    assert_eq!(all.references.len(), 5);
    assert_eq!(all.references.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert!(all.references.windows(2).all(|w| wh(&w[0].metrics) >= wh(&w[1].metrics)));
    assert_eq!(wh(&all.references[0].metrics), wh(&pred.predicted));
    assert_eq!(all.references[0].index, pred.wh_dsc_winner().unwrap());
    assert!(all.real.is_some());

    let two = rca_report(&pred, &tc, &set, 2).unwrap();
    assert_eq!(two.references.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![0, 4]);
    let json = serde_json::to_string(&all).unwrap();
    let back: rcaqc::rca::RcaReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, all);
}

#[test]
fn prefixes_never_worsen_the_prediction() {
    let m = |d: f64, h: f64| ClassMetrics { dsc: d, msd: h, rms: h * 1.5, hd: h * 3.0 };
    let sets: Vec<MetricSet> = [(0.5, 4.0), (0.8, 6.0), (0.3, 1.0), (0.8, 2.0)]
        .iter()
        .map(|&(d, h)| {
            let mut s = MetricSet::default();
            s.insert(Scope::WholeHeart, m(d, h));
            s
        })
        .collect();
    let mut prev: Option<MetricSet> = None;
    for k in 1..=sets.len() {
        let (p, _) = best_of(sets[..k].iter().enumerate());
        if let Some(q) = &prev {
            for metric in Metric::ALL {
                let (a, b) = (p.value(Scope::WholeHeart, metric).unwrap(), q.value(Scope::WholeHeart, metric).unwrap());
                assert!(a == b || metric.better(a, b));
            }
        }
        prev = Some(p);
    }
    let outcomes = sets
        .iter()
        .enumerate()
        .map(|(index, metrics)| ReferenceOutcome { index, metrics: metrics.clone(), failure: None })
        .collect();
    let pred = RcaPrediction::from_outcomes(outcomes).unwrap();
    assert_eq!(pred.wh_dsc_winner(), Some(1));
    assert_eq!(pred.predicted.value(Scope::WholeHeart, Metric::Msd), Some(1.0));
}
