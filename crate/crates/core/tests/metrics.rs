mod common;

use common::{fixture_sample, Fixture};
use rand::Rng as _;
use risfuse::data::Sample;
use risfuse::imaging::Mask;
use risfuse::metrics::{evaluate, iou, MaskPredictor, MetricsReport, PRECISION_THRESHOLDS};
use risfuse::nn::seeded_rng;
use risfuse::{Result, Tensor};

const SIDE: usize = 10;

struct Oracle;

impl MaskPredictor for Oracle {
    fn predict_prob(&self, s: &Sample) -> Result<Tensor> {
        Ok(Tensor::from_fn(&[1, 1, SIDE, SIDE], |p| s.mask.bits()[p] as u8 as f64))
    }
}

struct Nothing;

impl MaskPredictor for Nothing {
    fn predict_prob(&self, _: &Sample) -> Result<Tensor> {
        Ok(Tensor::zeros(&[1, 1, SIDE, SIDE]))
    }
}

#[test]
fn hand_aggregated_fixture() {
    let samples: Vec<Sample> = (0..4).map(fixture_sample).collect();
    // 11, 13, 15 and 19 of 20 pixels give IoU 0.55, 0.65, 0.75, 0.95
    let report = evaluate(&Fixture { hits: vec![11, 13, 15, 19] }, &samples, 0.5).unwrap();
    assert_eq!(report.per_sample_iou, vec![0.55, 0.65, 0.75, 0.95]);
    assert!((report.miou - 0.725).abs() < 1e-12);
    assert_eq!(report.precisions(), vec![1.0, 0.75, 0.5, 0.25, 0.25]);
}

#[test]
fn oracle_and_empty_predictors() {
    let samples: Vec<Sample> = (0..3).map(fixture_sample).collect();
    let best = evaluate(&Oracle, &samples, 0.5).unwrap();
    assert_eq!(best.miou, 1.0);
    assert_eq!(best.precisions(), vec![1.0; 5]);
    let worst = evaluate(&Nothing, &samples, 0.5).unwrap();
    assert_eq!(worst.miou, 0.0);
    assert_eq!(worst.precisions(), vec![0.0; 5]);
    assert!(evaluate(&Oracle, &[], 0.5).is_err());
}

/// Straightforward re-aggregation used to cross-check `from_ious`.
fn naive(ious: &[f64]) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut counts = [0usize; 5];
    for &v in ious {
        total += v;
        for (c, &t) in counts.iter_mut().zip(&PRECISION_THRESHOLDS) {
            if v > t {
                *c += 1;
            }
        }
    }
    let n = ious.len() as f64;
    (total / n, counts.iter().map(|&c| c as f64 / n).collect())
}

#[test]
fn precision_is_monotone_and_matches_naive_aggregation() {
    let mut rng = seeded_rng(21);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let ious: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(0..=10) as f64 / 10.0 } else { rng.random_range(0.0..=1.0) })
            .collect();
        let r = MetricsReport::from_ious(ious.clone()).unwrap();
        let p = r.precisions();
        assert!(p.windows(2).all(|w| w[0] >= w[1]), "{p:?}");
        let (miou, expect) = naive(&ious);
        assert!((r.miou - miou).abs() < 1e-12);
        assert_eq!(p, expect);
    }
}

#[test]
fn report_rejects_bad_input_and_round_trips_as_json() {
    assert!(MetricsReport::from_ious(vec![]).is_err());
    assert!(MetricsReport::from_ious(vec![0.5, 1.2]).is_err());
    let r = MetricsReport::from_ious(vec![0.3, 0.8]).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"mIoU\""));
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
}

#[test]
fn iou_needs_matching_sizes() {
    assert!(iou(&Mask::empty(4, 4), &Mask::empty(4, 5)).is_err());
}
