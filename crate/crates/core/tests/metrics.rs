mod common;

use common::{bbox, raster_iou};
use proptest::prelude::*;
use vgpeft::metrics::{cum_iou, iou, mean_iou, precision_at, report, PairRecord};

fn rec(id: &str, gt: [i64; 4], pred: [i64; 4]) -> PairRecord {
    PairRecord { pair_id: id.into(), image_id: id.into(), query: "q".into(), gt: bbox(gt), pred: bbox(pred), category: None }
}

fn integer_box() -> impl Strategy<Value = [i64; 4]> {
    (0i64..40, 0i64..40, 1i64..20, 1i64..20).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn analytic_iou_equals_raster_count(a in integer_box(), b in integer_box()) {
        prop_assert_eq!(iou(&bbox(a), &bbox(b)).unwrap(), raster_iou(a, b));
    }

    #[test]
    fn cum_iou_is_pooled_raster_ratio(pairs in prop::collection::vec((integer_box(), integer_box()), 1..8)) {
        let recs: Vec<_> = pairs.iter().enumerate().map(|(i, (g, p))| rec(&i.to_string(), *g, *p)).collect();
        let area = |r: [i64; 4]| ((r[2] - r[0]) * (r[3] - r[1])) as f64;
        let (mut si, mut su) = (0.0, 0.0);
        for (g, p) in &pairs {
            let v = raster_iou(*g, *p);
            // I = v·U and U = |g| + |p| − I, so I = v·(|g| + |p|) / (1 + v)
            let inter = v * (area(*g) + area(*p)) / (1.0 + v);
            si += inter;
            su += area(*g) + area(*p) - inter;
        }
        prop_assert!((cum_iou(&recs).unwrap() - 100.0 * si / su).abs() < 1e-9);
    }
}

#[test]
fn worked_example_against_raster_counts() {
    let recs = [rec("a", [0, 0, 10, 10], [5, 5, 15, 15]), rec("b", [0, 0, 10, 10], [0, 0, 10, 10])];
    let first = raster_iou([0, 0, 10, 10], [5, 5, 15, 15]);
    assert_eq!(first, 25.0 / 175.0);
    assert_eq!(precision_at(&recs, 0.5).unwrap(), 50.0);
    assert!((mean_iou(&recs).unwrap() - 100.0 * (first + 1.0) / 2.0).abs() < 1e-12);
    assert!((cum_iou(&recs).unwrap() - 100.0 * 125.0 / 275.0).abs() < 1e-12);
    let r = report(&recs).unwrap();
    assert!((r.mean_iou - 57.14).abs() <= 0.01);
    assert!((r.cum_iou - 45.45).abs() <= 0.01);
}

#[test]
fn table_has_no_trailing_whitespace() {
    let mut recs = vec![rec("a", [0, 0, 10, 10], [0, 0, 10, 10])];
    recs[0].category = Some("ship".into());
    let t = report(&recs).unwrap().render_table("model");
    assert!(t.lines().all(|l| !l.ends_with(' ')), "{t:?}");
}
