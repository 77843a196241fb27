//! Grounding metrics: IoU, Pr@τ, meanIoU and cumIoU.
//!
//! A prediction counts as correct at threshold τ only when its IoU strictly
//! exceeds τ, so an IoU of exactly 0.5 is a miss at Pr@0.5.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds reported by [`report`].
pub const THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

/// Corner-format box in pixels. Serialized as `[xmin, ymin, xmax, ymax]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self { xmin, ymin, xmax, ymax };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.xmin, self.ymin, self.xmax, self.ymax];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input(format!("box {v:?} has non-finite coordinates")));
        }
        if self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(Error::Input(format!("degenerate box {v:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }

    /// Box from normalized center/size scaled to a `width × height` image.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64, width: f64, height: f64) -> Result<Self> {
        Self::new((cx - w / 2.0) * width, (cy - h / 2.0) * height, (cx + w / 2.0) * width, (cy + h / 2.0) * height)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection and union areas, with the overlap clamped at zero.
pub fn intersection_union(a: &BBox, b: &BBox) -> Result<(f64, f64)> {
    a.validate()?;
    b.validate()?;
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    Ok((inter, a.area() + b.area() - inter))
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    let (i, u) = intersection_union(a, b)?;
    Ok(i / u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub image_id: String,
    pub query: String,
    pub gt: BBox,
    pub pred: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Running sums behind every metric. Shards combine with [`IouTotals::merge`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IouTotals {
    pub n: usize,
    pub sum_iou: f64,
    pub sum_inter: f64,
    pub sum_union: f64,
    pub hits: [usize; 3],
}

impl IouTotals {
    pub fn push(&mut self, gt: &BBox, pred: &BBox) -> Result<()> {
        let (i, u) = intersection_union(gt, pred)?;
        let v = i / u;
        self.n += 1;
        self.sum_iou += v;
        self.sum_inter += i;
        self.sum_union += u;
        for (hit, t) in self.hits.iter_mut().zip(THRESHOLDS) {
            if v > t {
                *hit += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouTotals) {
        self.n += other.n;
        self.sum_iou += other.sum_iou;
        self.sum_inter += other.sum_inter;
        self.sum_union += other.sum_union;
        for (a, b) in self.hits.iter_mut().zip(other.hits) {
            *a += b;
        }
    }

    fn summary(&self) -> MetricSummary {
        let pct = |k: usize| 100.0 * k as f64 / self.n as f64;
        MetricSummary {
            pr_at: THRESHOLDS
                .iter()
                .zip(self.hits)
                .map(|(&threshold, k)| ThresholdPrecision { threshold, precision: pct(k) })
                .collect(),
            mean_iou: 100.0 * self.sum_iou / self.n as f64,
            cum_iou: 100.0 * self.sum_inter / self.sum_union,
            n_pairs: self.n,
        }
    }
}

fn non_empty(records: &[PairRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("metrics need at least one record".into()));
    }
    Ok(())
}

/// Percentage of records whose IoU strictly exceeds `tau`.
pub fn precision_at(records: &[PairRecord], tau: f64) -> Result<f64> {
    non_empty(records)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Input(format!("threshold {tau} outside (0, 1)")));
    }
    let mut hits = 0usize;
    for r in records {
        if iou(&r.gt, &r.pred)? > tau {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// `100 · (1/M) Σ I_t/U_t`.
pub fn mean_iou(records: &[PairRecord]) -> Result<f64> {
    non_empty(records)?;
    let mut sum = 0.0;
    for r in records {
        sum += iou(&r.gt, &r.pred)?;
    }
    Ok(100.0 * sum / records.len() as f64)
}

/// `100 · Σ I_t / Σ U_t`.
pub fn cum_iou(records: &[PairRecord]) -> Result<f64> {
    non_empty(records)?;
    let (mut si, mut su) = (0.0, 0.0);
    for r in records {
        let (i, u) = intersection_union(&r.gt, &r.pred)?;
        si += i;
        su += u;
    }
    Ok(100.0 * si / su)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPrecision {
    pub threshold: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pr_at: Vec<ThresholdPrecision>,
    pub mean_iou: f64,
    pub cum_iou: f64,
    pub n_pairs: usize,
}

impl MetricSummary {
    pub fn pr(&self, threshold: f64) -> Option<f64> {
        self.pr_at.iter().find(|p| p.threshold == threshold).map(|p| p.precision)
    }
}

/// Full-precision metrics; per-category rows appear only when every record
/// carries a category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: MetricSummary,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<String, MetricSummary>,
}

impl std::ops::Deref for MetricsReport {
    type Target = MetricSummary;

    fn deref(&self) -> &MetricSummary {
        &self.overall
    }
}

pub fn report(records: &[PairRecord]) -> Result<MetricsReport> {
    non_empty(records)?;
    let mut totals = IouTotals::default();
    let mut by_cat: BTreeMap<String, IouTotals> = BTreeMap::new();
    let categorized = records.iter().all(|r| r.category.is_some());
    for r in records {
        let mut one = IouTotals::default();
        one.push(&r.gt, &r.pred)?;
        totals.merge(&one);
        if categorized {
            by_cat.entry(r.category.clone().unwrap()).or_default().merge(&one);
        }
    }
    Ok(MetricsReport {
        overall: totals.summary(),
        per_category: by_cat.into_iter().map(|(k, v)| (k, v.summary())).collect(),
    })
}

const HEADER: [&str; 5] = ["Pr@0.5", "Pr@0.7", "Pr@0.9", "meanIoU", "cumIoU"];

fn row(label: &str, s: &MetricSummary) -> String {
    let mut line = format!("{label:<24}");
    for p in &s.pr_at {
        line.push_str(&format!(" | {:>7.2}", p.precision));
    }
    line.push_str(&format!(" | {:>7.2} | {:>7.2}", s.mean_iou, s.cum_iou));
    line
}

impl MetricsReport {
    /// Aligned text table: Pr@0.5, Pr@0.7, Pr@0.9, meanIoU, cumIoU, in percent.
    pub fn render_table(&self, label: &str) -> String {
        let mut out = format!("{:<24}", "Methods");
        for h in HEADER {
            out.push_str(&format!(" | {h:>7}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(24 + HEADER.len() * 10));
        out.push('\n');
        out.push_str(&row(label, &self.overall));
        out.push('\n');
        if !self.per_category.is_empty() {
            out.push_str("per category:\n");
            for (cat, s) in &self.per_category {
                out.push_str(&row(&format!("  {cat} (n={})", s.n_pairs), s));
                out.push('\n');
            }
        }
        out.push_str(&format!("pairs: {}\n", self.n_pairs));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn rec(id: &str, gt: BBox, pred: BBox) -> PairRecord {
        PairRecord { pair_id: id.into(), image_id: "img".into(), query: "q".into(), gt, pred, category: None }
    }

    /// Unit-cell counting over the integer grid.
    fn raster_iou(a: [i64; 4], c: [i64; 4]) -> f64 {
        let inside = |bx: [i64; 4], x: i64, y: i64| x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3];
        let (mut inter, mut union) = (0u64, 0u64);
        for x in 0..64 {
            for y in 0..64 {
                let (p, q) = (inside(a, x, y), inside(c, x, y));
                inter += (p && q) as u64;
                union += (p || q) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
        let want = raster_iou([0, 0, 10, 10], [5, 5, 15, 15]);
        assert_eq!(want, 25.0 / 175.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 15.0, 15.0)).unwrap(), want);
        // touching edge
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        let bad = BBox { xmin: 2.0, ymin: 0.0, xmax: 1.0, ymax: 1.0 };
        assert!(matches!(iou(&bad, &b(0.0, 0.0, 1.0, 1.0)), Err(Error::Input(_))));
        assert!(serde_json::from_str::<BBox>("[0, 0, 0, 1]").is_err());
    }

    fn worked_example() -> Vec<PairRecord> {
        vec![
            rec("a", b(0.0, 0.0, 10.0, 10.0), b(5.0, 5.0, 15.0, 15.0)),
            rec("b", b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0, 10.0)),
        ]
    }

    #[test]
    fn worked_two_record_example() {
        let recs = worked_example();
        assert_eq!(precision_at(&recs, 0.5).unwrap(), 50.0);
        assert!((mean_iou(&recs).unwrap() - 100.0 * 4.0 / 7.0).abs() < 1e-12);
        assert!((cum_iou(&recs).unwrap() - 100.0 * 125.0 / 275.0).abs() < 1e-12);
        let r = report(&recs).unwrap();
        assert_eq!(r.pr(0.5), Some(50.0));
        assert_eq!(r.pr(0.7), Some(50.0));
        assert_eq!(r.pr(0.9), Some(50.0));
        assert!((r.mean_iou - 57.142857).abs() < 1e-4);
        assert!((r.cum_iou - 45.454545).abs() < 1e-4);
        assert_eq!(r.n_pairs, 2);
    }

    #[test]
    fn perfect_and_disjoint_sets() {
        let perfect: Vec<_> = (0..4).map(|i| rec(&i.to_string(), b(1.0, 2.0, 3.0, 4.0), b(1.0, 2.0, 3.0, 4.0))).collect();
        let r = report(&perfect).unwrap();
        for t in THRESHOLDS {
            assert_eq!(r.pr(t), Some(100.0));
        }
        assert_eq!((r.mean_iou, r.cum_iou), (100.0, 100.0));
        let disjoint: Vec<_> = (0..3).map(|i| rec(&i.to_string(), b(0.0, 0.0, 1.0, 1.0), b(5.0, 5.0, 6.0, 6.0))).collect();
        assert_eq!(precision_at(&disjoint, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.5
        let r = rec("x", b(0.0, 0.0, 2.0, 1.0), b(0.0, 0.0, 1.0, 1.0));
        assert_eq!(iou(&r.gt, &r.pred).unwrap(), 0.5);
        assert_eq!(precision_at(&[r], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn empty_records_are_errors() {
        assert!(precision_at(&[], 0.5).is_err());
        assert!(mean_iou(&[]).is_err());
        assert!(cum_iou(&[]).is_err());
        assert!(report(&[]).is_err());
        assert!(precision_at(&worked_example(), 1.0).is_err());
    }

    #[test]
    fn duplicated_set_keeps_mean_and_identical_records_agree() {
        let recs = worked_example();
        let doubled: Vec<_> = recs.iter().chain(recs.iter()).cloned().collect();
        assert!((mean_iou(&doubled).unwrap() - mean_iou(&recs).unwrap()).abs() < 1e-12);
        let same = vec![recs[0].clone(), recs[0].clone(), recs[0].clone()];
        assert!((mean_iou(&same).unwrap() - cum_iou(&same).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn per_category_only_when_all_categorized() {
        let mut recs = worked_example();
        assert!(report(&recs).unwrap().per_category.is_empty());
        recs[0].category = Some("ship".into());
        assert!(report(&recs).unwrap().per_category.is_empty());
        recs[1].category = Some("airplane".into());
        let r = report(&recs).unwrap();
        assert_eq!(r.per_category.len(), 2);
        assert_eq!(r.per_category["airplane"].mean_iou, 100.0);
    }

    #[test]
    fn table_columns_in_order() {
        let t = report(&worked_example()).unwrap().render_table("toy");
        let header = t.lines().next().unwrap();
        let cols: Vec<_> = header.split('|').map(str::trim).collect();
        assert_eq!(cols, ["Methods", "Pr@0.5", "Pr@0.7", "Pr@0.9", "meanIoU", "cumIoU"]);
        assert!(t.contains("57.14") && t.contains("45.45"));
    }

    #[test]
    fn report_json_round_trip_keeps_full_precision() {
        let r = report(&worked_example()).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(r, back);
    }

    fn int_box() -> impl Strategy<Value = [i64; 4]> {
        (0i64..63, 0i64..63).prop_flat_map(|(x0, y0)| (Just(x0), Just(y0), x0 + 1..=64, y0 + 1..=64))
            .prop_map(|(x0, y0, x1, y1)| [x0, y0, x1, y1])
    }

    fn to_box(v: [i64; 4]) -> BBox {
        b(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64)
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_and_scale_invariant(a in int_box(), c in int_box(), s in 1u32..50) {
            let (ba, bc) = (to_box(a), to_box(c));
            let v = iou(&ba, &bc).unwrap();
            prop_assert_eq!(v, iou(&bc, &ba).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
            // power-of-two scales are exact in floating point
            let k = (1u64 << (s % 10)) as f64;
            let scale = |x: BBox| b(x.xmin * k, x.ymin * k, x.xmax * k, x.ymax * k);
            prop_assert_eq!(v, iou(&scale(ba), &scale(bc)).unwrap());
        }

        #[test]
        fn precision_non_increasing(boxes in prop::collection::vec((int_box(), int_box()), 1..20)) {
            let recs: Vec<_> = boxes.iter().enumerate()
                .map(|(i, (g, p))| rec(&i.to_string(), to_box(*g), to_box(*p))).collect();
            let r = report(&recs).unwrap();
            prop_assert!(r.pr_at[0].precision >= r.pr_at[1].precision);
            prop_assert!(r.pr_at[1].precision >= r.pr_at[2].precision);
            prop_assert!((0.0..=100.0).contains(&r.mean_iou));
            prop_assert!((0.0..=100.0).contains(&r.cum_iou));
        }

        #[test]
        fn sharded_totals_match_single_pass(boxes in prop::collection::vec((int_box(), int_box()), 2..20), cut in 1usize..19) {
            let cut = cut.min(boxes.len() - 1);
            let mut whole = IouTotals::default();
            let (mut left, mut right) = (IouTotals::default(), IouTotals::default());
            for (i, (g, p)) in boxes.iter().enumerate() {
                whole.push(&to_box(*g), &to_box(*p)).unwrap();
                if i < cut { left.push(&to_box(*g), &to_box(*p)).unwrap(); } else { right.push(&to_box(*g), &to_box(*p)).unwrap(); }
            }
            left.merge(&right);
            prop_assert_eq!(left.n, whole.n);
            prop_assert_eq!(left.hits, whole.hits);
            prop_assert!((left.sum_inter - whole.sum_inter).abs() < 1e-9);
        }
    }
}
