mod support;

use std::path::PathBuf;

use bloompipe_core::evaluation::{
    average_precision, evaluate_corpus, f1_score, iou, match_detections, match_image, precision_recall_f1,
    AnnotationSet, EvalReport, Predictions,
};
use bloompipe_core::{BoundingBox, Detection};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use support::oracles::{optimal_hits, raster_iou, threshold_enumeration_ap, ImageCase, RawBox};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn to_box(r: RawBox) -> BoundingBox {
    BoundingBox::new(r[0], r[1], r[2], r[3]).unwrap()
}

fn random_box(rng: &mut impl Rng, min_side: f64) -> RawBox {
    let w = rng.gen_range(min_side..=1.0);
    let h = rng.gen_range(min_side..=1.0);
    let x = rng.gen_range(0.0..=1.0 - w);
    let y = rng.gen_range(0.0..=1.0 - h);
    [x, y, x + w, y + h]
}

/// Box with corners on the 1/1000 lattice, i.e. pixel-aligned on the oracle grid.
/// Half the time `b` is a perturbed copy of `near` so that overlaps are common.
fn lattice_box(rng: &mut impl Rng, near: Option<RawBox>) -> RawBox {
    let q = |v: f64| (v * 1000.0).round() / 1000.0;
    match near {
        Some(a) if rng.gen_bool(0.5) => {
            let mut j = |v: f64| q((v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
            let b = [j(a[0]), j(a[1]), j(a[2]), j(a[3])];
            if b[0] < b[2] && b[1] < b[3] {
                b
            } else {
                a
            }
        }
        _ => {
            let r = random_box(rng, 0.01);
            let b = [q(r[0]), q(r[1]), q(r[2]), q(r[3])];
            if b[0] < b[2] && b[1] < b[3] {
                b
            } else {
                [0.0, 0.0, 0.5, 0.5]
            }
        }
    }
}

#[test]
fn iou_matches_rasterization_on_lattice_boxes() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for i in 0..300 {
        let a = lattice_box(&mut rng, None);
        let b = lattice_box(&mut rng, Some(a));
        let d = (iou(&to_box(a), &to_box(b)) - raster_iou(a, b, 1000)).abs();
        assert!(d <= 2e-3, "pair {i}: {a:?} {b:?} deviates by {d}");
    }
}

#[test]
fn iou_tracks_rasterization_on_continuous_boxes() {
    // Cell-center sampling misplaces each edge by up to half a cell, so only
    // the grid resolution bounds the deviation here.
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    let (mut worst, mut total) = (0.0f64, 0.0);
    for _ in 0..300 {
        let a = random_box(&mut rng, 0.05);
        let b = random_box(&mut rng, 0.05);
        let d = (iou(&to_box(a), &to_box(b)) - raster_iou(a, b, 1000)).abs();
        worst = worst.max(d);
        total += d;
    }
    assert!(total / 300.0 < 5e-4, "mean deviation {}", total / 300.0);
    assert!(worst < 1e-2, "worst deviation {worst}");
}

#[test]
fn greedy_agrees_with_optimal_assignment_on_duplicates() {
    let g: RawBox = [0.1, 0.1, 0.4, 0.4];
    let p2: RawBox = [0.11, 0.1, 0.4, 0.41];
    let preds = vec![
        Detection::bloom(to_box(g), 0.8).unwrap(),
        Detection::bloom(to_box(p2), 0.6).unwrap(),
    ];
    let m = match_image(&preds, &[to_box(g)], 0.55);
    assert_eq!(m.counts.tp, optimal_hits(&[g, p2], &[g], 0.55));
    assert_eq!((m.counts.tp, m.counts.fp, m.counts.fn_), (1, 1, 0));
}

fn random_corpus(rng: &mut impl Rng) -> (Predictions, AnnotationSet, Vec<ImageCase>) {
    let images = rng.gen_range(1..=4);
    let mut preds = Predictions::new();
    let mut gts = AnnotationSet::new();
    let mut raw = Vec::new();
    let mut budget_p = 20usize;
    let mut budget_g = 10usize;
    for i in 0..images {
        let ng = rng.gen_range(0..=budget_g.min(4));
        budget_g -= ng;
        let g: Vec<RawBox> = (0..ng).map(|_| random_box(rng, 0.1)).collect();
        let np = rng.gen_range(0..=budget_p.min(6));
        budget_p -= np;
        let p: Vec<(f64, RawBox)> = (0..np)
            .map(|_| {
                // scores on a coarse grid so ties occur
                let score = f64::from(rng.gen_range(1..=10u8)) / 10.0;
                let b = if !g.is_empty() && rng.gen_bool(0.6) {
                    let t = g[rng.gen_range(0..g.len())];
                    let j = |v: f64, rng: &mut dyn rand::RngCore| (v + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0);
                    let mut b = [j(t[0], rng), j(t[1], rng), j(t[2], rng), j(t[3], rng)];
                    if b[0] >= b[2] || b[1] >= b[3] {
                        b = t;
                    }
                    b
                } else {
                    random_box(rng, 0.1)
                };
                (score, b)
            })
            .collect();
        let name = format!("img{i}.jpg");
        gts.insert(name.clone(), g.iter().map(|&b| to_box(b)).collect())
            .unwrap();
        preds.insert(
            name,
            p.iter()
                .map(|&(s, b)| Detection::bloom(to_box(b), s).unwrap())
                .collect(),
        );
        raw.push((p, g));
    }
    (preds, gts, raw)
}

#[test]
fn ap_equals_threshold_enumeration() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(42);
    let mut checked = 0;
    while checked < 200 {
        let (preds, gts, raw) = random_corpus(&mut rng);
        if gts.total_boxes() == 0 {
            continue;
        }
        let ap = average_precision(&preds, &gts, 0.55).unwrap();
        let oracle = threshold_enumeration_ap(&raw, 0.55);
        assert_eq!(ap, oracle, "corpus {checked}");
        checked += 1;
    }
}

#[test]
fn ap_toy_corpus_five_predictions_three_truths() {
    let g: Vec<RawBox> = vec![[0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7], [0.3, 0.0, 0.5, 0.2]];
    let p: Vec<(f64, RawBox)> = vec![
        (0.9, [0.0, 0.0, 0.2, 0.2]),
        (0.8, [0.8, 0.8, 0.9, 0.9]),
        (0.7, [0.5, 0.5, 0.7, 0.69]),
        (0.6, [0.01, 0.0, 0.2, 0.2]),
        (0.5, [0.3, 0.0, 0.5, 0.21]),
    ];
    let mut gts = AnnotationSet::new();
    gts.insert("t.jpg", g.iter().map(|&b| to_box(b)).collect()).unwrap();
    let mut preds = Predictions::new();
    preds.insert(
        "t.jpg".into(),
        p.iter()
            .map(|&(s, b)| Detection::bloom(to_box(b), s).unwrap())
            .collect(),
    );
    let oracle = threshold_enumeration_ap(&[(p, g)], 0.55);
    // hits at ranks 1, 3, 5: 1/3*1 + 1/3*(2/3) + 1/3*(3/5)
    assert!((oracle - (1.0 / 3.0 + 2.0 / 9.0 + 1.0 / 5.0)).abs() < 1e-12);
    assert_eq!(average_precision(&preds, &gts, 0.55).unwrap(), oracle);
}

#[test]
fn golden_corpus_report() {
    let dir = fixtures().join("corpus");
    let out = tempfile::NamedTempFile::new().unwrap();
    let report = evaluate_corpus(&dir.join("preds"), &dir.join("gt.json"), 0.55, true, Some(out.path())).unwrap();
    let golden: EvalReport = serde_json::from_slice(&std::fs::read(dir.join("golden_report.json")).unwrap()).unwrap();
    assert_eq!(report.per_image, golden.per_image);
    assert_eq!((report.tp, report.fp, report.fn_), (golden.tp, golden.fp, golden.fn_));
    for (got, want) in [
        (report.precision, golden.precision),
        (report.recall, golden.recall),
        (report.f1, golden.f1),
        (report.ap, golden.ap),
        (report.map, golden.map),
    ] {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    let written: EvalReport = serde_json::from_slice(&std::fs::read(out.path()).unwrap()).unwrap();
    assert_eq!(written, report);
}

#[test]
fn identical_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let gts = AnnotationSet::load(&fixtures().join("corpus/gt.json")).unwrap();
    for (name, boxes) in gts.iter() {
        let resp = bloompipe_core::DetectionResponse {
            filename: name.to_string(),
            boxes: boxes.iter().map(|b| Detection::bloom(*b, 1.0).unwrap()).collect(),
        };
        std::fs::write(dir.path().join(format!("{name}.json")), resp.to_json()).unwrap();
    }
    let r = evaluate_corpus(dir.path(), &fixtures().join("corpus/gt.json"), 0.55, true, None).unwrap();
    assert_eq!((r.precision, r.recall, r.f1, r.ap), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn empty_prediction_dir_is_all_misses() {
    let dir = tempfile::tempdir().unwrap();
    let gt = fixtures().join("corpus/gt.json");
    let total = AnnotationSet::load(&gt).unwrap().total_boxes();
    let r = evaluate_corpus(dir.path(), &gt, 0.55, true, None).unwrap();
    assert_eq!(r.recall, 0.0);
    assert_eq!(r.fn_, total);
    assert_eq!(r.tp, 0);
}

#[test]
fn malformed_prediction_file_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.json"), "{\"filename\": \"a\",\n \"boxes\": [1]}").unwrap();
    let err = evaluate_corpus(dir.path(), &fixtures().join("corpus/gt.json"), 0.55, false, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("x.json:2:"), "{msg}");
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((arb_box(), 0.0..=1.0f64), 0..8)
        .prop_map(|v| v.into_iter().map(|(b, s)| Detection::bloom(b, s).unwrap()).collect())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn counts_are_consistent(preds in arb_dets(), gts in prop::collection::vec(arb_box(), 0..6), t in 0.05..=1.0f64) {
        let m = match_image(&preds, &gts, t);
        prop_assert_eq!(m.counts.tp + m.counts.fn_, gts.len());
        prop_assert_eq!(m.counts.tp + m.counts.fp, preds.len());
    }

    #[test]
    fn raising_threshold_never_adds_hits(preds in arb_dets(), gts in prop::collection::vec(arb_box(), 0..6), t1 in 0.05..=1.0f64, t2 in 0.05..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut set = AnnotationSet::new();
        set.insert("a", gts).unwrap();
        let mut p = Predictions::new();
        p.insert("a".into(), preds);
        let a = match_detections(&p, &set, lo, true).unwrap().totals.tp;
        let b = match_detections(&p, &set, hi, true).unwrap().totals.tp;
        prop_assert!(b <= a);
    }

    #[test]
    fn f1_between_precision_and_recall(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let r = precision_recall_f1(tp, fp, fn_);
        if r.precision + r.recall > 0.0 {
            prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
            prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
        }
        prop_assert_eq!(r.f1, f1_score(r.precision, r.recall));
    }
}
