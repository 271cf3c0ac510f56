//! Detection-quality metrics.
//!
//! Matching is greedy and one-to-one: predictions of an image are visited in
//! descending score order (input order breaks score ties) and each claims the
//! unmatched ground-truth box with the highest IoU at or above the threshold,
//! preferring the lowest ground-truth index on IoU ties.
//!
//! Average precision uses all-point interpolation over the precision/recall
//! points obtained at every distinct score threshold.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::{BoundingBox, Detection, DetectionResponse};

/// IoU at or above which a prediction counts as a hit.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.55;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("iou threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("prediction for {0} which has no ground-truth entry")]
    UnknownImage(String),
    #[error("ground truth contains no boxes")]
    EmptyGroundTruth,
    #[error("duplicate ground-truth entry for {0}")]
    DuplicateImage(String),
    #[error("{}:{line}:{column}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn parse_error(file: &Path, err: serde_json::Error) -> EvalError {
    EvalError::Parse {
        file: file.to_path_buf(),
        line: err.line(),
        column: err.column(),
        message: err.to_string(),
    }
}

fn check_threshold(iou_threshold: f64) -> Result<(), EvalError> {
    if iou_threshold > 0.0 && iou_threshold <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::BadThreshold(iou_threshold))
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.bottom_x().min(b.bottom_x()) - a.top_x().max(b.top_x());
    let h = a.bottom_y().min(b.bottom_y()) - a.top_y().max(b.top_y());
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Ground truth: image filename to its boxes (single class).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    images: BTreeMap<String, Vec<BoundingBox>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<AnnotatedImage>,
}

#[derive(Serialize, Deserialize)]
struct AnnotatedImage {
    filename: String,
    boxes: Vec<BoundingBox>,
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, filename: impl Into<String>, boxes: Vec<BoundingBox>) -> Result<(), EvalError> {
        let filename = filename.into();
        if self.images.contains_key(&filename) {
            return Err(EvalError::DuplicateImage(filename));
        }
        self.images.insert(filename, boxes);
        Ok(())
    }

    pub fn get(&self, filename: &str) -> Option<&[BoundingBox]> {
        self.images.get(filename).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[BoundingBox])> {
        self.images.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn total_boxes(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn from_json(bytes: &[u8], origin: &Path) -> Result<Self, EvalError> {
        let file: AnnotationFile = serde_json::from_slice(bytes).map_err(|e| parse_error(origin, e))?;
        let mut set = Self::new();
        for img in file.images {
            set.insert(img.filename, img.boxes)?;
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let bytes = fs::read(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&bytes, path)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let file = AnnotationFile {
            images: self
                .images
                .iter()
                .map(|(f, b)| AnnotatedImage {
                    filename: f.clone(),
                    boxes: b.clone(),
                })
                .collect(),
        };
        serde_json::to_vec_pretty(&file).expect("annotations serialize")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

/// Matching outcome for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    pub counts: Counts,
    /// For each prediction (input order), the ground-truth index it claimed.
    pub assigned: Vec<Option<usize>>,
}

/// Predictions in descending-score order; ties keep input order.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy one-to-one matching within a single image.
pub fn match_image(preds: &[Detection], gts: &[BoundingBox], iou_threshold: f64) -> ImageMatch {
    let mut taken = vec![false; gts.len()];
    let mut assigned = vec![None; preds.len()];
    for i in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&preds[i].bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            assigned[i] = Some(g);
        }
    }
    let tp = assigned.iter().filter(|a| a.is_some()).count();
    ImageMatch {
        counts: Counts {
            tp,
            fp: preds.len() - tp,
            fn_: gts.len() - tp,
        },
        assigned,
    }
}

/// Predictions keyed by image filename.
pub type Predictions = BTreeMap<String, Vec<Detection>>;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMatch {
    pub totals: Counts,
    pub per_image: BTreeMap<String, ImageMatch>,
}

/// Matches every image of the corpus. Ground-truth images without predictions
/// contribute false negatives; predictions for images absent from the ground
/// truth are false positives, or an error when `strict`.
pub fn match_detections(
    preds: &Predictions,
    gts: &AnnotationSet,
    iou_threshold: f64,
    strict: bool,
) -> Result<CorpusMatch, EvalError> {
    check_threshold(iou_threshold)?;
    if strict {
        if let Some(unknown) = preds.keys().find(|f| gts.get(f).is_none()) {
            return Err(EvalError::UnknownImage(unknown.clone()));
        }
    }
    let mut per_image = BTreeMap::new();
    let mut totals = Counts::default();
    let empty: Vec<Detection> = Vec::new();
    for (file, boxes) in gts.iter() {
        let p = preds.get(file).unwrap_or(&empty);
        let m = match_image(p, boxes, iou_threshold);
        totals += m.counts;
        per_image.insert(file.to_string(), m);
    }
    for (file, p) in preds {
        if gts.get(file).is_none() {
            let m = match_image(p, &[], iou_threshold);
            totals += m.counts;
            per_image.insert(file.clone(), m);
        }
    }
    Ok(CorpusMatch { totals, per_image })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 from raw counts.
///
/// Empty denominators give precision 1 (no predictions) and recall 1 (no
/// ground truth), so the all-zero case yields `(1, 1, 1)`. F1 is 0 whenever
/// precision and recall are both 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> PrecisionRecall {
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    PrecisionRecall {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// All-point interpolated average precision over the whole corpus.
pub fn average_precision(preds: &Predictions, gts: &AnnotationSet, iou_threshold: f64) -> Result<f64, EvalError> {
    check_threshold(iou_threshold)?;
    let total_gt = gts.total_boxes();
    if total_gt == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (file, p) in preds {
        let boxes = gts.get(file).unwrap_or(&[]);
        let m = match_image(p, boxes, iou_threshold);
        scored.extend(p.iter().zip(&m.assigned).map(|(d, a)| (d.score, a.is_some())));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    // One (recall, precision) point per distinct score threshold.
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let score = scored[i].0;
        while i < scored.len() && scored[i].0 == score {
            tp += usize::from(scored[i].1);
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / seen as f64));
    }

    // Precision envelope: best precision at this recall or any higher one.
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for k in (0..points.len()).rev() {
        best = best.max(points[k].1);
        envelope[k] = best;
    }

    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope[k];
            prev_recall = recall;
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub map: f64,
    pub per_image: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn compute(
        preds: &Predictions,
        gts: &AnnotationSet,
        iou_threshold: f64,
        strict: bool,
    ) -> Result<Self, EvalError> {
        let matched = match_detections(preds, gts, iou_threshold, strict)?;
        let ap = average_precision(preds, gts, iou_threshold)?;
        let t = matched.totals;
        let prf = precision_recall_f1(t.tp, t.fp, t.fn_);
        Ok(Self {
            iou_threshold,
            tp: t.tp,
            fp: t.fp,
            fn_: t.fn_,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            ap,
            // single class: the mean over classes is the one AP
            map: ap,
            per_image: matched.per_image.into_iter().map(|(k, m)| (k, m.counts)).collect(),
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Reads every `*.json` detection file in `pred_dir` (sorted by name).
/// Files naming the same image are merged.
pub fn load_predictions(pred_dir: &Path) -> Result<Predictions, EvalError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    let mut files: Vec<PathBuf> = fs::read_dir(pred_dir)
        .map_err(io_err(pred_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut preds = Predictions::new();
    for file in files {
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        let resp: DetectionResponse = serde_json::from_slice(&bytes).map_err(|e| parse_error(&file, e))?;
        preds.entry(resp.filename).or_default().extend(resp.boxes);
    }
    Ok(preds)
}

/// Evaluates a directory of detection files against an annotation file and,
/// when `out` is given, writes the report there as JSON.
pub fn evaluate_corpus(
    pred_dir: &Path,
    gt_file: &Path,
    iou_threshold: f64,
    strict: bool,
    out: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    let gts = AnnotationSet::load(gt_file)?;
    let preds = load_predictions(pred_dir)?;
    let report = EvalReport::compute(&preds, &gts, iou_threshold, strict)?;
    if let Some(out) = out {
        fs::write(out, report.to_json_pretty()).map_err(|source| EvalError::Io {
            path: out.to_path_buf(),
            source,
        })?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn det(b: BoundingBox, score: f64) -> Detection {
        Detection::bloom(b, score).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(0.5, 0.5, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &bb(0.6, 0.0, 0.9, 0.2)), 0.0);
        // intersection 0.0625, union 0.4375
        let v = iou(&a, &bb(0.25, 0.25, 0.75, 0.75));
        assert!((v - 1.0 / 7.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn exact_hit_is_tp() {
        let g = bb(0.1, 0.1, 0.4, 0.4);
        let m = match_image(&[det(g, 0.9)], &[g], 0.55);
        assert_eq!(m.counts, Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn duplicate_predictions_match_once() {
        let g = bb(0.1, 0.1, 0.4, 0.4);
        let m = match_image(&[det(g, 0.7), det(bb(0.1, 0.1, 0.41, 0.4), 0.9)], &[g], 0.55);
        assert_eq!(m.counts, Counts { tp: 1, fp: 1, fn_: 0 });
        // the higher-scored prediction wins
        assert_eq!(m.assigned, vec![None, Some(0)]);
    }

    #[test]
    fn below_threshold_is_fp_and_fn() {
        // iou exactly 0.5
        let g = bb(0.0, 0.0, 1.0, 1.0);
        let p = bb(0.0, 0.0, 0.5, 1.0);
        assert_eq!(iou(&g, &p), 0.5);
        let m = match_image(&[det(p, 0.9)], &[g], 0.55);
        assert_eq!(m.counts, Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn iou_ties_prefer_lowest_gt_index() {
        let g0 = bb(0.0, 0.0, 0.4, 0.4);
        let g1 = bb(0.0, 0.0, 0.4, 0.4);
        let m = match_image(&[det(g0, 0.5)], &[g0, g1], 0.55);
        assert_eq!(m.assigned, vec![Some(0)]);
    }

    #[test]
    fn prf_examples() {
        let r = precision_recall_f1(84, 16, 0);
        assert_eq!(r.precision, 0.84);
        assert_eq!(r.recall, 1.0);
        assert_eq!(
            precision_recall_f1(0, 0, 0),
            PrecisionRecall {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        let z = precision_recall_f1(0, 5, 5);
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
        assert!((f1_score(0.84, 0.99) - 0.908_852_459_016_393_4).abs() < 1e-12);
    }

    #[test]
    fn ap_trivial_cases() {
        let g = bb(0.1, 0.1, 0.3, 0.3);
        let mut gts = AnnotationSet::new();
        gts.insert("a.jpg", vec![g]).unwrap();
        let mut preds = Predictions::new();
        preds.insert("a.jpg".into(), vec![det(g, 0.8)]);
        assert_eq!(average_precision(&preds, &gts, 0.55).unwrap(), 1.0);

        preds.insert(
            "a.jpg".into(),
            vec![det(bb(0.6, 0.6, 0.9, 0.9), 0.8), det(bb(0.5, 0.0, 0.7, 0.2), 0.4)],
        );
        assert_eq!(average_precision(&preds, &gts, 0.55).unwrap(), 0.0);

        assert!(matches!(
            average_precision(&preds, &AnnotationSet::new(), 0.55),
            Err(EvalError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn strict_mode_rejects_unknown_images() {
        let mut gts = AnnotationSet::new();
        gts.insert("a.jpg", vec![bb(0.1, 0.1, 0.3, 0.3)]).unwrap();
        let mut preds = Predictions::new();
        preds.insert("zzz.jpg".into(), vec![det(bb(0.1, 0.1, 0.3, 0.3), 0.5)]);
        assert!(
            matches!(match_detections(&preds, &gts, 0.55, true), Err(EvalError::UnknownImage(f)) if f == "zzz.jpg")
        );
        let lenient = match_detections(&preds, &gts, 0.55, false).unwrap();
        assert_eq!(lenient.totals, Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn threshold_bounds() {
        let gts = AnnotationSet::new();
        let preds = Predictions::new();
        assert!(matches!(
            match_detections(&preds, &gts, 0.0, false),
            Err(EvalError::BadThreshold(_))
        ));
        assert!(matches!(
            match_detections(&preds, &gts, 1.5, false),
            Err(EvalError::BadThreshold(_))
        ));
        assert!(match_detections(&preds, &gts, 1.0, false).is_ok());
    }

    #[test]
    fn duplicate_annotation_rejected() {
        let json = br#"{"images":[{"filename":"a","boxes":[]},{"filename":"a","boxes":[]}]}"#;
        assert!(matches!(
            AnnotationSet::from_json(json, Path::new("gt.json")),
            Err(EvalError::DuplicateImage(_))
        ));
    }

    #[test]
    fn parse_error_carries_position() {
        let err = AnnotationSet::from_json(b"{\"images\": [\n  {\"filename\": 3}]}", Path::new("gt.json")).unwrap_err();
        match err {
            EvalError::Parse { line, file, .. } => {
                assert_eq!(line, 2);
                assert_eq!(file, PathBuf::from("gt.json"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
