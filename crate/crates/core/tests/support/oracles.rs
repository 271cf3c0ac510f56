//! Brute-force reference computations for the evaluation metrics.
//!
//! Nothing here calls into the library's matching or AP code; boxes are
//! handled as plain `[x0, y0, x1, y1]` arrays.

#![allow(dead_code)]

pub type RawBox = [f64; 4];

/// Scored predictions and ground truth for one image.
pub type ImageCase = (Vec<(f64, RawBox)>, Vec<RawBox>);

/// Number of grid-cell centers `(i + 0.5) / n` inside `[lo, hi)`.
fn cells_in(lo: f64, hi: f64, n: usize) -> usize {
    (0..n)
        .filter(|&i| {
            let c = (i as f64 + 0.5) / n as f64;
            c >= lo && c < hi
        })
        .count()
}

/// IoU by counting cells of an `n x n` grid whose centers fall inside each box.
pub fn raster_iou(a: RawBox, b: RawBox, n: usize) -> f64 {
    let area = |r: RawBox| cells_in(r[0], r[2], n) * cells_in(r[1], r[3], n);
    let ix = cells_in(a[0].max(b[0]), a[2].min(b[2]), n);
    let iy = cells_in(a[1].max(b[1]), a[3].min(b[3]), n);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn exact_iou(a: RawBox, b: RawBox) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy score-ordered matching, returning the number of hits.
pub fn greedy_hits(preds: &[(f64, RawBox)], gts: &[RawBox], threshold: f64) -> usize {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&x, &y| preds[y].0.partial_cmp(&preds[x].0).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut hits = 0;
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = exact_iou(preds[i].1, *gt);
            if !taken[g] && v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            hits += 1;
        }
    }
    hits
}

/// Largest one-to-one assignment with IoU >= threshold, by exhaustive search.
pub fn optimal_hits(preds: &[RawBox], gts: &[RawBox], threshold: f64) -> usize {
    fn go(i: usize, preds: &[RawBox], gts: &[RawBox], used: &mut Vec<bool>, t: f64) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut best = go(i + 1, preds, gts, used, t);
        for g in 0..gts.len() {
            if !used[g] && exact_iou(preds[i], gts[g]) >= t {
                used[g] = true;
                best = best.max(1 + go(i + 1, preds, gts, used, t));
                used[g] = false;
            }
        }
        best
    }
    go(0, preds, gts, &mut vec![false; gts.len()], threshold)
}

/// AP by enumerating every distinct score as a cutoff, re-matching the kept
/// predictions from scratch, then integrating the interpolated curve.
/// `corpus` is a list of images, each `(predictions, ground truth)`.
pub fn threshold_enumeration_ap(corpus: &[ImageCase], threshold: f64) -> f64 {
    let total: usize = corpus.iter().map(|(_, g)| g.len()).sum();
    let mut cutoffs: Vec<f64> = corpus.iter().flat_map(|(p, _)| p.iter().map(|d| d.0)).collect();
    cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cutoffs.dedup();
    let mut points = Vec::new();
    for &t in &cutoffs {
        let (mut tp, mut n) = (0, 0);
        for (p, g) in corpus {
            let kept: Vec<(f64, RawBox)> = p.iter().copied().filter(|d| d.0 >= t).collect();
            tp += greedy_hits(&kept, g, threshold);
            n += kept.len();
        }
        points.push((tp as f64 / total as f64, tp as f64 / n as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &points {
        if r > prev {
            let best = points
                .iter()
                .filter(|(rr, _)| *rr >= r)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
    }
    ap
}
