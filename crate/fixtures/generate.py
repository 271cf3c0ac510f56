#!/usr/bin/env python3
"""Regenerates the bundled test fixtures.

Outputs (all deterministic for a fixed seed):
  images/field_530x144.png   synthetic canopy image with a few white blooms
  images/two_squares.png     64x48 black image with two planted 10x10 white squares
  images/two_squares.json    planted square geometry (pixel rectangles)
  mock_detections.json       fixture table for the mock detector backend
  corpus/gt.json             ground truth for 20 images
  corpus/preds/*.json        one detection file per image
  corpus/golden_report.json  expected report, computed here by brute force

The golden metrics are computed independently of the Rust implementation:
counts by greedy score-ordered matching, AP by enumerating every score
threshold, re-matching the surviving predictions from scratch, and
integrating the interpolated precision/recall curve.
"""

import json
import os
import random

from PIL import Image

HERE = os.path.dirname(os.path.abspath(__file__))
IOU = 0.55


def field_image(rng):
    w, h = 530, 144
    img = Image.new("RGB", (w, h))
    px = img.load()
    # smooth-ish canopy texture: sum of a few sinusoid-like bands plus noise
    import math

    for y in range(h):
        for x in range(w):
            v = (
                math.sin(x * 0.05 + y * 0.02) * 25
                + math.sin(x * 0.013 - y * 0.07) * 20
                + rng.gauss(0, 12)
            )
            g = int(max(0, min(255, 110 + v)))
            r = int(max(0, min(255, 60 + v * 0.6 + rng.gauss(0, 6))))
            b = int(max(0, min(255, 40 + v * 0.3 + rng.gauss(0, 6))))
            px[x, y] = (r, g, b)
    blooms = []
    for _ in range(4):
        cx, cy, rad = rng.randint(30, w - 30), rng.randint(20, h - 20), rng.randint(5, 9)
        for y in range(cy - rad, cy + rad + 1):
            for x in range(cx - rad, cx + rad + 1):
                if (x - cx) ** 2 + (y - cy) ** 2 <= rad * rad:
                    c = 235 + rng.randint(0, 20)
                    px[x, y] = (c, c, min(255, c - rng.randint(0, 8)))
        blooms.append((cx - rad, cy - rad, cx + rad + 1, cy + rad + 1))
    return img, blooms


def two_squares():
    w, h = 64, 48
    img = Image.new("RGB", (w, h), (0, 0, 0))
    squares = [(8, 6, 18, 16), (40, 30, 50, 40)]
    px = img.load()
    for x0, y0, x1, y1 in squares:
        for y in range(y0, y1):
            for x in range(x0, x1):
                px[x, y] = (255, 255, 255)
    return img, squares, (w, h)


def norm(rect, w, h):
    x0, y0, x1, y1 = rect
    return {"topX": x0 / w, "topY": y0 / h, "bottomX": x1 / w, "bottomY": y1 / h}


# ---- brute-force metric oracle ------------------------------------------


def iou(a, b):
    w = min(a["bottomX"], b["bottomX"]) - max(a["topX"], b["topX"])
    h = min(a["bottomY"], b["bottomY"]) - max(a["topY"], b["topY"])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    area = lambda r: (r["bottomX"] - r["topX"]) * (r["bottomY"] - r["topY"])
    union = area(a) + area(b) - inter
    return min(1.0, max(0.0, inter / union))


def greedy(preds, gts):
    """preds: list of (score, box) in input order; returns list of matched flags."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])  # stable
    taken = [False] * len(gts)
    hit = [False] * len(preds)
    for i in order:
        best, best_v = None, None
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            v = iou(preds[i][1], gt)
            if v >= IOU and (best_v is None or v > best_v):
                best, best_v = g, v
        if best is not None:
            taken[best] = True
            hit[i] = True
    return hit


def brute_ap(preds_by_img, gt_by_img):
    total = sum(len(v) for v in gt_by_img.values())
    scores = sorted({s for p in preds_by_img.values() for s, _ in p}, reverse=True)
    points = []
    for t in scores:
        tp = n = 0
        for img, p in preds_by_img.items():
            kept = [d for d in p if d[0] >= t]
            tp += sum(greedy(kept, gt_by_img.get(img, [])))
            n += len(kept)
        points.append((tp / total, tp / n))
    ap, prev = 0.0, 0.0
    for r, _ in points:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in points if rr >= r)
            prev = r
    return ap


def corpus(rng):
    gt_images, pred_files = [], []
    for i in range(20):
        name = f"bloom_{i:03d}.jpg"
        gts = []
        for _ in range(rng.randint(0, 4)):
            x0, y0 = rng.uniform(0, 0.8), rng.uniform(0, 0.8)
            w, h = rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2)
            gts.append({"topX": round(x0, 4), "topY": round(y0, 4),
                        "bottomX": round(x0 + w, 4), "bottomY": round(y0 + h, 4)})
        preds = []
        for g in gts:
            if rng.random() < 0.15:
                continue  # missed
            j = lambda v, s: round(min(1.0, max(0.0, v + rng.gauss(0, s))), 4)
            s = 0.01 if rng.random() < 0.8 else 0.05
            b = {"topX": j(g["topX"], s), "topY": j(g["topY"], s),
                 "bottomX": j(g["bottomX"], s), "bottomY": j(g["bottomY"], s)}
            if b["topX"] < b["bottomX"] and b["topY"] < b["bottomY"]:
                preds.append({"box": b, "label": "bloom", "score": round(rng.uniform(0.3, 1.0), 2)})
        for _ in range(rng.randint(0, 2)):
            x0, y0 = rng.uniform(0, 0.85), rng.uniform(0, 0.85)
            b = {"topX": round(x0, 4), "topY": round(y0, 4),
                 "bottomX": round(x0 + 0.1, 4), "bottomY": round(y0 + 0.1, 4)}
            preds.append({"box": b, "label": "bloom", "score": round(rng.uniform(0.05, 0.9), 2)})
        gt_images.append({"filename": name, "boxes": gts})
        pred_files.append({"filename": name, "boxes": preds})

    gt_by = {g["filename"]: g["boxes"] for g in gt_images}
    pr_by = {p["filename"]: [(d["score"], d["box"]) for d in p["boxes"]] for p in pred_files}
    per_image = {}
    tp = fp = fn = 0
    for name in sorted(gt_by):
        hit = greedy(pr_by.get(name, []), gt_by[name])
        t = sum(hit)
        c = {"tp": t, "fp": len(hit) - t, "fn": len(gt_by[name]) - t}
        per_image[name] = c
        tp, fp, fn = tp + c["tp"], fp + c["fp"], fn + c["fn"]
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    ap = brute_ap(pr_by, gt_by)
    golden = {"iou_threshold": IOU, "tp": tp, "fp": fp, "fn": fn, "precision": precision,
              "recall": recall, "f1": f1, "ap": ap, "map": ap, "per_image": per_image}
    return gt_images, pred_files, golden


def main():
    rng = random.Random(20210714)
    os.makedirs(os.path.join(HERE, "images"), exist_ok=True)
    img, blooms = field_image(rng)
    img.save(os.path.join(HERE, "images", "field_530x144.png"))

    sq, squares, (w, h) = two_squares()
    sq.save(os.path.join(HERE, "images", "two_squares.png"))
    with open(os.path.join(HERE, "images", "two_squares.json"), "w") as f:
        json.dump({"width": w, "height": h, "squares": [list(s) for s in squares]}, f, indent=2)

    table = {
        "field_530x144.png": [
            {"box": norm(b, 530, 144), "label": "bloom", "score": round(0.9 - 0.1 * i, 2)}
            for i, b in enumerate(blooms)
        ],
        "two_squares.png": [
            {"box": norm(s, w, h), "label": "bloom", "score": 0.99} for s in squares
        ],
    }
    with open(os.path.join(HERE, "mock_detections.json"), "w") as f:
        json.dump(table, f, indent=2)

    gt_images, pred_files, golden = corpus(rng)
    cdir = os.path.join(HERE, "corpus")
    os.makedirs(os.path.join(cdir, "preds"), exist_ok=True)
    with open(os.path.join(cdir, "gt.json"), "w") as f:
        json.dump({"images": gt_images}, f, indent=2)
    for p in pred_files:
        with open(os.path.join(cdir, "preds", p["filename"].replace(".jpg", ".json")), "w") as f:
            json.dump(p, f, indent=2)
    with open(os.path.join(cdir, "golden_report.json"), "w") as f:
        json.dump(golden, f, indent=2)


if __name__ == "__main__":
    main()
