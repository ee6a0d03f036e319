"""Independent brute-force evaluators used to cross-check the library.

Everything here recomputes from first principles: masks are decoded with a
local run-length decoder and all overlaps are counted per pixel with numpy
boolean arrays. Nothing is shared with the metric implementations under test.
"""

from __future__ import annotations

import math

import numpy as np


def decode_runs(runs, height, width):
    """Local alternating-run decoder (starts with a background run)."""
    flat = []
    val = 0
    for r in runs:
        flat.extend([val] * r)
        val = 1 - val
    return np.array(flat, dtype=bool).reshape(height, width)


def response_to_pixel_frames(response):
    """ResponseSet -> {frame: bool array} via the local decoder."""
    frames = {}
    for occ in response.occurrences:
        for offset, mask in enumerate(occ.masks):
            frames[occ.start_frame + offset] = decode_runs(mask.runs, mask.height, mask.width)
    return frames


def pixel_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


def brute_video_scores(gt_response, pred_response):
    """Per-video stIoU, tIoU, recovery, success, mean gt area from raw pixels."""
    gt = response_to_pixel_frames(gt_response)
    pred = response_to_pixel_frames(pred_response)

    inter = 0
    for t in set(gt) | set(pred):
        if t in gt and t in pred:
            inter += int(np.logical_and(gt[t], pred[t]).sum())
    gt_sum = sum(int(m.sum()) for m in gt.values())
    pred_sum = sum(int(m.sum()) for m in pred.values())
    denom = gt_sum + pred_sum - inter
    st = inter / denom if denom else 1.0

    union_frames = set(gt) | set(pred)
    t = len(set(gt) & set(pred)) / len(union_frames) if union_frames else 1.0

    if gt:
        hits = 0
        for f, gmask in gt.items():
            if f in pred and pixel_iou(pred[f], gmask) > 0.5:
                hits += 1
        rec = 100.0 * hits / len(gt)
    else:
        rec = 100.0

    area = sum(int(m.sum()) for m in gt.values()) / len(gt) if gt else 0.0
    return {
        "st_iou": st,
        "t_iou": t,
        "recovery": rec,
        "success": st > 0.2,
        "mean_gt_area": area,
    }


def brute_aggregate(per_video: list[dict]) -> dict:
    """Dataset means (percentages) from per-video score dicts."""
    n = len(per_video)

    def mean(key):
        return math.fsum(v[key] for v in per_video) / n

    def gated(key, tau):
        return 100.0 * math.fsum(v[key] if v[key] >= tau else 0.0 for v in per_video) / n

    return {
        "stAP": 100.0 * mean("st_iou"),
        "stAP50": gated("st_iou", 0.5),
        "stAP75": gated("st_iou", 0.75),
        "tAP": 100.0 * mean("t_iou"),
        "tAP50": gated("t_iou", 0.5),
        "tAP75": gated("t_iou", 0.75),
        "Rec": mean("recovery"),
        "Succ": 100.0 * sum(1 for v in per_video if v["success"]) / n,
    }


def brute_report(gt_by_id: dict, pred_by_id: dict, bounds=(3.6e3, 4.0e4)) -> dict:
    """Full report (overall + subsets) from the brute-force path."""
    per_video = {vid: brute_video_scores(gt, pred_by_id[vid]) for vid, gt in gt_by_id.items()}
    subsets = {"Small": [], "Medium": [], "Large": []}
    for scores in per_video.values():
        area = scores["mean_gt_area"]
        if area < bounds[0]:
            subsets["Small"].append(scores)
        elif area < bounds[1]:
            subsets["Medium"].append(scores)
        else:
            subsets["Large"].append(scores)
    return {
        "overall": brute_aggregate(list(per_video.values())),
        "per_subset": {k: brute_aggregate(v) for k, v in subsets.items() if v},
        "video_counts": {k: len(v) for k, v in subsets.items()},
    }
