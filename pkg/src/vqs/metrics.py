"""Per-video and dataset-level evaluation metrics for visual-query segmentation.

Per video: spatio-temporal IoU over pixels, temporal IoU over annotated frame
sets, Recovery (fraction of annotated gt frames with per-frame mask IoU above
0.5), and Success (stIoU above 0.2). Dataset-level scores are plain means over
videos, optionally gated by an IoU-threshold indicator, reported as
percentages. Videos are additionally bucketed into Small / Medium / Large
subsets by mean ground-truth mask area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .masks import (
    MaskDimensionError,
    MaskError,
    ResponseSet,
    mask_intersection_area,
    mask_iou,
)

SUBSET_SMALL = "Small"
SUBSET_MEDIUM = "Medium"
SUBSET_LARGE = "Large"
SUBSET_NAMES = (SUBSET_SMALL, SUBSET_MEDIUM, SUBSET_LARGE)

# Mean-gt-area boundaries (pixels) between Small/Medium and Medium/Large.
DEFAULT_SUBSET_BOUNDS = (3.6e3, 4.0e4)

RECOVERY_IOU_THRESHOLD = 0.5
SUCCESS_STIOU_THRESHOLD = 0.2
AP_THRESHOLDS = (0.5, 0.75)


class EvaluationError(ValueError):
    """Raised for structurally invalid evaluation inputs."""


class MissingPredictionsError(EvaluationError):
    def __init__(self, missing_ids: Sequence[str]):
        self.missing_ids = tuple(sorted(missing_ids))
        super().__init__(f"missing predictions for video ids: {', '.join(self.missing_ids)}")


@dataclass(frozen=True)
class VideoEval:
    """All per-video scores plus the mean gt area used for subset bucketing."""

    video_id: str
    st_iou: float
    t_iou: float
    recovery: float
    success: bool
    mean_gt_area: float


@dataclass(frozen=True)
class MetricScores:
    """One row of the report; every field is a percentage in [0, 100]."""

    st_ap: float
    st_ap50: float
    st_ap75: float
    t_ap: float
    t_ap50: float
    t_ap75: float
    recovery: float
    success: float

    def as_dict(self, ndigits: int = 2) -> dict[str, float]:
        return {
            "stAP": round(self.st_ap, ndigits),
            "stAP50": round(self.st_ap50, ndigits),
            "stAP75": round(self.st_ap75, ndigits),
            "tAP": round(self.t_ap, ndigits),
            "tAP50": round(self.t_ap50, ndigits),
            "tAP75": round(self.t_ap75, ndigits),
            "Rec": round(self.recovery, ndigits),
            "Succ": round(self.success, ndigits),
        }


@dataclass(frozen=True)
class MetricReport:
    overall: MetricScores
    per_subset: dict[str, MetricScores]
    video_counts: dict[str, int]

    def as_dict(self, ndigits: int = 2) -> dict:
        return {
            "overall": self.overall.as_dict(ndigits),
            "per_subset": {
                name: scores.as_dict(ndigits) for name, scores in self.per_subset.items()
            },
            "video_counts": dict(self.video_counts),
        }

    def csv_rows(self, ndigits: int = 2) -> list[list[str]]:
        header = ["subset", "videos", "stAP", "stAP50", "stAP75", "tAP", "tAP50", "tAP75", "Rec", "Succ"]
        total = sum(self.video_counts.values())

        def row(name: str, count: int, scores: MetricScores) -> list[str]:
            vals = scores.as_dict(ndigits)
            return [name, str(count)] + [f"{vals[k]:.{ndigits}f}" for k in header[2:]]

        rows = [header, row("overall", total, self.overall)]
        for name in SUBSET_NAMES:
            if name in self.per_subset:
                rows.append(row(name, self.video_counts.get(name, 0), self.per_subset[name]))
        return rows


def st_iou(gt: ResponseSet, pred: ResponseSet) -> float:
    """Pixel overlap across the union of annotated frames.

    intersection(t) counts only frames annotated in both responses; the gt and
    pred pixel sums each run over their own annotated frames. Two responses
    with no foreground anywhere agree perfectly -> 1.0.
    """
    gt_masks = gt.frame_masks()
    pred_masks = pred.frame_masks()
    if gt_masks and pred_masks:
        gshape = next(iter(gt_masks.values())).shape
        pshape = next(iter(pred_masks.values())).shape
        if gshape != pshape:
            raise MaskDimensionError(f"gt masks are {gshape}, predictions are {pshape}")
    inter = 0
    gt_sum = sum(m.area() for m in gt_masks.values())
    pred_sum = sum(m.area() for m in pred_masks.values())
    for t, gmask in gt_masks.items():
        pmask = pred_masks.get(t)
        if pmask is not None:
            inter += mask_intersection_area(gmask, pmask)
    denom = gt_sum + pred_sum - inter
    if denom == 0:
        return 1.0
    return inter / denom


def t_iou(gt: ResponseSet, pred: ResponseSet) -> float:
    """Temporal IoU between the annotated frame sets; 1.0 when both are empty."""
    gf = gt.covered_frames()
    pf = pred.covered_frames()
    union = gf | pf
    if not union:
        return 1.0
    return len(gf & pf) / len(union)


def recovery(gt: ResponseSet, pred: ResponseSet) -> float:
    """Percentage of gt-annotated frames with per-frame mask IoU above 0.5.

    A frame with no prediction counts as IoU 0. A video with no gt frames is
    fully recovered by convention (100).
    """
    gt_masks = gt.frame_masks()
    if not gt_masks:
        return 100.0
    pred_masks = pred.frame_masks()
    hits = 0
    for t, gmask in gt_masks.items():
        pmask = pred_masks.get(t)
        if pmask is None:
            continue
        if mask_iou(pmask, gmask) > RECOVERY_IOU_THRESHOLD:
            hits += 1
    return 100.0 * hits / len(gt_masks)


def success(gt: ResponseSet, pred: ResponseSet) -> bool:
    """Per-video success predicate: stIoU strictly above 0.2."""
    return st_iou(gt, pred) > SUCCESS_STIOU_THRESHOLD


def mean_gt_area(gt: ResponseSet) -> float:
    """Mean mask area over all gt-annotated frames; 0 for an empty response."""
    masks = gt.frame_masks()
    if not masks:
        return 0.0
    return sum(m.area() for m in masks.values()) / len(masks)


def evaluate_video(gt: ResponseSet, pred: ResponseSet) -> VideoEval:
    st = st_iou(gt, pred)
    return VideoEval(
        video_id=gt.video_id,
        st_iou=st,
        t_iou=t_iou(gt, pred),
        recovery=recovery(gt, pred),
        success=st > SUCCESS_STIOU_THRESHOLD,
        mean_gt_area=mean_gt_area(gt),
    )


def subset_of(area: float, bounds: tuple[float, float] = DEFAULT_SUBSET_BOUNDS) -> str:
    small_hi, medium_hi = bounds
    if area < small_hi:
        return SUBSET_SMALL
    if area < medium_hi:
        return SUBSET_MEDIUM
    return SUBSET_LARGE


def _scores(evals: Sequence[VideoEval]) -> MetricScores:
    n = len(evals)
    # fsum keeps aggregation exact enough that indicator-gated means can never
    # exceed their ungated counterparts and reordering videos cannot change
    # the result.
    ordered = sorted(evals, key=lambda e: e.video_id)

    def gated_mean(values: Iterable[float], tau: float | None) -> float:
        if tau is None:
            return 100.0 * math.fsum(values) / n
        return 100.0 * math.fsum(v if v >= tau else 0.0 for v in values) / n

    st_vals = [e.st_iou for e in ordered]
    t_vals = [e.t_iou for e in ordered]
    return MetricScores(
        st_ap=gated_mean(st_vals, None),
        st_ap50=gated_mean(st_vals, AP_THRESHOLDS[0]),
        st_ap75=gated_mean(st_vals, AP_THRESHOLDS[1]),
        t_ap=gated_mean(t_vals, None),
        t_ap50=gated_mean(t_vals, AP_THRESHOLDS[0]),
        t_ap75=gated_mean(t_vals, AP_THRESHOLDS[1]),
        recovery=math.fsum(e.recovery for e in ordered) / n,
        success=100.0 * sum(1 for e in ordered if e.success) / n,
    )


def aggregate_metrics(
    evals: Sequence[VideoEval],
    subset_bounds: tuple[float, float] = DEFAULT_SUBSET_BOUNDS,
) -> MetricReport:
    """Aggregate per-video scores into overall and per-subset percentages."""
    if not evals:
        raise EvaluationError("cannot aggregate an empty evaluation set")
    buckets: dict[str, list[VideoEval]] = {name: [] for name in SUBSET_NAMES}
    for e in evals:
        buckets[subset_of(e.mean_gt_area, subset_bounds)].append(e)
    per_subset = {name: _scores(members) for name, members in buckets.items() if members}
    counts = {name: len(members) for name, members in buckets.items()}
    return MetricReport(overall=_scores(evals), per_subset=per_subset, video_counts=counts)


def evaluate_run(
    gt_responses: Mapping[str, ResponseSet],
    pred_responses: Mapping[str, ResponseSet],
    subset_bounds: tuple[float, float] = DEFAULT_SUBSET_BOUNDS,
) -> MetricReport:
    """Evaluate predictions against ground truth over a whole run.

    Every gt video id must have a prediction entry (an empty ResponseSet is a
    valid prediction). Prediction entries without a gt counterpart are ignored.
    """
    missing = [vid for vid in gt_responses if vid not in pred_responses]
    if missing:
        raise MissingPredictionsError(missing)
    evals = []
    for vid in sorted(gt_responses):
        gt = gt_responses[vid]
        pred = pred_responses[vid]
        try:
            evals.append(evaluate_video(gt, pred))
        except MaskError as exc:
            raise EvaluationError(f"video {vid!r}: {exc}") from exc
    return aggregate_metrics(evals, subset_bounds)
