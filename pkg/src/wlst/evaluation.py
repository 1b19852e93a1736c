"""KITTI-style metrics: greedy matching, recall/precision, AP over 40 recall
positions, and the closed-gap ratio."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Optional, Sequence

from .geometry import iou_3d, iou_bev
from .structures import Box3D, PseudoLabel

IouFn = Callable[[Box3D, Box3D], float]

TP, FP, IGNORED = "TP", "FP", "IGNORED"


class Assignment(NamedTuple):
    """Per-prediction outcome (in the order given) and the claimed GT index."""

    outcomes: tuple[str, ...]
    matched_gt: tuple[Optional[int], ...]
    scores: tuple[float, ...]
    num_gt: int
    fn: int

    @property
    def tp(self) -> int:
        return self.outcomes.count(TP)

    @property
    def fp(self) -> int:
        return self.outcomes.count(FP)


def _order(preds: Sequence[PseudoLabel]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


def match_detections(
    preds: Sequence[PseudoLabel],
    gts: Sequence[Box3D],
    iou_fn: IouFn = iou_3d,
    threshold: float = 0.7,
    gt_ignore: Optional[Sequence[bool]] = None,
) -> Assignment:
    """Each prediction, by descending score, claims the unclaimed GT with the
    highest IoU if it reaches ``threshold``. Predictions that only reach an
    ignored GT are neither TP nor FP."""
    ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gts)
    claimed = [False] * len(gts)
    outcomes: list[str] = [FP] * len(preds)
    matched: list[Optional[int]] = [None] * len(preds)
    for i in _order(preds):
        box = preds[i].box
        best, best_iou = None, threshold
        best_ign = None
        for g, gt in enumerate(gts):
            if claimed[g]:
                continue
            iou = iou_fn(box, gt)
            if iou < threshold:
                continue
            if ignore[g]:
                if best_ign is None:
                    best_ign = g
                continue
            if best is None or iou > best_iou:
                best, best_iou = g, iou
        if best is not None:
            claimed[best] = True
            outcomes[i] = TP
            matched[i] = best
        elif best_ign is not None:
            claimed[best_ign] = True
            outcomes[i] = IGNORED
            matched[i] = best_ign
    n_gt = sum(1 for ig in ignore if not ig)
    tp = outcomes.count(TP)
    return Assignment(tuple(outcomes), tuple(matched), tuple(p.score for p in preds), n_gt, n_gt - tp)


def precision_recall(assignments: Assignment | Sequence[Assignment]) -> tuple[float, float]:
    """Precision is 1 with no predictions; recall is 1 with no ground truth."""
    if isinstance(assignments, Assignment):
        assignments = [assignments]
    tp = sum(a.tp for a in assignments)
    fp = sum(a.fp for a in assignments)
    fn = sum(a.fn for a in assignments)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def pr_curve(assignments: Sequence[Assignment]) -> list[tuple[float, float, float]]:
    """(score, precision, recall) after each prediction of the global score sweep."""
    rows = []
    for a in assignments:
        for outcome, score in zip(a.outcomes, a.scores):
            if outcome != IGNORED:
                rows.append((score, outcome == TP))
    rows.sort(key=lambda r: -r[0])
    n_gt = sum(a.num_gt for a in assignments)
    curve = []
    tp = 0
    for i, (score, is_tp) in enumerate(rows, start=1):
        tp += is_tp
        curve.append((score, tp / i, tp / n_gt if n_gt else 0.0))
    return curve


def ap40_from_assignments(assignments: Sequence[Assignment]) -> float:
    curve = pr_curve(assignments)
    if not curve:
        return 0.0
    # Max precision at recall >= r, via a suffix maximum over the sweep.
    best = [0.0] * len(curve)
    running = 0.0
    for i in range(len(curve) - 1, -1, -1):
        running = max(running, curve[i][1])
        best[i] = running
    total = 0.0
    j = 0
    for k in range(1, 41):
        r = k / 40.0
        while j < len(curve) and curve[j][2] < r - 1e-12:
            j += 1
        if j < len(curve):
            total += best[j]
    return 100.0 * total / 40.0


def ap40(
    preds_per_frame: Sequence[Sequence[PseudoLabel]],
    gts_per_frame: Sequence[Sequence[Box3D]],
    iou_fn: IouFn = iou_3d,
    threshold: float = 0.7,
) -> float:
    """AP (percent) over recall positions 1/40 ... 40/40, scores sorted globally."""
    assignments = [
        match_detections(p, g, iou_fn, threshold) for p, g in zip(preds_per_frame, gts_per_frame)
    ]
    return ap40_from_assignments(assignments)


def closed_gap(ap_method: float, ap_source_only: float, ap_oracle: float) -> float:
    """Share (percent) of the source-only -> oracle gap recovered by a method."""
    if ap_oracle == ap_source_only:
        raise ZeroDivisionError("oracle and source-only AP are equal")
    return (ap_method - ap_source_only) / (ap_oracle - ap_source_only) * 100.0


@dataclass(frozen=True)
class EvalReport:
    ap_bev: float
    ap_3d: float
    recall_07: float
    precision_07: float
    tp: int
    fp: int
    fn: int
    num_gt: int

    def to_text(self) -> str:
        lines = [
            f"{'metric':<14}{'value':>10}",
            f"{'AP_BEV@0.7':<14}{self.ap_bev:>10.2f}",
            f"{'AP_3D@0.7':<14}{self.ap_3d:>10.2f}",
            f"{'recall@0.7':<14}{self.recall_07:>10.2f}",
            f"{'precision@0.7':<14}{self.precision_07:>10.2f}",
            f"{'TP/FP/FN':<14}{f'{self.tp}/{self.fp}/{self.fn}':>10}",
        ]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = asdict(self)
        w.writerow(d.keys())
        w.writerow(fmt6(v) for v in d.values())
        return buf.getvalue()


def fmt6(v) -> str:
    """CSV number formatting: 6 significant digits."""
    if isinstance(v, bool) or isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def evaluate(
    preds_per_frame: Sequence[Sequence[PseudoLabel]],
    gts_per_frame: Sequence[Sequence[Box3D]],
    threshold: float = 0.7,
    gt_ignore_per_frame: Optional[Sequence[Sequence[bool]]] = None,
) -> EvalReport:
    ignores = gt_ignore_per_frame or [None] * len(gts_per_frame)
    a3d = [
        match_detections(p, g, iou_3d, threshold, ig)
        for p, g, ig in zip(preds_per_frame, gts_per_frame, ignores)
    ]
    abev = [
        match_detections(p, g, iou_bev, threshold, ig)
        for p, g, ig in zip(preds_per_frame, gts_per_frame, ignores)
    ]
    precision, recall = precision_recall(a3d)
    return EvalReport(
        ap_bev=ap40_from_assignments(abev),
        ap_3d=ap40_from_assignments(a3d),
        recall_07=100.0 * recall,
        precision_07=100.0 * precision,
        tp=sum(a.tp for a in a3d),
        fp=sum(a.fp for a in a3d),
        fn=sum(a.fn for a in a3d),
        num_gt=sum(a.num_gt for a in a3d),
    )
