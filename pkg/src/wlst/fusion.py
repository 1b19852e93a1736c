"""Consistency fusion of detector and autolabeler pseudo labels.

Two signals decide which boxes survive:

* existence probability: 2D IoU between the image hull of a box's corners and
  the weak 2D labels (geometric consistency);
* 3D IoU between detector and autolabeler boxes (cross-modality consistency).

Matched pairs keep the higher-scored member, unmatched boxes are down-weighted
by their existence probability, and everything below ``T`` is dropped.
"""

from __future__ import annotations

from dataclasses import replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .config import FusionConfig
from .geometry import iou_matrix, nms_3d, polygon_rect_iou, projected_hull
from .structures import Box2D, CameraModel, PseudoLabel, PseudoLabelSet, Source


def existence_probability(
    label: PseudoLabel,
    weak: Sequence[Box2D],
    cam: CameraModel,
    corresponding: Optional[Box2D] = None,
) -> float:
    """2D IoU of the reprojected corner hull with ``corresponding`` if given,
    otherwise the maximum over ``weak``. Degenerate projections give 0."""
    if corresponding is None and not weak:
        return 0.0
    hull = projected_hull(label.box, cam)
    if hull is None:
        return 0.0
    if corresponding is not None:
        return polygon_rect_iou(hull, corresponding)
    return max(polygon_rect_iou(hull, w) for w in weak)


def with_probabilities(
    labels: Sequence[PseudoLabel], weak: Sequence[Box2D], cam: CameraModel
) -> list[PseudoLabel]:
    """Fill ``prob``; labels with a ``weak_index`` use that weak box only."""
    out = []
    for lab in labels:
        corr = weak[lab.weak_index] if lab.weak_index is not None else None
        out.append(replace(lab, prob=existence_probability(lab, weak, cam, corr)))
    return out


def build_iou_matrix(det: PseudoLabelSet, aut: PseudoLabelSet) -> np.ndarray:
    """Pairwise 3D IoU, detector labels along rows."""
    return iou_matrix(det.boxes(), aut.boxes(), "3d")


def canonical_key(lab: PseudoLabel) -> tuple:
    b = lab.box
    return (
        -lab.score,
        -lab.prob,
        lab.source.value,
        b.x,
        b.y,
        b.z,
        b.l,
        b.w,
        b.h,
        b.yaw,
        -1 if lab.weak_index is None else lab.weak_index,
    )


def canonical_order(labels: Sequence[PseudoLabel]) -> list[PseudoLabel]:
    return sorted(labels, key=canonical_key)


class FusionStats(NamedTuple):
    n_det: int
    n_aut: int
    matched: int
    kept: int


def score_filter(labels: PseudoLabelSet, T: float) -> PseudoLabelSet:
    """Keep labels with score >= T, preserving order."""
    return replace(labels, labels=tuple(lab for lab in labels.labels if lab.score >= T))


def greedy_pairs(
    det: Sequence[PseudoLabel], aut: Sequence[PseudoLabel], ious: np.ndarray, cfg: FusionConfig
) -> list[tuple[int, int]]:
    """One-to-one matching over pairs passing both consistency tests, by
    descending IoU, then higher combined score, then lower indices."""
    cands = []
    for j, u in enumerate(det):
        for k, v in enumerate(aut):
            if max(u.prob, v.prob) >= cfg.T_exist and ious[j, k] > cfg.iou3d_min:
                cands.append((-ious[j, k], -(u.score + v.score), j, k))
    cands.sort()
    used_det, used_aut = set(), set()
    pairs = []
    for _, _, j, k in cands:
        if j in used_det or k in used_aut:
            continue
        used_det.add(j)
        used_aut.add(k)
        pairs.append((j, k))
    return pairs


def fuse_with_stats(
    det: PseudoLabelSet,
    aut: PseudoLabelSet,
    cfg: FusionConfig = FusionConfig(),
    weak: Optional[Sequence[Box2D]] = None,
    cam: Optional[CameraModel] = None,
) -> tuple[PseudoLabelSet, FusionStats]:
    d_labels = list(det.labels)
    a_labels = list(aut.labels)
    if cam is not None:
        d_labels = with_probabilities(d_labels, weak or [], cam)
        a_labels = with_probabilities(a_labels, weak or [], cam)
    d_labels = canonical_order(d_labels)
    a_labels = canonical_order(a_labels)
    ious = iou_matrix([lab.box for lab in d_labels], [lab.box for lab in a_labels], "3d")
    pairs = greedy_pairs(d_labels, a_labels, ious, cfg)

    out: list[PseudoLabel] = []
    for j, k in pairs:
        u, v = d_labels[j], a_labels[k]
        # Equal scores keep the autolabeler box.
        winner = u if u.score > v.score else v
        out.append(replace(winner, source=Source.FUSED))
    matched_det = {j for j, _ in pairs}
    matched_aut = {k for _, k in pairs}
    for j, u in enumerate(d_labels):
        if j not in matched_det:
            out.append(replace(u, score=u.score * u.prob))
    for k, v in enumerate(a_labels):
        if k not in matched_aut:
            out.append(replace(v, score=v.score * v.prob))

    out = [lab for lab in out if lab.score >= cfg.T]
    out = canonical_order(out)
    if cfg.nms_after_fusion:
        out = nms_3d(out, cfg.nms_iou, cfg.nms_kind)
    fused = PseudoLabelSet(det.frame_id, tuple(out), det.iteration)
    return fused, FusionStats(len(d_labels), len(a_labels), len(pairs), len(out))


def consistency_fusion(
    det: PseudoLabelSet,
    aut: PseudoLabelSet,
    cfg: FusionConfig = FusionConfig(),
    weak: Optional[Sequence[Box2D]] = None,
    cam: Optional[CameraModel] = None,
) -> PseudoLabelSet:
    """Fuse two pseudo-label sets of one frame.

    ``prob`` fields are used as given unless ``cam`` is passed, in which case
    they are recomputed against ``weak``. The output is sorted by score,
    descending, and does not depend on the input order.
    """
    return fuse_with_stats(det, aut, cfg, weak, cam)[0]
