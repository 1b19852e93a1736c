"""Self-training loop: pseudo-label generation with fusion, then adaptation.

The neural re-training step is replaced by bias re-estimation on the
simulated labeler profiles: each source's raw boxes are compared with the
fused pseudo labels and the profile's size/center bias is nudged towards
agreement. Ground truth is only read by the metrics snapshot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import partial
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .config import LabelerConfig, LabelerProfile, SelfTrainConfig, default_autolabeler_profile, default_detector_profile
from .evaluation import EvalReport, evaluate
from .frustum import autolabel_frame
from .fusion import consistency_fusion, score_filter, with_probabilities
from .geometry import iou_matrix, nms_3d
from .parallel import ordered_map
from .simulate import frame_key, simulate_labeler
from .structures import FrameRecord, PseudoLabel, PseudoLabelSet

log = logging.getLogger(__name__)


class NoSignal(RuntimeError):
    """No (raw, fused) pair matched; the profiles are left unchanged."""


class FrameLabels(NamedTuple):
    fused: PseudoLabelSet
    det: PseudoLabelSet
    aut: PseudoLabelSet


class RoundMetrics(NamedTuple):
    round: int
    recall07: float
    precision07: float
    ap_bev: float
    ap_3d: float
    det_size_bias: float
    aut_size_bias: float


@dataclass(frozen=True)
class RoundState:
    """Loop state after ``iteration`` completed rounds."""

    det_profile: LabelerProfile = field(default_factory=default_detector_profile)
    aut_profile: LabelerProfile = field(default_factory=default_autolabeler_profile)
    iteration: int = 0
    pseudo: tuple[PseudoLabelSet, ...] = ()
    history: tuple[RoundMetrics, ...] = ()


def _geometric_autolabels(
    frame: FrameRecord, profile: LabelerProfile, labeler: LabelerConfig, seed: int, iteration: int
) -> PseudoLabelSet:
    # The profile's biases act as a learned correction on top of the fit.
    labels, _ = autolabel_frame(frame.cloud, list(frame.weak), frame.cam, labeler, seed, frame_key(frame.frame_id))
    bias = np.array(profile.size_bias)
    cbias = np.array(profile.center_bias)
    out = []
    for lab in labels:
        b = lab.box
        box = replace(
            b,
            x=b.x + cbias[0],
            y=b.y + cbias[1],
            z=b.z + cbias[2],
            l=b.l * bias[0],
            w=b.w * bias[1],
            h=b.h * bias[2],
        )
        out.append(replace(lab, box=box))
    return PseudoLabelSet(frame.frame_id, tuple(out), iteration)


def generate_frame_labels(
    frame: FrameRecord,
    state: RoundState,
    cfg: SelfTrainConfig = SelfTrainConfig(),
    seed: int = 0,
    labeler: LabelerConfig = LabelerConfig(),
) -> FrameLabels:
    """Detector and autolabeler outputs (with ``prob`` filled) and their fusion.

    Detector boxes go through NMS and take the best IoU over all weak boxes;
    autolabeler boxes are scored against their own weak box. Labeler noise is
    seeded by ``seed`` only, so every round sees the same draws.
    """
    k = state.iteration
    scale = cfg.noise_scale(k)
    fcfg = cfg.fusion
    det = simulate_labeler(frame, state.det_profile, seed, scale, k)
    det_labels = nms_3d(list(det.labels), fcfg.nms_iou, fcfg.nms_kind)
    det = PseudoLabelSet(frame.frame_id, tuple(with_probabilities(det_labels, frame.weak, frame.cam)), k)
    if cfg.autolabeler == "geometric":
        aut = _geometric_autolabels(frame, state.aut_profile, labeler, seed, k)
    else:
        aut = simulate_labeler(frame, state.aut_profile, seed, scale, k)
    aut = PseudoLabelSet(frame.frame_id, tuple(with_probabilities(aut.labels, frame.weak, frame.cam)), k)
    if cfg.pseudo_labels == "detector_only":
        fused = score_filter(det, fcfg.T)
    else:
        fused = consistency_fusion(det, aut, fcfg)
    return FrameLabels(fused, det, aut)


def generate_pseudo_labels(
    frame: FrameRecord,
    state: RoundState,
    cfg: SelfTrainConfig = SelfTrainConfig(),
    seed: int = 0,
    labeler: LabelerConfig = LabelerConfig(),
) -> PseudoLabelSet:
    return generate_frame_labels(frame, state, cfg, seed, labeler).fused


def _pair_stats(raw: Sequence[PseudoLabel], fused: Sequence[PseudoLabel], min_iou: float) -> list[np.ndarray]:
    """Greedy one-to-one (raw, fused) pairs at 3D IoU > ``min_iou``; each row is
    ``(l, w, h) ratio raw/fused`` followed by the center offset raw - fused.

    A fused label that is the raw box itself carries no training signal (its
    loss would be zero), so such pairs are matched but not reported.
    """
    if not raw or not fused:
        return []
    ious = iou_matrix([r.box for r in raw], [f.box for f in fused], "3d")
    order = sorted(
        ((-ious[i, j], i, j) for i in range(len(raw)) for j in range(len(fused)) if ious[i, j] > min_iou)
    )
    used_r, used_f, rows = set(), set(), []
    for _, i, j in order:
        if i in used_r or j in used_f:
            continue
        used_r.add(i)
        used_f.add(j)
        a, b = raw[i].box, fused[j].box
        if a == b:
            continue
        rows.append(np.concatenate([a.dims / b.dims, a.center - b.center]))
    return rows


def _updated(profile: LabelerProfile, rows: list[np.ndarray], lr: float) -> LabelerProfile:
    stats = np.median(np.array(rows), axis=0)
    ratio, offset = stats[:3], stats[3:]
    size_bias = tuple(float(b) for b in np.array(profile.size_bias) * ratio ** (-lr))
    center_bias = tuple(float(c) for c in np.array(profile.center_bias) - lr * offset)
    return profile.model_copy(update={"size_bias": size_bias, "center_bias": center_bias})


def adaptation_step(
    state: RoundState,
    pseudo: Sequence[PseudoLabelSet],
    raw_det: Sequence[PseudoLabelSet],
    raw_aut: Sequence[PseudoLabelSet],
    cfg: SelfTrainConfig = SelfTrainConfig(),
) -> tuple[LabelerProfile, LabelerProfile]:
    """New (detector, autolabeler) profiles from median size ratios and center
    offsets between raw outputs and the fused labels.

    A source with no matched pair keeps its profile. Raises NoSignal if
    neither source has one.
    """
    det_rows: list[np.ndarray] = []
    aut_rows: list[np.ndarray] = []
    for p, d, a in zip(pseudo, raw_det, raw_aut):
        det_rows += _pair_stats(d.labels, p.labels, cfg.match_iou)
        aut_rows += _pair_stats(a.labels, p.labels, cfg.match_iou)
    if not det_rows and not aut_rows:
        raise NoSignal("no raw box matched a fused pseudo label")
    lr = cfg.adaptation_lr
    det = _updated(state.det_profile, det_rows, lr) if det_rows else state.det_profile
    aut = _updated(state.aut_profile, aut_rows, lr) if aut_rows else state.aut_profile
    return det, aut


def _metrics(k: int, state: RoundState, report: EvalReport) -> RoundMetrics:
    return RoundMetrics(
        k,
        report.recall_07,
        report.precision_07,
        report.ap_bev,
        report.ap_3d,
        float(np.mean(state.det_profile.size_bias)),
        float(np.mean(state.aut_profile.size_bias)),
    )


def _frame_job(frame: FrameRecord, state: RoundState, cfg: SelfTrainConfig, seed: int, labeler: LabelerConfig):
    return generate_frame_labels(frame, state, cfg, seed, labeler)


def run_self_training(
    dataset: Sequence[FrameRecord],
    cfg: SelfTrainConfig = SelfTrainConfig(),
    state: Optional[RoundState] = None,
    seed: int = 0,
    labeler: LabelerConfig = LabelerConfig(),
    jobs: int = 1,
) -> tuple[RoundState, EvalReport]:
    """Run ``cfg.rounds`` rounds of generate, evaluate, adapt.

    Each history entry holds the pseudo-label metrics of one round and the
    profile biases that produced them. The returned report is the last round's.
    """
    if not dataset:
        raise ValueError("self-training needs at least one frame")
    state = state if state is not None else RoundState()
    gts = [f.gt3d or () for f in dataset]
    report = None
    for _ in range(cfg.rounds):
        k = state.iteration
        job = partial(_frame_job, state=state, cfg=cfg, seed=seed, labeler=labeler)
        out = ordered_map(job, dataset, jobs)
        fused = [o.fused for o in out]
        report = evaluate([f.labels for f in fused], gts, cfg.eval_iou)
        metrics = _metrics(k, state, report)
        log.info("round %d: recall %.2f precision %.2f", k, metrics.recall07, metrics.precision07)
        try:
            det_p, aut_p = adaptation_step(state, fused, [o.det for o in out], [o.aut for o in out], cfg)
        except NoSignal as err:
            log.warning("round %d: %s", k, err)
            det_p, aut_p = state.det_profile, state.aut_profile
        state = RoundState(det_p, aut_p, k + 1, tuple(fused), state.history + (metrics,))
    return state, report
