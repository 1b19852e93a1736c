"""Command-line entry point.

    wlst {autolabel|fuse|eval|simulate|selftrain} --config <path> [--seed N] [--jobs N] [--dry-run]

Flags override the matching config keys. ``WLST_LOG`` sets the log level
(error, warn, info, debug). Every command writes the same bytes for a given
config and seed, whatever ``--jobs`` is.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, load_run_config
from .evaluation import evaluate, fmt6, match_detections, pr_curve
from .fusion import fuse_with_stats, with_probabilities
from .frustum import autolabel_frame
from .geometry import iou_3d, iou_bev, nms_3d
from .kitti import (
    MalformedFile,
    ParseError,
    difficulty_ignore,
    labels_to_records,
    list_frame_ids,
    load_frame,
    read_calib,
    read_labels,
    record_to_box,
    records_to_labels,
    save_frame,
    write_kitti_label,
)
from .parallel import ordered_map
from .selftrain import RoundState, run_self_training
from .simulate import frame_key, generate_scene, simulate_labeler
from .structures import PseudoLabelSet, Source

log = logging.getLogger("wlst")

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class FrameMismatch(ValueError):
    pass


class UsageError(ValueError):
    pass


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(fmt6(v) for v in row)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def _need(value: Optional[Path], key: str) -> Path:
    if value is None:
        raise UsageError(f"config key io.{key} is required for this command")
    return Path(value)


# -- simulate -----------------------------------------------------------------


def _simulate_frame(i: int, cfg: RunConfig):
    spec = cfg.scene.model_copy(update={"seed": cfg.seed})
    frame = generate_scene(spec, i)
    det = None
    if cfg.simulate.write_detector:
        raw = simulate_labeler(frame, cfg.profiles.detector, cfg.seed)
        labels = nms_3d(list(raw.labels), cfg.fusion.nms_iou, cfg.fusion.nms_kind)
        det = write_kitti_label(labels_to_records(labels, frame.cam))
    return frame, det


def cmd_simulate(cfg: RunConfig) -> int:
    root = _need(cfg.io.dataset_dir, "dataset_dir")
    job = partial(_simulate_frame, cfg=cfg)
    n_obj = 0
    for frame, det in ordered_map(job, range(cfg.simulate.frames), cfg.jobs):
        save_frame(root, frame)
        n_obj += len(frame.gt3d or ())
        if det is not None:
            (root / "det_2").mkdir(parents=True, exist_ok=True)
            (root / "det_2" / f"{frame.frame_id}.txt").write_text(det)
    print(f"{cfg.simulate.frames} frames, {n_obj} objects -> {root}")
    return 0


# -- autolabel ----------------------------------------------------------------


def _autolabel_frame(fid: str, cfg: RunConfig):
    frame = load_frame(cfg.io.dataset_dir, fid, cfg.range_filter)
    labels, skips = autolabel_frame(frame.cloud, list(frame.weak), frame.cam, cfg.labeler, cfg.seed, frame_key(fid))
    text = write_kitti_label(labels_to_records(labels, frame.cam, frame.weak))
    return fid, text, len(labels), skips


def cmd_autolabel(cfg: RunConfig) -> int:
    root = _need(cfg.io.dataset_dir, "dataset_dir")
    out = _need(cfg.io.out_dir, "out_dir")
    ids = list_frame_ids(root)
    out.mkdir(parents=True, exist_ok=True)
    total, skips = 0, {}
    for fid, text, n, sk in ordered_map(partial(_autolabel_frame, cfg=cfg), ids, cfg.jobs):
        (out / f"{fid}.txt").write_text(text)
        total += n
        for k, v in sk.items():
            skips[k] = skips.get(k, 0) + v
    detail = ", ".join(f"{k} {v}" for k, v in sorted(skips.items())) or "none"
    print(f"{len(ids)} frames, {total} objects labelled, skipped: {detail}")
    return 0


# -- fuse ---------------------------------------------------------------------


def _ids(d: Path) -> list[str]:
    return sorted(p.stem for p in d.glob("*.txt")) if d.is_dir() else []


def _fuse_frame(fid: str, cfg: RunConfig, aut_present: bool):
    io_cfg = cfg.io
    cam = read_calib(Path(io_cfg.calib_dir) / f"{fid}.txt")
    weak_recs = [r for r in read_labels(Path(io_cfg.weak_dir) / f"{fid}.txt") if r.category == "Car"]
    weak = [r.box2d for r in weak_recs if r.box2d is not None and r.occlusion != 3]
    det = records_to_labels(read_labels(Path(io_cfg.det_labels_dir) / f"{fid}.txt"), cam, Source.DETECTOR)
    aut = []
    if aut_present:
        recs = read_labels(Path(io_cfg.aut_labels_dir) / f"{fid}.txt")
        aut = records_to_labels(recs, cam, Source.AUTOLABELER, weak)
    det_set = PseudoLabelSet(fid, tuple(with_probabilities(det, weak, cam)))
    aut_set = PseudoLabelSet(fid, tuple(with_probabilities(aut, weak, cam)))
    fused, stats = fuse_with_stats(det_set, aut_set, cfg.fusion)
    return fid, write_kitti_label(labels_to_records(fused.labels, cam)), stats


def cmd_fuse(cfg: RunConfig) -> int:
    io_cfg = cfg.io
    det_dir = _need(io_cfg.det_labels_dir, "det_labels_dir")
    aut_dir = _need(io_cfg.aut_labels_dir, "aut_labels_dir")
    _need(io_cfg.weak_dir, "weak_dir")
    _need(io_cfg.calib_dir, "calib_dir")
    out = _need(io_cfg.out_dir, "out_dir")
    det_ids, aut_ids = _ids(det_dir), _ids(aut_dir)
    # An empty autolabel directory means "detector only".
    if aut_ids and aut_ids != det_ids:
        only_det = sorted(set(det_ids) - set(aut_ids))
        only_aut = sorted(set(aut_ids) - set(det_ids))
        raise FrameMismatch(f"frame ids differ: detector only {only_det}, autolabeler only {only_aut}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    job = partial(_fuse_frame, cfg=cfg, aut_present=bool(aut_ids))
    for fid, text, st in ordered_map(job, det_ids, cfg.jobs):
        (out / f"{fid}.txt").write_text(text)
        rows.append((fid, st.n_det, st.n_aut, st.matched, st.kept))
    _write_csv(out / "fusion_stats.csv", ("frame_id", "n_u", "n_v", "matched", "kept"), rows)
    print(f"{len(det_ids)} frames, {sum(r[4] for r in rows)} fused labels -> {out}")
    return 0


# -- eval ---------------------------------------------------------------------


def _eval_frame(fid: str, cfg: RunConfig):
    io_cfg = cfg.io
    cam = read_calib(Path(io_cfg.calib_dir) / f"{fid}.txt")
    gt_recs = [r for r in read_labels(Path(io_cfg.gt_dir) / f"{fid}.txt") if r.category == "Car"]
    gts = [record_to_box(r, cam) for r in gt_recs]
    preds = records_to_labels(read_labels(Path(io_cfg.pred_dir) / f"{fid}.txt"), cam)
    return preds, gts, difficulty_ignore(gt_recs, cfg.eval.difficulty)


def cmd_eval(cfg: RunConfig) -> int:
    io_cfg = cfg.io
    gt_dir = _need(io_cfg.gt_dir, "gt_dir")
    _need(io_cfg.pred_dir, "pred_dir")
    _need(io_cfg.calib_dir, "calib_dir")
    ids = _ids(gt_dir)
    res = ordered_map(partial(_eval_frame, cfg=cfg), ids, cfg.jobs)
    preds = [r[0] for r in res]
    gts = [r[1] for r in res]
    ignores = [r[2] for r in res]
    thr = cfg.eval.iou_threshold
    report = evaluate(preds, gts, thr, ignores)
    print(report.to_text())
    rows = []
    for kind, fn in (("3d", iou_3d), ("bev", iou_bev)):
        assigns = [match_detections(p, g, fn, thr, ig) for p, g, ig in zip(preds, gts, ignores)]
        rows += [(kind, s, p, r) for s, p, r in pr_curve(assigns)]
    out = Path(io_cfg.metrics_csv) if io_cfg.metrics_csv else _need(io_cfg.out_dir, "out_dir") / "pr_curve.csv"
    _write_csv(out, ("kind", "score", "precision", "recall"), rows)
    return 0


# -- selftrain ----------------------------------------------------------------


def _selftrain_frame(i: int, cfg: RunConfig):
    spec = cfg.scene.model_copy(update={"seed": cfg.seed})
    return generate_scene(spec, i, with_points=cfg.selftrain.autolabeler == "geometric")


def cmd_selftrain(cfg: RunConfig) -> int:
    st = cfg.selftrain
    out = Path(cfg.io.metrics_csv) if cfg.io.metrics_csv else _need(cfg.io.out_dir, "out_dir") / "selftrain.csv"
    frames = ordered_map(partial(_selftrain_frame, cfg=cfg), range(st.frames), cfg.jobs)
    state = RoundState(cfg.profiles.detector, cfg.profiles.autolabeler)
    state, report = run_self_training(frames, st, state, cfg.seed, cfg.labeler, cfg.jobs)
    header = ("round", "recall07", "precision07", "ap_bev", "ap_3d", "det_size_bias", "aut_size_bias")
    _write_csv(out, header, state.history)
    print(report.to_text())
    return 0


COMMANDS = {
    "autolabel": cmd_autolabel,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "selftrain": cmd_selftrain,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wlst", description="Weak-label 3D self-training pipeline.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, type=Path, help="YAML run config")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--jobs", type=int, help="worker processes (overrides config)")
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    return p


def _setup_logging() -> None:
    level = os.environ.get("WLST_LOG", "warn").lower()
    logging.basicConfig(level=_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        if overrides:
            cfg = RunConfig.model_validate({**cfg.model_dump(), **overrides})
    except (OSError, ValueError) as err:
        print(f"wlst: invalid config {args.config}: {err}", file=sys.stderr)
        return 2
    if args.dry_run:
        print(f"config OK: {args.config} ({args.command}, seed {cfg.seed}, jobs {cfg.jobs})")
        return 0
    try:
        return COMMANDS[args.command](cfg)
    except (UsageError, FrameMismatch) as err:
        print(f"wlst {args.command}: {err}", file=sys.stderr)
        return 2
    except (OSError, MalformedFile, ParseError, KeyError) as err:
        print(f"wlst {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
