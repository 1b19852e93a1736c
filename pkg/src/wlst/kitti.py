"""KITTI object-layout I/O: labels, calibration and velodyne scans.

Dataset layout (one file per frame id)::

    <root>/velodyne/<id>.bin   float32 little-endian (x, y, z, intensity)
    <root>/calib/<id>.txt      P2, R0_rect, Tr_velo_to_cam
    <root>/label_2/<id>.txt    2D boxes (weak labels) and, when known, 3D boxes

Label lines use the 15-field devkit format, plus a score field for
predictions. Floats are written with two decimals so golden files are stable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import POINT_CLOUD_RANGE
from .geometry import corners_3d, project_to_image
from .structures import Box2D, Box3D, CameraModel, FrameRecord, PointCloud, PseudoLabel, Source

log = logging.getLogger(__name__)

# Occlusion level 3 ("unknown") marks objects with no usable 2D box.
OCC_UNKNOWN = 3

# Devkit difficulty limits: min 2D height (px), max occlusion, max truncation.
DIFFICULTY = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0, field: Optional[int] = None):
        where = f"line {line}" + (f", field {field}" if field is not None else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.field = field


class MissingKey(KeyError):
    pass


class MalformedFile(ValueError):
    pass


@dataclass(frozen=True)
class KittiRecord:
    """One label line. ``dims_hwl`` and ``location`` are in the rectified
    camera frame; ``location`` is the bottom-face center."""

    category: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dims_hwl: tuple[float, float, float]
    location: tuple[float, float, float]
    rotation_y: float
    score: Optional[float] = None

    @property
    def box2d(self) -> Optional[Box2D]:
        x0, y0, x1, y1 = self.bbox
        if x0 < x1 and y0 < y1:
            return Box2D(x0, y0, x1, y1)
        return None

    @property
    def dims_lwh(self) -> tuple[float, float, float]:
        h, w, l = self.dims_hwl
        return (l, w, h)


def parse_kitti_label(line: str, line_no: int = 0) -> KittiRecord:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise ParseError(f"expected 15 or 16 fields, got {len(fields)}", line_no)

    def num(i: int) -> float:
        try:
            v = float(fields[i])
        except ValueError:
            raise ParseError(f"not a number: {fields[i]!r}", line_no, i) from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite value {fields[i]!r}", line_no, i)
        return v

    occ = num(2)
    if occ != int(occ):
        raise ParseError(f"occlusion must be an integer: {fields[2]!r}", line_no, 2)
    return KittiRecord(
        category=fields[0],
        truncation=num(1),
        occlusion=int(occ),
        alpha=num(3),
        bbox=(num(4), num(5), num(6), num(7)),
        dims_hwl=(num(8), num(9), num(10)),
        location=(num(11), num(12), num(13)),
        rotation_y=num(14),
        score=num(15) if len(fields) == 16 else None,
    )


def parse_kitti_label_file(text: str) -> list[KittiRecord]:
    """Parse every non-blank line; any malformed line raises ParseError."""
    return [parse_kitti_label(ln, i) for i, ln in enumerate(text.splitlines(), start=1) if ln.strip()]


def _f2(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def format_kitti_record(rec: KittiRecord) -> str:
    parts = [rec.category, _f2(rec.truncation), str(rec.occlusion), _f2(rec.alpha)]
    parts += [_f2(v) for v in rec.bbox + rec.dims_hwl + rec.location]
    parts.append(_f2(rec.rotation_y))
    if rec.score is not None:
        parts.append(_f2(rec.score))
    return " ".join(parts)


def write_kitti_label(records: Iterable[KittiRecord]) -> str:
    lines = [format_kitti_record(r) for r in records]
    return "".join(ln + "\n" for ln in lines)


def record_to_box(rec: KittiRecord, cam: CameraModel) -> Box3D:
    """LiDAR-frame box of a label line."""
    l, w, h = rec.dims_lwh
    x, y, z = rec.location
    # Camera y points down, so the geometric center is h/2 above the bottom face.
    center_cam = np.array([x, y - 0.5 * h, z, 1.0])
    center = cam.cam_to_lidar @ center_cam
    heading_cam = np.array([math.cos(rec.rotation_y), 0.0, -math.sin(rec.rotation_y)])
    heading = cam.cam_to_lidar[:3, :3] @ heading_cam
    yaw = math.atan2(heading[1], heading[0])
    return Box3D(float(center[0]), float(center[1]), float(center[2]), l, w, h, yaw, category=rec.category)


def box_to_record(
    box: Box3D,
    cam: CameraModel,
    score: Optional[float] = None,
    bbox: Optional[Box2D] = None,
    occlusion: int = 0,
) -> KittiRecord:
    """Label line for a LiDAR-frame box. Without ``bbox`` the 2D box is the
    clamped bounding rectangle of the projected corners (or -1s if not visible)."""
    center = cam.lidar_to_cam @ np.append(box.center, 1.0)
    # Lift the BEV heading so it has no camera-y component; record_to_box then
    # recovers the yaw exactly even when the camera is slightly tilted.
    M = cam.lidar_to_cam[:3, :3]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    heading = M @ np.array([c, s, -(M[1, 0] * c + M[1, 1] * s) / M[1, 2]])
    ry = math.atan2(-heading[2], heading[0])
    loc = (float(center[0]), float(center[1] + 0.5 * box.h), float(center[2]))
    alpha = ry - math.atan2(loc[0], loc[2])
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    if bbox is None:
        bbox = _projected_bbox(box, cam)
    rect = bbox.as_tuple() if bbox is not None else (-1.0, -1.0, -1.0, -1.0)
    return KittiRecord(box.category, 0.0, occlusion, alpha, rect, (box.h, box.w, box.l), loc, ry, score)


def _projected_bbox(box: Box3D, cam: CameraModel) -> Optional[Box2D]:
    uvd = project_to_image(corners_3d(box), cam)
    if np.any(uvd[:, 2] <= 0):
        return None
    W, H = cam.image_size
    x0, y0 = max(float(uvd[:, 0].min()), 0.0), max(float(uvd[:, 1].min()), 0.0)
    x1, y1 = min(float(uvd[:, 0].max()), float(W)), min(float(uvd[:, 1].max()), float(H))
    if x1 <= x0 or y1 <= y0:
        return None
    return Box2D(x0, y0, x1, y1)


def labels_to_records(
    labels: Sequence[PseudoLabel], cam: CameraModel, weak: Optional[Sequence[Box2D]] = None
) -> list[KittiRecord]:
    """Prediction lines; the score field carries the label confidence. Labels
    with a ``weak_index`` into ``weak`` store that weak box as their 2D box."""
    out = []
    for lab in labels:
        bbox = weak[lab.weak_index] if weak is not None and lab.weak_index is not None else None
        out.append(box_to_record(lab.box, cam, score=lab.score, bbox=bbox))
    return out


def records_to_labels(
    records: Sequence[KittiRecord],
    cam: CameraModel,
    source: Source = Source.DETECTOR,
    weak: Optional[Sequence[Box2D]] = None,
    category: str = "Car",
) -> list[PseudoLabel]:
    """Prediction lines back to pseudo labels (score 1 when absent).

    With ``weak`` given, a line whose 2D box equals a weak box (at the
    two-decimal file precision) gets that box's ``weak_index``.
    """
    keys = {}
    for i, w in enumerate(weak or ()):
        keys.setdefault(tuple(_f2(v) for v in w.as_tuple()), i)
    out = []
    for rec in records:
        if rec.category != category:
            continue
        score = 1.0 if rec.score is None else min(max(rec.score, 0.0), 1.0)
        idx = keys.get(tuple(_f2(v) for v in rec.bbox)) if weak is not None else None
        out.append(PseudoLabel(record_to_box(rec, cam), score, 0.0, source, idx))
    return out


def difficulty_ignore(records: Sequence[KittiRecord], level: Optional[str]) -> list[bool]:
    """True for ground-truth lines outside ``level`` (evaluated as don't-care)."""
    if level is None:
        return [False] * len(records)
    min_h, max_occ, max_trunc = DIFFICULTY[level]
    return [
        not (r.bbox[3] - r.bbox[1] >= min_h and r.occlusion <= max_occ and r.truncation <= max_trunc)
        for r in records
    ]


# -- calibration --------------------------------------------------------------


def parse_kitti_calib(text: str, image_size: tuple[int, int] = (1242, 375)) -> CameraModel:
    """Camera model from a calib file: ``lidar_to_cam = R0_rect . Tr_velo_to_cam``."""
    entries: dict[str, np.ndarray] = {}
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise MalformedFile(f"line {i}: missing ':'")
        try:
            entries[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            raise MalformedFile(f"line {i}: bad number in {key.strip()}") from None
    for key in ("P2", "R0_rect", "Tr_velo_to_cam"):
        if key not in entries:
            raise MissingKey(key)
    sizes = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
    for key, n in sizes.items():
        if entries[key].size != n:
            raise MalformedFile(f"{key} has {entries[key].size} values, expected {n}")
    R0 = np.eye(4)
    R0[:3, :3] = entries["R0_rect"].reshape(3, 3)
    Tr = np.eye(4)
    Tr[:3, :] = entries["Tr_velo_to_cam"].reshape(3, 4)
    return CameraModel(R0 @ Tr, entries["P2"].reshape(3, 4), image_size)


def read_calib(path) -> CameraModel:
    """``parse_kitti_calib`` on a file; errors name the file."""
    path = Path(path)
    try:
        return parse_kitti_calib(path.read_text())
    except MissingKey as err:
        raise MalformedFile(f"{path}: missing key {err.args[0]}") from None
    except ValueError as err:
        raise MalformedFile(f"{path}: {err}") from None


def write_calib(cam: CameraModel) -> str:
    """Calib text with an identity R0_rect; values use shortest round-trip repr."""

    def row(a) -> str:
        return " ".join(repr(float(v)) for v in np.asarray(a).ravel())

    return (
        f"P2: {row(cam.projection)}\n"
        f"R0_rect: {row(np.eye(3))}\n"
        f"Tr_velo_to_cam: {row(cam.lidar_to_cam[:3, :])}\n"
    )


# -- velodyne -----------------------------------------------------------------


def load_point_cloud(path, range_filter: bool = False) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    if len(data) % 16:
        raise MalformedFile(f"{path}: size {len(data)} is not a multiple of 16 bytes")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if range_filter:
        x0, y0, z0, x1, y1, z1 = POINT_CLOUD_RANGE
        p = arr[:, :3]
        keep = (
            (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1) & (p[:, 2] >= z0) & (p[:, 2] <= z1)
        )
        arr = arr[keep]
    return PointCloud(arr[:, :3].astype(float), arr[:, 3].astype(float))


def write_point_cloud(path, cloud: PointCloud) -> None:
    arr = np.column_stack([cloud.points, cloud.intensity]).astype("<f4")
    Path(path).write_bytes(arr.tobytes())


# -- dataset directories ------------------------------------------------------


def list_frame_ids(root) -> list[str]:
    """Sorted frame ids, taken from ``calib/``."""
    d = Path(root) / "calib"
    if not d.is_dir():
        return []
    return sorted(p.stem for p in d.glob("*.txt"))


def read_labels(path) -> list[KittiRecord]:
    path = Path(path)
    if not path.exists():
        return []
    try:
        return parse_kitti_label_file(path.read_text())
    except ParseError as err:
        raise ParseError(f"{path}: {err}", err.line, err.field) from None


def load_frame(root, frame_id: str, range_filter: bool = True, category: str = "Car") -> FrameRecord:
    """FrameRecord from the KITTI layout. Weak labels are the 2D boxes of
    ``category`` lines whose occlusion is known; 3D ground truth is present
    only when the label file exists."""
    root = Path(root)
    cam = read_calib(root / "calib" / f"{frame_id}.txt")
    velo = root / "velodyne" / f"{frame_id}.bin"
    cloud = load_point_cloud(velo, range_filter) if velo.exists() else PointCloud(np.zeros((0, 3)))
    label_path = root / "label_2" / f"{frame_id}.txt"
    records = [r for r in read_labels(label_path) if r.category == category]
    weak, owner = [], []
    for i, r in enumerate(records):
        b = r.box2d
        if b is not None and r.occlusion != OCC_UNKNOWN:
            weak.append(b)
            owner.append(i)
    gt = tuple(record_to_box(r, cam) for r in records) if label_path.exists() else None
    return FrameRecord(frame_id, cloud, tuple(weak), cam, gt, tuple(owner) if gt is not None else None)


def save_frame(root, frame: FrameRecord) -> None:
    """Write a frame in the KITTI layout. Ground-truth objects without a weak
    box get occlusion level 3 so they reload as 3D ground truth only."""
    root = Path(root)
    for sub in ("velodyne", "calib", "label_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_point_cloud(root / "velodyne" / f"{frame.frame_id}.bin", frame.cloud)
    (root / "calib" / f"{frame.frame_id}.txt").write_text(write_calib(frame.cam))
    weak_of = dict(zip(frame.weak_gt_index or (), frame.weak))
    records = []
    for g, box in enumerate(frame.gt3d or ()):
        wb = weak_of.get(g)
        records.append(box_to_record(box, frame.cam, bbox=wb, occlusion=0 if wb is not None else OCC_UNKNOWN))
    (root / "label_2" / f"{frame.frame_id}.txt").write_text(write_kitti_label(records))
