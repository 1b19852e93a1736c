"""Deterministic synthetic LiDAR scenes and parametric labeler error models.

All randomness derives from ``(seed, frame_id)``. Layout, point positions and
labeler noise use separate generator streams, so changing a profile's bias does
not reshuffle the scene or the noise draws (common random numbers across
self-training rounds).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .codec import CAR_TEMPLATES
from .config import POINT_CLOUD_RANGE, LabelerProfile, SceneSpec
from .geometry import (
    bev_corners,
    clip_convex,
    corners_3d,
    iou_3d,
    points_in_box,
    polygon_area,
    project_to_image,
)
from .structures import Box2D, Box3D, CameraModel, FrameRecord, PointCloud, PseudoLabel, PseudoLabelSet, Source

# Ground height assumed by simulated labelers for false positives.
DEFAULT_GROUND_Z = -1.73
# Clearance kept between simulated objects so their point clusters stay apart.
_PLACEMENT_GAP = 0.6

_ROLE_STREAM = {"DETECTOR": 11, "AUTOLABELER": 12}


def frame_key(frame_id) -> int:
    """Stable non-negative integer for seeding from a frame id."""
    if isinstance(frame_id, (int, np.integer)):
        return int(frame_id)
    s = str(frame_id)
    return int(s) if s.isdigit() else zlib.crc32(s.encode())


def default_camera() -> CameraModel:
    """KITTI-like front camera: 0.27 m ahead of and 0.08 m below the LiDAR."""
    rdf_from_flu = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    T = np.eye(4)
    T[:3, :3] = rdf_from_flu
    T[:3, 3] = -rdf_from_flu @ np.array([0.27, 0.0, -0.08])
    P = np.array([[721.5377, 0.0, 609.5593, 0.0], [0.0, 721.5377, 172.854, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return CameraModel(T, P, (1242, 375))


def weak_box_for(box: Box3D, cam: CameraModel) -> Optional[Box2D]:
    """Bounding rectangle of the projected corners, clamped to the image.

    None unless every corner is in front of the camera and the projected
    center falls inside the image.
    """
    uvd = project_to_image(corners_3d(box), cam)
    if np.any(uvd[:, 2] <= 0):
        return None
    cu, cv, cd = project_to_image(box.center[None], cam)[0]
    W, H = cam.image_size
    if cd <= 0 or not (0 <= cu <= W and 0 <= cv <= H):
        return None
    x0 = max(float(uvd[:, 0].min()), 0.0)
    y0 = max(float(uvd[:, 1].min()), 0.0)
    x1 = min(float(uvd[:, 0].max()), float(W))
    y1 = min(float(uvd[:, 1].max()), float(H))
    if x1 <= x0 or y1 <= y0:
        return None
    return Box2D(x0, y0, x1, y1)


def weak_labels(
    gt: Sequence[Box3D], has_points: Sequence[bool], cam: CameraModel
) -> tuple[tuple[Box2D, ...], tuple[int, ...]]:
    boxes, owners = [], []
    for i, (box, seen) in enumerate(zip(gt, has_points)):
        if not seen:
            continue
        wb = weak_box_for(box, cam)
        if wb is not None:
            boxes.append(wb)
            owners.append(i)
    return tuple(boxes), tuple(owners)


def _inflated(box: Box3D, gap: float) -> Box3D:
    return replace(box, l=box.l + gap, w=box.w + gap)


def _footprints_overlap(a: Box3D, b: Box3D) -> bool:
    return polygon_area(clip_convex(bev_corners(a), bev_corners(b))) > 0.0


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> list[Box3D]:
    boxes: list[Box3D] = []
    az = math.radians(spec.azimuth_deg)
    mean = np.array(spec.size_mean)
    std = np.array(spec.size_std)
    for _ in range(spec.num_objects):
        for _attempt in range(100):
            r = rng.uniform(spec.range_min, spec.range_max)
            a = rng.uniform(-az, az)
            yaw = rng.uniform(-math.pi, math.pi)
            dims = np.maximum(mean + std * rng.standard_normal(3), 0.5 * mean)
            box = Box3D(
                r * math.cos(a),
                r * math.sin(a),
                -spec.sensor_height + 0.5 * dims[2],
                dims[0],
                dims[1],
                dims[2],
                yaw,
            )
            big = _inflated(box, _PLACEMENT_GAP)
            if not any(_footprints_overlap(big, _inflated(b, _PLACEMENT_GAP)) for b in boxes):
                boxes.append(box)
                break
    return boxes


def _face_areas(box: Box3D) -> np.ndarray:
    # +x, -x, +y, -y sides and the top face.
    return np.array([box.w * box.h, box.w * box.h, box.l * box.h, box.l * box.h, box.l * box.w])


def _sample_faces(box: Box3D, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    hl, hw, hh = 0.5 * box.l, 0.5 * box.w, 0.5 * box.h
    chunks = []
    for face, n in enumerate(counts):
        if n == 0:
            continue
        u = rng.uniform(-1.0, 1.0, size=(n, 3))
        local = u * np.array([hl, hw, hh])
        if face == 0:
            local[:, 0] = hl
        elif face == 1:
            local[:, 0] = -hl
        elif face == 2:
            local[:, 1] = hw
        elif face == 3:
            local[:, 1] = -hw
        else:
            local[:, 2] = hh
        chunks.append(local)
    if not chunks:
        return np.zeros((0, 3))
    local = np.vstack(chunks)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def in_range_mask(points: np.ndarray) -> np.ndarray:
    x0, y0, z0, x1, y1, z1 = POINT_CLOUD_RANGE
    return (
        (points[:, 0] >= x0)
        & (points[:, 0] <= x1)
        & (points[:, 1] >= y0)
        & (points[:, 1] <= y1)
        & (points[:, 2] >= z0)
        & (points[:, 2] <= z1)
    )


def generate_scene(
    spec: SceneSpec,
    frame_id,
    cam: Optional[CameraModel] = None,
    with_points: bool = True,
) -> FrameRecord:
    """Build one synthetic frame.

    With ``with_points=False`` the cloud is left empty but ground truth and
    weak labels are identical to the full frame (label-level simulation).
    """
    cam = cam if cam is not None else default_camera()
    key = frame_key(frame_id)
    layout = np.random.default_rng([spec.seed, key, 0])
    sampler = np.random.default_rng([spec.seed, key, 1])

    gt = _place_objects(spec, layout)
    visible = layout.random(len(gt)) >= spec.occlusion_prob
    counts = np.zeros((len(gt), 5), dtype=int)
    for i, box in enumerate(gt):
        dist = max(math.hypot(box.x, box.y), 1.0)
        density = spec.points_per_m2_at_10m * (10.0 / dist) ** spec.density_falloff
        draw = layout.poisson(density * _face_areas(box))
        if visible[i]:
            counts[i] = draw
    has_points = counts.sum(axis=1) > 0

    if with_points:
        pts, inten, owner = [], [], []
        for i, box in enumerate(gt):
            p = _sample_faces(box, counts[i], sampler)
            pts.append(p)
            inten.append(sampler.uniform(0.3, 0.9, len(p)))
            owner.append(np.full(len(p), i))
        n = spec.ground_points
        r = np.exp(sampler.uniform(math.log(spec.ground_range[0]), math.log(spec.ground_range[1]), n))
        theta = sampler.uniform(-math.pi, math.pi, n)
        ground = np.column_stack(
            [
                r * np.cos(theta),
                r * np.sin(theta),
                -spec.sensor_height + spec.ground_noise * sampler.standard_normal(n),
            ]
        )
        g_inten = sampler.uniform(0.0, 0.3, n)
        under = np.zeros(n, dtype=bool)
        for box in gt:
            tall = replace(box, z=box.z - 0.5, h=box.h + 1.0)
            under[points_in_box(ground, tall)] = True
        pts.append(ground[~under])
        inten.append(g_inten[~under])
        owner.append(np.full(int((~under).sum()), -1))
        points = np.vstack(pts)
        intensity = np.concatenate(inten)
        owners = np.concatenate(owner).astype(int)
        keep = in_range_mask(points)
        cloud = PointCloud(points[keep], intensity[keep])
        owners = owners[keep]
    else:
        cloud = PointCloud(np.zeros((0, 3)))
        owners = np.zeros(0, dtype=int)

    weak, weak_owner = weak_labels(gt, has_points, cam)
    return FrameRecord(
        frame_id=f"{key:06d}" if isinstance(frame_id, (int, np.integer)) else str(frame_id),
        cloud=cloud,
        weak=weak,
        cam=cam,
        gt3d=tuple(gt),
        weak_gt_index=weak_owner,
        point_owner=owners,
    )


def simulate_labeler(
    frame: FrameRecord,
    profile: LabelerProfile,
    seed: int,
    noise_scale: float = 1.0,
    iteration: int = 0,
) -> PseudoLabelSet:
    """Perturbed copies of ground truth plus Poisson false positives.

    A detector sees every GT object; an autolabeler only objects that carry a
    weak box, and records that box's index. Every object consumes the same
    random draws whether or not it is dropped, so noise is stable across
    profile changes. ``noise_scale`` multiplies the geometric noise only.
    """
    if frame.gt3d is None:
        raise ValueError("simulate_labeler needs ground truth")
    rng = np.random.default_rng([seed, frame_key(frame.frame_id), _ROLE_STREAM[profile.role]])
    source = Source[profile.role]
    if profile.role == "AUTOLABELER":
        targets = [(g, w) for w, g in enumerate(frame.weak_gt_index or ())]
    else:
        targets = [(g, None) for g in range(len(frame.gt3d))]

    bias = np.array(profile.size_bias)
    cbias = np.array(profile.center_bias)
    labels: list[PseudoLabel] = []
    for g, w in targets:
        gt = frame.gt3d[g]
        u_fn = rng.random()
        n_size = rng.standard_normal(3)
        n_center = rng.standard_normal(3)
        n_yaw = rng.standard_normal()
        n_score = rng.standard_normal()
        if u_fn < profile.fn_rate:
            continue
        dims = gt.dims * bias * np.exp(profile.size_noise_std * noise_scale * n_size)
        center = gt.center + cbias + profile.center_noise_std * noise_scale * n_center * np.array([1.0, 1.0, 0.5])
        yaw = gt.yaw + profile.yaw_noise_std * noise_scale * n_yaw
        box = Box3D(*center, *dims, yaw, category=gt.category)
        score = min(max(iou_3d(box, gt) + profile.score_noise * n_score, 0.0), 1.0)
        labels.append(PseudoLabel(box, float(score), 0.0, source, w))

    x0, y0, _, x1, y1, _ = POINT_CLOUD_RANGE
    lo, hi = profile.fp_score_range
    tl, tw, th = (t * b for t, b in zip(CAR_TEMPLATES[0], bias))
    for _ in range(rng.poisson(profile.fp_rate)):
        x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
        yaw = rng.uniform(-math.pi, math.pi)
        score = rng.uniform(lo, hi)
        box = Box3D(x, y, DEFAULT_GROUND_Z + 0.5 * th, tl, tw, th, yaw)
        labels.append(PseudoLabel(box, float(score), 0.0, source, None))
    return PseudoLabelSet(frame.frame_id, tuple(labels), iteration)


def apply_ros(frame: FrameRecord, scale_range: tuple[float, float], seed: int) -> FrameRecord:
    """Random object scaling: each object (box and its points) is rescaled about
    its center by an independent uniform factor; ground is untouched."""
    low, high = scale_range
    if not (0.5 < low <= high < 2.0):
        raise ValueError(f"scale_range {scale_range} must lie within (0.5, 2.0)")
    if frame.gt3d is None or frame.point_owner is None:
        raise ValueError("apply_ros needs ground truth and point ownership")
    rng = np.random.default_rng([seed, frame_key(frame.frame_id), 7])
    factors = rng.uniform(low, high, len(frame.gt3d))
    points = frame.cloud.points.copy()
    boxes = []
    for i, (box, f) in enumerate(zip(frame.gt3d, factors)):
        if f == 1.0:
            boxes.append(box)
            continue
        own = frame.point_owner == i
        points[own] = box.center + f * (points[own] - box.center)
        boxes.append(replace(box, l=box.l * f, w=box.w * f, h=box.h * f))
    has_points = [bool(np.any(frame.point_owner == i)) for i in range(len(boxes))]
    weak, owners = weak_labels(boxes, has_points, frame.cam)
    return replace(
        frame,
        cloud=PointCloud(points, frame.cloud.intensity),
        gt3d=tuple(boxes),
        weak=weak,
        weak_gt_index=owners,
    )
