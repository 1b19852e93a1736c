"""Geometric weak-to-strong autolabeler.

A 2D box selects frustum points, which pass through four coordinate frames:

* CAMERA: camera frame with forward/left/up axes (KITTI rectified camera,
  relabelled so +X points along the optical axis).
* FRUSTUM: rotated about the vertical axis so the ray through the 2D box
  center becomes +X.
* MASK: foreground points translated so their centroid is the origin.
* BOX: a stage-1 box is moved to the origin with zero yaw for the second fit.

Ground is removed with RANSAC, the object is the largest Euclidean cluster,
and boxes come from a minimum-area rectangle search over headings.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .config import EPS, LabelerConfig
from .geometry import points_in_box, polygon_rect_iou, project_to_image, projected_hull, transform_box
from .structures import Box2D, Box3D, CameraModel, PointCloud, PseudoLabel, Source

log = logging.getLogger(__name__)

# Right/down/forward camera axes -> forward/left/up.
FLU_FROM_RDF = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


class EmptyFrustum(ValueError):
    pass


class NoForeground(ValueError):
    pass


class DegenerateFit(ValueError):
    pass


class FrameTag(enum.Enum):
    CAMERA = "CAMERA"
    FRUSTUM = "FRUSTUM"
    MASK = "MASK"
    BOX = "BOX"


@dataclass(frozen=True, eq=False)
class Frustum:
    source_box: Box2D
    cam: CameraModel
    near: float = 0.5
    far: float = 80.0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("frustum needs 0 < near < far")


@dataclass(frozen=True, eq=False)
class FrustumPoints:
    """Frustum points in the frame named by ``frame_tag``.

    ``transform_log`` maps camera-frame coordinates to the current frame and
    ``indices`` point back into the source cloud.
    """

    points: np.ndarray
    intensity: np.ndarray
    indices: np.ndarray
    frame_tag: FrameTag
    transform_log: np.ndarray
    frustum: Frustum

    def __len__(self) -> int:
        return len(self.points)

    def camera_points(self) -> np.ndarray:
        return apply_transform(rigid_inverse(self.transform_log), self.points)


def rigid_inverse(T: np.ndarray) -> np.ndarray:
    inv = np.eye(4)
    inv[:3, :3] = T[:3, :3].T
    inv[:3, 3] = -T[:3, :3].T @ T[:3, 3]
    return inv


def apply_transform(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ T[:3, :3].T + T[:3, 3]


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    return T


def translation(t) -> np.ndarray:
    T = np.eye(4)
    T[:3, 3] = t
    return T


def lidar_to_camera_flu(cam: CameraModel) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = FLU_FROM_RDF
    return T @ cam.lidar_to_cam


def extract_frustum(
    cloud: PointCloud, box2d: Box2D, cam: CameraModel, cfg: LabelerConfig = LabelerConfig()
) -> FrustumPoints:
    """Points projecting inside ``box2d`` with camera depth in [near, far]."""
    frustum = Frustum(box2d, cam, cfg.near, cfg.far)
    uvd = project_to_image(cloud.points, cam)
    u, v, depth = uvd[:, 0], uvd[:, 1], uvd[:, 2]
    inside = (
        (depth >= frustum.near)
        & (depth <= frustum.far)
        & (u >= box2d.x_min)
        & (u <= box2d.x_max)
        & (v >= box2d.y_min)
        & (v <= box2d.y_max)
    )
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise EmptyFrustum(f"no points inside frustum of {box2d.as_tuple()}")
    pts = apply_transform(lidar_to_camera_flu(cam), cloud.points[idx])
    return FrustumPoints(pts, cloud.intensity[idx], idx, FrameTag.CAMERA, np.eye(4), frustum)


def frustum_ray(frustum: Frustum) -> np.ndarray:
    """Unit direction (camera frame) of the ray through the 2D box center."""
    uc, vc = frustum.source_box.center
    M = frustum.cam.projection[:, :3]
    d = np.linalg.solve(M, np.array([uc, vc, 1.0]))
    if d[2] < 0:
        d = -d
    d = FLU_FROM_RDF @ d
    return d / np.linalg.norm(d)


def to_frustum_coord(fp: FrustumPoints) -> FrustumPoints:
    """Rotate about the vertical axis so the box-center ray lies along +X."""
    if fp.frame_tag not in (FrameTag.CAMERA, FrameTag.FRUSTUM):
        raise ValueError(f"expected CAMERA or FRUSTUM frame, got {fp.frame_tag}")
    ray = fp.transform_log[:3, :3] @ frustum_ray(fp.frustum)
    R = rot_z(-math.atan2(ray[1], ray[0]))
    return replace(
        fp,
        points=apply_transform(R, fp.points),
        frame_tag=FrameTag.FRUSTUM,
        transform_log=R @ fp.transform_log,
    )


def fit_ground_plane(pts: np.ndarray, cfg: LabelerConfig, rng: np.random.Generator) -> Optional[np.ndarray]:
    """RANSAC plane ``(n, d)`` with ``n . p + d = 0`` and ``n`` pointing up.

    Candidates must be near-horizontal with at most ``cfg.ground_max_below``
    of the points beneath them. Returns None when no candidate qualifies.
    """
    n = len(pts)
    if n < 3:
        return None
    tri = rng.integers(0, n, size=(cfg.ransac_iters, 3))
    p0, p1, p2 = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > EPS
    normals[ok] /= norms[ok, None]
    normals[normals[:, 2] < 0] *= -1.0
    ok &= normals[:, 2] >= math.cos(math.radians(cfg.max_plane_tilt_deg))
    if not ok.any():
        return None
    offsets = -np.einsum("ij,ij->i", normals, p0)
    signed = pts @ normals.T + offsets
    # Ground has (almost) nothing below it; this rejects roofs and hoods.
    ok &= (signed < -cfg.plane_tol).sum(axis=0) <= cfg.ground_max_below * n
    counts = np.where(ok, (np.abs(signed) <= cfg.plane_tol).sum(axis=0), -1)
    if counts.max() < 3:
        return None
    best = int(np.argmax(counts))
    return np.append(normals[best], offsets[best])


def euclidean_clusters(pts: np.ndarray, radius: float) -> np.ndarray:
    """Connected-component labels of the graph linking points within ``radius``."""
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=int)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def largest_cluster(labels: np.ndarray) -> np.ndarray:
    """Indices of the biggest component; ties go to the one with the lowest index."""
    counts = np.bincount(labels)
    first = np.full(len(counts), len(labels))
    np.minimum.at(first, labels, np.arange(len(labels)))
    best = min(range(len(counts)), key=lambda c: (-counts[c], first[c]))
    return np.flatnonzero(labels == best)


def segment_foreground(fp: FrustumPoints, cfg: LabelerConfig = LabelerConfig(), seed=0) -> np.ndarray:
    """Drop RANSAC ground inliers, keep the largest Euclidean cluster."""
    return segment_foreground_detail(fp, cfg, seed)[0]


def segment_foreground_detail(
    fp: FrustumPoints, cfg: LabelerConfig = LabelerConfig(), seed=0
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Foreground indices and the ground plane (in ``fp``'s frame, or None)."""
    if len(fp) < cfg.min_points:
        raise NoForeground(f"only {len(fp)} frustum points")
    pts = fp.points
    plane = fit_ground_plane(pts, cfg, np.random.default_rng(seed))
    if plane is None:
        candidates = np.arange(len(pts))
    else:
        dist = np.abs(pts @ plane[:3] + plane[3])
        candidates = np.flatnonzero(dist > cfg.plane_tol)
    if candidates.size < cfg.min_points:
        raise NoForeground("all frustum points lie on the ground")
    members = largest_cluster(euclidean_clusters(pts[candidates], cfg.cluster_radius))
    if members.size < cfg.min_points:
        raise NoForeground(f"largest cluster has {members.size} points")
    return candidates[members], plane


def to_mask_coord(fp: FrustumPoints, fg: np.ndarray) -> FrustumPoints:
    """Keep foreground points and translate their centroid to the origin."""
    if fp.frame_tag is not FrameTag.FRUSTUM:
        raise ValueError(f"expected FRUSTUM frame, got {fp.frame_tag}")
    fg = np.asarray(fg, dtype=int)
    if fg.size == 0:
        raise ValueError("empty foreground")
    pts = fp.points[fg]
    T = translation(-pts.mean(axis=0))
    moved = apply_transform(T, pts)
    moved -= moved.mean(axis=0)
    return FrustumPoints(
        moved,
        fp.intensity[fg],
        fp.indices[fg],
        FrameTag.MASK,
        T @ fp.transform_log,
        fp.frustum,
    )


def fit_box_bev(
    points: np.ndarray | PointCloud,
    cfg: LabelerConfig = LabelerConfig(),
    sensor_xy: Optional[tuple[float, float]] = None,
    headings: Optional[np.ndarray] = None,
) -> tuple[Box3D, float]:
    """Minimum-area enclosing rectangle over a heading grid, plus z extent.

    ``headings`` defaults to [0, pi) at ``cfg.angle_step_deg``. When
    ``sensor_xy`` is given the box +X is turned to point away from it.
    Returns the box and the fraction of input points it contains.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    if len(pts) < cfg.min_points:
        raise DegenerateFit(f"{len(pts)} points, need {cfg.min_points}")
    if headings is None:
        headings = np.arange(0.0, math.pi, math.radians(cfg.angle_step_deg))
    c, s = np.cos(headings), np.sin(headings)
    x, y = pts[:, 0:1], pts[:, 1:2]
    u = x * c + y * s
    v = -x * s + y * c
    umin, umax = u.min(axis=0), u.max(axis=0)
    vmin, vmax = v.min(axis=0), v.max(axis=0)
    area = (umax - umin) * (vmax - vmin)
    k = int(np.argmin(area))
    theta = float(headings[k])
    eu, ev = float(umax[k] - umin[k]), float(vmax[k] - vmin[k])
    if max(eu, ev) < cfg.min_dim:
        raise DegenerateFit(f"points span only {max(eu, ev):.3f} m")
    uc, vc = 0.5 * (umax[k] + umin[k]), 0.5 * (vmax[k] + vmin[k])
    cx = math.cos(theta) * uc - math.sin(theta) * vc
    cy = math.sin(theta) * uc + math.cos(theta) * vc
    if eu >= ev:
        length, width, yaw = eu, ev, theta
    else:
        length, width, yaw = ev, eu, theta + 0.5 * math.pi
    zmin, zmax = float(pts[:, 2].min()), float(pts[:, 2].max())
    if sensor_xy is not None:
        if math.cos(yaw) * (cx - sensor_xy[0]) + math.sin(yaw) * (cy - sensor_xy[1]) < 0:
            yaw += math.pi
    box = Box3D(
        cx,
        cy,
        0.5 * (zmin + zmax),
        max(length, cfg.min_dim),
        max(width, cfg.min_dim),
        max(zmax - zmin, cfg.min_dim),
        yaw,
    )
    score = len(points_in_box(pts, box)) / len(pts)
    return box, score


def snap_to_ground(box: Box3D, plane: np.ndarray, lidar_to_plane: np.ndarray, cfg: LabelerConfig) -> Box3D:
    """Lower the box bottom onto the ground plane.

    Ground removal also strips object points within ``plane_tol`` of the
    plane, so fitted boxes float slightly. Boxes whose bottom lies at most
    ``2 * plane_tol`` above the plane are extended down to it.
    """
    R, t = lidar_to_plane[:3, :3], lidar_to_plane[:3, 3]
    n = R.T @ plane[:3]
    d = float(plane[:3] @ t + plane[3])
    if abs(n[2]) < EPS:
        return box
    z_ground = -(n[0] * box.x + n[1] * box.y + d) / n[2]
    bottom = box.z - 0.5 * box.h
    gap = bottom - z_ground
    if not 0.0 < gap <= 2.0 * cfg.plane_tol:
        return box
    top = box.z + 0.5 * box.h
    return replace(box, z=0.5 * (top + z_ground), h=top - z_ground)


class AutolabelResult(NamedTuple):
    label: PseudoLabel
    stage1: Box3D
    num_frustum_points: int
    num_foreground: int


def _face_away(box: Box3D) -> Box3D:
    if math.cos(box.yaw) * box.x + math.sin(box.yaw) * box.y < 0:
        return replace(box, yaw=box.yaw + math.pi)
    return box


def autolabel_detail(
    cloud: PointCloud,
    box2d: Box2D,
    cam: CameraModel,
    cfg: LabelerConfig = LabelerConfig(),
    seed=0,
) -> AutolabelResult:
    """Full cascade; raises EmptyFrustum, NoForeground or DegenerateFit."""
    fp = extract_frustum(cloud, box2d, cam, cfg)
    fp = to_frustum_coord(fp)
    fg, plane = segment_foreground_detail(fp, cfg, seed)
    mask = to_mask_coord(fp, fg)

    lidar_to_mask = mask.transform_log @ lidar_to_camera_flu(cam)
    sensor = lidar_to_mask[:3, 3]
    stage1, _ = fit_box_bev(mask.points, cfg, sensor_xy=(sensor[0], sensor[1]))

    mask_to_box = rot_z(-stage1.yaw) @ translation(-stage1.center)
    box_pts = apply_transform(mask_to_box, mask.points)
    sensor_box = apply_transform(mask_to_box, sensor[None])[0]
    step = math.radians(cfg.angle_step_deg)
    fine = np.linspace(-step, step, 2 * cfg.refine_steps + 1)
    stage2, _ = fit_box_bev(box_pts, cfg, sensor_xy=(sensor_box[0], sensor_box[1]), headings=fine)

    mask_to_lidar = rigid_inverse(lidar_to_mask)
    stage1_lidar = _face_away(transform_box(stage1, mask_to_lidar))
    final = _face_away(transform_box(stage2, mask_to_lidar @ rigid_inverse(mask_to_box)))
    if cfg.snap_to_ground and plane is not None:
        # Both stages get the same treatment so they stay comparable.
        lidar_to_plane = fp.transform_log @ lidar_to_camera_flu(cam)
        stage1_lidar = snap_to_ground(stage1_lidar, plane, lidar_to_plane, cfg)
        final = snap_to_ground(final, plane, lidar_to_plane, cfg)

    hull = projected_hull(final, cam)
    score = polygon_rect_iou(hull, box2d) if hull is not None else 0.0
    label = PseudoLabel(final, float(score), 0.0, Source.AUTOLABELER)
    return AutolabelResult(label, stage1_lidar, len(fp), len(fg))


def autolabel(
    cloud: PointCloud,
    box2d: Box2D,
    cam: CameraModel,
    cfg: LabelerConfig = LabelerConfig(),
    seed=0,
) -> PseudoLabel:
    return autolabel_detail(cloud, box2d, cam, cfg, seed).label


def autolabel_frame(
    cloud: PointCloud,
    weak: list[Box2D],
    cam: CameraModel,
    cfg: LabelerConfig = LabelerConfig(),
    seed: int = 0,
    frame_key: int = 0,
) -> tuple[list[PseudoLabel], dict[str, int]]:
    """Label every weak box of a frame; failures are skipped and counted by reason.

    RANSAC is seeded per (seed, frame_key, object index) so results do not
    depend on scheduling.
    """
    labels: list[PseudoLabel] = []
    skips: dict[str, int] = {}
    for i, box2d in enumerate(weak):
        try:
            lab = autolabel(cloud, box2d, cam, cfg, seed=[seed, frame_key, i])
        except (EmptyFrustum, NoForeground, DegenerateFit) as err:
            reason = type(err).__name__
            skips[reason] = skips.get(reason, 0) + 1
            log.debug("skip object %d: %s: %s", i, reason, err)
            continue
        labels.append(replace(lab, weak_index=i))
    return labels, skips
