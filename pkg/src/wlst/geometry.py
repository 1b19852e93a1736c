"""Geometric kernels: projection, hulls, rotated-box overlap, NMS.

Polygon routines work on plain lists of ``(x, y)`` tuples; they are called in
tight loops with 4-8 vertices, where Python floats beat small numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from .config import EPS
from .structures import Box2D, Box3D, CameraModel, PointCloud, PseudoLabel

Point2 = tuple[float, float]

# Corner order: bottom face CCW (seen from above) starting front-left, then the
# top face in the same order. "Front" is the box +X axis, "left" is +Y.
_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=float,
)


class DegenerateHull(ValueError):
    """All input points are (numerically) collinear."""


@dataclass(frozen=True)
class ConvexPolygon2D:
    """Strictly convex polygon with counter-clockwise vertices."""

    vertices: tuple[Point2, ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegenerateHull("a convex polygon needs at least 3 vertices")

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    @classmethod
    def from_box2d(cls, rect: Box2D) -> "ConvexPolygon2D":
        return cls(tuple(rect_vertices(rect)))


def corners_3d(box: Box3D) -> np.ndarray:
    """Return the (8, 3) corners of ``box`` in the documented order."""
    half = 0.5 * np.array([box.l, box.w, box.h])
    local = _CORNER_SIGNS * half
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def box_from_corners(corners: np.ndarray, category: str = "Car") -> Box3D:
    """Inverse of :func:`corners_3d`."""
    corners = np.asarray(corners, dtype=float)
    center = corners.mean(axis=0)
    length_vec = corners[0] - corners[1]
    width_vec = corners[0] - corners[3]
    height = corners[4, 2] - corners[0, 2]
    yaw = math.atan2(length_vec[1], length_vec[0])
    return Box3D(
        center[0],
        center[1],
        center[2],
        float(np.linalg.norm(length_vec)),
        float(np.linalg.norm(width_vec)),
        float(height),
        yaw,
        category=category,
    )


def transform_box(box: Box3D, T: np.ndarray) -> Box3D:
    """Apply a rigid 4x4 transform whose rotation is (close to) a rotation about +Z."""
    c = T[:3, :3] @ box.center + T[:3, 3]
    heading = T[:3, :3] @ np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    yaw = math.atan2(heading[1], heading[0])
    return Box3D(c[0], c[1], c[2], box.l, box.w, box.h, yaw, category=box.category)


def project_to_image(pts: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Project LiDAR points to ``(u, v, depth)`` rows; nothing is clipped.

    ``depth`` is the camera-frame z coordinate and may be negative.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    homog = np.hstack([pts, np.ones((len(pts), 1))])
    cam_pts = homog @ cam.lidar_to_cam.T
    img = cam_pts @ cam.projection.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = img[:, 0] / img[:, 2]
        v = img[:, 1] / img[:, 2]
    return np.column_stack([u, v, cam_pts[:, 2]])


def _cross(o: Point2, a: Point2, b: Point2) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Iterable[Sequence[float]]) -> ConvexPolygon2D:
    """Monotone-chain hull, counter-clockwise, collinear points dropped."""
    pts = sorted({(float(p[0]), float(p[1])) for p in points})
    if len(pts) < 3:
        raise DegenerateHull("fewer than 3 distinct points")
    scale = max(max(abs(x), abs(y)) for x, y in pts) or 1.0
    tol = EPS * scale * scale

    def chain(seq):
        out: list[Point2] = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= tol:
                out.pop()
            out.append(p)
        return out

    lower = chain(pts)
    upper = chain(reversed(pts))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3 or polygon_area(hull) <= tol:
        raise DegenerateHull("points are collinear")
    return ConvexPolygon2D(tuple(hull))


def polygon_area(poly: Sequence[Point2]) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    if n < 3:
        return 0.0
    s = 0.0
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        s += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return 0.5 * s


def clip_convex(subject: Sequence[Point2], clipper: Sequence[Point2]) -> list[Point2]:
    """Sutherland-Hodgman: clip ``subject`` by each edge of the CCW convex ``clipper``."""
    output = list(subject)
    cx1, cy1 = clipper[-1]
    for cx2, cy2 in clipper:
        if not output:
            break
        ex, ey = cx2 - cx1, cy2 - cy1
        inp = output
        output = []
        sx, sy = inp[-1]
        s_side = ex * (sy - cy1) - ey * (sx - cx1)
        for px, py in inp:
            p_side = ex * (py - cy1) - ey * (px - cx1)
            if p_side >= 0.0:
                if s_side < 0.0:
                    t = s_side / (s_side - p_side)
                    output.append((sx + t * (px - sx), sy + t * (py - sy)))
                output.append((px, py))
            elif s_side >= 0.0:
                t = s_side / (s_side - p_side)
                output.append((sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, s_side = px, py, p_side
        cx1, cy1 = cx2, cy2
    return output


def rect_vertices(rect: Box2D) -> list[Point2]:
    return [
        (rect.x_min, rect.y_min),
        (rect.x_max, rect.y_min),
        (rect.x_max, rect.y_max),
        (rect.x_min, rect.y_max),
    ]


def convex_iou(a: Sequence[Point2], b: Sequence[Point2]) -> float:
    """IoU of two CCW convex polygons."""
    area_a = polygon_area(a)
    area_b = polygon_area(b)
    inter = max(polygon_area(clip_convex(a, b)), 0.0)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def polygon_rect_iou(poly: ConvexPolygon2D | Sequence[Point2], rect: Box2D) -> float:
    """IoU between a convex polygon and an axis-aligned rectangle."""
    verts = poly.vertices if isinstance(poly, ConvexPolygon2D) else list(poly)
    return convex_iou(verts, rect_vertices(rect))


def bev_corners(box: Box3D) -> list[Point2]:
    """Footprint corners, CCW, starting front-left."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    out = []
    for sl, sw in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        dx, dy = sl * hl, sw * hw
        out.append((box.x + c * dx - s * dy, box.y + s * dx + c * dy))
    return out


def _footprints_apart(a: Box3D, b: Box3D) -> bool:
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    return math.hypot(a.x - b.x, a.y - b.y) >= ra + rb


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    if _footprints_apart(a, b):
        return 0.0
    return max(polygon_area(clip_convex(bev_corners(a), bev_corners(b))), 0.0)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU of the two footprints."""
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Footprint intersection times vertical overlap, over the union of volumes."""
    zo = min(a.z + 0.5 * a.h, b.z + 0.5 * b.h) - max(a.z - 0.5 * a.h, b.z - 0.5 * b.h)
    if zo <= 0.0:
        return 0.0
    inter_bev = bev_intersection_area(a, b)
    if inter_bev <= 0.0:
        return 0.0
    inter = inter_bev * zo
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


IOU_FUNCS = {"bev": iou_bev, "3d": iou_3d}


def iou_matrix(boxes_a: Sequence[Box3D], boxes_b: Sequence[Box3D], kind: str = "3d") -> np.ndarray:
    fn = IOU_FUNCS[kind]
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out


def nms_3d(
    labels: Sequence[PseudoLabel],
    iou_threshold: float,
    kind: Literal["bev", "3d"] = "bev",
) -> list[PseudoLabel]:
    """Greedy NMS. Ties in score go to the smaller center-x, then the earlier input."""
    fn = IOU_FUNCS[kind]
    order = sorted(range(len(labels)), key=lambda i: (-labels[i].score, labels[i].box.x, i))
    kept: list[PseudoLabel] = []
    for i in order:
        cand = labels[i]
        if all(fn(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def points_in_box(cloud: PointCloud | np.ndarray, box: Box3D) -> np.ndarray:
    """Indices of points inside ``box``; the boundary counts as inside (within EPS)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    d = pts - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    inside = (
        (np.abs(lx) <= 0.5 * box.l + EPS)
        & (np.abs(ly) <= 0.5 * box.w + EPS)
        & (np.abs(d[:, 2]) <= 0.5 * box.h + EPS)
    )
    return np.flatnonzero(inside)


def projected_hull(box: Box3D, cam: CameraModel) -> ConvexPolygon2D | None:
    """Image-plane hull of the box corners, or None if any corner is not in front
    of the camera or the projection is degenerate."""
    uvd = project_to_image(corners_3d(box), cam)
    if np.any(uvd[:, 2] <= 0.0):
        return None
    try:
        return convex_hull(uvd[:, :2])
    except DegenerateHull:
        return None
