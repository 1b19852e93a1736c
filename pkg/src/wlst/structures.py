"""Value types shared across the pipeline.

Frames follow the LiDAR convention: +X forward, +Y left, +Z up, meters.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    yaw = math.fmod(yaw, 2.0 * math.pi)
    if yaw <= -math.pi:
        yaw += 2.0 * math.pi
    elif yaw > math.pi:
        yaw -= 2.0 * math.pi
    return yaw


@dataclass(frozen=True)
class Box3D:
    """Yaw-only oriented box; (x, y, z) is the geometric center."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    category: str = "Car"

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters: {vals}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box dimensions must be positive: {(self.l, self.w, self.h)}")
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, a: Sequence[float], category: str = "Car") -> "Box3D":
        return cls(*(float(v) for v in a[:7]), category=category)


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image rectangle in pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate 2D box: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def contains(self, u: float, v: float) -> bool:
        return self.x_min <= u <= self.x_max and self.y_min <= v <= self.y_max

    def expanded(self, frac: float) -> "Box2D":
        dx = frac * (self.x_max - self.x_min)
        dy = frac * (self.y_max - self.y_min)
        return Box2D(self.x_min - dx, self.y_min - dy, self.x_max + dx, self.y_max + dy)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """LiDAR-to-camera rigid transform plus a 3x4 pinhole projection.

    The camera frame is right/down/forward as in KITTI rectified coordinates.
    """

    lidar_to_cam: np.ndarray
    projection: np.ndarray
    image_size: tuple[int, int] = (1242, 375)

    def __post_init__(self):
        T = np.asarray(self.lidar_to_cam, dtype=float)
        P = np.asarray(self.projection, dtype=float)
        if T.shape != (4, 4) or P.shape != (3, 4):
            raise ValueError("lidar_to_cam must be 4x4 and projection 3x4")
        R = T[:3, :3]
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError(f"lidar_to_cam rotation has det {np.linalg.det(R):.9f}, expected +1")
        if np.linalg.matrix_rank(P) != 3:
            raise ValueError("projection must have rank 3")
        object.__setattr__(self, "lidar_to_cam", T)
        object.__setattr__(self, "projection", P)

    @property
    def cam_to_lidar(self) -> np.ndarray:
        # Published calibrations are only orthonormal to ~1e-7, so no R.T shortcut.
        return np.linalg.inv(self.lidar_to_cam)

    def image_box(self) -> Box2D:
        return Box2D(0.0, 0.0, float(self.image_size[0]), float(self.image_size[1]))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        inten = self.intensity
        if inten is None:
            inten = np.zeros(len(pts))
        inten = np.asarray(inten, dtype=float).reshape(-1)
        if len(inten) != len(pts):
            raise ValueError("intensity length must match points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], self.intensity[idx])


class Source(enum.Enum):
    DETECTOR = "DETECTOR"
    AUTOLABELER = "AUTOLABELER"
    FUSED = "FUSED"


@dataclass(frozen=True)
class PseudoLabel:
    """A 3D box with confidence score ``score`` and existence probability ``prob``.

    ``weak_index`` records the weak 2D box the label was generated from, when known.
    """

    box: Box3D
    score: float
    prob: float = 0.0
    source: Source = Source.DETECTOR
    weak_index: Optional[int] = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0 and 0.0 <= self.prob <= 1.0):
            raise ValueError(f"score/prob outside [0, 1]: {self.score}, {self.prob}")


@dataclass(frozen=True)
class PseudoLabelSet:
    frame_id: str
    labels: tuple[PseudoLabel, ...] = ()
    iteration: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def boxes(self) -> list[Box3D]:
        return [lab.box for lab in self.labels]


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """One sample: point cloud, weak 2D labels, calibration and optional 3D ground truth.

    ``weak_gt_index`` and ``point_owner`` are simulator bookkeeping: the ground-truth
    index behind each weak box and the owning object of each point (-1 for ground).
    """

    frame_id: str
    cloud: PointCloud
    weak: tuple[Box2D, ...]
    cam: CameraModel
    gt3d: Optional[tuple[Box3D, ...]] = None
    weak_gt_index: Optional[tuple[int, ...]] = None
    point_owner: Optional[np.ndarray] = field(default=None, repr=False)
