"""Configuration models and shared numeric constants."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Geometric epsilon used by every kernel (boundary tests, degeneracy checks).
EPS = 1e-9

# Detection range (x, y, z) in the LiDAR frame.
POINT_CLOUD_RANGE = (-75.2, -75.2, -2.0, 75.2, 75.2, 4.0)


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FusionConfig(_Config):
    """Thresholds of the consistency fusion step."""

    T_exist: float = Field(0.7, gt=0, lt=1)
    iou3d_min: float = Field(0.1, gt=0, lt=1)
    T: float = Field(0.6, gt=0, lt=1)
    nms_iou: float = Field(0.5, gt=0, lt=1)
    nms_kind: Literal["bev", "3d"] = "bev"
    # Re-run NMS on the fused set (off: matching already deduplicates).
    nms_after_fusion: bool = False


class LabelerConfig(_Config):
    """Parameters of the geometric frustum autolabeler."""

    near: float = Field(0.5, gt=0)
    far: float = Field(80.0, gt=0)
    min_points: int = Field(8, ge=3)
    plane_tol: float = Field(0.2, gt=0)
    ransac_iters: int = Field(200, ge=1)
    # Planes tilted further than this from horizontal are not ground candidates.
    max_plane_tilt_deg: float = Field(25.0, gt=0, le=90)
    # Largest fraction of frustum points allowed below a ground candidate.
    ground_max_below: float = Field(0.05, ge=0, le=1)
    cluster_radius: float = Field(0.7, gt=0)
    angle_step_deg: float = Field(1.0, gt=0, le=90)
    # Stage-2 searches +-angle_step around the stage-1 heading at this many sub-steps.
    refine_steps: int = Field(10, ge=1)
    min_dim: float = Field(0.5, gt=0)
    # Extend fitted boxes down to the RANSAC ground plane.
    snap_to_ground: bool = True

    @model_validator(mode="after")
    def _check_range(self):
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        return self


class SceneSpec(_Config):
    """Synthetic scene distribution (one domain)."""

    num_objects: int = Field(8, ge=0)
    size_mean: tuple[float, float, float] = (3.9, 1.6, 1.56)
    size_std: tuple[float, float, float] = (0.2, 0.08, 0.08)
    range_min: float = Field(7.0, gt=0)
    range_max: float = Field(55.0, gt=0)
    # Objects are placed within +-this azimuth of the camera axis.
    azimuth_deg: float = Field(32.0, gt=0, le=180)
    points_per_m2_at_10m: float = Field(100.0, gt=0)
    density_falloff: float = Field(2.0, ge=0)
    ground_points: int = Field(20000, ge=0)
    ground_range: tuple[float, float] = (2.0, 80.0)
    ground_noise: float = Field(0.02, ge=0)
    sensor_height: float = Field(1.73, gt=0)
    occlusion_prob: float = Field(0.1, ge=0, le=1)
    seed: int = 0

    @field_validator("size_mean")
    @classmethod
    def _positive(cls, v):
        if min(v) <= 0:
            raise ValueError("size_mean must be positive")
        return v


class LabelerProfile(_Config):
    """Parametric error model of a simulated detector or autolabeler."""

    role: Literal["DETECTOR", "AUTOLABELER"] = "DETECTOR"
    size_bias: tuple[float, float, float] = (1.10, 1.10, 1.10)
    center_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size_noise_std: float = Field(0.05, ge=0)
    center_noise_std: float = Field(0.12, ge=0)
    yaw_noise_std: float = Field(0.04, ge=0)
    fp_rate: float = Field(2.0, ge=0)
    fn_rate: float = Field(0.10, ge=0, le=1)
    score_noise: float = Field(0.1, ge=0)
    fp_score_range: tuple[float, float] = (0.3, 0.7)

    @field_validator("size_bias")
    @classmethod
    def _finite_positive(cls, v):
        if not all(math.isfinite(x) and x > 0 for x in v):
            raise ValueError("size_bias must be finite and positive")
        return v


def default_detector_profile() -> LabelerProfile:
    return LabelerProfile(role="DETECTOR", fn_rate=0.10, fp_rate=2.0, score_noise=0.1)


def default_autolabeler_profile() -> LabelerProfile:
    return LabelerProfile(
        role="AUTOLABELER",
        fn_rate=0.20,
        fp_rate=0.3,
        score_noise=0.1,
        center_noise_std=0.10,
        yaw_noise_std=0.03,
    )


class SelfTrainConfig(_Config):
    rounds: int = Field(5, ge=1)
    frames: int = Field(300, ge=1)
    fusion: FusionConfig = FusionConfig()
    adaptation_lr: float = Field(0.5, ge=0)
    # Per-round noise multipliers; the last value repeats if shorter than `rounds`.
    curriculum: tuple[float, ...] = (1.0,)
    # "fusion" runs the consistency fusion; "detector_only" is the ablation.
    pseudo_labels: Literal["fusion", "detector_only"] = "fusion"
    autolabeler: Literal["simulated", "geometric"] = "simulated"
    match_iou: float = Field(0.3, gt=0, lt=1)
    eval_iou: float = Field(0.7, gt=0, lt=1)

    @field_validator("curriculum")
    @classmethod
    def _non_decreasing(cls, v):
        if not v:
            raise ValueError("curriculum needs at least one multiplier")
        if any(x < 0 for x in v):
            raise ValueError("curriculum multipliers must be >= 0")
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("curriculum multipliers must be non-decreasing")
        return v

    def noise_scale(self, k: int) -> float:
        return self.curriculum[min(k, len(self.curriculum) - 1)]


class ProfilesConfig(_Config):
    detector: LabelerProfile = Field(default_factory=default_detector_profile)
    autolabeler: LabelerProfile = Field(default_factory=default_autolabeler_profile)

    @model_validator(mode="after")
    def _roles(self):
        if self.detector.role != "DETECTOR" or self.autolabeler.role != "AUTOLABELER":
            raise ValueError("profile roles must match their section")
        return self


class EvalConfig(_Config):
    iou_threshold: float = Field(0.7, gt=0, lt=1)
    # KITTI difficulty filter; off for synthetic data.
    difficulty: Optional[Literal["easy", "moderate", "hard"]] = None


class IOConfig(_Config):
    dataset_dir: Optional[Path] = None
    out_dir: Optional[Path] = None
    det_labels_dir: Optional[Path] = None
    aut_labels_dir: Optional[Path] = None
    weak_dir: Optional[Path] = None
    calib_dir: Optional[Path] = None
    pred_dir: Optional[Path] = None
    gt_dir: Optional[Path] = None
    metrics_csv: Optional[Path] = None


class SimulateConfig(_Config):
    frames: int = Field(20, ge=0)
    # Also write simulated detector outputs next to the dataset.
    write_detector: bool = True


class RunConfig(_Config):
    """Top-level run configuration loaded from a YAML file."""

    seed: int = 0
    jobs: int = Field(1, ge=1)
    range_filter: bool = True
    io: IOConfig = IOConfig()
    fusion: FusionConfig = FusionConfig()
    labeler: LabelerConfig = LabelerConfig()
    scene: SceneSpec = SceneSpec()
    profiles: ProfilesConfig = ProfilesConfig()
    selftrain: SelfTrainConfig = SelfTrainConfig()
    simulate: SimulateConfig = SimulateConfig()
    eval: EvalConfig = EvalConfig()


def load_run_config(path: Optional[Path]) -> RunConfig:
    """Read and validate a YAML run config; unknown keys are rejected."""
    import yaml

    if path is None:
        return RunConfig()
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return RunConfig.model_validate(data)
