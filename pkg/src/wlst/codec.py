"""Heading-bin / size-template box parameterization and its exact inverse."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .structures import Box3D, normalize_yaw

CAR_TEMPLATES = ((3.9, 1.6, 1.56), (4.7, 2.1, 1.7), (10.0, 2.6, 3.2))


class IndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class BoxCodec:
    num_heading_bins: int = 12
    templates: tuple[tuple[float, float, float], ...] = CAR_TEMPLATES

    def __post_init__(self):
        if self.num_heading_bins < 1:
            raise ValueError("need at least one heading bin")
        if not self.templates or any(min(t) <= 0 for t in self.templates):
            raise ValueError("templates must be positive (l, w, h) triples")

    @property
    def bin_width(self) -> float:
        return 2.0 * math.pi / self.num_heading_bins

    def bin_center(self, k: int) -> float:
        return normalize_yaw(k * self.bin_width)


class EncodedBox(NamedTuple):
    bin_id: int
    bin_residual: float
    template_id: int
    size_residuals: tuple[float, float, float]
    center: tuple[float, float, float]


def encode_box(box: Box3D, codec: BoxCodec = BoxCodec()) -> EncodedBox:
    """Residual in (-w/2, w/2] around the nearest bin center, w the bin width."""
    width = codec.bin_width
    half = 0.5 * width
    k = math.ceil((box.yaw - half) / width)
    residual = box.yaw - k * width
    # Floating error can push the residual just outside the half-open interval.
    if residual > half:
        k += 1
        residual -= width
    elif residual <= -half:
        k -= 1
        residual += width
    bin_id = k % codec.num_heading_bins

    dims = np.array([box.l, box.w, box.h])
    templates = np.array(codec.templates)
    cost = (np.abs(dims - templates) / templates).sum(axis=1)
    template_id = int(np.argmin(cost))
    t = templates[template_id]
    size_res = tuple(float(r) for r in (dims - t) / t)
    return EncodedBox(bin_id, float(residual), template_id, size_res, (box.x, box.y, box.z))


def decode_box(enc: EncodedBox, codec: BoxCodec = BoxCodec(), category: str = "Car") -> Box3D:
    bin_id, residual, template_id, size_res, center = enc
    if not 0 <= bin_id < codec.num_heading_bins:
        raise IndexOutOfRange(f"bin_id {bin_id} outside [0, {codec.num_heading_bins})")
    if not 0 <= template_id < len(codec.templates):
        raise IndexOutOfRange(f"template_id {template_id} outside [0, {len(codec.templates)})")
    t = codec.templates[template_id]
    l, w, h = (t[i] * (1.0 + size_res[i]) for i in range(3))
    yaw = codec.bin_center(bin_id) + residual
    return Box3D(center[0], center[1], center[2], l, w, h, yaw, category=category)
