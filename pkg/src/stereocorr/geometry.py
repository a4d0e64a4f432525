"""Pinhole stereo geometry.

Conventions: image x grows to the right, y grows downward, distances are in
meters and every image quantity (including the focal length) is in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDisparity


@dataclass(frozen=True)
class StereoRig:
    baseline_m: float
    focal_px: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if not self.baseline_m > 0:
            raise ValueError(f"baseline_m must be > 0, got {self.baseline_m}")
        if not self.focal_px > 0:
            raise ValueError(f"focal_px must be > 0, got {self.focal_px}")
        if not 0 < self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside (0, {self.width})")
        if not 0 < self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside (0, {self.height})")

    @property
    def bf(self) -> float:
        return self.baseline_m * self.focal_px

    @property
    def half_diagonal(self) -> float:
        return math.hypot(self.width / 2.0, self.height / 2.0)

    def to_dict(self) -> dict:
        return {
            "baseline_m": self.baseline_m,
            "focal_px": self.focal_px,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StereoRig":
        return cls(**{k: float(d[k]) for k in ("baseline_m", "focal_px", "cx", "cy", "width", "height")})

    @classmethod
    def default(cls) -> "StereoRig":
        """406 mm baseline, 22 degree horizontal FOV at 1280x720."""
        width, height = 1280.0, 720.0
        return cls(
            baseline_m=0.406,
            focal_px=focal_from_hfov(width, math.radians(22.0)),
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    def inside(self, rig: StereoRig) -> bool:
        return 0 <= self.x <= rig.width and 0 <= self.y <= rig.height

    def fully_inside(self, rig: StereoRig) -> bool:
        return (
            self.x - self.w / 2 >= 0
            and self.x + self.w / 2 <= rig.width
            and self.y - self.h / 2 >= 0
            and self.y + self.h / 2 <= rig.height
        )

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]))


@dataclass(frozen=True)
class PolarFeature:
    theta: float
    r: float


@dataclass(frozen=True)
class FeatureTuple:
    theta: float
    r_norm: float
    w_norm: float
    h_norm: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.r_norm, self.w_norm, self.h_norm], dtype=np.float64)


def triangulate(rig: StereoRig, x_l: float, x_r: float) -> float:
    disparity = x_l - x_r
    if not disparity > 0:
        raise NonPositiveDisparity(f"disparity {disparity!r} <= 0 (x_l={x_l!r}, x_r={x_r!r})")
    return rig.baseline_m * rig.focal_px / disparity


def triangulate_corrected(rig: StereoRig, x_l: float, x_r: float, o_l: float, o_r: float) -> float:
    """Triangulate after shifting each x coordinate by its predicted offset."""
    return triangulate(rig, x_l + o_l, x_r + o_r)


def radian_conversion(rig: StereoRig, x: float, y: float) -> PolarFeature:
    dx = x - rig.cx
    dy = y - rig.cy
    r = math.hypot(dx, dy)
    theta = math.atan2(dy, dx) if r > 0 else 0.0
    # atan2 returns -pi for (-0.0 or negative y, negative x); keep theta in (-pi, pi]
    if theta == -math.pi:
        theta = math.pi
    return PolarFeature(theta=theta, r=r)


def make_feature_tuple(rig: StereoRig, box: BoundingBox) -> FeatureTuple:
    polar = radian_conversion(rig, box.x, box.y)
    return FeatureTuple(
        theta=polar.theta,
        r_norm=polar.r / rig.half_diagonal,
        w_norm=box.w / rig.width,
        h_norm=box.h / rig.height,
    )


def feature_array(rig: StereoRig, x, y, w, h) -> np.ndarray:
    """Vectorized make_feature_tuple; returns an (n, 4) array of {theta, r, w, h}."""
    dx = np.asarray(x, dtype=np.float64) - rig.cx
    dy = np.asarray(y, dtype=np.float64) - rig.cy
    r = np.hypot(dx, dy)
    theta = np.where(r > 0, np.arctan2(dy, dx), 0.0)
    theta = np.where(theta == -np.pi, np.pi, theta)
    return np.stack(
        [
            theta,
            r / rig.half_diagonal,
            np.asarray(w, dtype=np.float64) / rig.width,
            np.asarray(h, dtype=np.float64) / rig.height,
        ],
        axis=-1,
    )


def focal_from_hfov(width: float, hfov: float) -> float:
    if not 0 < hfov < math.pi:
        raise ValueError(f"hfov must lie in (0, pi), got {hfov}")
    return (width / 2.0) / math.tan(hfov / 2.0)
