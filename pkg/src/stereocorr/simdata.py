"""Synthetic stereo observations with injected position deviation.

Each record is drawn from its own random substream so that records are
independent of ``n_samples`` and can be generated in any order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BehindCamera, InfeasibleScene, ParseError
from .geometry import BoundingBox, StereoRig

LEFT = "left"
RIGHT = "right"

# Resampling budget per record: more than 99% rejections means the scene cannot be framed.
_MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class ImagePoint:
    x: float
    y: float


@dataclass(frozen=True)
class DeviationModel:
    alpha_l: float = 1.5
    alpha_r: float = -1.5
    beta: float = 4.0
    sigma_vib: float = 0.5
    sigma_px: float = 0.3

    def __post_init__(self):
        if self.sigma_vib < 0 or self.sigma_px < 0:
            raise ValueError("deviation sigmas must be >= 0")

    @classmethod
    def none(cls) -> "DeviationModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneConfig:
    rig: StereoRig = field(default_factory=StereoRig.default)
    target_width_m: float = 0.88
    target_height_m: float = 0.5
    d_min: float = 5.0
    d_max: float = 30.0
    n_samples: int = 2000
    seed: int = 0
    deviation: DeviationModel = field(default_factory=DeviationModel)

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")


@dataclass
class DatasetRecord:
    id: str
    left: BoundingBox
    right: BoundingBox
    distance_m: float
    truth: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out["id"] = self.id
        out["left"] = self.left.to_dict()
        out["right"] = self.right.to_dict()
        out["distance_m"] = self.distance_m
        if self.truth is not None:
            out["truth"] = dict(self.truth)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        known = {"id", "left", "right", "distance_m", "truth"}
        return cls(
            id=str(d["id"]),
            left=BoundingBox.from_dict(d["left"]),
            right=BoundingBox.from_dict(d["right"]),
            distance_m=float(d["distance_m"]),
            truth=d.get("truth"),
            extra={k: v for k, v in d.items() if k not in known},
        )


def project(rig: StereoRig, point3, side: str) -> ImagePoint:
    """Pinhole projection of (X lateral, Y vertical, Z depth) into one camera.

    The rig origin sits midway between the two camera centers.
    """
    X, Y, Z = point3
    if not Z > 0:
        raise BehindCamera(f"depth Z={Z} <= 0")
    if side == LEFT:
        xc = X + rig.baseline_m / 2
    elif side == RIGHT:
        xc = X - rig.baseline_m / 2
    else:
        raise ValueError(f"unknown side {side!r}")
    return ImagePoint(rig.cx + rig.focal_px * xc / Z, rig.cy + rig.focal_px * Y / Z)


def apply_deviation(dev: DeviationModel, rig: StereoRig, pt: ImagePoint, side: str,
                    rng: np.random.Generator) -> ImagePoint:
    """Shift a projected point the way a vibrating, miscalibrated rig would.

    Always consumes three normal draws (vibration, x noise, y noise) so the
    stream position does not depend on the deviation parameters.
    """
    alpha = dev.alpha_l if side == LEFT else dev.alpha_r
    xc = pt.x - rig.cx
    rn2 = (xc * xc + (pt.y - rig.cy) ** 2) / (rig.half_diagonal ** 2)
    vib, nx, ny = rng.standard_normal(3)
    x = pt.x + alpha + dev.beta * xc * rn2 + dev.sigma_vib * vib + dev.sigma_px * nx
    y = pt.y + dev.sigma_px * ny
    return ImagePoint(x, y)


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_record(config: SceneConfig, index: int) -> DatasetRecord:
    rig = config.rig
    dev = config.deviation
    rng = record_rng(config.seed, index)
    f = rig.focal_px
    for _ in range(_MAX_ATTEMPTS):
        Z = rng.uniform(config.d_min, config.d_max)
        w_true = f * config.target_width_m / Z
        h_true = f * config.target_height_m / Z
        # center both views inside the frame with a full-box margin
        x_lo = (w_true - rig.cx) * Z / f + rig.baseline_m / 2
        x_hi = (rig.width - w_true - rig.cx) * Z / f - rig.baseline_m / 2
        y_lo = (h_true - rig.cy) * Z / f
        y_hi = (rig.height - h_true - rig.cy) * Z / f
        u = rng.uniform(size=2)
        size_noise = rng.standard_normal(4)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        X = x_lo + (x_hi - x_lo) * u[0]
        Y = y_lo + (y_hi - y_lo) * u[1]
        pl = project(rig, (X, Y, Z), LEFT)
        pr = project(rig, (X, Y, Z), RIGHT)
        ql = apply_deviation(dev, rig, pl, LEFT, rng)
        qr = apply_deviation(dev, rig, pr, RIGHT, rng)
        wl = w_true + dev.sigma_px * size_noise[0]
        hl = h_true + dev.sigma_px * size_noise[1]
        wr = w_true + dev.sigma_px * size_noise[2]
        hr = h_true + dev.sigma_px * size_noise[3]
        if min(wl, hl, wr, hr) <= 0:
            continue
        left = BoundingBox(ql.x, ql.y, wl, hl)
        right = BoundingBox(qr.x, qr.y, wr, hr)
        if not (left.fully_inside(rig) and right.fully_inside(rig)):
            continue
        return DatasetRecord(
            id=f"{index:06d}",
            left=left,
            right=right,
            distance_m=Z,
            truth={"xl": pl.x, "yl": pl.y, "xr": pr.x, "yr": pr.y},
        )
    raise InfeasibleScene(
        f"record {index}: no in-frame sample after {_MAX_ATTEMPTS} attempts; "
        "check target size, distance range and deviation magnitudes"
    )


def generate_dataset(config: SceneConfig) -> list[DatasetRecord]:
    return [generate_record(config, i) for i in range(config.n_samples)]


def write_dataset(records: Iterable[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True))
            fh.write("\n")


def read_dataset(path) -> list[DatasetRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed record: {exc}", line=lineno, path=str(path)) from exc
    return records


def write_rig(rig: StereoRig, path) -> None:
    Path(path).write_text(json.dumps(rig.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_rig(path) -> StereoRig:
    try:
        return StereoRig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed rig file: {exc}", path=str(path)) from exc


def rig_sidecar_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.stem + ".rig.json")


def deviation_to_dict(dev: DeviationModel) -> dict:
    return asdict(dev)


def baseline_predictions(rig: StereoRig, records: list[DatasetRecord]) -> np.ndarray:
    """Plain triangulation of box centers; non-positive disparities give inf."""
    xl = np.array([r.left.x for r in records])
    xr = np.array([r.right.x for r in records])
    disp = xl - xr
    with np.errstate(divide="ignore"):
        return np.where(disp > 0, rig.bf / np.where(disp > 0, disp, 1.0), math.inf)
