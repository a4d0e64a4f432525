"""Offset prediction, gating, and the iterative correction loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ModelFormatError, NonPositiveDisparity
from .geometry import BoundingBox, FeatureTuple, StereoRig, feature_array

STACK_FORMAT_VERSION = 1

GATED = "gated"
ALWAYS = "always"  # every stage runs, gates ignored
NEVER = "never"  # first stage only

# Head output is multiplied by this many pixels; keeps the trainable head small
# while offsets of tens to hundreds of pixels stay reachable.
DEFAULT_OFFSET_SCALE = 100.0


@dataclass
class PcmModel:
    mixer: nn.MixerModel
    offset_scale: float = DEFAULT_OFFSET_SCALE

    def __post_init__(self):
        if self.mixer.config.head_outputs != 1:
            raise ValueError("a PCM regresses exactly one offset")

    @classmethod
    def init(cls, seed: int, config: nn.MixerConfig | None = None,
             offset_scale: float = DEFAULT_OFFSET_SCALE) -> "PcmModel":
        config = config or nn.MixerConfig(head_outputs=1)
        return cls(nn.init_model(config, seed), offset_scale)


@dataclass
class GateModel:
    mixer: nn.MixerModel

    def __post_init__(self):
        if self.mixer.config.head_outputs != 2:
            raise ValueError("a gate emits two logits (easy, hard)")

    @classmethod
    def init(cls, seed: int, config: nn.MixerConfig | None = None) -> "GateModel":
        config = config or nn.MixerConfig(head_outputs=2)
        return cls(nn.init_model(config, seed))


@dataclass
class CorrectorStack:
    rig: StereoRig
    stages: list
    gates: list
    gate_threshold: float = 0.5

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("a stack needs at least one PCM stage")
        if len(self.gates) != len(self.stages) - 1:
            raise ValueError(f"{len(self.stages)} stages need {len(self.stages) - 1} gates, got {len(self.gates)}")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError("gate_threshold must lie in [0, 1]")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @classmethod
    def init(cls, rig: StereoRig, n_stages: int = 2, seed: int = 0, gate_threshold: float = 0.5,
             pcm_config: nn.MixerConfig | None = None, gate_config: nn.MixerConfig | None = None,
             offset_scale: float = DEFAULT_OFFSET_SCALE) -> "CorrectorStack":
        seeds = np.random.SeedSequence([seed]).generate_state(2 * n_stages)
        stages = [PcmModel.init(int(seeds[2 * i]), pcm_config, offset_scale) for i in range(n_stages)]
        gates = [GateModel.init(int(seeds[2 * i + 1]), gate_config) for i in range(n_stages - 1)]
        return cls(rig, stages, gates, gate_threshold)


@dataclass
class EstimateTrace:
    offsets: list = field(default_factory=list)  # (O_L, O_R) per executed stage
    corrected_x: list = field(default_factory=list)  # (x~_l, x~_r) after each executed stage
    gate_scores: list = field(default_factory=list)  # averaged P(hard) per consulted gate
    stages_executed: int = 0
    distance: float = float("nan")


def predict_offsets(pcm: PcmModel, features: np.ndarray) -> np.ndarray:
    """Offsets in pixels for an (n, 4) feature batch."""
    out, _ = nn.forward_batch(pcm.mixer, features)
    return pcm.offset_scale * out[:, 0]


def predict_offset(pcm: PcmModel, tuple_: FeatureTuple) -> float:
    return float(predict_offsets(pcm, tuple_.as_array()[None, :])[0])


def softmax_hard(logits: np.ndarray) -> np.ndarray:
    """P(hard) from (n, 2) logits, computed stably."""
    logits = np.asarray(logits, dtype=np.float64)
    diff = logits[:, 0] - logits[:, 1]
    # 1 / (1 + exp(l0 - l1)) without overflow
    out = np.empty_like(diff)
    pos = diff >= 0
    e = np.exp(-diff[pos])
    out[pos] = e / (1.0 + e)
    out[~pos] = 1.0 / (1.0 + np.exp(diff[~pos]))
    return out


def gate_probabilities(gate: GateModel, features: np.ndarray) -> np.ndarray:
    out, _ = nn.forward_batch(gate.mixer, features)
    return softmax_hard(out)


def gate_probability(gate: GateModel, tuple_: FeatureTuple) -> float:
    return float(gate_probabilities(gate, tuple_.as_array()[None, :])[0])


def _boxes_to_arrays(boxes) -> tuple[np.ndarray, ...]:
    arr = np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def run_stack(stack: CorrectorStack, left: np.ndarray, right: np.ndarray, mode: str = GATED) -> dict:
    """Vectorized correction loop over n observations.

    ``left`` and ``right`` are (n, 4) arrays of box {x, y, w, h}.  Returns a
    dict with ``distance`` (inf where the corrected disparity is not
    positive), ``stages`` executed per sample, per-stage ``offsets_l``,
    ``offsets_r``, ``gate_scores`` (nan where a gate was not consulted), and
    the final corrected coordinates ``xl``, ``xr``.
    """
    rig = stack.rig
    left = np.asarray(left, dtype=np.float64).reshape(-1, 4)
    right = np.asarray(right, dtype=np.float64).reshape(-1, 4)
    n = left.shape[0]
    N = stack.n_stages
    xl, yl, wl, hl = left.T
    xr, yr, wr, hr = right.T
    xl = xl.copy()
    xr = xr.copy()
    feat_l = feature_array(rig, xl, yl, wl, hl)
    feat_r = feature_array(rig, xr, yr, wr, hr)
    active = np.ones(n, dtype=bool)
    stages = np.zeros(n, dtype=np.int64)
    offsets_l = np.full((N, n), np.nan)
    offsets_r = np.full((N, n), np.nan)
    scores = np.full((max(N - 1, 0), n), np.nan)
    for s in range(N):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pcm = stack.stages[s]
        o = predict_offsets(pcm, np.concatenate([feat_l[idx], feat_r[idx]]))
        o_l, o_r = o[: idx.size], o[idx.size:]
        xl[idx] = xl[idx] + o_l
        xr[idx] = xr[idx] + o_r
        offsets_l[s, idx] = o_l
        offsets_r[s, idx] = o_r
        stages[idx] += 1
        if s == N - 1 or mode == NEVER:
            if mode == NEVER:
                active[:] = False
            break
        feat_l[idx] = feature_array(rig, xl[idx], yl[idx], wl[idx], hl[idx])
        feat_r[idx] = feature_array(rig, xr[idx], yr[idx], wr[idx], hr[idx])
        if mode == GATED:
            gate = stack.gates[s]
            p = gate_probabilities(gate, np.concatenate([feat_l[idx], feat_r[idx]]))
            t = (p[: idx.size] + p[idx.size:]) / 2.0
            scores[s, idx] = t
            active[idx[t < stack.gate_threshold]] = False
        elif mode != ALWAYS:
            raise ValueError(f"unknown mode {mode!r}")
    disp = xl - xr
    with np.errstate(divide="ignore"):
        distance = np.where(disp > 0, rig.baseline_m * rig.focal_px / np.where(disp > 0, disp, 1.0), np.inf)
    return {
        "distance": distance,
        "stages": stages,
        "offsets_l": offsets_l,
        "offsets_r": offsets_r,
        "gate_scores": scores,
        "xl": xl,
        "xr": xr,
    }


def estimate_distance(stack: CorrectorStack, box_l: BoundingBox, box_r: BoundingBox,
                      mode: str = GATED) -> tuple[float, EstimateTrace]:
    """Correct both box centers stage by stage, then triangulate.

    Raises NonPositiveDisparity if the corrected disparity is not positive;
    the exception carries the trace as ``exc.trace``.
    """
    rig = stack.rig
    xl, yl = box_l.x, box_l.y
    xr, yr = box_r.x, box_r.y
    feat_l = feature_array(rig, xl, yl, box_l.w, box_l.h)[None, :]
    feat_r = feature_array(rig, xr, yr, box_r.w, box_r.h)[None, :]
    trace = EstimateTrace()
    for s, pcm in enumerate(stack.stages):
        o = predict_offsets(pcm, np.concatenate([feat_l, feat_r]))
        o_l, o_r = float(o[0]), float(o[1])
        xl = xl + o_l
        xr = xr + o_r
        trace.offsets.append((o_l, o_r))
        trace.corrected_x.append((xl, xr))
        trace.stages_executed += 1
        if s == stack.n_stages - 1 or mode == NEVER:
            break
        feat_l = feature_array(rig, xl, yl, box_l.w, box_l.h)[None, :]
        feat_r = feature_array(rig, xr, yr, box_r.w, box_r.h)[None, :]
        if mode == GATED:
            p = gate_probabilities(stack.gates[s], np.concatenate([feat_l, feat_r]))
            t = float((p[0] + p[1]) / 2.0)
            trace.gate_scores.append(t)
            if t < stack.gate_threshold:
                break
        elif mode != ALWAYS:
            raise ValueError(f"unknown mode {mode!r}")
    disparity = xl - xr
    if not disparity > 0:
        exc = NonPositiveDisparity(f"corrected disparity {disparity!r} <= 0")
        exc.trace = trace
        raise exc
    trace.distance = rig.baseline_m * rig.focal_px / disparity
    return trace.distance, trace


def records_to_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    left = np.array([[r.left.x, r.left.y, r.left.w, r.left.h] for r in records], dtype=np.float64).reshape(-1, 4)
    right = np.array([[r.right.x, r.right.y, r.right.w, r.right.h] for r in records], dtype=np.float64).reshape(-1, 4)
    gt = np.array([r.distance_m for r in records], dtype=np.float64)
    return left, right, gt


def stack_to_dict(stack: CorrectorStack) -> dict:
    return {
        "format_version": STACK_FORMAT_VERSION,
        "n_stages": stack.n_stages,
        "gate_threshold": stack.gate_threshold,
        "rig": stack.rig.to_dict(),
        "stages": [{"offset_scale": p.offset_scale, "model": nn.model_to_dict(p.mixer)} for p in stack.stages],
        "gates": [{"model": nn.model_to_dict(g.mixer)} for g in stack.gates],
    }


def stack_from_dict(doc: dict) -> CorrectorStack:
    if doc.get("format_version") != STACK_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported stack format_version {doc.get('format_version')!r}")
    try:
        stages = [PcmModel(nn.model_from_dict(s["model"]), float(s["offset_scale"])) for s in doc["stages"]]
        gates = [GateModel(nn.model_from_dict(g["model"])) for g in doc["gates"]]
        if len(stages) != doc["n_stages"]:
            raise ModelFormatError(f"n_stages={doc['n_stages']} but {len(stages)} stage models stored")
        return CorrectorStack(StereoRig.from_dict(doc["rig"]), stages, gates, float(doc["gate_threshold"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed stack document: {exc}") from exc


def save_stack(stack: CorrectorStack, path) -> None:
    Path(path).write_text(json.dumps(stack_to_dict(stack), sort_keys=True) + "\n", encoding="utf-8")


def load_stack(path) -> CorrectorStack:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from exc
    return stack_from_dict(doc)
