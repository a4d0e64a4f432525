"""Losses, optimizer, schedule and the stage-wise training driver."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .correction import (
    CorrectorStack,
    GATED,
    GateModel,
    PcmModel,
    predict_offsets,
    records_to_arrays,
    run_stack,
    softmax_hard,
)
from .errors import EmptyHardSet
from .geometry import StereoRig, feature_array

log = logging.getLogger(__name__)

LOG_COLUMNS = ("stage", "epoch", "step", "lr", "mean_pcm_loss", "mean_gate_loss", "val_abs_rel")

# named substreams derived from the single training seed
_STREAM_INIT = 1
_STREAM_SHUFFLE = 2


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    epochs: int = 200
    warmup_frac: float = 0.05
    T_err: float = 0.06
    lam: float = 1.0
    stages: int = 2
    batch_size: int = 64
    seed: int = 0
    eps_disp: float = 1e-3
    gate_threshold: float = 0.5
    offset_scale: float = 100.0
    embed_dim: int = 32
    token_hidden: int = 32
    channel_hidden: int = 32
    layers: int = 2

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.T_err < 1:
            raise ValueError("T_err must lie in (0, 1)")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.stages < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("stages, epochs and batch_size must be >= 1")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")

    def mixer_config(self, head_outputs: int) -> nn.MixerConfig:
        return nn.MixerConfig(
            embed_dim=self.embed_dim,
            token_hidden=self.token_hidden,
            channel_hidden=self.channel_hidden,
            layers=self.layers,
            head_outputs=head_outputs,
        )

    def schedule(self, n_samples: int) -> "Schedule":
        steps_per_epoch = math.ceil(n_samples / self.batch_size)
        total = self.epochs * steps_per_epoch
        return Schedule(self.lr_max, int(self.warmup_frac * total), total)


@dataclass(frozen=True)
class Schedule:
    lr_max: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


@dataclass
class OptimizerState:
    velocity: dict

    @classmethod
    def zeros(cls, model: nn.MixerModel) -> "OptimizerState":
        return cls(nn.zeros_like(model))


@dataclass
class TrainResult:
    stack: CorrectorStack
    log: list = field(default_factory=list)
    hard_counts: list = field(default_factory=list)


def pcm_loss(d_pred, d_gt):
    return (np.asarray(d_pred, dtype=np.float64) - d_gt) ** 2


def error_rate(d_pred, d_gt):
    return np.abs(np.asarray(d_pred, dtype=np.float64) - d_gt) / d_gt


def hard_label(err, T_err):
    """1 for a hard sample, i.e. error strictly above the threshold."""
    return (np.asarray(err) > T_err).astype(np.int64)


def gate_loss(logits, target):
    """Cross-entropy of softmax(logits) against the class index ``target``."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits = logits.reshape(-1, 2)
    target = np.asarray(target).reshape(-1)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = lse - logits[np.arange(logits.shape[0]), target]
    return float(loss[0]) if single else loss


def total_loss(pcm_losses, gate_losses, lam):
    return float(sum(pcm_losses)) + lam * float(sum(gate_losses))


def lr_at(step, schedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.lr_max * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(model: nn.MixerModel, grads: dict, state: OptimizerState, lr: float,
             config: TrainConfig) -> tuple[nn.MixerModel, OptimizerState]:
    """One SGD-with-momentum update; returns new model and state, inputs untouched."""
    params = {}
    velocity = {}
    for name, p in model.params.items():
        g = grads[name]
        if config.weight_decay and nn.is_decayed(name):
            g = g + config.weight_decay * p
        v = config.momentum * state.velocity[name] + g
        velocity[name] = v
        params[name] = p - lr * v
    return nn.MixerModel(model.config, params), OptimizerState(velocity)


def corrected_distance_grads(bf: float, disp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of Bf / disp with respect to the left and right offsets."""
    g = bf / (disp * disp)
    return -g, g


def pcm_batch_grads(pcm: PcmModel, feat_l, feat_r, xl, xr, gt, bf: float, eps_disp: float):
    """Mean squared distance error over a batch and its parameter gradients.

    Left and right tuples go through the same network.  Samples whose corrected
    disparity is at most ``eps_disp`` are left out of the mean; the loss is None
    when none remain (grads are then zero).
    """
    b = gt.size
    out, cache = nn.forward_batch(pcm.mixer, np.concatenate([feat_l, feat_r]))
    o = pcm.offset_scale * out[:, 0]
    disp = (xl + o[:b]) - (xr + o[b:])
    valid = disp > eps_disp
    n_valid = int(valid.sum())
    upstream = np.zeros((2 * b, 1))
    loss = None
    if n_valid:
        d = bf / disp[valid]
        err = d - gt[valid]
        loss = float(np.mean(err * err))
        dl_dd = 2.0 * err / n_valid
        dd_ol, dd_or = corrected_distance_grads(bf, disp[valid])
        upstream[:b, 0][valid] = dl_dd * dd_ol * pcm.offset_scale
        upstream[b:, 0][valid] = dl_dd * dd_or * pcm.offset_scale
    return loss, nn.backward_batch(pcm.mixer, cache, upstream)


def gate_batch_grads(gate: GateModel, feat_l, feat_r, labels, lam: float):
    """Mean cross-entropy over both sides' tuples and its gradients scaled by ``lam``."""
    X = np.concatenate([feat_l, feat_r])
    y = np.concatenate([labels, labels])
    logits, cache = nn.forward_batch(gate.mixer, X)
    loss = float(np.mean(gate_loss(logits, y)))
    p_hard = softmax_hard(logits)
    probs = np.stack([1.0 - p_hard, p_hard], axis=1)
    probs[np.arange(y.size), y] -= 1.0
    return loss, nn.backward_batch(gate.mixer, cache, lam * probs / y.size)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train_pcm(pcm: PcmModel, feat_l, feat_r, xl, xr, gt, bf, config: TrainConfig,
               rng: np.random.Generator, stage: int, rows: list, evaluate=None) -> PcmModel:
    n = gt.size
    schedule = config.schedule(n)
    model = pcm.mixer
    state = OptimizerState.zeros(model)
    step = 0
    for epoch in range(config.epochs):
        losses = []
        lr = 0.0
        for idx in _batches(n, config.batch_size, rng):
            loss, grads = pcm_batch_grads(PcmModel(model, pcm.offset_scale), feat_l[idx], feat_r[idx],
                                          xl[idx], xr[idx], gt[idx], bf, config.eps_disp)
            if loss is not None:
                losses.append(loss)
            grads = nn.clip_global_norm(grads, config.clip_norm)
            lr = lr_at(step, schedule)
            model, state = sgd_step(model, grads, state, lr, config)
            step += 1
        pcm = PcmModel(model, pcm.offset_scale)
        rows.append({
            "stage": stage,
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "mean_pcm_loss": float(np.mean(losses)) if losses else math.nan,
            "mean_gate_loss": "",
            "val_abs_rel": evaluate(pcm) if evaluate else "",
        })
    return pcm


def _train_gate(gate: GateModel, feat_l, feat_r, labels, config: TrainConfig, rng: np.random.Generator,
                stage: int, rows: list) -> GateModel:
    n = labels.size
    schedule = config.schedule(n)
    model = gate.mixer
    state = OptimizerState.zeros(model)
    step = 0
    for epoch in range(config.epochs):
        losses = []
        lr = 0.0
        for idx in _batches(n, config.batch_size, rng):
            loss, grads = gate_batch_grads(GateModel(model), feat_l[idx], feat_r[idx], labels[idx], config.lam)
            losses.append(loss)
            grads = nn.clip_global_norm(grads, config.clip_norm)
            lr = lr_at(step, schedule)
            model, state = sgd_step(model, grads, state, lr, config)
            step += 1
        gate = GateModel(model)
        rows.append({
            "stage": stage,
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "mean_pcm_loss": "",
            "mean_gate_loss": float(np.mean(losses)),
            "val_abs_rel": "",
        })
    return gate


def hard_subset(err: np.ndarray, T_err: float) -> np.ndarray:
    idx = np.flatnonzero(hard_label(err, T_err))
    if idx.size == 0:
        raise EmptyHardSet(f"no sample has error above {T_err}")
    return idx


def train(records, rig: StereoRig, config: TrainConfig = TrainConfig(), val_records=None) -> TrainResult:
    """Train PCM stages and gates one after another.

    Stage 1 sees every sample.  After each stage the samples whose error is
    still above ``T_err`` are labelled hard; the next gate learns that label
    on the corrected tuples and the next PCM trains on the hard samples only.
    """
    left, right, gt = records_to_arrays(records)
    if gt.size == 0:
        raise ValueError("empty training set")
    init_seeds = np.random.SeedSequence([config.seed, _STREAM_INIT]).generate_state(2 * config.stages)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _STREAM_SHUFFLE]))
    bf = rig.baseline_m * rig.focal_px

    if val_records:
        v_left, v_right, v_gt = records_to_arrays(val_records)

    stages: list[PcmModel] = []
    gates: list[GateModel] = []

    def evaluator(pcm):
        # gated validation error of the finished stages plus the PCM in training
        stack = CorrectorStack(rig, stages + [pcm], gates, config.gate_threshold)
        pred = run_stack(stack, v_left, v_right, GATED)["distance"]
        return float(np.mean(error_rate(pred, v_gt)))

    evaluate = evaluator if val_records else None
    rows: list[dict] = []
    hard_counts: list[int] = []
    idx = np.arange(gt.size)
    xl = left[:, 0].copy()
    xr = right[:, 0].copy()
    feat_l = feature_array(rig, xl, left[:, 1], left[:, 2], left[:, 3])
    feat_r = feature_array(rig, xr, right[:, 1], right[:, 2], right[:, 3])

    for s in range(config.stages):
        if s > 0:
            gate = GateModel(nn.init_model(config.mixer_config(2), int(init_seeds[2 * s - 1])))
            gate = _train_gate(gate, feat_l[idx], feat_r[idx], labels, config, shuffle_rng, s, rows)
            gates.append(gate)
            idx = idx[labels == 1]
        pcm = PcmModel(nn.init_model(config.mixer_config(1), int(init_seeds[2 * s])), config.offset_scale)
        log.info("stage %d: training PCM on %d samples", s + 1, idx.size)
        pcm = _train_pcm(pcm, feat_l[idx], feat_r[idx], xl[idx], xr[idx], gt[idx], bf, config,
                         shuffle_rng, s + 1, rows, evaluate)
        stages.append(pcm)
        if s == config.stages - 1:
            break
        # advance the samples that reached this stage through it
        o = predict_offsets(pcm, np.concatenate([feat_l[idx], feat_r[idx]]))
        xl[idx] += o[: idx.size]
        xr[idx] += o[idx.size:]
        feat_l[idx] = feature_array(rig, xl[idx], left[idx, 1], left[idx, 2], left[idx, 3])
        feat_r[idx] = feature_array(rig, xr[idx], right[idx, 1], right[idx, 2], right[idx, 3])
        disp = xl[idx] - xr[idx]
        with np.errstate(divide="ignore"):
            d = np.where(disp > 0, bf / np.where(disp > 0, disp, 1.0), np.inf)
        err = error_rate(d, gt[idx])
        try:
            hard_subset(err, config.T_err)
        except EmptyHardSet:
            log.warning("stage %d left no hard samples; stopping with %d stage(s)", s + 1, len(stages))
            break
        labels = hard_label(err, config.T_err)
        hard_counts.append(int(labels.sum()))
        log.info("stage %d: %d of %d samples hard (T_err=%g)", s + 1, labels.sum(), idx.size, config.T_err)

    stack = CorrectorStack(rig, stages, gates, config.gate_threshold)
    return TrainResult(stack, rows, hard_counts)
