"""Distance metrics, near/far reporting and the dynamic cost model."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput

DEFAULT_BOUNDARY_M = 20.0


def _pair(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    g = np.asarray(gts, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise EmptyInput("metrics need at least one prediction")
    if p.size != g.size:
        raise ValueError(f"{p.size} predictions for {g.size} ground truths")
    if np.any(g <= 0):
        raise ValueError("ground-truth distances must be positive")
    return p, g


def abs_rel(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return float(np.mean(np.abs(p - g) / g))


def sq_rel(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return float(np.mean((p - g) ** 2 / g))


@dataclass
class BinStat:
    label: str
    count: int
    abs_rel: float


def binned_report(preds, gts, boundary: float = DEFAULT_BOUNDARY_M) -> dict[str, BinStat]:
    """Abs Rel below and at-or-above ``boundary``; empty bins are left out."""
    p, g = _pair(preds, gts)
    out = {}
    for label, mask in ((f"<{boundary:g}m", g < boundary), (f">={boundary:g}m", g >= boundary)):
        if mask.any():
            out[label] = BinStat(label, int(mask.sum()), abs_rel(p[mask], g[mask]))
    return out


def mean_cost(c_pcm: float, c_gate: float, n_easy: int, n_hard: int) -> float:
    """Average per-sample cost with easy samples charged PCM + gate and hard ones PCM only."""
    if n_easy + n_hard <= 0:
        raise EmptyInput("mean_cost needs at least one sample")
    if c_pcm < 0 or c_gate < 0 or n_easy < 0 or n_hard < 0:
        raise ValueError("costs and counts must be non-negative")
    return ((c_pcm + c_gate) * n_easy + c_pcm * n_hard) / (n_easy + n_hard)


def executed_cost(c_pcm: float, c_gate: float, stages: np.ndarray, n_stages: int) -> float:
    """Mean cost from what actually ran: every executed PCM plus every consulted gate.

    A gate is consulted after each executed stage except the last one in the stack.
    """
    s = np.asarray(stages)
    if s.size == 0:
        raise EmptyInput("no samples")
    gates = np.minimum(s, n_stages - 1)
    return float(np.mean(c_pcm * s + c_gate * gates))


@dataclass
class EvalReport:
    abs_rel: float
    sq_rel: float
    bins: dict
    count: int
    stages_histogram: dict = field(default_factory=dict)
    mean_cost: float | None = None
    executed_cost: float | None = None
    label: str = "model"

    def rows(self) -> list[tuple[str, str]]:
        rows = [
            ("label", self.label),
            ("count", str(self.count)),
            ("abs_rel", f"{self.abs_rel:.6f}"),
            ("sq_rel", f"{self.sq_rel:.6f}"),
        ]
        for name, b in self.bins.items():
            rows.append((f"abs_rel[{name}]", f"{b.abs_rel:.6f}"))
            rows.append((f"count[{name}]", str(b.count)))
        for k in sorted(self.stages_histogram):
            rows.append((f"stages={k}", str(self.stages_histogram[k])))
        if self.mean_cost is not None:
            rows.append(("mean_cost_flops", f"{self.mean_cost:.6g}"))
        if self.executed_cost is not None:
            rows.append(("executed_cost_flops", f"{self.executed_cost:.6g}"))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def make_report(preds, gts, stages=None, n_stages: int | None = None, c_pcm: float | None = None,
                c_gate: float | None = None, boundary: float = DEFAULT_BOUNDARY_M,
                label: str = "model") -> EvalReport:
    p, g = _pair(preds, gts)
    report = EvalReport(
        abs_rel=abs_rel(p, g),
        sq_rel=sq_rel(p, g),
        bins=binned_report(p, g, boundary),
        count=int(p.size),
        label=label,
    )
    if stages is not None:
        s = np.asarray(stages)
        values, counts = np.unique(s, return_counts=True)
        report.stages_histogram = {int(v): int(c) for v, c in zip(values, counts)}
        if c_pcm is not None and c_gate is not None and n_stages:
            # samples stopped by the first gate are "easy"; the rest went on to stage 2+
            n_hard = int(np.sum(s > 1))
            report.mean_cost = mean_cost(c_pcm, c_gate, int(s.size) - n_hard, n_hard)
            report.executed_cost = executed_cost(c_pcm, c_gate, s, n_stages)
    return report


def write_plot_data(path, gts, preds) -> None:
    """(distance, prediction) pairs sorted by distance, for divergence plots."""
    g = np.asarray(gts, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    order = np.argsort(g, kind="stable")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["distance_m", "prediction_m"])
        for i in order:
            w.writerow([repr(float(g[i])), repr(float(p[i]))])
