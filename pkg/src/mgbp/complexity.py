"""Cost recurrence ``p(n) = f(n) + mu * p(n / 4)`` versus exact counts.

Costs are multiply-accumulates of the convolutions and transposed
convolutions; relu, concatenation and residual additions are free. A level
with ``n`` pixels hands ``floor(n / 4)`` pixels to the level below.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G


@dataclass(frozen=True)
class CostModel:
    """Per-level cost ``f`` for a recurrence over ``levels`` levels.

    ``kind`` is ``"constant"`` (f = c), ``"power"`` (f = c * n**alpha) or
    ``"table"`` (``per_level[j]`` is f at the j-th level from the top).
    ``overhead`` is added once, outside the recursion.
    """

    mu: int
    levels: int
    n: int
    kind: str = "power"
    c: float = 1.0
    alpha: float = 1.0
    per_level: tuple = ()
    overhead: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "power", "table"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.kind != "table" and self.c <= 0:
            raise ValueError("c must be > 0")
        if self.kind == "table" and len(self.per_level) != self.levels:
            raise ValueError(f"table needs {self.levels} entries, got {len(self.per_level)}")

    def pixels(self, j):
        return self.n // 4 ** j

    def f(self, j):
        if self.kind == "table":
            return self.per_level[j]
        if self.kind == "constant":
            return self.c
        return self.c * self.pixels(j) ** self.alpha


def recurrence_cost(model: CostModel):
    """Exact value of the finite recurrence; ``p = f`` at the lowest level."""
    p = model.f(model.levels - 1)
    for j in range(model.levels - 2, -1, -1):
        p = model.f(j) + model.mu * p
    return model.overhead + p


@dataclass
class CostReport:
    macs: int
    peak_bytes: int
    level_pixels: dict
    level_cost: dict
    overhead: int
    leaf_calls: int
    predicted: float | None = None
    by_module: dict = field(default_factory=dict)

    def text(self):
        lines = [f"total MACs: {self.macs}", f"peak activation bytes: {self.peak_bytes}",
                 f"leaf BP calls: {self.leaf_calls}",
                 f"analysis+synthesis MACs: {self.overhead}"]
        for k in sorted(self.level_cost, reverse=True):
            lines.append(f"level {k}: pixels {self.level_pixels[k]} "
                         f"per-call cost {self.level_cost[k]}")
        if self.predicted is not None:
            lines.append(f"recurrence prediction: {self.predicted}")
        return "\n".join(lines)

    def record(self):
        d = asdict(self)
        d["level_pixels"] = {str(k): v for k, v in self.level_pixels.items()}
        d["level_cost"] = {str(k): v for k, v in self.level_cost.items()}
        return json.dumps(d, sort_keys=True)


def _config(graph_or_cfg):
    return graph_or_cfg.config if isinstance(graph_or_cfg, G.NetworkGraph) else graph_or_cfg


def count_ops(graph_or_cfg, input_shape, itemsize=8):
    """Exact MACs and peak live activation bytes of one forward pass.

    ``level_cost[k]`` is the work one call of ``BP_k`` does itself, i.e. its
    ``mu`` downscale/upscale pairs without the recursive calls.
    """
    cfg = _config(graph_or_cfg)
    trace = G.trace_shapes(cfg, input_shape, itemsize)
    per_module = {}
    for row in trace.module_rows():
        per_module[row.tag] = row.macs
    level_cost = {k: 0 for k in range(1, cfg.levels + 1)}
    for k in range(2, cfg.levels + 1):
        down = next(r for r in trace.rows if r.kind == "Downscale" and r.level == k)
        up = next(r for r in trace.rows if r.kind == "Upscale" and r.level == k)
        level_cost[k] = cfg.mu * (down.macs + up.macs)
    overhead = sum(r.macs for r in trace.rows if r.kind in ("Analysis", "Synthesis"))
    pixels = {k: math.prod(s[-2:]) for k, s in trace.level_shapes.items()}
    return CostReport(trace.total_macs(), trace.peak_bytes, pixels, level_cost,
                      overhead, trace.leaf_calls, by_module=per_module)


def calibrate(graph_or_cfg, input_shape):
    """Table cost model whose per-level ``f`` is read off the exact counts."""
    cfg = _config(graph_or_cfg)
    report = count_ops(cfg, input_shape)
    top = math.prod(tuple(input_shape)[-2:])
    table = tuple(report.level_cost[cfg.levels - j] for j in range(cfg.levels))
    return CostModel(mu=cfg.mu, levels=cfg.levels, n=top, kind="table",
                     per_level=table, overhead=report.overhead)


def fit_exponent(pixels, costs):
    """Least-squares slope of log cost against log pixel count."""
    pts = [(math.log(n), math.log(c)) for n, c in zip(pixels, costs) if c > 0 and n > 0]
    if len(pts) < 2:
        return math.nan
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class Comparison:
    predicted: float
    counted: int
    gap: float
    exponent: float
    sublinear_half: bool

    def text(self):
        return (f"predicted {self.predicted} counted {self.counted} gap {self.gap:.3e}; "
                f"per-level cost exponent {self.exponent:.4f} "
                f"({'below' if self.sublinear_half else 'not below'} 1/2)")


def compare(model: CostModel, graph_or_cfg, input_shape):
    """Relative gap between ``model`` and the exact count, plus the fitted
    exponent of the graph's per-level cost against pixel count."""
    cfg = _config(graph_or_cfg)
    report = count_ops(cfg, input_shape)
    predicted = recurrence_cost(model)
    ks = [k for k in range(2, cfg.levels + 1)]
    alpha = fit_exponent([report.level_pixels[k] for k in ks],
                         [report.level_cost[k] for k in ks])
    gap = abs(predicted - report.macs) / report.macs
    return Comparison(predicted, report.macs, gap, alpha,
                      bool(alpha < 0.5) if not math.isnan(alpha) else False)


def level_feature_bytes(cfg, input_shape, itemsize=8):
    """Bytes of one feature tensor at each level, top level first."""
    trace = G.trace_shapes(cfg, input_shape, itemsize)
    return [math.prod(trace.level_shapes[k]) * itemsize for k in range(cfg.levels, 0, -1)]


def geometric_memory_bound(cfg, input_shape, itemsize=8):
    """``(sum over levels, (4/3) * top-level bytes)``.

    With non-increasing channel counts towards the coarse levels each level
    holds at most a quarter of the one above, so the sum stays under the
    geometric bound.
    """
    per_level = level_feature_bytes(cfg, input_shape, itemsize)
    return sum(per_level), 4.0 * per_level[0] / 3.0
