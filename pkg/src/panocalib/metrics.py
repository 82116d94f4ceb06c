"""Depth evaluation metrics over mutually valid pixels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthMap

DEFAULT_LAMBDAS = (1.25, 1.25**2, 1.25**3)


class MetricError(ValueError):
    pass


@dataclass
class DepthMetrics:
    mae: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    inlier: dict = field(default_factory=dict)  # threshold -> fraction
    count: int = 0
    # pixels left out of the relative and log terms for a non-positive depth
    excluded: int = 0

    def header(self) -> str:
        cols = ["mae", "abs_rel", "sq_rel", "rmse", "rmse_log"] + [f"inlier_{lam:g}" for lam in self.inlier]
        return ",".join(cols)

    def as_row(self) -> str:
        vals = [self.mae, self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, *self.inlier.values()]
        return ",".join(repr(float(v)) for v in vals)


def _raw(d) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(d, DepthMap):
        return d.depth, d.valid
    arr = np.asarray(d, dtype=np.float64)
    return arr, np.isfinite(arr)


def depth_metrics(pred, gt, lambdas=DEFAULT_LAMBDAS) -> DepthMetrics:
    """MAE, AbsRel, SqRel, RMSE, RMSE-log and inlier ratios.

    Inputs are :class:`DepthMap` or raw arrays (NaN marks invalid). Every
    metric is normalized by the number of mutually valid pixels.
    """
    d, dv = _raw(pred)
    g, gv = _raw(gt)
    if d.shape != g.shape:
        raise MetricError(f"shape mismatch {d.shape} vs {g.shape}")
    both = dv & gv
    n = int(both.sum())
    if n == 0:
        raise MetricError("no mutually valid pixels")
    d, g = d[both], g[both]
    err = d - g
    pos = (g > 0) & (d > 0)
    excluded = int(n - pos.sum())
    dp, gp = d[pos], g[pos]
    if len(gp):
        abs_rel = float(np.mean(np.abs(dp - gp) / gp))
        sq_rel = float(np.mean((dp - gp) ** 2 / gp))
        rmse_log = float(np.sqrt(np.mean((np.log(dp) - np.log(gp)) ** 2)))
        ratio = np.maximum(dp / gp, gp / dp)
        inlier = {float(lam): float(np.mean(ratio < lam)) for lam in lambdas}
    else:
        abs_rel = sq_rel = rmse_log = float("nan")
        inlier = {float(lam): float("nan") for lam in lambdas}
    return DepthMetrics(
        mae=float(np.mean(np.abs(err))),
        abs_rel=abs_rel,
        sq_rel=sq_rel,
        rmse=float(np.sqrt(np.mean(err * err))),
        rmse_log=rmse_log,
        inlier=inlier,
        count=n,
        excluded=excluded,
    )


def mean_metrics(items: list) -> DepthMetrics:
    """Unweighted mean of per-image metrics (each image counts once)."""
    if not items:
        raise MetricError("nothing to average")
    keys = list(items[0].inlier)
    return DepthMetrics(
        mae=float(np.mean([m.mae for m in items])),
        abs_rel=float(np.mean([m.abs_rel for m in items])),
        sq_rel=float(np.mean([m.sq_rel for m in items])),
        rmse=float(np.mean([m.rmse for m in items])),
        rmse_log=float(np.mean([m.rmse_log for m in items])),
        inlier={k: float(np.mean([m.inlier[k] for m in items])) for k in keys},
        count=sum(m.count for m in items),
        excluded=sum(m.excluded for m in items),
    )
