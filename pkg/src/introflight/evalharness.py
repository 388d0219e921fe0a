"""Risk-averse evaluation: error over retained fraction, ranked by reliability.

Instances carry a model reliability, a ground-truth error, and an
uncertainty side-channel. Curves report the mean true error of the top
fraction retained under a ranking; the oracle ranks by true error, chance
retains at random (its expectation is the overall mean), and the baseline
ranks by negated uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np

from .vo import InverseDepthMap

FR_GRID = tuple(round(0.05 * k, 10) for k in range(1, 21))


@dataclass(frozen=True)
class ScoredInstance:
    uid: int
    reliability: float
    true_error: float
    uncertainty: float = 0.0


@dataclass
class RamCurve:
    fr: np.ndarray
    error: np.ndarray
    label: str

    def auc(self) -> float:
        return float(np.trapezoid(self.error, self.fr))


def true_error(est: InverseDepthMap, true_depth: np.ndarray) -> float:
    """Mean absolute inverse-depth error over the map's structure pixels.

    true_depth is metric depth along the optical axis; rays that escaped the
    scene (inf) have true inverse depth zero, so spurious structure there
    counts as error. Pixels that are correctly sky on both sides (estimate
    and truth both zero) carry no information and are excluded so the mean
    reflects structure accuracy, not the sky fraction of the view. NaN when
    nothing qualifies.
    """
    z = np.asarray(true_depth, dtype=float)
    with np.errstate(divide="ignore"):
        d_true = np.where(np.isfinite(z), 1.0 / np.maximum(z, 1e-9), 0.0)
    mask = est.valid & ((est.d > 0.0) | (d_true > 0.0))
    if not np.any(mask):
        return float("nan")
    return float(np.abs(est.d[mask] - d_true[mask]).mean())


def retained_count(fr: float, n: int) -> int:
    """ceil(FR * n), at least one instance."""
    return max(1, ceil(fr * n - 1e-12))


def ram_curve(
    instances: list[ScoredInstance],
    grid=FR_GRID,
    scores: np.ndarray | None = None,
    label: str = "model",
) -> RamCurve:
    """Mean true error of the retained prefix at each fraction.

    Instances are ranked by score descending (default: their reliability);
    ties break by uid ascending so the curve is deterministic.
    """
    if not instances:
        raise ValueError("no instances")
    n = len(instances)
    err = np.array([i.true_error for i in instances], dtype=float)
    s = np.array([i.reliability for i in instances], dtype=float) if scores is None else np.asarray(scores, dtype=float)
    if len(s) != n:
        raise ValueError("scores length mismatch")
    uids = np.array([i.uid for i in instances])
    order = np.lexsort((uids, -s))
    csum = np.cumsum(err[order])
    fr = np.asarray(grid, dtype=float)
    ks = np.array([retained_count(f, n) for f in fr])
    return RamCurve(fr, csum[ks - 1] / ks, label)


def oracle_curve(instances, grid=FR_GRID) -> RamCurve:
    err = np.array([i.true_error for i in instances])
    return ram_curve(instances, grid, scores=-err, label="oracle")


def anti_oracle_curve(instances, grid=FR_GRID) -> RamCurve:
    err = np.array([i.true_error for i in instances])
    return ram_curve(instances, grid, scores=err, label="anti-oracle")


def chance_curve(instances, grid=FR_GRID) -> RamCurve:
    """Expected curve of a random ranking: flat at the overall mean error."""
    if not instances:
        raise ValueError("no instances")
    mean = float(np.mean([i.true_error for i in instances]))
    fr = np.asarray(grid, dtype=float)
    return RamCurve(fr, np.full(len(fr), mean), "chance")


def baseline_curve(instances, grid=FR_GRID) -> RamCurve:
    """Uncertainty baseline: rank by negated uncertainty, no extra machinery."""
    unc = np.array([i.uncertainty for i in instances])
    return ram_curve(instances, grid, scores=-unc, label="baseline")


@dataclass
class ComparisonReport:
    curves: list[RamCurve]
    aucs: dict = field(default_factory=dict)
    auc_ratio_vs_chance: dict = field(default_factory=dict)

    def table(self) -> list[tuple]:
        rows = []
        for j, f in enumerate(self.curves[0].fr):
            rows.append((float(f),) + tuple(float(c.error[j]) for c in self.curves))
        return rows


def compare(curves: list[RamCurve]) -> ComparisonReport:
    """Per-fraction table plus trapezoidal AUCs and ratios against chance."""
    if not curves:
        raise ValueError("no curves")
    base = curves[0].fr
    for c in curves[1:]:
        if not np.allclose(c.fr, base):
            raise ValueError("curves use different retained-fraction grids")
    aucs = {c.label: c.auc() for c in curves}
    chance = aucs.get("chance")
    ratios = {}
    if chance and chance > 0.0:
        ratios = {c.label: aucs[c.label] / chance for c in curves}
    return ComparisonReport(list(curves), aucs, ratios)
