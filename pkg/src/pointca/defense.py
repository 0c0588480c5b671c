"""Preprocessing defenses: random subsampling, outlier removal and SOR.

Every defense only drops points; nothing is moved or synthesized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AllPointsRemoved, InvalidParam, TooFewPoints, ZeroDenominator
from .geometry import PointCloud, as_points, knn
from .metrics import chamfer

DEFENSES = ("none", "srs", "or", "sor")


@dataclass
class DefenseConfig:
    srs_drop_rate: float = 0.3
    or_threshold: float = 0.05
    sor_k: int = 2
    sor_alpha: float = 1.1
    seed: int = 0

    def validate(self):
        if not 0 <= self.srs_drop_rate < 1:
            raise InvalidParam(f"srs_drop_rate must be in [0, 1), got {self.srs_drop_rate}")
        if not self.or_threshold > 0:
            raise InvalidParam(f"or_threshold must be > 0, got {self.or_threshold}")
        if self.sor_k < 1:
            raise InvalidParam(f"sor_k must be >= 1, got {self.sor_k}")
        if self.sor_alpha < 0:
            raise InvalidParam(f"sor_alpha must be >= 0, got {self.sor_alpha}")
        return self


def _subset(cloud, keep):
    pts = as_points(cloud)[keep]
    if isinstance(cloud, PointCloud):
        return cloud.with_points(pts)
    return PointCloud(pts)


def mean_knn_distance(cloud, k):
    """Mean distance from every point to its ``k`` nearest other points."""
    pts = as_points(cloud)
    if pts.shape[0] <= k:
        raise TooFewPoints(f"need more than K={k} points, got {pts.shape[0]}")
    return knn(pts, k)[1].mean(axis=1)


def srs(cloud, drop_rate=0.3, seed=0) -> PointCloud:
    """Keep a uniformly random ``ceil((1 - drop_rate) * m)`` subset, in input order."""
    if not 0 <= drop_rate < 1:
        raise InvalidParam(f"drop_rate must be in [0, 1), got {drop_rate}")
    m = len(as_points(cloud))
    n_keep = math.ceil((1.0 - drop_rate) * m - 1e-9)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(m, size=n_keep, replace=False))
    return _subset(cloud, keep)


def outlier_removal(cloud, threshold=0.05, k=2) -> PointCloud:
    """Drop points whose mean kNN distance exceeds ``threshold``."""
    d = mean_knn_distance(cloud, k)
    keep = np.flatnonzero(d <= threshold)
    if keep.size == 0:
        raise AllPointsRemoved(f"every point has mean {k}-NN distance above {threshold}")
    return _subset(cloud, keep)


def sor(cloud, k=2, alpha=1.1):
    """Statistical outlier removal.

    Keeps points whose mean kNN distance is strictly below ``mu + alpha * sigma``
    (population statistics over the cloud). When ``sigma`` is zero every point
    sits exactly on the threshold and all are kept.

    Returns:
        (filtered cloud, number of removed points)
    """
    d = mean_knn_distance(cloud, k)
    mu = d.mean()
    sigma = d.std()
    if sigma == 0:
        keep = np.arange(d.size)
    else:
        keep = np.flatnonzero(d < mu + alpha * sigma)
    return _subset(cloud, keep), int(d.size - keep.size)


def apply_defense(cloud, name, cfg: DefenseConfig = None) -> PointCloud:
    cfg = cfg or DefenseConfig()
    cfg.validate()
    if name == "none":
        return cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    if name == "srs":
        return srs(cloud, cfg.srs_drop_rate, cfg.seed)
    if name == "or":
        return outlier_removal(cloud, cfg.or_threshold, cfg.sor_k)
    if name == "sor":
        return sor(cloud, cfg.sor_k, cfg.sor_alpha)[0]
    raise InvalidParam(f"unknown defense {name!r}; expected one of {DEFENSES}")


def evaluate_defended(model, adv, source_gt, clean_output, defense="sor", cfg=None, denominator=None):
    """Source reconstruction error of the defended input and its normalized form.

    Returns ``(s_re, s_nre)`` where ``s_re = CD_P(f(defense(adv)), X)`` and
    ``s_nre = s_re / CD_P(f(X^P), X)``.
    """
    defended = apply_defense(adv, defense, cfg)
    out = model.predict(defended.points)
    s_re = chamfer(out, source_gt)
    den = chamfer(clean_output, source_gt) if denominator is None else denominator
    if not den > 0:
        raise ZeroDenominator("clean reconstruction error is zero")
    return s_re, s_re / den
