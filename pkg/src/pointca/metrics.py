"""Point-set distances and the attack evaluation metrics.

All Chamfer-based metrics default to the ``CD_P`` variant::

    CD_P(a, b) = (mean_a min_b |a - b| + mean_b min_a |b - a|) / 2
    CD_T(a, b) =  mean_a min_b |a - b|^2 + mean_b min_a |b - a|^2
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyInput, InvalidParam, SizeMismatch, TooLargeForExact, ZeroDenominator
from .geometry import as_points

CD_P = "CD_P"
CD_T = "CD_T"
EXACT_EMD_LIMIT = 512


def _nonempty(a, name="cloud"):
    pts = as_points(a)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EmptyCloud(f"{name} is empty")
    return pts


def nearest(a, b):
    """For each row of ``a`` the index of and exact distance to its nearest row of ``b``.

    Candidates come from a kd-tree over ``b``; the winning distance is
    recomputed from the coordinate difference so coincident points give
    exactly zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _, idx = cKDTree(b).query(a)
    diff = a - b[idx]
    return idx, np.sqrt(np.einsum("ij,ij->i", diff, diff))


def mutual_nearest(a, b):
    """Nearest-neighbor indices and exact distances in both directions.

    Returns ``(idx_ab, dist_ab, idx_ba, dist_ba)``.
    """
    return (*nearest(a, b), *nearest(b, a))


def chamfer(a, b, variant=CD_P) -> float:
    """Symmetric Chamfer distance between two nonempty clouds (sizes may differ)."""
    pa, pb = _nonempty(a, "a"), _nonempty(b, "b")
    _, dab, _, dba = mutual_nearest(pa, pb)
    if variant == CD_P:
        return float(0.5 * (dab.mean() + dba.mean()))
    if variant == CD_T:
        return float((dab**2).mean() + (dba**2).mean())
    raise InvalidParam(f"unknown Chamfer variant {variant!r}")


def _cost_matrix(pa, pb):
    diff = pa[:, None, :] - pb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _equal_sizes(a, b):
    pa, pb = _nonempty(a, "a"), _nonempty(b, "b")
    if pa.shape[0] != pb.shape[0]:
        raise SizeMismatch(f"EMD needs equal sizes, got {pa.shape[0]} and {pb.shape[0]}")
    return pa, pb


def emd_exact(a, b) -> float:
    """Earth mover's distance via optimal assignment on the dense cost matrix."""
    pa, pb = _equal_sizes(a, b)
    if pa.shape[0] > EXACT_EMD_LIMIT:
        raise TooLargeForExact(
            f"exact EMD is limited to {EXACT_EMD_LIMIT} points, got {pa.shape[0]}"
        )
    cost = _cost_matrix(pa, pb)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / pa.shape[0])


def auction_assignment(cost, eps_final, scale=5.0, max_rounds=1_000_000):
    """Minimum-cost assignment by epsilon-scaling auction (Jacobi bidding).

    Returns ``cols`` with ``cols[i]`` the object assigned to person ``i``. The
    final assignment is within ``n * eps_final`` of the optimal total cost.
    """
    n = cost.shape[0]
    value = -cost
    prices = np.zeros(n)
    eps = max(float(cost.max()) / 4.0, eps_final)
    rows = np.arange(n)
    while True:
        owner = np.full(n, -1, dtype=np.intp)
        assigned = np.full(n, -1, dtype=np.intp)
        for _ in range(max_rounds):
            free = np.flatnonzero(assigned < 0)
            if free.size == 0:
                break
            net = value[free] - prices[None, :]
            best = np.argmax(net, axis=1)
            w1 = net[np.arange(free.size), best]
            net[np.arange(free.size), best] = -np.inf
            w2 = net.max(axis=1) if n > 1 else w1
            bids = prices[best] + (w1 - w2) + eps
            # highest bid per object wins; ties go to the lowest person index
            order = np.lexsort((free, -bids, best))
            obj_sorted = best[order]
            first = np.ones(order.size, dtype=bool)
            first[1:] = obj_sorted[1:] != obj_sorted[:-1]
            win = order[first]
            objs = best[win]
            prev = owner[objs]
            assigned[prev[prev >= 0]] = -1
            owner[objs] = free[win]
            assigned[free[win]] = objs
            prices[objs] = bids[win]
        if eps <= eps_final:
            return assigned
        eps = max(eps / scale, eps_final)
    return rows  # pragma: no cover


def emd_approx(a, b, iterations=8) -> float:
    """Upper bound on the EMD from an epsilon-scaling auction.

    ``iterations`` is the number of scaling phases; each phase divides the bid
    increment by 5, starting from a quarter of the largest pairwise cost.
    """
    pa, pb = _equal_sizes(a, b)
    if iterations < 1:
        raise InvalidParam("iterations must be >= 1")
    cost = _cost_matrix(pa, pb)
    top = float(cost.max())
    if top == 0.0:
        return 0.0
    eps_final = top / 4.0 / 5.0 ** (iterations - 1)
    cols = auction_assignment(cost, eps_final)
    return float(cost[np.arange(pa.shape[0]), cols].sum() / pa.shape[0])


def emd(a, b) -> float:
    """Exact EMD when small enough, auction approximation otherwise."""
    if as_points(a).shape[0] <= EXACT_EMD_LIMIT:
        return emd_exact(a, b)
    return emd_approx(a, b)


def _ratio(num, den):
    if not den > 0:
        raise ZeroDenominator(f"normalizing distance must be > 0, got {den}")
    return num / den


def t_nre(adv_output, target_gt, target_partial_output, denominator=None) -> float:
    """Target reconstruction error normalized by the clean target's own error.

    ``denominator`` may carry a cached ``CD_P(f(Y^P), Y)``.
    """
    num = chamfer(adv_output, target_gt)
    den = chamfer(target_partial_output, target_gt) if denominator is None else denominator
    return _ratio(num, den)


def s_nre(defended_output, source_gt, clean_output, denominator=None) -> float:
    """Source reconstruction error normalized by the clean source's error."""
    num = chamfer(defended_output, source_gt)
    den = chamfer(clean_output, source_gt) if denominator is None else denominator
    return _ratio(num, den)


def relative_asr(t_nre_values, thresholds):
    """Fraction of attacks with T-NRE strictly below each threshold.

    Returns a list of ``(threshold, fraction)`` pairs.
    """
    vals = np.asarray(list(t_nre_values), dtype=np.float64)
    taus = np.asarray(list(thresholds), dtype=np.float64)
    if vals.size == 0:
        raise EmptyInput("no T-NRE values")
    if taus.size == 0:
        raise EmptyInput("no thresholds")
    if np.any(np.diff(taus) < 0):
        raise InvalidParam("thresholds must be sorted ascending")
    ordered = np.sort(vals)
    counts = np.searchsorted(ordered, taus, side="left")
    return [(float(t), float(c) / vals.size) for t, c in zip(taus, counts)]


def perturbation_budget(adv, clean) -> float:
    return chamfer(adv, clean, CD_P)


def outlier_count(cloud, k=2, alpha=1.1) -> int:
    """SOR outlier count with the defense defaults."""
    from .defense import sor

    return sor(cloud, k, alpha)[1]


@dataclass
class MetricReport:
    t_re_cd: float
    t_re_emd: float
    t_nre_cd: float
    t_nre_denominator: float
    s_re: float
    s_nre: float
    perturbation_budget_cd: float
    outlier_count: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidParam(f"{f.name} must be >= 0")
        if not self.t_nre_denominator > 0:
            raise ZeroDenominator("t_nre_denominator must be > 0")

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def to_row(self):
        return [getattr(self, name) for name in self.header()]

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv(self, with_header=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if with_header:
            w.writerow(self.header())
        w.writerow([repr(v) if isinstance(v, float) else v for v in self.to_row()])
        return buf.getvalue()
