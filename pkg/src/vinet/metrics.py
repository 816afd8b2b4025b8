"""Saliency losses and evaluation metrics.

Maps are 2-D arrays indexed ``[y, x]``; fixations are ``(x, y)`` integer
pixel coordinates. ``kldiv`` also accepts a ``Tensor`` prediction, in which
case it returns a differentiable scalar ``Tensor`` (the training loss).
"""

from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np

from .tensor import Tensor

DEFAULT_EPS = 1e-7
NORM_TOL = 1e-4
DEFAULT_SIGMA = 9.0

Points = Union[np.ndarray, Sequence[tuple[int, int]]]


class Score(float):
    """A metric value that also records whether the input was degenerate."""

    degenerate: bool

    def __new__(cls, value: float, degenerate: bool = False):
        obj = super().__new__(cls, value)
        obj.degenerate = degenerate
        return obj


def as_points(fixations: Points, shape: tuple[int, int] = None) -> np.ndarray:
    """Validate fixations and return them as an ``[n, 2]`` int array of ``(x, y)``."""
    pts = np.asarray(fixations, dtype=np.int64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("fixation list is empty")
    if shape is not None:
        h, w = shape
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= w) | (pts[:, 1] < 0) | (pts[:, 1] >= h)
        if bad.any():
            x, y = pts[bad][0]
            raise ValueError(f"fixation ({x}, {y}) outside a {w}x{h} map")
    return pts


def _check_distribution(m: np.ndarray, name: str) -> None:
    if np.any(m < 0):
        raise ValueError(f"{name} has negative entries")
    sums = m.sum(axis=(-2, -1)) if m.ndim >= 2 else m.sum()
    if np.any(np.abs(sums - 1.0) > NORM_TOL):
        raise ValueError(f"{name} is not normalized (sum={np.ravel(sums)[0]:.6g})")


def kldiv(p, q, eps: float = DEFAULT_EPS):
    """``sum_i Q_i * log(eps + Q_i / (P_i + eps))`` with natural log.

    ``p`` is the prediction, ``q`` the ground truth, both normalized. For
    stacked ``[N, H, W]`` inputs the per-map divergences are averaged.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    _check_distribution(q, "ground truth")
    if isinstance(p, Tensor):
        _check_distribution(p.data, "prediction")
        if p.shape != q.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
        qt = q.astype(p.dtype)
        per_map = (Tensor(qt, dtype=p.dtype.type) * ((qt / (p + eps)) + eps).log())
        total = per_map.sum()
        return total * (1.0 / q.shape[0]) if q.ndim == 3 else total
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p, "prediction")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    total = float(np.sum(q * np.log(eps + q / (p + eps))))
    return total / q.shape[0] if q.ndim == 3 else total


def cc(p, q) -> Score:
    """Pearson correlation over all pixels; 0 (flagged degenerate) for a constant map."""
    a = np.asarray(p, dtype=np.float64).ravel()
    b = np.asarray(q, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(q)}")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0:
        return Score(0.0, degenerate=True)
    return Score(float(np.clip(np.dot(a, b) / denom, -1.0, 1.0)))


def sim(p, q) -> float:
    """Histogram intersection of two normalized maps."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_distribution(p, "first map")
    _check_distribution(q, "second map")
    if np.array_equal(p, q):
        return 1.0  # exact; summation rounding would otherwise leave 1 - O(ulp)
    return float(np.minimum(p, q).sum())


def normalize_distribution(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    total = m.sum()
    if total <= 0 or np.any(m < 0):
        raise ValueError("map must be non-negative with positive mass")
    return m / total


def nss(p, fixations: Points) -> Score:
    """Mean of the standardized map (population std) at fixated pixels."""
    p = np.asarray(p, dtype=np.float64)
    pts = as_points(fixations, p.shape)
    std = p.std()
    if std == 0:
        return Score(0.0, degenerate=True)
    z = (p - p.mean()) / std
    return Score(float(z[pts[:, 1], pts[:, 0]].mean()))


def _roc_area(pos: np.ndarray, neg: np.ndarray) -> float:
    """Trapezoidal ROC area with thresholds at the distinct positive values."""
    thresholds = np.unique(pos)[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tp = (pos.size - np.searchsorted(pos_sorted, thresholds, side="left")) / pos.size
    fp = (neg.size - np.searchsorted(neg_sorted, thresholds, side="left")) / neg.size
    tpr = np.concatenate([[0.0], tp, [1.0]])
    fpr = np.concatenate([[0.0], fp, [1.0]])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_judd(p, fixations: Points) -> float:
    """ROC area of the map as a fixated-vs-non-fixated pixel classifier."""
    p = np.asarray(p, dtype=np.float64)
    pts = as_points(fixations, p.shape)
    fixated = np.zeros(p.shape, dtype=bool)
    fixated[pts[:, 1], pts[:, 0]] = True
    neg = p[~fixated]
    if neg.size == 0:
        raise ValueError("every pixel is fixated; no negatives for AUC")
    return _roc_area(p[pts[:, 1], pts[:, 0]], neg)


def flatten_pool(shuffle_pool: Iterable[Points], shape: tuple[int, int]) -> np.ndarray:
    records = [as_points(r, shape) for r in shuffle_pool if len(np.asarray(r).reshape(-1, 2))]
    if not records:
        raise ValueError("shuffle pool is empty")
    return np.concatenate(records)


def sauc(p, fixations: Points, shuffle_pool: Iterable[Points], n_splits: int = 100,
         rng_seed: int = 0) -> float:
    """Shuffled AUC: negatives resampled from other frames' fixation locations.

    Each split draws ``len(fixations)`` negatives with replacement from the
    pooled locations; the result is the mean ROC area over splits.
    """
    p = np.asarray(p, dtype=np.float64)
    pts = as_points(fixations, p.shape)
    pool = flatten_pool(shuffle_pool, p.shape)
    pos = p[pts[:, 1], pts[:, 0]]
    pool_vals = p[pool[:, 1], pool[:, 0]]
    rng = np.random.default_rng(rng_seed)
    areas = [_roc_area(pos, pool_vals[rng.integers(0, pool_vals.size, size=pos.size)])
             for _ in range(n_splits)]
    return float(np.mean(areas))


def fixations_to_density(fixations: Points, height: int, width: int,
                         sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Sum of isotropic Gaussians at the fixations, cut off beyond 4 sigma, summing to 1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = as_points(fixations, (height, width))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width), dtype=np.float64)
    cutoff = (4.0 * sigma) ** 2
    for x, y in pts:
        d2 = (xx - x) ** 2 + (yy - y) ** 2
        out += np.where(d2 <= cutoff, np.exp(-d2 / (2.0 * sigma ** 2)), 0.0)
    return out / out.sum()


def all_metrics(pred: np.ndarray, density: np.ndarray, fixations: Points,
                shuffle_pool: Iterable[Points], n_splits: int = 100, seed: int = 0,
                eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Every metric for one frame; the prediction is normalized where a metric needs it."""
    pred_dist = normalize_distribution(pred)
    return {
        "cc": float(cc(pred, density)),
        "sim": sim(pred_dist, density),
        "auc_judd": auc_judd(pred, fixations),
        "sauc": sauc(pred, fixations, shuffle_pool, n_splits, seed),
        "nss": float(nss(pred, fixations)),
        "kldiv": kldiv(pred_dist, density, eps),
    }
