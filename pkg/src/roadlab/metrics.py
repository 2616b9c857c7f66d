"""Off-policy and on-policy driving metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DegenerateInputError, DomainError, ShapeError
from .numerics import Rng

DPI_CAP = 10_000.0
FAILURE_THRESHOLD = 1.0
PERM_BLOCK = 1000


def whiteness(angles, dt: float) -> float:
    """RMS rate of change of a steering sequence, in degrees per second.

    The mean runs over the ``len(angles) - 1`` consecutive differences.
    """
    p = np.asarray(angles, dtype=np.float64).ravel()
    if p.size < 2:
        raise DomainError("whiteness needs at least two angles")
    if not dt > 0 or not math.isfinite(dt):
        raise DomainError("dt must be positive")
    rate = np.diff(p) / dt
    return float(np.sqrt(np.mean(rate * rate)))


def trajectory_offsets(model_traj, human_traj) -> np.ndarray:
    """Mean distance from each model point to its two nearest human points."""
    model = np.asarray(model_traj, dtype=np.float64).reshape(-1, 2)
    human = np.asarray(human_traj, dtype=np.float64).reshape(-1, 2)
    if len(model) == 0 or len(human) == 0:
        raise DomainError("trajectories must be non-empty")
    if len(human) < 2:
        raise DomainError("human trajectory needs at least two points")
    dist, _ = cKDTree(human).query(model, k=2)
    return dist.mean(axis=1)


def _offsets(offsets) -> np.ndarray:
    arr = np.asarray(offsets, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DomainError("offsets must be non-empty")
    return arr


def mae_trajectory(offsets) -> float:
    return float(np.mean(_offsets(offsets)))


def failure_rate(offsets, threshold: float = FAILURE_THRESHOLD) -> float:
    """Fraction of samples strictly above ``threshold``."""
    return float(np.mean(_offsets(offsets) > threshold))


def dpi(distance: float, interventions: int, cap: float = DPI_CAP) -> float:
    if distance < 0 or interventions < 0:
        raise DomainError("distance and interventions must be non-negative")
    if interventions == 0:
        return float(cap)
    return float(distance) / interventions


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch {x.size} vs {y.size}")
    if x.size < 3:
        raise DomainError("pearson needs at least three pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("zero variance input to pearson")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def zscore(values, ddof: int = 0) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    sd = v.std(ddof=ddof)
    if sd == 0:
        raise DegenerateInputError("zero variance column")
    return (v - v.mean()) / sd


def combined_score(mae_steer, w_off) -> np.ndarray:
    """Sum of population z-scores of the two columns."""
    a = np.asarray(mae_steer, dtype=np.float64).ravel()
    b = np.asarray(w_off, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("columns differ in length")
    if a.size < 2:
        raise DomainError("need at least two deployments")
    return zscore(a) + zscore(b)


def _rows_pearson(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise Pearson r of two (k, n) arrays; NaN for degenerate rows."""
    dx = x - x.mean(axis=1, keepdims=True)
    dy = y - y.mean(axis=1, keepdims=True)
    den = np.sqrt(np.einsum("ij,ij->i", dx, dx) * np.einsum("ij,ij->i", dy, dy))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.einsum("ij,ij->i", dx, dy) / den


@dataclass(frozen=True)
class PermutationResult:
    observed: float  # |r(dpi, A)| - |r(dpi, B)|
    mean_effect: float  # mean signed r(dpi, A) - r(dpi, B)
    p_value: float
    n_perm: int
    method: str

    def __iter__(self):
        yield self.mean_effect
        yield self.p_value


def permutation_test_corr_diff(metric_a, metric_b, dpi_values, n_perm: int = 10_000, seed: int = 0,
                               method: str = "bootstrap") -> PermutationResult:
    """Compare how strongly two metrics correlate with DpI.

    ``method="bootstrap"`` resamples deployments with replacement; the mean
    effect is the average signed ``r(dpi, A) - r(dpi, B)`` and the p-value
    is the share of resamples where A is not the stronger correlate.
    ``method="swap"`` exchanges A and B per deployment with probability 1/2
    and reports the two-sided share of null statistics at least as extreme
    as observed.

    Draws come in blocks of 1000 seeded from ``seed`` and the block index, so
    results do not depend on how blocks are scheduled.
    """
    a = np.asarray(metric_a, dtype=np.float64).ravel()
    b = np.asarray(metric_b, dtype=np.float64).ravel()
    d = np.asarray(dpi_values, dtype=np.float64).ravel()
    if not a.size == b.size == d.size:
        raise ShapeError("metric and dpi columns differ in length")
    if n_perm < 1000:
        raise ConfigError("n_perm must be at least 1000")
    if method not in ("bootstrap", "swap"):
        raise ConfigError(f"unknown method {method!r}")
    observed = abs(pearson(d, a)) - abs(pearson(d, b))
    root = Rng(seed)
    n = d.size
    effects, hits, used = [], 0, 0
    for block in range(math.ceil(n_perm / PERM_BLOCK)):
        k = min(PERM_BLOCK, n_perm - block * PERM_BLOCK)
        rng = root.child(block)
        if method == "bootstrap":
            idx = rng.integers(0, n, size=(k, n))
            ra = _rows_pearson(d[idx], a[idx])
            rb = _rows_pearson(d[idx], b[idx])
            ok = np.isfinite(ra) & np.isfinite(rb)
            ra, rb = ra[ok], rb[ok]
            effects.append(ra - rb)
            hits += int(np.sum(np.abs(ra) - np.abs(rb) <= 0))
            used += int(ok.sum())
        else:
            swap = rng.random((k, n)) < 0.5
            pa, pb = np.where(swap, b, a), np.where(swap, a, b)
            dd = np.broadcast_to(d, (k, n))
            ra, rb = _rows_pearson(dd, pa), _rows_pearson(dd, pb)
            stat = np.abs(ra) - np.abs(rb)
            effects.append(ra - rb)
            hits += int(np.sum(np.abs(stat) >= abs(observed) - 1e-12))
            used += k
    if used == 0:
        raise DegenerateInputError("every resample was degenerate")
    if method == "swap":
        mean_effect = pearson(d, a) - pearson(d, b)
    else:
        mean_effect = float(np.mean(np.concatenate(effects)))
    return PermutationResult(observed, mean_effect, hits / used, n_perm, method)


@dataclass(frozen=True)
class OnPolicySummary:
    distance: float
    interventions: int
    dpi: float
    mae_trajectory: float
    failure_rate: float
    w_on_policy: float
    w_effective: float

    def __post_init__(self):
        if self.interventions > 0 and abs(self.dpi - self.distance / self.interventions) > 1e-9 * max(1.0, self.dpi):
            raise DomainError("dpi disagrees with distance / interventions")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise DomainError("failure_rate outside [0, 1]")


def summarize_on_policy(logs, human_trajs, dt_policy: float, cap: float = DPI_CAP) -> OnPolicySummary:
    """Pool several episodes into one on-policy summary.

    ``human_trajs[i]`` is the reference (x, y) path for ``logs[i]``. Whiteness
    is computed per episode and averaged with weights equal to the number of
    differences, which equals the RMS over the pooled differences.
    """
    if len(logs) == 0 or len(logs) != len(human_trajs):
        raise DomainError("need one human trajectory per episode")
    distance = sum(log.distance for log in logs)
    interventions = sum(len(log.interventions) for log in logs)
    offsets = np.concatenate([trajectory_offsets(log.trajectory[:, 1:3], h) for log, h in zip(logs, human_trajs)])

    def pooled(attr):
        num = den = 0.0
        for log in logs:
            seq = getattr(log, attr)[:, 1]
            if len(seq) >= 2:
                num += whiteness(seq, dt_policy) ** 2 * (len(seq) - 1)
                den += len(seq) - 1
        if den == 0:
            raise DomainError("episodes too short for whiteness")
        return math.sqrt(num / den)

    return OnPolicySummary(
        distance=distance, interventions=interventions, dpi=dpi(distance, interventions, cap),
        mae_trajectory=mae_trajectory(offsets), failure_rate=failure_rate(offsets),
        w_on_policy=pooled("steering_cmd"), w_effective=pooled("steering_eff"))
