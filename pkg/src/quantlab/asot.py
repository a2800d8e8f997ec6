"""Adaptive outlier-token selection (ASOT).

A token is an outlier at threshold ``k`` when its largest per-channel
standardized coordinate exceeds ``k``. Across ``m`` calibration samples the
positional inconsistency::

    eta(k) = 1 - mean_r |T_r(k)| / |union_r T_r(k)|

measures how loosely the selected positions are tied to fixed sequence
locations. The chosen threshold is the smallest grid point at which ``eta``
has flattened out while the selection is still sparse; selected tokens then
get weight ``gamma`` in the rotation objective.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .activations import ActivationBatch, channel_stats
from .errors import ConfigError, SelectionError


def default_grid():
    return tuple(np.round(np.arange(2.0, 8.0 + 1e-9, 0.25), 10))


@dataclass(frozen=True)
class AsotConfig:
    grid: tuple = field(default_factory=default_grid)
    delta: float = 0.02
    tau: float = 0.4
    gamma: float = 30.0
    m: int = 10
    outliers_only: bool = False
    difference: str = "forward"

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 1 or g.size < 3:
            raise ConfigError("threshold grid needs at least 3 points")
        if np.any(np.diff(g) <= 0):
            raise ConfigError("threshold grid must be strictly increasing")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if not (np.isfinite(self.gamma) and self.gamma >= 1):
            raise ConfigError("gamma must be finite and >= 1; use outliers_only for the limit")
        if self.m < 1:
            raise ConfigError("m must be positive")
        if self.difference not in ("forward", "backward"):
            raise ConfigError(f"unknown difference scheme {self.difference!r}")
        object.__setattr__(self, "grid", tuple(float(k) for k in g))


@dataclass(frozen=True, eq=False)
class OutlierSelection:
    per_sample_sets: list
    k_star: float
    eta_curve: list
    weights: np.ndarray
    mean_sizes: list = field(default_factory=list)


def outlier_scores(sample, stats):
    """Per-token infinity norm of the standardized token ``(x - mu) / sigma``."""
    X = np.asarray(getattr(sample, "data", sample), dtype=np.float64)
    if X.shape[-1] != stats.mu.shape[0]:
        raise ConfigError(f"sample dim {X.shape[-1]} != stats dim {stats.mu.shape[0]}")
    return np.max(np.abs((X - stats.mu) / stats.sigma), axis=-1)


def token_set(scores, k):
    return frozenset(np.flatnonzero(np.asarray(scores) > k).tolist())


def inconsistency_eta(sets):
    """1 - (mean set size) / (union size); 0 when the union is empty."""
    sets = list(sets)
    if not sets:
        raise ConfigError("need at least one token set")
    union = frozenset().union(*sets)
    if not union:
        return 0.0
    # exact rational, rounded once
    return float(1 - Fraction(sum(len(s) for s in sets), len(sets) * len(union)))


def _discrete_gradient(grid, eta, scheme):
    grid = np.asarray(grid)
    eta = np.asarray(eta)
    fwd = np.diff(eta) / np.diff(grid)
    if scheme == "forward":
        # last point has no right neighbour: reuse the final one-sided slope
        return np.append(fwd, fwd[-1])
    return np.insert(fwd, 0, fwd[0])


def first_stable_index(grid, eta, mean_sizes, n_tokens, config):
    """Index of the first grid point with ``|d eta| < delta`` and sparse, non-empty sets, or None."""
    slope = _discrete_gradient(grid, eta, config.difference)
    for j in range(len(grid)):
        if abs(slope[j]) < config.delta and 0 < mean_sizes[j] < config.tau * n_tokens:
            return j
    return None


def token_weights(selection_sets, n_tokens, gamma, outliers_only=False):
    """Weights ``gamma`` on selected tokens and 1 elsewhere, concatenated per sample.

    With ``outliers_only`` the weights are 1 on selected tokens and 0 elsewhere.
    """
    if not (np.isfinite(gamma) and gamma >= 1):
        raise ConfigError("gamma must be finite and >= 1")
    hi, lo = (1.0, 0.0) if outliers_only else (float(gamma), 1.0)
    out = []
    for s in selection_sets:
        w = np.full(n_tokens, lo)
        if s:
            w[sorted(s)] = hi
        out.append(w)
    return np.concatenate(out) if out else np.array([])


def select_threshold(samples, stats=None, config=None):
    """Choose ``k*`` on the grid and build the per-token weights.

    ``k*`` is the smallest grid point where the discrete slope of ``eta`` is
    below ``delta`` and the mean selected count is below ``tau * n_tokens``.
    Raises ``SelectionError`` (carrying the full curve) if none qualifies.
    """
    config = config or AsotConfig()
    if not samples:
        raise ConfigError("select_threshold needs at least one sample")
    samples = [s if isinstance(s, ActivationBatch) else ActivationBatch(s) for s in samples]
    sizes = {s.n_tokens for s in samples}
    if len(sizes) != 1:
        raise ConfigError(f"samples must share one token count, got {sorted(sizes)}")
    n_tokens = sizes.pop()
    if stats is None:
        stats = channel_stats(samples)
    scores = [outlier_scores(s, stats) for s in samples]

    grid = config.grid
    sets_by_k = [[token_set(sc, k) for sc in scores] for k in grid]
    eta = [inconsistency_eta(sets) for sets in sets_by_k]
    mean_sizes = [sum(len(s) for s in sets) / len(sets) for sets in sets_by_k]
    curve = list(zip(grid, eta))
    j = first_stable_index(grid, eta, mean_sizes, n_tokens, config)
    if j is None:
        raise SelectionError("no grid threshold satisfies both the stability and the sparsity rule",
                             curve=curve)
    chosen = sets_by_k[j]
    weights = token_weights(chosen, n_tokens, config.gamma, config.outliers_only)
    return OutlierSelection(per_sample_sets=chosen, k_star=grid[j], eta_curve=curve,
                            weights=weights, mean_sizes=mean_sizes)
