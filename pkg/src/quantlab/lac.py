"""Learnable activation clipping (LAC).

The per-token affine step ``s = (alpha*max - beta*min) / (2**N - 1)`` is tuned
so that a small block fed quantized activations reproduces its full-precision
output. The block is a linear map with an optional GELU; the search over
``(alpha, beta)`` is a coarse grid followed by golden-section refinement of
each coordinate in turn.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError
from .quantizer import fake_quantize, fake_quantize_weights

CLIP_BOUNDS = (0.5, 1.0)
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class DeskBlock:
    W: np.ndarray
    nonlinearity: str = "identity"
    weight_bits: int | None = None

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim == 1:
            W = W[:, None]
        if W.ndim != 2 or W.shape[1] < 1 or W.shape[0] < 1:
            raise ConfigError(f"block weight must be a non-empty matrix, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ConfigError("block weight contains NaN or Inf")
        if self.nonlinearity not in ("identity", "gelu"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "W", W)


@dataclass(frozen=True)
class ClipParams:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        lo, hi = CLIP_BOUNDS
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ConfigError(f"{name} must lie in [{lo}, {hi}], got {v}")


@dataclass(frozen=True)
class LacConfig:
    grid: int = 11
    tol: float = 1e-3
    sweeps: int = 3

    def __post_init__(self):
        if self.grid < 2:
            raise ConfigError("LAC grid needs at least 2 points per axis")
        if not self.tol > 0:
            raise ConfigError("LAC tolerance must be positive")
        if self.sweeps < 0:
            raise ConfigError("LAC sweeps must be non-negative")


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _apply(X, block, W):
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != W.shape[0]:
        raise ConfigError(f"activation shape {X.shape} does not match block input dim {W.shape[0]}")
    Y = X @ W
    return gelu(Y) if block.nonlinearity == "gelu" else Y


def block_forward(X, block):
    """Full-precision output ``f(X W)``."""
    return _apply(X, block, block.W)


def block_forward_quant(X, block, clip, bits):
    """Block output with per-token affine fake-quantized activations.

    If ``block.weight_bits`` is set, the weight is also quantized per output
    channel on this path only.
    """
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    Xq = fake_quantize(X, bits, clip.alpha, clip.beta)
    W = block.W if block.weight_bits is None else fake_quantize_weights(block.W, block.weight_bits)
    return _apply(Xq, block, W)


def output_mse(X, block, clip, bits, reference=None):
    ref = block_forward(X, block) if reference is None else reference
    return float(np.mean((block_forward_quant(X, block, clip, bits) - ref) ** 2))


def _golden(f, lo, hi, tol):
    """Golden-section minimisation on ``[lo, hi]``; returns (x, f(x), evaluations)."""
    evals = []

    def g(x):
        v = f(x)
        evals.append((x, v))
        return v

    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = g(c), g(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = g(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = g(d)
    x, v = min(evals, key=lambda e: e[1])
    return x, v, evals


def optimize_clipping(X, block, bits=4, config=None):
    """Minimise the block-output MSE over ``(alpha, beta)`` in ``[0.5, 1]**2``.

    Stage one evaluates a ``grid x grid`` lattice; stage two refines alpha and
    beta alternately with golden-section search until a sweep no longer
    improves the best value or ``sweeps`` is reached. The best point seen
    anywhere is returned, so the result never loses to a lattice point.

    Returns
    -------
    clip : ClipParams
    trace : list of (alpha, beta, mse) in evaluation order
    """
    config = config or LacConfig()
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    if X.shape[0] < 1:
        raise ConfigError("calibration batch is empty")
    ref = block_forward(X, block)
    lo, hi = CLIP_BOUNDS
    trace = []

    def mse(a, b):
        v = output_mse(X, block, ClipParams(float(a), float(b)), bits, ref)
        trace.append((float(a), float(b), v))
        return v

    axis = np.round(np.linspace(lo, hi, config.grid), 12)
    for a in axis:
        for b in axis:
            mse(a, b)
    best = min(trace, key=lambda t: t[2])
    a, b, v = best
    for _ in range(config.sweeps):
        before = v
        xa, va, _ = _golden(lambda t: mse(t, b), lo, hi, config.tol)
        if va < v:
            a, v = xa, va
        xb, vb, _ = _golden(lambda t: mse(a, t), lo, hi, config.tol)
        if vb < v:
            b, v = xb, vb
        if not v < before:
            break
    return ClipParams(float(a), float(b)), trace


def ratio_sweep(X, block, bits=4, ratios=(1.0, 0.95, 0.9, 0.85, 0.8)):
    """Block-output MSE with ``alpha = beta = r`` for each ratio."""
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    ref = block_forward(X, block)
    return [output_mse(X, block, ClipParams(r, r), bits, ref) for r in ratios]
