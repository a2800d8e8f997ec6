"""Uniform quantizers: per-token asymmetric affine and centered clamped.

Rounding is half away from zero throughout (``round_half_away``), which
keeps the centered quantizer odd-symmetric: ``Q(-x) == -Q(x)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, FormatError, NumericError

SCHEMES = ("affine_per_token", "centered_clamped")
_S_MIN = 1e-30


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), x)


def levels_for_bits(bits):
    """Largest centered level index M = 2**(bits-1) - 1."""
    return 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int = 4
    scheme: str = "affine_per_token"
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not 2 <= int(self.bits) <= 16:
            raise ConfigError(f"bits must lie in [2, 16], got {self.bits}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.5 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0.5, 1], got {v}")

    @property
    def qmax(self):
        return 2 ** self.bits - 1


@dataclass(frozen=True)
class QuantParams:
    s: float
    z: int = 0
    c: float | None = None

    @property
    def levels(self):
        return None if self.c is None else int(round(self.c / self.s))


@dataclass(frozen=True, eq=False)
class QuantizedBatch:
    codes: np.ndarray
    params: list
    spec: QuantizerSpec


def _affine_params(xmin, xmax, bits, alpha, beta):
    """Vectorised step size and zero-point for rows with the given extremes."""
    xmin = np.asarray(xmin, dtype=np.float64)
    xmax = np.asarray(xmax, dtype=np.float64)
    if np.any(xmax <= xmin):
        raise DegenerateError("constant token: max == min leaves no range to quantize")
    qmax = 2 ** bits - 1
    s = (alpha * xmax - beta * xmin) / qmax
    if np.any(~(s >= _S_MIN)):
        raise NumericError(f"step size underflow (s < {_S_MIN:g})")
    # z is left unclamped: the quantizer then ignores a constant shift of the token
    z = -round_half_away(beta * xmin / s)
    return s, z


def affine_quantize_token(x, spec):
    """Quantize one token with the asymmetric affine quantizer.

    The observed range is shrunk by ``spec.alpha`` (max side) and
    ``spec.beta`` (min side) before the step size is computed; the zero-point
    is taken from the shrunk minimum. Codes are clamped to the unsigned grid
    but the zero-point is not, so a token whose range excludes 0 keeps its
    full resolution.

    Returns
    -------
    codes : ndarray of int64, values in ``[0, 2**bits - 1]``
    params : QuantParams
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ConfigError("token contains NaN or Inf")
    s, z = _affine_params(x.min(), x.max(), spec.bits, spec.alpha, spec.beta)
    codes = np.clip(round_half_away(x / s) + z, 0, spec.qmax).astype(np.int64)
    return codes, QuantParams(s=float(s), z=int(z))


def dequantize_token(codes, params, scheme="affine_per_token", bits=None):
    codes = np.asarray(codes)
    if scheme == "affine_per_token":
        hi = 2 ** bits - 1 if bits is not None else np.inf
        if np.any(codes < 0) or np.any(codes > hi):
            raise FormatError("affine code outside [0, 2**bits - 1]")
        return (codes - params.z) * params.s
    if scheme == "centered_clamped":
        m = params.levels
        if np.any(np.abs(codes) > m):
            raise FormatError(f"centered level outside [-{m}, {m}]")
        return np.clip(codes * params.s, -params.c, params.c)
    raise ConfigError(f"unknown scheme {scheme!r}")


def _check_grid(s, c):
    if not s > 0:
        raise ConfigError("step size must be positive")
    ratio = c / s
    m = round(ratio)
    if m < 1 or abs(ratio - m) > 1e-9 * max(1.0, abs(ratio)):
        raise ConfigError(f"clipping scale c={c!r} is not a positive integer multiple of s={s!r}")
    return int(m)


def centered_levels(x, s, c):
    """Signed level indices of the centered clamped quantizer."""
    m = _check_grid(s, c)
    return np.clip(round_half_away(np.asarray(x, dtype=np.float64) / s), -m, m).astype(np.int64)


def centered_clamped_quantize(x, s, c):
    """``clip(s * round(x / s), -c, c)`` elementwise; ``c`` must equal ``M * s``."""
    _check_grid(s, c)
    out = np.clip(s * round_half_away(np.asarray(x, dtype=np.float64) / s), -c, c)
    return out if out.ndim else float(out)


def quantize_tokens(X, spec):
    """Quantize every row of ``X`` independently under ``spec``."""
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    xmin, xmax = X.min(axis=1), X.max(axis=1)
    if spec.scheme == "affine_per_token":
        s, z = _affine_params(xmin, xmax, spec.bits, spec.alpha, spec.beta)
        codes = np.clip(round_half_away(X / s[:, None]) + z[:, None], 0, spec.qmax).astype(np.int64)
        params = [QuantParams(s=float(a), z=int(b)) for a, b in zip(s, z)]
    else:
        m = levels_for_bits(spec.bits)
        c = np.maximum(spec.alpha * xmax, -spec.beta * xmin)
        if np.any(~(c > 0)):
            raise DegenerateError("all-zero token cannot set a centered clipping scale")
        s = c / m
        codes = np.clip(round_half_away(X / s[:, None]), -m, m).astype(np.int64)
        params = [QuantParams(s=float(a), c=float(a) * m) for a in s]
    return QuantizedBatch(codes=codes, params=params, spec=spec)


def dequantize_tokens(qb):
    s = np.array([p.s for p in qb.params])[:, None]
    if qb.spec.scheme == "affine_per_token":
        z = np.array([p.z for p in qb.params])[:, None]
        return (qb.codes - z) * s
    return qb.codes * s


def fake_quantize(X, bits, alpha=1.0, beta=1.0, scheme="affine_per_token"):
    """Quantize-dequantize round trip of every token."""
    spec = QuantizerSpec(bits=bits, scheme=scheme, alpha=alpha, beta=beta)
    return dequantize_tokens(quantize_tokens(X, spec))


def quantize_weights_per_channel(W, bits):
    """Asymmetric round-to-nearest quantization of each output channel (column)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W[:, None]
    spec = QuantizerSpec(bits=bits)
    qb = quantize_tokens(W.T, spec)
    return qb.codes.T, qb.params


def dequantize_weights(codes, params):
    s = np.array([p.s for p in params])
    z = np.array([p.z for p in params])
    return (codes - z) * s


def fake_quantize_weights(W, bits):
    codes, params = quantize_weights_per_channel(W, bits)
    return dequantize_weights(codes, params)
