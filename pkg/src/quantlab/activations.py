"""Calibration activations: data model, synthetic generation and the ACTD dump format.

An activation batch is an ``n_tokens x dim`` matrix; rows are tokens. The
synthetic generator draws bell-shaped entries (Gaussian or Laplace) and can
inject multiplicative outliers either on a fixed channel set or on randomly
chosen tokens.

ACTD v1 layout (little-endian)::

    0-3    magic b"ACTD"
    4      version (1)
    5      dtype tag (1 = float32, 2 = float64)
    6-7    reserved, zero
    8-15   n_tokens (u64)
    16-23  dim (u64)
    24-    row-major payload
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateError, FormatError

ACTD_MAGIC = b"ACTD"
ACTD_VERSION = 1
_HEADER = struct.Struct("<4sBBHQQ")
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


@dataclass(frozen=True, eq=False)
class ActivationBatch:
    """Token-by-channel activation matrix of one calibration sample."""

    data: np.ndarray
    sample_id: int = 0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in _TAG_OF:
            data = data.astype(np.float64)
        if data.ndim != 2:
            raise ConfigError(f"activation batch must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ConfigError(f"activation batch must be non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ConfigError("activation batch contains NaN or Inf")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_tokens(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "gaussian"
    dim: int = 64
    n_tokens: int = 2048
    scale: float = 1.0
    outlier_rate: float = 0.0
    outlier_gain: float = 1.0
    outlier_mode: str = "per_channel"
    seed: int = 0

    def validate(self):
        if self.family not in ("gaussian", "laplace"):
            raise ConfigError(f"unknown family {self.family!r}")
        if self.outlier_mode not in ("per_channel", "per_token"):
            raise ConfigError(f"unknown outlier mode {self.outlier_mode!r}")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.n_tokens < 1:
            raise ConfigError("n_tokens must be positive")
        if not self.scale > 0:
            raise ConfigError("scale must be positive")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ConfigError("outlier_rate must lie in [0, 1]")
        if not self.outlier_gain >= 1.0:
            raise ConfigError("outlier_gain must be >= 1")


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.any(~(np.asarray(self.sigma) > 0)):
            raise DegenerateError("channel statistics require sigma > 0 on every channel")


def _count(rate, n):
    # round first so that e.g. 0.05 * 200 does not ceil to 11
    return math.ceil(round(rate * n, 9))


def generate_synthetic(spec, return_truth=False):
    """Draw a synthetic activation batch.

    With ``outlier_mode="per_channel"`` a fixed set of ``ceil(rate * dim)``
    channels is multiplied by ``outlier_gain`` on every token. With
    ``"per_token"``, ``ceil(rate * n_tokens)`` tokens are chosen at random and
    each has its largest-magnitude coordinate multiplied by the gain, so the
    boosted channel varies from token to token.

    If ``return_truth`` is true, also return the sorted boosted channel
    indices (per_channel) or token indices (per_token).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = (spec.n_tokens, spec.dim)
    if spec.family == "gaussian":
        data = rng.normal(0.0, spec.scale, size=shape)
    else:
        data = rng.laplace(0.0, spec.scale, size=shape)

    truth = np.array([], dtype=np.int64)
    if spec.outlier_rate > 0 and spec.outlier_gain != 1.0:
        if spec.outlier_mode == "per_channel":
            n_out = _count(spec.outlier_rate, spec.dim)
            truth = np.sort(rng.choice(spec.dim, size=n_out, replace=False))
            data[:, truth] *= spec.outlier_gain
        else:
            n_out = _count(spec.outlier_rate, spec.n_tokens)
            truth = np.sort(rng.choice(spec.n_tokens, size=n_out, replace=False))
            peaks = np.argmax(np.abs(data[truth]), axis=1)
            data[truth, peaks] *= spec.outlier_gain

    batch = ActivationBatch(data)
    if return_truth:
        return batch, truth
    return batch


def channel_stats(batches):
    """Pooled per-channel mean and population standard deviation."""
    if isinstance(batches, ActivationBatch):
        batches = [batches]
    if not batches:
        raise ConfigError("channel_stats needs at least one batch")
    dims = {b.dim for b in batches}
    if len(dims) != 1:
        raise ConfigError(f"inconsistent dims across batches: {sorted(dims)}")
    pooled = np.concatenate([np.asarray(b.data, dtype=np.float64) for b in batches], axis=0)
    mu = pooled.mean(axis=0)
    sigma = pooled.std(axis=0)
    bad = np.flatnonzero(sigma <= 1e-12 * np.maximum(1.0, np.abs(mu)))
    if bad.size:
        raise DegenerateError(f"zero-variance channels: {bad.tolist()[:10]}")
    return ChannelStats(mu=mu, sigma=sigma)


def write_dump(batch, path):
    data = np.ascontiguousarray(batch.data)
    tag = _TAG_OF[data.dtype]
    header = _HEADER.pack(ACTD_MAGIC, ACTD_VERSION, tag, 0, data.shape[0], data.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.astype(_DTYPE_TAGS[tag], copy=False).tobytes(order="C"))


def read_dump(path, sample_id=0):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != ACTD_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)", offset=len(raw))
    _, version, tag, reserved, n_tokens, dim = _HEADER.unpack_from(raw)
    if version != ACTD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}", offset=5)
    if reserved != 0:
        raise FormatError(f"{path}: reserved bytes must be zero", offset=6)
    if n_tokens < 1 or dim < 1:
        raise FormatError(f"{path}: empty shape {n_tokens}x{dim}", offset=8)
    dtype = _DTYPE_TAGS[tag]
    expected = n_tokens * dim * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise FormatError(
            f"{path}: truncated payload, header claims {n_tokens}x{dim} "
            f"({expected} bytes) but {len(payload)} bytes present",
            offset=len(raw),
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes",
                          offset=_HEADER.size + expected)
    data = np.frombuffer(payload, dtype=dtype).reshape(n_tokens, dim)
    try:
        return ActivationBatch(data.astype(dtype.newbyteorder("=")), sample_id=sample_id)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}", offset=_HEADER.size) from exc
