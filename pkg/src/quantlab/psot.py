"""Peak-suppression orthogonal transform (PSOT).

A block-diagonal orthogonal ``R`` is initialised from Hadamard blocks and
trained on calibration tokens to minimise::

    y = P_perp (x R),   loss(x) = || softmax(|y| / T) * y ||_2

where ``P_perp`` removes the coordinate mean. Updates are Cayley
retractions, so every iterate stays exactly on the orthogonal group.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, special

from .errors import ConfigError, FormatError, NumericError, StepError

log = logging.getLogger(__name__)

ORTM_MAGIC = b"ORTM"
ORTM_VERSION = 1
_ORTM_HEADER = struct.Struct("<4sB3xQ")
ORTHO_TOL = 1e-8
_DRIFT_TOL = 1e-10


def _is_pow2(n):
    return n >= 1 and n & (n - 1) == 0


def hadamard(dim):
    """Sylvester Hadamard matrix scaled to be orthogonal."""
    if not _is_pow2(dim) or dim < 2:
        raise ConfigError(f"Hadamard init needs a power-of-two dimension >= 2, got {dim}")
    return linalg.hadamard(dim).astype(np.float64) / math.sqrt(dim)


def random_orthogonal(dim, rng):
    """QR of a uniform random matrix, signs fixed so the law is Haar-like."""
    q, r = np.linalg.qr(rng.uniform(-1.0, 1.0, size=(dim, dim)))
    return q * np.sign(np.diag(r))


def orthogonality_error(R):
    R = np.asarray(R)
    return float(np.max(np.abs(R.T @ R - np.eye(R.shape[0]))))


@dataclass(eq=False)
class OrthoTransform:
    """Block-diagonal orthogonal matrix stored as its diagonal blocks."""

    blocks: list
    block_dims: list = field(init=False)

    def __post_init__(self):
        self.blocks = [np.array(b, dtype=np.float64) for b in self.blocks]
        if not self.blocks:
            raise ConfigError("transform needs at least one block")
        for b in self.blocks:
            if b.ndim != 2 or b.shape[0] != b.shape[1]:
                raise ConfigError(f"blocks must be square, got {b.shape}")
        self.block_dims = [b.shape[0] for b in self.blocks]

    @classmethod
    def block_hadamard(cls, dim, n_blocks=1):
        if n_blocks < 1 or dim % n_blocks:
            raise ConfigError(f"dim {dim} does not split into {n_blocks} equal blocks")
        return cls([hadamard(dim // n_blocks) for _ in range(n_blocks)])

    @classmethod
    def block_random(cls, dim, n_blocks, rng):
        if n_blocks < 1 or dim % n_blocks:
            raise ConfigError(f"dim {dim} does not split into {n_blocks} equal blocks")
        return cls([random_orthogonal(dim // n_blocks, rng) for _ in range(n_blocks)])

    @classmethod
    def identity(cls, dim):
        return cls([np.eye(dim)])

    @property
    def dim(self):
        return sum(self.block_dims)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.block_dims)])

    def dense(self):
        return linalg.block_diag(*self.blocks)

    def apply(self, X):
        """Row-vector product ``X R``."""
        X = np.asarray(getattr(X, "data", X), dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise ConfigError(f"token dim {X.shape[-1]} != transform dim {self.dim}")
        out = np.empty(X.shape, dtype=np.float64)
        off = self.offsets
        for b, R in enumerate(self.blocks):
            out[..., off[b]:off[b + 1]] = X[..., off[b]:off[b + 1]] @ R
        return out

    def orthogonality_error(self):
        return max(orthogonality_error(R) for R in self.blocks)

    def copy(self):
        return OrthoTransform([R.copy() for R in self.blocks])


def write_transform(transform, path):
    with open(path, "wb") as fh:
        fh.write(_ORTM_HEADER.pack(ORTM_MAGIC, ORTM_VERSION, len(transform.blocks)))
        fh.write(struct.pack(f"<{len(transform.blocks)}Q", *transform.block_dims))
        for R in transform.blocks:
            fh.write(np.ascontiguousarray(R, dtype="<f8").tobytes())


def read_transform(path):
    raw = Path(path).read_bytes()
    if raw[:4] != ORTM_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    if len(raw) < _ORTM_HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    _, version, n_blocks = _ORTM_HEADER.unpack_from(raw)
    if version != ORTM_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    pos = _ORTM_HEADER.size
    if n_blocks < 1 or len(raw) < pos + 8 * n_blocks:
        raise FormatError(f"{path}: bad block table", offset=pos)
    dims = struct.unpack_from(f"<{n_blocks}Q", raw, pos)
    pos += 8 * n_blocks
    blocks = []
    for d in dims:
        nbytes = 8 * d * d
        if len(raw) < pos + nbytes:
            raise FormatError(f"{path}: truncated block of dim {d}", offset=len(raw))
        blocks.append(np.frombuffer(raw, dtype="<f8", count=d * d, offset=pos).reshape(d, d).copy())
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes", offset=pos)
    return OrthoTransform(blocks)


# -- loss and gradient --------------------------------------------------------

def centering_project(y):
    """Subtract the coordinate mean (applies row-wise to matrices)."""
    y = np.asarray(y, dtype=np.float64)
    return y - y.mean(axis=-1, keepdims=True)


def _rotate(X, R):
    if isinstance(R, OrthoTransform):
        return R.apply(X)
    R = np.asarray(R, dtype=np.float64)
    if X.shape[-1] != R.shape[0]:
        raise ConfigError(f"token dim {X.shape[-1]} != transform dim {R.shape[0]}")
    return X @ R


def _forward(X, R, temperature):
    y = centering_project(_rotate(X, R))
    pi = special.softmax(np.abs(y) / temperature, axis=-1)
    v = pi * y
    return y, pi, v, np.linalg.norm(v, axis=-1)


def loss_ps(x, R, temperature):
    """Peak-suppression loss of one token (float) or of each row (array)."""
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    loss = _forward(x, R, temperature)[3]
    return float(loss) if x.ndim == 1 else loss


def _grad_rotated(X, R, temperature):
    """d loss / d (x R) for every row; rows with zero loss get zero."""
    y, pi, v, L = _forward(X, R, temperature)
    safe = np.where(L > 0, L, 1.0)
    gv = np.where(L[..., None] > 0, v / safe[..., None], 0.0)
    inner = np.sum(gv * y * pi, axis=-1, keepdims=True)
    # |y| has subgradient 0 at y == 0, which np.sign already gives
    gy = gv * pi + np.sign(y) * pi / temperature * (gv * y - inner)
    return centering_project(gy), L


def grad_loss(x, R, temperature):
    """Euclidean gradient of ``loss_ps`` with respect to ``R``.

    Returns a dense matrix for a dense ``R`` and a list of per-block
    gradients for an ``OrthoTransform``.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    X = x[None, :] if x.ndim == 1 else x
    gu, _ = _grad_rotated(X, R, temperature)
    return _outer_blocks(X, gu, R)


def _outer_blocks(X, gu, R):
    if isinstance(R, OrthoTransform):
        off = R.offsets
        return [X[:, off[b]:off[b + 1]].T @ gu[:, off[b]:off[b + 1]] for b in range(len(R.blocks))]
    return X.T @ gu


def weighted_loss_and_grad(X, weights, transform, temperature):
    """Weighted mean loss and per-block gradient, both normalised by token count."""
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    gu, L = _grad_rotated(X, transform, temperature)
    n = X.shape[0]
    grads = _outer_blocks(X, gu * (w[:, None] / n), transform)
    return float(np.dot(w, L) / n), grads


# -- Cayley retraction --------------------------------------------------------

def polar(R):
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def cayley_step(R, G, lr, max_step=None):
    """One Cayley-retraction descent step on the orthogonal group.

    ``A = G R^T - R G^T`` is skew-symmetric, and
    ``R' = (I + lr/2 A)^{-1} (I - lr/2 A) R`` is orthogonal whenever ``R`` is.
    With ``max_step`` set, the rate is capped at ``max_step / ||A||_F`` so a
    single update never rotates by more than that much.
    """
    R = np.asarray(R, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if G.shape != R.shape:
        raise ConfigError(f"gradient shape {G.shape} != block shape {R.shape}")
    A = G @ R.T - R @ G.T
    if max_step is not None:
        lr = min(lr, max_step / (np.linalg.norm(A) + 1e-12))
    eye = np.eye(R.shape[0])
    lhs = eye + 0.5 * lr * A
    if np.linalg.cond(lhs) > 1e12:
        raise StepError(f"Cayley system is singular at lr={lr:g}; use a smaller learning rate")
    R_new = np.linalg.solve(lhs, (eye - 0.5 * lr * A) @ R)
    if not np.all(np.isfinite(R_new)):
        raise StepError(f"non-finite Cayley update at lr={lr:g}")
    if orthogonality_error(R_new) > _DRIFT_TOL:
        R_new = polar(R_new)
    return R_new


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class PsotConfig:
    temperature: float = 2.0
    learning_rate: float = 2.0
    epochs: int = 15
    batch_size: int = 4
    lr_schedule: str = "linear_decay"
    blocks: int = 2
    init: str = "hadamard"
    momentum: float = 0.0
    max_step: float | None = 0.5
    seed: int = 0
    fd_check: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_schedule not in ("linear_decay", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.init not in ("hadamard", "random"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.max_step is not None and not self.max_step > 0:
            raise ConfigError("max_step must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


def _fd_audit(X, w, transform, temperature, rng, n_probe=5, h=1e-5):
    _, grads = weighted_loss_and_grad(X, w, transform, temperature)
    for _ in range(n_probe):
        b = int(rng.integers(len(transform.blocks)))
        i, j = rng.integers(transform.block_dims[b], size=2)
        plus, minus = transform.copy(), transform.copy()
        plus.blocks[b][i, j] += h
        minus.blocks[b][i, j] -= h
        fd = (weighted_loss_and_grad(X, w, plus, temperature)[0]
              - weighted_loss_and_grad(X, w, minus, temperature)[0]) / (2 * h)
        an = grads[b][i, j]
        if abs(fd - an) > 1e-4 * max(abs(fd), abs(an), 1e-6):
            raise NumericError(f"gradient audit failed at block {b} ({i},{j}): analytic {an:.6g}, fd {fd:.6g}")


def _weighted_mean_loss(X, w, transform, temperature):
    return float(np.dot(w, loss_ps(X, transform, temperature)) / X.shape[0])


def train_psot(batches, weights=None, config=None, callback=None):
    """Learn a block-diagonal rotation on calibration samples.

    Parameters
    ----------
    batches : list of ActivationBatch
        Calibration samples; a minibatch is ``config.batch_size`` samples.
    weights : array, optional
        Per-token weights concatenated in sample order (default all ones).
    callback : callable, optional
        Called as ``callback(epoch, step, transform)`` after every update.

    Returns
    -------
    transform : OrthoTransform
    loss_trace : list of float
        Weighted mean loss over all tokens before training and after each epoch.
    """
    config = config or PsotConfig()
    if not batches:
        raise ConfigError("train_psot needs at least one calibration batch")
    mats = [np.asarray(getattr(b, "data", b), dtype=np.float64) for b in batches]
    dim = mats[0].shape[1]
    if any(m.shape[1] != dim for m in mats):
        raise ConfigError("calibration batches have inconsistent dims")
    sizes = [m.shape[0] for m in mats]
    total_tokens = sum(sizes)
    w = np.ones(total_tokens) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (total_tokens,):
        raise ConfigError(f"expected {total_tokens} weights, got {w.size}")
    if np.any(w < 0):
        raise ConfigError("token weights must be non-negative")
    w_split = np.split(w, np.cumsum(sizes)[:-1])

    rng = np.random.default_rng(config.seed)
    if config.init == "hadamard":
        transform = OrthoTransform.block_hadamard(dim, config.blocks)
    else:
        transform = OrthoTransform.block_random(dim, config.blocks, rng)

    X_all = np.concatenate(mats)
    trace = [_weighted_mean_loss(X_all, w, transform, config.temperature)]
    n_samples = len(mats)
    steps_per_epoch = math.ceil(n_samples / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    velocity = [np.zeros_like(R) for R in transform.blocks]
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_samples)
        for k in range(steps_per_epoch):
            idx = order[k * config.batch_size:(k + 1) * config.batch_size]
            X = np.concatenate([mats[i] for i in idx])
            wb = np.concatenate([w_split[i] for i in idx])
            if config.fd_check and step == 0:
                _fd_audit(X, wb, transform, config.temperature, rng)
            if config.lr_schedule == "linear_decay":
                lr = config.learning_rate * (1.0 - step / total_steps)
            else:
                lr = config.learning_rate
            _, grads = weighted_loss_and_grad(X, wb, transform, config.temperature)
            try:
                for b, G in enumerate(grads):
                    velocity[b] = config.momentum * velocity[b] + G
                    transform.blocks[b] = cayley_step(transform.blocks[b], velocity[b], lr,
                                                     config.max_step)
            except StepError as exc:
                raise StepError(f"epoch {epoch}, batch {k}: {exc}") from exc
            err = transform.orthogonality_error()
            if err >= ORTHO_TOL:
                raise StepError(f"epoch {epoch}, batch {k}: orthogonality drift {err:.3g}")
            step += 1
            if callback is not None:
                callback(epoch, k, transform)
        trace.append(_weighted_mean_loss(X_all, w, transform, config.temperature))
        log.debug("psot epoch %d loss %.6g", epoch, trace[-1])
    return transform, trace


def peak_stats(X, transform=None):
    """Mean peak magnitude and mean dispersion of centered (rotated) tokens."""
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    Y = centering_project(X if transform is None else _rotate(X, transform))
    peak = np.max(np.abs(Y), axis=1)
    bn = np.linalg.norm(Y, axis=1) / peak / math.sqrt(Y.shape[1])
    return float(peak.mean()), float(bn.mean())
