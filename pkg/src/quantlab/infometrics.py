"""Smoothed-KL error analysis of the centered clamped quantizer.

The quantizer ``Q_{s,c}`` with ``c = M s`` maps each value to one of the
``2M + 1`` centroids ``i s``. Spreading every centroid with a Laplace kernel
of width ``theta`` turns the quantized masses into a density, and for
``theta << s`` the KL divergence from the original density decomposes as::

    KL ~= -H(P) + H({p_i}) + log(2 theta) + E|x - Q(x)| / theta

Normalising the expected error by the spread ``sigma`` gives the bound::

    E|x - Q(x)| / sigma <= lambda / 2 + tau_P(kappa),
    lambda = s / sigma,  kappa = c / sigma,  tau_P(k) = E[(|Y| - k)_+]

All logarithms are natural.
"""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import integrate, optimize, special

from .errors import ConfigError, DegenerateError, NumericError
from .quantizer import _check_grid, centered_clamped_quantize, centered_levels, levels_for_bits

FAMILIES = ("gaussian", "laplace", "empirical")
_SQRT2 = math.sqrt(2.0)
_QUAD_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DistFamily:
    """A centered symmetric activation law with standard deviation ``sigma``.

    For ``laplace`` the scale is ``b = sigma / sqrt(2)``. For ``empirical``
    the samples are kept and ``sigma`` defaults to their population std.
    """

    family: str
    sigma: float = 1.0
    samples: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.family == "empirical":
            if self.samples is None:
                raise ConfigError("empirical family needs samples")
            x = np.asarray(self.samples, dtype=np.float64).ravel()
            if x.size < 2 or not np.all(np.isfinite(x)):
                raise ConfigError("empirical samples must be finite with at least 2 entries")
            object.__setattr__(self, "samples", x)
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")

    @classmethod
    def gaussian(cls, sigma=1.0):
        return cls("gaussian", sigma)

    @classmethod
    def laplace(cls, b=None, sigma=None):
        if (b is None) == (sigma is None):
            raise ConfigError("give exactly one of b or sigma")
        return cls("laplace", sigma if sigma is not None else _SQRT2 * b)

    @classmethod
    def empirical(cls, samples, sigma=None):
        x = np.asarray(samples, dtype=np.float64).ravel()
        if sigma is None:
            sigma = float(x.std()) if x.size else 0.0
        if not sigma > 0:
            raise DegenerateError("empirical samples have zero spread")
        return cls("empirical", sigma, x)

    @property
    def b(self):
        return self.sigma / _SQRT2

    def pdf(self, x):
        if self.family == "gaussian":
            return np.exp(-0.5 * (x / self.sigma) ** 2) / (self.sigma * math.sqrt(2 * math.pi))
        if self.family == "laplace":
            return np.exp(-np.abs(x) / self.b) / (2 * self.b)
        raise ConfigError("empirical family has no closed-form density")

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.family == "gaussian":
            return special.ndtr(x / self.sigma)
        if self.family == "laplace":
            u = x / self.b
            return np.where(u < 0, 0.5 * np.exp(np.minimum(u, 0)), 1 - 0.5 * np.exp(-np.maximum(u, 0)))
        raise ConfigError("empirical family has no closed-form CDF")

    def sf(self, x):
        return self.cdf(-np.asarray(x, dtype=np.float64))

    def sample(self, n, rng):
        if self.family == "gaussian":
            return rng.normal(0.0, self.sigma, size=n)
        if self.family == "laplace":
            return rng.laplace(0.0, self.b, size=n)
        return rng.choice(self.samples, size=n, replace=True)


@dataclass(frozen=True)
class SmoothedKLConfig:
    """Kernel width and histogram grid for the smoothed KL estimators.

    ``theta=None`` means ``theta = theta_ratio * s`` for whatever step the
    config is used with.
    """

    theta: float | None = None
    theta_ratio: float = 0.05
    bins: int = 15000
    support_sigmas: float = 8.0

    def __post_init__(self):
        if self.theta is not None and not self.theta > 0:
            raise ConfigError("theta must be positive")
        if not 0 < self.theta_ratio <= 0.2:
            raise ConfigError("theta_ratio must lie in (0, 0.2]")
        if self.bins < 1 or not self.support_sigmas > 0:
            raise ConfigError("bins and support_sigmas must be positive")

    def resolve_theta(self, s):
        return self.theta if self.theta is not None else self.theta_ratio * s


@dataclass(frozen=True)
class MetricsReport:
    lam: float
    kappa: float
    b_n: float
    s_bar: float
    e_clip: float
    e_clip_norm: float
    bound: float
    kl_direct: float
    kl_decomposed: float
    h_p: float
    h_masses: float

    def as_row(self):
        return {("lambda" if k == "lam" else k): v for k, v in asdict(self).items()}

    @staticmethod
    def columns():
        return ["lambda" if f.name == "lam" else f.name for f in fields(MetricsReport)]


def _require_levels(s, c):
    if not s > 0:
        raise ConfigError("step size must be positive")
    m = round(c / s)
    if m < 1:
        raise ConfigError(f"need at least one level on each side, got M={m}")
    return _check_grid(s, c)


# -- cells, masses, entropies ------------------------------------------------

def cell_masses(dist, s, c):
    """Probability mass of each quantization cell, indexed ``i = -M..M``.

    Interior cells are ``[(i - 1/2) s, (i + 1/2) s)``; the two boundary cells
    absorb the tails beyond ``+-(c - s/2)``.
    """
    m = _require_levels(s, c)
    if dist.family == "empirical":
        counts = np.bincount(centered_levels(dist.samples, s, c) + m, minlength=2 * m + 1)
        return counts / dist.samples.size
    edges = (np.arange(-m + 1, m + 1) - 0.5) * s
    cdf, sf = dist.cdf(edges), dist.sf(edges)
    lo, hi = edges[:-1], edges[1:]
    # CDF differences on the left, survival differences on the right: no tail cancellation
    inner = np.where(hi <= 0, cdf[1:] - cdf[:-1],
                     np.where(lo >= 0, sf[:-1] - sf[1:], 1.0 - cdf[:-1] - sf[1:]))
    return np.concatenate([[cdf[0]], inner, [sf[-1]]])


def entropy_masses(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _hist_edges(sigma, config):
    half = config.support_sigmas * sigma
    return np.linspace(-half, half, config.bins + 1)


def _hist_density(x, edges):
    counts, _ = np.histogram(x, bins=edges)
    if counts.sum() == 0:
        raise NumericError("no samples fall inside the histogram support")
    width = edges[1] - edges[0]
    return counts / (x.size * width), width


def differential_entropy(dist, config=None):
    """H(P) in nats; histogram plug-in for empirical samples."""
    if dist.family == "gaussian":
        return 0.5 * math.log(2 * math.pi * math.e * dist.sigma ** 2)
    if dist.family == "laplace":
        return 1.0 + math.log(2 * dist.b)
    config = config or SmoothedKLConfig()
    dens, width = _hist_density(dist.samples, _hist_edges(dist.sigma, config))
    nz = dens[dens > 0]
    return float(-np.sum(nz * np.log(nz)) * width)


# -- clipping error ----------------------------------------------------------

def _quad(f, a, b):
    val, err = integrate.quad(f, a, b, epsabs=1e-13, epsrel=_QUAD_TOL, limit=200)
    if err > max(1e-9, 1e-7 * abs(val)):
        raise NumericError(f"quadrature did not converge on [{a}, {b}]: achieved {err:.3g}")
    return val


def expected_clip_error(dist, s, c):
    """E|x - Q_{s,c}(x)|: cell-wise adaptive quadrature, or the exact sample mean."""
    m = _require_levels(s, c)
    if dist.family == "empirical":
        return float(np.mean(np.abs(dist.samples - centered_clamped_quantize(dist.samples, s, c))))
    pdf = dist.pdf
    total = 0.0
    # symmetric law: integrate the right half and double
    total += 2 * _quad(lambda x: x * pdf(x), 0.0, 0.5 * s)
    for i in range(1, m):
        q = i * s
        total += 2 * (_quad(lambda x, q=q: (q - x) * pdf(x), q - 0.5 * s, q)
                      + _quad(lambda x, q=q: (x - q) * pdf(x), q, q + 0.5 * s))
    total += 2 * (_quad(lambda x: (c - x) * pdf(x), c - 0.5 * s, c)
                  + _quad(lambda x: (x - c) * pdf(x), c, np.inf))
    return total


def normalized_clip_error(dist, s, c):
    return expected_clip_error(dist, s, c) / dist.sigma


# -- closed forms and bounds -------------------------------------------------

def tau_closed_form(family, kappa):
    """Expected normalised clipping tail E[(|Y| - kappa)_+] for unit-variance Y."""
    if kappa < 0:
        raise ConfigError("kappa must be non-negative")
    if family == "gaussian":
        phi = math.exp(-0.5 * kappa * kappa) / math.sqrt(2 * math.pi)
        return 2.0 * (phi - kappa * float(special.ndtr(-kappa)))
    if family == "laplace":
        return math.exp(-_SQRT2 * kappa) / _SQRT2
    raise ConfigError(f"no closed form for family {family!r}")


def tau_empirical(samples, sigma, kappa):
    y = np.abs(np.asarray(samples, dtype=np.float64)) / sigma
    return float(np.mean(np.maximum(y - kappa, 0.0)))


def _levels_from_bits(bits):
    if bits < 2:
        raise ConfigError(f"bits must be >= 2 so that M >= 1, got {bits}")
    return levels_for_bits(bits)


def bound_F(family, bits, kappa):
    """Normalised error bound kappa / (2M) + tau_P(kappa) of a ``bits``-bit quantizer."""
    m = _levels_from_bits(bits)
    return kappa / (2 * m) + tau_closed_form(family, kappa)


def critical_kappa(family, bits):
    """Smallest kappa beyond which ``bound_F`` is increasing."""
    m = _levels_from_bits(bits)
    if family == "gaussian":
        target = 1.0 - 1.0 / (4 * m)
        return optimize.brentq(lambda k: special.ndtr(k) - target, 0.0, 40.0, xtol=1e-12, rtol=1e-14)
    if family == "laplace":
        return math.log(2 * m) / _SQRT2
    raise ConfigError(f"no critical threshold for family {family!r}")


# -- smoothed KL ---------------------------------------------------------------

def _check_separation(s, theta):
    if not theta > 0:
        raise ConfigError("theta must be positive")
    if theta > s / 5:
        raise ConfigError(f"kernel separation violated: theta={theta:g} > s/5={s / 5:g}")


def smoothed_kl_decomposed(dist, s, c, theta):
    """-H(P) + H({p_i}) + log(2 theta) + E_clip / theta."""
    _check_separation(s, theta)
    h_p = differential_entropy(dist)
    h_m = entropy_masses(cell_masses(dist, s, c))
    return -h_p + h_m + math.log(2 * theta) + expected_clip_error(dist, s, c) / theta


def _laplace_bin_mass(a, b, q, theta):
    """Mass of Laplace(q, theta) on [a, b), evaluated without cancellation."""
    ua = (a - q) / theta
    ub = (b - q) / theta
    left = 0.5 * (np.exp(np.minimum(ub, 0)) - np.exp(np.minimum(ua, 0)))
    right = 0.5 * (np.exp(-np.maximum(ua, 0)) - np.exp(-np.maximum(ub, 0)))
    mid = 1.0 - 0.5 * np.exp(np.minimum(ua, 0)) - 0.5 * np.exp(-np.maximum(ub, 0))
    return np.where(ub <= 0, left, np.where(ua >= 0, right, mid))


def smoothed_kl_direct(samples, s, c, config=None, floor=1e-12):
    """Histogram estimate of KL(P || Q_theta).

    ``P`` is the histogram density of the raw samples, ``Q_theta`` the
    quantized sample masses spread by the Laplace kernel and averaged over
    the same bins. Both densities receive the additive ``floor``.
    """
    config = config or SmoothedKLConfig()
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 1000:
        raise ConfigError(f"direct KL needs at least 1000 samples, got {x.size}")
    m = _require_levels(s, c)
    theta = config.resolve_theta(s)
    _check_separation(s, theta)
    sigma = float(x.std())
    if not sigma > 0:
        raise DegenerateError("samples have zero spread")
    edges = _hist_edges(sigma, config)
    p_dens, width = _hist_density(x, edges)
    masses = np.bincount(centered_levels(x, s, c) + m, minlength=2 * m + 1) / x.size
    q_dens = np.zeros_like(p_dens)
    lo, hi = edges[:-1], edges[1:]
    for i in np.flatnonzero(masses):
        q_dens += masses[i] * _laplace_bin_mass(lo, hi, (i - m) * s, theta)
    q_dens /= width
    p_f = p_dens + floor
    q_f = q_dens + floor
    return float(np.sum(p_f * np.log(p_f / q_f)) * width)


# -- dispersion ----------------------------------------------------------------

def dispersion_bn(token):
    """sqrt(1/d) * ||t||_2 / ||t||_inf."""
    t = np.asarray(token, dtype=np.float64).ravel()
    peak = np.max(np.abs(t)) if t.size else 0.0
    if peak == 0:
        raise DegenerateError("dispersion undefined for the zero vector")
    return float(np.linalg.norm(t) / peak / math.sqrt(t.size))


# -- independent oracles ---------------------------------------------------------

def _unit_density(family):
    if family == "gaussian":
        return lambda y: math.exp(-0.5 * y * y) / math.sqrt(2 * math.pi)
    if family == "laplace":
        return lambda y: math.exp(-_SQRT2 * abs(y)) / _SQRT2
    raise ConfigError(f"no density for family {family!r}")


def oracle_tau_numeric(family, kappa):
    """2 * int_kappa^inf (y - kappa) f(y) dy by adaptive quadrature."""
    f = _unit_density(family)
    val, err = integrate.quad(lambda y: 2.0 * (y - kappa) * f(y), kappa, np.inf,
                              epsabs=1e-13, epsrel=1e-10, limit=200)
    if err > 1e-8:
        raise NumericError(f"tau quadrature error {err:.3g} exceeds 1e-8")
    return val


def oracle_mc_clip_error(dist, s, c, n=100_000, seed=0):
    """Monte Carlo mean of |x - Q(x)| and its standard error."""
    if n < 100_000:
        raise ConfigError("Monte Carlo oracle needs n >= 1e5")
    x = dist.sample(n, np.random.default_rng(seed))
    err = np.abs(x - centered_clamped_quantize(x, s, c))
    return float(err.mean()), float(err.std(ddof=1) / math.sqrt(n))


# -- reports ---------------------------------------------------------------------

def metrics_report(dist, s, c, theta=None, config=None):
    """Collect every metric of a distribution under ``Q_{s,c}``.

    KL terms need either an analytic family or at least 1000 empirical
    samples; otherwise they are NaN. For empirical input the bound uses the
    sample tail mean, which keeps it a valid upper bound.
    """
    config = config or SmoothedKLConfig()
    _require_levels(s, c)
    theta = config.resolve_theta(s) if theta is None else theta
    sigma = dist.sigma
    lam, kappa = s / sigma, c / sigma
    e_clip = expected_clip_error(dist, s, c)
    masses = cell_masses(dist, s, c)
    h_m = entropy_masses(masses)
    if dist.family == "empirical":
        tau = tau_empirical(dist.samples, sigma, kappa)
    else:
        tau = tau_closed_form(dist.family, kappa)
    kl_direct = kl_dec = h_p = math.nan
    enough = dist.family != "empirical" or dist.samples.size >= 1000
    if enough:
        h_p = differential_entropy(dist, config)
        _check_separation(s, theta)
        kl_dec = -h_p + h_m + math.log(2 * theta) + e_clip / theta
        if dist.family == "empirical":
            kl_direct = smoothed_kl_direct(dist.samples, s, c,
                                           SmoothedKLConfig(theta=theta, bins=config.bins,
                                                            support_sigmas=config.support_sigmas))
    return MetricsReport(
        lam=lam,
        kappa=kappa,
        b_n=1.0 / kappa,
        s_bar=s / c,
        e_clip=e_clip,
        e_clip_norm=e_clip / sigma,
        bound=lam / 2 + tau,
        kl_direct=kl_direct,
        kl_decomposed=kl_dec,
        h_p=h_p,
        h_masses=h_m,
    )


def _center_rows(X):
    return X - X.mean(axis=1, keepdims=True)


def token_metrics(X, bits, theta_ratio=0.05, config=None):
    """Per-token reports plus one pooled report.

    Each token is centered and quantized with ``c`` at its own peak
    magnitude and ``s = c / M``. The pooled row stacks all tokens after
    dividing each by its own ``c`` (so ``c = 1``, ``s = 1/M``) and is the
    only row with KL terms.
    """
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    m = _levels_from_bits(bits)
    cfg = config or SmoothedKLConfig(theta_ratio=theta_ratio)
    Y = _center_rows(X)
    peaks = np.max(np.abs(Y), axis=1)
    if np.any(peaks == 0):
        raise DegenerateError("constant token has no range after centering")
    rows = []
    for y, c in zip(Y, peaks):
        dist = DistFamily.empirical(y)
        rows.append(metrics_report(dist, c / m, c, config=cfg))
    pooled = DistFamily.empirical((Y / peaks[:, None]).ravel())
    return rows, metrics_report(pooled, 1.0 / m, 1.0, config=cfg)


# -- trend sweeps ------------------------------------------------------------------

def _sweep_config(theta, config):
    config = config or SmoothedKLConfig()
    return SmoothedKLConfig(theta=theta, bins=config.bins, support_sigmas=config.support_sigmas)


def kl_dispersion_sweep(samples, bits, bn_grid, theta=None, config=None):
    """Direct smoothed KL at fixed ``s/c = 1/M`` while ``b_n = sigma/c`` varies.

    ``theta`` is one absolute kernel width shared by every grid point
    (default: a twentieth of the smallest step on the grid), so the only
    thing that changes along the sweep is the quantizer.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    sigma = float(x.std())
    m = _levels_from_bits(bits)
    cs = sigma / np.asarray(bn_grid, dtype=np.float64)
    if np.any(~(cs > 0)):
        raise ConfigError("dispersion grid must be positive")
    theta = float(cs.min() / m / 20) if theta is None else theta
    cfg = _sweep_config(theta, config)
    return [smoothed_kl_direct(x, c / m, c, cfg) for c in cs]


def kl_step_sweep(samples, c, levels_grid, theta=None, config=None):
    """Direct smoothed KL at fixed clipping scale ``c`` with ``s = c/M`` for each ``M``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    levels = np.asarray(levels_grid)
    if np.any(levels < 1):
        raise ConfigError("level counts must be >= 1")
    theta = float(c / levels.max() / 20) if theta is None else theta
    cfg = _sweep_config(theta, config)
    return [smoothed_kl_direct(x, c / int(m), c, cfg) for m in levels]
