"""Standard-normal CDF/quantile numerics and latent support-set selection.

A support set is an axis-aligned latent box guaranteed to capture at least a
target probability mass under *every* diagonal Gaussian whose mean/stddev lie
inside the per-dimension ranges produced by bound propagation. Selection runs
a binary search on the coverage condition

    icdf(p) + icdf(p - target) >= (mu_lb - mu_ub) / sigma_ub

per dimension, with the multi-dimensional mass split as target ** (1/d) per
dimension (latent dimensions are independent). The search result feeds the
symmetric box [mu_lb - sigma_ub * icdf(p0), mu_ub + sigma_ub * icdf(p0)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sps

from .tensor import Tensor, add, mul, sub

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)

# Quantile inputs are clamped below one: p -> 1 maps to +inf, and the search
# bracket legitimately touches p = 1.
_P_CEIL = 1.0 - 1e-15


class GaussianDomainError(ValueError):
    """Argument outside the mathematical domain (p not in (0,1), sigma <= 0, ...)."""


def std_normal_cdf(x):
    """Standard normal CDF via erfc (keeps relative accuracy in both tails).

    Accepts scalars or arrays; returns the matching kind.
    """
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / SQRT2)
    return 0.5 * _sps.erfc(-np.asarray(x, dtype=np.float64) / SQRT2)


def _std_normal_pdf(x):
    return np.exp(-0.5 * np.square(x)) / SQRT2PI


# Acklam's rational approximation to the normal quantile (abs error < 1.2e-9),
# used as the initial guess before Halley refinement against the erfc CDF.
_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
             3.754408661907416e+00)
_ACKLAM_PLOW = 0.02425


def _acklam_tail(q):
    # yields the (negative) lower-tail quantile; callers flip the sign for
    # the upper tail
    c, d = _ACKLAM_C, _ACKLAM_D
    num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
    den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
    return num / den


def _acklam_central(p):
    a, b = _ACKLAM_A, _ACKLAM_B
    q = p - 0.5
    r = q * q
    num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
    den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
    return num * q / den


def _halley_step(x, p):
    # One Halley iteration on cdf(x) - p = 0; stable well into the tails.
    err = std_normal_cdf(x) - p
    u = err * SQRT2PI * np.exp(0.5 * np.square(x))
    return x - u / (1.0 + 0.5 * x * u)


def std_normal_icdf(p):
    """Inverse standard-normal CDF for p strictly inside (0, 1).

    Rational initial guess refined by two Halley iterations on the CDF;
    round-trip error is at machine-precision level across the usable range.
    """
    if np.ndim(p) == 0:
        p = float(p)
        if not 0.0 < p < 1.0:
            raise GaussianDomainError(f"quantile argument must lie in (0, 1), got {p}")
        if p < _ACKLAM_PLOW:
            x = _acklam_tail(math.sqrt(-2.0 * math.log(p)))
        elif p > 1.0 - _ACKLAM_PLOW:
            x = -_acklam_tail(math.sqrt(-2.0 * math.log(1.0 - p)))
        else:
            x = _acklam_central(p)
        x = _halley_step(x, p)
        return float(_halley_step(x, p))

    arr = np.asarray(p, dtype=np.float64)
    if arr.size and (np.min(arr) <= 0.0 or np.max(arr) >= 1.0):
        bad = arr[(arr <= 0.0) | (arr >= 1.0)].flat[0]
        raise GaussianDomainError(f"quantile argument must lie in (0, 1), got {bad}")
    x = np.empty_like(arr)
    low = arr < _ACKLAM_PLOW
    high = arr > 1.0 - _ACKLAM_PLOW
    mid = ~(low | high)
    if low.any():
        x[low] = _acklam_tail(np.sqrt(-2.0 * np.log(arr[low])))
    if high.any():
        x[high] = -_acklam_tail(np.sqrt(-2.0 * np.log(1.0 - arr[high])))
    if mid.any():
        x[mid] = _acklam_central(arr[mid])
    x = _halley_step(x, arr)
    return _halley_step(x, arr)


def coverage(mu, sigma, u, l):
    """Mass a Normal(mu, sigma) places on [l, u]: cdf((u-mu)/s) - cdf((l-mu)/s)."""
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr <= 0.0):
        raise GaussianDomainError("coverage requires sigma > 0")
    if np.any(np.asarray(l, dtype=np.float64) > np.asarray(u, dtype=np.float64)):
        raise GaussianDomainError("coverage requires l <= u")
    c = std_normal_cdf((np.asarray(u) - mu) / sigma) - std_normal_cdf((np.asarray(l) - mu) / sigma)
    c = np.clip(c, 0.0, 1.0)
    return float(c) if np.ndim(c) == 0 else c


# ---------------------------------------------------------------------------
# thresholds, schedules, support sets


@dataclass(frozen=True)
class ProbabilityThreshold:
    """Failure mass delta; the box must capture at least (1 - delta)."""

    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 0.5), got {self.delta}")

    @property
    def target(self) -> float:
        return 1.0 - self.delta


@dataclass(frozen=True)
class DeltaSchedule:
    """Strictly decreasing failure-mass levels used by the weighted bound loss."""

    deltas: tuple[float, ...]

    def __init__(self, deltas):
        object.__setattr__(self, "deltas", tuple(float(d) for d in deltas))
        if not self.deltas:
            raise ValueError("delta schedule must be nonempty")
        for d in self.deltas:
            if not 0.0 < d < 0.5:
                raise ValueError(f"every delta must lie in (0, 0.5), got {d}")
        if any(nxt >= prv for prv, nxt in zip(self.deltas[:-1], self.deltas[1:])):
            raise ValueError(f"deltas must be strictly decreasing, got {self.deltas}")

    def __len__(self):
        return len(self.deltas)

    def weights(self) -> list[float]:
        """[1 - d1, d1 - d2, ..., d_{n-1} - d_n]; telescopes to 1 - d_n."""
        ds = self.deltas
        return [1.0 - ds[0]] + [ds[i - 1] - ds[i] for i in range(1, len(ds))]


@dataclass
class SupportSet:
    """Per-dimension latent box with the probability threshold it certifies.

    ``lower``/``upper`` are gradient-tracked when built from tracked bounds;
    ``per_dim_p0`` records the per-dimension search result (a constant during
    backpropagation) and ``quantiles`` the matching icdf values.
    """

    lower: Tensor
    upper: Tensor
    threshold: ProbabilityThreshold
    per_dim_p0: np.ndarray
    quantiles: np.ndarray = field(repr=False, default=None)

    @property
    def lower_array(self) -> np.ndarray:
        return self.lower.data

    @property
    def upper_array(self) -> np.ndarray:
        return self.upper.data

    def widths(self) -> np.ndarray:
        return self.upper.data - self.lower.data


def _bracket_stat(p: float, target: float) -> float:
    """icdf(p) + icdf(p - target), with out-of-domain tails mapped to -/+inf."""
    q = p - target
    if q <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return std_normal_icdf(p) + std_normal_icdf(q)


def find_support_1d(mu_lb: float, mu_ub: float, sigma_ub: float, target: float,
                    max_depth: int = 60) -> tuple[float, float, float]:
    """One-dimensional support selection by binary search on the mass level p.

    Searches p in [target, 1] for the smallest level whose symmetric box
    captures ``target`` mass under every admissible Gaussian. On an exact hit
    of the search condition the midpoint is returned; when the depth budget
    runs out the upper bracket is returned, which always over-covers.
    Returns (l, u, p0).
    """
    if not mu_lb <= mu_ub:
        raise GaussianDomainError(f"need mu_lb <= mu_ub, got {mu_lb} > {mu_ub}")
    if sigma_ub <= 0.0:
        raise GaussianDomainError(f"need sigma_ub > 0, got {sigma_ub}")
    if not 0.0 < target < 1.0:
        raise GaussianDomainError(f"target probability must lie in (0, 1), got {target}")
    if max_depth < 1:
        raise ValueError("max_depth must be positive")

    rhs = (mu_lb - mu_ub) / sigma_ub
    lo, hi = target, 1.0
    p0 = None
    for _ in range(max_depth):
        m = 0.5 * (lo + hi)
        s = _bracket_stat(m, target)
        if s == rhs:
            p0 = m
            break
        if s < rhs:
            lo = m
        else:
            hi = m
    if p0 is None:
        p0 = hi
    zeta = sigma_ub * std_normal_icdf(min(p0, _P_CEIL))
    return mu_lb - zeta, mu_ub + zeta, p0


def _find_support_grid(mu_lb: np.ndarray, mu_ub: np.ndarray, sigma_ub: np.ndarray,
                       target: float, max_depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized binary search across all latent dimensions (and batch)."""
    rhs = (mu_lb - mu_ub) / sigma_ub
    lo = np.full_like(rhs, target)
    hi = np.ones_like(rhs)
    p0 = np.full_like(rhs, np.nan)
    done = np.zeros(rhs.shape, dtype=bool)
    for _ in range(max_depth):
        m = 0.5 * (lo + hi)
        q = m - target
        s = np.full_like(m, -np.inf)
        ok = q > 0.0
        if ok.any():
            s[ok] = std_normal_icdf(np.minimum(m[ok], _P_CEIL)) + \
                std_normal_icdf(np.minimum(q[ok], _P_CEIL))
        hit = (s == rhs) & ~done
        p0[hit] = m[hit]
        done |= hit
        go_up = (s < rhs) & ~done
        go_down = ~(s < rhs) & ~done
        lo[go_up] = m[go_up]
        hi[go_down] = m[go_down]
    p0 = np.where(done, p0, hi)
    quantiles = std_normal_icdf(np.minimum(p0, _P_CEIL))
    return p0, quantiles


def find_support(bounds, delta, max_depth: int = 60) -> SupportSet:
    """Support box for latent bounds at failure mass ``delta``.

    The overall mass (1 - delta) is split as (1 - delta) ** (1/d) per latent
    dimension; each dimension is solved independently. Gradients flow through
    the box endpoints via their linear dependence on the mean/stddev bounds;
    the searched level p0 is a constant.
    """
    threshold = delta if isinstance(delta, ProbabilityThreshold) else ProbabilityThreshold(delta)
    mu_lb, mu_ub = bounds.mu_lb, bounds.mu_ub
    sigma_ub = bounds.sigma_ub
    d_l = mu_lb.shape[-1]
    target = threshold.target ** (1.0 / d_l)
    p0, quantiles = _find_support_grid(mu_lb.data, mu_ub.data, sigma_ub.data,
                                       target, max_depth)
    zeta = Tensor(quantiles)  # constant during backpropagation
    half_width = mul(sigma_ub, zeta)
    lower = sub(mu_lb, half_width)
    upper = add(mu_ub, half_width)
    return SupportSet(lower=lower, upper=upper, threshold=threshold,
                      per_dim_p0=p0, quantiles=quantiles)


def verify_support(bounds, support: SupportSet, grid: int = 21):
    """Independent numerical check of a support set's guaranteed coverage.

    Minimizes the coverage product over a dense (mu, sigma) grid inside the
    bound rectangle of every dimension; returns the minimum joint mass (a
    scalar for unbatched bounds, an array over the batch otherwise).
    """
    mu_lb = np.asarray(bounds.mu_lb.data, dtype=np.float64)
    mu_ub = np.asarray(bounds.mu_ub.data, dtype=np.float64)
    sg_lb = np.asarray(bounds.sigma_lb.data, dtype=np.float64)
    sg_ub = np.asarray(bounds.sigma_ub.data, dtype=np.float64)
    lo = support.lower_array
    hi = support.upper_array
    if lo.shape != mu_lb.shape:
        raise ValueError(f"support shape {lo.shape} does not match bounds shape {mu_lb.shape}")

    t = np.linspace(0.0, 1.0, grid)
    # mus, sigmas: [grid, ...dims]; coverage on the full grid per dimension.
    mus = mu_lb + t.reshape((grid,) + (1,) * mu_lb.ndim) * (mu_ub - mu_lb)
    sigmas = sg_lb + t.reshape((grid,) + (1,) * mu_lb.ndim) * (sg_ub - sg_lb)
    z_hi = (hi - mus[:, None]) / sigmas[None, :]
    z_lo = (lo - mus[:, None]) / sigmas[None, :]
    cov = std_normal_cdf(z_hi) - std_normal_cdf(z_lo)  # [grid_mu, grid_sigma, ...]
    per_dim_min = cov.min(axis=(0, 1))
    joint = per_dim_min.prod(axis=-1)
    return float(joint) if np.ndim(joint) == 0 else joint
