"""Score functions, within-stratum ranks and distribution functions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import StrataLayout
from .errors import DimensionError, DomainError, TieError

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_erfc = np.frompyfunc(math.erfc, 1, 1)

# Wichura (1988), algorithm AS 241, PPND16.
_A = (3.387132872796366608, 133.14166789178437745, 1971.5909503065514427, 13731.693765509461125,
      45921.953931549871457, 67265.770927008700853, 33430.575583588128105, 2509.0809287301226727)
_B = (1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
      21213.794301586595867, 39307.89580009271061, 28729.085735721942674, 5226.495278852545925)
_C = (1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055, 3.64784832476320460504,
      1.27045825245236838258, 0.24178072517745061177, 0.0227238449892691845833, 7.7454501427834140764e-4)
_D = (1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
      0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4, 1.05075007164441684324e-9)
_E = (6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358, 0.29656057182850489123,
      0.026532189526576123093, 0.0012426609473880784386, 2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
      7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7, 2.04426310338993978564e-15)


def _poly(coef, x):
    acc = np.zeros_like(x) + coef[-1]
    for c in reversed(coef[:-1]):
        acc = acc * x + c
    return acc


def std_normal_cdf(x):
    """Phi(x), computed from erfc on the tail that avoids cancellation."""
    x = np.asarray(x, dtype=float)
    out = 0.5 * np.asarray(_erfc(-x / _SQRT2), dtype=float)
    return out if out.ndim else float(out)


def _lower_tail_cdf(x):
    # x <= 0 here, so erfc's argument is non-negative and the result has full relative accuracy.
    return 0.5 * np.asarray(_erfc(-x / _SQRT2), dtype=float)


def std_normal_quantile(p):
    """Phi^{-1}(p) for 0 < p < 1.

    AS 241 rational approximation on the lower half, one Halley step
    against :func:`std_normal_cdf`, and reflection for p > 1/2.
    """
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError("normal quantile needs 0 < p < 1")
    upper = p > 0.5
    q = np.where(upper, 1.0 - p, p)  # exact for p in [1/2, 1)

    x = np.empty_like(q)
    central = q > 0.075
    d = q[central] - 0.5
    r = 0.180625 - d * d
    x[central] = d * _poly(_A, r) / _poly(_B, r)
    tail = ~central
    r = np.sqrt(-np.log(q[tail]))
    near = r <= 5.0
    xt = np.empty_like(r)
    rn = r[near] - 1.6
    xt[near] = -_poly(_C, rn) / _poly(_D, rn)
    rf = r[~near] - 5.0
    xt[~near] = -_poly(_E, rf) / _poly(_F, rf)
    x[tail] = xt

    # Halley refinement on the lower tail where Phi(x) is accurate.
    err = _lower_tail_cdf(x) - q
    u = err * _SQRT2PI * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    x = np.where(upper, -x, x)
    return x if x.ndim else float(x)


def _gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by its power series."""
    if x == 0.0:
        return 0.0
    term = total = 1.0 / a
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by Lentz's continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def _chi2_check(k) -> float:
    if int(k) != k or k < 1:
        raise DomainError(f"degrees of freedom must be a positive integer, got {k}")
    return 0.5 * k


def chi2_cdf(x: float, k: int) -> float:
    a = _chi2_check(k)
    if x < 0 or math.isnan(x):
        raise DomainError("chi-square argument must be >= 0")
    h = 0.5 * x
    return _gamma_series(a, h) if h < a + 1.0 else 1.0 - _gamma_cf(a, h)


def chi2_sf(x: float, k: int) -> float:
    """P(chi2_k > x): series below x/2 < k/2 + 1, continued fraction above."""
    a = _chi2_check(k)
    if x < 0 or math.isnan(x):
        raise DomainError("chi-square argument must be >= 0")
    if math.isinf(x):
        return 0.0
    h = 0.5 * x
    return 1.0 - _gamma_series(a, h) if h < a + 1.0 else _gamma_cf(a, h)


def _chi2_logpdf(x: float, k: int) -> float:
    a = 0.5 * k
    return (a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - math.lgamma(a)


def chi2_quantile(p: float, k: int) -> float:
    """Inverse of :func:`chi2_cdf`.

    Newton steps on whichever tail probability is smaller (so the target is
    never formed as 1 - p), safeguarded by bisection on a bracket.
    """
    _chi2_check(k)
    if not 0.0 < p < 1.0:
        raise DomainError("chi-square quantile needs 0 < p < 1")
    use_lower = p < 0.5
    target = p if use_lower else 1.0 - p

    def g(x):
        return (chi2_cdf(x, k) if use_lower else chi2_sf(x, k)) - target

    # Wilson-Hilferty start
    z = std_normal_quantile(p)
    c = 2.0 / (9.0 * k)
    x = k * max(1.0 - c + z * math.sqrt(c), 1e-3) ** 3
    lo, hi = 0.0, max(2.0 * x, 1.0)
    while (g(hi) < 0) if use_lower else (g(hi) > 0):
        hi *= 2.0
    x = min(max(x, lo), hi) or hi / 2
    for _ in range(200):
        gx = g(x)
        if gx == 0.0:
            return x
        below = gx < 0 if use_lower else gx > 0
        if below:
            lo = x
        else:
            hi = x
        dens = math.exp(_chi2_logpdf(x, k))
        step = gx / dens if use_lower else -gx / dens
        nx = x - step
        if not lo < nx < hi:
            nx = 0.5 * (lo + hi)
        if abs(nx - x) <= 1e-15 * max(x, 1e-300) or hi - lo <= 1e-15 * hi:
            return nx
        x = nx
    return x


@dataclass(frozen=True)
class ScoreSpec:
    """A named score function phi on (0, 1).

    ``identity`` is not a function of ranks: it tells callers to use the raw
    values.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in ("wilcoxon", "normal", "identity"):
            raise DomainError(f"unknown score kind {self.kind!r}")

    def phi(self, x):
        if self.kind == "wilcoxon":
            return np.asarray(x, dtype=float)
        if self.kind == "normal":
            return std_normal_quantile(x)
        raise DomainError("the identity score acts on raw values, not on ranks")

    @property
    def centered_second_moment(self) -> float:
        """Integral of (phi - mean phi)^2 over (0, 1)."""
        if self.kind == "wilcoxon":
            return 1.0 / 12.0
        if self.kind == "normal":
            return 1.0
        raise DomainError("identity score has no integral form")


WILCOXON = ScoreSpec("wilcoxon")
NORMAL = ScoreSpec("normal")
IDENTITY = ScoreSpec("identity")


@dataclass(frozen=True, eq=False)
class RankVector:
    layout: StrataLayout
    ranks: np.ndarray  # 1..n_s within each stratum, canonical unit order
    ties: bool = False


def ranks_within_strata(v, layout: StrataLayout, tie_policy: str = "random", rng=None) -> RankVector:
    """Rank each value among its stratum.

    ``tie_policy="random"`` breaks ties by a uniformly random strict order
    drawn from ``rng``; ``"error"`` raises :class:`TieError`.
    """
    v = layout.check_length(v)
    if v.ndim != 1:
        raise DimensionError("ranks need a vector")
    if tie_policy not in ("random", "error"):
        raise DomainError(f"unknown tie policy {tie_policy!r}")
    ids = layout.stratum_ids
    order = np.lexsort((v, ids))
    sv, sids = v[order], ids[order]
    dup = (sv[1:] == sv[:-1]) & (sids[1:] == sids[:-1])
    ties = bool(dup.any())
    if ties:
        first = int(sids[1:][dup][0])
        if tie_policy == "error":
            raise TieError(f"tied values in stratum {first}", stratum=first)
        if rng is None:
            raise TieError(f"tied values in stratum {first}; random tie-breaking needs an rng", stratum=first)
        order = np.lexsort((rng.random(layout.n), v, ids))
    ranks = np.empty(layout.n, dtype=np.intp)
    ranks[order] = np.arange(layout.n) - layout.offsets[ids[order]] + 1
    ranks.setflags(write=False)
    return RankVector(layout, ranks, ties)


def score_positions(layout: StrataLayout, spec: ScoreSpec) -> np.ndarray:
    """phi(i / (n_s + 1)) for i = 1..n_s in every stratum, canonical order."""
    return score_transform(RankVector(layout, np.arange(layout.n) - layout.offsets[layout.stratum_ids] + 1), spec)


def score_transform(R: RankVector, spec: ScoreSpec) -> np.ndarray:
    """q_si = phi(R_si / (n_s + 1))."""
    ns = np.asarray(R.layout.sizes, dtype=float)[R.layout.stratum_ids]
    return np.asarray(spec.phi(R.ranks / (ns + 1.0)), dtype=float)


def score_variance_factor(ns: int, spec: ScoreSpec) -> float:
    """(n_s - 1)^{-1} sum_i (phi_i - mean phi)^2 with phi_i = phi(i / (n_s + 1))."""
    if ns < 2:
        return 0.0
    phi = np.asarray(spec.phi(np.arange(1, ns + 1) / (ns + 1.0)), dtype=float)
    return float(np.sum((phi - phi.mean()) ** 2) / (ns - 1))


def riemann_abs_moment(ns: int, spec: ScoreSpec, power: float) -> float:
    """(n_s + 1)^{-1} sum_i |phi(i / (n_s + 1))|^power."""
    phi = np.asarray(spec.phi(np.arange(1, ns + 1) / (ns + 1.0)), dtype=float)
    return float(np.sum(np.abs(phi) ** power) / (ns + 1))


def midpoint_integral(f, m: int = 10**6) -> float:
    """Midpoint rule for the integral of f over (0, 1) with m cells."""
    x = (np.arange(m) + 0.5) / m
    return float(np.sum(f(x)) / m)
