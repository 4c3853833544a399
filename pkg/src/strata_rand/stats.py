"""Stratified permutation statistics and their exact permutation moments.

Covers the generic combinatorial statistic T^pi with its Lindeberg and
Lyapunov diagnostics, the Imbens-Rosenbaum cross-product statistic, the
Andrews-Marmer rank statistics B_n / B_n^*, and the embedding of stratified
sampling without replacement into the product-form array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import CenteredArray, StrataLayout, build_centered_array, demean_within_strata
from .errors import DegenerateVarianceError, DimensionError, DomainError, SingularCovarianceError
from .numerics import RankVector, ScoreSpec, score_transform, score_variance_factor
from .permute import StratifiedPermutation

DEFAULT_EPS = (0.01, 0.05, 0.1, 0.5)
DEFAULT_DELTA = 1.0
LAMBDA_FLOOR = 1e-10


# ---------------------------------------------------------------- generic CLT


def sigma_n_sq(a: CenteredArray) -> float:
    """sum_s (n_s - 1)^{-1} sum_ij (a_ij^s)^2 over strata with n_s >= 2."""
    total = 0.0
    for s, ns in enumerate(a.layout.sizes):
        if ns < 2:
            continue
        if a.is_product:
            total += float(np.dot(a.b[s], a.b[s]) * np.dot(a.c[s], a.c[s])) / (ns - 1)
        else:
            total += float(np.sum(a.dense[s] ** 2)) / (ns - 1)
    return total


def _sigma(a: CenteredArray) -> float:
    if a.is_zero:
        raise DegenerateVarianceError("all a_ij^s are zero; sigma_n is degenerate")
    s2 = sigma_n_sq(a)
    if not s2 > 0:
        raise DegenerateVarianceError("sigma_n^2 = 0")
    return math.sqrt(s2)


def lindeberg_sum(a: CenteredArray, eps: float, sigma: float | None = None) -> float:
    """sigma^{-2} sum_s n_s^{-1} sum_ij a^2 1(|a| > eps sigma).

    The product form avoids materializing a: for each row i it sums c_j^2
    over the j with |c_j| > eps sigma / |b_i| via a sorted suffix sum.
    """
    sigma = _sigma(a) if sigma is None else sigma
    cut = eps * sigma
    total = 0.0
    for s, ns in enumerate(a.layout.sizes):
        if a.is_product:
            b, c = a.b[s], a.c[s]
            absc = np.abs(c)
            order = np.argsort(absc)
            sorted_c = absc[order]
            tail = np.concatenate([np.cumsum((c[order] ** 2)[::-1])[::-1], [0.0]])
            nz = b != 0
            with np.errstate(divide="ignore"):
                thr = cut / np.abs(b[nz])
            idx = np.searchsorted(sorted_c, thr, side="right")
            total += float(np.dot(b[nz] ** 2, tail[idx])) / ns
        else:
            m = a.dense[s]
            total += float(np.sum(np.where(np.abs(m) > cut, m * m, 0.0))) / ns
    return total / sigma**2


def lyapunov_sum(a: CenteredArray, delta: float = DEFAULT_DELTA, sigma: float | None = None) -> float:
    """sigma^{-(2+delta)} sum_s n_s^{-1} sum_ij |a_ij^s|^{2+delta}."""
    sigma = _sigma(a) if sigma is None else sigma
    p = 2.0 + delta
    total = 0.0
    for s, ns in enumerate(a.layout.sizes):
        if a.is_product:
            total += float(np.sum(np.abs(a.b[s]) ** p) * np.sum(np.abs(a.c[s]) ** p)) / ns
        else:
            total += float(np.sum(np.abs(a.dense[s]) ** p)) / ns
    return total / sigma**p


def product_moment_sums(a: CenteredArray) -> tuple[float, float, float]:
    """Product-form sufficient conditions: sigma_n^2, the third-moment sum and
    the fourth-moment sum."""
    if not a.is_product:
        raise DimensionError("the product-form conditions need a product-form array")
    s2 = m3 = m4 = 0.0
    for s, ns in enumerate(a.layout.sizes):
        b, c = a.b[s], a.c[s]
        m3 += float(np.sum(np.abs(b) ** 3) * np.sum(np.abs(c) ** 3)) / ns
        if ns >= 2:
            s2 += float(np.dot(b, b) * np.dot(c, c)) / (ns - 1)
            m4 += float(np.sum(b**4) * np.sum(c**4)) / (ns - 1)
    return s2, m3, m4


@dataclass
class CltDiagnostics:
    sigma_n_sq: float
    lindeberg: dict[float, float]
    delta: float
    lyapunov: float
    lambda_min: float | None = None
    product_moments: tuple[float, float, float] | None = None
    singleton_strata: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        out = {
            "sigma_n_sq": self.sigma_n_sq,
            "lindeberg": {repr(float(e)): v for e, v in self.lindeberg.items()},
            "lyapunov": self.lyapunov,
            "lyapunov_delta": self.delta,
            "lambda_min": self.lambda_min,
        }
        if self.product_moments is not None:
            s2, m3, m4 = self.product_moments
            out["product_moments"] = {"sigma_n_sq": s2, "third_moment": m3, "fourth_moment": m4}
        out["singleton_strata"] = list(self.singleton_strata)
        return out


def clt_diagnostics(a: CenteredArray, eps=DEFAULT_EPS, delta: float = DEFAULT_DELTA,
                    lambda_min: float | None = None) -> CltDiagnostics:
    """Magnitudes of the Lindeberg-type conditions at fixed n.

    These are diagnostics only: the conditions are limits, so no verdict on
    whether the CLT "holds" is attempted.
    """
    sigma = _sigma(a)
    eps = (eps,) if np.isscalar(eps) else tuple(eps)
    return CltDiagnostics(
        sigma_n_sq=sigma**2,
        lindeberg={float(e): lindeberg_sum(a, e, sigma) for e in eps},
        delta=delta,
        lyapunov=lyapunov_sum(a, delta, sigma),
        lambda_min=lambda_min,
        product_moments=product_moment_sums(a) if a.is_product else None,
        singleton_strata=a.layout.singletons,
    )


def _perm_index(perm, layout: StrataLayout) -> np.ndarray:
    if perm is None:
        return np.arange(layout.n)
    if isinstance(perm, StratifiedPermutation):
        return perm.global_index()
    return np.asarray(perm, dtype=np.intp)


def t_statistic(a: CenteredArray, perm) -> float:
    """T^pi = sigma_n^{-1} sum_s sum_i a^s_{i, pi(i)}."""
    sigma = _sigma(a)
    idx = _perm_index(perm, a.layout)
    total = 0.0
    for s in range(a.layout.S):
        sl = a.layout.slice(s)
        local = idx[sl] - a.layout.offsets[s]
        if a.is_product:
            total += float(np.dot(a.b[s], a.c[s][local]))
        else:
            total += float(a.dense[s][np.arange(len(local)), local].sum())
    return total / sigma


def t_statistic_batch(a: CenteredArray, perms: np.ndarray, sigma: float | None = None) -> np.ndarray:
    """T^pi for every row of a (m, n) array of global permutation indices."""
    if not a.is_product:
        raise DimensionError("batched evaluation supports product-form arrays")
    sigma = _sigma(a) if sigma is None else sigma
    b = np.concatenate(a.b)
    c = np.concatenate(a.c)
    return (c[perms] @ b) / sigma


def sigma_matrix(b, c, layout: StrataLayout) -> tuple[np.ndarray, float]:
    """Sigma_n = n^{-1} sum_s (n_s-1)^{-1} (sum_i b~ b~') (sum_j c~_j^2) and its
    smallest eigenvalue."""
    b = layout.check_length(b, "b")
    if b.ndim == 1:
        b = b[:, None]
    if b.shape[1] == 0:
        raise DimensionError("Sigma_n needs k >= 1")
    bt = demean_within_strata(b, layout)
    ct = demean_within_strata(c, layout)
    k = b.shape[1]
    sigma = np.zeros((k, k))
    for s, ns in enumerate(layout.sizes):
        if ns < 2:
            continue
        sl = layout.slice(s)
        sigma += (bt[sl].T @ bt[sl]) * float(np.dot(ct[sl], ct[sl])) / (ns - 1)
    sigma /= layout.n
    sigma = 0.5 * (sigma + sigma.T)
    return sigma, float(np.linalg.eigvalsh(sigma)[0])


# ------------------------------------------------------------ Imbens-Rosenbaum


@dataclass(frozen=True)
class IRMoments:
    mu: float
    sigma_sq: float
    n_effective: int


@dataclass(frozen=True)
class IRResult:
    T: float
    moments: IRMoments
    standardized: float


def ir_moments(q, rho, layout: StrataLayout) -> IRMoments:
    """Exact permutation mean and variance of T = sum q_si rho_{s pi(i)}.

    The mean runs over all strata; singleton strata add nothing to the
    variance.
    """
    q = layout.check_length(q, "q")
    rho = layout.check_length(rho, "rho")
    sizes = np.asarray(layout.sizes, dtype=float)
    ids = layout.stratum_ids
    qbar = np.bincount(ids, weights=q, minlength=layout.S) / sizes
    rbar = np.bincount(ids, weights=rho, minlength=layout.S) / sizes
    mu = float(np.sum(sizes * qbar * rbar))
    sq = np.bincount(ids, weights=(q - qbar[ids]) ** 2, minlength=layout.S)
    sr = np.bincount(ids, weights=(rho - rbar[ids]) ** 2, minlength=layout.S)
    big = sizes >= 2
    var = float(np.sum(sq[big] * sr[big] / (sizes[big] - 1)))
    return IRMoments(mu, var, layout.n - len(layout.singletons))


def ir_statistic(q, rho, layout: StrataLayout, perm=None) -> IRResult:
    moments = ir_moments(q, rho, layout)
    if not moments.sigma_sq > 0:
        raise DegenerateVarianceError("Var[T] = 0: no stratum of size >= 2 with nonconstant q and rho")
    q = np.asarray(q, dtype=float)
    rho = np.asarray(rho, dtype=float)
    T = float(np.dot(q, rho[_perm_index(perm, layout)]))
    return IRResult(T, moments, (T - moments.mu) / math.sqrt(moments.sigma_sq))


# ---------------------------------------------------------------- Andrews-Marmer


@dataclass
class AMComponents:
    A_n: np.ndarray
    Omega_n: np.ndarray
    Omega_star: np.ndarray
    B_n: float
    B_star: float
    k: int
    lambda_min: float
    lambda_min_star: float

    def to_dict(self) -> dict:
        return {
            "A_n": self.A_n.tolist(),
            "Omega": self.Omega_n.tolist(),
            "Omega_star": self.Omega_star.tolist(),
            "B_n": self.B_n,
            "B_star": self.B_star,
            "lambda_min": self.lambda_min,
            "lambda_min_star": self.lambda_min_star,
        }


class AMDesign:
    """Everything in B_n and B_n^* that does not depend on the ranks.

    Omega_n and Omega_n^* are functions of the instruments and the layout
    only, so repeated evaluation over rank draws reuses one factorization.
    """

    def __init__(self, z, layout: StrataLayout, spec: ScoreSpec, lambda_floor: float = LAMBDA_FLOOR):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2 or z.shape[0] != layout.n:
            raise DimensionError(f"z must be (n, k) with n={layout.n}, got {z.shape}")
        if z.shape[1] == 0:
            raise DimensionError("the Andrews-Marmer statistics need k >= 1 instruments")
        self.layout, self.spec, self.k = layout, spec, z.shape[1]
        self.zt = demean_within_strata(z, layout)
        n = layout.n
        cross = np.zeros((self.k, self.k))
        cross_star = np.zeros((self.k, self.k))
        factors = {ns: score_variance_factor(ns, spec) for ns in set(layout.sizes)}
        for s, ns in enumerate(layout.sizes):
            sl = layout.slice(s)
            zz = self.zt[sl].T @ self.zt[sl]
            cross += zz
            if ns >= 2:
                cross_star += zz * factors[ns]
        self.omega = cross * spec.centered_second_moment / n
        self.omega_star = cross_star / n
        self.omega = 0.5 * (self.omega + self.omega.T)
        self.omega_star = 0.5 * (self.omega_star + self.omega_star.T)
        self.lambda_min = float(np.linalg.eigvalsh(self.omega)[0])
        self.lambda_min_star = float(np.linalg.eigvalsh(self.omega_star)[0])
        worst = min(self.lambda_min, self.lambda_min_star)
        if not worst > lambda_floor:
            raise SingularCovarianceError(
                f"instrument covariance is singular (lambda_min = {worst:.3g} <= {lambda_floor:g})",
                lambda_min=worst,
            )
        self._chol = np.linalg.cholesky(self.omega)
        self._chol_star = np.linalg.cholesky(self.omega_star)

    @staticmethod
    def _quad(chol, a):
        w = np.linalg.solve(chol, a)
        return float(np.dot(w, w)) if w.ndim == 1 else np.sum(w * w, axis=0)

    def a_n(self, scores) -> np.ndarray:
        """A_n = n^{-1} sum_s sum_i (Z_si - Zbar_s) phi_si for given scores."""
        return (self.zt.T @ np.asarray(scores, dtype=float)) / self.layout.n

    def statistics(self, scores) -> tuple[np.ndarray, float, float]:
        A = self.a_n(scores)
        n = self.layout.n
        return A, n * self._quad(self._chol, A), n * self._quad(self._chol_star, A)

    def components(self, ranks: RankVector) -> AMComponents:
        A, B, B_star = self.statistics(score_transform(ranks, self.spec))
        return AMComponents(A, self.omega.copy(), self.omega_star.copy(), B, B_star, self.k,
                            self.lambda_min, self.lambda_min_star)


def am_components(z, ranks: RankVector, spec: ScoreSpec, lambda_floor: float = LAMBDA_FLOOR) -> AMComponents:
    """A_n, Omega_n, Omega_n^*, B_n and B_n^* for one rank assignment."""
    return AMDesign(z, ranks.layout, spec, lambda_floor).components(ranks)


# ------------------------------------------------------ finite-population bridge


def _per_stratum(y, layout: StrataLayout | None):
    if layout is None:
        blocks = [np.asarray(v, dtype=float) for v in y]
        layout = StrataLayout(tuple(len(v) for v in blocks))
        return np.concatenate(blocks), layout
    return layout.check_length(y, "y"), layout


def _check_n1(n1s, layout: StrataLayout) -> np.ndarray:
    n1s = np.asarray(n1s, dtype=int)
    if n1s.shape != (layout.S,):
        raise DimensionError(f"need one sample count per stratum ({layout.S})")
    sizes = np.asarray(layout.sizes)
    bad = (n1s < 2) | (n1s > sizes - 1)
    if bad.any():
        s = int(np.flatnonzero(bad)[0])
        raise DomainError(f"stratum {s}: need 2 <= n_1s <= n_s - 1, got n_1s={n1s[s]}, n_s={sizes[s]}")
    return n1s


@dataclass
class FinitePopBridge:
    layout: StrataLayout
    y: np.ndarray
    n1s: np.ndarray
    ybar: float
    v_sq: float
    b: np.ndarray
    c: np.ndarray
    array: CenteredArray = field(repr=False)
    sigma_n_sq_from_bc: float

    @property
    def degenerate(self) -> bool:
        return self.v_sq == 0.0

    @property
    def identity_gap(self) -> float:
        """Relative gap between sigma_n^2 of the embedded array and v^2."""
        if self.v_sq == 0.0:
            return abs(self.sigma_n_sq_from_bc)
        return abs(self.sigma_n_sq_from_bc - self.v_sq) / self.v_sq


def finite_pop_bridge(y, n1s, layout: StrataLayout | None = None) -> FinitePopBridge:
    """Embed stratified sampling of n_1s units per stratum as a product array.

    b_si = 1/n_1s on the first n_1s units of each stratum and 0 otherwise,
    c_sj = p_s y_sj.  ``y`` is either an n-vector with ``layout`` or a list of
    per-stratum arrays.
    """
    y, layout = _per_stratum(y, layout)
    n1s = _check_n1(n1s, layout)
    sizes = np.asarray(layout.sizes, dtype=float)
    ids = layout.stratum_ids
    p = sizes / layout.n
    ybar_s = np.bincount(ids, weights=y, minlength=layout.S) / sizes
    v_s = np.bincount(ids, weights=(y - ybar_s[ids]) ** 2, minlength=layout.S) / (sizes - 1)
    v_sq = float(np.sum(p**2 * v_s * (sizes - n1s) / (n1s * sizes)))
    within = np.arange(layout.n) - layout.offsets[ids]
    b = np.where(within < n1s[ids], 1.0 / n1s[ids], 0.0)
    c = p[ids] * y
    arr = build_centered_array(b, c, layout)
    return FinitePopBridge(layout, y, n1s, float(np.sum(p * ybar_s)), v_sq, b, c, arr, sigma_n_sq(arr))


def fp_sample_stats(y, n1s, indicators, layout: StrataLayout | None = None) -> tuple[float, float]:
    """Weighted sample mean y-hat and variance estimate v-hat^2.

    v-hat_s^2 divides the sum over sampled units by (n_s - 1).
    """
    y, layout = _per_stratum(y, layout)
    n1s = _check_n1(n1s, layout)
    z = np.asarray(indicators)
    if z.shape != (layout.n,):
        raise DimensionError("one sampling indicator per unit required")
    ids = layout.stratum_ids
    counts = np.bincount(ids, weights=z.astype(float), minlength=layout.S).astype(int)
    if np.any(counts != n1s) or np.any((z != 0) & (z != 1)):
        raise DomainError("indicators must be 0/1 and sum to n_1s within each stratum")
    sizes = np.asarray(layout.sizes, dtype=float)
    p = sizes / layout.n
    yhat_s = np.bincount(ids, weights=z * y, minlength=layout.S) / n1s
    vhat_s = np.bincount(ids, weights=z * (y - yhat_s[ids]) ** 2, minlength=layout.S) / (sizes - 1)
    yhat = float(np.sum(p * yhat_s))
    vhat = float(np.sum(p**2 * vhat_s * (sizes - n1s) / (n1s * sizes)))
    return yhat, vhat


def fp_lindeberg(y, n1s, eps: float, layout: StrataLayout | None = None) -> float:
    """Finite-population Lindeberg sum for stratified sampling.

    Written with w_s^2 / v_s^2 = p_s^2 (n_s - n_1s) / (v^2 n_s n_1s), which
    stays defined when a stratum is constant.
    """
    y, layout = _per_stratum(y, layout)
    bridge = finite_pop_bridge(y, n1s, layout)
    if bridge.degenerate:
        raise DegenerateVarianceError("v^2 = 0")
    sizes = np.asarray(layout.sizes, dtype=float)
    ids = layout.stratum_ids
    n1 = bridge.n1s.astype(float)
    p = sizes / layout.n
    ybar_s = np.bincount(ids, weights=y, minlength=layout.S) / sizes
    dev = y - ybar_s[ids]
    ratio = p**2 * (sizes - n1) / (bridge.v_sq * sizes * n1)  # w_s^2 / v_s^2
    lhs = np.sqrt(ratio[ids]) * np.abs(dev)
    rhs = eps * np.sqrt(n1 * (sizes - n1) / sizes)[ids]
    terms = np.where(lhs > rhs, ratio[ids] * dev**2, 0.0)
    return float(np.sum(np.bincount(ids, weights=terms, minlength=layout.S) / (sizes - 1)))
