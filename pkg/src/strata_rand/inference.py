"""Asymptotic, Monte Carlo and exact randomization tests."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .core import StrataLayout, StratifiedDataset, build_centered_array
from .errors import DimensionError, DomainError, StrataRandError
from .numerics import RankVector, ScoreSpec, chi2_sf, ranks_within_strata, score_positions, score_transform
from .permute import ENUMERATION_CAP, enumerate_permutation_array, sample_permutation_indices
from .stats import AMDesign, clt_diagnostics, sigma_matrix, ir_statistic

MIN_EFFECTIVE_SIZE = 30
MC_BATCH = 4096
# Statistics within this relative distance of the observed value count as ties.
TIE_RTOL = 1e-10


@dataclass
class MCNullDistribution:
    draws: np.ndarray
    seed: int | None = None

    @property
    def sorted(self) -> np.ndarray:
        return np.sort(self.draws)

    @property
    def B(self) -> int:
        return len(self.draws)

    def quantile(self, p: float) -> float:
        return float(np.quantile(self.draws, p))

    def ks_distance(self, cdf: Callable) -> float:
        """sup_x |F_B(x) - cdf(x)| for the empirical CDF F_B of the draws."""
        x = self.sorted
        F = np.asarray(cdf(x), dtype=float)
        m = len(x)
        hi = np.arange(1, m + 1) / m - F
        lo = F - np.arange(m) / m
        return float(max(hi.max(), lo.max()))

    def p_value(self, observed: float) -> float:
        """(1 + #{draw >= observed}) / (B + 1)."""
        return (1 + _count_at_least(self.draws, observed)) / (self.B + 1)


def _count_at_least(values: np.ndarray, observed: float) -> int:
    tol = TIE_RTOL * max(1.0, abs(observed))
    return int(np.count_nonzero(values >= observed - tol))


def _layout_of(source) -> StrataLayout:
    return source.layout if isinstance(source, StratifiedDataset) else source


def mc_null_distribution(statistic_fn: Callable[[np.ndarray], np.ndarray], dataset, B: int,
                         rng: np.random.Generator, batch: int = MC_BATCH) -> MCNullDistribution:
    """B draws of a statistic under pi ~ U(S_n).

    ``statistic_fn`` receives an (m, n) array whose rows are permutations in
    canonical global indices and returns m values.  Draws are generated in
    fixed-size batches from ``rng``, so a given generator state always gives
    the same sequence.
    """
    if B < 1:
        raise DomainError("B must be at least 1")
    layout = _layout_of(dataset)
    out = np.empty(B)
    done = 0
    while done < B:
        m = min(batch, B - done)
        perms = sample_permutation_indices(layout, rng, m)
        out[done:done + m] = np.asarray(statistic_fn(perms), dtype=float).reshape(m)
        done += m
    return MCNullDistribution(out)


def exact_null_distribution(statistic_fn, dataset, cap: int = ENUMERATION_CAP, batch: int = 65536) -> np.ndarray:
    """The statistic over every element of S_n (enumeration order)."""
    perms = enumerate_permutation_array(_layout_of(dataset), cap)
    return np.concatenate([np.asarray(statistic_fn(perms[i:i + batch]), dtype=float)
                           for i in range(0, len(perms), batch)])


@dataclass
class TestReport:
    method: str
    statistic: float
    null_value: float
    p_asymptotic: float
    p_mc: float | None = None
    mc_reps: int | None = None
    seed: int | None = None
    p_exact: float | None = None
    details: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        row = {k: v for k, v in self.to_dict().items() if not isinstance(v, (dict, list))}
        for key, val in self.details.items():
            if isinstance(val, (int, float)):
                row[key] = val
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: "" if v is None else v for k, v in row.items()})
        return buf.getvalue()


def _residual(dataset: StratifiedDataset, beta0: float) -> np.ndarray:
    if dataset.d is None:
        if beta0 != 0:
            raise DimensionError("a nonzero beta0 needs a dose column d")
        return np.asarray(dataset.y, dtype=float)
    return dataset.y - beta0 * dataset.d


def _scores(v, layout, spec: ScoreSpec, rng, tie_policy) -> np.ndarray:
    if spec.kind == "identity":
        return np.asarray(v, dtype=float)
    return score_transform(ranks_within_strata(v, layout, tie_policy, rng), spec)


def _effective_size_warning(layout, mode, min_effective, notes):
    if mode == "asymptotic" and layout.effective_size < min_effective:
        msg = f"effective sample size n - S = {layout.effective_size} < {min_effective}"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)


def _safe_diagnostics(build) -> dict:
    try:
        return build()
    except StrataRandError as exc:
        return {"error": str(exc)}


def ir_test(dataset: StratifiedDataset, beta0: float, response_score: ScoreSpec, iv_score: ScoreSpec,
            mode: str = "asymptotic", B: int = 999, rng: np.random.Generator | None = None,
            seed: int | None = None, cap: int = ENUMERATION_CAP, min_effective: int = MIN_EFFECTIVE_SIZE,
            tie_policy: str = "random") -> TestReport:
    """Imbens-Rosenbaum test of H0: beta = beta0 with a scalar instrument.

    The reported statistic is (T - mu) / sigma; every p-value is two-sided in
    its absolute value.  ``mode`` is "asymptotic", "mc" or "exact"; the
    asymptotic p-value is always included.
    """
    if dataset.k != 1:
        raise DimensionError(f"the IR test takes one instrument column, dataset has k={dataset.k}")
    if mode not in ("asymptotic", "mc", "exact"):
        raise DomainError(f"unknown mode {mode!r}")
    layout = dataset.layout
    notes: list = []
    _effective_size_warning(layout, mode, min_effective, notes)

    q = _scores(_residual(dataset, beta0), layout, response_score, rng, tie_policy)
    rho = _scores(dataset.z[:, 0], layout, iv_score, rng, tie_policy)
    res = ir_statistic(q, rho, layout)
    sd = math.sqrt(res.moments.sigma_sq)
    mu = res.moments.mu
    obs = abs(res.standardized)

    def stat_fn(perms):
        return np.abs((rho[perms] @ q - mu) / sd)

    report = TestReport(
        method=f"IR-{response_score.kind}-{iv_score.kind}",
        statistic=res.standardized,
        null_value=beta0,
        p_asymptotic=math.erfc(obs / math.sqrt(2.0)),
        seed=seed,
        details={"T": res.T, "mu": mu, "sigma_sq": res.moments.sigma_sq,
                 "n_effective": res.moments.n_effective, "n": layout.n, "S": layout.S},
        warnings=notes,
    )
    if mode == "mc":
        if rng is None:
            raise DomainError("Monte Carlo mode needs an rng")
        dist = mc_null_distribution(stat_fn, layout, B, rng)
        report.p_mc, report.mc_reps = dist.p_value(obs), B
    elif mode == "exact":
        values = exact_null_distribution(stat_fn, layout, cap)
        report.p_exact = _count_at_least(values, obs) / len(values)
    report.diagnostics = _safe_diagnostics(lambda: clt_diagnostics(build_centered_array(q, rho, layout)).to_dict())
    return report


def am_test(dataset: StratifiedDataset, beta0: float, spec: ScoreSpec, variant: str = "star",
            mode: str = "asymptotic", B: int = 999, rng: np.random.Generator | None = None,
            seed: int | None = None, min_effective: int = MIN_EFFECTIVE_SIZE,
            tie_policy: str = "random") -> TestReport:
    """Andrews-Marmer rank test of H0: beta = beta0.

    ``variant="star"`` uses the finite-sample score covariance (B_n^*),
    ``"legacy"`` the integral approximation (B_n).  Both statistics are
    reported either way.  The Monte Carlo mode redraws the within-stratum
    ranks and keeps the instruments fixed.
    """
    if variant not in ("star", "legacy"):
        raise DomainError(f"unknown variant {variant!r}")
    if mode not in ("asymptotic", "mc"):
        raise DomainError(f"unknown mode {mode!r}")
    if spec.kind == "identity":
        raise DomainError("the rank statistic needs a wilcoxon or normal score")
    layout = dataset.layout
    notes: list = []
    _effective_size_warning(layout, mode, min_effective, notes)

    design = AMDesign(dataset.z, layout, spec)
    ranks = ranks_within_strata(_residual(dataset, beta0), layout, tie_policy, rng)
    comp = design.components(ranks)
    stat = comp.B_star if variant == "star" else comp.B_n
    report = TestReport(
        method=f"AM-chi2-{variant}",
        statistic=stat,
        null_value=beta0,
        p_asymptotic=chi2_sf(stat, comp.k),
        seed=seed,
        details={"score": spec.kind, "k": comp.k, "n": layout.n, "S": layout.S, **comp.to_dict()},
        warnings=notes,
    )
    if mode == "mc":
        if rng is None:
            raise DomainError("Monte Carlo mode needs an rng")
        positions = score_positions(layout, spec)
        chol = design._chol_star if variant == "star" else design._chol

        def stat_fn(perms):
            A = design.zt.T @ positions[perms].T / layout.n
            return layout.n * design._quad(chol, A)

        dist = mc_null_distribution(stat_fn, layout, B, rng)
        report.p_mc, report.mc_reps = dist.p_value(stat), B

    def diag():
        positions = score_positions(layout, spec)
        _, lam = sigma_matrix(dataset.z, positions, layout)
        t = np.ones(comp.k) / math.sqrt(comp.k)
        d = clt_diagnostics(build_centered_array(dataset.z, positions, layout, direction=t), lambda_min=lam)
        return d.to_dict()

    report.diagnostics = _safe_diagnostics(diag)
    return report
