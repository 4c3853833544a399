"""Null rejection rates of the Andrews-Marmer statistics under many small strata.

Design: instruments Z_i ~ t_5 with covariance I_k, a stratification variable
on the grid {1, ..., n/r}/(n/r), Cauchy errors with correlation parameter rho
between the structural and first-stage noise, and first-stage coefficients
sqrt(lambda/(n k)).  Z and X are drawn once per cell and held fixed across
replications.

Streams are derived from the master seed by spawn keys, so every number in
the output is a function of (seed, k, r, replication) alone and does not
depend on the worker count.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import StrataLayout, StratifiedDataset
from .errors import DomainError, SingularCovarianceError
from .numerics import ScoreSpec, chi2_quantile, ranks_within_strata, score_transform
from .stats import AMDesign

STAT_NAMES = {("normal", "star"): "BN*", ("wilcoxon", "star"): "BW*",
              ("normal", "legacy"): "BN", ("wilcoxon", "legacy"): "BW"}
CSV_COLUMNS = ["k", "r", "stat", "rejection_pct", "max_ns", "S", "reps", "seed", "errors"]

_Z_STREAM, _X_STREAM, _REP_STREAM = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    n: int = 400
    ks: tuple[int, ...] = (1,)
    rs: tuple[int, ...] = (2, 5, 10, 25, 80)
    replications: int = 2000
    rho: float = 0.5
    lambda_strength: float = 9.0
    beta0: float = 0.0
    seed: int = 7
    scores: tuple[str, ...] = ("normal", "wilcoxon")
    variants: tuple[str, ...] = ("star", "legacy")
    level: float = 0.05

    def __post_init__(self):
        if self.replications < 1:
            raise DomainError("replications must be >= 1")
        for r in self.rs:
            if self.n // r < 1:
                raise DomainError(f"n/r < 1 for r={r}")
            if self.n % r:
                warnings.warn(f"n={self.n} is not divisible by r={r}; grid size floor(n/r) used", stacklevel=2)

    @classmethod
    def full_scale(cls, seed: int = 7) -> "SimConfig":
        return cls(ks=(1, 3), replications=5000, seed=seed)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a spawn key below the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def draw_instruments(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """n draws from the k-variate t_5 with identity covariance.

    Gaussian over sqrt(chi2_5 / 5), with the Gaussian scaled by sqrt(3/5) so
    that the covariance (not the scale matrix) is the identity.
    """
    g = rng.standard_normal((n, k))
    chi = np.sum(rng.standard_normal((n, 5)) ** 2, axis=1)
    return math.sqrt(3.0 / 5.0) * g / np.sqrt(chi / 5.0)[:, None]


def draw_strata(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Integer numerators m_i of X_i = m_i / (n/r), uniform on 1..n/r."""
    return rng.integers(1, n // r + 1, size=n)


def standard_cauchy(rng: np.random.Generator, size) -> np.ndarray:
    return rng.standard_normal(size) / rng.standard_normal(size)


@dataclass(frozen=True, eq=False)
class SimDesign:
    z: np.ndarray  # canonical (stratum-sorted) order
    x_numerator: np.ndarray
    grid: int
    layout: StrataLayout

    @property
    def S(self) -> int:
        return self.layout.S

    @property
    def max_ns(self) -> int:
        return max(self.layout.sizes)


def design_from_draws(z: np.ndarray, x_num: np.ndarray, grid: int) -> SimDesign:
    """Strata are the level sets of X, ordered by X value."""
    order = np.argsort(x_num, kind="stable")
    _, sizes = np.unique(x_num, return_counts=True)
    return SimDesign(z[order], x_num[order], grid, StrataLayout(tuple(int(s) for s in sizes)))


def generate_design(config: SimConfig, rng: np.random.Generator, k: int | None = None,
                    r: int | None = None) -> SimDesign:
    k = config.ks[0] if k is None else k
    r = config.rs[0] if r is None else r
    if config.n // r < 1:
        raise DomainError(f"n/r < 1 for r={r}")
    z = draw_instruments(config.n, k, rng)
    return design_from_draws(z, draw_strata(config.n, r, rng), config.n // r)


def cell_design(config: SimConfig, k: int, r: int) -> SimDesign:
    """The design used by :func:`rejection_table`: Z shared across r for each k."""
    z = draw_instruments(config.n, k, stream(config.seed, _Z_STREAM, k))
    x = draw_strata(config.n, r, stream(config.seed, _X_STREAM, k, r))
    return design_from_draws(z, x, config.n // r)


def simulate_replication(design: SimDesign, config: SimConfig, rng: np.random.Generator) -> StratifiedDataset:
    """One draw of (Y, D) given the fixed design; every nuisance parameter is 0."""
    n, k = design.z.shape
    u = standard_cauchy(rng, n)
    e = standard_cauchy(rng, n)
    v = config.rho * u + math.sqrt(1.0 - config.rho**2) * e
    coef = np.full(k, math.sqrt(config.lambda_strength / (n * k)))
    d = design.z @ coef + v
    y = d * 0.0 + u
    labels = tuple(str(int(m)) for m in np.unique(design.x_numerator))
    return StratifiedDataset(design.layout, y, d, design.z, labels)


def _cell_chunk(args):
    config, k, r, start, stop = args
    design = cell_design(config, k, r)
    designs = {}
    for kind in config.scores:
        try:
            designs[kind] = AMDesign(design.z, design.layout, ScoreSpec(kind))
        except SingularCovarianceError:
            designs[kind] = None
    crit = chi2_quantile(1.0 - config.level, k)
    keys = [(kind, var) for kind in config.scores for var in config.variants]
    rejections = {key: 0 for key in keys}
    errors = {key: 0 for key in keys}
    for rep in range(start, stop):
        rng = stream(config.seed, _REP_STREAM, k, r, rep)
        data = simulate_replication(design, config, rng)
        ranks = ranks_within_strata(data.y - config.beta0 * data.d, design.layout, "random", rng)
        for kind in config.scores:
            am = designs[kind]
            if am is None:
                for var in config.variants:
                    errors[(kind, var)] += 1
                continue
            _, b_legacy, b_star = am.statistics(score_transform(ranks, am.spec))
            for var in config.variants:
                stat = b_star if var == "star" else b_legacy
                rejections[(kind, var)] += int(stat > crit)
    return rejections, errors


@dataclass
class CellResult:
    k: int
    r: int
    max_ns: int
    S: int
    reps: int
    rejections: dict
    errors: dict

    def rate_pct(self, kind: str, variant: str) -> float:
        ok = self.reps - self.errors[(kind, variant)]
        return 100.0 * self.rejections[(kind, variant)] / ok if ok else float("nan")


def run_cell(config: SimConfig, k: int, r: int, threads: int = 1, chunk: int = 250) -> CellResult:
    design = cell_design(config, k, r)
    bounds = [(config, k, r, a, min(a + chunk, config.replications))
              for a in range(0, config.replications, chunk)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_cell_chunk, bounds))
    else:
        parts = [_cell_chunk(b) for b in bounds]
    rej, err = parts[0]
    for more_rej, more_err in parts[1:]:
        for key in rej:
            rej[key] += more_rej[key]
            err[key] += more_err[key]
    return CellResult(k, r, design.max_ns, design.S, config.replications, rej, err)


def rejection_table(config: SimConfig, threads: int = 1) -> list[dict]:
    """Rejection percentages at the chi2_k critical value for every cell and statistic."""
    rows = []
    for k in config.ks:
        for r in config.rs:
            cell = run_cell(config, k, r, threads)
            for var in ("star", "legacy"):
                for kind in ("normal", "wilcoxon"):
                    if kind not in config.scores or var not in config.variants:
                        continue
                    rows.append({
                        "k": k, "r": r, "stat": STAT_NAMES[(kind, var)],
                        "rejection_pct": round(cell.rate_pct(kind, var), 6),
                        "max_ns": cell.max_ns, "S": cell.S, "reps": cell.reps,
                        "seed": config.seed, "errors": cell.errors[(kind, var)],
                    })
    return rows


def write_table(rows: list[dict], path) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)


def table_text(rows: list[dict]) -> str:
    """Rows as a stat-by-(k, r) grid for terminal display."""
    cells = sorted({(row["k"], row["r"]) for row in rows})
    stats = list(dict.fromkeys(row["stat"] for row in rows))
    lookup = {(row["stat"], row["k"], row["r"]): row for row in rows}
    head = "stat   " + " ".join(f"k={k},r={r}".rjust(10) for k, r in cells)
    lines = [head]
    for st in stats:
        lines.append(f"{st:<6} " + " ".join(f"{lookup[(st, k, r)]['rejection_pct']:10.2f}" for k, r in cells))
    for label in ("max_ns", "S"):
        lines.append(f"{label:<6} " + " ".join(
            f"{next(row[label] for row in rows if (row['k'], row['r']) == c):10d}" for c in cells))
    return "\n".join(lines)
