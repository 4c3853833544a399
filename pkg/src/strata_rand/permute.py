"""Stratified permutations: sampling, enumeration and the Stein coupling.

Indices are 0-based internally; the text serialization is 1-based.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterator

import numpy as np

from .core import StrataLayout
from .errors import CouplingUndefined, DimensionError, EnumerationTooLarge

ENUMERATION_CAP = 10**6
COUPLING_CAP = 10**4
COUPLING_MAX_STRATUM = 4


@dataclass(frozen=True, eq=False)
class StratifiedPermutation:
    layout: StrataLayout
    maps: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        maps = tuple(tuple(int(x) for x in m) for m in self.maps)
        if len(maps) != self.layout.S:
            raise DimensionError(f"need {self.layout.S} stratum maps, got {len(maps)}")
        for s, (m, ns) in enumerate(zip(maps, self.layout.sizes)):
            if sorted(m) != list(range(ns)):
                raise DimensionError(f"stratum {s} map {m} is not a permutation of 0..{ns - 1}")
        object.__setattr__(self, "maps", maps)

    @classmethod
    def identity(cls, layout: StrataLayout) -> "StratifiedPermutation":
        return cls(layout, tuple(tuple(range(ns)) for ns in layout.sizes))

    @classmethod
    def from_global(cls, layout: StrataLayout, index) -> "StratifiedPermutation":
        index = np.asarray(index)
        return cls(layout, tuple(tuple(index[layout.slice(s)] - layout.offsets[s]) for s in range(layout.S)))

    @cached_property
    def inverse_maps(self) -> tuple[tuple[int, ...], ...]:
        out = []
        for m in self.maps:
            inv = [0] * len(m)
            for i, j in enumerate(m):
                inv[j] = i
            out.append(tuple(inv))
        return tuple(out)

    def inverse(self) -> "StratifiedPermutation":
        return StratifiedPermutation(self.layout, self.inverse_maps)

    def __call__(self, s: int, i: int) -> int:
        return self.maps[s][i]

    def compose(self, other: "StratifiedPermutation") -> "StratifiedPermutation":
        """(self o other)(i) = self(other(i))."""
        return StratifiedPermutation(
            self.layout, tuple(tuple(m[j] for j in o) for m, o in zip(self.maps, other.maps))
        )

    def global_index(self) -> np.ndarray:
        """pi as a map on canonical unit indices 0..n-1."""
        off = self.layout.offsets
        return np.concatenate([np.asarray(m, dtype=np.intp) + off[s] for s, m in enumerate(self.maps)])

    def to_text(self) -> str:
        return "\n".join(" ".join(str(j + 1) for j in m) for m in self.maps) + "\n"

    @classmethod
    def from_text(cls, text: str, layout: StrataLayout) -> "StratifiedPermutation":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        return cls(layout, tuple(tuple(int(x) - 1 for x in ln.split()) for ln in lines))

    def __eq__(self, other):
        if not isinstance(other, StratifiedPermutation):
            return NotImplemented
        return self.layout == other.layout and self.maps == other.maps

    def __hash__(self):
        return hash((self.layout, self.maps))


def sample_permutation(layout: StrataLayout, rng: np.random.Generator) -> StratifiedPermutation:
    """Draw pi ~ U(S_n) with one independent shuffle per stratum."""
    return StratifiedPermutation(layout, tuple(tuple(rng.permutation(ns)) for ns in layout.sizes))


def sample_permutation_indices(layout: StrataLayout, rng: np.random.Generator, size: int) -> np.ndarray:
    """Batch of ``size`` uniform stratified permutations as global index rows."""
    out = np.empty((size, layout.n), dtype=np.intp)
    for s, ns in enumerate(layout.sizes):
        sl = layout.slice(s)
        base = np.broadcast_to(np.arange(ns, dtype=np.intp) + layout.offsets[s], (size, ns))
        out[:, sl] = rng.permuted(base, axis=1)
    return out


def _check_cap(layout: StrataLayout, cap: int) -> None:
    if layout.log_perm_count > math.log(cap) + 1e-9:
        raise EnumerationTooLarge(
            f"|S_n| = exp({layout.log_perm_count:.3f}) exceeds the enumeration cap {cap}",
            log_count=layout.log_perm_count,
        )


def enumerate_permutations(layout: StrataLayout, cap: int = ENUMERATION_CAP) -> Iterator[StratifiedPermutation]:
    """Yield every element of S_n once.

    Lexicographic within each stratum; odometer across strata with the last
    stratum turning fastest.
    """
    _check_cap(layout, cap)
    per_stratum = [list(itertools.permutations(range(ns))) for ns in layout.sizes]
    for maps in itertools.product(*per_stratum):
        yield StratifiedPermutation(layout, maps)


def enumerate_permutation_array(layout: StrataLayout, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All of S_n as an (|S_n|, n) array of global indices, same order as
    :func:`enumerate_permutations`."""
    _check_cap(layout, cap)
    tables = [
        np.array(list(itertools.permutations(range(ns))), dtype=np.intp).reshape(-1, ns) + layout.offsets[s]
        for s, ns in enumerate(layout.sizes)
    ]
    counts = [len(t) for t in tables]
    grid = np.indices(counts).reshape(len(counts), -1)
    return np.concatenate([t[g] for t, g in zip(tables, grid)], axis=1)


@dataclass(frozen=True)
class CouplingDraw:
    s: int
    I: tuple[int, int, int, int]
    J: tuple[int, int, int, int]
    pi: StratifiedPermutation
    pi_dagger: StratifiedPermutation
    pi_star: StratifiedPermutation


def _tau(i1: int, i2: int, i3: int, i4: int, ns: int) -> tuple[int, ...]:
    """Permutation with i1 -> i4, i2 -> i3, identity off {i1..i4}.

    Points of {i3, i4} not in {i1, i2} are sent back along the chain of
    preimages, which closes the partial map into a bijection.
    """
    fwd = {i1: i4, i2: i3}
    back = {v: k for k, v in fwd.items()}
    tau = list(range(ns))
    for a, v in fwd.items():
        tau[a] = v
    for a in {i3, i4} - set(fwd):
        x = a
        while x in back:
            x = back[x]
        tau[a] = x
    return tuple(tau)


def coupling_from_indices(pi: StratifiedPermutation, s: int, i1: int, i2: int, j1: int, j2: int) -> CouplingDraw:
    """Deterministic part of the coupling given the selected stratum and indices."""
    if (i1 == i2) != (j1 == j2):
        raise ValueError("need I1 == I2 exactly when J1 == J2")
    ps, inv = pi.maps[s], pi.inverse_maps[s]
    i3, i4 = inv[j1], inv[j2]
    j3, j4 = ps[i1], ps[i2]
    tau = _tau(i1, i2, i3, i4, len(ps))
    dag = tuple(ps[tau[a]] for a in range(len(ps)))
    star = list(dag)
    star[i1], star[i2] = dag[i2], dag[i1]
    maps_d, maps_s = list(pi.maps), list(pi.maps)
    maps_d[s], maps_s[s] = dag, tuple(star)
    return CouplingDraw(
        s,
        (i1, i2, i3, i4),
        (j1, j2, j3, j4),
        pi,
        StratifiedPermutation(pi.layout, tuple(maps_d)),
        StratifiedPermutation(pi.layout, tuple(maps_s)),
    )


def stein_coupling(pi: StratifiedPermutation, layout: StrataLayout, rng: np.random.Generator) -> CouplingDraw:
    """Draw the perturbations pi-dagger and pi-star of ``pi``."""
    if any(ns < 2 for ns in layout.sizes):
        raise CouplingUndefined("the coupling needs every stratum to have at least two units")
    sizes = np.asarray(layout.sizes)
    s = int(rng.choice(layout.S, p=sizes / sizes.sum()))
    ns = layout.sizes[s]
    i1, i2, j1 = (int(x) for x in rng.integers(ns, size=3))
    if i1 == i2:
        j2 = j1
    else:
        j2 = int(rng.integers(ns - 1))
        j2 += j2 >= j1
    return coupling_from_indices(pi, s, i1, i2, j1, j2)


def _coupling_support(ns: int):
    """(i1, i2, j1, j2, weight) with weights conditional on the stratum."""
    w_eq = Fraction(1, ns**3)
    w_ne = Fraction(1, ns**3 * (ns - 1))
    for i1, i2, j1 in itertools.product(range(ns), repeat=3):
        if i1 == i2:
            yield i1, i2, j1, j1, w_eq
        else:
            for j2 in range(ns):
                if j2 != j1:
                    yield i1, i2, j1, j2, w_ne


@dataclass
class CouplingReport:
    layout: StrataLayout
    checks: dict[str, bool] = field(default_factory=dict)
    max_discrepancy: dict[str, float] = field(default_factory=dict)
    draws: int = 0

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def record(self, name: str, discrepancy: Fraction) -> None:
        d = abs(discrepancy)
        prev = self.max_discrepancy.get(name, 0.0)
        self.max_discrepancy[name] = max(prev, float(d))
        self.checks[name] = self.checks.get(name, True) and d == 0

    def summary(self) -> str:
        lines = [f"layout {list(self.layout.sizes)}: {self.draws} weighted states"]
        for name in sorted(self.checks):
            mark = "PASS" if self.checks[name] else "FAIL"
            lines.append(f"  [{mark}] {name} (max discrepancy {self.max_discrepancy[name]:.3g})")
        return "\n".join(lines)


def _independence(report, name, joint: dict, total: Fraction):
    """Exact check that a joint law on pairs (x, y) factorizes."""
    mx, my = defaultdict(Fraction), defaultdict(Fraction)
    for (x, y), p in joint.items():
        mx[x] += p
        my[y] += p
    worst = Fraction(0)
    for x, px in mx.items():
        for y, py in my.items():
            worst = max(worst, abs(joint.get((x, y), Fraction(0)) * total - px * py))
    report.record(name, worst / (total * total))
    return mx


def check_coupling_properties(layout: StrataLayout, cap: int = COUPLING_CAP) -> CouplingReport:
    """Verify properties (i)-(iv) of the coupling by exact enumeration.

    Every (pi, stratum, I1, I2, J1, J2) is weighted by its exact rational
    probability.  Distributional statements are checked conditional on the
    selected stratum, and the perturbed permutations are checked to agree
    with pi on every other stratum.
    """
    if any(ns < 2 for ns in layout.sizes):
        raise CouplingUndefined("the coupling needs every stratum to have at least two units")
    if max(layout.sizes) > COUPLING_MAX_STRATUM or layout.perm_count > cap:
        raise EnumerationTooLarge(
            f"exact coupling check limited to n_s <= {COUPLING_MAX_STRATUM} and |S_n| <= {cap}",
            log_count=layout.log_perm_count,
        )
    report = CouplingReport(layout)
    perms = list(enumerate_permutations(layout))
    p_pi = Fraction(1, len(perms))
    labels = ("pi", "pi_dagger", "pi_star")

    for s, ns in enumerate(layout.sizes):
        support = list(_coupling_support(ns))
        report.record(f"stratum {s}: weights sum to one", sum(w for *_, w in support) - 1)
        with_I = {lab: defaultdict(Fraction) for lab in labels}
        dag_I1J1 = defaultdict(Fraction)
        pairs = {(lab, l): defaultdict(Fraction) for lab in labels for l in range(4)}
        for pi in perms:
            for i1, i2, j1, j2, w in support:
                draw = coupling_from_indices(pi, s, i1, i2, j1, j2)
                report.draws += 1
                p = p_pi * w
                dag, star = draw.pi_dagger.maps, draw.pi_star.maps
                ok = (
                    dag[s][i1] == j2 and dag[s][i2] == j1 and star[s][i1] == j1 and star[s][i2] == j2
                )
                report.record("(i) pi_dagger/pi_star hit prescribed values", Fraction(int(not ok)))
                same_outside = all(
                    dag[t] == pi.maps[t] and star[t] == pi.maps[t] for t in range(layout.S) if t != s
                )
                report.record("agree with pi outside the selected stratum", Fraction(int(not same_outside)))
                I = draw.I
                report.record(
                    "I1 == I2 iff I3 == I4", Fraction(int((I[0] == I[1]) != (I[2] == I[3])))
                )
                for lab, m in zip(labels, (pi.maps[s], dag[s], star[s])):
                    with_I[lab][(m, I)] += p
                    for l in range(4):
                        pairs[(lab, l)][(I[l], m[I[l]])] += p
                dag_I1J1[(dag[s], (i1, j1))] += p

        total = Fraction(1)
        n_perm = Fraction(1, math.factorial(ns))
        for lab in labels:
            marg = _independence(report, f"(ii) {lab}_s independent of I_s (stratum {s})", with_I[lab], total)
            dev = max(abs(p - n_perm) for p in marg.values())
            if len(marg) != math.factorial(ns):
                dev = max(dev, n_perm)
            report.record(f"(ii) {lab}_s uniform on G_s (stratum {s})", dev)
        _independence(report, f"(iii) pi_dagger_s independent of (I1, J1) (stratum {s})", dag_I1J1, total)
        for (lab, l), law in pairs.items():
            target = Fraction(1, ns * ns)
            dev = max(abs(law.get((a, b), Fraction(0)) - target) for a in range(ns) for b in range(ns))
            report.record(f"(iv) (I{l + 1}, {lab}(I{l + 1})) uniform on N_s^2 (stratum {s})", dev)
    return report
