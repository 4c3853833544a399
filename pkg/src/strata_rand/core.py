"""Data model: strata layouts, stratified datasets, centered score arrays.

Units are always stored in canonical order: stratum-contiguous, strata in
order of first appearance, stable within stratum.  Every permutation index in
the package is relative to that order.
"""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, EmptyInputError, ParseError, SchemaError

DENSE_CAP = 512


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StrataLayout:
    """Sizes of the strata in canonical order."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise DimensionError("a layout needs at least one stratum")
        if any(s < 1 for s in sizes):
            raise DimensionError(f"stratum sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def S(self) -> int:
        return len(self.sizes)

    @property
    def n(self) -> int:
        return sum(self.sizes)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.intp)

    @cached_property
    def stratum_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.S), self.sizes)

    @property
    def log_perm_count(self) -> float:
        """log |S_n| = sum_s log(n_s!)."""
        return sum(math.lgamma(s + 1) for s in self.sizes)

    @property
    def perm_count(self) -> int:
        return math.prod(math.factorial(s) for s in self.sizes)

    @property
    def singletons(self) -> tuple[int, ...]:
        return tuple(s for s, size in enumerate(self.sizes) if size == 1)

    @property
    def effective_size(self) -> int:
        """n - S, the quantity driving the asymptotics."""
        return self.n - self.S

    def slice(self, s: int) -> slice:
        return slice(int(self.offsets[s]), int(self.offsets[s + 1]))

    def split(self, v) -> list[np.ndarray]:
        v = np.asarray(v)
        return [v[self.slice(s)] for s in range(self.S)]

    def check_length(self, v, name="vector") -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[:1] != (self.n,):
            raise DimensionError(f"{name} has length {v.shape[:1]}, layout has n={self.n}")
        return v

    @classmethod
    def from_labels(cls, labels: Sequence) -> tuple["StrataLayout", np.ndarray, tuple]:
        """Group ``labels`` into strata by first appearance.

        Returns the layout, the stable ordering that makes units
        stratum-contiguous, and the distinct labels in stratum order.
        """
        if len(labels) == 0:
            raise EmptyInputError("no units")
        first: dict = {}
        codes = np.empty(len(labels), dtype=np.intp)
        for i, lab in enumerate(labels):
            codes[i] = first.setdefault(lab, len(first))
        order = np.argsort(codes, kind="stable")
        sizes = np.bincount(codes, minlength=len(first))
        return cls(tuple(int(x) for x in sizes)), order, tuple(first)


def demean_within_strata(v, layout: StrataLayout) -> np.ndarray:
    """Subtract each stratum's mean; column-wise for 2-D input."""
    v = layout.check_length(v)
    ids = layout.stratum_ids
    sizes = np.asarray(layout.sizes, dtype=float)
    if v.ndim == 1:
        means = np.bincount(ids, weights=v, minlength=layout.S) / sizes
        return v - means[ids]
    out = np.empty_like(v)
    for j in range(v.shape[1]):
        col = v[:, j]
        means = np.bincount(ids, weights=col, minlength=layout.S) / sizes
        out[:, j] = col - means[ids]
    return out


@dataclass(frozen=True, eq=False)
class StratifiedDataset:
    layout: StrataLayout
    y: np.ndarray
    d: np.ndarray | None = None
    z: np.ndarray | None = None
    labels: tuple = ()
    original_order: np.ndarray | None = None

    def __post_init__(self):
        n = self.layout.n
        object.__setattr__(self, "y", _frozen(self.layout.check_length(self.y, "y")))
        if self.d is not None:
            object.__setattr__(self, "d", _frozen(self.layout.check_length(self.d, "d")))
        z = np.zeros((n, 0)) if self.z is None else np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2 or z.shape[0] != n:
            raise DimensionError(f"z must be an (n, k) array with n={n}, got shape {z.shape}")
        object.__setattr__(self, "z", _frozen(z))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(s) for s in range(self.layout.S)))
        if len(self.labels) != self.layout.S:
            raise DimensionError("one label per stratum required")
        order = np.arange(n) if self.original_order is None else np.asarray(self.original_order)
        order = order.astype(np.intp)
        order.setflags(write=False)
        object.__setattr__(self, "original_order", order)

    @property
    def k(self) -> int:
        return self.z.shape[1]

    @property
    def stratum_of(self) -> np.ndarray:
        return self.layout.stratum_ids

    def __eq__(self, other):
        if not isinstance(other, StratifiedDataset):
            return NotImplemented
        same_d = (self.d is None and other.d is None) or (
            self.d is not None and other.d is not None and np.array_equal(self.d, other.d)
        )
        return (
            self.layout == other.layout
            and self.labels == other.labels
            and np.array_equal(self.y, other.y)
            and same_d
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.original_order, other.original_order)
        )

    @classmethod
    def from_arrays(cls, strata: Sequence, y, d=None, z=None) -> "StratifiedDataset":
        """Build a dataset from per-unit columns in arbitrary row order."""
        layout, order, labels = StrataLayout.from_labels(list(strata))
        y = np.asarray(y, dtype=float)[order]
        d = None if d is None else np.asarray(d, dtype=float)[order]
        if z is not None:
            z = np.asarray(z, dtype=float)
            z = (z[:, None] if z.ndim == 1 else z)[order]
        return cls(layout, y, d, z, tuple(str(x) for x in labels), order)


@dataclass(frozen=True)
class CsvSchema:
    stratum: str = "stratum"
    y: str = "y"
    d: str | None = "d"
    z_prefix: str = "z"
    z_columns: tuple[str, ...] | None = None


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(
            f"row {row}, column {column!r}: cannot parse {text!r} as a number",
            row=row,
            column=column,
        ) from None


def load_dataset(path, schema: CsvSchema | None = None) -> StratifiedDataset:
    """Read a CSV file into a canonical-order :class:`StratifiedDataset`.

    Row numbers in error messages count data rows from 1 (header excluded).
    The ``d`` column is optional; instrument columns are ``<prefix><int>``
    sorted by their integer suffix unless listed explicitly in the schema.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        rows = [r for r in reader if r]
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")

    for col in (schema.stratum, schema.y):
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    d_col = schema.d if schema.d in header else None
    if schema.z_columns is not None:
        missing = [c for c in schema.z_columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing instrument columns {missing}")
        z_cols = list(schema.z_columns)
    else:
        pat = re.compile(re.escape(schema.z_prefix) + r"(\d+)$")
        found = [(int(m.group(1)), h) for h in header if (m := pat.match(h))]
        z_cols = [h for _, h in sorted(found)]

    idx = {h: i for i, h in enumerate(header)}
    strata, y, d, z = [], [], [], []
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r}: expected {len(header)} fields, got {len(row)}", row=r)
        strata.append(row[idx[schema.stratum]].strip())
        y.append(_parse_float(row[idx[schema.y]], r, schema.y))
        if d_col is not None:
            d.append(_parse_float(row[idx[d_col]], r, d_col))
        z.append([_parse_float(row[idx[c]], r, c) for c in z_cols])

    z_arr = np.array(z, dtype=float).reshape(len(rows), len(z_cols))
    return StratifiedDataset.from_arrays(strata, y, d if d_col else None, z_arr)


def write_dataset(dataset: StratifiedDataset, path) -> None:
    """Write ``dataset`` as CSV in its original row order (atomic replace)."""
    n = dataset.layout.n
    rows_at = np.empty(n, dtype=np.intp)
    rows_at[dataset.original_order] = np.arange(n)
    ids = dataset.layout.stratum_ids
    header = ["stratum", "y"]
    if dataset.d is not None:
        header.append("d")
    header += [f"z{j + 1}" for j in range(dataset.k)]
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for u in rows_at:
            row = [dataset.labels[ids[u]], repr(float(dataset.y[u]))]
            if dataset.d is not None:
                row.append(repr(float(dataset.d[u])))
            row += [repr(float(x)) for x in dataset.z[u]]
            w.writerow(row)
    os.replace(tmp, path)


@dataclass(frozen=True, eq=False)
class CenteredArray:
    """Doubly-centered scores a_ij^s, one block per stratum.

    Either ``dense`` holds an n_s x n_s matrix per stratum, or ``b``/``c`` hold
    stratum-demeaned vectors with a_ij^s = b_i c_j.  Strata of size one carry
    a zero block and are ignored by every sum with a 1/(n_s - 1) factor.
    """

    layout: StrataLayout
    dense: tuple[np.ndarray, ...] | None = None
    b: tuple[np.ndarray, ...] | None = None
    c: tuple[np.ndarray, ...] | None = None

    @property
    def representation(self) -> str:
        return "dense" if self.dense is not None else "product"

    @property
    def is_product(self) -> bool:
        return self.dense is None

    @classmethod
    def from_dense(cls, blocks: Iterable, layout: StrataLayout, rtol: float = 1e-10) -> "CenteredArray":
        blocks = tuple(_frozen(m) for m in blocks)
        if len(blocks) != layout.S:
            raise DimensionError(f"expected {layout.S} blocks, got {len(blocks)}")
        for s, (m, ns) in enumerate(zip(blocks, layout.sizes)):
            if m.shape != (ns, ns):
                raise DimensionError(f"block {s} has shape {m.shape}, expected ({ns}, {ns})")
            scale = float(np.max(np.abs(m))) if m.size else 0.0
            tol = rtol * scale
            if np.any(np.abs(m.sum(axis=0)) > tol) or np.any(np.abs(m.sum(axis=1)) > tol):
                raise DimensionError(f"block {s} is not doubly centered (row/column sums nonzero)")
        return cls(layout, dense=blocks)

    def block(self, s: int) -> np.ndarray:
        if self.dense is not None:
            return self.dense[s]
        ns = self.layout.sizes[s]
        if ns > DENSE_CAP:
            raise DimensionError(f"stratum {s} has n_s={ns} > {DENSE_CAP}; dense form refused")
        return np.outer(self.b[s], self.c[s])

    def to_dense(self) -> "CenteredArray":
        if self.dense is not None:
            return self
        return CenteredArray(self.layout, dense=tuple(_frozen(self.block(s)) for s in range(self.layout.S)))

    @property
    def is_zero(self) -> bool:
        if self.dense is not None:
            return not any(np.any(m != 0) for m in self.dense)
        return not any(np.any(bs != 0) and np.any(cs != 0) for bs, cs in zip(self.b, self.c))


def build_centered_array(b, c, layout: StrataLayout, direction=None) -> CenteredArray:
    """Product-form array a_ij^s = b~_si c~_sj from raw b and c.

    With a ``direction`` t (required when b has k > 1 columns) the row scores
    become n^{-1/2} t' Sigma_n^{-1/2} b~_si, so that sigma_n^2 = ||t||^2.
    """
    b = layout.check_length(b, "b")
    c = layout.check_length(c, "c")
    if c.ndim != 1:
        raise DimensionError("c must be a vector")
    bt = demean_within_strata(b, layout)
    if direction is not None:
        from .stats import sigma_matrix

        t = np.atleast_1d(np.asarray(direction, dtype=float))
        bt2 = bt[:, None] if bt.ndim == 1 else bt
        if t.shape != (bt2.shape[1],):
            raise DimensionError(f"direction has shape {t.shape}, b has k={bt2.shape[1]}")
        sigma, _ = sigma_matrix(bt2, c, layout)
        vals, vecs = np.linalg.eigh(sigma)
        inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T
        bt = bt2 @ (inv_sqrt @ t) / math.sqrt(layout.n)
    elif bt.ndim == 2:
        if bt.shape[1] != 1:
            raise DimensionError("vector-valued b needs a direction t")
        bt = bt[:, 0]
    ct = demean_within_strata(c, layout)
    return CenteredArray(
        layout,
        b=tuple(_frozen(x) for x in layout.split(bt)),
        c=tuple(_frozen(x) for x in layout.split(ct)),
    )
