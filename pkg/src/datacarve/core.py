"""Study data model and the moment summaries that leave a study site."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DegenerateSampleError, InvalidSelectionError, ParseError

FORMAT_VERSION = 1


def _frozen(a, ndim):
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        if ndim == 2 and arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        else:
            raise DataError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Raw response, treatment and covariates for one study.

    ``d`` is ``n x s`` and ``x`` is ``n x p``; ``p`` may be zero.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    study_id: str = "study"
    centered: bool = False

    def __post_init__(self):
        y = _frozen(self.y, 1)
        d = _frozen(self.d, 2)
        x = np.array(self.x, dtype=float)
        if x.ndim == 1 and x.size == 0:
            x = np.zeros((y.shape[0], 0))
        x = _frozen(x, 2)
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset must have at least one row")
        if d.shape[0] != n or x.shape[0] != n:
            raise DataError(
                f"row counts differ: y={n}, d={d.shape[0]}, x={x.shape[0]}"
            )
        if d.shape[1] < 1:
            raise DataError("treatment block needs at least one column")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def s(self) -> int:
        return self.d.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def restrict(self, columns: Sequence[int]) -> "Dataset":
        """Keep only the listed covariate columns (order preserved)."""
        cols = np.asarray(columns, dtype=int)
        return Dataset(self.y, self.d, self.x[:, cols], self.study_id, self.centered)


def _center(a):
    return a - a.mean(axis=0)


def center_columns(data: Dataset) -> Dataset:
    """Subtract column means from ``y``, ``d`` and ``x``.

    The intercept is absorbed here; nothing downstream fits one.
    """
    if data.n < 2:
        raise DegenerateSampleError(f"centering needs n >= 2, got n={data.n}")
    return Dataset(
        _center(data.y), _center(data.d), _center(data.x), data.study_id, centered=True
    )


def is_centered(data: Dataset, rtol: float = 1e-10) -> bool:
    for a in (data.y[:, None], data.d, data.x):
        if a.shape[1] == 0:
            continue
        rms = np.sqrt(np.mean(a**2, axis=0))
        if np.any(np.abs(a.mean(axis=0)) > rtol * np.maximum(rms, 1e-300)):
            return False
    return True


@dataclass(frozen=True, eq=False)
class SelectionSummary:
    """Support, penalty weights and signs of one study's LASSO fit."""

    selected: tuple[int, ...]
    lam: np.ndarray
    signs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(int(j) for j in self.selected))
        object.__setattr__(self, "signs", tuple(int(v) for v in self.signs))
        lam = np.array(self.lam, dtype=float).reshape(-1)
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def q(self) -> int:
        return len(self.selected)

    def violations(self, p: int | None = None) -> list[str]:
        out = []
        sel = self.selected
        if len(self.lam) != len(sel) or len(self.signs) != len(sel):
            out.append("selected, lambda and signs must have equal length")
        if any(b <= a for a, b in zip(sel, sel[1:])):
            out.append("selected must be strictly increasing")
        if any(j < 0 for j in sel) or (p is not None and any(j >= p for j in sel)):
            out.append("selected index out of range")
        if not np.all(np.isfinite(self.lam)) or np.any(self.lam <= 0):
            out.append("lambda must be positive")
        if any(abs(v) != 1 for v in self.signs):
            out.append("signs must be ±1")
        return out


@dataclass(frozen=True, eq=False)
class MomentSummary:
    """First two sample moments of ``[D, X_E]`` against ``Y``.

    ``xi`` stacks ``D'Y/n`` over ``X_E'Y/n``; ``Xi`` is the matching Gram
    matrix divided by ``n``.
    """

    n_k: int
    xi: np.ndarray
    Xi: np.ndarray

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float).reshape(-1)
        Xi = np.array(self.Xi, dtype=float)
        if Xi.size == 0:
            Xi = Xi.reshape(0, 0)
        xi.setflags(write=False)
        Xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "Xi", Xi)
        object.__setattr__(self, "n_k", int(self.n_k))

    @property
    def dim(self) -> int:
        return self.xi.shape[0]

    def violations(self) -> list[str]:
        out = []
        Xi = self.Xi
        if self.n_k < 1:
            out.append("n must be positive")
        if Xi.ndim != 2 or Xi.shape != (self.dim, self.dim):
            out.append("Xi shape does not match xi")
            return out
        if not (np.all(np.isfinite(Xi)) and np.all(np.isfinite(self.xi))):
            out.append("moments must be finite")
            return out
        scale = max(float(np.max(np.abs(Xi))) if Xi.size else 0.0, 1e-300)
        if np.any(np.abs(Xi - Xi.T) > 1e-12 * scale):
            out.append("Xi not symmetric")
        elif Xi.size:
            eig_min = float(np.linalg.eigvalsh(Xi).min())
            if eig_min < -1e-10 * float(np.trace(Xi)):
                out.append("Xi not positive semidefinite")
        return out


@dataclass(frozen=True, eq=False)
class StudySummary:
    """Everything a study site exports: selection metadata plus moments."""

    selection: SelectionSummary
    moments: MomentSummary
    p: int
    s: int
    study_id: str = "study"
    format_version: int = FORMAT_VERSION

    @property
    def q(self) -> int:
        return self.selection.q

    @property
    def n_k(self) -> int:
        return self.moments.n_k


def compute_moment_summary(data: Dataset, selection) -> MomentSummary:
    """Moments of ``[D, X_E]`` for a centered study.

    ``selection`` is a :class:`SelectionSummary` or any sequence of covariate
    indices, so a site holding raw data can also answer union requests.
    """
    idx = selection.selected if isinstance(selection, SelectionSummary) else selection
    idx = np.asarray(tuple(idx), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= data.p):
        raise InvalidSelectionError(
            f"selection indices must lie in [0, {data.p}), got {idx.tolist()}"
        )
    design = np.hstack([data.d, data.x[:, idx]])
    n = data.n
    return MomentSummary(n, design.T @ data.y / n, design.T @ design / n)


def validate_summary(summary: StudySummary) -> list[str]:
    """List every violated invariant; an empty list means the summary is usable."""
    out = list(summary.selection.violations(summary.p))
    if summary.s < 1:
        out.append("s must be at least 1")
    if summary.p < 0:
        out.append("p must be non-negative")
    if summary.moments.dim != summary.s + summary.q:
        out.append("moments dimension must equal s + q")
    out.extend(summary.moments.violations())
    return out


def read_csv_dataset(path, s: int | None = None, study_id: str | None = None) -> Dataset:
    """Read ``y,d1..ds,x1..xp`` CSV data.

    The treatment count is taken from the header (``d`` columns) unless
    ``s`` is given. Ragged rows are rejected.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "y":
        raise ParseError(f"{path}: first column must be 'y'")
    if s is None:
        s = sum(1 for h in header if h.startswith("d"))
    for j in range(s):
        if header[1 + j] != f"d{j + 1}":
            raise ParseError(f"{path}: expected column d{j + 1}, found {header[1 + j]}")
    p = len(header) - 1 - s
    for j in range(p):
        if header[1 + s + j] != f"x{j + 1}":
            raise ParseError(f"{path}: expected column x{j + 1}")
    body = rows[1:]
    if len(body) == 0:
        raise ParseError(f"{path}: no observations")
    values = np.empty((len(body), len(header)))
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise ParseError(f"{path}: row {i + 2} has {len(r)} fields, expected {len(header)}")
        try:
            values[i] = [float(v) for v in r]
        except ValueError as exc:
            raise ParseError(f"{path}: row {i + 2}: {exc}") from None
    return Dataset(
        values[:, 0], values[:, 1 : 1 + s], values[:, 1 + s :], study_id or path.stem
    )


def write_csv_dataset(data: Dataset, path) -> None:
    header = ["y"] + [f"d{j + 1}" for j in range(data.s)] + [f"x{j + 1}" for j in range(data.p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        block = np.hstack([data.y[:, None], data.d, data.x])
        for row in block:
            w.writerow([repr(float(v)) for v in row])
