"""Summary-file format, the coordinator's union request, and aggregation.

Only selection metadata and the first two moments of ``[D, X_E]`` cross a
study's boundary. The file format is UTF-8 JSON; floats are written with
Python's shortest round-trip ``repr`` so reading a file back reproduces every
number bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .carve import CarveFit
from .core import (
    FORMAT_VERSION,
    Dataset,
    MomentSummary,
    SelectionSummary,
    StudySummary,
    compute_moment_summary,
    validate_summary,
)
from .errors import (
    CapabilityError,
    DataError,
    FormatVersionError,
    IncompatibleStudiesError,
    ParseError,
    ValidationError,
)

SUMMARY_SUFFIX = ".carve-summary.json"
FIELD_ORDER = ("format_version", "study_id", "n", "p", "s", "selected", "lambda", "signs", "xi", "Xi")


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def serialize_summary(summary: StudySummary) -> bytes:
    """Encode a summary as UTF-8 JSON with a fixed field order.

    ``Xi`` is stored flattened in row-major order.
    """
    sel = summary.selection
    payload = {
        "format_version": int(summary.format_version),
        "study_id": summary.study_id,
        "n": summary.n_k,
        "p": int(summary.p),
        "s": int(summary.s),
        "selected": list(sel.selected),
        "lambda": _floats(sel.lam),
        "signs": list(sel.signs),
        "xi": _floats(summary.moments.xi),
        "Xi": _floats(summary.moments.Xi),
    }
    # json renders floats through repr, which round-trips exactly
    return json.dumps(payload, allow_nan=False, ensure_ascii=False).encode("utf-8")


def _int_list(obj, name):
    if not isinstance(obj, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in obj):
        raise ParseError(f"field {name!r} must be a list of integers")
    return obj


def _float_list(obj, name):
    if not isinstance(obj, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj
    ):
        raise ParseError(f"field {name!r} must be a list of numbers")
    return [float(v) for v in obj]


def deserialize_summary(data: bytes | str) -> StudySummary:
    """Parse and validate a summary file.

    Fields are read by name, so their order in the input does not matter.
    """
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
        obj = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"summary is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("summary must be a JSON object")
    missing = [k for k in FIELD_ORDER if k not in obj]
    if missing:
        raise ParseError(f"summary is missing fields: {', '.join(missing)}")
    version = obj["format_version"]
    if version != FORMAT_VERSION or isinstance(version, bool):
        raise FormatVersionError(f"unsupported format_version {version!r}; expected {FORMAT_VERSION}")
    for k in ("n", "p", "s"):
        if not isinstance(obj[k], int) or isinstance(obj[k], bool):
            raise ParseError(f"field {k!r} must be an integer")
    if not isinstance(obj["study_id"], str):
        raise ParseError("field 'study_id' must be a string")
    selected = _int_list(obj["selected"], "selected")
    signs = _int_list(obj["signs"], "signs")
    lam = _float_list(obj["lambda"], "lambda")
    xi = np.array(_float_list(obj["xi"], "xi"))
    flat = np.array(_float_list(obj["Xi"], "Xi"))
    dim = xi.shape[0]
    if flat.shape[0] != dim * dim:
        raise ValidationError([f"Xi has {flat.shape[0]} entries, expected {dim * dim}"])
    summary = StudySummary(
        SelectionSummary(tuple(selected), np.array(lam), tuple(signs)),
        MomentSummary(obj["n"], xi, flat.reshape(dim, dim)),
        p=obj["p"],
        s=obj["s"],
        study_id=obj["study_id"],
        format_version=version,
    )
    problems = validate_summary(summary)
    if problems:
        raise ValidationError(problems)
    return summary


def write_summary(summary: StudySummary, path) -> Path:
    path = Path(path)
    path.write_bytes(serialize_summary(summary))
    return path


def read_summary(path) -> StudySummary:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read summary {path}: {exc}") from None
    return deserialize_summary(raw)


def union_design_request(summaries: Sequence[StudySummary]) -> tuple[int, ...]:
    """Sorted union of the selected covariates across studies.

    The validation study must supply exactly these covariate columns.
    """
    if not summaries:
        return ()
    p, s = summaries[0].p, summaries[0].s
    for summ in summaries[1:]:
        if summ.p != p or summ.s != s:
            raise IncompatibleStudiesError(
                f"study {summ.study_id} has (p={summ.p}, s={summ.s}), expected (p={p}, s={s})"
            )
    return tuple(sorted({j for summ in summaries for j in summ.selection.selected}))


class StudySite:
    """A study's side of the protocol.

    A site constructed with raw data can answer moment requests over any
    index set, such as the union of all studies' selections. A site that
    kept only its exported summary can serve its own selection and nothing
    else.
    """

    def __init__(self, summary: StudySummary, data: Dataset | None = None):
        self.summary = summary
        self._data = data

    @property
    def retains_raw_data(self) -> bool:
        return self._data is not None

    def moments_for(self, indices: Sequence[int]) -> MomentSummary:
        idx = tuple(int(j) for j in indices)
        if idx == tuple(self.summary.selection.selected):
            return self.summary.moments
        if self._data is None:
            raise CapabilityError(
                f"study {self.summary.study_id} stored moments for its own selection only; "
                "union moments need the raw data"
            )
        return compute_moment_summary(self._data, idx)


@dataclass(frozen=True, eq=False)
class AggregateResult:
    alpha_tilde: np.ndarray
    weights: np.ndarray
    per_study: tuple
    variance_lower_gain: np.ndarray

    def to_dict(self) -> dict:
        return {
            "alpha_tilde": self.alpha_tilde.tolist(),
            "weights": self.weights.tolist(),
            "variance_lower_gain": self.variance_lower_gain.tolist(),
            "studies": [f.to_dict() for f in self.per_study],
        }


def variance_lower_gain(fits: Sequence[CarveFit]) -> np.ndarray:
    """Heuristic lower bound on the variance saved by averaging carved fits.

    Assumes every study reports the same model. Per-study efficiency bounds
    ``B_k`` and carved variances combine through diagonal and pairwise
    terms; one value per treatment coordinate, on the ``sqrt(N)`` scale.
    """
    K = len(fits)
    s = fits[0].s
    b = np.array([f.efficiency_bound for f in fits])
    v = np.array([np.diag(f.v_carve) for f in fits])  # K x s
    diag_term = ((b / (1.0 - b))[:, None] * v).sum(axis=0)
    cross = np.zeros(s)
    for i in range(K):
        for j in range(i + 1, K):
            factor = 1.0 / math.sqrt((1.0 - b[i]) * (1.0 - b[j])) - 1.0
            cross += 2.0 * factor * np.sqrt(v[i] * v[j])
    return (diag_term + cross) / K**2


def aggregate(fits: Sequence[CarveFit], mode: str = "simple") -> AggregateResult:
    """Average per-study carved estimates.

    ``mode="simple"`` weights every study equally; ``mode="size"`` weights
    study ``k`` in proportion to its total sample size ``N_k``.
    """
    fits = tuple(fits)
    if not fits:
        raise DataError("aggregate needs at least one carve fit")
    s = fits[0].s
    if any(f.s != s for f in fits):
        raise IncompatibleStudiesError("carve fits disagree on the number of treatments")
    if mode == "simple":
        w = np.full(len(fits), 1.0 / len(fits))
    elif mode in ("size", "size-weighted"):
        sizes = np.array([f.n_total for f in fits], dtype=float)
        w = sizes / sizes.sum()
    else:
        raise DataError(f"unknown aggregation mode {mode!r}")
    est = np.array([f.alpha_carve for f in fits])
    return AggregateResult(w @ est, w, fits, variance_lower_gain(fits))


def write_aggregate(result: AggregateResult, json_path, csv_path=None) -> None:
    """Write the aggregate as JSON plus a per-study CSV table."""
    json_path = Path(json_path)
    json_path.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    if csv_path is None:
        csv_path = json_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        s = result.alpha_tilde.shape[0]
        w.writerow(["study_id", "weight", "n_total", "r"] + [f"alpha_carve_{j + 1}" for j in range(s)]
                   + [f"v_carve_{j + 1}" for j in range(s)])
        for wt, f in zip(result.weights, result.per_study):
            w.writerow([f.study_id, repr(float(wt)), f.n_total, repr(f.r)]
                       + [repr(float(a)) for a in f.alpha_carve]
                       + [repr(float(v)) for v in np.diag(f.v_carve)])
        w.writerow(["aggregate", "1.0", "", ""] + [repr(float(a)) for a in result.alpha_tilde] + [""] * s)
