"""Carved estimation of treatment effects from privately summarized studies."""

from .carve import CarveFit, CarveInput, carve_study
from .comparators import ComparatorFit, post_double_selection, split_estimate
from .core import (
    Dataset,
    MomentSummary,
    SelectionSummary,
    StudySummary,
    center_columns,
    compute_moment_summary,
    read_csv_dataset,
    validate_summary,
    write_csv_dataset,
)
from .errors import CarveError, DataError, SolverError
from .lasso import default_lambda, extract_selection, fit_weighted_lasso
from .protocol import aggregate, deserialize_summary, serialize_summary, union_design_request
from .sim import SimConfig, figure2_experiment, run_monte_carlo, summarize_table

__version__ = "0.1.0"

__all__ = [
    "CarveError", "CarveFit", "CarveInput", "ComparatorFit", "DataError", "Dataset",
    "MomentSummary", "SelectionSummary", "SimConfig", "SolverError", "StudySummary",
    "aggregate", "carve_study", "center_columns", "compute_moment_summary",
    "default_lambda", "deserialize_summary", "extract_selection", "figure2_experiment",
    "fit_weighted_lasso", "post_double_selection", "read_csv_dataset", "run_monte_carlo",
    "serialize_summary", "split_estimate", "summarize_table", "union_design_request",
    "validate_summary", "write_csv_dataset",
]
