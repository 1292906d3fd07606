"""Baseline estimators: validation-only refits and post-double selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, SelectionSummary
from .errors import DataError, DegenerateDesignError, InsufficientSampleError
from .lasso import coordinate_descent, default_lambda

# PDS penalties are on the fit_weighted_lasso scale with this (r, N = n / r)
# convention, i.e. the ordinary (1/2n)-loss LASSO.
PDS_R = 0.5


@dataclass(frozen=True, eq=False)
class ComparatorFit:
    alpha: np.ndarray
    variance: np.ndarray
    method: str
    selected_union: tuple = ()


def _ols(y, design, what):
    n, k = design.shape
    if n <= k:
        raise InsufficientSampleError(f"{what}: n={n} must exceed the {k} regressors")
    gram = design.T @ design
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateDesignError(f"{what}: design is rank deficient", condition=cond)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    res = y - design @ coef
    sigma2 = float(res @ res) / (n - k)
    cov = sigma2 * np.linalg.inv(gram)
    return coef, 0.5 * (cov + cov.T)


def split_estimate(val_y, val_d, val_x_sel, selection: SelectionSummary | None = None) -> ComparatorFit:
    """Refit the selected model on validation rows alone.

    ``val_x_sel`` must already be restricted to the selected covariates.
    """
    y = np.asarray(val_y, dtype=float).reshape(-1)
    d = np.asarray(val_d, dtype=float).reshape(y.shape[0], -1)
    x = np.asarray(val_x_sel, dtype=float).reshape(y.shape[0], -1)
    if selection is not None and x.shape[1] != selection.q:
        raise DataError("validation covariates do not match the selection")
    s = d.shape[1]
    coef, cov = _ols(y, np.hstack([d, x]), "split estimate")
    sel = selection.selected if selection is not None else ()
    return ComparatorFit(coef[:s], cov[:s, :s], "split", tuple(sel))


def _scale_and_fit(y, D, X, c, lam, p_log=None):
    n, p_x = X.shape
    p = p_x if p_log is None else p_log
    if lam is None:
        if p <= 1:
            raise DataError("default PDS penalties need p > 1; pass weights explicitly")
        # two passes: marginal scale, then the residual scale of the first fit
        sigma = float(np.std(y - D @ np.linalg.lstsq(D, y, rcond=None)[0])) if D.shape[1] else float(np.std(y))
        sigma = max(sigma, 1e-12)
        for _ in range(2):
            lam_w = np.full(p_x, default_lambda(n, p, sigma, n / PDS_R, c)[0])
            alpha, beta, _ = coordinate_descent(y, D, X, PDS_R * np.sqrt(n / PDS_R) * lam_w)
            res = y - D @ alpha - X @ beta
            df = max(n - D.shape[1] - int(np.count_nonzero(beta)), 1)
            sigma = max(float(np.sqrt(res @ res / df)), 1e-12)
        return beta
    lam = np.asarray(lam, dtype=float)
    _, beta, _ = coordinate_descent(y, D, X, PDS_R * np.sqrt(n / PDS_R) * lam)
    return beta


def post_double_selection(
    data: Dataset, lambda_y=None, lambda_d=None, c=1.0, p_log=None
) -> ComparatorFit:
    """Treatment effect by OLS on the union of two LASSO supports.

    One LASSO regresses ``y`` on ``x`` with ``d`` unpenalized, the other
    regresses ``d`` on ``x``. Weights are on the :func:`fit_weighted_lasso`
    scale with ``r = 1/2`` and ``N = 2n``; when omitted they default to
    :func:`default_lambda` at multiplier ``c`` with an estimated noise scale.
    ``p_log`` overrides the covariate count inside the default's ``log p``,
    which is needed when ``p = 1``.
    """
    if data.s != 1:
        raise DataError("post-double selection is implemented for a single treatment")
    y, d, x = data.y, data.d, data.x
    if data.p:
        beta_y = _scale_and_fit(y, d, x, c, lambda_y, p_log)
        beta_d = _scale_and_fit(d[:, 0], np.zeros((data.n, 0)), x, c, lambda_d, p_log)
        union = np.flatnonzero((beta_y != 0) | (beta_d != 0))
    else:
        union = np.zeros(0, dtype=int)
    coef, cov = _ols(y, np.hstack([d, x[:, union]]), "post-double selection")
    return ComparatorFit(coef[:1], cov[:1, :1], "pds", tuple(union.tolist()))
