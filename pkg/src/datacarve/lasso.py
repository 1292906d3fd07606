"""Weighted LASSO with an unpenalized treatment block.

Solves

    (1 / (2 r sqrt(N))) ||Y - D a - X b||^2 + sum_j lam_j |b_j|

by cyclic coordinate descent. The treatment coefficients get an exact
least-squares update once per sweep, so they are never shrunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import Dataset, SelectionSummary
from .errors import DataError, DegenerateDesignError, SolverError, UnavailableDiagnosticError

MAX_SWEEPS = 10_000
GRAM_MAX_P = 2000


@dataclass(frozen=True, eq=False)
class LassoFit:
    alpha_l: np.ndarray
    beta_l: np.ndarray
    lam: np.ndarray
    r: float
    n_total: int
    objective: float
    sweeps: int = 0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.beta_l != 0.0)


@dataclass(frozen=True, eq=False)
class RandomizationDiag:
    omega: np.ndarray
    gamma_hat_gap: np.ndarray
    subgradient: np.ndarray


def default_lambda(n_k, p_k, sigma, N_k, c=1.0):
    """Penalty weights matched to the ``1/(2 r sqrt(N))`` loss scaling.

    With ``r = n_k / N_k`` the implied penalty on the usual ``1/(2n)`` loss is
    ``c * sigma * sqrt(2 log p / n)``.
    """
    if p_k <= 1:
        raise DataError("default_lambda needs p_k > 1")
    if sigma <= 0:
        raise DataError("sigma must be positive")
    if n_k <= 0 or N_k <= 0 or c < 0:
        raise DataError("n_k and N_k must be positive and c non-negative")
    val = c * math.sqrt(N_k) * sigma * math.sqrt(2.0 * math.log(p_k) / n_k)
    return np.full(int(p_k), val)


@njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _cd_gram(G, C, H, Hinv, gx, gd, beta, alpha, pen, tol, max_sweeps):
    """Covariance-form coordinate descent.

    ``gx = X'res`` and ``gd = D'res`` are kept in sync with every update.
    Returns (sweeps, converged).
    """
    p = beta.shape[0]
    s = alpha.shape[0]
    sweeps = 0
    active_only = False
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        # treatment block: exact least squares given beta
        if s > 0:
            for a in range(s):
                da = 0.0
                for b in range(s):
                    da += Hinv[a, b] * gd[b]
                if da != 0.0:
                    alpha[a] += da
                    if abs(da) > max_delta:
                        max_delta = abs(da)
                    for j in range(p):
                        gx[j] -= C[j, a] * da
                    for b in range(s):
                        gd[b] -= H[b, a] * da
        for j in range(p):
            if active_only and beta[j] == 0.0:
                continue
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            new = _soft(gx[j] + gjj * old, pen[j]) / gjj
            delta = new - old
            if delta != 0.0:
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
                for i in range(p):
                    gx[i] -= G[i, j] * delta
                for b in range(s):
                    gd[b] -= C[j, b] * delta
        scale = 0.0
        for j in range(p):
            if abs(beta[j]) > scale:
                scale = abs(beta[j])
        for a in range(s):
            if abs(alpha[a]) > scale:
                scale = abs(alpha[a])
        if max_delta <= tol * (1.0 + scale):
            if not active_only:
                return sweeps, True
            active_only = False
        else:
            active_only = True
    return sweeps, False


@njit(cache=True)
def _cd_resid(X, D, Hinv, res, beta, alpha, pen, colsq, tol, max_sweeps):
    """Residual-update coordinate descent for wide designs."""
    n, p = X.shape
    s = alpha.shape[0]
    sweeps = 0
    active_only = False
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        if s > 0:
            gd = D.T @ res
            da = Hinv @ gd
            for a in range(s):
                if da[a] != 0.0:
                    alpha[a] += da[a]
                    if abs(da[a]) > max_delta:
                        max_delta = abs(da[a])
                    for i in range(n):
                        res[i] -= D[i, a] * da[a]
        for j in range(p):
            if active_only and beta[j] == 0.0:
                continue
            if colsq[j] <= 0.0:
                continue
            old = beta[j]
            z = 0.0
            for i in range(n):
                z += X[i, j] * res[i]
            new = _soft(z + colsq[j] * old, pen[j]) / colsq[j]
            delta = new - old
            if delta != 0.0:
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
                for i in range(n):
                    res[i] -= X[i, j] * delta
        scale = np.max(np.abs(beta)) if p > 0 else 0.0
        if s > 0:
            scale = max(scale, np.max(np.abs(alpha)))
        if max_delta <= tol * (1.0 + scale):
            if not active_only:
                return sweeps, True
            active_only = False
        else:
            active_only = True
    return sweeps, False


def _treatment_inverse(D):
    s = D.shape[1]
    if s == 0:
        return np.zeros((0, 0)), np.zeros((0, 0))
    H = D.T @ D
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateDesignError("treatment block is rank deficient", condition=cond)
    return H, np.linalg.inv(H)


def coordinate_descent(y, D, X, penalty, tol=1e-10, max_sweeps=MAX_SWEEPS):
    """Minimize ``0.5 ||y - D a - X b||^2 + sum_j penalty_j |b_j|``.

    ``D`` may have zero columns. Returns ``(alpha, beta, sweeps)``.
    """
    y = np.ascontiguousarray(y, dtype=float)
    D = np.ascontiguousarray(D, dtype=float).reshape(y.shape[0], -1)
    X = np.ascontiguousarray(X, dtype=float).reshape(y.shape[0], -1)
    pen = np.ascontiguousarray(penalty, dtype=float)
    p, s = X.shape[1], D.shape[1]
    if pen.shape != (p,):
        raise DataError(f"penalty must have length {p}")
    if np.any(pen < 0):
        raise DataError("penalty weights must be non-negative")
    H, Hinv = _treatment_inverse(D)
    beta = np.zeros(p)
    alpha = np.zeros(s)
    if s:
        alpha = Hinv @ (D.T @ y)
    if p <= GRAM_MAX_P:
        G = X.T @ X
        C = X.T @ D
        res = y - D @ alpha
        gx = X.T @ res
        gd = D.T @ res
        sweeps, ok = _cd_gram(G, C, H, Hinv, gx, gd, beta, alpha, pen, tol, max_sweeps)
    else:
        res = y - D @ alpha
        colsq = np.einsum("ij,ij->j", X, X)
        sweeps, ok = _cd_resid(X, D, Hinv, res, beta, alpha, pen, colsq, tol, max_sweeps)
    if not ok:
        raise SolverError(
            f"coordinate descent did not converge in {max_sweeps} sweeps",
            last_iterate=(alpha.copy(), beta.copy()),
        )
    return alpha, beta, sweeps


def lasso_objective(data: Dataset, alpha, beta, lam, r, N):
    res = data.y - data.d @ alpha - data.x @ beta
    return float(res @ res / (2.0 * r * math.sqrt(N)) + np.sum(np.abs(lam * beta)))


def fit_weighted_lasso(data: Dataset, lam, r, N) -> LassoFit:
    """Fit the weighted LASSO on one (centered) study.

    Parameters
    ----------
    data : Dataset
        Centered study data.
    lam : array of length ``p``
        Non-negative penalty weights on the covariates.
    r : float
        Subsample ratio ``n_k / N_k`` in (0, 1).
    N : int
        Total size ``N_k`` of existing plus validation samples.
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.shape[0] != data.p:
        raise DataError(f"lambda must have length p={data.p}, got {lam.shape[0]}")
    if not 0.0 < r < 1.0:
        raise DataError(f"r must lie in (0, 1), got {r}")
    if N < data.n:
        raise DataError(f"N={N} is smaller than the study size n={data.n}")
    scale = r * math.sqrt(N)
    alpha, beta, sweeps = coordinate_descent(data.y, data.d, data.x, scale * lam)
    obj = lasso_objective(data, alpha, beta, lam, r, N)
    alpha.setflags(write=False)
    beta.setflags(write=False)
    lam = lam.copy()
    lam.setflags(write=False)
    return LassoFit(alpha, beta, lam, float(r), int(N), obj, sweeps)


def extract_selection(fit: LassoFit, lam=None) -> SelectionSummary:
    lam = fit.lam if lam is None else np.asarray(lam, dtype=float)
    sel = np.flatnonzero(fit.beta_l != 0.0)
    return SelectionSummary(
        tuple(sel.tolist()), lam[sel], tuple(np.sign(fit.beta_l[sel]).astype(int).tolist())
    )


def kkt_residual(fit: LassoFit, data: Dataset, lam=None, r=None, N=None):
    """Stationarity error and inactive-coordinate slack of a LASSO solution.

    Returns ``(active_residual, inactive_slack)``, both in max norm. The
    treatment block counts toward the active residual.
    """
    lam = fit.lam if lam is None else np.asarray(lam, dtype=float)
    r = fit.r if r is None else r
    N = fit.n_total if N is None else N
    res = data.y - data.d @ fit.alpha_l - data.x @ fit.beta_l
    scale = r * math.sqrt(N)
    gx = data.x.T @ res / scale
    gd = data.d.T @ res / scale
    act = fit.beta_l != 0.0
    parts = [np.abs(gd)]
    if act.any():
        parts.append(np.abs(gx[act] - lam[act] * np.sign(fit.beta_l[act])))
    active = float(np.max(np.concatenate(parts)))
    inact = ~act
    slack = float(np.max(np.maximum(np.abs(gx[inact]) - lam[inact], 0.0))) if inact.any() else 0.0
    return active, slack


def estimate_sigma(data: Dataset, fit: LassoFit) -> float:
    """Residual RMS of a LASSO fit with a support-size degrees-of-freedom correction."""
    res = data.y - data.d @ fit.alpha_l - data.x @ fit.beta_l
    df = data.n - data.s - int(np.count_nonzero(fit.beta_l))
    return float(math.sqrt(res @ res / max(df, 1)))


def _align_validation(existing: Dataset, validation: Dataset) -> Dataset:
    p = existing.p
    if validation.p < p:
        raise UnavailableDiagnosticError(
            f"validation has {validation.p} covariates, the diagnostic needs all {p}"
        )
    if validation.s != existing.s:
        raise DataError("treatment dimensions differ between studies")
    if validation.p > p:
        validation = validation.restrict(range(p))
    return validation


def randomization_omega(existing: Dataset, validation: Dataset, fit: LassoFit) -> RandomizationDiag:
    """Randomization variable implied by fitting the LASSO on a subsample.

    ``omega`` is the gradient, at the LASSO solution, of the pooled
    least-squares loss minus the ``1/r`` rescaled existing-study loss (both
    scaled by ``1/(2 sqrt(N))``). ``gamma_hat_gap`` and ``subgradient`` are
    the unselected-coordinate statistics that close the KKT map.
    """
    validation = _align_validation(existing, validation)
    N, r = fit.n_total, fit.r
    rt = math.sqrt(N)
    gk = np.hstack([existing.d, existing.x])
    gv = np.hstack([validation.d, validation.x])
    coef = np.concatenate([fit.alpha_l, fit.beta_l])
    res_k = existing.y - gk @ coef
    res_v = validation.y - gv @ coef
    grad_k = -gk.T @ res_k / rt
    grad_v = -gv.T @ res_v / rt
    omega = grad_k + grad_v - grad_k / r

    sel = fit.support
    unsel = np.setdiff1d(np.arange(existing.p), sel)
    gamma_hat = _pooled_raw(existing, validation, sel)
    cols = np.concatenate([np.arange(existing.s), existing.s + sel])
    fit_k = existing.y - gk[:, cols] @ gamma_hat
    fit_v = validation.y - gv[:, cols] @ gamma_hat
    gap = (existing.x[:, unsel].T @ fit_k + validation.x[:, unsel].T @ fit_v) / N
    z = existing.x[:, unsel].T @ res_k / (r * rt * fit.lam[unsel])
    return RandomizationDiag(omega, gap, z)


def _pooled_raw(existing, validation, sel):
    a = np.vstack([np.hstack([existing.d, existing.x[:, sel]]), np.hstack([validation.d, validation.x[:, sel]])])
    b = np.concatenate([existing.y, validation.y])
    return np.linalg.solve(a.T @ a, a.T @ b)


def reconstruct_omega(existing: Dataset, validation: Dataset, fit: LassoFit, diag: RandomizationDiag):
    """Rebuild ``omega`` from the block KKT identity.

    Uses the pooled least-squares estimate, the pooled covariance blocks, the
    LASSO solution, the inactive subgradient and ``zeta``; the result is in
    the original coordinate order and should equal ``diag.omega``.
    """
    validation = _align_validation(existing, validation)
    N = fit.n_total
    rt = math.sqrt(N)
    s = existing.s
    sel = fit.support
    unsel = np.setdiff1d(np.arange(existing.p), sel)
    gk_e = np.hstack([existing.d, existing.x[:, sel]])
    gv_e = np.hstack([validation.d, validation.x[:, sel]])
    sigma = (gk_e.T @ gk_e + gv_e.T @ gv_e) / N
    sigma_cross = (existing.x[:, unsel].T @ gk_e + validation.x[:, unsel].T @ gv_e) / N
    gamma_hat = _pooled_raw(existing, validation, sel)
    gamma_l = np.concatenate([fit.alpha_l, fit.beta_l[sel]])
    zeta = np.concatenate([np.zeros(s), fit.lam[sel] * np.sign(fit.beta_l[sel])])
    top = -sigma @ (rt * gamma_hat) + sigma @ (rt * gamma_l) + zeta
    bottom = (
        -sigma_cross @ (rt * gamma_hat)
        - rt * diag.gamma_hat_gap
        + sigma_cross @ (rt * gamma_l)
        + fit.lam[unsel] * diag.subgradient
    )
    out = np.empty(s + existing.p)
    out[:s] = top[:s]
    out[s + sel] = top[s:]
    out[s + unsel] = bottom
    return out
