"""Exact small-dimension constructions used to check the barrier approximation.

``closed_form_carve_1d`` is the exact carved estimator for one treatment and
one selected covariate under a known correlation. ``truncated_gaussian_mean_oracle``
computes orthant-truncated Gaussian means by quadrature or by rejection
sampling, independently of any Mills-ratio formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr

from .errors import DataError, OracleInfeasibleError

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
MILLS_ASYMPTOTIC_AT = 37.0


def inverse_mills(t: float) -> float:
    """``phi(t) / (1 - Phi(t))`` evaluated in the log domain.

    For ``t > 37`` the asymptotic series is used.
    """
    if t > MILLS_ASYMPTOTIC_AT:
        t2 = t * t
        return t + 1.0 / t - 2.0 / (t * t2) + 10.0 / (t * t2 * t2) - 74.0 / (t * t2**3)
    if t < -MILLS_ASYMPTOTIC_AT:
        return math.exp(-0.5 * t * t - _LOG_SQRT_2PI)
    return math.exp(-0.5 * t * t - _LOG_SQRT_2PI - float(log_ndtr(-t)))


def closed_form_carve_1d(alpha_hat, beta_hat, rho, lam, sign, N, r=0.5):
    """Exact carved estimate for a single treatment and a single selected covariate.

    Parameters
    ----------
    alpha_hat, beta_hat : float
        Pooled least-squares coefficients of the treatment and covariate.
    rho : float
        Known correlation between treatment and covariate (unit variances).
    lam : float
        Penalty weight on the selected covariate.
    sign : {-1, +1}
        Sign of the LASSO coefficient.
    N : int
        Total sample size.
    r : float, default 0.5
        Existing-study share of ``N``. At ``r = 0.5`` this reduces to the
        equal-split formula; other values rescale the randomization variance
        by ``(1 - r) / r``.
    """
    if not abs(rho) < 1:
        raise DataError("|rho| must be below 1")
    if sign not in (-1, 1):
        raise DataError("sign must be -1 or +1")
    if lam <= 0:
        raise DataError("lambda must be positive")
    if not 0 < r < 1:
        raise DataError("r must lie in (0, 1)")
    one_m = 1.0 - rho * rho
    rk = math.sqrt(r / (1.0 - r))
    # sign = -1 mirrors sign = +1 through the reflected Mills-ratio argument
    t = (lam - sign * one_m * math.sqrt(N) * beta_hat) / math.sqrt(one_m)
    corr = rho * rk / math.sqrt(one_m * N) * inverse_mills(rk * t)
    return float(alpha_hat + sign * corr)


@dataclass(frozen=True)
class OracleResult:
    mean: np.ndarray
    se: np.ndarray
    method: str
    accepted: int = 0


def _constrained_moments_1d(m, sd, sign):
    # E[U] for U ~ N(m, sd^2) restricted to sign * U > 0, by quadrature
    mu = sign * m
    peak = max(mu, 0.0)
    width = sd if mu >= 0 else min(sd, sd * sd / -mu)
    hi = peak + 40.0 * width
    start = max(mu - 40.0 * sd, 0.0)

    def dens(u):
        return math.exp(-0.5 * (((u - mu) / sd) ** 2 - ((peak - mu) / sd) ** 2))

    pts = [peak] if start < peak < hi else None
    opts = dict(points=pts, epsabs=0, epsrel=1e-13, limit=200)
    z, _ = integrate.quad(dens, start, hi, **opts)
    if not z > 0:
        raise OracleInfeasibleError("truncation region carries no mass")
    first, _ = integrate.quad(lambda u: u * dens(u), start, hi, **opts)
    return sign * first / z


def _constrained_moments_2d(m, cov, signs):
    sds = np.sqrt(np.diag(cov))
    mu = signs * m
    cinv = np.linalg.inv(cov * np.outer(signs, signs))
    hi = np.maximum(mu, 0.0) + 40.0 * sds
    lo = np.maximum(mu - 40.0 * sds, 0.0)
    peak = np.maximum(mu, 0.0)
    dp = peak - mu
    ref = float(dp @ cinv @ dp)

    def dens(u2, u1):
        d = np.array([u1, u2]) - mu
        return math.exp(-0.5 * (float(d @ cinv @ d) - ref))

    opts = dict(epsabs=0, epsrel=1e-11)
    z, _ = integrate.dblquad(dens, lo[0], hi[0], lo[1], hi[1], **opts)
    if not z > 0:
        raise OracleInfeasibleError("truncation region carries no mass")
    e1, _ = integrate.dblquad(lambda u2, u1: u1 * dens(u2, u1), lo[0], hi[0], lo[1], hi[1], **opts)
    e2, _ = integrate.dblquad(lambda u2, u1: u2 * dens(u2, u1), lo[0], hi[0], lo[1], hi[1], **opts)
    return signs * np.array([e1, e2]) / z


def truncated_gaussian_mean_oracle(mean, cov, signs, method="auto", draws=1_000_000, seed=0):
    """Mean of ``N(mean, cov)`` restricted to ``sign(u_j) = signs[j]``.

    ``signs`` has one entry per coordinate: ``+1`` or ``-1`` constrains the
    coordinate, ``0`` leaves it free. Free coordinates follow from the
    constrained ones by Gaussian conditioning, so quadrature only runs over
    the constrained block (at most two coordinates). ``method="sample"``
    forces rejection sampling with at least ``draws`` accepted draws.
    """
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    signs = np.asarray(signs, dtype=int).reshape(-1)
    dim = mean.shape[0]
    if cov.shape != (dim, dim) or signs.shape != (dim,):
        raise DataError("mean, cov and signs dimensions disagree")
    if dim > 3:
        raise DataError("oracle supports dimension at most 3")
    if np.any(np.linalg.eigvalsh(cov) <= 0):
        raise DataError("cov must be positive definite")
    con = np.flatnonzero(signs != 0)
    free = np.flatnonzero(signs == 0)
    if con.size == 0:
        return OracleResult(mean.copy(), np.zeros(dim), "none")
    if method == "auto":
        method = "quad" if dim <= 2 else "sample"
    if method == "sample":
        return _sample(mean, cov, signs, draws, seed)
    if method != "quad":
        raise DataError(f"unknown oracle method {method!r}")
    mc, cc, sc = mean[con], cov[np.ix_(con, con)], signs[con]
    if con.size == 1:
        ec = np.array([_constrained_moments_1d(mc[0], math.sqrt(cc[0, 0]), sc[0])])
    elif con.size == 2:
        ec = _constrained_moments_2d(mc, cc, sc)
    else:
        raise DataError("quadrature supports at most two constrained coordinates")
    out = np.empty(dim)
    out[con] = ec
    if free.size:
        reg = cov[np.ix_(free, con)] @ np.linalg.inv(cc)
        out[free] = mean[free] + reg @ (ec - mc)
    return OracleResult(out, np.zeros(dim), "quad")


def _sample(mean, cov, signs, draws, seed):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov)
    con = signs != 0
    batch = 500_000
    total = np.zeros(mean.shape[0])
    total_sq = np.zeros(mean.shape[0])
    accepted = 0
    tried = 0
    while accepted < draws:
        u = mean + rng.standard_normal((batch, mean.shape[0])) @ chol.T
        keep = np.all(np.sign(u[:, con]) == signs[con], axis=1)
        tried += batch
        k = u[keep]
        accepted += k.shape[0]
        total += k.sum(axis=0)
        total_sq += (k**2).sum(axis=0)
        if tried >= 20 * batch and accepted / tried < 1e-6:
            raise OracleInfeasibleError(f"acceptance rate {accepted / tried:.2g} below 1e-6")
    m = total / accepted
    var = total_sq / accepted - m**2
    return OracleResult(m, np.sqrt(np.maximum(var, 0) / accepted), "sample", accepted)
