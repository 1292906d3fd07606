"""Carved estimation for one existing study combined with validation data.

Pipeline: pooled least squares over the selected model, pooled covariance,
the barrier-penalized convex program, the carved estimate and its
observed-information variance.

Variances are on the ``sqrt(N)`` scale with unit noise variance; multiply by
``noise_var / N`` (see :meth:`CarveFit.estimator_variance`) for the variance
of the estimate itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .core import StudySummary, validate_summary
from .errors import (
    BarrierDomainError,
    CarveError,
    DataError,
    DegenerateDesignError,
    SolverError,
    ValidationError,
)

COND_MAX = 1e12
ARMIJO = 1e-4
NEWTON_MAX_ITER = 100
NEWTON_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CarveInput:
    summary: StudySummary
    val_y: np.ndarray
    val_d: np.ndarray
    val_x_sel: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.val_y, dtype=float).reshape(-1)
        n = y.shape[0]
        d = np.asarray(self.val_d, dtype=float).reshape(n, -1)
        x = np.asarray(self.val_x_sel, dtype=float).reshape(n, -1)
        object.__setattr__(self, "val_y", y)
        object.__setattr__(self, "val_d", d)
        object.__setattr__(self, "val_x_sel", x)
        if d.shape[1] != self.summary.s:
            raise DataError(f"validation has {d.shape[1]} treatments, summary has s={self.summary.s}")
        if x.shape[1] != self.summary.q:
            raise DataError(
                f"validation has {x.shape[1]} selected covariates, summary selected q={self.summary.q}"
            )

    @classmethod
    def from_validation(cls, summary: StudySummary, validation) -> "CarveInput":
        """Build from a validation :class:`Dataset` holding all ``p`` covariates."""
        if validation.p != summary.p:
            raise DataError(
                f"validation has {validation.p} covariates but the summary was built on p={summary.p}"
            )
        cols = list(summary.selection.selected)
        return cls(summary, validation.y, validation.d, validation.x[:, cols])

    @property
    def n(self) -> int:
        return self.val_y.shape[0]

    @property
    def n_total(self) -> int:
        return self.summary.n_k + self.n

    @property
    def r(self) -> float:
        return self.summary.n_k / self.n_total

    def design(self) -> np.ndarray:
        return np.hstack([self.val_d, self.val_x_sel])


@dataclass(frozen=True, eq=False)
class CarveSolution:
    z_hat: np.ndarray
    iterations: int
    objective_trace: list
    grad_norm: float
    grad_norm_start: float


@dataclass(frozen=True, eq=False)
class CarveFit:
    gamma_hat: np.ndarray
    sigma_hat: np.ndarray
    zeta: np.ndarray
    z_hat: np.ndarray
    alpha_carve: np.ndarray
    v_carve: np.ndarray
    v_split: np.ndarray
    efficiency_bound: float
    r: float
    n_total: int
    newton_iters: int
    noise_var: float = 1.0
    study_id: str = "study"
    objective_trace: list = field(default_factory=list)

    @property
    def s(self) -> int:
        return self.alpha_carve.shape[0]

    @property
    def alpha_pooled(self) -> np.ndarray:
        return self.gamma_hat[: self.s]

    def estimator_variance(self) -> np.ndarray:
        """Plug-in variance of ``alpha_carve`` on the response scale."""
        return self.noise_var * self.v_carve / self.n_total

    def to_dict(self) -> dict:
        return {
            "study_id": self.study_id,
            "alpha_carve": self.alpha_carve.tolist(),
            "v_carve": self.v_carve.tolist(),
            "v_split": self.v_split.tolist(),
            "efficiency_bound": self.efficiency_bound,
            "z_hat": self.z_hat.tolist(),
            "newton_iters": self.newton_iters,
            "r": self.r,
            "n_total": self.n_total,
            "alpha_pooled": self.alpha_pooled.tolist(),
            "noise_var": self.noise_var,
            "gamma_hat": self.gamma_hat.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
            "zeta": self.zeta.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CarveFit":
        """Rebuild a fit from :meth:`to_dict` output."""
        try:
            return cls(
                gamma_hat=np.asarray(obj["gamma_hat"], dtype=float),
                sigma_hat=np.asarray(obj["sigma_hat"], dtype=float),
                zeta=np.asarray(obj["zeta"], dtype=float),
                z_hat=np.asarray(obj["z_hat"], dtype=float),
                alpha_carve=np.asarray(obj["alpha_carve"], dtype=float),
                v_carve=np.asarray(obj["v_carve"], dtype=float),
                v_split=np.asarray(obj["v_split"], dtype=float),
                efficiency_bound=float(obj["efficiency_bound"]),
                r=float(obj["r"]),
                n_total=int(obj["n_total"]),
                newton_iters=int(obj["newton_iters"]),
                noise_var=float(obj.get("noise_var", 1.0)),
                study_id=str(obj.get("study_id", "study")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed carve fit: {exc}") from None


def _check_cond(a, what):
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > COND_MAX:
        raise DegenerateDesignError(f"{what} is singular or ill-conditioned (cond={cond:.3g})", condition=cond)
    return cond


def _pd_solve(a, b, what="system"):
    _check_cond(a, what)
    try:
        cf = linalg.cho_factor(a)
    except linalg.LinAlgError as exc:
        raise DegenerateDesignError(f"{what} is not positive definite: {exc}") from None
    return linalg.cho_solve(cf, b)


def _pooled_system(inp: CarveInput):
    m = inp.summary.moments
    if m.n_k < 1:
        raise DataError("existing study must contribute at least one sample")
    g = inp.design()
    a = m.n_k * m.Xi + g.T @ g
    b = m.n_k * m.xi + g.T @ inp.val_y
    return a, b


def pooled_ls(inp: CarveInput) -> np.ndarray:
    """Least squares over the selected model on existing-study moments plus validation rows."""
    a, b = _pooled_system(inp)
    return _pd_solve(a, b, "pooled Gram matrix")


def pooled_covariance(inp: CarveInput) -> np.ndarray:
    a, _ = _pooled_system(inp)
    _check_cond(a, "pooled Gram matrix")
    return a / inp.n_total


def barrier_value_grad_hess(w, signs):
    """Value, gradient and diagonal Hessian of ``sum_j log(1 + 1/(s_j w_j))``."""
    w = np.asarray(w, dtype=float)
    s = np.asarray(signs, dtype=float)
    u = s * w
    if np.any(~(u > 0)):
        raise BarrierDomainError("barrier evaluated outside the sign orthant")
    value = float(np.sum(np.log1p(1.0 / u)))
    grad = -s / (u * (u + 1.0))
    hess = u**-2 - (1.0 + u) ** -2
    return value, grad, hess


def _zeta(summary: StudySummary) -> np.ndarray:
    sel = summary.selection
    return np.concatenate([np.zeros(summary.s), sel.lam * np.asarray(sel.signs, dtype=float)])


def solve_carve_program(gamma_hat, sigma_hat, zeta, r, N, signs) -> CarveSolution:
    """Damped Newton on the barrier-penalized carve objective.

    Works in ``v = sqrt(N) z``; the returned ``z_hat`` is ``v / sqrt(N)``.
    The reported gradient norms are with respect to ``v``.
    """
    if not 0.0 < r < 1.0:
        raise DataError(f"r must lie in (0, 1), got {r}")
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    signs = np.asarray(signs, dtype=float)
    dim = gamma_hat.shape[0]
    q = signs.shape[0]
    s = dim - q
    rt = math.sqrt(N)
    kappa = r / (1.0 - r)
    target = rt * gamma_hat - _pd_solve(sigma_hat, zeta, "pooled covariance")
    ks = kappa * sigma_hat

    def objective(v):
        dv = v - target
        val = 0.5 * kappa * float(dv @ sigma_hat @ dv)
        if q:
            val += barrier_value_grad_hess(v[s:], signs)[0]
        return val

    def grad_hess(v):
        g = ks @ (v - target)
        h = ks.copy()
        if q:
            _, bg, bh = barrier_value_grad_hess(v[s:], signs)
            g[s:] += bg
            h[np.arange(s, dim), np.arange(s, dim)] += bh
        return g, h

    v = rt * gamma_hat.copy()
    if q:
        v[s:] = signs * np.maximum(signs * v[s:], 1.0)

    f = objective(v)
    trace = [f]
    g, h = grad_hess(v)
    g0 = float(np.linalg.norm(g))
    for it in range(NEWTON_MAX_ITER + 1):
        gn = float(np.linalg.norm(g))
        if gn <= NEWTON_TOL * (1.0 + abs(f)):
            return CarveSolution(v / rt, it, trace, gn, g0)
        if it == NEWTON_MAX_ITER:
            break
        step = -linalg.solve(h, g, assume_a="pos")
        slope = float(g @ step)
        t = 1.0
        if q:
            while np.any(signs * (v[s:] + t * step[s:]) <= 0):
                t *= 0.5
        f_new = objective(v + t * step)
        if -slope <= 1e-13 * (1.0 + abs(f)):
            # decrement below the resolution of f: Armijo cannot discriminate,
            # so take the (feasible) Newton step as is
            v = v + t * step
            f = f_new
            trace.append(f)
            g, h = grad_hess(v)
            continue
        halvings = 0
        while f_new > f + ARMIJO * t * slope and halvings < 60:
            t *= 0.5
            halvings += 1
            f_new = objective(v + t * step)
        if f_new > f + ARMIJO * t * slope:
            # no progress left above rounding level
            if f_new <= f + 1e-14 * (1.0 + abs(f)):
                v = v + t * step
                trace.append(f_new)
                return CarveSolution(v / rt, it + 1, trace, float(np.linalg.norm(grad_hess(v)[0])), g0)
            raise SolverError("line search failed in carve program", last_iterate=v / rt, trace=trace)
        v = v + t * step
        f = f_new
        trace.append(f)
        g, h = grad_hess(v)
    raise SolverError(
        f"carve program did not converge in {NEWTON_MAX_ITER} Newton steps",
        last_iterate=v / rt,
        trace=trace,
    )


def carved_estimate(gamma_hat, sigma_hat, zeta, z_hat, r, N, s=None) -> np.ndarray:
    """Pooled estimate plus the carving correction, treatment block only.

    ``s`` defaults to the length of the leading zero block of ``zeta``
    (penalty weights on selected covariates are strictly positive).
    """
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if s is None:
        nz = np.flatnonzero(zeta)
        s = int(nz[0]) if nz.size else zeta.shape[0]
    sz = _pd_solve(np.asarray(sigma_hat, dtype=float), zeta, "pooled covariance")
    kappa = r / (1.0 - r)
    a = gamma_hat[:s]
    return a + kappa * (a - sz[:s] / math.sqrt(N) - np.asarray(z_hat, dtype=float)[:s])


def _barrier_hessian_full(z_hat, N, signs, dim):
    q = len(signs)
    h = np.zeros(dim)
    if q:
        _, _, bh = barrier_value_grad_hess(math.sqrt(N) * np.asarray(z_hat)[dim - q :], signs)
        h[dim - q :] = bh
    return h


def carve_variance(sigma_hat, z_hat, r, N, signs, s=None) -> np.ndarray:
    """Inverse observed Fisher information for the treatment block.

    ``s`` defaults to ``dim - len(signs)``.
    """
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    dim = sigma_hat.shape[0]
    s = dim - len(signs) if s is None else s
    kappa = r / (1.0 - r)
    sinv = _pd_solve(sigma_hat, np.eye(dim), "pooled covariance")
    inner = kappa * sigma_hat + np.diag(_barrier_hessian_full(z_hat, N, signs, dim))
    inner_inv = _pd_solve(inner, np.eye(dim), "observed information")
    full = sinv / (1.0 - r) - (r / (1.0 - r)) ** 2 * inner_inv
    v = full[:s, :s]
    return 0.5 * (v + v.T)


def split_variance(sigma_hat, r, s) -> np.ndarray:
    """Validation-only variance on the same scale as :func:`carve_variance`."""
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    sinv = _pd_solve(sigma_hat, np.eye(sigma_hat.shape[0]), "pooled covariance")
    v = sinv[:s, :s] / (1.0 - r)
    return 0.5 * (v + v.T)


def efficiency_bound(sigma_hat, z_hat, r, N, signs) -> float:
    """Lower bound on the relative variance reduction of carving over splitting."""
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    dim = sigma_hat.shape[0]
    h = _barrier_hessian_full(z_hat, N, signs, dim)
    b_max = float(h.max()) if len(signs) else 0.0
    lam_min = float(np.linalg.eigvalsh(sigma_hat).min())
    kappa = r / (1.0 - r)
    return r * kappa / (kappa + b_max / lam_min)


def carve_study(inp: CarveInput) -> CarveFit:
    summ = inp.summary
    problems = validate_summary(summ)
    if problems:
        raise ValidationError(problems)
    try:
        gamma_hat = pooled_ls(inp)
        sigma_hat = pooled_covariance(inp)
        zeta = _zeta(summ)
        signs = np.asarray(summ.selection.signs, dtype=float)
        r, N, s = inp.r, inp.n_total, summ.s
        sol = solve_carve_program(gamma_hat, sigma_hat, zeta, r, N, signs)
        alpha_carve = carved_estimate(gamma_hat, sigma_hat, zeta, sol.z_hat, r, N, s)
        v_carve = carve_variance(sigma_hat, sol.z_hat, r, N, signs, s)
        v_split = split_variance(sigma_hat, r, s)
        bound = efficiency_bound(sigma_hat, sol.z_hat, r, N, signs)
    except CarveError as exc:
        exc.args = (f"{summ.study_id}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise
    res = inp.val_y - inp.design() @ gamma_hat
    noise_var = float(res @ res / inp.n) if inp.n > 0 else 1.0
    return CarveFit(
        gamma_hat=gamma_hat,
        sigma_hat=sigma_hat,
        zeta=zeta,
        z_hat=sol.z_hat,
        alpha_carve=alpha_carve,
        v_carve=v_carve,
        v_split=v_split,
        efficiency_bound=bound,
        r=r,
        n_total=N,
        newton_iters=sol.iterations,
        noise_var=noise_var,
        study_id=summ.study_id,
        objective_trace=sol.objective_trace,
    )
