"""Maximum-likelihood estimation on complete-data sample moments.

The discrepancy minimized is the normal-theory ML fit function with mean
structure,

    F(theta) = ln|Sigma| + tr(S Sigma^-1) - ln|S| - p
               + (xbar - mu)' Sigma^-1 (xbar - mu),

zero exactly at a saturated fit; the chi-square statistic is (n-1) F
(the divisor convention is documented wherever it matters). Optimization
is quasi-Newton (L-BFGS-B) on a transformed unconstrained space: log for
variances, atanh for the AR coefficient, identity for everything else.
Analytic gradients are implemented for both model variants and verified
against finite differences in the test suite.

Standard errors come from the observed information of the log-likelihood
at the optimum (central-difference Hessian of F, scaled by n/2). Wald
tests use the standard normal reference; pooled inference applies its own
small-sample reference elsewhere.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .model import (
    BASELINE_PARAM_NAMES,
    BASELINE_VARIANCE_PARAMS,
    PARAM_NAMES,
    VARIANCE_PARAMS,
    BaselineParameterVector,
    InvalidParameterError,
    ModelDefinition,
    ParameterVector,
    Variant,
    trend_basis,
)
from .moments import (
    ar_variances,
    error_covariance,
    expected_fever,
    implied_moments_for,
    latent_covariance,
)

__all__ = [
    "SampleMoments",
    "FitResult",
    "FitOptions",
    "EstimationError",
    "SingularMatrixError",
    "ml_discrepancy",
    "discrepancy_from_moments",
    "fit_model",
    "default_start",
    "standard_errors",
    "WaldTest",
    "wald_tests",
    "LRTResult",
    "likelihood_ratio_test",
    "StandardizedSolution",
    "standardized_solution",
    "VarianceDecomposition",
    "variance_decomposition",
]

_BIG = 1e12  # objective value returned for infeasible iterates


class EstimationError(RuntimeError):
    """Estimation failed in a way that must not pass silently."""


class SingularMatrixError(EstimationError):
    """A moment matrix required to be positive definite is not."""


@dataclass(frozen=True)
class SampleMoments:
    """Sample size, mean vector, and ML-convention (divisor n) covariance."""

    n: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if self.n < 2:
            raise ValueError(f"sample size must be >= 2, got {self.n}")
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"inconsistent shapes: mean {mean.shape}, cov {cov.shape}"
            )
        if not np.allclose(cov, cov.T, atol=1e-8, rtol=1e-8):
            raise ValueError("sample covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        object.__setattr__(self, "_logdet", None)

    @property
    def p(self) -> int:
        return self.mean.size

    @property
    def logdet_cov(self) -> tuple[float, float]:
        """Cached (sign, log|S|); the fit function evaluates this often."""
        if self._logdet is None:
            sign, logdet = np.linalg.slogdet(self.cov)
            object.__setattr__(self, "_logdet", (float(sign), float(logdet)))
        return self._logdet


@dataclass(frozen=True)
class FitResult:
    """Converged (or honestly non-converged) ML fit of one dataset."""

    params: ParameterVector | BaselineParameterVector
    definition: ModelDefinition
    n: int
    loglik: float
    f_ml: float
    converged: bool
    n_iter: int
    free_names: tuple[str, ...]
    fixed: dict[str, float]
    se: np.ndarray | None = None
    warnings: tuple[str, ...] = ()

    @property
    def n_free(self) -> int:
        return len(self.free_names)

    @property
    def chi2(self) -> float:
        """(n-1) * F_ML."""
        return (self.n - 1) * self.f_ml

    def estimate(self, name: str) -> float:
        return float(getattr(self.params, name))

    def se_for(self, name: str) -> float:
        if self.se is None or name not in self.free_names:
            return float("nan")
        return float(self.se[self.free_names.index(name)])

    def to_dict(self) -> dict:
        return {
            "variant": self.definition.variant.value,
            "params": self.params.as_dict(),
            "n": self.n,
            "loglik": self.loglik,
            "f_ml": self.f_ml,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "free_names": list(self.free_names),
            "fixed": dict(self.fixed),
            "se": None if self.se is None else [float(v) for v in self.se],
            "warnings": list(self.warnings),
        }

    def parameter_table(self, alpha: float = 0.05) -> list[dict]:
        """Rows of (group, name, estimate, se, p, bonferroni flag).

        The fixed marker loading appears first with no test columns.
        """
        from .model import PARAM_GROUPS

        k = self.n_free
        # both variants fix the marker loading to 1
        rows = [
            {"group": "icm", "name": "lambda_HR", "estimate": 1.0, "fixed": True}
        ]
        tests = wald_tests(self) if self.se is not None else {}
        for name in self.definition.parameter_names:
            row = {
                "group": PARAM_GROUPS.get(name, "baseline"),
                "name": name,
                "estimate": self.estimate(name),
            }
            if name in self.fixed:
                row["fixed"] = True
            elif name in tests:
                t = tests[name]
                row.update(
                    se=t.se,
                    p=t.p,
                    significant_bonferroni=t.significant_bonferroni(alpha, k=k),
                )
            rows.append(row)
        return rows

    @classmethod
    def from_dict(cls, d: dict, definition: ModelDefinition) -> "FitResult":
        if definition.variant.value != d["variant"]:
            raise ValueError("definition variant does not match serialized fit")
        ptype = (
            ParameterVector
            if definition.variant is Variant.TIME_DEPENDENT
            else BaselineParameterVector
        )
        se = d.get("se")
        return cls(
            params=ptype.from_dict(d["params"]),
            definition=definition,
            n=int(d["n"]),
            loglik=float(d["loglik"]),
            f_ml=float(d["f_ml"]),
            converged=bool(d["converged"]),
            n_iter=int(d["n_iter"]),
            free_names=tuple(d["free_names"]),
            fixed={k: float(v) for k, v in d["fixed"].items()},
            se=None if se is None else np.asarray(se, dtype=float),
            warnings=tuple(d.get("warnings", ())),
        )


def discrepancy_from_moments(
    mean: np.ndarray, cov: np.ndarray, sample: SampleMoments
) -> float:
    """ML fit function for arbitrary model moments (any dimension)."""
    f, _ = _fml_core(np.asarray(mean, float), np.asarray(cov, float), sample)
    return f


def _fml_core(mu, sigma, sample, want_cache=False):
    """F and, optionally, the pieces needed for its gradient."""
    p = sample.p
    if mu.shape != (p,) or sigma.shape != (p, p):
        raise ValueError("model moment dimensions do not match the sample")
    sign_s, logdet_s = sample.logdet_cov
    if sign_s <= 0 or not np.isfinite(logdet_s):
        raise SingularMatrixError(
            "sample covariance is singular "
            f"(condition number {np.linalg.cond(sample.cov):.3e})"
        )
    try:
        chol = cho_factor(sigma, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        try:
            cond = f"{np.linalg.cond(sigma):.3e}"
        except np.linalg.LinAlgError:
            cond = "unavailable"
        raise SingularMatrixError(
            "implied covariance is not positive definite "
            f"(condition number {cond})"
        ) from exc
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    sigma_inv_s = cho_solve(chol, sample.cov)
    d = sample.mean - mu
    sigma_inv_d = cho_solve(chol, d)
    f = (
        logdet_sigma
        + float(np.trace(sigma_inv_s))
        - logdet_s
        - p
        + float(d @ sigma_inv_d)
    )
    if not want_cache:
        return f, None
    sigma_inv = cho_solve(chol, np.eye(p))
    # dF = tr(W dSigma) + v' dmu for symmetric dSigma
    w = sigma_inv - sigma_inv @ (sample.cov + np.outer(d, d)) @ sigma_inv
    v = -2.0 * sigma_inv_d
    return f, {"w": 0.5 * (w + w.T), "v": v}


def ml_discrepancy(
    params,
    definition: ModelDefinition,
    sample: SampleMoments,
    check: bool = True,
) -> float:
    """F_ML of a parameter vector against sample moments (>= 0)."""
    mom = implied_moments_for(params, definition, check=check)
    return discrepancy_from_moments(mom.mean, mom.cov, sample)


def loglikelihood(f_ml: float, sample: SampleMoments) -> float:
    """Gaussian log-likelihood implied by the discrepancy value."""
    _, logdet_s = sample.logdet_cov
    p = sample.p
    return -0.5 * sample.n * (f_ml + logdet_s + p + p * math.log(2.0 * math.pi))


# ---------------------------------------------------------------------------
# analytic gradients


def _gradient_full(pv: ParameterVector, definition, sample, cache) -> np.ndarray:
    grid = definition.grid
    T = grid.n_points
    lam = pv.lambda_SL
    w = cache["w"]
    v = cache["v"]
    w_hh = w[:T, :T]
    w_hs = w[:T, T:]
    w_ss = w[T:, T:]
    v_hr = v[:T]
    v_sl = v[T:]

    A = trend_basis(grid)
    sig_ff = latent_covariance(pv, grid, check=False)
    e_ff = expected_fever(pv, grid)

    # combined weight on d(Sigma_fever): Lambda' W Lambda
    g_ff = w_hh + lam * (w_hs + w_hs.T) + lam * lam * w_ss

    grads = {}
    grads["lambda_SL"] = (
        2.0 * float(np.sum(w_hs * sig_ff))
        + 2.0 * lam * float(np.sum(w_ss * sig_ff))
        + float(v_sl @ e_ff)
    )
    grads["mu_SL"] = float(v_sl.sum())

    t = grid.time_points
    starts = (t == 1) | (t == grid.halftime_start)
    dw_hh = np.diag(w_hh)
    grads["theta_HR_init"] = float(dw_hh[starts].sum())
    grads["theta_HR"] = float(dw_hh[~starts].sum())
    grads["theta_SL"] = float(np.trace(w_ss))

    iw = np.where(grid.first_half, 1.0, pv.rho_SL)
    diw = np.where(grid.first_half, 0.0, 1.0)
    s2 = grid.second_half.astype(float)
    grads["rho_SL"] = 2.0 * pv.phi_I_SL_init * float(diw @ (w_ss @ iw))
    grads["phi_I_SL_init"] = float(iw @ (w_ss @ iw))
    grads["phi_I_SL_2"] = float(s2 @ (w_ss @ s2))

    u = v_hr + lam * v_sl
    grads["mu_I_FF"] = float(u.sum())
    grads["mu_S1"] = float(u @ A[:, 1])
    grads["mu_S2"] = float(u @ A[:, 2])

    m = A.T @ g_ff @ A
    grads["phi_I_FF"] = float(m[0, 0])
    grads["phi_S1"] = float(m[1, 1])
    grads["phi_S2"] = float(m[2, 2])
    grads["phi_IFF_S1"] = 2.0 * float(m[0, 1])
    grads["phi_IFF_S2"] = 2.0 * float(m[0, 2])
    grads["phi_S1_S2"] = 2.0 * float(m[1, 2])

    # AR derivative matrices from the variance recursion
    rho = pv.rho
    var = ar_variances(rho, pv.phi_R_init, pv.phi_R, grid)
    dv_rho = np.zeros(T)
    dv_init = np.zeros(T)
    dv_phi = np.zeros(T)
    dv_init[0] = 1.0
    r2 = rho * rho
    for i in range(1, T):
        restart = (i + 1) == grid.halftime_start
        dv_rho[i] = 2.0 * rho * var[i - 1] + r2 * dv_rho[i - 1]
        dv_init[i] = r2 * dv_init[i - 1] + (1.0 if restart else 0.0)
        dv_phi[i] = r2 * dv_phi[i - 1] + (0.0 if restart else 1.0)
    ix = np.arange(T)
    lag = np.abs(np.subtract.outer(ix, ix))
    vmin_ix = np.minimum.outer(ix, ix)
    pw = np.power(rho, lag)
    dpw = np.where(lag == 0, 0.0, lag * np.power(rho, np.maximum(lag - 1, 0)))
    grads["rho"] = float(np.sum(g_ff * (dpw * var[vmin_ix] + pw * dv_rho[vmin_ix])))
    grads["phi_R_init"] = float(np.sum(g_ff * (pw * dv_init[vmin_ix])))
    grads["phi_R"] = float(np.sum(g_ff * (pw * dv_phi[vmin_ix])))

    return np.array([grads[name] for name in PARAM_NAMES])


def _gradient_baseline(pv: BaselineParameterVector, definition, sample, cache):
    T = definition.grid.n_points
    lam = pv.lambda_SL
    w = cache["w"]
    v = cache["v"]
    tr_hh = float(np.trace(w[:T, :T]))
    tr_hs = float(np.trace(w[:T, T:]))
    tr_ss = float(np.trace(w[T:, T:]))
    v_hr = v[:T]
    v_sl = v[T:]
    grads = {
        "lambda_SL": 2.0 * pv.phi_FF * tr_hs
        + 2.0 * lam * pv.phi_FF * tr_ss
        + pv.mu_FF * float(v_sl.sum()),
        "mu_SL": float(v_sl.sum()),
        "theta_HR": tr_hh,
        "theta_SL": tr_ss,
        "mu_FF": float(v_hr.sum()) + lam * float(v_sl.sum()),
        "phi_FF": tr_hh + 2.0 * lam * tr_hs + lam * lam * tr_ss,
    }
    return np.array([grads[name] for name in BASELINE_PARAM_NAMES])


def _variant_info(definition: ModelDefinition):
    if definition.variant is Variant.TIME_DEPENDENT:
        return PARAM_NAMES, VARIANCE_PARAMS, ParameterVector, _gradient_full
    return (
        BASELINE_PARAM_NAMES,
        BASELINE_VARIANCE_PARAMS,
        BaselineParameterVector,
        _gradient_baseline,
    )


def discrepancy_and_gradient(params, definition, sample):
    """F_ML and its analytic gradient in natural parameter space."""
    mom = implied_moments_for(params, definition, check=False)
    f, cache = _fml_core(mom.mean, mom.cov, sample, want_cache=True)
    _, _, _, grad_fn = _variant_info(definition)
    return f, grad_fn(params, definition, sample, cache)


# ---------------------------------------------------------------------------
# constraint transforms

_ATANH_PARAMS = frozenset({"rho"})
_RHO_CAP = 1.0 - 1e-8
_LOG_FLOOR = 1e-10


def _to_unconstrained(name: str, value: float, variance_params) -> float:
    if name in variance_params:
        return math.log(max(value, _LOG_FLOOR))
    if name in _ATANH_PARAMS:
        return math.atanh(np.clip(value, -_RHO_CAP, _RHO_CAP))
    return value


def _from_unconstrained(name: str, x: float, variance_params) -> float:
    if name in variance_params:
        return math.exp(min(x, 60.0))
    if name in _ATANH_PARAMS:
        # tanh saturates to exactly +-1 in floats around |x| ~ 19
        return float(np.clip(math.tanh(x), -_RHO_CAP, _RHO_CAP))
    return x


def _transform_jacobian(name: str, value: float, variance_params) -> float:
    """d(natural)/d(unconstrained) evaluated at the natural value."""
    if name in variance_params:
        return value
    if name in _ATANH_PARAMS:
        return 1.0 - value * value
    return 1.0


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 1000
    gtol: float = 1e-7
    ftol: float = 1e-12
    #: gradient gate behind the converged flag: a fit only counts as
    #: converged when the final transformed-space gradient is below this
    grad_accept: float = 1e-3
    restarts: int = 5
    jitter: float = 0.25
    seed: int = 0
    compute_se: bool = True


# growth-component covariance entries, (row, col) in the 3x3 matrix
_TREND_COV_PARAMS: dict[str, tuple[int, int]] = {
    "phi_I_FF": (0, 0),
    "phi_S1": (1, 1),
    "phi_S2": (2, 2),
    "phi_IFF_S1": (0, 1),
    "phi_IFF_S2": (0, 2),
    "phi_S1_S2": (1, 2),
}
# lower-triangular Cholesky layout used by the cone-constrained refit
_CHOL_IDX = ((0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2))


def _phi_to_chol_start(phi: np.ndarray) -> np.ndarray:
    """PSD-project a trend covariance and return its Cholesky factor."""
    vals, vecs = np.linalg.eigh(0.5 * (phi + phi.T))
    floor = max(1e-6 * max(float(np.trace(phi)), 1.0), 1e-10)
    vals = np.maximum(vals, floor)
    return np.linalg.cholesky((vecs * vals) @ vecs.T)


def _trend_grad_matrix(grads: dict[str, float]) -> np.ndarray:
    """Full symmetric dF/dPhi from the per-parameter trend gradients."""
    m = np.empty((3, 3))
    for name, (i, j) in _TREND_COV_PARAMS.items():
        g = grads[name] if i == j else 0.5 * grads[name]
        m[i, j] = m[j, i] = g
    return m


def default_start(definition: ModelDefinition, sample: SampleMoments):
    """Moment-based starting values.

    Trend means come from least squares of the per-time heart-rate means on
    the trend basis; variance components from coarse splits of the average
    indicator variances; the AR coefficient from the average lag-1
    autocorrelation of the heart-rate block.
    """
    T = definition.grid.n_points
    hbar = sample.mean[:T]
    sbar = sample.mean[T:]
    hr_cov = sample.cov[:T, :T]
    sl_var = np.diag(sample.cov[T:, T:])
    hs_diag = np.diag(sample.cov[:T, T:])

    hr_var = float(np.mean(np.diag(hr_cov)))
    theta_hr0 = max(0.05 * hr_var, 1e-3)
    v_ff0 = max(hr_var - theta_hr0, 1e-2)
    lam0 = float(np.clip(np.mean(hs_diag) / v_ff0, 0.05, 20.0))
    mu_sl0 = float(np.mean(sbar) - lam0 * np.mean(hbar))

    if definition.variant is Variant.TIME_INVARIANT:
        theta_sl0 = max(float(np.mean(sl_var)) - lam0 * lam0 * v_ff0, 1.0)
        return BaselineParameterVector(
            lambda_SL=lam0,
            mu_SL=mu_sl0,
            theta_HR=theta_hr0,
            theta_SL=theta_sl0,
            mu_FF=float(np.mean(hbar)),
            phi_FF=v_ff0,
        )

    A = trend_basis(definition.grid)
    coef, *_ = np.linalg.lstsq(A, hbar, rcond=None)
    lag1 = np.diag(hr_cov, k=1)
    rho0 = float(np.clip(np.mean(lag1) / hr_var, -0.9, 0.9))

    resid_sl = max(float(np.mean(sl_var)) - lam0 * lam0 * v_ff0, 2.0)
    return ParameterVector(
        lambda_SL=lam0,
        mu_SL=mu_sl0,
        theta_HR_init=2.0 * theta_hr0,
        theta_HR=theta_hr0,
        theta_SL=0.5 * resid_sl,
        rho_SL=0.5,
        phi_I_SL_init=0.3 * resid_sl,
        phi_I_SL_2=0.2 * resid_sl,
        mu_I_FF=float(coef[0]),
        mu_S1=float(coef[1]),
        mu_S2=float(coef[2]),
        phi_I_FF=0.5 * v_ff0,
        phi_S1=0.05,
        phi_S2=0.05,
        phi_IFF_S1=0.0,
        phi_IFF_S2=0.0,
        phi_S1_S2=0.0,
        rho=rho0,
        phi_R_init=0.3 * v_ff0,
        phi_R=max((1.0 - rho0 * rho0) * 0.2 * v_ff0, 1e-2),
    )


def _jitter_params(params, rng, scale, names, variance_params):
    values = {}
    for name in names:
        v = float(getattr(params, name))
        if name in variance_params:
            values[name] = v * float(np.exp(rng.normal(0.0, scale)))
        elif name in _ATANH_PARAMS:
            values[name] = float(np.tanh(math.atanh(np.clip(v, -0.99, 0.99)) + rng.normal(0.0, scale)))
        else:
            values[name] = v + rng.normal(0.0, scale * (1.0 + abs(v)))
    return type(params)(**values)


class _Problem:
    """Shared state for one fit: transforms, objective, bookkeeping."""

    def __init__(self, definition, sample, fixed, opts):
        self.definition = definition
        self.sample = sample
        self.opts = opts
        names, variance_params, ptype, _ = _variant_info(definition)
        self.names = names
        self.variance_params = variance_params
        self.ptype = ptype
        self.fixed = fixed
        self.free_names = tuple(n for n in names if n not in fixed)
        self.n_iter = 0

    def make_params(self, x: np.ndarray):
        values = dict(self.fixed)
        for name, xi in zip(self.free_names, x):
            values[name] = _from_unconstrained(name, float(xi), self.variance_params)
        return self.ptype(**values)

    def _grad_lookup(self, pv, grad_nat_full):
        return dict(zip(self.names, grad_nat_full))

    def objective(self, x: np.ndarray):
        # ValueError covers NaN/inf moment matrices from extreme iterates
        try:
            pv = self.make_params(x)
            f, grad_nat = discrepancy_and_gradient(pv, self.definition, self.sample)
        except (SingularMatrixError, InvalidParameterError, ValueError):
            return _BIG, np.zeros(len(self.free_names))
        if not np.isfinite(f):
            return _BIG, np.zeros(len(self.free_names))
        lookup = self._grad_lookup(pv, grad_nat)
        grad = np.array(
            [
                lookup[name]
                * _transform_jacobian(
                    name, float(getattr(pv, name)), self.variance_params
                )
                for name in self.free_names
            ]
        )
        return f, grad

    def minimize_from(self, start_params):
        x0 = np.array(
            [
                _to_unconstrained(
                    n, float(getattr(start_params, n)), self.variance_params
                )
                for n in self.free_names
            ]
        )
        res = minimize(
            self.objective,
            x0,
            jac=True,
            method="L-BFGS-B",
            options={
                "maxiter": self.opts.max_iter,
                "maxfun": 5 * self.opts.max_iter,
                "ftol": self.opts.ftol,
                "gtol": self.opts.gtol,
            },
        )
        self.n_iter += int(res.nit)
        return res

    # -- cone-constrained refit of the growth-component covariance --------

    def cone_refit(self, start_params):
        """Exact constrained ML with Phi_trend = L L' (PSD by construction).

        Used only when the unconstrained optimum is trend-indefinite, which
        restarts cannot repair because it is a property of the data.
        """
        other = tuple(n for n in self.free_names if n not in _TREND_COV_PARAMS)
        L0 = _phi_to_chol_start(start_params.trend_covariance)
        x0 = np.concatenate(
            [
                [
                    _to_unconstrained(
                        n, float(getattr(start_params, n)), self.variance_params
                    )
                    for n in other
                ],
                [
                    math.log(max(L0[i, j], _LOG_FLOOR)) if i == j else L0[i, j]
                    for i, j in _CHOL_IDX
                ],
            ]
        )
        k_other = len(other)

        def build(x):
            values = dict(self.fixed)
            for name, xi in zip(other, x[:k_other]):
                values[name] = _from_unconstrained(
                    name, float(xi), self.variance_params
                )
            L = np.zeros((3, 3))
            for raw, (i, j) in zip(x[k_other:], _CHOL_IDX):
                L[i, j] = math.exp(min(raw, 40.0)) if i == j else raw
            phi = L @ L.T
            for name, (i, j) in _TREND_COV_PARAMS.items():
                values[name] = phi[i, j]
            return self.ptype(**values), L

        def objective(x):
            try:
                pv, L = build(x)
                f, grad_nat = discrepancy_and_gradient(
                    pv, self.definition, self.sample
                )
            except (SingularMatrixError, InvalidParameterError, ValueError):
                return _BIG, np.zeros(x.size)
            if not np.isfinite(f):
                return _BIG, np.zeros(x.size)
            lookup = self._grad_lookup(pv, grad_nat)
            g_other = [
                lookup[name]
                * _transform_jacobian(
                    name, float(getattr(pv, name)), self.variance_params
                )
                for name in other
            ]
            m = _trend_grad_matrix(lookup)
            g_L = 2.0 * m @ L
            g_chol = [
                g_L[i, j] * (L[i, j] if i == j else 1.0) for i, j in _CHOL_IDX
            ]
            return f, np.array(g_other + g_chol)

        res = minimize(
            objective,
            x0,
            jac=True,
            method="L-BFGS-B",
            options={
                "maxiter": self.opts.max_iter,
                "maxfun": 5 * self.opts.max_iter,
                "ftol": self.opts.ftol,
                "gtol": self.opts.gtol,
            },
        )
        self.n_iter += int(res.nit)
        params, _ = build(res.x)
        return res, params


def _is_admissible(params) -> bool:
    try:
        params.validate()
    except InvalidParameterError:
        return False
    return True


def fit_model(
    definition: ModelDefinition,
    sample: SampleMoments,
    init=None,
    opts: FitOptions = FitOptions(),
    fixed: dict[str, float] | None = None,
) -> FitResult:
    """Fit a model variant by quasi-Newton ML.

    ``fixed`` maps parameter names to values held constant (used by the
    likelihood-ratio harness for nested fits); the remaining parameters are
    optimized on the transformed unconstrained space. An optimum whose
    growth-component covariance is indefinite triggers a jittered restart
    and then an exact cone-constrained refit (Cholesky-parameterized); if
    nothing admissible converges the result says ``converged=False``, never
    a silent success. The returned discrepancy never exceeds the starting
    one.
    """
    fixed = dict(fixed or {})
    names, variance_params, ptype, _ = _variant_info(definition)
    unknown = set(fixed) - set(names)
    if unknown:
        raise ValueError(f"unknown fixed parameters: {sorted(unknown)}")
    problem = _Problem(definition, sample, fixed, opts)
    if not problem.free_names:
        raise ValueError("no free parameters to estimate")

    sign_s, _ = sample.logdet_cov
    if sign_s <= 0 or sample.n <= sample.p:
        raise SingularMatrixError(
            f"sample covariance is singular (n={sample.n}, p={sample.p}, "
            f"condition number {np.linalg.cond(sample.cov):.3e}); "
            "estimation needs n > p"
        )

    start = init if init is not None else default_start(definition, sample)
    if not isinstance(start, ptype):
        raise TypeError(f"init must be a {ptype.__name__}")

    rng = np.random.default_rng(opts.seed)
    fit_warnings: list[str] = []
    best = None  # ((rank key), f, params, message)
    inadmissible_optima = 0
    start_params = start
    for attempt in range(opts.restarts + 1):
        res = problem.minimize_from(start_params)
        candidate = problem.make_params(res.x)
        ok_opt = (
            bool(res.success)
            and res.fun < _BIG
            and float(np.max(np.abs(res.jac))) <= opts.grad_accept
        )
        admissible = _is_admissible(candidate)
        key = (ok_opt and admissible, ok_opt, -res.fun)
        if best is None or key > best[0]:
            best = (key, float(res.fun), candidate, res.message)
        if ok_opt and admissible:
            break
        if res.fun < _BIG and not admissible:
            # an indefinite optimum is a property of the data; one jittered
            # retry per the refit policy, then hand over to the cone refit
            inadmissible_optima += 1
            if inadmissible_optima >= 2:
                break
        start_params = _jitter_params(
            start, rng, opts.jitter * (attempt + 1), names, variance_params
        )

    _, f_hat, params_hat, message = best
    converged = best[0][0]

    trend_refit_possible = (
        definition.variant is Variant.TIME_DEPENDENT
        and not (set(fixed) & set(_TREND_COV_PARAMS))
    )
    if not converged and f_hat < _BIG and trend_refit_possible:
        res_c, params_c = problem.cone_refit(params_hat)
        refit_ok = (
            bool(res_c.success)
            and res_c.fun < _BIG
            and float(np.max(np.abs(res_c.jac))) <= opts.grad_accept
            and _is_admissible(params_c)
        )
        if refit_ok:
            params_hat = params_c
            f_hat = float(res_c.fun)
            converged = True
            fit_warnings.append(
                "growth-component covariance estimated on the PSD boundary "
                "(cone-constrained refit)"
            )

    try:
        f_start = ml_discrepancy(start, definition, sample, check=False)
    except (SingularMatrixError, ValueError):
        f_start = float("inf")
    if f_hat > f_start:  # monotone acceptance guard
        params_hat, f_hat = start, f_start
        fit_warnings.append("optimizer did not improve on the start; kept start")
        converged = False

    if not converged:
        fit_warnings.append(
            f"no admissible converged fit (last optimizer message: {message})"
        )

    result = FitResult(
        params=params_hat,
        definition=definition,
        n=sample.n,
        loglik=loglikelihood(f_hat, sample),
        f_ml=f_hat,
        converged=converged,
        n_iter=problem.n_iter,
        free_names=problem.free_names,
        fixed=fixed,
        se=None,
        warnings=tuple(fit_warnings),
    )
    if opts.compute_se and converged:
        se, se_warnings = _standard_errors_impl(result, sample)
        result = replace(
            result, se=se, warnings=result.warnings + tuple(se_warnings)
        )
    return result


def _standard_errors_impl(result: FitResult, sample: SampleMoments):
    """Observed-information SEs; NaN per parameter when not defined."""
    definition = result.definition
    names, variance_params, ptype, _ = _variant_info(definition)
    free = result.free_names
    theta = np.array([result.estimate(n) for n in free])
    k = len(free)
    warnings_out: list[str] = []

    def grad_at(values: np.ndarray) -> np.ndarray:
        d = dict(result.fixed)
        # boundary variance estimates: clamp the finite-difference probe at 0
        d.update(
            (n, max(v, 0.0) if n in variance_params else v)
            for n, v in zip(free, values)
        )
        try:
            pv = ptype(**d)
            _, g = discrepancy_and_gradient(pv, definition, sample)
        except (SingularMatrixError, InvalidParameterError, ValueError):
            return np.full(len(names), np.nan)
        lookup = dict(zip(names, g))
        return np.array([lookup[n] for n in free])

    h = 1e-4 * (1.0 + np.abs(theta))
    hess = np.empty((k, k))
    for i in range(k):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        hess[:, i] = (grad_at(up) - grad_at(dn)) / (2.0 * h[i])
    hess = 0.5 * (hess + hess.T)

    se = np.full(k, np.nan)
    if not np.all(np.isfinite(hess)):
        warnings_out.append("Hessian evaluation failed; standard errors unavailable")
        return se, warnings_out
    try:
        hinv = np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        warnings_out.append("singular Hessian; standard errors unavailable")
        return se, warnings_out
    var = (2.0 / sample.n) * np.diag(hinv)
    bad = var <= 0
    se[~bad] = np.sqrt(var[~bad])
    if bad.any():
        bad_names = [free[i] for i in np.flatnonzero(bad)]
        warnings_out.append(
            "observed information not positive definite for: "
            + ", ".join(bad_names)
        )
    return se, warnings_out


def standard_errors(result: FitResult, sample: SampleMoments) -> np.ndarray:
    """Public SE computation for an existing converged fit."""
    if not result.converged:
        raise EstimationError("standard errors require a converged fit")
    se, _ = _standard_errors_impl(result, sample)
    return se


@dataclass(frozen=True)
class WaldTest:
    name: str
    estimate: float
    se: float
    t: float
    p: float

    @property
    def available(self) -> bool:
        return np.isfinite(self.se) and self.se > 0

    def significant_at(self, alpha: float = 0.05) -> bool:
        return self.available and self.p < alpha

    def significant_bonferroni(self, alpha: float = 0.05, k: int = 20) -> bool:
        return self.available and self.p < alpha / k


def wald_tests(result: FitResult) -> dict[str, WaldTest]:
    """Per-parameter z tests of the free parameters against zero."""
    if result.se is None:
        raise EstimationError("fit has no standard errors")
    out = {}
    for i, name in enumerate(result.free_names):
        est = result.estimate(name)
        se = float(result.se[i])
        if not np.isfinite(se) or se <= 0:
            out[name] = WaldTest(name, est, se, float("nan"), float("nan"))
            continue
        z = est / se
        p = 1.0 if est == 0 else 2.0 * float(stats.norm.sf(abs(z)))
        out[name] = WaldTest(name, est, se, z, p)
    return out


@dataclass(frozen=True)
class LRTResult:
    stat: float
    df: int
    p: float


def likelihood_ratio_test(full: FitResult, restricted: FitResult) -> LRTResult:
    """2 (loglik_full - loglik_restricted) against chi-square.

    The restricted model must be the same variant on the same data with a
    subset of the full model's free parameters.
    """
    if full.definition != restricted.definition or full.n != restricted.n:
        raise ValueError("fits are not on the same model/data")
    if not set(restricted.free_names) <= set(full.free_names):
        raise ValueError("restricted model is not nested in the full model")
    df = full.n_free - restricted.n_free
    stat = 2.0 * (full.loglik - restricted.loglik)
    tol = 1e-6 * max(1.0, abs(full.loglik))
    if stat < -tol:
        raise EstimationError(
            f"negative LRT statistic ({stat:.3e}); optimizer failure on one fit"
        )
    stat = max(stat, 0.0)
    if df == 0:
        p = 1.0 if stat <= tol else 0.0
    else:
        p = float(stats.chi2.sf(stat, df))
    return LRTResult(stat=stat, df=df, p=p)


# ---------------------------------------------------------------------------
# standardized solution and variance accounting


@dataclass(frozen=True)
class StandardizedSolution:
    time: np.ndarray
    std_loading_HR: np.ndarray
    std_loading_SL: np.ndarray
    r2_HR: np.ndarray
    r2_SL: np.ndarray
    reliability: np.ndarray

    def means(self) -> dict:
        return {
            "std_loading_HR": float(self.std_loading_HR.mean()),
            "std_loading_SL": float(self.std_loading_SL.mean()),
            "r2_HR": float(self.r2_HR.mean()),
            "r2_SL": float(self.r2_SL.mean()),
            "reliability": float(self.reliability.mean()),
        }


def _fever_and_error_variances(params: ParameterVector, grid):
    v_ff = np.diag(latent_covariance(params, grid, check=False))
    theta = error_covariance(params, grid)
    T = grid.n_points
    return v_ff, np.diag(theta)[:T], np.diag(theta)[T:]


def standardized_solution(result: FitResult) -> StandardizedSolution:
    """Per-time-point standardized loadings, explained variance shares, and
    composite (omega-style) construct reliability.

    Reliability at t is ``(sum_j lambda_j)^2 V(fever_t)`` over itself plus
    the total error variance of both indicators at t.
    """
    params = result.params
    if not isinstance(params, ParameterVector):
        raise TypeError("standardized solution is defined for the full model")
    grid = result.definition.grid
    lam = params.lambda_SL
    v_ff, th_hr, th_sl = _fever_and_error_variances(params, grid)
    var_hr = v_ff + th_hr
    var_sl = lam * lam * v_ff + th_sl
    if np.any(var_hr <= 0) or np.any(var_sl <= 0):
        raise EstimationError("zero implied indicator variance")
    std_hr = np.sqrt(v_ff / var_hr)
    std_sl = lam * np.sqrt(v_ff) / np.sqrt(var_sl)
    lam_sum = 1.0 + lam
    rel = lam_sum**2 * v_ff / (lam_sum**2 * v_ff + th_hr + th_sl)
    return StandardizedSolution(
        time=grid.time_points,
        std_loading_HR=std_hr,
        std_loading_SL=std_sl,
        r2_HR=std_hr**2,
        r2_SL=std_sl**2,
        reliability=rel,
    )


@dataclass(frozen=True)
class VarianceDecomposition:
    avg_var_SL: float
    avg_var_HR: float
    shares: dict[str, float]


def variance_decomposition(result: FitResult) -> VarianceDecomposition:
    """Average model-implied indicator variances and headline shares."""
    params = result.params
    if not isinstance(params, ParameterVector):
        raise TypeError("variance decomposition is defined for the full model")
    grid = result.definition.grid
    lam = params.lambda_SL
    v_ff, th_hr, th_sl = _fever_and_error_variances(params, grid)
    avg_sl = float(np.mean(lam * lam * v_ff + th_sl))
    avg_hr = float(np.mean(v_ff + th_hr))
    shares = {
        "theta_SL_over_avg_SL": params.theta_SL / avg_sl,
        "phi_I_SL_init_over_avg_SL": params.phi_I_SL_init / avg_sl,
        "theta_HR_over_avg_HR": params.theta_HR / avg_hr,
        "theta_HR_init_over_theta_HR": params.theta_HR_init / params.theta_HR,
    }
    return VarianceDecomposition(avg_var_SL=avg_sl, avg_var_HR=avg_hr, shares=shares)
