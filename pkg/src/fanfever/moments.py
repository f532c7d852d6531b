"""Model-implied means and covariances.

Everything here is a pure function of an immutable parameter vector and a
grid; all computations are dense double-precision numpy. The implied
covariance of the 68 observed variables decomposes as

    Sigma = Lambda * Sigma_fever * Lambda' + Theta

with ``Lambda`` the (2T x T) loading matrix (1 for heart-rate rows,
``lambda_SL`` for stress rows), ``Sigma_fever`` the latent fever covariance
(growth components plus AR residual process), and ``Theta`` the structured
measurement-error covariance. PSD violations of the growth-component
covariance are rejected with an error rather than silently repaired, so a
bad optimizer step cannot masquerade as a valid model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import (
    BaselineParameterVector,
    ModelDefinition,
    ParameterVector,
    TimeGrid,
    Variant,
    trend_basis,
)

__all__ = [
    "ImpliedMoments",
    "ar_variances",
    "ar_covariance",
    "latent_covariance",
    "expected_fever",
    "error_covariance",
    "implied_moments",
    "baseline_implied_moments",
    "implied_moments_for",
]


@dataclass(frozen=True)
class ImpliedMoments:
    """Mean vector (length 2T) and covariance matrix (2T x 2T)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"inconsistent moment shapes: mean {mean.shape}, cov {cov.shape}"
            )
        # exact check: every construction path symmetrizes explicitly
        if not np.array_equal(cov, cov.T):
            raise ValueError("covariance matrix is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def to_dict(self) -> dict:
        tril = self.cov[np.tril_indices(self.cov.shape[0])]
        return {"mean": self.mean.tolist(), "cov_lower_tri": tril.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ImpliedMoments":
        mean = np.asarray(d["mean"], dtype=float)
        p = mean.size
        cov = np.zeros((p, p))
        cov[np.tril_indices(p)] = d["cov_lower_tri"]
        cov = cov + np.tril(cov, -1).T
        return cls(mean=mean, cov=cov)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "ImpliedMoments":
        return cls.from_dict(json.loads(s))


def _check_ar_inputs(rho: float, phi_R_init: float, phi_R: float) -> None:
    for name, v in (("rho", rho), ("phi_R_init", phi_R_init), ("phi_R", phi_R)):
        if not np.isfinite(v):
            raise ValueError(f"{name} is not finite: {v!r}")
    if not abs(rho) < 1:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    if phi_R_init < 0 or phi_R < 0:
        raise ValueError("AR variances must be >= 0")


def ar_variances(
    rho: float, phi_R_init: float, phi_R: float, grid: TimeGrid
) -> np.ndarray:
    """Marginal variances V(R_t) of the AR(1) fever residual process.

    Recursion: ``V(R_1) = phi_R_init`` and
    ``V(R_t) = rho^2 V(R_{t-1}) + d_t`` where the disturbance variance
    ``d_t`` restarts to ``phi_R_init`` at the second-half kickoff and is
    ``phi_R`` everywhere else. For the first half this telescopes to the
    closed form ``phi_R_init rho^(2(t-1)) + phi_R sum_{j=0}^{t-2} rho^(2j)``.
    """
    _check_ar_inputs(rho, phi_R_init, phi_R)
    T = grid.n_points
    v = np.empty(T)
    v[0] = phi_R_init
    r2 = rho * rho
    for i in range(1, T):
        shock = phi_R_init if (i + 1) == grid.halftime_start else phi_R
        v[i] = r2 * v[i - 1] + shock
    return v


def ar_covariance(
    rho: float, phi_R_init: float, phi_R: float, grid: TimeGrid
) -> np.ndarray:
    """Covariance matrix Cov(R_t, R_s) = rho^|t-s| V(R_min(t,s)).

    The process runs continuously across halftime: only the disturbance
    variance restarts at the second-half kickoff, not the dependence.
    """
    v = ar_variances(rho, phi_R_init, phi_R, grid)
    T = grid.n_points
    ix = np.arange(T)
    lag = np.abs(np.subtract.outer(ix, ix))
    vmin = v[np.minimum.outer(ix, ix)]
    return np.power(rho, lag) * vmin


def latent_covariance(
    params: ParameterVector, grid: TimeGrid, check: bool = True
) -> np.ndarray:
    """Covariance of latent fever: growth components plus AR residuals.

    ``A Phi A' + C_ar`` with ``A`` the trend basis and ``Phi`` the 3x3
    growth-component covariance. With ``check=True`` a non-PSD ``Phi`` is
    rejected.
    """
    if check:
        params.validate()
    A = trend_basis(grid)
    phi = params.trend_covariance
    c_ar = ar_covariance(params.rho, params.phi_R_init, params.phi_R, grid)
    return A @ phi @ A.T + c_ar


def expected_fever(params: ParameterVector, grid: TimeGrid) -> np.ndarray:
    """E(fever_t) = mu_I_FF + a1(t) mu_S1 + a2(t) mu_S2."""
    A = trend_basis(grid)
    return params.mu_I_FF + A[:, 1] * params.mu_S1 + A[:, 2] * params.mu_S2


def _sl_intercept_weights(params: ParameterVector, grid: TimeGrid) -> np.ndarray:
    """Per-time-point loading of the first-half stress intercept."""
    return np.where(grid.first_half, 1.0, params.rho_SL)


def error_covariance(params: ParameterVector, grid: TimeGrid) -> np.ndarray:
    """Structured measurement-error covariance Theta (2T x 2T).

    Heart-rate errors are independent with variance ``theta_HR_init`` at
    both half starts and ``theta_HR`` elsewhere. Stress errors share the
    half-specific random intercepts: the first-half intercept (variance
    ``phi_I_SL_init``) carries into the second half with coefficient
    ``rho_SL`` where a fresh intercept (variance ``phi_I_SL_2``) is added,
    on top of i.i.d. within-time noise ``theta_SL``. The two indicator
    blocks are error-uncorrelated.
    """
    T = grid.n_points
    t = grid.time_points
    starts = (t == 1) | (t == grid.halftime_start)
    theta_hr = np.where(starts, params.theta_HR_init, params.theta_HR)

    w = _sl_intercept_weights(params, grid)
    s = grid.second_half.astype(float)
    theta_sl = (
        np.outer(w, w) * params.phi_I_SL_init
        + np.outer(s, s) * params.phi_I_SL_2
        + np.diag(np.full(T, params.theta_SL))
    )

    theta = np.zeros((2 * T, 2 * T))
    theta[:T, :T] = np.diag(theta_hr)
    theta[T:, T:] = theta_sl
    return theta


def implied_moments(
    params: ParameterVector, definition: ModelDefinition, check: bool = True
) -> ImpliedMoments:
    """Implied moments of the time-dependent model.

    Mean: heart-rate entries equal E(fever_t); stress entries are
    ``mu_SL + lambda_SL E(fever_t)``. Covariance: loading-expanded latent
    covariance plus the structured error covariance.
    """
    if definition.variant is not Variant.TIME_DEPENDENT:
        raise ValueError("definition variant does not match parameter type")
    grid = definition.grid
    lam = params.lambda_SL
    sig_ff = latent_covariance(params, grid, check=check)
    theta = error_covariance(params, grid)

    cov = theta
    cov[: grid.n_points, : grid.n_points] += sig_ff
    cov[: grid.n_points, grid.n_points :] += lam * sig_ff
    cov[grid.n_points :, : grid.n_points] += lam * sig_ff
    cov[grid.n_points :, grid.n_points :] += lam * lam * sig_ff
    cov = 0.5 * (cov + cov.T)  # exact symmetry at the ulp level

    e_ff = expected_fever(params, grid)
    mean = np.concatenate([e_ff, params.mu_SL + lam * e_ff])
    return ImpliedMoments(mean=mean, cov=cov)


def baseline_implied_moments(
    params: BaselineParameterVector, definition: ModelDefinition
) -> ImpliedMoments:
    """Implied moments of the time-invariant baseline.

    Fever is i.i.d. over time with mean ``mu_FF`` and variance ``phi_FF``;
    all cross-time covariances vanish and every time point shares the same
    loadings, intercepts and error variances.
    """
    if definition.variant is not Variant.TIME_INVARIANT:
        raise ValueError("definition variant does not match parameter type")
    T = definition.grid.n_points
    lam = params.lambda_SL
    eye = np.eye(T)
    cov = np.block(
        [
            [(params.phi_FF + params.theta_HR) * eye, lam * params.phi_FF * eye],
            [
                lam * params.phi_FF * eye,
                (lam * lam * params.phi_FF + params.theta_SL) * eye,
            ],
        ]
    )
    mean = np.concatenate(
        [np.full(T, params.mu_FF), np.full(T, params.mu_SL + lam * params.mu_FF)]
    )
    return ImpliedMoments(mean=mean, cov=cov)


def implied_moments_for(params, definition: ModelDefinition, check: bool = True):
    """Dispatch on parameter type; used by estimation internals."""
    if isinstance(params, ParameterVector):
        return implied_moments(params, definition, check=check)
    if isinstance(params, BaselineParameterVector):
        return baseline_implied_moments(params, definition)
    raise TypeError(f"unsupported parameter type {type(params)!r}")
