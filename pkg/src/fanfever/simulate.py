"""Synthetic fan panels drawn from known parameters.

The generator composes the model equations directly — growth components,
AR residual recursion with the halftime disturbance restart, half-specific
stress intercepts, Gaussian measurement errors — so its empirical moments
form a brute-force oracle for the closed-form implied moments. All latent
and error distributions are Gaussian. Stress values are intentionally NOT
clipped to the device's 0-100 scale: clipping would break the moment
agreement the oracle exists to provide.

Auxiliary activity channels (steps, calories, motion intensity) are drawn
correlated with latent fever so that missingness generated from them is
missing-at-random given observables, mirroring how device dropout tracks
physical activity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimation import SampleMoments
from .imputation import PanelDataset
from .model import ParameterVector, TimeGrid, trend_basis

__all__ = [
    "MissingnessSpec",
    "BreakInjection",
    "SimulationConfig",
    "simulate_panel",
    "empirical_moments",
    "mc_standard_errors",
    "DEFAULT_PARAMS",
]

#: Pooled estimates from a 2025 cup-final supporter panel; the package's
#: canonical demo/simulation parameter set.
DEFAULT_PARAMS = ParameterVector(
    lambda_SL=1.236,
    mu_SL=-40.782,
    theta_HR_init=24.900,
    theta_HR=6.075,
    theta_SL=86.329,
    rho_SL=0.895,
    phi_I_SL_init=75.735,
    phi_I_SL_2=28.060,
    mu_I_FF=89.046,
    mu_S1=-0.431,
    mu_S2=0.633,
    phi_I_FF=164.518,
    phi_S1=0.121,
    phi_S2=0.114,
    phi_IFF_S1=-1.428,
    phi_IFF_S2=2.505,
    phi_S1_S2=-0.023,
    rho=0.658,
    phi_R_init=82.646,
    phi_R=19.393,
)

# Auxiliary-channel generation constants: intercept, loading on fever,
# and noise scale. Values only shape the MAR mechanism, not the model.
_AUX_SPEC = {
    "steps": (30.0, 0.30, 12.0),
    "calories": (4.0, 0.05, 1.5),
    "motion": (0.5, 0.02, 0.5),
}


@dataclass(frozen=True)
class MissingnessSpec:
    """Mask a fraction of stress entries, missing-at-random given motion."""

    fraction: float
    mechanism: str = "mar_on_aux"

    def __post_init__(self) -> None:
        if not 0 <= self.fraction < 1:
            raise ValueError(f"fraction must be in [0, 1), got {self.fraction}")
        if self.mechanism != "mar_on_aux":
            raise ValueError(f"unknown missingness mechanism {self.mechanism!r}")


@dataclass(frozen=True)
class BreakInjection:
    """Halftime structural break the model does not contain.

    ``mean``/``sd`` shift every fan's second-half fever by a common and a
    fan-specific amount. ``level_correlation`` < 1 partially redraws each
    fan's second-half base level (marginal variance preserved), and
    ``reset_carryover`` severs the AR dependence at the second-half
    kickoff. Only the last two perturb cross-half covariances, and only
    the level decorrelation does so at a magnitude the fitted model cannot
    absorb: a common shift leaves covariances untouched (translation
    invariance), and a heterogeneous shift is soaked up by the model's
    second-half variance components. Decorrelating the base level is what
    reproduces the diagnostic signature of a halftime break: systematically
    negative cross-half residual covariances.
    """

    mean: float = 0.0
    sd: float = 0.0
    level_correlation: float = 1.0
    reset_carryover: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.level_correlation <= 1.0:
            raise ValueError("level_correlation must be in (0, 1]")


@dataclass(frozen=True)
class SimulationConfig:
    params: ParameterVector = DEFAULT_PARAMS
    n_fans: int = 137
    seed: int = 0
    missingness: MissingnessSpec | None = None
    break_injection: BreakInjection | None = None
    grid: TimeGrid = field(default_factory=TimeGrid)

    def __post_init__(self) -> None:
        if self.n_fans < 1:
            raise ValueError("n_fans must be >= 1")


def simulate_panel(cfg: SimulationConfig) -> PanelDataset:
    """Draw a complete (optionally masked) fan panel from the model."""
    params = cfg.params.validate()
    grid = cfg.grid
    T = grid.n_points
    n = cfg.n_fans
    rng = np.random.default_rng(cfg.seed)

    # growth components per fan
    mu_trend = np.array([params.mu_I_FF, params.mu_S1, params.mu_S2])
    trend_draws = rng.multivariate_normal(
        mu_trend, params.trend_covariance, size=n, method="svd"
    )
    A = trend_basis(grid)
    trend = trend_draws @ A.T  # (n, T)

    # AR residual path with disturbance restart at halftime
    sever = cfg.break_injection is not None and cfg.break_injection.reset_carryover
    r = np.empty((n, T))
    r[:, 0] = rng.normal(0.0, np.sqrt(params.phi_R_init), size=n)
    for i in range(1, T):
        at_halftime = (i + 1) == grid.halftime_start
        shock_var = params.phi_R_init if at_halftime else params.phi_R
        carry = 0.0 if (sever and at_halftime) else params.rho
        r[:, i] = carry * r[:, i - 1] + rng.normal(
            0.0, np.sqrt(shock_var), size=n
        )

    fever = trend + r
    if cfg.break_injection is not None:
        b = cfg.break_injection
        if b.level_correlation < 1.0:
            # partially redraw the slope-independent part of each fan's
            # base level: every marginal second-order moment is preserved,
            # only the cross-half level dependence weakens
            alpha = b.level_correlation
            phi = params.trend_covariance
            slopes = trend_draws[:, 1:] - np.array([params.mu_S1, params.mu_S2])
            coef = np.linalg.lstsq(phi[1:, 1:], phi[0, 1:], rcond=None)[0]
            level = trend_draws[:, 0] - params.mu_I_FF
            resid = level - slopes @ coef
            var_resid = max(params.phi_I_FF - phi[0, 1:] @ coef, 0.0)
            redraw = rng.normal(0.0, np.sqrt(var_resid), size=n)
            blended = alpha * resid + np.sqrt(1.0 - alpha * alpha) * redraw
            fever[:, grid.second_half] += (blended - resid)[:, None]
        shift = rng.normal(b.mean, b.sd, size=n) if b.sd > 0 else np.full(n, b.mean)
        fever[:, grid.second_half] += shift[:, None]

    # half-specific stress error intercepts
    i_sl1 = rng.normal(0.0, np.sqrt(params.phi_I_SL_init), size=n)
    i_sl2 = rng.normal(0.0, np.sqrt(params.phi_I_SL_2), size=n)
    sl_intercept = np.where(
        grid.first_half[None, :],
        i_sl1[:, None],
        (params.rho_SL * i_sl1 + i_sl2)[:, None],
    )

    t = grid.time_points
    starts = (t == 1) | (t == grid.halftime_start)
    hr_sd = np.sqrt(np.where(starts, params.theta_HR_init, params.theta_HR))
    hr = fever + rng.normal(0.0, 1.0, size=(n, T)) * hr_sd[None, :]
    sl = (
        params.mu_SL
        + params.lambda_SL * fever
        + sl_intercept
        + rng.normal(0.0, np.sqrt(params.theta_SL), size=(n, T))
    )

    aux = {}
    for name, (a, b, noise_sd) in _AUX_SPEC.items():
        aux[name] = a + b * fever + rng.normal(0.0, noise_sd, size=(n, T))

    if cfg.missingness is not None and cfg.missingness.fraction > 0:
        z = aux["motion"] - np.mean(aux["motion"])
        z = z / max(np.std(z), 1e-12)
        p_miss = np.clip(
            2.0 * cfg.missingness.fraction / (1.0 + np.exp(-z)), 0.0, 0.95
        )
        sl = np.where(rng.random(size=(n, T)) < p_miss, np.nan, sl)

    return PanelDataset(
        fan_ids=[f"fan_{i:05d}" for i in range(n)],
        hr=hr,
        sl=sl,
        steps=aux["steps"],
        calories=aux["calories"],
        motion=aux["motion"],
        grid=grid,
    )


def empirical_moments(panel: PanelDataset) -> SampleMoments:
    """ML-convention (divisor n) mean and covariance of a complete panel."""
    if panel.n_fans < 2:
        raise ValueError(f"need at least 2 fans, got {panel.n_fans}")
    x = np.hstack([panel.hr, panel.sl])
    if np.isnan(x).any():
        raise ValueError("panel contains missing values; impute first")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / panel.n_fans
    return SampleMoments(n=panel.n_fans, mean=mean, cov=cov)


def mc_standard_errors(moments, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo standard errors of empirical means and covariances.

    Under Gaussian sampling, ``se(mean_i) = sqrt(S_ii/n)`` and
    ``se(cov_ij) = sqrt((S_ii S_jj + S_ij^2)/n)``. Used by the moment
    oracle to convert elementwise differences into z-scores.
    """
    s = moments.cov
    d = np.diag(s)
    se_mean = np.sqrt(d / n)
    se_cov = np.sqrt((np.outer(d, d) + s**2) / n)
    return se_mean, se_cov
