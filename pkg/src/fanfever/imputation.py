"""Chained-equations imputation of missing stress-level entries.

Each stress column with missing values is regressed on the other stress
columns plus the same-time-point activity covariates (steps, calories,
motion intensity), cycling column by column for a fixed number of Gibbs
sweeps. Two conditional models are built in:

* ``normal`` — Bayesian linear regression; imputations are posterior
  predictive draws, winsorized to the device's 0-100 stress scale.
* ``pmm`` — predictive mean matching; each missing entry copies the
  observed value of one of the k nearest donors by predicted value, so
  imputations always live on the observed support.

The m chains use independent seed substreams and identical sweep order, so
a fixed seed reproduces the imputation set byte for byte. Other conditional
models (trees, lasso, ...) are out of scope; the regression step is kept
behind ``_draw_linear_model`` as the extension point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .model import TimeGrid

__all__ = [
    "PanelDataset",
    "ImputationSet",
    "filter_fans",
    "mice_impute",
    "AUX_NAMES",
]

AUX_NAMES: tuple[str, ...] = ("steps", "calories", "motion")

# condition-number threshold beyond which the normal equations get a ridge
_COND_LIMIT = 1e8
_RIDGE = 1e-5


@dataclass(frozen=True)
class PanelDataset:
    """Wide per-fan records: HR and SL over the grid plus activity channels.

    ``sl`` uses NaN for missing entries; ``hr`` and the activity channels
    are expected complete after preprocessing.
    """

    fan_ids: list[str]
    hr: np.ndarray
    sl: np.ndarray
    steps: np.ndarray
    calories: np.ndarray
    motion: np.ndarray
    grid: TimeGrid = field(default_factory=TimeGrid)

    def __post_init__(self) -> None:
        n = len(self.fan_ids)
        shape = (n, self.grid.n_points)
        for name in ("hr", "sl") + AUX_NAMES:
            # canonical C layout: summation order (and thus every downstream
            # statistic) must not depend on where the panel came from
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    @property
    def n_fans(self) -> int:
        return len(self.fan_ids)

    @property
    def sl_missing(self) -> np.ndarray:
        """Boolean mask of missing stress entries."""
        return np.isnan(self.sl)

    @property
    def sl_missing_fraction(self) -> np.ndarray:
        """Per-fan fraction of missing stress entries."""
        return self.sl_missing.mean(axis=1)

    def aux(self, name: str) -> np.ndarray:
        if name not in AUX_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def take(self, indices: np.ndarray) -> "PanelDataset":
        return PanelDataset(
            fan_ids=[self.fan_ids[i] for i in indices],
            hr=self.hr[indices],
            sl=self.sl[indices],
            steps=self.steps[indices],
            calories=self.calories[indices],
            motion=self.motion[indices],
            grid=self.grid,
        )


def filter_fans(raw: PanelDataset) -> PanelDataset:
    """Apply the retention rules: some stress data, and at most 50% missing.

    Fans with no stress records at all are dropped first, then fans
    strictly above 50% missing during the match window. A fan at exactly
    50% is retained.
    """
    frac = raw.sl_missing_fraction
    keep = (frac < 1.0) & (frac <= 0.5)
    if not keep.any():
        raise ValueError("no fans left after missingness filtering")
    return raw.take(np.flatnonzero(keep))


@dataclass(frozen=True)
class ImputationSet:
    """m completed copies of one panel; observed entries are shared."""

    datasets: list[PanelDataset]
    seed: int
    method: str
    iterations: int

    def __post_init__(self) -> None:
        if not self.datasets:
            raise ValueError("empty imputation set")
        for d in self.datasets:
            if np.isnan(d.sl).any():
                raise ValueError("completed dataset still has missing entries")

    @property
    def m(self) -> int:
        return len(self.datasets)


def _design_matrix(sl: np.ndarray, panel: PanelDataset, col: int) -> np.ndarray:
    """Predictors for stress column ``col``.

    A compact conditional model: neighboring stress columns (lags +-1, +-2,
    current working values), the per-half means of the remaining stress
    columns (they carry the shared half intercepts), same-time heart rate
    (the strongest observed correlate of the latent state), and the
    same-time activity channels. Using every other stress column instead
    makes the regression so high-dimensional at panel sizes around 140
    that the coefficient-draw variance visibly inflates the imputed
    values' noise (missing-row leverage above 0.5), which biases the
    downstream stress error variance upward by several standard errors.
    """
    n, T = sl.shape
    boundary = panel.grid.halftime_start - 1  # 0-based start of second half
    features = [np.ones(n)]
    for d in (-2, -1, 1, 2):
        j = col + d
        if 0 <= j < T:
            features.append(sl[:, j])
    first = [c for c in range(boundary) if c != col]
    second = [c for c in range(boundary, T) if c != col]
    for cols in (first, second):
        if cols:
            features.append(sl[:, cols].mean(axis=1))
    features.extend(
        [
            panel.hr[:, col],
            panel.steps[:, col],
            panel.calories[:, col],
            panel.motion[:, col],
        ]
    )
    return np.column_stack(features)


def _draw_linear_model(x_obs, y_obs, rng, warn_state):
    """Bayesian linear-model draw (beta_hat, beta_tilde, sigma_tilde).

    OLS fit with a chi-square draw for the residual variance and a normal
    draw for the coefficients. Ill-conditioned normal equations fall back
    to a ridge (with a warning, once per imputation run).
    """
    n_obs, q = x_obs.shape
    xtx = x_obs.T @ x_obs
    diag = np.diag(xtx).copy()
    diag[diag <= 0] = 1.0
    if n_obs <= q or np.linalg.cond(xtx) > _COND_LIMIT:
        xtx = xtx + _RIDGE * np.diag(diag)
        if not warn_state.get("ridge", False):
            warn_state["ridge"] = True
            warnings.warn(
                "collinear predictor set in chained equations; "
                "falling back to ridge-stabilized regression",
                RuntimeWarning,
                stacklevel=3,
            )
    xty = x_obs.T @ y_obs
    xtx_inv = np.linalg.inv(xtx)
    beta_hat = xtx_inv @ xty
    resid = y_obs - x_obs @ beta_hat
    dof = max(n_obs - q, 1)
    sigma_tilde = float(np.sqrt((resid @ resid) / rng.chisquare(dof)))
    chol = np.linalg.cholesky(0.5 * (xtx_inv + xtx_inv.T))
    beta_tilde = beta_hat + sigma_tilde * (chol @ rng.standard_normal(q))
    return beta_hat, beta_tilde, sigma_tilde


def _impute_chain(
    panel: PanelDataset,
    method: str,
    iters: int,
    rng: np.random.Generator,
    k_donors: int,
    bounds: tuple[float, float],
    warn_state: dict,
) -> np.ndarray:
    miss = panel.sl_missing
    sl = panel.sl.copy()

    cols = [int(c) for c in np.flatnonzero(miss.any(axis=0))]
    for c in cols:
        obs_vals = sl[~miss[:, c], c]
        if obs_vals.size == 0:
            raise ValueError(f"stress column {c + 1} has no observed values")
        sl[miss[:, c], c] = rng.choice(obs_vals, size=int(miss[:, c].sum()))

    for _ in range(iters):
        for c in cols:
            ix_obs = np.flatnonzero(~miss[:, c])
            ix_mis = np.flatnonzero(miss[:, c])
            x = _design_matrix(sl, panel, c)
            beta_hat, beta_tilde, sigma = _draw_linear_model(
                x[ix_obs], sl[ix_obs, c], rng, warn_state
            )
            if method == "normal":
                draws = x[ix_mis] @ beta_tilde + sigma * rng.standard_normal(
                    ix_mis.size
                )
                sl[ix_mis, c] = np.clip(draws, bounds[0], bounds[1])
            else:  # pmm
                pred_obs = x[ix_obs] @ beta_hat
                pred_mis = x[ix_mis] @ beta_tilde
                dist = np.abs(pred_mis[:, None] - pred_obs[None, :])
                k = min(k_donors, ix_obs.size)
                donors = np.argpartition(dist, k - 1, axis=1)[:, :k]
                pick = rng.integers(0, k, size=ix_mis.size)
                chosen = donors[np.arange(ix_mis.size), pick]
                sl[ix_mis, c] = sl[ix_obs[chosen], c]
    return sl


def mice_impute(
    data: PanelDataset,
    m: int = 10,
    method: str = "pmm",
    iters: int = 5,
    seed: int = 0,
    k_donors: int = 5,
    bounds: tuple[float, float] = (0.0, 100.0),
) -> ImputationSet:
    """Produce ``m`` completed copies of ``data`` by chained equations.

    Parameters
    ----------
    data : PanelDataset
        Filtered panel; only the stress matrix may contain NaN.
    m : int
        Number of imputed datasets (independent chains), >= 2.
    method : {"pmm", "normal"}
        Conditional model for the imputation draws.
    iters : int
        Gibbs sweeps per chain.
    seed : int
        Master seed; chains use spawned substreams.
    k_donors : int
        Donor pool size for predictive mean matching.
    bounds : (float, float)
        Winsorization bounds applied to normal-method draws only.
    """
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    if method not in ("pmm", "normal"):
        raise ValueError(f"unknown imputation method {method!r}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if np.isnan(data.hr).any():
        raise ValueError("heart-rate matrix must be complete before imputation")

    warn_state: dict = {}
    if not data.sl_missing.any():
        datasets = [data] * m
        return ImputationSet(datasets=datasets, seed=seed, method=method, iterations=iters)

    streams = np.random.SeedSequence(seed).spawn(m)
    datasets = []
    for chain in range(m):
        rng = np.random.default_rng(streams[chain])
        sl = _impute_chain(data, method, iters, rng, k_donors, bounds, warn_state)
        datasets.append(replace(data, sl=sl))
    return ImputationSet(datasets=datasets, seed=seed, method=method, iterations=iters)
