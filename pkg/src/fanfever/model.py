"""Model structure: time grid, trend basis, parameter vectors, model variants.

A fan's physiological arousal ("fever") during a match is treated as a
latent variable reflected by two wearable indicators per time point: heart
rate (bpm, the marker indicator, loading fixed to 1) and device stress
level. Fever follows a piecewise-linear trend with fan-specific growth
components (intercept and two slopes with knots at ``knot1`` and ``knot2``)
plus an AR(1) residual process whose disturbance variance restarts at the
second-half kickoff. Stress-level measurement errors carry half-specific
random intercepts with a carry-over coefficient between halves.

Two variants exist:

* the full time-dependent model with 20 free parameters, and
* a time-invariant baseline with 6 free parameters that imposes strict
  temporal measurement invariance: fever is i.i.d. across time points with
  a single mean/variance, loadings, intercepts and error variances shared
  by all time points, and no cross-time structure of any kind.

Note the baseline topology is a reconstruction pinned down by its free
parameter count (6) and degrees of freedom (2408) rather than by an
explicit published path diagram; treat baseline-specific output with that
caveat in mind.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from enum import Enum
from functools import lru_cache

import numpy as np

__all__ = [
    "TimeGrid",
    "ParameterVector",
    "BaselineParameterVector",
    "Variant",
    "ModelDefinition",
    "InvalidParameterError",
    "trend_loadings",
    "trend_basis",
    "parameter_count",
    "degrees_of_freedom",
    "PARAM_NAMES",
    "PARAM_GROUPS",
    "BASELINE_PARAM_NAMES",
    "VARIANCE_PARAMS",
    "BASELINE_VARIANCE_PARAMS",
]

#: relative eigenvalue floor used by every positive-semidefiniteness check
PSD_RTOL = 1e-8


class InvalidParameterError(ValueError):
    """A parameter vector violates its admissibility constraints."""


@dataclass(frozen=True)
class TimeGrid:
    """1-based measurement grid of a match.

    ``n_points`` equidistant bins of ``interval_minutes`` minutes, with the
    second half starting at index ``halftime_start`` and the two trend
    knots at ``knot1`` (decline onset) and ``knot2`` (late-rally onset).
    """

    n_points: int = 34
    halftime_start: int = 17
    knot1: int = 7
    knot2: int = 25
    interval_minutes: int = 3

    def __post_init__(self) -> None:
        if not (1 <= self.knot1 < self.halftime_start <= self.knot2 < self.n_points):
            raise ValueError(
                "invalid grid: need 1 <= knot1 < halftime_start <= knot2 < n_points, "
                f"got knot1={self.knot1}, halftime_start={self.halftime_start}, "
                f"knot2={self.knot2}, n_points={self.n_points}"
            )
        if self.interval_minutes <= 0:
            raise ValueError("interval_minutes must be positive")

    @property
    def time_points(self) -> np.ndarray:
        """1-based time indices ``1..n_points``."""
        return np.arange(1, self.n_points + 1)

    @property
    def first_half(self) -> np.ndarray:
        """Boolean mask over time points belonging to the first half."""
        return self.time_points < self.halftime_start

    @property
    def second_half(self) -> np.ndarray:
        return ~self.first_half

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TimeGrid":
        return cls(**d)


def trend_loadings(grid: TimeGrid, t: int) -> tuple[float, float, float]:
    """Loadings of the three growth components on fever at time ``t``.

    Returns ``(a0, a1, a2)`` with ``a0 = 1`` always; ``a1`` ramps linearly
    from 0 after ``knot1`` and is capped at ``knot2 - knot1`` beyond
    ``knot2``; ``a2`` ramps linearly from 0 after ``knot2``. Continuous in
    ``t`` at both knots.
    """
    if not 1 <= t <= grid.n_points:
        raise IndexError(f"time index {t} outside 1..{grid.n_points}")
    if t <= grid.knot1:
        a1 = 0.0
    elif t <= grid.knot2:
        a1 = float(t - grid.knot1)
    else:
        a1 = float(grid.knot2 - grid.knot1)
    a2 = float(t - grid.knot2) if t > grid.knot2 else 0.0
    return (1.0, a1, a2)


@lru_cache(maxsize=16)
def _trend_basis_cached(grid: TimeGrid) -> np.ndarray:
    basis = np.array([trend_loadings(grid, int(t)) for t in grid.time_points])
    basis.setflags(write=False)
    return basis


def trend_basis(grid: TimeGrid) -> np.ndarray:
    """(n_points, 3) matrix whose row t-1 is ``trend_loadings(grid, t)``.

    Cached per grid (hot path of every moment assembly); the returned
    array is read-only.
    """
    return _trend_basis_cached(grid)


# Free parameters of the time-dependent model, in reporting order.
PARAM_NAMES: tuple[str, ...] = (
    "lambda_SL",
    "mu_SL",
    "theta_HR_init",
    "theta_HR",
    "theta_SL",
    "rho_SL",
    "phi_I_SL_init",
    "phi_I_SL_2",
    "mu_I_FF",
    "mu_S1",
    "mu_S2",
    "phi_I_FF",
    "phi_S1",
    "phi_S2",
    "phi_IFF_S1",
    "phi_IFF_S2",
    "phi_S1_S2",
    "rho",
    "phi_R_init",
    "phi_R",
)

PARAM_GROUPS: dict[str, str] = {
    "lambda_SL": "icm",
    "mu_SL": "icm",
    "theta_HR_init": "measurement_error",
    "theta_HR": "measurement_error",
    "theta_SL": "measurement_error",
    "rho_SL": "measurement_error",
    "phi_I_SL_init": "measurement_error",
    "phi_I_SL_2": "measurement_error",
    "mu_I_FF": "trend",
    "mu_S1": "trend",
    "mu_S2": "trend",
    "phi_I_FF": "trend",
    "phi_S1": "trend",
    "phi_S2": "trend",
    "phi_IFF_S1": "trend",
    "phi_IFF_S2": "trend",
    "phi_S1_S2": "trend",
    "rho": "ar",
    "phi_R_init": "ar",
    "phi_R": "ar",
}

VARIANCE_PARAMS: frozenset = frozenset(
    {
        "theta_HR_init",
        "theta_HR",
        "theta_SL",
        "phi_I_SL_init",
        "phi_I_SL_2",
        "phi_I_FF",
        "phi_S1",
        "phi_S2",
        "phi_R_init",
        "phi_R",
    }
)

BASELINE_PARAM_NAMES: tuple[str, ...] = (
    "lambda_SL",
    "mu_SL",
    "theta_HR",
    "theta_SL",
    "mu_FF",
    "phi_FF",
)

BASELINE_VARIANCE_PARAMS: frozenset = frozenset({"theta_HR", "theta_SL", "phi_FF"})


@dataclass(frozen=True)
class ParameterVector:
    """The 20 free parameters of the time-dependent model.

    The heart-rate loading is fixed to 1 (marker indicator) and is not a
    field. Variance fields must be nonnegative and ``|rho| < 1`` so the
    AR carry-over decays geometrically; both are enforced on construction.
    The joint positive-semidefiniteness of the 3x3 growth-component
    covariance is checked by :meth:`validate` (reporting-time check, so
    unconstrained optimizer iterates remain constructible).
    """

    lambda_SL: float
    mu_SL: float
    theta_HR_init: float
    theta_HR: float
    theta_SL: float
    rho_SL: float
    phi_I_SL_init: float
    phi_I_SL_2: float
    mu_I_FF: float
    mu_S1: float
    mu_S2: float
    phi_I_FF: float
    phi_S1: float
    phi_S2: float
    phi_IFF_S1: float
    phi_IFF_S2: float
    phi_S1_S2: float
    rho: float
    phi_R_init: float
    phi_R: float

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise InvalidParameterError(f"{f.name} is not finite: {v!r}")
        for name in VARIANCE_PARAMS:
            if getattr(self, name) < 0:
                raise InvalidParameterError(
                    f"variance {name} must be >= 0, got {getattr(self, name)}"
                )
        if not abs(self.rho) < 1:
            raise InvalidParameterError(f"|rho| must be < 1, got {self.rho}")

    @property
    def trend_covariance(self) -> np.ndarray:
        """3x3 covariance matrix of (I_FF, S1, S2)."""
        return np.array(
            [
                [self.phi_I_FF, self.phi_IFF_S1, self.phi_IFF_S2],
                [self.phi_IFF_S1, self.phi_S1, self.phi_S1_S2],
                [self.phi_IFF_S2, self.phi_S1_S2, self.phi_S2],
            ]
        )

    def validate(self) -> "ParameterVector":
        """Full admissibility check; returns self so calls can chain."""
        phi = self.trend_covariance
        eigmin = float(np.linalg.eigvalsh(phi)[0])
        floor = -PSD_RTOL * max(float(np.trace(phi)), 1.0)
        if eigmin < floor:
            raise InvalidParameterError(
                f"growth-component covariance not PSD (min eigenvalue {eigmin:.3e})"
            )
        return self

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_NAMES),):
            raise ValueError(f"expected {len(PARAM_NAMES)} values, got {values.shape}")
        return cls(**dict(zip(PARAM_NAMES, values)))

    def as_dict(self) -> dict:
        return {n: float(getattr(self, n)) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterVector":
        return cls(**{n: float(d[n]) for n in PARAM_NAMES})


@dataclass(frozen=True)
class BaselineParameterVector:
    """The 6 free parameters of the time-invariant baseline model."""

    lambda_SL: float
    mu_SL: float
    theta_HR: float
    theta_SL: float
    mu_FF: float
    phi_FF: float

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise InvalidParameterError(f"{f.name} is not finite: {v!r}")
        for name in BASELINE_VARIANCE_PARAMS:
            if getattr(self, name) < 0:
                raise InvalidParameterError(
                    f"variance {name} must be >= 0, got {getattr(self, name)}"
                )

    def validate(self) -> "BaselineParameterVector":
        return self

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in BASELINE_PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "BaselineParameterVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(BASELINE_PARAM_NAMES),):
            raise ValueError(
                f"expected {len(BASELINE_PARAM_NAMES)} values, got {values.shape}"
            )
        return cls(**dict(zip(BASELINE_PARAM_NAMES, values)))

    def as_dict(self) -> dict:
        return {n: float(getattr(self, n)) for n in BASELINE_PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineParameterVector":
        return cls(**{n: float(d[n]) for n in BASELINE_PARAM_NAMES})


class Variant(str, Enum):
    """Model variant selector."""

    TIME_DEPENDENT = "time_dependent"
    TIME_INVARIANT = "time_invariant"


@dataclass(frozen=True)
class ModelDefinition:
    """Immutable model description consumed by all downstream modules.

    Observed variables are laid out as the heart-rate block ``HR_1..HR_T``
    followed by the stress-level block ``SL_1..SL_T``; every matrix and
    file format in the package uses this order.
    """

    grid: TimeGrid = TimeGrid()
    variant: Variant = Variant.TIME_DEPENDENT

    @property
    def n_observed(self) -> int:
        return 2 * self.grid.n_points

    @property
    def moment_count(self) -> int:
        p = self.n_observed
        return p * (p + 3) // 2

    @property
    def observed_names(self) -> list[str]:
        t = range(1, self.grid.n_points + 1)
        return [f"HR_{i}" for i in t] + [f"SL_{i}" for i in t]

    @property
    def parameter_names(self) -> tuple[str, ...]:
        if self.variant is Variant.TIME_DEPENDENT:
            return PARAM_NAMES
        return BASELINE_PARAM_NAMES

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "variant": self.variant.value}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDefinition":
        return cls(grid=TimeGrid.from_dict(d["grid"]), variant=Variant(d["variant"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelDefinition":
        return cls.from_dict(json.loads(s))


def parameter_count(definition: ModelDefinition) -> int:
    """Number of free parameters of the variant (20 full, 6 baseline)."""
    return len(definition.parameter_names)


def degrees_of_freedom(definition: ModelDefinition) -> int:
    """Moment count minus free-parameter count."""
    return definition.moment_count - parameter_count(definition)
