"""Pooling of estimates, tests, and fit statistics across imputations.

Point estimates pool as arithmetic means (Rubin's rules); squared pooled
standard errors combine the within-imputation variance W with the
between-imputation variance B as T = W + (1 + 1/m) B. Per-parameter
degrees of freedom use the Barnard-Rubin (1999) small-sample formula with
complete-data df n - 1; the degenerate B = 0 case short-circuits to an
infinite-df (normal) reference so it reproduces the single-fit test
exactly.

Chi-square tests pool by likelihood-based combination in the style
recommended by Chan & Meng (2022): per-imputation deviances are
re-evaluated at the pooled parameter estimates against the pooled
saturated moments ("d4", the default), with the classic Li-Meng-
Raghunathan-Rubin statistic combination ("d2") available as an
alternative. The chi-square VALUE reported in fit tables is the
arithmetic mean of the per-imputation statistics — the same pooling AIC
and SRMR get — because the calibrated combination statistic lives on an
F scale, not a chi-square scale; see :class:`PooledChi2`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .estimation import (
    FitResult,
    SampleMoments,
    discrepancy_from_moments,
    ml_discrepancy,
)
from .fitstats import FitReport, _cfi, _rmsea, aic, srmr, yuan_correction
from .moments import implied_moments_for

__all__ = [
    "PooledParameter",
    "PooledResult",
    "pool_estimates",
    "PooledChi2",
    "pool_chi2",
    "pool_fit_statistics",
]


@dataclass(frozen=True)
class PooledParameter:
    name: str
    estimate: float
    se: float
    within: float
    between: float
    total: float
    df: float
    t: float
    p: float

    def significant_at(self, alpha: float = 0.05) -> bool:
        return np.isfinite(self.p) and self.p < alpha

    def significant_bonferroni(self, alpha: float = 0.05, k: int = 20) -> bool:
        return np.isfinite(self.p) and self.p < alpha / k


@dataclass(frozen=True)
class PooledResult:
    parameters: dict[str, PooledParameter]
    m: int
    n: int
    variant: str
    fixed: dict[str, float]
    warnings: tuple[str, ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.parameters)

    def estimates(self) -> np.ndarray:
        return np.array([p.estimate for p in self.parameters.values()])

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "variant": self.variant,
            "fixed": dict(self.fixed),
            "parameters": {
                name: {
                    "estimate": p.estimate,
                    "se": p.se,
                    "within": p.within,
                    "between": p.between,
                    "total": p.total,
                    "df": p.df,
                    "t": p.t,
                    "p": p.p,
                }
                for name, p in self.parameters.items()
            },
            "warnings": list(self.warnings),
        }


def _barnard_rubin_df(lam: float, m: int, n_complete: int) -> float:
    nu_com = n_complete - 1
    nu_obs = (nu_com + 1.0) / (nu_com + 3.0) * nu_com * (1.0 - lam)
    if lam <= 0:
        return float("inf")
    nu_old = (m - 1.0) / lam**2
    return nu_old * nu_obs / (nu_old + nu_obs)


def pool_estimates(fits: list[FitResult]) -> PooledResult:
    """Rubin's rules over converged fits of the same model."""
    if not fits:
        raise ValueError("no fits to pool")
    failed = [i for i, f in enumerate(fits) if not f.converged]
    if failed:
        raise ValueError(
            "cannot pool non-converged fits; failed imputations (0-based): "
            f"{failed}"
        )
    free = fits[0].free_names
    variant = fits[0].definition.variant.value
    n = fits[0].n
    for f in fits[1:]:
        if f.free_names != free or f.definition != fits[0].definition or f.n != n:
            raise ValueError("fits being pooled are not of the same model/data")
    m = len(fits)

    est = np.array([[f.estimate(name) for name in free] for f in fits])
    if any(f.se is None for f in fits):
        raise ValueError("all fits must carry standard errors before pooling")
    u = np.array([np.asarray(f.se, dtype=float) ** 2 for f in fits])

    qbar = est.mean(axis=0)
    if m > 1:
        b = est.var(axis=0, ddof=1)
    else:
        warnings.warn(
            "pooling a single fit; between-imputation variance is zero",
            RuntimeWarning,
            stacklevel=2,
        )
        b = np.zeros_like(qbar)
    w = u.mean(axis=0)
    total = w + (1.0 + 1.0 / m) * b
    se = np.sqrt(total)

    notes: list[str] = []
    params: dict[str, PooledParameter] = {}
    for j, name in enumerate(free):
        if not np.isfinite(total[j]):
            notes.append(f"non-finite pooled variance for {name}")
        if np.isfinite(b[j]) and np.isfinite(w[j]) and b[j] > 0 and w[j] >= 0:
            if np.sqrt(b[j]) > 5.0 * np.sqrt(max(w[j], 1e-300)):
                notes.append(
                    f"between-imputation SD of {name} exceeds 5x its within-SE; "
                    "possible alignment or convergence anomaly"
                )
        if se[j] > 0 and np.isfinite(se[j]):
            lam = (1.0 + 1.0 / m) * b[j] / total[j]
            df = _barnard_rubin_df(lam, m, n) if m > 1 else float("inf")
            tval = qbar[j] / se[j]
            p = 1.0 if qbar[j] == 0 else 2.0 * float(stats.t.sf(abs(tval), df))
        else:
            df, tval, p = float("nan"), float("nan"), float("nan")
        params[name] = PooledParameter(
            name=name,
            estimate=float(qbar[j]),
            se=float(se[j]),
            within=float(w[j]),
            between=float(b[j]),
            total=float(total[j]),
            df=float(df),
            t=float(tval),
            p=float(p),
        )
    return PooledResult(
        parameters=params,
        m=m,
        n=n,
        variant=variant,
        fixed=dict(fits[0].fixed),
        warnings=tuple(notes),
    )


@dataclass(frozen=True)
class PooledChi2:
    """Pooled chi-square value plus the calibrated test.

    ``chi2`` is the reporting-scale value: the arithmetic mean of the
    per-imputation chi-squares, the same pooling the fit table applies to
    AIC and SRMR, and the scale on which corrected RMSEA/CFI are defined.
    ``statistic``/``p`` carry the likelihood-based combination test (an F
    statistic whose (1 + r) calibration absorbs between-imputation
    information loss); the two deliberately differ whenever imputations
    disagree, because the calibrated test statistic is not a chi-square
    scale quantity.
    """

    chi2: float
    statistic: float
    df: int
    df_denominator: float
    p: float
    method: str
    r: float


def _d_reference_df(k: int, m: int, r: float) -> float:
    if r <= 0:
        return float("inf")
    t = k * (m - 1)
    if t > 4:
        return 4.0 + (t - 4.0) * (1.0 + (1.0 - 2.0 / t) / r) ** 2
    return 0.5 * t * (1.0 + 1.0 / k) * (1.0 + 1.0 / r) ** 2


def _pooled_params(fits: list[FitResult]):
    """Arithmetic mean of all parameters (fixed ones are shared anyway)."""
    ptype = type(fits[0].params)
    names = fits[0].params.as_dict().keys()
    values = {
        name: float(np.mean([f.estimate(name) for f in fits])) for name in names
    }
    return ptype(**values)


def pool_chi2(
    fits: list[FitResult],
    samples: list[SampleMoments] | None = None,
    method: str = "d4",
) -> PooledChi2:
    """Combine per-imputation chi-square statistics into one value.

    ``d4`` (default) evaluates each imputation's deviance at the pooled
    parameter estimates against the pooled saturated moments and applies
    the likelihood-based combination; it requires ``samples``. ``d2``
    combines the per-imputation statistics alone.
    """
    m = len(fits)
    if m == 0:
        raise ValueError("no fits to pool")
    k = fits[0].definition.moment_count - fits[0].n_free
    n = fits[0].n
    d = np.array([f.chi2 for f in fits])
    if m == 1:
        warnings.warn("m=1: chi-square pooling is a pass-through", RuntimeWarning)
        return PooledChi2(
            chi2=float(d[0]),
            statistic=float(d[0]) / k,
            df=k,
            df_denominator=float("inf"),
            p=float(stats.chi2.sf(d[0], k)),
            method=method,
            r=0.0,
        )

    dbar = float(d.mean())
    if method == "d2":
        r = float((1.0 + 1.0 / m) * np.var(np.sqrt(d), ddof=1))
        stat = (dbar / k - (m + 1.0) / (m - 1.0) * r) / (1.0 + r)
        nu = k ** (-3.0 / m) * (m - 1.0) * (1.0 + 1.0 / r) ** 2 if r > 0 else float("inf")
        p = float(stats.f.sf(stat, k, nu)) if np.isfinite(nu) else float(
            stats.chi2.sf(max(stat, 0.0) * k, k)
        )
        return PooledChi2(
            chi2=dbar,
            statistic=float(stat),
            df=k,
            df_denominator=float(nu),
            p=p,
            method="d2",
            r=r,
        )

    if method != "d4":
        raise ValueError(f"unknown pooling method {method!r}")
    if samples is None or len(samples) != m:
        raise ValueError("d4 pooling needs one SampleMoments per fit")

    theta_bar = _pooled_params(fits)
    definition = fits[0].definition
    mean_bar = np.mean([s.mean for s in samples], axis=0)
    cov_bar = np.mean([s.cov for s in samples], axis=0)
    d_tilde = np.empty(m)
    for j, s in enumerate(samples):
        f_model = ml_discrepancy(theta_bar, definition, s, check=False)
        f_sat = discrepancy_from_moments(mean_bar, cov_bar, s)
        d_tilde[j] = (n - 1) * (f_model - f_sat)
    dtil = float(d_tilde.mean())
    r = max((m + 1.0) / (k * (m - 1.0)) * (dbar - dtil), 0.0)
    stat = dtil / (k * (1.0 + r))
    nu = _d_reference_df(k, m, r)
    p = float(stats.f.sf(stat, k, nu)) if np.isfinite(nu) else float(
        stats.chi2.sf(stat * k, k)
    )
    return PooledChi2(
        chi2=dbar,
        statistic=float(stat),
        df=k,
        df_denominator=float(nu),
        p=p,
        method="d4",
        r=float(r),
    )


def pool_fit_statistics(
    full_fits: list[FitResult],
    baseline_fits: list[FitResult],
    samples: list[SampleMoments],
    method: str = "d4",
) -> FitReport:
    """Pooled fit report across imputations (full model vs baseline null).

    Chi-squares pool by ``method``; AIC and SRMR pool as arithmetic means;
    degrees of freedom are untouched by pooling. Corrected indices are
    computed from the pooled statistics.
    """
    if not (len(full_fits) == len(baseline_fits) == len(samples)):
        raise ValueError("need one full fit, baseline fit, and sample per imputation")
    n = samples[0].n
    p = samples[0].p
    q = full_fits[0].n_free
    q_b = baseline_fits[0].n_free
    df = full_fits[0].definition.moment_count - q
    df_b = baseline_fits[0].definition.moment_count - q_b

    pooled_full = pool_chi2(full_fits, samples, method=method)
    pooled_base = pool_chi2(baseline_fits, samples, method=method)

    aics = [aic(f) for f in full_fits]
    srmrs = [
        srmr(implied_moments_for(f.params, f.definition, check=False), s)
        for f, s in zip(full_fits, samples)
    ]
    chi2_c = yuan_correction(pooled_full.chi2, n, p, q, df)
    chi2_bc = yuan_correction(pooled_base.chi2, n, p, q_b, df_b)

    return FitReport(
        n=n,
        p=p,
        q=q,
        df=df,
        chi2_raw=pooled_full.chi2,
        chi2_corrected=chi2_c,
        aic=float(np.mean(aics)),
        srmr=float(np.mean(srmrs)),
        rmsea_corrected=_rmsea(chi2_c, df, n),
        cfi_corrected=_cfi(chi2_c, df, chi2_bc, df_b),
        baseline_q=q_b,
        baseline_df=df_b,
        baseline_chi2_raw=pooled_base.chi2,
        baseline_chi2_corrected=chi2_bc,
        chi2_p=pooled_full.p,
        flags=(),
    )
