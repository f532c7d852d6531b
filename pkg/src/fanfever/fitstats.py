"""Global fit statistics and the residual diagnostic.

Chi-square uses the (n-1) F convention. High-dimensional panels inflate
the chi-square badly when p is large relative to n, so RMSEA and CFI are
reported from the empirically corrected statistic of Yuan, Tian &
Yanagihara (2015, Psychometrika 80), whose correction factor depends on
(n, p, q). The comparative fit index takes the time-invariant baseline
model as its null, not the usual independence model.

SRMR includes the standardized mean residuals (both model variants carry
mean structures); conventions differ across software, so this is stated
here once and used consistently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .estimation import FitResult, SampleMoments
from .moments import ImpliedMoments, implied_moments_for

__all__ = [
    "FitReport",
    "ResidualMatrix",
    "yuan_correction_factor",
    "yuan_correction",
    "srmr",
    "fit_indices",
    "standardized_residuals",
    "average_residuals",
]


def yuan_correction_factor(n: int, p: int, q: int) -> float:
    """Empirical small-sample correction factor c(n, p, q).

    From the simulation-calibrated regression of Yuan, Tian & Yanagihara
    (2015): the chi-square statistic is rescaled by
    ``(n - (2.381 + 0.361 p + 0.006 q)) / (n - 1)``, which approaches 1
    when p << n and shrinks the statistic when p is large relative to n.
    """
    return (n - (2.381 + 0.361 * p + 0.006 * q)) / (n - 1)


def yuan_correction(chi2_raw: float, n: int, p: int, q: int, df: int) -> float:
    """Corrected chi-square; falls back to raw if the factor is nonpositive."""
    if min(chi2_raw, n, p, q, df) < 0:
        raise ValueError("yuan_correction inputs must be nonnegative")
    factor = yuan_correction_factor(n, p, q)
    if factor <= 0:
        warnings.warn(
            f"nonpositive correction factor {factor:.3f} (n={n}, p={p}); "
            "returning the uncorrected statistic",
            RuntimeWarning,
            stacklevel=2,
        )
        return chi2_raw
    return factor * chi2_raw


def _rmsea(chi2: float, df: int, n: int) -> float:
    return float(np.sqrt(max(chi2 - df, 0.0) / (df * (n - 1))))


def _cfi(chi2: float, df: int, chi2_base: float, df_base: int) -> float:
    excess = max(chi2 - df, 0.0)
    denom = max(chi2_base - df_base, chi2 - df, 0.0)
    if denom == 0.0:
        return 1.0
    return 1.0 - excess / denom


def srmr(implied: ImpliedMoments, sample: SampleMoments) -> float:
    """Standardized root mean squared residual, mean structure included.

    Covariance residuals are standardized by the sample standard
    deviations (correlation metric); mean residuals by the sample standard
    deviation. Averages over the p(p+1)/2 unique covariance elements plus
    the p mean elements.
    """
    s = sample.cov
    sd = np.sqrt(np.diag(s))
    if np.any(sd <= 0):
        raise ValueError("sample covariance has a zero-variance variable")
    denom = np.outer(sd, sd)
    res = (s - implied.cov) / denom
    iu = np.triu_indices(s.shape[0])
    mres = (sample.mean - implied.mean) / sd
    total = float(np.sum(res[iu] ** 2) + np.sum(mres**2))
    count = iu[0].size + sd.size
    return float(np.sqrt(total / count))


@dataclass(frozen=True)
class FitReport:
    """Table of global fit measures for one model against its baseline null."""

    n: int
    p: int
    q: int
    df: int
    chi2_raw: float
    chi2_corrected: float
    aic: float
    srmr: float
    rmsea_corrected: float
    cfi_corrected: float
    baseline_q: int
    baseline_df: int
    baseline_chi2_raw: float
    baseline_chi2_corrected: float
    chi2_p: float | None = None
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "pars": self.q,
            "df": self.df,
            "chi2_raw": self.chi2_raw,
            "chi2_corrected": self.chi2_corrected,
            "chi2_p": self.chi2_p,
            "aic": self.aic,
            "srmr": self.srmr,
            "rmsea_corrected": self.rmsea_corrected,
            "cfi_corrected": self.cfi_corrected,
            "baseline_pars": self.baseline_q,
            "baseline_df": self.baseline_df,
            "baseline_chi2_raw": self.baseline_chi2_raw,
            "baseline_chi2_corrected": self.baseline_chi2_corrected,
            "flags": list(self.flags),
        }


def aic(fit: FitResult) -> float:
    """Akaike information criterion, -2 loglik + 2q."""
    return -2.0 * fit.loglik + 2.0 * fit.n_free


def fit_indices(
    fit: FitResult, baseline: FitResult, sample: SampleMoments
) -> FitReport:
    """Assemble the fit report of ``fit`` with ``baseline`` as CFI null.

    Passing the baseline fit as both arguments yields its own report
    (whose CFI is 0 whenever it fits worse than its degrees of freedom).
    """
    if fit.n != sample.n or baseline.n != sample.n:
        raise ValueError("fits and sample disagree on n")
    if not (fit.converged and baseline.converged):
        raise ValueError("fit indices require converged fits")
    p = sample.p
    n = sample.n
    q = fit.n_free
    df = fit.definition.moment_count - q
    q_b = baseline.n_free
    df_b = baseline.definition.moment_count - q_b

    chi2 = fit.chi2
    chi2_b = baseline.chi2
    flags: list[str] = []
    if df_b > df and chi2_b < chi2:
        flags.append("baseline fits better than the model despite being more restrictive")

    chi2_c = yuan_correction(chi2, n, p, q, df)
    chi2_bc = yuan_correction(chi2_b, n, p, q_b, df_b)

    implied = implied_moments_for(fit.params, fit.definition, check=False)
    report = FitReport(
        n=n,
        p=p,
        q=q,
        df=df,
        chi2_raw=chi2,
        chi2_corrected=chi2_c,
        aic=aic(fit),
        srmr=srmr(implied, sample),
        rmsea_corrected=_rmsea(chi2_c, df, n),
        cfi_corrected=_cfi(chi2_c, df, chi2_bc, df_b),
        baseline_q=q_b,
        baseline_df=df_b,
        baseline_chi2_raw=chi2_b,
        baseline_chi2_corrected=chi2_bc,
        chi2_p=float(stats.chi2.sf(chi2_c, df)),
        flags=tuple(flags),
    )
    return report


@dataclass(frozen=True)
class ResidualMatrix:
    """Standardized residual covariances, (s_ij - sigma_ij)/sqrt(s_ii s_jj)."""

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.labels), len(self.labels)):
            raise ValueError("residual matrix shape does not match labels")
        object.__setattr__(self, "values", values)

    def block(self, rows: slice, cols: slice) -> np.ndarray:
        return self.values[rows, cols]


def standardized_residuals(fit: FitResult, sample: SampleMoments) -> ResidualMatrix:
    """Residuals between sample and implied covariances, correlation metric."""
    if not fit.converged:
        raise ValueError("standardized residuals require a converged fit")
    implied = implied_moments_for(fit.params, fit.definition, check=False)
    s = sample.cov
    sd = np.sqrt(np.diag(s))
    if np.any(sd <= 0):
        raise ValueError("sample covariance has a zero-variance variable")
    res = (s - implied.cov) / np.outer(sd, sd)
    return ResidualMatrix(
        values=res, labels=tuple(fit.definition.observed_names)
    )


def average_residuals(matrices: list[ResidualMatrix]) -> ResidualMatrix:
    """Elementwise mean across imputations."""
    if not matrices:
        raise ValueError("no residual matrices to average")
    labels = matrices[0].labels
    for m in matrices:
        if m.labels != labels:
            raise ValueError("residual matrices have inconsistent labels")
    return ResidualMatrix(
        values=np.mean([m.values for m in matrices], axis=0), labels=labels
    )
