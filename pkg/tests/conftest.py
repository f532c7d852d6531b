"""Shared fixtures: reference parameters and session-scoped simulations.

The reference parameter vector is the package's canonical cup-final
estimate set; tests assert frozen numbers against it so a typo in either
place fails loudly. Expensive simulate-and-fit artifacts are session
scoped and reused across test modules.
"""

import numpy as np
import pytest

from fanfever.estimation import fit_model
from fanfever.model import ModelDefinition, TimeGrid, Variant
from fanfever.simulate import (
    DEFAULT_PARAMS,
    SimulationConfig,
    empirical_moments,
    simulate_panel,
)

REFERENCE = DEFAULT_PARAMS


@pytest.fixture(scope="session")
def grid():
    return TimeGrid()


@pytest.fixture(scope="session")
def full_definition():
    return ModelDefinition()


@pytest.fixture(scope="session")
def baseline_definition():
    return ModelDefinition(variant=Variant.TIME_INVARIANT)


@pytest.fixture(scope="session")
def reference():
    return REFERENCE


@pytest.fixture(scope="session")
def sample_5000():
    panel = simulate_panel(SimulationConfig(n_fans=5000, seed=7))
    return empirical_moments(panel)


@pytest.fixture(scope="session")
def fit_5000(full_definition, sample_5000):
    fit = fit_model(full_definition, sample_5000)
    assert fit.converged
    return fit


@pytest.fixture(scope="session")
def sample_137():
    panel = simulate_panel(SimulationConfig(n_fans=137, seed=11))
    return empirical_moments(panel)


@pytest.fixture(scope="session")
def fit_137(full_definition, sample_137):
    fit = fit_model(full_definition, sample_137)
    assert fit.converged
    return fit


@pytest.fixture(scope="session")
def baseline_fit_137(baseline_definition, sample_137):
    fit = fit_model(baseline_definition, sample_137)
    assert fit.converged
    return fit


@pytest.fixture(scope="session")
def reference_scale_mar_run(full_definition, baseline_definition):
    """Shared m=10 pipeline at the reference panel scale: 137 fans, 25% MAR stress.

    The complete (pre-mask) panel shares the seed, so its values coincide
    with the masked panel's observed entries; used both for truth-recovery
    and for the complete-data-estimate comparison.
    """
    from fanfever.imputation import filter_fans, mice_impute
    from fanfever.pooling import pool_estimates
    from fanfever.simulate import MissingnessSpec

    seed = 301
    complete = simulate_panel(SimulationConfig(n_fans=137, seed=seed))
    masked = simulate_panel(
        SimulationConfig(
            n_fans=137, seed=seed, missingness=MissingnessSpec(fraction=0.25)
        )
    )
    panel = filter_fans(masked)
    keep = [i for i, f in enumerate(complete.fan_ids) if f in set(panel.fan_ids)]
    complete = complete.take(np.asarray(keep))
    imp = mice_impute(panel, m=10, method="pmm", iters=5, seed=seed)
    samples = [empirical_moments(d) for d in imp.datasets]
    full_fits = [fit_model(full_definition, s) for s in samples]
    baseline_fits = [fit_model(baseline_definition, s) for s in samples]
    assert all(f.converged for f in full_fits + baseline_fits)
    complete_fit = fit_model(full_definition, empirical_moments(complete))
    assert complete_fit.converged
    return {
        "panel": panel,
        "complete_fit": complete_fit,
        "samples": samples,
        "full_fits": full_fits,
        "baseline_fits": baseline_fits,
        "pooled": pool_estimates(full_fits),
    }


def make_fit_result(params, definition, n=137, f_ml=0.0, se=None, converged=True):
    """Wrap a parameter vector in a FitResult without running the optimizer."""
    from fanfever.estimation import FitResult, SampleMoments, loglikelihood
    from fanfever.moments import implied_moments_for

    names = definition.parameter_names
    if se is None:
        se = np.full(len(names), np.nan)
    mom = implied_moments_for(params, definition, check=False)
    sample = SampleMoments(n=n, mean=mom.mean, cov=mom.cov)
    return FitResult(
        params=params,
        definition=definition,
        n=n,
        loglik=loglikelihood(f_ml, sample),
        f_ml=f_ml,
        converged=converged,
        n_iter=0,
        free_names=tuple(names),
        fixed={},
        se=np.asarray(se, dtype=float),
    )
