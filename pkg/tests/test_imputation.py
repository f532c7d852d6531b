import numpy as np
import pytest

from fanfever.imputation import (
    ImputationSet,
    PanelDataset,
    filter_fans,
    mice_impute,
)
from fanfever.model import TimeGrid
from fanfever.simulate import MissingnessSpec, SimulationConfig, simulate_panel


def _panel_with_pattern(n_complete=137, n_empty=8, n_heavy=49, seed=0):
    """Panel shaped like the retention example: some fans with no stress
    records, some beyond the 50% threshold, the rest acceptable."""
    rng = np.random.default_rng(seed)
    n = n_complete + n_empty + n_heavy
    grid = TimeGrid()
    hr = rng.normal(90, 10, size=(n, 34))
    sl = rng.uniform(20, 90, size=(n, 34))
    # heavies: 18 of 34 missing (> 50%)
    for i in range(n_complete, n_complete + n_heavy):
        cols = rng.choice(34, size=18, replace=False)
        sl[i, cols] = np.nan
    for i in range(n_complete + n_heavy, n):
        sl[i, :] = np.nan
    aux = {k: rng.normal(10, 2, size=(n, 34)) for k in ("steps", "calories", "motion")}
    return PanelDataset(
        fan_ids=[f"f{i}" for i in range(n)],
        hr=hr, sl=sl, grid=grid, **aux,
    )


class TestFilterFans:
    def test_retention_counts(self):
        panel = _panel_with_pattern()
        kept = filter_fans(panel)
        assert panel.n_fans == 194
        assert kept.n_fans == 137

    def test_exactly_half_missing_retained(self):
        panel = _panel_with_pattern(n_complete=3, n_empty=0, n_heavy=0)
        sl = panel.sl.copy()
        sl[0, :17] = np.nan  # exactly 50%
        panel2 = PanelDataset(
            fan_ids=panel.fan_ids, hr=panel.hr, sl=sl,
            steps=panel.steps, calories=panel.calories, motion=panel.motion,
            grid=panel.grid,
        )
        kept = filter_fans(panel2)
        assert kept.n_fans == 3

    def test_fully_observed_unchanged(self):
        panel = _panel_with_pattern(n_complete=5, n_empty=2, n_heavy=1)
        kept = filter_fans(panel)
        assert kept.n_fans == 5
        assert np.array_equal(kept.hr, panel.hr[:5])
        assert np.array_equal(kept.sl, panel.sl[:5])

    def test_empty_result_rejected(self):
        panel = _panel_with_pattern(n_complete=0, n_empty=3, n_heavy=2)
        with pytest.raises(ValueError):
            filter_fans(panel)


@pytest.fixture(scope="module")
def mar_panel():
    cfg = SimulationConfig(
        n_fans=120, seed=33, missingness=MissingnessSpec(fraction=0.25)
    )
    return filter_fans(simulate_panel(cfg))


class TestMiceImpute:
    def test_no_missing_returns_identical_copies(self):
        panel = simulate_panel(SimulationConfig(n_fans=20, seed=1))
        imp = mice_impute(panel, m=3, seed=5)
        assert imp.m == 3
        for d in imp.datasets:
            assert np.array_equal(d.sl, panel.sl)

    def test_determinism(self, mar_panel):
        a = mice_impute(mar_panel, m=3, method="pmm", iters=3, seed=9)
        b = mice_impute(mar_panel, m=3, method="pmm", iters=3, seed=9)
        for da, db in zip(a.datasets, b.datasets):
            assert da.sl.tobytes() == db.sl.tobytes()

    def test_chains_differ(self, mar_panel):
        imp = mice_impute(mar_panel, m=3, method="pmm", iters=3, seed=9)
        assert not np.array_equal(imp.datasets[0].sl, imp.datasets[1].sl)

    def test_observed_entries_preserved(self, mar_panel):
        imp = mice_impute(mar_panel, m=3, method="normal", iters=3, seed=9)
        obs = ~mar_panel.sl_missing
        for d in imp.datasets:
            assert np.array_equal(d.sl[obs], mar_panel.sl[obs])
            assert not np.isnan(d.sl).any()

    def test_pmm_copies_observed_donors(self, mar_panel):
        imp = mice_impute(mar_panel, m=2, method="pmm", iters=3, seed=9)
        miss = mar_panel.sl_missing
        for d in imp.datasets:
            for c in range(34):
                if not miss[:, c].any():
                    continue
                observed = set(mar_panel.sl[~miss[:, c], c])
                imputed = d.sl[miss[:, c], c]
                assert all(v in observed for v in imputed)

    def test_normal_draws_winsorized(self, mar_panel):
        imp = mice_impute(mar_panel, m=2, method="normal", iters=3, seed=9)
        miss = mar_panel.sl_missing
        for d in imp.datasets:
            vals = d.sl[miss]
            assert vals.min() >= 0.0
            assert vals.max() <= 100.0

    def test_custom_bounds(self, mar_panel):
        imp = mice_impute(
            mar_panel, m=2, method="normal", iters=2, seed=9,
            bounds=(-1e9, 1e9),
        )
        assert not np.isnan(imp.datasets[0].sl).any()

    def test_m_below_two_rejected(self, mar_panel):
        with pytest.raises(ValueError):
            mice_impute(mar_panel, m=1, seed=1)

    def test_unknown_method_rejected(self, mar_panel):
        with pytest.raises(ValueError):
            mice_impute(mar_panel, m=2, method="forest", seed=1)

    def test_all_missing_column_rejected(self):
        panel = simulate_panel(SimulationConfig(n_fans=30, seed=2))
        sl = panel.sl.copy()
        sl[:, 5] = np.nan
        broken = PanelDataset(
            fan_ids=panel.fan_ids, hr=panel.hr, sl=sl,
            steps=panel.steps, calories=panel.calories, motion=panel.motion,
            grid=panel.grid,
        )
        with pytest.raises(ValueError, match="no observed values"):
            mice_impute(broken, m=2, seed=1)

    def test_collinear_predictors_trigger_ridge_warning(self):
        panel = simulate_panel(
            SimulationConfig(
                n_fans=40, seed=3, missingness=MissingnessSpec(fraction=0.2)
            )
        )
        degenerate = PanelDataset(
            fan_ids=panel.fan_ids, hr=panel.hr, sl=panel.sl,
            steps=panel.motion.copy(), calories=panel.motion.copy(),
            motion=panel.motion, grid=panel.grid,
        )
        with pytest.warns(RuntimeWarning, match="ridge"):
            mice_impute(filter_fans(degenerate), m=2, iters=2, seed=4)

    def test_incomplete_heart_rate_rejected(self, mar_panel):
        hr = mar_panel.hr.copy()
        hr[0, 0] = np.nan
        broken = PanelDataset(
            fan_ids=mar_panel.fan_ids, hr=hr, sl=mar_panel.sl,
            steps=mar_panel.steps, calories=mar_panel.calories,
            motion=mar_panel.motion, grid=mar_panel.grid,
        )
        with pytest.raises(ValueError, match="heart"):
            mice_impute(broken, m=2, seed=1)

    def test_completed_set_invariant(self, mar_panel):
        imp = mice_impute(mar_panel, m=2, iters=2, seed=9)
        with pytest.raises(ValueError):
            ImputationSet(
                datasets=[mar_panel], seed=0, method="pmm", iterations=1
            )
        assert imp.iterations == 2

    def test_downstream_estimates_track_complete_data(self, reference_scale_mar_run):
        # imputed-then-pooled estimates stay within 3 pooled SEs of the
        # complete-data estimates for at least 18 of 20 parameters
        pooled = reference_scale_mar_run["pooled"]
        complete = reference_scale_mar_run["complete_fit"]
        n_ok = sum(
            abs(p.estimate - complete.estimate(name)) <= 3 * p.se
            for name, p in pooled.parameters.items()
        )
        assert n_ok >= 18
