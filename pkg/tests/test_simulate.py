import numpy as np
import pytest

from fanfever.model import ParameterVector
from fanfever.moments import expected_fever, implied_moments
from fanfever.simulate import (
    BreakInjection,
    MissingnessSpec,
    SimulationConfig,
    empirical_moments,
    mc_standard_errors,
    simulate_panel,
)
from conftest import REFERENCE


def _noise_free_params():
    return ParameterVector(
        **{
            **REFERENCE.as_dict(),
            "theta_HR_init": 0.0, "theta_HR": 0.0, "theta_SL": 0.0,
            "rho_SL": 0.0, "phi_I_SL_init": 0.0, "phi_I_SL_2": 0.0,
            "phi_I_FF": 0.0, "phi_S1": 0.0, "phi_S2": 0.0,
            "phi_IFF_S1": 0.0, "phi_IFF_S2": 0.0, "phi_S1_S2": 0.0,
            "phi_R_init": 0.0, "phi_R": 0.0,
        }
    )


class TestSimulatePanel:
    def test_noise_free_heart_rate_is_expected_fever(self, grid):
        p = _noise_free_params()
        panel = simulate_panel(SimulationConfig(params=p, n_fans=5, seed=1))
        expected = expected_fever(p, grid)
        assert np.allclose(panel.hr, np.tile(expected, (5, 1)), atol=1e-12)

    def test_kickoff_mean_against_reference(self):
        n = 200_000
        panel = simulate_panel(SimulationConfig(n_fans=n, seed=99))
        sd = np.sqrt(247.164 + 24.9)  # fever variance + initial error bump
        mcse = sd / np.sqrt(n)
        assert abs(panel.hr[:, 0].mean() - 89.046) < 3 * mcse

    def test_determinism(self):
        a = simulate_panel(SimulationConfig(n_fans=50, seed=4))
        b = simulate_panel(SimulationConfig(n_fans=50, seed=4))
        assert a.hr.tobytes() == b.hr.tobytes()
        assert a.sl.tobytes() == b.sl.tobytes()
        assert a.motion.tobytes() == b.motion.tobytes()

    def test_different_seeds_differ(self):
        a = simulate_panel(SimulationConfig(n_fans=50, seed=4))
        b = simulate_panel(SimulationConfig(n_fans=50, seed=5))
        assert not np.array_equal(a.hr, b.hr)

    def test_missingness_fraction_and_scope(self):
        cfg = SimulationConfig(
            n_fans=3000, seed=8, missingness=MissingnessSpec(fraction=0.25)
        )
        panel = simulate_panel(cfg)
        assert np.isnan(panel.hr).sum() == 0
        assert np.isnan(panel.steps).sum() == 0
        frac = np.isnan(panel.sl).mean()
        assert 0.22 < frac < 0.28

    def test_missingness_tracks_motion(self):
        # MAR-on-aux: missing cells sit at higher motion intensity
        cfg = SimulationConfig(
            n_fans=3000, seed=8, missingness=MissingnessSpec(fraction=0.25)
        )
        panel = simulate_panel(cfg)
        miss = np.isnan(panel.sl)
        assert panel.motion[miss].mean() > panel.motion[~miss].mean()

    def test_common_break_shift_moves_second_half_mean(self, grid):
        p = _noise_free_params()
        cfg = SimulationConfig(
            params=p, n_fans=4, seed=2,
            break_injection=BreakInjection(mean=5.0),
        )
        panel = simulate_panel(cfg)
        expected = expected_fever(p, grid)
        assert np.allclose(panel.hr[:, :16], np.tile(expected[:16], (4, 1)))
        assert np.allclose(panel.hr[:, 16:], np.tile(expected[16:] + 5.0, (4, 1)))

    def test_level_decorrelation_preserves_marginals(self):
        cfg = SimulationConfig(
            n_fans=150_000, seed=3,
            break_injection=BreakInjection(level_correlation=0.6),
        )
        panel = simulate_panel(cfg)
        plain = simulate_panel(SimulationConfig(n_fans=150_000, seed=3))
        # second-half variance unchanged, cross-half covariance reduced
        v_break = panel.hr[:, 20].var()
        v_plain = plain.hr[:, 20].var()
        assert abs(v_break - v_plain) / v_plain < 0.03
        c_break = np.cov(panel.hr[:, 5], panel.hr[:, 25])[0, 1]
        c_plain = np.cov(plain.hr[:, 5], plain.hr[:, 25])[0, 1]
        assert c_break < 0.85 * c_plain

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            SimulationConfig(n_fans=0)
        with pytest.raises(ValueError):
            MissingnessSpec(fraction=1.0)
        with pytest.raises(ValueError):
            BreakInjection(level_correlation=0.0)


class TestEmpiricalMoments:
    def test_two_pass_oracle(self):
        panel = simulate_panel(SimulationConfig(n_fans=40, seed=10))
        sm = empirical_moments(panel)
        x = np.hstack([panel.hr, panel.sl])
        mean = np.array([x[:, j].sum() / x.shape[0] for j in range(68)])
        cov = np.zeros((68, 68))
        for i in range(x.shape[0]):
            d = x[i] - mean
            cov += np.outer(d, d)
        cov /= x.shape[0]
        assert np.allclose(sm.mean, mean, atol=1e-12)
        assert np.allclose(sm.cov, cov, atol=1e-9)

    def test_single_repeated_row(self):
        panel = simulate_panel(SimulationConfig(n_fans=1, seed=10))
        rep = panel.take(np.array([0, 0, 0]))
        sm = empirical_moments(rep)
        assert np.allclose(sm.cov, 0.0, atol=1e-18)

    def test_dimension(self):
        panel = simulate_panel(SimulationConfig(n_fans=10, seed=1))
        assert empirical_moments(panel).p == 68

    def test_too_small(self):
        panel = simulate_panel(SimulationConfig(n_fans=1, seed=1))
        with pytest.raises(ValueError):
            empirical_moments(panel)

    def test_rejects_missing(self):
        cfg = SimulationConfig(
            n_fans=30, seed=1, missingness=MissingnessSpec(fraction=0.3)
        )
        with pytest.raises(ValueError):
            empirical_moments(simulate_panel(cfg))


def test_moment_agreement_midsize(full_definition):
    # lighter cousin of the acceptance oracle; z exceedances cluster
    # because the 2414 moments share the same draw, so this asserts a
    # robust envelope rather than the tight acceptance fraction
    n = 50_000
    panel = simulate_panel(SimulationConfig(n_fans=n, seed=42))
    sm = empirical_moments(panel)
    mom = implied_moments(REFERENCE, full_definition)
    se_mean, se_cov = mc_standard_errors(mom, n)
    z_mean = (sm.mean - mom.mean) / se_mean
    iu = np.triu_indices(68)
    z_cov = ((sm.cov - mom.cov) / se_cov)[iu]
    z = np.concatenate([z_mean, z_cov])
    assert (np.abs(z) < 3).mean() >= 0.95
    assert np.abs(z).max() < 6.0
