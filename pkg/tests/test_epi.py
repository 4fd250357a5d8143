import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icucast.epi import (
    CompartmentState,
    ContactRateSeries,
    EpidemicParams,
    IntegrationError,
    InvalidParameterError,
    daily_admission_prior,
    integrate_euler,
    seihr_derivatives,
)

# Reference parameter set used throughout: R0 ~ 3 epidemic in a population of 1000.
REF_PARAMS = EpidemicParams(alpha=0.2, gamma=0.1, eta=0.3, population_c=1000.0)
REF_STATE = CompartmentState(s=990.0, e=5.0, i=5.0, h=0.0, r=0.0)
REF_BETA = 3e-4


def reference_trajectory(state, beta_const, params, days, dt=1e-3):
    """Independent fine-step integrator (plain forward Euler, no clamping)."""
    n = int(round(days / dt))
    y = np.array([state.s, state.e, state.i, state.h, state.r], dtype=float)
    out = np.empty((n + 1, 5))
    out[0] = y
    for k in range(n):
        s, e, i, h, r = y
        inf = beta_const * s * i
        ex = params.gamma * i
        y = y + dt * np.array(
            [
                -inf,
                inf - params.alpha * e,
                params.alpha * e - ex,
                params.eta * ex,
                (1 - params.eta) * ex,
            ]
        )
        out[k + 1] = y
    return out


class TestDerivatives:
    def test_zero_beta_kills_transmission(self):
        d = seihr_derivatives(REF_STATE, 0.0, REF_PARAMS)
        a, g, eta = REF_PARAMS.alpha, REF_PARAMS.gamma, REF_PARAMS.eta
        expected = np.array(
            [0.0, -a * 5.0, a * 5.0 - g * 5.0, eta * g * 5.0, (1 - eta) * g * 5.0]
        )
        np.testing.assert_allclose(d, expected, rtol=0, atol=0)

    def test_disease_free_equilibrium(self):
        state = CompartmentState(s=1000.0, e=0.0, i=0.0, h=0.0, r=0.0)
        d = seihr_derivatives(state, 0.5, REF_PARAMS)
        assert np.all(d == 0.0)

    def test_reference_point_substitution(self):
        # Hand-computed: infections = 3e-4*990*5 = 1.485, exits = 0.1*5 = 0.5
        d = seihr_derivatives(REF_STATE, REF_BETA, REF_PARAMS)
        np.testing.assert_allclose(d, [-1.485, 0.485, 0.5, 0.15, 0.35], rtol=1e-12)

    def test_components_sum_to_zero(self):
        d = seihr_derivatives(REF_STATE, REF_BETA, REF_PARAMS)
        assert abs(d.sum()) < 1e-12

    def test_negative_beta_rejected(self):
        with pytest.raises(InvalidParameterError):
            seihr_derivatives(REF_STATE, -0.1, REF_PARAMS)

    def test_malformed_state_rejected(self):
        with pytest.raises(InvalidParameterError):
            CompartmentState(s=-1.0, e=0.0, i=0.0, h=0.0, r=0.0)
        with pytest.raises(InvalidParameterError):
            EpidemicParams(alpha=0.2, gamma=0.1, eta=1.5, population_c=100.0)


class TestIntegration:
    def test_zero_beta_disease_free_is_constant(self):
        state = CompartmentState(s=900.0, e=0.0, i=0.0, h=60.0, r=40.0)
        beta = ContactRateSeries(np.zeros(40), dt=0.25)
        traj = integrate_euler(state, beta, REF_PARAMS, horizon_days=10)
        np.testing.assert_array_equal(traj.states, np.tile(state.as_array(), (41, 1)))

    def test_single_step_matches_definition(self):
        beta = ContactRateSeries(np.array([REF_BETA]), dt=1.0)
        traj = integrate_euler(REF_STATE, beta, REF_PARAMS, horizon_days=1)
        expected = REF_STATE.as_array() + 1.0 * seihr_derivatives(
            REF_STATE, REF_BETA, REF_PARAMS
        )
        np.testing.assert_allclose(traj.states[1], expected, rtol=1e-14)

    def test_matches_fine_step_reference_within_one_percent(self):
        days = 60
        beta = ContactRateSeries(np.full(days * 4, REF_BETA), dt=0.25)
        traj = integrate_euler(REF_STATE, beta, REF_PARAMS, horizon_days=days)
        ref = reference_trajectory(REF_STATE, REF_BETA, REF_PARAMS, days)
        h60 = traj.states[-1, 3]
        h60_ref = ref[-1, 3]
        assert abs(h60 - h60_ref) / h60_ref <= 0.01

    def test_halving_dt_nearly_halves_error(self):
        days = 60
        ref = reference_trajectory(REF_STATE, REF_BETA, REF_PARAMS, days)

        def max_err(dt):
            spd = int(round(1 / dt))
            beta = ContactRateSeries(np.full(days * spd, REF_BETA), dt=dt)
            traj = integrate_euler(REF_STATE, beta, REF_PARAMS, horizon_days=days)
            ref_days = ref[:: int(round(1 / 1e-3)), :]
            coarse_days = traj.states[:: spd, :]
            return np.abs(coarse_days - ref_days).max()

        assert max_err(0.25) / max_err(0.125) >= 1.8

    def test_beta_series_too_short(self):
        beta = ContactRateSeries(np.zeros(10), dt=0.25)
        with pytest.raises(IntegrationError, match="too short"):
            integrate_euler(REF_STATE, beta, REF_PARAMS, horizon_days=5)

    def test_h_and_r_nondecreasing_without_clamping(self):
        beta = ContactRateSeries(np.full(240, REF_BETA), dt=0.25)
        traj = integrate_euler(REF_STATE, beta, REF_PARAMS, horizon_days=60)
        assert not traj.clamped.any()
        assert np.all(np.diff(traj.states[:, 3]) >= 0)
        assert np.all(np.diff(traj.states[:, 4]) >= 0)

    @settings(max_examples=40, deadline=None)
    @given(
        beta_scale=st.floats(0.0, 8.0),
        alpha=st.floats(0.05, 1.0),
        gamma=st.floats(0.05, 1.0),
        eta=st.floats(0.0, 1.0),
        seed_frac=st.floats(1e-4, 0.05),
    )
    def test_conservation_property(self, beta_scale, alpha, gamma, eta, seed_frac):
        c = 50_000.0
        params = EpidemicParams(alpha=alpha, gamma=gamma, eta=eta, population_c=c)
        seed = seed_frac * c
        state = CompartmentState(s=c - 2 * seed, e=seed, i=seed, h=0.0, r=0.0)
        beta = ContactRateSeries(np.full(30 * 4, beta_scale / c), dt=0.25)
        traj = integrate_euler(state, beta, params, horizon_days=30)
        totals = traj.states.sum(axis=1)
        assert np.all(np.abs(totals - c) <= 1e-9 * c)


class TestDailyAdmissionPrior:
    def test_disease_free_all_zero(self):
        state = CompartmentState(s=1000.0, e=0.0, i=0.0, h=0.0, r=0.0)
        beta = ContactRateSeries(np.zeros(20), dt=0.25)
        traj = integrate_euler(state, beta, REF_PARAMS, horizon_days=5)
        assert np.all(daily_admission_prior(traj) == 0.0)

    def test_telescoping_sum(self):
        beta = ContactRateSeries(np.full(120, REF_BETA), dt=0.25)
        traj = integrate_euler(REF_STATE, beta, REF_PARAMS, horizon_days=30)
        series = daily_admission_prior(traj)
        assert series.shape == (30,)
        np.testing.assert_allclose(
            series.sum(), traj.states[-1, 3] - traj.states[0, 3], rtol=1e-12
        )

    def test_day_one_equals_within_day_increments(self):
        beta = ContactRateSeries(np.full(4, REF_BETA), dt=0.25)
        traj = integrate_euler(REF_STATE, beta, REF_PARAMS, horizon_days=1)
        increments = np.diff(traj.states[:, 3])
        series = daily_admission_prior(traj)
        np.testing.assert_allclose(series[0], increments.sum(), rtol=1e-12)
        # cross-check against the independent fine-step oracle
        ref = reference_trajectory(REF_STATE, REF_BETA, REF_PARAMS, 1)
        assert abs(series[0] - (ref[-1, 3] - ref[0, 3])) / ref[-1, 3] < 0.02

    def test_nonnegative(self):
        beta = ContactRateSeries(np.full(240, 2.0 / 1000.0), dt=0.25)
        traj = integrate_euler(REF_STATE, beta, REF_PARAMS, horizon_days=60)
        assert np.all(daily_admission_prior(traj) >= 0.0)
