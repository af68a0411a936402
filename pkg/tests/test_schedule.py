"""Schedules, the derived mask probability, and per-position phase split."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from flexctmc.schedule import (
    Schedule,
    SchedulePair,
    T_MAX,
    gamma,
    gamma_linear_closed_form,
    token_phase_probs,
)


class TestScheduleEval:
    def test_linear_values(self):
        sch = Schedule.linear()
        assert sch.eval(0.0) == (0.0, 1.0)
        assert sch.eval(0.5) == (0.5, 1.0)
        assert sch.eval(1.0) == (1.0, 1.0)

    def test_polynomial_values(self):
        sch = Schedule.polynomial(2.0)
        assert sch.eval(0.5) == (0.25, 1.0)
        assert sch.eval(1.0) == (1.0, 2.0)

    def test_boundaries_all_kinds(self):
        for sch in (
            Schedule.linear(),
            Schedule.polynomial(3.0),
            Schedule.tabulated((0.0, 0.4, 1.0), (0.0, 0.7, 1.0)),
        ):
            assert abs(sch.value(0.0)) <= 1e-12
            assert abs(sch.value(1.0) - 1.0) <= 1e-12

    def test_monotone_with_nonnegative_derivative(self):
        grid = np.linspace(0.0, 1.0, 1000)
        for sch in (Schedule.polynomial(0.5), Schedule.polynomial(4.0)):
            vals = [sch.value(float(t)) for t in grid]
            assert all(b >= a for a, b in zip(vals, vals[1:]))
            assert all(sch.derivative(float(t)) >= 0.0 for t in grid[1:])

    def test_time_domain_enforced(self):
        with pytest.raises(ValueError):
            Schedule.linear().eval(-0.01)
        with pytest.raises(ValueError):
            Schedule.linear().eval(1.01)

    def test_tabulated_interpolation(self):
        sch = Schedule.tabulated((0.0, 0.5, 1.0), (0.0, 0.2, 1.0))
        v, d = sch.eval(0.25)
        assert v == pytest.approx(0.1)
        assert d == pytest.approx(0.4)
        v, d = sch.eval(0.75)
        assert v == pytest.approx(0.6)
        assert d == pytest.approx(1.6)

    def test_invalid_constructions(self):
        with pytest.raises(ValueError):
            Schedule("exponential")
        with pytest.raises(ValueError):
            Schedule.polynomial(0.0)
        with pytest.raises(ValueError):
            Schedule.tabulated((0.0, 1.0), (0.0, 0.5))  # endpoint not 1
        with pytest.raises(ValueError):
            Schedule.tabulated((0.0, 0.6, 0.4, 1.0), (0.0, 0.2, 0.3, 1.0))

    def test_inverse_roundtrip(self):
        for sch in (
            Schedule.linear(),
            Schedule.polynomial(2.0),
            Schedule.tabulated((0.0, 0.3, 1.0), (0.0, 0.8, 1.0)),
        ):
            for t in (0.0, 0.2, 0.5, 0.9, 1.0):
                assert sch.inverse(sch.value(t)) == pytest.approx(t, abs=1e-9)

    def test_from_config(self):
        assert Schedule.from_config({"kind": "linear"}).value(0.3) == 0.3
        assert Schedule.from_config({"kind": "polynomial", "power": 2}).value(0.5) == 0.25
        with pytest.raises(ValueError):
            Schedule.from_config({"kind": "cosine"})

    def test_t_max_is_interior(self):
        assert 0.0 < T_MAX < 1.0
        assert T_MAX == pytest.approx(1.0 - 1e-4)


class TestGamma:
    def test_endpoint_mask_probability_vanishes(self, linear_pair):
        # nothing is inserted-but-masked at t=0, nothing stays masked at t=1
        assert 1.0 - gamma(linear_pair, 0.0) == pytest.approx(0.0, abs=1e-9)
        assert 1.0 - gamma(linear_pair, 1.0) == 0.0

    def test_linear_midpoint_value(self, linear_pair):
        assert gamma(linear_pair, 0.5) == pytest.approx(1.0 - 0.5 * math.log(2.0))
        assert gamma(linear_pair, 0.5) == pytest.approx(0.65343, abs=5e-6)

    def test_closed_form_matches_quadrature(self, linear_pair):
        for t in (0.1, 0.35, 0.5, 0.77, 0.99):
            assert gamma(linear_pair, t) == pytest.approx(
                gamma_linear_closed_form(t), abs=1e-9
            )

    def test_quadrature_against_direct_integral(self):
        # independent numeric reference for a non-linear unmasking schedule
        pair = SchedulePair(Schedule.linear(), Schedule.polynomial(2.0))
        for t in (0.3, 0.6, 0.9):
            bt = pair.unmasking.value(t)
            ref, _ = quad(lambda u: (1.0 - bt) / (1.0 - u * u), 0.0, t)
            assert 1.0 - gamma(pair, t) == pytest.approx(ref, abs=1e-9)


class TestPhaseProbs:
    def test_boundaries(self, linear_pair):
        assert token_phase_probs(linear_pair, 0.0) == pytest.approx((1.0, 0.0, 0.0))
        assert token_phase_probs(linear_pair, 1.0) == pytest.approx((0.0, 0.0, 1.0))

    def test_midpoint_values(self, linear_pair):
        p_empty, p_mask, p_clean = token_phase_probs(linear_pair, 0.5)
        assert p_empty == pytest.approx(0.5)
        assert p_mask == pytest.approx(0.34657, abs=5e-6)
        assert p_clean == pytest.approx(0.15343, abs=5e-6)

    def test_sums_to_one_on_grid(self, linear_pair):
        quad_pair = SchedulePair(Schedule.polynomial(2.0), Schedule.linear())
        for pair in (linear_pair, quad_pair):
            for t in np.linspace(0.0, 1.0, 1000):
                assert sum(token_phase_probs(pair, float(t))) == pytest.approx(
                    1.0, abs=1e-9
                )

    def test_clean_phase_is_a_cdf(self, linear_pair):
        # the clean-phase probability is the unmasking-time CDF, so monotone
        grid = np.linspace(0.0, 1.0, 200)
        clean = [token_phase_probs(linear_pair, float(t))[2] for t in grid]
        assert all(b >= a - 1e-12 for a, b in zip(clean, clean[1:]))

    def test_empty_phase_depends_only_on_insertion_schedule(self):
        alpha = Schedule.linear()
        p1 = SchedulePair(alpha, Schedule.linear())
        p2 = SchedulePair(alpha, Schedule.polynomial(2.0))
        for t in (0.2, 0.5, 0.8):
            assert token_phase_probs(p1, t)[0] == token_phase_probs(p2, t)[0]
