"""Insertion and unmasking schedules with derivatives, and derived quantities.

A Schedule is a smooth monotone map [0,1] -> [0,1] with value 0 at t=0 and
1 at t=1. A SchedulePair couples an insertion schedule (alpha) with an
unmasking schedule (beta). The derived quantity gamma_t is the probability
that a token already inserted by time t has also been unmasked; the mask
probability of a position is 1 - gamma_t and satisfies

    1 - gamma_t = (1 - beta_t) * integral_0^t alphadot_u / (1 - beta_u) du.

For the all-linear pair the integral collapses to the closed form
1 - gamma_t = -(1 - t) * ln(1 - t); the general path is adaptive quadrature,
and the two are cross-checked in tests.

Rates of the generating processes scale like 1/(1 - schedule) and diverge at
t=1 by design (so completion is almost sure); samplers evaluate rates only up
to T_MAX and finish with a forced completion pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

from scipy.integrate import quad

T_MAX = 1.0 - 1e-4

_BOUNDARY_TOL = 1e-12
_GRID = 1000


@dataclass(frozen=True)
class Schedule:
    """A monotone schedule on [0,1] with an exact derivative.

    kind is one of "linear", "polynomial" (value t**power), or "tabulated"
    (piecewise-linear interpolation through (knots_t, knots_v) with the
    segment slope as derivative).
    """

    kind: str
    power: float = 1.0
    knots_t: tuple = field(default=())
    knots_v: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "tabulated"):
            raise ValueError(f"unknown schedule kind: {self.kind!r}")
        if self.kind == "polynomial" and self.power <= 0:
            raise ValueError("polynomial power must be positive")
        if self.kind == "tabulated":
            ts, vs = self.knots_t, self.knots_v
            if len(ts) != len(vs) or len(ts) < 2:
                raise ValueError("tabulated schedule needs matching knot arrays, length >= 2")
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("tabulated knots_t must be strictly increasing")
            if any(b < a for a, b in zip(vs, vs[1:])):
                raise ValueError("tabulated knots_v must be nondecreasing")
            if abs(ts[0]) > _BOUNDARY_TOL or abs(ts[-1] - 1.0) > _BOUNDARY_TOL:
                raise ValueError("tabulated knots_t must span [0, 1]")
        v0, _ = self.eval(0.0)
        v1, _ = self.eval(1.0)
        if abs(v0) > _BOUNDARY_TOL or abs(v1 - 1.0) > _BOUNDARY_TOL:
            raise ValueError("schedule must have value 0 at t=0 and 1 at t=1")

    def eval(self, t: float):
        """(value, derivative) at t in [0,1]."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} outside [0, 1]")
        if self.kind == "linear":
            return t, 1.0
        if self.kind == "polynomial":
            p = self.power
            dv = p * t ** (p - 1.0) if t > 0.0 or p >= 1.0 else math.inf
            return t**p, dv
        ts, vs = self.knots_t, self.knots_v
        # index of the segment containing t (last segment covers t = 1)
        lo, hi = 0, len(ts) - 2
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if ts[mid] <= t:
                lo = mid
            else:
                hi = mid - 1
        slope = (vs[lo + 1] - vs[lo]) / (ts[lo + 1] - ts[lo])
        return vs[lo] + slope * (t - ts[lo]), slope

    def value(self, t: float) -> float:
        return self.eval(t)[0]

    def derivative(self, t: float) -> float:
        return self.eval(t)[1]

    def inverse(self, u: float) -> float:
        """The time t with value(t) = u, for u in [0,1].

        Closed form for linear and polynomial kinds; bisection to 1e-10
        otherwise (flat segments resolve to their leftmost time).
        """
        if not 0.0 <= u <= 1.0:
            raise ValueError(f"schedule value {u} outside [0, 1]")
        if self.kind == "linear":
            return u
        if self.kind == "polynomial":
            return u ** (1.0 / self.power)
        lo, hi = 0.0, 1.0
        while hi - lo > 1e-10:
            mid = 0.5 * (lo + hi)
            if self.value(mid) < u:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    @staticmethod
    def linear() -> "Schedule":
        return Schedule("linear")

    @staticmethod
    def polynomial(power: float) -> "Schedule":
        return Schedule("polynomial", power=power)

    @staticmethod
    def tabulated(knots_t, knots_v) -> "Schedule":
        return Schedule("tabulated", knots_t=tuple(knots_t), knots_v=tuple(knots_v))

    @staticmethod
    def from_config(doc: dict) -> "Schedule":
        kind = doc.get("kind")
        if kind == "linear":
            return Schedule.linear()
        if kind == "polynomial":
            return Schedule.polynomial(float(doc["power"]))
        if kind == "tabulated":
            return Schedule.tabulated(doc["knots_t"], doc["knots_v"])
        raise ValueError(f"unknown schedule kind in config: {kind!r}")


@dataclass(frozen=True)
class SchedulePair:
    """Insertion schedule alpha and unmasking schedule beta."""

    insertion: Schedule
    unmasking: Schedule

    @staticmethod
    def all_linear() -> "SchedulePair":
        return SchedulePair(Schedule.linear(), Schedule.linear())


@lru_cache(maxsize=65536)
def _mask_integral(pair: SchedulePair, t: float) -> float:
    # integral_0^t alphadot_u / (1 - beta_u) du, finite for t < 1
    alpha, beta = pair.insertion, pair.unmasking

    def integrand(u):
        bv, _ = beta.eval(u)
        return alpha.derivative(u) / (1.0 - bv)

    val, err = quad(integrand, 0.0, t, epsabs=1e-12, epsrel=1e-10, limit=200)
    if err > 1e-9:
        raise ArithmeticError(f"mask-probability quadrature did not converge (err={err:.2e})")
    return val


def gamma(pair: SchedulePair, t: float) -> float:
    """Probability that a position inserted by time t is already unmasked.

    1 - gamma(t) is the mask probability of an inserted position. Computed
    by adaptive quadrature to absolute error <= 1e-9.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    if t >= 1.0:
        return 1.0
    beta_t = pair.unmasking.value(t)
    masked = (1.0 - beta_t) * _mask_integral(pair, t)
    return 1.0 - masked


def gamma_linear_closed_form(t: float) -> float:
    """gamma for the all-linear pair: 1 - gamma = -(1-t) ln(1-t)."""
    if t >= 1.0:
        return 1.0
    return 1.0 + (1.0 - t) * math.log1p(-t)


def token_phase_probs(pair: SchedulePair, t: float):
    """(p_empty, p_mask, p_clean) for one source position at time t.

    p_empty = 1 - alpha_t (not yet inserted), p_mask = 1 - gamma_t,
    p_clean = alpha_t + gamma_t - 1; the triple sums to 1.
    """
    alpha_t = pair.insertion.value(t)
    g = gamma(pair, t)
    return 1.0 - alpha_t, 1.0 - g, alpha_t + g - 1.0
