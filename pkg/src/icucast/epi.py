"""SEIHR compartmental model with fixed-step Euler integration.

The population of size C splits into Susceptible, Exposed, Infectious,
Hospitalized (cumulative) and Recovered-or-died-outside-hospital
compartments.  Flows:

    dS/dt = -beta(t) * S * I
    dE/dt =  beta(t) * S * I - alpha * E
    dI/dt =  alpha * E - gamma * I
    dH/dt =  eta * gamma * I
    dR/dt = (1 - eta) * gamma * I

beta multiplies the raw S*I product, so it carries units of
1 / (person * day).  Callers working with a population-free contact rate
divide by C before building a :class:`ContactRateSeries`.

The derivatives sum to zero, so the total is conserved up to float
round-off.  Explicit Euler can undershoot a compartment below zero for
aggressive parameters; each step clamps negatives and pushes the deficit
back into S (last resort: rescale) so conservation holds exactly even
then, with a per-step flag recording that the clamp fired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EpidemicParams",
    "CompartmentState",
    "ContactRateSeries",
    "EpidemicTrajectory",
    "InvalidParameterError",
    "IntegrationError",
    "seihr_derivatives",
    "integrate_euler",
    "daily_admission_prior",
]


class InvalidParameterError(ValueError):
    """Raised when model parameters or states violate their invariants."""


class IntegrationError(RuntimeError):
    """Raised when integration produces non-finite values or runs out of beta."""


@dataclass(frozen=True)
class EpidemicParams:
    """Progression rates and population size for one hospital catchment."""

    alpha: float  # exposed -> infectious, per day
    gamma: float  # infectious exit, per day
    eta: float  # fraction of infectious exits that are hospitalized
    population_c: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise InvalidParameterError(f"alpha must be positive, got {self.alpha}")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise InvalidParameterError(f"gamma must be positive, got {self.gamma}")
        if not (0.0 <= self.eta <= 1.0):
            raise InvalidParameterError(f"eta must lie in [0, 1], got {self.eta}")
        if not (self.population_c > 0 and math.isfinite(self.population_c)):
            raise InvalidParameterError(
                f"population_c must be positive, got {self.population_c}"
            )


@dataclass(frozen=True)
class CompartmentState:
    """Instantaneous compartment sizes (person counts, nonnegative)."""

    s: float
    e: float
    i: float
    h: float
    r: float

    def __post_init__(self):
        for name in ("s", "e", "i", "h", "r"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidParameterError(f"compartment {name} must be >= 0, got {v}")

    def total(self) -> float:
        return self.s + self.e + self.i + self.h + self.r

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.e, self.i, self.h, self.r], dtype=float)


@dataclass(frozen=True)
class ContactRateSeries:
    """Per-timestep transmission coefficients, dt days apart."""

    values: np.ndarray
    dt: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 1:
            raise InvalidParameterError("beta values must be a 1-d series")
        if not (self.dt > 0):
            raise InvalidParameterError(f"dt must be positive, got {self.dt}")
        if self.values.size and (not np.all(np.isfinite(self.values)) or self.values.min() < 0):
            raise InvalidParameterError("beta values must be finite and >= 0")
        spd = 1.0 / self.dt
        if abs(spd - round(spd)) > 1e-9:
            raise InvalidParameterError(f"dt={self.dt} must evenly divide one day")

    @property
    def steps_per_day(self) -> int:
        return int(round(1.0 / self.dt))

    @staticmethod
    def from_daily(daily_values, dt: float = 0.25) -> "ContactRateSeries":
        """Expand a per-day beta series to per-step, piecewise constant within each day."""
        daily = np.asarray(daily_values, dtype=float)
        spd = int(round(1.0 / dt))
        return ContactRateSeries(values=np.repeat(daily, spd), dt=dt)


@dataclass(frozen=True)
class EpidemicTrajectory:
    """Dense Euler trajectory: row 0 is the initial state, one row per step after."""

    states: np.ndarray  # (n_steps + 1, 5) columns S, E, I, H, R
    dt: float
    clamped: np.ndarray  # (n_steps,) bool, True where a clamp event fired

    @property
    def steps_per_day(self) -> int:
        return int(round(1.0 / self.dt))

    @property
    def n_days(self) -> int:
        return (self.states.shape[0] - 1) // self.steps_per_day

    def state_at_day(self, day: int) -> np.ndarray:
        return self.states[day * self.steps_per_day]

    def hospitalized_by_day(self) -> np.ndarray:
        """H at day boundaries 0..n_days."""
        return self.states[:: self.steps_per_day, 3]


def seihr_derivatives(
    state: CompartmentState, beta: float, params: EpidemicParams
) -> np.ndarray:
    """Evaluate (dS, dE, dI, dH, dR) at the given state; components sum to zero."""
    if not (math.isfinite(beta) and beta >= 0):
        raise InvalidParameterError(f"beta must be finite and >= 0, got {beta}")
    infections = beta * state.s * state.i
    exits = params.gamma * state.i
    ds = -infections
    de = infections - params.alpha * state.e
    di = params.alpha * state.e - exits
    dh = params.eta * exits
    dr = (1.0 - params.eta) * exits
    return np.array([ds, de, di, dh, dr], dtype=float)


def _euler_step(s, e, i, h, r, beta, alpha, gamma, eta, dt):
    infections = beta * s * i
    exits = gamma * i
    progressed = alpha * e
    s2 = s - dt * infections
    e2 = e + dt * (infections - progressed)
    i2 = i + dt * (progressed - exits)
    h2 = h + dt * eta * exits
    r2 = r + dt * (1.0 - eta) * exits
    return s2, e2, i2, h2, r2


def integrate_euler(
    initial: CompartmentState,
    beta: ContactRateSeries,
    params: EpidemicParams,
    horizon_days: int,
) -> EpidemicTrajectory:
    """Fixed-step Euler integration over `horizon_days` at beta's step size."""
    if horizon_days < 0:
        raise InvalidParameterError("horizon_days must be >= 0")
    spd = beta.steps_per_day
    n_steps = horizon_days * spd
    if n_steps > beta.values.size:
        raise IntegrationError(
            f"beta series too short: need {n_steps} steps, have {beta.values.size}"
        )
    dt = beta.dt
    alpha, gamma, eta = params.alpha, params.gamma, params.eta
    c = params.population_c

    states = np.empty((n_steps + 1, 5), dtype=float)
    clamped = np.zeros(n_steps, dtype=bool)
    s, e, i, h, r = initial.s, initial.e, initial.i, initial.h, initial.r
    states[0] = (s, e, i, h, r)
    bvals = beta.values

    for k in range(n_steps):
        s, e, i, h, r = _euler_step(s, e, i, h, r, bvals[k], alpha, gamma, eta, dt)
        if e < 0 or i < 0 or h < 0 or r < 0 or s < 0:
            # Undershoot: zero the negatives, absorb the deficit into S so the
            # total stays exactly C; rescale everything if S cannot absorb it.
            clamped[k] = True
            e, i, h, r = max(e, 0.0), max(i, 0.0), max(h, 0.0), max(r, 0.0)
            s = c - (e + i + h + r)
            if s < 0:
                s = 0.0
                scale = c / (e + i + h + r)
                e, i, h, r = e * scale, i * scale, h * scale, r * scale
        if not (
            math.isfinite(s)
            and math.isfinite(e)
            and math.isfinite(i)
            and math.isfinite(h)
            and math.isfinite(r)
        ):
            raise IntegrationError(f"non-finite state at step {k + 1}")
        states[k + 1] = (s, e, i, h, r)

    return EpidemicTrajectory(states=states, dt=dt, clamped=clamped)


def daily_admission_prior(trajectory: EpidemicTrajectory) -> np.ndarray:
    """Expected new hospitalizations per day: increments of the H compartment.

    Day d gets H(d) - H(d-1) with H(0) taken from the initial state.  H is
    cumulative, so the series telescopes to H(final) - H(0) and every entry
    is nonnegative (clamping never reduces H below its previous value in
    practice; a floor at zero guards the pathological case).
    """
    h_by_day = trajectory.hospitalized_by_day()
    return np.maximum(np.diff(h_by_day), 0.0)
