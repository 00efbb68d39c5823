"""PID pressure regulation of a syringe-driven chamber.

Gains are in normalized units: error in kPa, time in controller ticks
(``time_unit`` seconds), output in fractions of full motor speed. With
``dt == time_unit`` the integral is a plain running sum of errors and the
derivative a one-tick difference.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.8
    ki: float = 0.1
    kd: float = 0.2
    integral_clamp: float = 1.0  # kPa * tick
    output_clamp: float = 1.0  # fraction of full actuator speed
    time_unit: float = 0.02  # s per tick (50 Hz)

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be >= 0")
        if self.integral_clamp <= 0 or self.output_clamp <= 0 or self.time_unit <= 0:
            raise ValueError("clamps and time unit must be positive")


@dataclass(frozen=True)
class ActuatorParams:
    k_act: float = 10.0  # kPa/s per unit of control output
    rate_max: float = 10.0  # kPa/s
    pressure_min: float = 0.0
    pressure_max: float = 60.0
    inner_hz: float = 50.0
    period: float = 1.0  # s of regulation per environment step

    @property
    def ticks_per_step(self) -> int:
        return int(round(self.period * self.inner_hz))


@dataclass
class ActuatorState:
    """Per-chamber loop state; fields are arrays with one entry per chamber."""

    pressure: np.ndarray = field(default_factory=lambda: np.zeros(3))
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_error: np.ndarray | None = None  # None until the first controller step

    def copy(self) -> "ActuatorState":
        return ActuatorState(self.pressure.copy(), self.integral.copy(),
                             None if self.prev_error is None else self.prev_error.copy())


def pid_step(gains: PidGains, state: ActuatorState, setpoint, dt: float):
    """One controller update; returns ``(u, new_state)`` with the pressure untouched."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    tau = dt / gains.time_unit
    e = np.asarray(setpoint, dtype=float) - state.pressure
    integral = np.clip(state.integral + e * tau, -gains.integral_clamp, gains.integral_clamp)
    deriv = np.zeros_like(e) if state.prev_error is None else (e - state.prev_error) / tau
    u = np.clip(gains.kp * e + gains.ki * integral + gains.kd * deriv, -gains.output_clamp, gains.output_clamp)
    return u, ActuatorState(state.pressure.copy(), integral, e)


def actuator_step(params: ActuatorParams, pressure, u, dt: float) -> np.ndarray:
    """First-order syringe model with a rate limit; the result is clamped to the pressure bounds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rate = np.clip(params.k_act * np.asarray(u, dtype=float), -params.rate_max, params.rate_max)
    return np.clip(np.asarray(pressure, dtype=float) + rate * dt, params.pressure_min, params.pressure_max)


class PressureLoop:
    """Three chamber loops run together at the inner rate."""

    def __init__(self, gains: PidGains = PidGains(), params: ActuatorParams = ActuatorParams(), pressure=None):
        self.gains = gains
        self.params = params
        self.state = ActuatorState(np.zeros(3) if pressure is None else np.array(pressure, dtype=float))

    @property
    def pressure(self) -> np.ndarray:
        return self.state.pressure

    def reset(self, pressure=None):
        self.state = ActuatorState(np.zeros(3) if pressure is None else np.array(pressure, dtype=float))

    def tick(self, setpoint) -> np.ndarray:
        dt = 1.0 / self.params.inner_hz
        u, st = pid_step(self.gains, self.state, setpoint, dt)
        st.pressure = actuator_step(self.params, st.pressure, u, dt)
        self.state = st
        return st.pressure

    def run(self, setpoint, ticks: int | None = None) -> np.ndarray:
        """Regulate toward ``setpoint`` for ``ticks`` (default one env period); returns the pressure path."""
        ticks = self.params.ticks_per_step if ticks is None else ticks
        return np.array([self.tick(setpoint).copy() for _ in range(ticks)])


def step_response(setpoint: float, duration: float, gains: PidGains = PidGains(),
                  params: ActuatorParams = ActuatorParams(), start: float = 0.0):
    """Simulated closed-loop response of one chamber to a setpoint step."""
    loop = PressureLoop(gains, params, np.full(3, start))
    path = loop.run(np.full(3, setpoint), int(round(duration * params.inner_hz)))[:, 0]
    t = np.arange(1, len(path) + 1) / params.inner_hz
    return t, path


def settling_metrics(t, path, start: float, setpoint: float, band: float = 0.02) -> dict:
    step = setpoint - start
    err = np.abs(path - setpoint)
    outside = np.where(err > band * abs(step))[0]
    settle = 0.0 if len(outside) == 0 else (t[outside[-1] + 1] if outside[-1] + 1 < len(t) else np.inf)
    overshoot = max(0.0, float(np.max((path - setpoint) * np.sign(step)))) / abs(step)
    return {"settling_time": float(settle), "overshoot": overshoot, "final_error": float(err[-1])}
