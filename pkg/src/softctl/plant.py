"""Synthetic ground-truth soft robot.

Three chambers at 120 deg drive a single constant-curvature arc; each chamber's
pressure passes through a play (backlash) operator first, which gives the
direction-dependent hysteresis the learned model has to capture. All constants
here are plant choices, not measured values.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

SQRT3 = np.sqrt(3.0)


class PressureRangeError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlantParams:
    length_rest: float = 70.0  # mm
    radius: float = 7.5  # mm, body radius (15 mm diameter)
    chamber_offset: float = 4.5  # mm, radial position of chamber axes
    elong_gain: float = 0.1  # mm / kPa
    bend_gain: float = 2.5e-4  # 1 / (mm kPa)
    hysteresis_halfwidth: float = 0.0  # kPa
    n_keys: int = 5
    pressure_min: float = 0.0  # kPa
    pressure_max: float = 60.0  # kPa
    noise_sigma: float = 0.0  # mm, additive sensor noise on key points

    def __post_init__(self):
        if not self.length_rest > 0:
            raise ValueError("length_rest must be positive")
        if self.hysteresis_halfwidth < 0:
            raise ValueError("hysteresis_halfwidth must be >= 0")
        if not self.pressure_min < self.pressure_max:
            raise ValueError("pressure_min must be below pressure_max")
        if self.n_keys < 2:
            raise ValueError("n_keys must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def play_update(state, p, halfwidth: float):
    """Play operator per chamber: the state is dragged along by a band of half-width h."""
    p = np.asarray(p, dtype=float)
    new = np.clip(np.asarray(state, dtype=float), p - halfwidth, p + halfwidth)
    return new, new.copy()


def arc_parameters(p_eff, params: PlantParams):
    p1, p2, p3 = np.asarray(p_eff, dtype=float)
    length = params.length_rest + params.elong_gain * (p1 + p2 + p3)
    # p1^2 + p2^2 + p3^2 - p1 p2 - p2 p3 - p3 p1, written without cancellation
    mag2 = 0.5 * ((p1 - p2) ** 2 + (p2 - p3) ** 2 + (p3 - p1) ** 2)
    kappa = params.bend_gain * np.sqrt(mag2)
    phi = np.arctan2(SQRT3 * (p3 - p2), 2.0 * p1 - p2 - p3)
    return float(length), float(kappa), float(phi)


def arc_points(length: float, kappa: float, phi: float, s) -> np.ndarray:
    """Points at arc lengths ``s`` along a constant-curvature arc rooted at the origin."""
    s = np.asarray(s, dtype=float)
    if kappa < 1e-12:
        r = np.zeros_like(s)
        z = s.copy()
    else:
        r = (1.0 - np.cos(kappa * s)) / kappa
        z = np.sin(kappa * s) / kappa
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def pcc_forward(p_eff, params: PlantParams) -> np.ndarray:
    """Key points, shape ``(n_keys, 3)``, equally spaced in arc length from the base."""
    length, kappa, phi = arc_parameters(p_eff, params)
    s = length * np.arange(params.n_keys) / (params.n_keys - 1)
    return arc_points(length, kappa, phi, s)


class Plant:
    """Stateful plant: hysteresis state plus an optional noisy sensor."""

    def __init__(self, params: PlantParams = PlantParams(), seed: int | None = 0, state=None):
        self.params = params
        self.state = np.zeros(3) if state is None else np.array(state, dtype=float)
        self.rng = np.random.default_rng(seed)

    def reset(self, state=None):
        self.state = np.zeros(3) if state is None else np.array(state, dtype=float)

    def check_pressure(self, p):
        p = np.asarray(p, dtype=float)
        lo, hi = self.params.pressure_min, self.params.pressure_max
        tol = 1e-9 * max(1.0, hi - lo)
        if p.shape != (3,) or not np.all(np.isfinite(p)) or np.any(p < lo - tol) or np.any(p > hi + tol):
            raise PressureRangeError(f"pressure {p} outside [{lo}, {hi}] kPa")
        return p

    def eval(self, p) -> np.ndarray:
        p = self.check_pressure(p)
        self.state, p_eff = play_update(self.state, p, self.params.hysteresis_halfwidth)
        keys = pcc_forward(p_eff, self.params)
        if self.params.noise_sigma > 0:
            keys = keys + self.rng.normal(scale=self.params.noise_sigma, size=keys.shape)
        return keys


def plant_eval(p, state, params: PlantParams, rng=None):
    """Functional form: returns ``(keys, new_state)``."""
    plant = Plant(params, state=state)
    if rng is not None:
        plant.rng = rng
    keys = plant.eval(p)
    return keys, plant.state


def updown_sweep_deviation(params: PlantParams, steps: int = 240) -> float:
    """Largest tip distance between the ascending and descending branch at equal pressure.

    Each chamber in turn is swept pressure_min -> pressure_max -> pressure_min
    with the others held at pressure_min, starting from a relaxed state.
    """
    grid = np.linspace(params.pressure_min, params.pressure_max, steps + 1)
    h = params.hysteresis_halfwidth
    quiet = replace(params, noise_sigma=0.0)
    worst = 0.0
    for c in range(3):
        state = np.full(3, params.pressure_min)
        up, down = [], []
        for branch, values in ((up, grid), (down, grid[::-1])):
            for v in values:
                p = np.full(3, params.pressure_min)
                p[c] = v
                state, p_eff = play_update(state, p, h)
                branch.append(pcc_forward(p_eff, quiet)[-1])
        dev = np.linalg.norm(np.array(up) - np.array(down[::-1]), axis=1)
        worst = max(worst, float(dev.max()))
    return worst


def calibrate_hysteresis(params: PlantParams, target_fraction: float, rtol: float = 1e-3,
                         steps: int = 240) -> float:
    """Bisect the play half-width so the up/down tip deviation equals ``target_fraction * length_rest``."""
    if target_fraction == 0:
        return 0.0
    if not 0 < target_fraction <= 0.1:
        raise ValueError("target_fraction must lie in (0, 0.1]")
    target = target_fraction * params.length_rest

    def dev(h):
        return updown_sweep_deviation(replace(params, hysteresis_halfwidth=h), steps)

    # grow the bracket geometrically from a small half-width; very wide bands
    # saturate the sweep and the deviation stops being monotone
    h_cap = 0.5 * (params.pressure_max - params.pressure_min)
    lo, d_lo = 0.0, dev(0.0)
    hi = min(0.01 * (params.pressure_max - params.pressure_min), h_cap)
    d_hi = dev(hi)
    while d_hi < target:
        if d_hi < d_lo:
            raise CalibrationError("sweep deviation is not monotone over the search bracket")
        if hi >= h_cap:
            raise CalibrationError(
                f"target deviation {target:.4g} mm unreachable (max {d_hi:.4g} mm in pressure range)")
        lo, d_lo = hi, d_hi
        hi = min(2.0 * hi, h_cap)
        d_hi = dev(hi)
    if not d_lo <= d_hi:
        raise CalibrationError("sweep deviation is not monotone over the search bracket")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        d_mid = dev(mid)
        if not d_lo <= d_mid <= d_hi:
            raise CalibrationError("sweep deviation is not monotone in the half-width")
        if abs(d_mid - target) <= rtol * target:
            return mid
        if d_mid < target:
            lo, d_lo = mid, d_mid
        else:
            hi, d_hi = mid, d_mid
    raise CalibrationError("bisection did not converge")
