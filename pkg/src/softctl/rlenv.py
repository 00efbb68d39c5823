"""Tracking MDP over the learned body model, plus a vectorized runner.

Observation layout (length 6n + 7), all scaled to O(1):
    [body key points / L, tracking error / error_scale, pressures / range, direction signs, t / T]
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import Delaunay

from .actuation import ActuatorParams, PidGains, PressureLoop
from .geometry import BehindOriginError, NoIntersectionError, Plane, ray_plane_intersect, tip_tangent
from .hwbnn import BodyModel
from .plant import Plant, PlantParams, play_update

TASK_KINDS = ("tip-track", "laser-track")
ERROR_MODES = ("tip", "whole-body")


class EnvironmentFault(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    waypoints: np.ndarray  # (K, 3) mm; on the plane for laser tasks
    plane: Plane | None = None
    dwell: int = 10
    episode_length: int = 400
    error_mode: str = "tip"
    body_targets: np.ndarray | None = None  # (K, 3n), whole-body mode only
    name: str = ""

    def __post_init__(self):
        wp = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        object.__setattr__(self, "waypoints", wp)
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}")
        if len(wp) == 0 or wp.shape[1] != 3:
            raise ValueError("waypoints must be a nonempty (K, 3) array")
        if self.episode_length < 1 or self.dwell < 1:
            raise ValueError("episode_length and dwell must be >= 1")
        if self.kind == "laser-track" and self.plane is None:
            raise ValueError("laser task needs a target plane")
        if self.error_mode not in ERROR_MODES:
            raise ValueError(f"error_mode must be one of {ERROR_MODES}")
        if self.error_mode == "whole-body":
            if self.kind != "tip-track" or self.body_targets is None or len(self.body_targets) != len(wp):
                raise ValueError("whole-body mode needs one body target per waypoint (tip tasks only)")

    def waypoint_index(self, step: int) -> int:
        return min(step // self.dwell, len(self.waypoints) - 1)


@dataclass(frozen=True)
class EnvConfig:
    model: BodyModel
    pressure_min: float = 0.0
    pressure_max: float = 60.0
    action_bound: float = 3.0  # kPa per step and chamber
    mode: str = "surrogate"
    seed: int = 0
    rest_pressure: tuple = (0.0, 0.0, 0.0)
    length_scale: float = 70.0  # mm, body positions are divided by this
    error_scale: float = 10.0  # mm, tracking errors are divided by this
    plant: PlantParams | None = None  # deploy mode
    pid: PidGains = PidGains()
    actuator: ActuatorParams = ActuatorParams()
    laser_miss_distance: float = 1000.0  # mm, error charged when the beam misses the plane
    shaping_scale: float = 0.0  # mm; > 0 reports a dense -error/shaping_scale term in info["shaping"]

    def __post_init__(self):
        if self.mode not in ("surrogate", "deploy"):
            raise ValueError("mode must be 'surrogate' or 'deploy'")
        if self.mode == "deploy" and self.plant is None:
            raise ValueError("deploy mode needs plant parameters")
        if not self.pressure_min < self.pressure_max or self.action_bound <= 0:
            raise ValueError("invalid pressure bounds or action bound")


def obs_size(n_keys: int) -> int:
    return 6 * n_keys + 7


def sign_with_carry(delta, prev):
    delta = np.asarray(delta, dtype=float)
    return np.where(delta > 0, 1.0, np.where(delta < 0, -1.0, prev))


class SoftRobotEnv:
    """One tracking episode at a time; owns its pressure, direction and plant state."""

    def __init__(self, config: EnvConfig, task: TaskSpec):
        self.config = config
        self.task = task
        self.n_keys = config.model.n_keys
        if task.body_targets is not None and np.shape(task.body_targets)[1] != 3 * self.n_keys:
            raise ValueError("task body targets do not match the model output size")
        self.obs_dim = obs_size(self.n_keys)
        self.act_dim = 3
        self.p = np.zeros(3)
        self.d = np.ones(3)
        self.t = 0
        self.keys = np.zeros((self.n_keys, 3))
        self.plant = None
        self.loop = None
        self.rng = np.random.default_rng(config.seed)

    # --- dynamics -------------------------------------------------------
    def _body(self, p, d) -> np.ndarray:
        y = self.config.model.predict(p, d if self.config.model.input_mode == "6d" else None)
        if not np.all(np.isfinite(y)):
            raise EnvironmentFault(f"body model returned non-finite output at p={p}, d={d}")
        return y.reshape(self.n_keys, 3)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.config
        self.p = np.clip(np.asarray(cfg.rest_pressure, dtype=float), cfg.pressure_min, cfg.pressure_max)
        self.d = np.ones(3)
        self.t = 0
        if cfg.mode == "deploy":
            self.plant = Plant(cfg.plant, seed=int(self.rng.integers(2 ** 31)), state=self.p)
            self.loop = PressureLoop(cfg.pid, replace(cfg.actuator, pressure_min=cfg.pressure_min,
                                                      pressure_max=cfg.pressure_max), self.p)
            self.p_cmd = self.p.copy()
            self.keys = self.plant.eval(self.p)
        else:
            self.keys = self._body(self.p, self.d)
        return self.observation()

    def step(self, action):
        cfg = self.config
        a = np.clip(np.asarray(action, dtype=float), -cfg.action_bound, cfg.action_bound)
        if a.shape != (3,) or not np.all(np.isfinite(a)):
            raise EnvironmentFault(f"invalid action {action!r}")
        target_step = self.t
        self.d = sign_with_carry(a, self.d)
        if cfg.mode == "surrogate":
            self.p = np.clip(self.p + a, cfg.pressure_min, cfg.pressure_max)
            self.keys = self._body(self.p, self.d)
        else:
            self.p_cmd = np.clip(self.p_cmd + a, cfg.pressure_min, cfg.pressure_max)
            path = self.loop.run(self.p_cmd)
            for q in path[:-1]:
                self.plant.state, _ = play_update(self.plant.state, q, self.plant.params.hysteresis_halfwidth)
            self.p = path[-1].copy()
            self.keys = self.plant.eval(self.p)
        self.t += 1
        err, info = self.tracking_error(target_step)
        reward = math.exp(-err)
        done = self.t >= self.task.episode_length
        info.update(error=err, t=self.t)
        if cfg.shaping_scale > 0:
            # dense training signal; exp(-err) alone vanishes beyond a few mm
            info["shaping"] = -min(err, cfg.laser_miss_distance) / cfg.shaping_scale
        return self.observation(), reward, done, info

    # --- task geometry ---------------------------------------------------
    def laser_hit(self, keys=None):
        keys = self.keys if keys is None else keys
        try:
            return ray_plane_intersect(keys[-1], tip_tangent(keys), self.task.plane), True
        except (NoIntersectionError, BehindOriginError):
            plane = self.task.plane
            return keys[-1] - plane.signed_distance(keys[-1]) * plane.normal, False

    def achieved_point(self):
        if self.task.kind == "laser-track":
            return self.laser_hit()
        return self.keys[-1].copy(), True

    def tracking_error(self, step: int):
        k = self.task.waypoint_index(step)
        target = self.task.waypoints[k]
        point, ok = self.achieved_point()
        if self.task.error_mode == "whole-body":
            err = float(np.linalg.norm(self.task.body_targets[k] - self.keys.ravel()))
        else:
            err = float(np.linalg.norm(target - point)) if ok else self.config.laser_miss_distance
        return err, {"target": target, "achieved": point, "hit": ok}

    def error_vector(self) -> np.ndarray:
        """Y_tar - Y_body for the upcoming target (tip slot only in tip mode)."""
        k = self.task.waypoint_index(self.t)
        if self.task.error_mode == "whole-body":
            return self.task.body_targets[k] - self.keys.ravel()
        e = np.zeros(3 * self.n_keys)
        point, _ = self.achieved_point()
        e[-3:] = self.task.waypoints[k] - point
        return e

    def observation(self) -> np.ndarray:
        cfg = self.config
        span = cfg.pressure_max - cfg.pressure_min
        return np.concatenate([
            self.keys.ravel() / cfg.length_scale,
            self.error_vector() / cfg.error_scale,
            (self.p - cfg.pressure_min) / span,
            self.d,
            [self.t / self.task.episode_length],
        ])


def env_reset(config: EnvConfig, task: TaskSpec, seed: int | None = None):
    env = SoftRobotEnv(config, task)
    return env, env.reset(seed)


def env_step(env: SoftRobotEnv, action):
    return env.step(action)


class VecEnv:
    """Steps a list of environments in input order with auto-reset.

    When an episode ends, the returned observation is already the reset one and
    the terminal observation is in ``infos[i]["terminal_observation"]``. A fault
    in one environment is reported in its info and that environment is reset;
    the others are unaffected.
    """

    def __init__(self, envs):
        if not envs:
            raise ValueError("need at least one environment")
        self.envs = list(envs)
        self.obs_dim = self.envs[0].obs_dim
        self.act_dim = getattr(self.envs[0], "act_dim", 3)

    def __len__(self):
        return len(self.envs)

    def reset(self, seeds=None) -> np.ndarray:
        seeds = [None] * len(self.envs) if seeds is None else seeds
        return np.stack([e.reset(s) for e, s in zip(self.envs, seeds)])

    def step(self, actions):
        actions = np.asarray(actions, dtype=float)
        if len(actions) != len(self.envs):
            raise ValueError(f"{len(actions)} actions for {len(self.envs)} environments")
        obs = np.empty((len(self.envs), self.obs_dim))
        rewards = np.zeros(len(self.envs))
        dones = np.zeros(len(self.envs), dtype=bool)
        infos = []
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            try:
                o, r, done, info = env.step(a)
            except EnvironmentFault as exc:
                o, r, done, info = None, 0.0, True, {"fault": str(exc)}
            if done:
                info["terminal_observation"] = o
                try:
                    o = env.reset()
                except EnvironmentFault as exc:
                    o = np.full(self.obs_dim, np.nan)
                    info["fault"] = info.get("fault", "") + f"; reset failed: {exc}"
            obs[i], rewards[i], dones[i] = o, r, done
            infos.append(info)
        return obs, rewards, dones, infos


def vec_env_step(vec: VecEnv, actions):
    return vec.step(actions)


# --- task construction ------------------------------------------------------

def _plane_basis(normal):
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ n) * n
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def circle_waypoints(center, radius, k, normal=(0, 0, 1), phase=0.0) -> np.ndarray:
    if radius <= 0:
        raise ValueError("radius must be positive")
    if k < 1:
        raise ValueError("need at least one waypoint")
    e1, e2 = _plane_basis(normal)
    ang = phase + 2 * np.pi * np.arange(k) / k
    return np.asarray(center, dtype=float) + radius * (np.outer(np.cos(ang), e1) + np.outer(np.sin(ang), e2))


def square_waypoints(center, side, k, normal=(0, 0, 1)) -> np.ndarray:
    """``k`` points along the square perimeter starting at a corner; corners included when 4 | k."""
    if side <= 0:
        raise ValueError("side must be positive")
    if k < 4:
        raise ValueError("need at least 4 waypoints")
    e1, e2 = _plane_basis(normal)
    h = side / 2.0
    corners = np.array([[h, -h], [h, h], [-h, h], [-h, -h]])
    s = 4.0 * np.arange(k) / k
    edge = np.floor(s).astype(int)
    frac = (s - edge)[:, None]
    uv = corners[edge] + frac * (corners[(edge + 1) % 4] - corners[edge])
    return np.asarray(center, dtype=float) + np.outer(uv[:, 0], e1) + np.outer(uv[:, 1], e2)


def make_task(kind: str, params: dict) -> TaskSpec:
    """Build a task from a shape name.

    ``kind`` is ``circle``, ``square``, ``laser-circle`` or ``laser-square``.
    ``params`` holds center, radius/side, k, dwell, episode_length and, for
    laser tasks, ``plane_z`` (horizontal target plane).
    """
    p = dict(params)
    k = int(p.get("k", 40))
    dwell = int(p.get("dwell", 10))
    length = int(p.get("episode_length", k * dwell))
    shape = kind.removeprefix("laser-")
    center = np.asarray(p.get("center", (0.0, 0.0, 0.0)), dtype=float)
    plane = None
    if kind.startswith("laser-"):
        plane = Plane.horizontal(float(p["plane_z"]))
        center = np.array([center[0], center[1], plane.offset])
    if shape == "circle":
        wp = circle_waypoints(center, float(p["radius"]), k, phase=float(p.get("phase", 0.0)))
    elif shape == "square":
        wp = square_waypoints(center, float(p["side"]), k)
    else:
        raise ValueError(f"unknown task shape {kind!r}")
    return TaskSpec("laser-track" if plane is not None else "tip-track", wp, plane, dwell, length,
                    p.get("error_mode", "tip"), p.get("body_targets"), name=kind)


# --- workspace analysis -------------------------------------------------------

def sample_workspace(model: BodyModel, bounds=(0.0, 60.0), steps: int = 13) -> np.ndarray:
    """Key points predicted over a pressure grid, both direction labels; shape (M, n, 3)."""
    lv = np.linspace(bounds[0], bounds[1], steps)
    grid = np.array(np.meshgrid(lv, lv, lv, indexing="ij")).reshape(3, -1).T
    out = []
    for sign in (1.0, -1.0):
        d = np.full_like(grid, sign)
        y = model.predict(grid, d if model.input_mode == "6d" else None)
        out.append(y.reshape(len(grid), -1, 3))
    return np.concatenate(out)


def workspace_radius(tips, sectors: int = 36) -> float:
    """Lateral reach guaranteed in every direction: min over angular sectors of the max radius."""
    r = np.hypot(tips[:, 0], tips[:, 1])
    ang = np.arctan2(tips[:, 1], tips[:, 0])
    bins = ((ang + np.pi) / (2 * np.pi) * sectors).astype(int) % sectors
    reach = [r[bins == b].max() if np.any(bins == b) else 0.0 for b in range(sectors)]
    return float(min(reach))


def in_hull(points, cloud) -> np.ndarray:
    return Delaunay(cloud).find_simplex(points) >= 0


def laser_hits(keys_batch, plane: Plane) -> np.ndarray:
    hits = []
    for keys in keys_batch:
        try:
            hits.append(ray_plane_intersect(keys[-1], tip_tangent(keys), plane))
        except (NoIntersectionError, BehindOriginError):
            continue
    return np.array(hits)


def design_circle_task(model: BodyModel, fraction: float = 0.5, k: int = 40, dwell: int = 10,
                       bounds=(0.0, 60.0), steps: int = 13, laser_plane_z: float | None = None):
    """Circle about the robot axis sized to ``fraction`` of the reachable radius.

    Tip tasks sit at the median tip height of grid samples near the circle
    radius; laser tasks put the circle on the plane ``z = laser_plane_z``.
    Returns ``(task, info)`` with the workspace figures used.
    """
    keys = sample_workspace(model, bounds, steps)
    tips = keys[:, -1]
    if laser_plane_z is None:
        r_ws = workspace_radius(tips)
        if r_ws <= 0:
            raise ValueError("model workspace does not surround the robot axis")
        radius = fraction * r_ws
        lateral = np.hypot(tips[:, 0], tips[:, 1])
        near = np.abs(lateral - radius) < 0.1 * radius
        z_c = float(np.median(tips[near, 2]))
        task = make_task("circle", {"center": (0, 0, z_c), "radius": radius, "k": k, "dwell": dwell})
        return task, {"workspace_radius": r_ws, "radius": radius, "height": z_c}
    plane = Plane.horizontal(laser_plane_z)
    hits = laser_hits(keys, plane)
    if len(hits) == 0:
        raise ValueError(f"no sampled pointing ray reaches the plane z = {laser_plane_z}")
    r_ws = workspace_radius(hits)
    if r_ws <= 0:
        raise ValueError("plane-projected workspace does not surround the robot axis")
    xy = hits[:, :2]
    diameter = float(np.max(np.linalg.norm(xy[:, None, :] - xy[None, ::7, :], axis=-1)))
    radius = fraction * r_ws
    task = make_task("laser-circle", {"radius": radius, "k": k, "dwell": dwell, "plane_z": laser_plane_z})
    return task, {"workspace_radius": r_ws, "radius": radius, "plane_z": laser_plane_z,
                  "workspace_diameter": diameter}


def design_task(model: BodyModel, name: str, fraction: float = 0.5, k: int = 40, dwell: int = 10,
                episode_length: int = 400, laser_plane_z: float = 100.0, bounds=(0.0, 60.0)):
    """Named task sized from the model's workspace: ``circle``, ``square`` or ``laser-circle``.

    The square shares the circle's center and has the circle radius as its
    half-diagonal, so its corners lie on the circle.
    """
    if name == "laser-circle":
        task, info = design_circle_task(model, fraction, k, dwell, bounds, laser_plane_z=laser_plane_z)
    elif name in ("circle", "square"):
        task, info = design_circle_task(model, fraction, k, dwell, bounds)
        if name == "square":
            center = (0.0, 0.0, info["height"])
            task = make_task("square", {"center": center, "side": info["radius"] * math.sqrt(2.0), "k": k,
                                        "dwell": dwell})
    else:
        raise ValueError(f"unknown task {name!r}; expected circle, square or laser-circle")
    return replace(task, episode_length=episode_length, name=name), info


def task_to_dict(task: TaskSpec) -> dict:
    out = {"kind": task.kind, "name": task.name, "waypoints": task.waypoints.tolist(), "dwell": task.dwell,
           "episode_length": task.episode_length, "error_mode": task.error_mode}
    if task.plane is not None:
        out["plane"] = {"normal": task.plane.normal.tolist(), "offset": task.plane.offset}
    if task.body_targets is not None:
        out["body_targets"] = np.asarray(task.body_targets).tolist()
    return out


def task_from_dict(d: dict) -> TaskSpec:
    plane = Plane(np.array(d["plane"]["normal"]), d["plane"]["offset"]) if "plane" in d else None
    body = np.array(d["body_targets"]) if "body_targets" in d else None
    return TaskSpec(d["kind"], np.array(d["waypoints"]), plane, d["dwell"], d["episode_length"],
                    d.get("error_mode", "tip"), body, d.get("name", ""))


# --- trajectory logs -----------------------------------------------------------

TRAJECTORY_COLUMNS = ["t", "p1", "p2", "p3", "d1", "d2", "d3", "tip_x", "tip_y", "tip_z",
                      "target_x", "target_y", "target_z", "reward"]


def write_trajectory(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRAJECTORY_COLUMNS)
        for r in rows:
            wr.writerow([r[c] if c == "t" else repr(float(r[c])) for c in TRAJECTORY_COLUMNS])
