"""INI run configuration: sections plant, dataset, model, ppo, task, output.

Every key has a default below; unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import SweepPlan
from .hwbnn import TrainConfig
from .plant import PlantParams
from .ppo import PpoConfig


class ConfigError(ValueError):
    pass


# key -> (default, type, doc)
SCHEMA = {
    "plant": {
        "length_rest": (70.0, float, "rest length, mm"),
        "radius": (7.5, float, "body radius, mm"),
        "chamber_offset": (4.5, float, "radial chamber offset, mm"),
        "elong_gain": (0.1, float, "elongation per summed pressure, mm/kPa"),
        "bend_gain": (2.5e-4, float, "curvature gain, 1/(mm kPa)"),
        "hysteresis_fraction": (0.034, float, "target up/down tip deviation as a fraction of length"),
        "hysteresis_halfwidth": (-1.0, float, "play half-width in kPa; negative means calibrate"),
        "n_keys": (5, int, "key points per body"),
        "pressure_min": (0.0, float, "kPa"),
        "pressure_max": (60.0, float, "kPa"),
        "noise_sigma": (0.0, float, "key point read noise, mm"),
    },
    "dataset": {
        "steps_per_axis": (24, int, "grid resolution; the training sweep has steps_per_axis**3 targets"),
        "ordering": ("multipass-snake", str, "training sweep ordering"),
        "val_count": (1000, int, "validation samples"),
        "test_count": (1000, int, "test samples"),
        "reads": (20, int, "reads averaged per target"),
        "run_step_min": (2.0, float, "val/test run step range, kPa"),
        "run_step_max": (6.0, float, "kPa"),
    },
    "model": {
        "hidden": ("256,256,256", str, "hidden layer widths"),
        "input_mode": ("6d", str, "6d (pressures and directions) or 3d"),
        "activation": ("relu", str, "hidden activation"),
        "lr": (1e-3, float, "Adam learning rate"),
        "batch_size": (256, int, ""),
        "max_epochs": (300, int, ""),
        "ablation_epochs": (120, int, "epoch cap per architecture in the ablation sweep"),
        "eval_every": (10, int, "epochs between validation checks"),
        "patience": (10, int, "validation checks without improvement before stopping"),
    },
    "ppo": {f.name: (f.default, type(f.default), "") for f in fields(PpoConfig)
            if f.name not in ("seed", "hidden", "action_bound")}
    | {"stagger_steps": (400, int, "desynchronize env i by i * stagger_steps / n_envs warm-up steps")},
    "task": {
        "name": ("circle", str, "circle, square or laser-circle"),
        "k": (40, int, "waypoints"),
        "dwell": (10, int, "steps per waypoint"),
        "episode_length": (400, int, "steps per episode"),
        "radius_fraction": (0.5, float, "circle radius (square half-diagonal) as a fraction of the reachable radius"),
        "laser_plane_z": (100.0, float, "height of the laser target plane, mm"),
        "error_mode": ("tip", str, "tip or whole-body"),
        "action_bound": (3.0, float, "kPa per step"),
        "error_scale": (10.0, float, "tracking error normalization in the observation, mm"),
        "shaping_scale": (10.0, float, "training reward adds -error/shaping_scale, mm (0 disables)"),
    },
    "output": {
        "run_dir": ("runs/default", str, "artifact directory"),
        "seed": (0, int, "master seed"),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: v[0] for k, v in keys.items()}
                                                  for s, keys in SCHEMA.items()})
    source: str | None = None

    def __getitem__(self, section) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return int(self["output"]["seed"])

    @property
    def run_dir(self) -> Path:
        return Path(self["output"]["run_dir"])

    def set(self, section, key, value):
        _check_key(section, key)
        self.values[section][key] = _coerce(section, key, value)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for s, keys in self.values.items():
            cp[s] = {k: str(v) for k, v in keys.items()}
        lines = []
        for s in cp.sections():
            lines.append(f"[{s}]")
            lines += [f"{k} = {v}" for k, v in cp[s].items()]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    # --- typed views -------------------------------------------------------
    def plant_params(self, hysteresis_halfwidth: float = 0.0) -> PlantParams:
        p = self["plant"]
        keys = ("length_rest", "radius", "chamber_offset", "elong_gain", "bend_gain", "n_keys",
                "pressure_min", "pressure_max", "noise_sigma")
        return PlantParams(**{k: p[k] for k in keys}, hysteresis_halfwidth=hysteresis_halfwidth)

    def sweep_plan(self) -> SweepPlan:
        d = self["dataset"]
        return SweepPlan(steps_per_axis=d["steps_per_axis"], ordering=d["ordering"], seed=self.seed,
                         run_step_min=d["run_step_min"], run_step_max=d["run_step_max"])

    def hidden(self) -> tuple:
        try:
            return tuple(int(w) for w in str(self["model"]["hidden"]).split(","))
        except ValueError as exc:
            raise ConfigError(f"model.hidden must be comma-separated integers: {exc}") from None

    def train_config(self, max_epochs: int | None = None) -> TrainConfig:
        m = self["model"]
        return TrainConfig(lr=m["lr"], batch_size=m["batch_size"],
                           max_epochs=max_epochs or m["max_epochs"], eval_every=m["eval_every"],
                           patience=m["patience"], seed=self.seed)

    def ppo_config(self, total_steps: int | None = None) -> PpoConfig:
        kw = dict(self["ppo"])
        if total_steps is not None:
            kw["total_steps"] = total_steps
        return PpoConfig(**kw, seed=self.seed, action_bound=self["task"]["action_bound"])


def _check_key(section, key):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")


def _coerce(section, key, raw):
    default, typ, _ = SCHEMA[section][key]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    if typ is bool:
        states = configparser.ConfigParser.BOOLEAN_STATES
        if str(raw).strip().lower() not in states:
            raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as a boolean")
        return states[str(raw).strip().lower()]
    try:
        return typ(str(raw).strip())
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {typ.__name__}") from None


def load_config(path=None) -> RunConfig:
    """Defaults overlaid with the INI file at ``path``; run_dir is resolved relative to the file."""
    cfg = RunConfig()
    if path is None:
        cfg.values["output"]["run_dir"] = str(Path(cfg["output"]["run_dir"]).resolve())
        return cfg
    path = Path(path)
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in cp.sections():
        for key, raw in cp[section].items():
            cfg.set(section, key, raw)
    run_dir = Path(cfg["output"]["run_dir"])
    if not run_dir.is_absolute():
        run_dir = path.resolve().parent / run_dir
    cfg.values["output"]["run_dir"] = str(run_dir.resolve())
    cfg.source = str(path.resolve())
    return cfg


def default_ini() -> str:
    """Commented default configuration."""
    lines = []
    for s, keys in SCHEMA.items():
        lines.append(f"[{s}]")
        for k, (default, _, doc) in keys.items():
            if doc:
                lines.append(f"# {doc}")
            lines.append(f"{k} = {default}")
        lines.append("")
    return "\n".join(lines)
