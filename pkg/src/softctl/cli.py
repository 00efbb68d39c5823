"""Command-line pipeline: gen-data -> train-model -> train-policy -> evaluate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, default_ini, load_config
from .dataset import load_splits, split_and_save, split_paths
from .hwbnn import (
    DEFAULT_ARCHITECTURES,
    ablation_compare,
    best_by_mode,
    compute_range_weights,
    evaluate as evaluate_model,
    load_model,
    make_body_model,
    save_model,
    train,
    write_ablation_csv,
)
from .mlp import write_sidecar
from .plant import PlantParams, calibrate_hysteresis, updown_sweep_deviation
from .ppo import evaluate_policy, load_policy, train_policy, write_curve
from .rlenv import (
    EnvConfig,
    SoftRobotEnv,
    design_task,
    task_from_dict,
    task_to_dict,
    write_trajectory,
)

log = logging.getLogger("softctl")

TASKS = ("circle", "square", "laser-circle")


class UsageError(Exception):
    pass


def run_metadata(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "config_sha256": cfg.digest(), "config": cfg.values, "seed": cfg.seed,
            "versions": {"softctl": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__}, **extra}


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from None


def _write_json(path, obj) -> None:
    write_sidecar(path, obj)


# --- gen-data ---------------------------------------------------------------

def resolve_plant(cfg: RunConfig) -> tuple[PlantParams, dict]:
    """Plant parameters with the hysteresis half-width fixed (calibrating if asked)."""
    p = cfg["plant"]
    base = cfg.plant_params()
    t0 = time.perf_counter()
    if p["hysteresis_halfwidth"] >= 0:
        h = float(p["hysteresis_halfwidth"])
        source = "configured"
    else:
        h = calibrate_hysteresis(base, p["hysteresis_fraction"])
        source = "calibrated"
    params = cfg.plant_params(h)
    deviation = updown_sweep_deviation(params) / params.length_rest
    summary = {"hysteresis_halfwidth": h, "source": source, "target_fraction": p["hysteresis_fraction"],
               "updown_deviation_fraction": deviation, "seconds": time.perf_counter() - t0}
    return params, summary


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    params, calib = resolve_plant(cfg)
    d = cfg["dataset"]
    stem = out / "data"
    meta = run_metadata(cfg, "gen-data", plant=params.to_dict(), calibration=calib)
    splits = split_and_save(params, cfg.sweep_plan(), stem, d["val_count"], d["test_count"], cfg.seed,
                            d["reads"], extra_meta=meta)
    counts = {k: len(v) for k, v in splits.items()}
    print(f"hysteresis half-width {calib['hysteresis_halfwidth']:.5f} kPa ({calib['source']}), "
          f"up/down tip deviation {100 * calib['updown_deviation_fraction']:.3f}% of length")
    print(f"samples: train {counts['train']}, val {counts['val']}, test {counts['test']} -> {stem}.*.csv")
    return {"counts": counts, "calibration": calib, "stem": str(stem)}


# --- train-model ------------------------------------------------------------

def cmd_train_model(cfg: RunConfig, out: Path, data_stem=None, input_mode=None, ablation=False,
                    epochs=None) -> dict:
    data_stem = Path(data_stem) if data_stem else out / "data"
    splits = load_splits(data_stem)
    data_meta = _read_json(split_paths(data_stem)["meta"])
    plant = data_meta.get("plant")
    mode = input_mode or cfg["model"]["input_mode"]
    if ablation:
        tcfg = cfg.train_config(epochs or cfg["model"]["ablation_epochs"])
        t0 = time.perf_counter()
        rows, models = ablation_compare(splits, DEFAULT_ARCHITECTURES, tcfg)
        seconds = time.perf_counter() - t0
        write_ablation_csv(rows, out / "ablation.csv")
        best = best_by_mode(rows)
        ratio = best["6d"]["test_mse"] / best["3d"]["test_mse"]
        for m in ("6d", "3d"):
            key = (best[m]["architecture"], m)
            save_model(models[key], out / f"model-{m}.bin",
                       run_metadata(cfg, "train-model", plant=plant, data=str(data_stem), row=best[m]))
        report = {"rows": rows, "best": best, "ratio_6d_over_3d": ratio, "seconds": seconds}
        _write_json(out / "ablation.json", run_metadata(cfg, "train-model --ablation", **report))
        for r in rows:
            print(f"{r['architecture']:>16} {r['input_mode']}  test MSE {r['test_mse']:.5f}  "
                  f"weighted {r['test_wmse']:.5f}")
        print(f"best 6d / best 3d test MSE = {ratio:.4f} ({seconds:.0f} s)")
        return report
    model = make_body_model(splits["train"], cfg.hidden(), mode, cfg.seed, cfg["model"]["activation"])
    weights = compute_range_weights(splits["train"].y)
    model, history = train(model, splits["train"], splits["val"], cfg.train_config(epochs), weights)
    metrics = {k: evaluate_model(model, splits[k], weights) for k in ("train", "val", "test")}
    path = out / "model.bin"
    save_model(model, path, run_metadata(cfg, "train-model", plant=plant, data=str(data_stem), metrics=metrics,
                                         epochs=history[-1]["epoch"] if history else 0))
    print(f"{mode} model {'x'.join(map(str, cfg.hidden()))}: test MSE {metrics['test']['mse']:.5f} mm^2 "
          f"-> {path}")
    return {"metrics": metrics, "path": str(path)}


# --- environments -------------------------------------------------------------

def env_config(cfg: RunConfig, model, mode="surrogate", plant: dict | None = None, seed=0,
               shaping: bool = False) -> EnvConfig:
    p, t = cfg["plant"], cfg["task"]
    plant_params = PlantParams(**plant) if plant else None
    return EnvConfig(model, p["pressure_min"], p["pressure_max"], t["action_bound"], mode, seed,
                     length_scale=p["length_rest"], error_scale=t["error_scale"], plant=plant_params,
                     shaping_scale=t["shaping_scale"] if shaping else 0.0)


def build_task(cfg: RunConfig, model, name: str):
    t, p = cfg["task"], cfg["plant"]
    return design_task(model, name, t["radius_fraction"], t["k"], t["dwell"], t["episode_length"],
                       t["laser_plane_z"], (p["pressure_min"], p["pressure_max"]))


# --- train-policy ---------------------------------------------------------------

def cmd_train_policy(cfg: RunConfig, out: Path, model_path=None, task_name=None, steps=None) -> dict:
    model_path = Path(model_path) if model_path else out / "model.bin"
    model = load_model(model_path)
    model_meta = _read_json(str(model_path) + ".json")
    name = task_name or cfg["task"]["name"]
    task, task_info = build_task(cfg, model, name)
    if cfg["task"]["error_mode"] != "tip":
        raise ConfigError("only tip error mode can be built from the command line")
    pcfg = cfg.ppo_config(steps)
    ecfg = env_config(cfg, model, shaping=True)
    path = out / f"policy-{name}.bin"
    curve_path = out / f"curve-{name}.csv"
    t0 = time.perf_counter()
    res = train_policy(lambda i: SoftRobotEnv(ecfg, task), pcfg, eval_env=SoftRobotEnv(env_config(cfg, model), task),
                       curve_path=curve_path, checkpoint_path=path)
    seconds = time.perf_counter() - t0
    meta = run_metadata(cfg, "train-policy", model=str(model_path), plant=model_meta.get("plant"),
                        task=task_to_dict(task), task_info=task_info, ppo=asdict(pcfg), best_eval=res.best_eval,
                        aborted=res.aborted, seconds=seconds,
                        obs_layout="keys/L (3n), error/error_scale (3n), p/range (3), d (3), t/T (1)")
    _write_json(str(path) + ".json", meta)
    print(f"{name}: {len(res.curve)} updates, best deterministic tip error "
          f"{res.best_eval['mean_error']:.4f} mm ({seconds:.0f} s) -> {path}")
    if res.aborted:
        raise RuntimeError(f"policy training aborted on KL divergence after {len(res.curve)} updates; "
                           f"partial artifacts in {out}")
    return {"best_eval": res.best_eval, "path": str(path), "curve": str(curve_path), "seconds": seconds}


# --- evaluate ----------------------------------------------------------------------

def per_waypoint_errors(task, errors) -> list[float]:
    idx = np.array([task.waypoint_index(t) for t in range(len(errors))])
    return [float(np.mean(np.asarray(errors)[idx == k])) for k in range(len(task.waypoints)) if np.any(idx == k)]


def cmd_evaluate(cfg: RunConfig, out: Path, policy_path=None, model_path=None, task_name=None,
                 modes=("surrogate", "deploy")) -> dict:
    name = task_name or cfg["task"]["name"]
    policy_path = Path(policy_path) if policy_path else out / f"policy-{name}.bin"
    pmeta = _read_json(str(policy_path) + ".json")
    policy = load_policy(policy_path)
    model = load_model(model_path or pmeta["model"])
    task = task_from_dict(pmeta["task"])
    plant = pmeta.get("plant")
    results = {}
    paths = {}
    for mode in modes:
        if mode == "deploy" and not plant:
            raise ConfigError("deploy mode needs plant parameters in the model metadata")
        env = SoftRobotEnv(env_config(cfg, model, mode, plant, cfg.seed), task)
        ep = _record_episode(env, policy)
        errors = [r["error"] for r in ep["rows"]]
        m = {"mode": mode, "task": name, "mean_error_mm": float(np.mean(errors)),
             "max_error_mm": float(np.max(errors)), "mean_reward": ep["mean_reward"],
             "per_waypoint_error_mm": per_waypoint_errors(task, errors),
             "mean_error_fraction_of_length": float(np.mean(errors)) / cfg["plant"]["length_rest"]}
        if task.kind == "laser-track":
            diameter = pmeta["task_info"]["workspace_diameter"]
            m["error_kind"] = "laser intersection point on the plane"
            m["workspace_diameter_mm"] = diameter
            m["mean_error_fraction_of_workspace_diameter"] = m["mean_error_mm"] / diameter
        stem = out / f"eval-{name}-{mode}"
        write_trajectory(ep["trajectory"], f"{stem}.trajectory.csv")
        _write_json(f"{stem}.metrics.json", run_metadata(cfg, "evaluate", policy=str(policy_path), metrics=m))
        results[mode] = m
        paths[mode] = ep["trajectory"]
        print(f"{name} [{mode}]: mean error {m['mean_error_mm']:.4f} mm, max {m['max_error_mm']:.4f} mm")
    svg = out / f"eval-{name}.svg"
    write_svg(svg, task.waypoints, {k: np.array([[r["tip_x"], r["tip_y"]] for r in v]) for k, v in paths.items()},
              title=f"{name}: target vs achieved (X-Y)")
    return results


def _record_episode(env: SoftRobotEnv, policy) -> dict:
    obs = env.reset(env.config.seed)
    rows, traj, done = [], [], False
    while not done:
        a, _, _, _ = policy.act(obs[None], deterministic=True)
        obs, r, done, info = env.step(a[0])
        rows.append({"reward": r, **info})
        traj.append({"t": env.t, "p1": env.p[0], "p2": env.p[1], "p3": env.p[2],
                     "d1": env.d[0], "d2": env.d[1], "d3": env.d[2],
                     "tip_x": info["achieved"][0], "tip_y": info["achieved"][1], "tip_z": info["achieved"][2],
                     "target_x": info["target"][0], "target_y": info["target"][1], "target_z": info["target"][2],
                     "reward": r})
    return {"rows": rows, "trajectory": traj, "mean_reward": float(np.mean([r["reward"] for r in rows]))}


STROKES = {"target": 'stroke="#222" stroke-dasharray="6 4"', "surrogate": 'stroke="#1f77b4"',
           "deploy": 'stroke="#d62728"'}


def write_svg(path, target, achieved: dict, title: str = "", size: int = 480) -> None:
    """X-Y overlay: closed target path plus one polyline per achieved path, fixed viewBox."""
    pts = [np.asarray(target)[:, :2]] + [np.asarray(v) for v in achieved.values()]
    allp = np.vstack(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    mid = (lo + hi) / 2
    margin = 40

    def xy(p):
        s = (size - 2 * margin) / span
        return (margin + (p[:, 0] - mid[0]) * s + (size - 2 * margin) / 2,
                size - margin - ((p[:, 1] - mid[1]) * s + (size - 2 * margin) / 2))

    def poly(p, style, closed=False):
        x, y = xy(p)
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y))
        tag = "polygon" if closed else "polyline"
        return f'<{tag} points="{coords}" fill="none" stroke-width="1.5" {style}/>'

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" y2="{size - margin}" stroke="#888"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" stroke="#888"/>',
             f'<text x="{size / 2}" y="{size - 10}" font-size="12" text-anchor="middle">x (mm), span {span:.2f}</text>',
             f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})" '
             f'text-anchor="middle">y (mm)</text>',
             f'<text x="{size / 2}" y="20" font-size="13" text-anchor="middle">{title}</text>',
             poly(np.asarray(target)[:, :2], STROKES["target"], closed=True)]
    for i, (k, v) in enumerate(achieved.items()):
        lines.append(poly(v, STROKES.get(k, 'stroke="#2ca02c"')))
        lines.append(f'<text x="{size - margin}" y="{margin + 14 * i}" font-size="11" text-anchor="end" '
                     f'{STROKES.get(k, "")}>{k}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


# --- entry point ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="softctl", description=__doc__.splitlines()[0])
    parser.add_argument("--print-default-config", action="store_true", help="print the default INI and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="override [output] seed")
        p.add_argument("--out", help="run directory (overrides [output] run_dir)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="calibrate the plant and write train/val/test CSVs")
    common(p)
    p.add_argument("--steps-per-axis", type=int)

    p = sub.add_parser("train-model", help="train the body model or run the architecture ablation")
    common(p)
    p.add_argument("--data", help="dataset stem (default <out>/data)")
    p.add_argument("--input-mode", choices=("6d", "3d"))
    p.add_argument("--ablation", action="store_true", help="six-architecture sweep in both input modes")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-policy", help="train a PPO tracking policy on the learned model")
    common(p)
    p.add_argument("--model", help="body model checkpoint (default <out>/model.bin)")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--steps", type=int, help="environment step budget")

    p = sub.add_parser("evaluate", help="deterministic episodes in surrogate and deploy modes")
    common(p)
    p.add_argument("--policy", help="policy checkpoint (default <out>/policy-<task>.bin)")
    p.add_argument("--model", help="body model checkpoint (default: the one the policy was trained on)")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--mode", choices=("surrogate", "deploy", "both"), default="both")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.print_default_config:
            print(default_ini())
            return 0
        if args.command is None:
            raise UsageError("softctl: a command is required (gen-data, train-model, train-policy, evaluate)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.set("output", "seed", args.seed)
        if args.out is not None:
            cfg.set("output", "run_dir", str(Path(args.out).resolve()))
        if getattr(args, "steps_per_axis", None) is not None:
            cfg.set("dataset", "steps_per_axis", args.steps_per_axis)
        cfg.plant_params()
        cfg.sweep_plan()
        cfg.ppo_config()
        out = cfg.run_dir
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train-model":
            cmd_train_model(cfg, out, args.data, args.input_mode, args.ablation, args.epochs)
        elif args.command == "train-policy":
            cmd_train_policy(cfg, out, args.model, args.task, args.steps)
        elif args.command == "evaluate":
            modes = ("surrogate", "deploy") if args.mode == "both" else (args.mode,)
            cmd_evaluate(cfg, out, args.policy, args.model, args.task, modes)
        (out / "config.ini").write_text(cfg.to_ini())
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime faults: report and exit 2
        log.debug("fault", exc_info=True)
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
