"""Quasi-static pressure sweeps, direction labelling and the CSV dataset format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .plant import Plant, PlantParams

ORDERINGS = ("multipass-snake", "snake", "spiral-snake", "random-runs")

MULTIPASS_PASSES = 8  # 2**3, so 8 passes over n/2 levels use exactly n**3 targets

# nesting orders (outer, middle, inner) used by successive passes
_PERMS = [(2, 1, 0), (0, 2, 1), (1, 0, 2), (2, 0, 1), (1, 2, 0), (0, 1, 2)]


@dataclass(frozen=True)
class SweepPlan:
    steps_per_axis: int = 24
    ordering: str = "multipass-snake"
    seed: int = 0
    n_samples: int = 1000  # random-runs only; grid orderings visit steps_per_axis**3 points
    run_step_min: float = 2.0  # kPa, random-runs step size range
    run_step_max: float = 6.0

    def __post_init__(self):
        if self.steps_per_axis < 2:
            raise ValueError("steps_per_axis must be >= 2")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.ordering == "multipass-snake" and (self.steps_per_axis % 2 or self.steps_per_axis < 4):
            raise ValueError("multipass-snake needs an even steps_per_axis >= 4")

    @property
    def total(self) -> int:
        if self.ordering == "random-runs":
            return self.n_samples
        return self.steps_per_axis ** 3

    @property
    def levels(self) -> int:
        """Pressure levels per axis actually visited."""
        return self.steps_per_axis // 2 if self.ordering == "multipass-snake" else self.steps_per_axis


@dataclass
class Dataset:
    p: np.ndarray  # (N, 3) kPa
    d: np.ndarray  # (N, 3) in {-1, +1}
    y: np.ndarray  # (N, 3n) mm

    def __len__(self):
        return len(self.p)

    @property
    def n_keys(self) -> int:
        return self.y.shape[1] // 3

    def inputs(self, mode: str = "6d") -> np.ndarray:
        if mode == "6d":
            return np.hstack([self.p, self.d])
        if mode == "3d":
            return self.p.copy()
        raise ValueError(f"unknown input mode {mode!r}")


def _boustrophedon(shape):
    """Grid indices in snake order; the last axis varies fastest."""
    if len(shape) == 1:
        return [(i,) for i in range(shape[0])]
    inner = _boustrophedon(shape[1:])
    out = []
    for i in range(shape[0]):
        seq = inner if i % 2 == 0 else inner[::-1]
        out.extend((i,) + t for t in seq)
    return out


def _spiral(n):
    """Cells of an n x n grid along an inward spiral starting at (0, 0)."""
    top, bottom, left, right = 0, n - 1, 0, n - 1
    out = []
    while top <= bottom and left <= right:
        out.extend((top, c) for c in range(left, right + 1))
        out.extend((r, right) for r in range(top + 1, bottom + 1))
        if top < bottom:
            out.extend((bottom, c) for c in range(right - 1, left - 1, -1))
        if left < right:
            out.extend((r, left) for r in range(bottom - 1, top, -1))
        top, bottom, left, right = top + 1, bottom - 1, left + 1, right - 1
    return out


def _random_runs(plan: SweepPlan, lo: float, hi: float) -> np.ndarray:
    # every chamber walks monotonically toward its own random goal, then draws a new one
    rng = np.random.default_rng(plan.seed)
    p = np.full(3, lo)
    goal = rng.uniform(lo, hi, 3)
    step = rng.uniform(plan.run_step_min, plan.run_step_max, 3)
    out = np.empty((plan.n_samples, 3))
    for t in range(plan.n_samples):
        for c in range(3):
            gap = goal[c] - p[c]
            p[c] = goal[c] if abs(gap) <= step[c] else p[c] + np.sign(gap) * step[c]
            if p[c] == goal[c]:
                goal[c] = rng.uniform(lo, hi)
                step[c] = rng.uniform(plan.run_step_min, plan.run_step_max)
        out[t] = p
    return out


def _snake_pass(n, perm, corner):
    """One boustrophedon over the n^3 grid with nesting ``perm`` starting at ``corner``."""
    idx = np.empty((n ** 3, 3), dtype=int)
    for row, t in enumerate(_boustrophedon((n, n, n))):
        for axis, v in zip(perm, t):
            idx[row, axis] = n - 1 - v if corner[axis] else v
    return idx


def generate_sweep(plan: SweepPlan, bounds=(0.0, 60.0)) -> np.ndarray:
    """Ordered pressure targets, shape ``(N, 3)``.

    ``snake`` is the plain 3D boustrophedon: chamber 3 is the outermost axis, so it
    only ever rises. ``spiral-snake`` walks chambers 2/3 along an inward spiral and
    snakes chamber 1 in each spiral cell. Both visit every grid point once and
    move exactly one chamber by one grid step per transition.

    ``multipass-snake`` (the training default) spends the same n^3 budget as
    8 snakes over the n/2-level grid, each with a different nesting order and
    start corner, so every pressure triple is reached with several direction
    vectors. Within a pass transitions are single grid steps; passes are joined
    by a direct jump.
    """
    lo, hi = map(float, bounds)
    if not lo < hi:
        raise ValueError("bounds must satisfy lo < hi")
    if plan.ordering == "random-runs":
        return _random_runs(plan, lo, hi)
    n = plan.levels
    levels = np.linspace(lo, hi, n)
    if plan.ordering == "snake":
        idx = _snake_pass(n, (2, 1, 0), (0, 0, 0))
    elif plan.ordering == "spiral-snake":
        rows = []
        for m, (j, k) in enumerate(_spiral(n)):
            seq = range(n) if m % 2 == 0 else range(n - 1, -1, -1)
            rows.extend((i, j, k) for i in seq)
        idx = np.array(rows)
    else:
        corners = [((q >> 0) & 1, (q >> 1) & 1, (q >> 2) & 1) for q in (0, 7, 3, 4, 5, 2, 6, 1)]
        idx = np.vstack([_snake_pass(n, _PERMS[q % len(_PERMS)], corners[q % len(corners)])
                         for q in range(MULTIPASS_PASSES)])
    return levels[idx]


def direction_signs(p, initial=None) -> np.ndarray:
    """+1/-1 per chamber from consecutive pressures; no change keeps the previous sign."""
    p = np.asarray(p, dtype=float)
    d = np.empty_like(p)
    prev = np.ones(p.shape[1]) if initial is None else np.asarray(initial, dtype=float)
    last = p[0]
    for t in range(len(p)):
        delta = p[t] - last if t > 0 else np.zeros(p.shape[1])
        prev = np.where(delta > 0, 1.0, np.where(delta < 0, -1.0, prev))
        d[t] = prev
        last = p[t]
    return d


def collect(plant: Plant, targets, reads: int = 20) -> Dataset:
    """Drive the plant through ``targets`` quasi-statically and record (p, d, keys).

    Each target stands for a settle-then-record window: the plant is read
    ``reads`` times and the key points are averaged.
    """
    targets = np.asarray(targets, dtype=float)
    d = direction_signs(targets)
    n = plant.params.n_keys
    y = np.empty((len(targets), 3 * n))
    for t, p in enumerate(targets):
        keys = plant.eval(p)
        if plant.params.noise_sigma > 0 and reads > 1:
            keys = np.mean([keys] + [plant.eval(p) for _ in range(reads - 1)], axis=0)
        y[t] = keys.ravel()
    return Dataset(targets.copy(), d, y)


def header(n_keys: int) -> list[str]:
    cols = ["p1", "p2", "p3", "d1", "d2", "d3"]
    for i in range(1, n_keys + 1):
        cols += [f"x{i}", f"y{i}", f"z{i}"]
    return cols


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    data = np.hstack([ds.p, ds.d, ds.y])
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header(ds.n_keys)) + "\n")
            np.savetxt(fh, data, fmt="%.17g", delimiter=",")
    except OSError as exc:
        raise OSError(f"could not write dataset {path}: {exc}") from exc


def load_csv(path) -> Dataset:
    path = Path(path)
    try:
        with open(path) as fh:
            cols = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except OSError as exc:
        raise OSError(f"could not read dataset {path}: {exc}") from exc
    if cols[:6] != header(1)[:6] or (len(cols) - 6) % 3 or cols != header((len(cols) - 6) // 3):
        raise ValueError(f"{path}: unexpected header")
    return Dataset(data[:, :3].copy(), data[:, 3:6].copy(), data[:, 6:].copy())


def split_paths(stem) -> dict[str, Path]:
    stem = str(stem)
    return {k: Path(f"{stem}.{k}.csv") for k in ("train", "val", "test")} | {"meta": Path(f"{stem}.meta.json")}


def build_splits(params: PlantParams, plan: SweepPlan, val_count: int = 1000,
                 test_count: int = 1000, seed: int = 0, reads: int = 20) -> dict[str, Dataset]:
    """Training set from the full grid sweep; val/test from independent random-run sweeps."""
    bounds = (params.pressure_min, params.pressure_max)
    ss = np.random.SeedSequence(seed)
    s_train, s_val, s_test = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    train = collect(Plant(params, seed=s_train), generate_sweep(plan, bounds), reads)
    out = {"train": train}
    for name, count, s in (("val", val_count, s_val), ("test", test_count, s_test)):
        run_plan = SweepPlan(plan.steps_per_axis, "random-runs", seed=s, n_samples=count,
                             run_step_min=plan.run_step_min, run_step_max=plan.run_step_max)
        out[name] = collect(Plant(params, seed=s + 1), generate_sweep(run_plan, bounds), reads)
    return out


def split_and_save(params: PlantParams, plan: SweepPlan, stem, val_count: int = 1000,
                   test_count: int = 1000, seed: int = 0, reads: int = 20,
                   extra_meta: dict | None = None) -> dict[str, Dataset]:
    splits = build_splits(params, plan, val_count, test_count, seed, reads)
    paths = split_paths(stem)
    Path(paths["train"]).parent.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        save_csv(ds, paths[name])
    meta = {
        "plant": params.to_dict(),
        "sweep": asdict(plan),
        "seed": seed,
        "reads": reads,
        "counts": {k: len(v) for k, v in splits.items()},
        "units": {"pressure": "kPa", "position": "mm"},
    }
    meta.update(extra_meta or {})
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return splits


def load_splits(stem) -> dict[str, Dataset]:
    paths = split_paths(stem)
    return {k: load_csv(paths[k]) for k in ("train", "val", "test")}


def sign_marginals(ds: Dataset) -> np.ndarray:
    """Fraction of +1 labels per chamber."""
    return (ds.d > 0).mean(axis=0)


def direction_chi2(a: Dataset, b: Dataset) -> float:
    """Chi-square statistic of the per-chamber sign counts of ``b`` against those of ``a``."""
    stat = 0.0
    for c in range(3):
        obs = np.array([(b.d[:, c] > 0).sum(), (b.d[:, c] < 0).sum()], dtype=float)
        frac = np.array([(a.d[:, c] > 0).mean(), (a.d[:, c] < 0).mean()])
        exp = frac * len(b)
        mask = exp > 0
        if np.any(obs[~mask] > 0):
            return float("inf")
        stat += float((((obs - exp) ** 2)[mask] / exp[mask]).sum())
    return stat


def bidirectional_level_fraction(ds: Dataset, decimals: int = 9) -> float:
    """Fraction of (chamber, pressure level) pairs recorded with both direction signs."""
    total = both = 0
    for c in range(3):
        levels = np.round(ds.p[:, c], decimals)
        for v in np.unique(levels):
            signs = np.unique(ds.d[levels == v, c])
            total += 1
            both += len(signs) == 2
    return both / total
