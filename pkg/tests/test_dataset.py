from dataclasses import replace

import numpy as np
import pytest

from softctl.dataset import (
    Dataset,
    SweepPlan,
    bidirectional_level_fraction,
    build_splits,
    collect,
    direction_chi2,
    direction_signs,
    generate_sweep,
    load_csv,
    load_splits,
    save_csv,
    split_and_save,
)
from softctl.plant import Plant, PlantParams

P = PlantParams(hysteresis_halfwidth=1.6)


@pytest.mark.parametrize("ordering", ["snake", "spiral-snake"])
def test_single_pass_grid_sweeps(ordering):
    targets = generate_sweep(SweepPlan(steps_per_axis=24, ordering=ordering))
    assert len(targets) == 13824
    assert len(np.unique(targets, axis=0)) == 13824
    step = 60.0 / 23
    delta = np.abs(np.diff(targets, axis=0))
    assert np.all((delta > 1e-9).sum(axis=1) == 1)
    np.testing.assert_allclose(delta.sum(axis=1), step, rtol=1e-12)


def test_smallest_grid():
    targets = generate_sweep(SweepPlan(steps_per_axis=2, ordering="snake"))
    assert len(targets) == 8
    assert len(np.unique(targets, axis=0)) == 8
    assert np.all((np.abs(np.diff(targets, axis=0)) > 0).sum(axis=1) == 1)


def test_plain_snake_outer_chamber_only_rises():
    d = direction_signs(generate_sweep(SweepPlan(steps_per_axis=6, ordering="snake")))
    assert np.all(d[:, 2] == 1)


def test_multipass_default_counts_and_steps():
    plan = SweepPlan()
    targets = generate_sweep(plan)
    assert len(targets) == plan.total == 13824
    n3 = plan.levels ** 3
    assert plan.levels == 12
    for q in range(8):
        block = targets[q * n3:(q + 1) * n3]
        assert len(np.unique(block, axis=0)) == n3
        delta = np.abs(np.diff(block, axis=0))
        assert np.all((delta > 1e-9).sum(axis=1) == 1)


def test_multipass_revisits_triples_with_new_directions():
    targets = generate_sweep(SweepPlan())
    d = direction_signs(targets)
    seen = {}
    for p, s in zip(map(tuple, targets), map(tuple, d)):
        seen.setdefault(p, set()).add(s)
    frac = np.mean([len(v) >= 2 for v in seen.values()])
    assert frac >= 0.3
    # every chamber is recorded both rising and falling
    assert np.all((d > 0).mean(axis=0) > 0.3) and np.all((d < 0).mean(axis=0) > 0.3)


def test_random_runs_are_in_bounds_and_seeded():
    plan = SweepPlan(ordering="random-runs", n_samples=500, seed=3)
    a = generate_sweep(plan, (0, 60))
    assert a.shape == (500, 3)
    assert a.min() >= 0 and a.max() <= 60
    np.testing.assert_array_equal(a, generate_sweep(plan, (0, 60)))
    assert not np.array_equal(a, generate_sweep(replace(plan, seed=4), (0, 60)))


def test_direction_sign_rules():
    p = np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0], [0.5, 0, 2], [0.5, 0, 1]], dtype=float)
    d = direction_signs(p)
    np.testing.assert_array_equal(d, [[1, 1, 1], [1, 1, 1], [1, 1, 1], [-1, 1, 1], [-1, 1, -1]])


def test_collect_noiseless_single_read_and_first_directions():
    targets = generate_sweep(SweepPlan(steps_per_axis=3, ordering="snake"))
    a = collect(Plant(P), targets, reads=20)
    b = collect(Plant(P), targets, reads=1)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.d[0], [1, 1, 1])
    assert a.y.shape == (27, 15)


def test_collect_noisy_averages():
    noisy = replace(P, noise_sigma=0.2)
    targets = np.zeros((5, 3))
    one = collect(Plant(noisy, seed=1), targets, reads=1)
    many = collect(Plant(noisy, seed=1), targets, reads=100)
    assert np.std(many.y[:, -1]) < np.std(one.y[:, -1])


def test_descending_run_labels():
    # second nesting axis (chamber 2) falls during odd layers of the snake
    targets = generate_sweep(SweepPlan(steps_per_axis=4, ordering="snake"))
    ds = collect(Plant(P), targets)
    falling = np.where(np.diff(targets[:, 1]) < 0)[0] + 1
    assert len(falling) > 0
    assert np.all(ds.d[falling, 1] == -1)


def test_labels_consistent_with_pressure_path():
    splits = build_splits(P, SweepPlan(steps_per_axis=4), 50, 50, seed=2)
    for ds in splits.values():
        np.testing.assert_array_equal(direction_signs(ds.p), ds.d)
        assert set(np.unique(ds.d)) <= {-1.0, 1.0}


def test_split_counts_and_round_trip(tmp_path):
    stem = tmp_path / "run" / "data"
    splits = split_and_save(P, SweepPlan(steps_per_axis=4), stem, 30, 20, seed=5)
    loaded = load_splits(stem)
    assert {k: len(v) for k, v in loaded.items()} == {"train": 64, "val": 30, "test": 20}
    for k in loaded:
        np.testing.assert_array_equal(loaded[k].p, splits[k].p)
        np.testing.assert_array_equal(loaded[k].d, splits[k].d)
        np.testing.assert_array_equal(loaded[k].y, splits[k].y)
    assert (tmp_path / "run" / "data.meta.json").exists()
    header = (tmp_path / "run" / "data.train.csv").read_text().splitlines()[0]
    assert header.startswith("p1,p2,p3,d1,d2,d3,x1,y1,z1,") and header.endswith("x5,y5,z5")


def test_split_files_byte_identical_on_rerun(tmp_path):
    plan = SweepPlan(steps_per_axis=4)
    split_and_save(P, plan, tmp_path / "a", 10, 10, seed=1)
    split_and_save(P, plan, tmp_path / "b", 10, 10, seed=1)
    for k in ("train", "val", "test"):
        assert (tmp_path / f"a.{k}.csv").read_bytes() == (tmp_path / f"b.{k}.csv").read_bytes()


def test_val_test_marginals_differ_from_train():
    splits = build_splits(P, SweepPlan(), 1000, 1000, seed=0)
    assert direction_chi2(splits["train"], splits["val"]) > 0
    assert direction_chi2(splits["train"], splits["test"]) > 0
    assert bidirectional_level_fraction(splits["train"]) >= 0.3


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        load_csv(path)


def test_save_reports_path(tmp_path):
    ds = Dataset(np.zeros((1, 3)), np.ones((1, 3)), np.zeros((1, 6)))
    with pytest.raises(OSError, match="missing"):
        save_csv(ds, tmp_path / "missing" / "x.csv")


@pytest.mark.parametrize("n", [4, 6, 24])
def test_multipass_total_is_cube(n):
    assert len(generate_sweep(SweepPlan(steps_per_axis=n))) == n ** 3


@pytest.mark.parametrize("n", [2, 5])
def test_multipass_rejects_odd_or_tiny_grids(n):
    with pytest.raises(ValueError):
        SweepPlan(steps_per_axis=n)
