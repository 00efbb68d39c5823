import pytest

from softctl.dataset import SweepPlan, build_splits
from softctl.hwbnn import TrainConfig, make_body_model, train
from softctl.plant import PlantParams


@pytest.fixture(scope="session")
def small_body_model():
    """A quickly trained 6d body model of a plant with moderate hysteresis."""
    params = PlantParams(hysteresis_halfwidth=1.6)
    splits = build_splits(params, SweepPlan(steps_per_axis=14), val_count=200, test_count=200)
    model = make_body_model(splits["train"], hidden=(64, 64, 64), seed=0)
    model, _ = train(model, splits["train"], splits["val"], TrainConfig(max_epochs=60, batch_size=128))
    return model


@pytest.fixture(scope="session")
def small_plant_params():
    return PlantParams(hysteresis_halfwidth=1.6)


_acceptance_lines: list[str] = []


@pytest.fixture()
def report():
    """Record one pass/fail line for the end-of-run acceptance summary and echo it."""

    def _report(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _acceptance_lines.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
