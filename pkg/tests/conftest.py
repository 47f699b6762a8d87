import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geogan.raster import CityStack

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_stack(n=16, seed=0, water=None, km=1.5, city_id="t-city", **overrides):
    """Small valid raw-unit stack; ``overrides`` replace individual layers."""
    rng = np.random.default_rng(seed)
    layers = {
        "pop": rng.uniform(0, 5000, (n, n)),
        "lum": rng.uniform(0, 180, (n, n)),
        "bld": rng.uniform(0, 1, (n, n)),
        "water": np.zeros((n, n)) if water is None else water,
        "boundary": np.ones((n, n)),
    }
    layers.update(overrides)
    layers["bld"] = layers["bld"] * (1 - layers["water"])
    return CityStack(layers, km_per_px=km, city_id=city_id)


@pytest.fixture
def stack():
    return make_stack()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Twelve 32 px synthetic cities written through the CLI."""
    from geogan.cli import main

    out = tmp_path_factory.mktemp("tiny") / "data"
    assert main(["synth", "--n", "12", "--seed", "3", "--size", "32", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def tiny_model(tiny_data, tmp_path_factory):
    """One-epoch, narrow model trained on ``tiny_data``."""
    from geogan.cli import main

    out = tmp_path_factory.mktemp("tiny_run")
    code = main(["train", "--data", str(tiny_data), "--out", str(out), "--epochs", "1",
                 "--base-width", "4", "--threads", "1", "--batch", "4"])
    assert code == 0
    return out / "model.gckp"


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
