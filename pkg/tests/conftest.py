from __future__ import annotations

import numpy as np
import pytest

from fep.data import SyntheticSpec, analytic_template_model, generate_dataset
from fep.models import TemplateModel, TinyConvModel
from fep.tensor import ClipShape

# acceptance results collected during the run, reported in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_spec():
    return SyntheticSpec()


@pytest.fixture(scope="session")
def desk_items(desk_spec):
    return generate_dataset(desk_spec, 8)


@pytest.fixture(scope="session")
def desk_template(desk_spec):
    return analytic_template_model(desk_spec)


@pytest.fixture
def small_template(rng):
    shape = ClipShape(4, 2, 8, 8)
    return TemplateModel(rng.normal(size=(3,) + shape.dims), rng.normal(size=3), temperature=2.0)


@pytest.fixture
def small_conv():
    return TinyConvModel.random(ClipShape(4, 2, 8, 8), num_classes=3, channels=4, seed=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
