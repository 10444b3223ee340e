from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.core.config import settings
from app.domains.envpair.layouts import make_named_pair
from app.domains.envpair.models import ProcessPair


def pytest_collection_modifyitems(config, items):
    if os.environ.get("A2D_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set A2D_RUN_SLOW=1 to run learning acceptance runs")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def frozen_lake() -> ProcessPair:
    return make_named_pair("frozen_lake")


@pytest.fixture(scope="session")
def frozen_lake_visible() -> ProcessPair:
    return make_named_pair("frozen_lake_visible")


@pytest.fixture(scope="session")
def tiger_door_0() -> ProcessPair:
    return make_named_pair("tiger_door_0")


@pytest.fixture(scope="session")
def tiger_door_1() -> ProcessPair:
    return make_named_pair("tiger_door_1")


@pytest.fixture
def output_root(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    root = tmp_path / "runs"
    monkeypatch.setattr(settings, "A2D_OUTPUT_ROOT", str(root))
    return root
