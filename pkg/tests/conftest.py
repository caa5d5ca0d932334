import json
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_KATS_PATH = os.path.join(os.path.dirname(__file__), "data", "kats.json")


@pytest.fixture(scope="session")
def kats():
    with open(_KATS_PATH, encoding="utf-8") as fh:
        return json.load(fh)


class FakeClock:
    """Deterministic clock for freshness and expiry logic."""

    def __init__(self, start: float = 1_706_140_800.0):
        self.t = float(start)

    def now(self) -> float:
        return self.t

    def advance(self, seconds: float) -> None:
        self.t += seconds

    def __call__(self) -> float:
        return self.t


@pytest.fixture
def clock():
    return FakeClock()
