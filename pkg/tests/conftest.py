from __future__ import annotations

import math
import sys
from functools import lru_cache
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nathermo.heisenberg import (  # noqa: E402
    HeisenbergParams,
    build_driven_model,
    build_exchange_model,
)


@lru_cache(maxsize=None)
def exchange_setup(theta: float, **kw):
    return build_exchange_model(HeisenbergParams(theta=theta, **kw))


@lru_cache(maxsize=None)
def driven_setup(theta: float, g0: float = 10.0, g_tau: float = 0.1):
    return build_driven_model(HeisenbergParams(theta=theta, g0=g0, g_tau=g_tau))


@pytest.fixture
def exchange():
    return exchange_setup


@pytest.fixture
def driven():
    return driven_setup


HALF_PI = math.pi / 2
