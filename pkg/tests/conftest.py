"""Shared fixtures: small targets, the linear schedule pair, seeded RNGs."""

import pytest

from flexctmc.rand import make_rng
from flexctmc.schedule import SchedulePair
from flexctmc.target import TargetDistribution, bundled_targets


@pytest.fixture
def linear_pair():
    return SchedulePair.all_linear()


@pytest.fixture
def two_atom():
    """{ab: 0.5, b: 0.5} with a=0, b=1."""
    return bundled_targets()["two_atom"]


@pytest.fixture
def three_atom():
    return bundled_targets()["three_atom"]


@pytest.fixture
def mixed_len():
    return bundled_targets()["mixed_len"]


@pytest.fixture
def single_atom():
    return TargetDistribution.from_weights([((0,), 1.0)], vocab_size=2)


@pytest.fixture
def rng():
    return make_rng(0)
