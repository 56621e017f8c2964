import random

import pytest

from enclavetap.boundary import BoundaryConfig, MemoryEnv
from enclavetap.wire import ChannelKeys


@pytest.fixture
def env() -> MemoryEnv:
    # small arenas keep per-test memory low; defaults are exercised elsewhere
    return MemoryEnv(BoundaryConfig(trusted_capacity_bytes=8 << 20, untrusted_capacity_bytes=64 << 20))


@pytest.fixture
def keys() -> ChannelKeys:
    return ChannelKeys.from_secret(b"test-secret")


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xE7A9)


def rand_fid(rng: random.Random) -> bytes:
    return rng.randbytes(13)
