import numpy as np
import pytest
from hypothesis import settings

from outlierbft.detector import DetectorConfig, train
from outlierbft.fusion import DeviceLayout
from outlierbft.synth import LowRankSource, make_rng

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


def low_rank(b: int, T: int, rank: int, seed: int, sigma: float = 0.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((b, rank)) @ rng.standard_normal((rank, T))
    if sigma:
        D = D + sigma * rng.standard_normal((b, T))
    return D


@pytest.fixture(scope="session")
def source_100():
    """100 one-feature devices, rank 5, sigma 0.01, heterogeneous units."""
    layout = DeviceLayout.uniform(100, 1)
    return LowRankSource.create(layout, 5, 0.01, seed=11)


@pytest.fixture(scope="session")
def model_100(source_100):
    D = source_100.sample(100, make_rng(11, 1))
    return train((source_100.layout, D), DetectorConfig(0.05, 0.05))


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
            terminalreporter.write_line(ACCEPTANCE[cid])
