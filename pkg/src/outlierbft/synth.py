"""Seeded synthetic device data with a planted low-rank structure.

Clean slots follow ``d_t = offset + unit * (A s_t + sigma * n_t)`` with a
fixed ``b x R`` mixing matrix ``A`` and i.i.d. standard normal ``s_t`` and
``n_t``; ``offset``/``unit`` give every feature its own physical units.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fusion import DeviceLayout

PRNG_NAME = "numpy.random.PCG64"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent PCG64 stream keyed by ``(seed, *stream)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))))


@dataclass
class LowRankSource:
    layout: DeviceLayout
    mixing: np.ndarray
    sigma: float
    offset: np.ndarray
    unit: np.ndarray

    @classmethod
    def create(cls, layout: DeviceLayout, rank: int, sigma: float, seed: int,
               heterogeneous: bool = True) -> "LowRankSource":
        b = layout.total_dim
        if not 1 <= rank < b:
            raise ConfigError(f"rank must satisfy 1 <= rank < b={b}, got {rank}")
        if sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        rng = make_rng(seed, 0)
        mixing = rng.standard_normal((b, rank))
        if heterogeneous:
            offset = rng.uniform(-50.0, 50.0, b)
            unit = 10.0 ** rng.uniform(-1.0, 1.0, b)
        else:
            offset, unit = np.zeros(b), np.ones(b)
        return cls(layout, mixing, float(sigma), offset, unit)

    @property
    def rank(self) -> int:
        return self.mixing.shape[1]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """``b x count`` block of clean slots."""
        s = rng.standard_normal((self.rank, count))
        X = self.mixing @ s
        if self.sigma > 0:
            X = X + self.sigma * rng.standard_normal(X.shape)
        return self.offset[:, None] + self.unit[:, None] * X


def planted_dataset(layout: DeviceLayout, slots: int, rank: int, sigma: float, seed: int,
                    corrupt_fraction: float = 0.0, spike: float = 10.0,
                    heterogeneous: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Clean low-rank data with a fraction of devices spiked in every slot.

    Returns ``(D, labels)`` where ``labels[t, n]`` is 1 for a corrupted device.
    Spikes add ``spike`` times the clean per-feature standard deviation, with a
    random sign per feature.
    """
    if slots < 1:
        raise ConfigError("slot count must be positive")
    if not 0.0 <= corrupt_fraction <= 1.0:
        raise ConfigError("corrupt fraction must lie in [0, 1]")
    src = LowRankSource.create(layout, rank, sigma, seed, heterogeneous)
    rng = make_rng(seed, 1)
    D = src.sample(slots, rng)
    labels = plant_spikes(src, D, corrupt_fraction, spike, rng)
    return D, labels


def plant_spikes(src: LowRankSource, D: np.ndarray, corrupt_fraction: float, spike: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Spike a random ``corrupt_fraction`` of devices in every column of ``D`` (in place)."""
    if not 0.0 <= corrupt_fraction <= 1.0:
        raise ConfigError("corrupt fraction must lie in [0, 1]")
    layout = src.layout
    slots = D.shape[1]
    labels = np.zeros((slots, layout.device_count), dtype=np.int8)
    k = int(round(corrupt_fraction * layout.device_count))
    if k:
        feat_std = src.unit * np.sqrt((src.mixing ** 2).sum(axis=1) + src.sigma ** 2)
        for t in range(slots):
            bad = rng.choice(layout.device_count, size=k, replace=False)
            labels[t, bad] = 1
            for n in bad:
                sl = slice(layout.offsets[n], layout.offsets[n] + layout.dims[n])
                signs = rng.choice([-1.0, 1.0], size=layout.dims[n])
                D[sl, t] += spike * feat_std[sl] * signs
    return labels
