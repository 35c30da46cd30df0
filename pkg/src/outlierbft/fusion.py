"""Multimodal fusion: per-device readings to one fused vector per slot.

Fusion here is plain concatenation in layout order followed (inside the
detector) by per-feature z-scoring.  The training window keeps the last
``capacity`` fused vectors as the columns of a ``b x T`` matrix.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CsvFormatError,
    DimensionMismatchError,
    DuplicateDeviceError,
    InsufficientDataError,
    MissingDeviceError,
    NonFiniteError,
    SlotOrderError,
    UnknownDeviceError,
)

SCALE_FLOOR = 1e-8
DEFAULT_CAPACITY = 100


@dataclass(frozen=True)
class DeviceLayout:
    """Ordered device list with per-device feature dimensions."""

    names: tuple[str, ...]
    dims: tuple[int, ...]
    offsets: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        dims = tuple(int(d) for d in self.dims)
        if not names:
            raise ValueError("layout needs at least one device")
        if len(names) != len(dims):
            raise ValueError("names and dims differ in length")
        if len(set(names)) != len(names):
            raise DuplicateDeviceError("device identifiers must be unique")
        if any(d < 1 for d in dims):
            raise ValueError("every device dimension must be positive")
        offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(dims)[:-1]]))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]]) -> "DeviceLayout":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @classmethod
    def uniform(cls, device_count: int, dim: int = 1, prefix: str = "dev") -> "DeviceLayout":
        width = len(str(device_count - 1))
        return cls(tuple(f"{prefix}{i:0{width}d}" for i in range(device_count)), (dim,) * device_count)

    @property
    def device_count(self) -> int:
        return len(self.names)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def index(self, device_id: str) -> int:
        try:
            return self._index[device_id]
        except KeyError:
            raise UnknownDeviceError(f"unknown device {device_id!r}") from None

    def span(self, device_id: str) -> slice:
        i = self.index(device_id)
        return slice(self.offsets[i], self.offsets[i] + self.dims[i])

    def feature_owner(self) -> np.ndarray:
        """Device index for every fused feature position."""
        return np.repeat(np.arange(self.device_count), self.dims)

    def feature_names(self) -> list[str]:
        return [f"{n}.{k}" for n, d in zip(self.names, self.dims) for k in range(d)]

    def split(self, values: np.ndarray) -> dict[str, np.ndarray]:
        return {n: values[o:o + d] for n, o, d in zip(self.names, self.offsets, self.dims)}

    def to_dict(self) -> dict:
        return {"names": list(self.names), "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceLayout":
        return cls(tuple(d["names"]), tuple(d["dims"]))

    @classmethod
    def from_feature_names(cls, header: Sequence[str]) -> "DeviceLayout":
        """Rebuild a layout from ``<device>.<k>`` column names."""
        names: list[str] = []
        dims: list[int] = []
        for col, name in enumerate(header):
            dev, sep, k = name.rpartition(".")
            if not sep or not dev or not k.isdigit():
                raise CsvFormatError(f"column {col + 1}: header {name!r} is not '<device>.<k>'", line=1)
            k = int(k)
            if names and names[-1] == dev:
                if k != dims[-1]:
                    raise CsvFormatError(f"column {col + 1}: expected {dev}.{dims[-1]}, got {name}", line=1)
                dims[-1] += 1
            else:
                if dev in names:
                    raise CsvFormatError(f"column {col + 1}: device {dev!r} is not contiguous", line=1)
                if k != 0:
                    raise CsvFormatError(f"column {col + 1}: device {dev!r} must start at index 0", line=1)
                names.append(dev)
                dims.append(1)
        if not names:
            raise CsvFormatError("empty header", line=1)
        return cls(tuple(names), tuple(dims))


@dataclass(frozen=True)
class DeviceReading:
    device_id: str
    slot: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if int(self.slot) < 0:
            raise ValueError("slot must be nonnegative")


@dataclass(frozen=True)
class FusedVector:
    slot: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        scale = np.array(self.scale, dtype=float).reshape(-1)
        if mean.shape != scale.shape:
            raise DimensionMismatchError("mean and scale lengths differ")
        if not np.all(scale > 0):
            raise ValueError("scale entries must be strictly positive")
        mean.setflags(write=False)
        scale.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def identity(cls, b: int) -> "NormStats":
        return cls(np.zeros(b), np.ones(b))


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{what} contains non-finite values")


def fuse(readings: Iterable[DeviceReading], layout: DeviceLayout) -> FusedVector:
    """Stack one slot's device readings into a fused vector in layout order."""
    out = np.empty(layout.total_dim)
    seen: set[str] = set()
    slot = None
    for r in readings:
        if r.device_id in seen:
            raise DuplicateDeviceError(f"duplicate reading for device {r.device_id!r}")
        sl = layout.span(r.device_id)
        if r.values.shape[0] != sl.stop - sl.start:
            raise DimensionMismatchError(
                f"device {r.device_id!r}: expected {sl.stop - sl.start} values, got {r.values.shape[0]}")
        _check_finite(r.values, f"reading of device {r.device_id!r}")
        if slot is None:
            slot = int(r.slot)
        elif int(r.slot) != slot:
            raise SlotOrderError(f"readings span slots {slot} and {r.slot}")
        out[sl] = r.values
        seen.add(r.device_id)
    missing = [n for n in layout.names if n not in seen]
    if missing:
        raise MissingDeviceError(f"missing device {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    return FusedVector(slot, out)


def unfuse(v: FusedVector, layout: DeviceLayout) -> list[DeviceReading]:
    """Inverse of :func:`fuse`."""
    if len(v) != layout.total_dim:
        raise DimensionMismatchError(f"expected length {layout.total_dim}, got {len(v)}")
    return [DeviceReading(n, v.slot, vals) for n, vals in layout.split(v.values).items()]


class TrainingWindow:
    """FIFO of the most recent fused vectors, viewed as a ``b x count`` matrix.

    Alongside each column the window can hold a calibration override per
    feature (NaN when absent).  Sanitized columns use it to tell threshold
    calibration what residual a replaced entry originally showed, in raw
    units.

    Owned by a single caller; :meth:`push` mutates in place.
    """

    def __init__(self, layout: DeviceLayout, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.layout = layout
        self.capacity = int(capacity)
        self._data = np.empty((layout.total_dim, self.capacity))
        self._censor = np.full((layout.total_dim, self.capacity), np.nan)
        self._slots: list[int] = []

    def __len__(self):
        return len(self._slots)

    @property
    def slots(self) -> list[int]:
        return list(self._slots)

    @property
    def newest_slot(self) -> int | None:
        return self._slots[-1] if self._slots else None

    def push(self, v: FusedVector, censor: np.ndarray | None = None) -> "TrainingWindow":
        b = self.layout.total_dim
        if len(v) != b:
            raise DimensionMismatchError(f"expected length {b}, got {len(v)}")
        _check_finite(v.values, "fused vector")
        if self._slots and v.slot <= self._slots[-1]:
            raise SlotOrderError(f"slot {v.slot} is not after newest slot {self._slots[-1]}")
        cen = np.full(b, np.nan) if censor is None else np.asarray(censor, dtype=float)
        if cen.shape != (b,):
            raise DimensionMismatchError(f"censor column must have length {b}")
        n = len(self._slots)
        if n == self.capacity:
            self._data[:, :-1] = self._data[:, 1:]
            self._censor[:, :-1] = self._censor[:, 1:]
            n -= 1
            del self._slots[0]
        self._data[:, n] = v.values
        self._censor[:, n] = cen
        self._slots.append(int(v.slot))
        return self

    def matrix(self) -> np.ndarray:
        """Copy of the window, oldest column first."""
        return self._data[:, :len(self._slots)].copy()

    def censor_matrix(self) -> np.ndarray:
        return self._censor[:, :len(self._slots)].copy()

    def column(self, i: int) -> FusedVector:
        n = len(self._slots)
        if not -n <= i < n:
            raise IndexError(i)
        i %= n
        return FusedVector(self._slots[i], self._data[:, i])

    def replace_column(self, slot: int, values: np.ndarray, censor: np.ndarray | None = None) -> None:
        i = self._slots.index(slot)
        self._data[:, i] = values
        if censor is not None:
            self._censor[:, i] = censor

    def copy(self) -> "TrainingWindow":
        w = TrainingWindow(self.layout, self.capacity)
        w._data[:] = self._data
        w._censor[:] = self._censor
        w._slots = list(self._slots)
        return w

    @classmethod
    def from_matrix(cls, layout: DeviceLayout, D: np.ndarray, slots: Sequence[int] | None = None,
                    capacity: int | None = None) -> "TrainingWindow":
        D = np.asarray(D, dtype=float)
        if D.ndim != 2 or D.shape[0] != layout.total_dim:
            raise DimensionMismatchError(f"matrix must have {layout.total_dim} rows, got shape {D.shape}")
        slots = list(range(D.shape[1])) if slots is None else list(slots)
        w = cls(layout, capacity or max(D.shape[1], 1))
        for j, s in enumerate(slots):
            w.push(FusedVector(s, D[:, j]))
        return w


def push_slot(window: TrainingWindow, v: FusedVector) -> TrainingWindow:
    return window.push(v)


def fit_norm(window: TrainingWindow | np.ndarray, floor: float = SCALE_FLOOR) -> NormStats:
    """Per-feature mean and population standard deviation over columns."""
    D = window.matrix() if isinstance(window, TrainingWindow) else np.asarray(window, dtype=float)
    if D.ndim != 2 or D.shape[1] < 2:
        raise InsufficientDataError("normalization needs at least 2 columns")
    mean = D.mean(axis=1)
    scale = np.maximum(D.std(axis=1), floor)
    return NormStats(mean, scale)


def _norm_arrays(v, stats: NormStats) -> tuple[np.ndarray, int | None]:
    if isinstance(v, FusedVector):
        vals, slot = v.values, v.slot
    else:
        vals, slot = np.asarray(v, dtype=float), None
    if vals.shape[0] != stats.mean.shape[0]:
        raise DimensionMismatchError(f"expected length {stats.mean.shape[0]}, got {vals.shape[0]}")
    return vals, slot


def normalize(v, stats: NormStats):
    """z-score ``v`` (a FusedVector, a vector, or a ``b x k`` matrix)."""
    vals, slot = _norm_arrays(v, stats)
    if vals.ndim == 2:
        out = (vals - stats.mean[:, None]) / stats.scale[:, None]
    else:
        out = (vals - stats.mean) / stats.scale
    return FusedVector(slot, out) if slot is not None else out


def denormalize(v, stats: NormStats):
    vals, slot = _norm_arrays(v, stats)
    if vals.ndim == 2:
        out = vals * stats.scale[:, None] + stats.mean[:, None]
    else:
        out = vals * stats.scale + stats.mean
    return FusedVector(slot, out) if slot is not None else out


# --- matrix CSV (T x b on disk, one row per slot) ---------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path_or_file, layout: DeviceLayout, D: np.ndarray) -> None:
    """Write a ``b x T`` matrix as CSV with one row per slot."""
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != layout.total_dim:
        raise DimensionMismatchError(f"matrix must have {layout.total_dim} rows, got shape {D.shape}")
    buf = io.StringIO()
    buf.write(",".join(layout.feature_names()) + "\n")
    for row in D.T:
        buf.write(",".join(_fmt(x) for x in row) + "\n")
    text = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def read_matrix_csv(path_or_file) -> tuple[DeviceLayout, np.ndarray]:
    """Read a matrix CSV; returns the layout and the ``b x T`` matrix.

    Ragged rows, empty cells and non-numeric or non-finite cells raise
    :class:`CsvFormatError` with the offending line number.
    """
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
    else:
        with open(path_or_file, encoding="utf-8", newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvFormatError("file is empty", line=1) from None
    layout = DeviceLayout.from_feature_names([h.strip() for h in header])
    b = layout.total_dim
    rows = []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != b:
            raise CsvFormatError(f"expected {b} cells, got {len(row)}", line=line)
        vals = []
        for col, cell in enumerate(row):
            try:
                x = float(cell)
            except ValueError:
                raise CsvFormatError(f"column {col + 1}: non-numeric cell {cell!r}", line=line) from None
            if not math.isfinite(x):
                raise CsvFormatError(f"column {col + 1}: non-finite cell {cell!r}", line=line)
            vals.append(x)
        rows.append(vals)
    D = np.array(rows, dtype=float).reshape(len(rows), b).T
    return layout, D
