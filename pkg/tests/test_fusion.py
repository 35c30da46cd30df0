import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from outlierbft.errors import (
    CsvFormatError,
    DimensionMismatchError,
    DuplicateDeviceError,
    InsufficientDataError,
    MissingDeviceError,
    NonFiniteError,
    SlotOrderError,
)
from outlierbft.fusion import (
    DeviceLayout,
    DeviceReading,
    FusedVector,
    NormStats,
    SCALE_FLOOR,
    TrainingWindow,
    denormalize,
    fit_norm,
    fuse,
    normalize,
    push_slot,
    read_matrix_csv,
    unfuse,
    write_matrix_csv,
)

AB = DeviceLayout(("A", "B"), (2, 1))


def test_layout_offsets():
    lay = DeviceLayout(("x", "y", "z"), (2, 3, 1))
    assert lay.offsets == (0, 2, 5)
    assert lay.total_dim == 6
    assert list(lay.feature_owner()) == [0, 0, 1, 1, 1, 2]


def test_layout_rejects_duplicates_and_bad_dims():
    with pytest.raises(DuplicateDeviceError):
        DeviceLayout(("a", "a"), (1, 1))
    with pytest.raises(ValueError):
        DeviceLayout(("a",), (0,))


def test_fuse_concatenates_in_layout_order():
    v = fuse([DeviceReading("B", 4, [3.0]), DeviceReading("A", 4, [1.0, 2.0])], AB)
    assert v.slot == 4
    assert list(v.values) == [1.0, 2.0, 3.0]


def test_fuse_single_device():
    lay = DeviceLayout(("A",), (1,))
    assert list(fuse([DeviceReading("A", 0, [7.0])], lay).values) == [7.0]


@pytest.mark.parametrize("readings,err", [
    ([DeviceReading("A", 0, [1.0, 2.0])], MissingDeviceError),
    ([DeviceReading("A", 0, [1, 2]), DeviceReading("A", 0, [1, 2]), DeviceReading("B", 0, [3])], DuplicateDeviceError),
    ([DeviceReading("A", 0, [1.0]), DeviceReading("B", 0, [3.0])], DimensionMismatchError),
    ([DeviceReading("A", 0, [1.0, np.nan]), DeviceReading("B", 0, [3.0])], NonFiniteError),
    ([DeviceReading("A", 0, [1.0, 2.0]), DeviceReading("B", 1, [3.0])], SlotOrderError),
])
def test_fuse_errors_are_distinct(readings, err):
    with pytest.raises(err):
        fuse(readings, AB)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=6), st.integers(0, 2 ** 31))
def test_fuse_unfuse_bijection(dims, seed):
    lay = DeviceLayout(tuple(f"d{i}" for i in range(len(dims))), tuple(dims))
    rng = np.random.default_rng(seed)
    readings = [DeviceReading(n, 3, rng.standard_normal(k)) for n, k in zip(lay.names, dims)]
    back = unfuse(fuse(reversed(readings), lay), lay)
    for r, s in zip(readings, back):
        assert r.device_id == s.device_id and np.array_equal(r.values, s.values)


def test_fit_norm_hand_computation():
    stats = fit_norm(np.array([[1.0, 3.0], [1.0, 3.0]]))
    assert list(stats.mean) == [2.0, 2.0]
    assert list(stats.scale) == [1.0, 1.0]


def test_fit_norm_floor_and_minimum_columns():
    assert fit_norm(np.array([[5.0, 5.0, 5.0]])).scale[0] == SCALE_FLOOR
    with pytest.raises(InsufficientDataError):
        fit_norm(np.array([[1.0], [2.0]]))


def test_normalize_examples():
    stats = NormStats([1.0, -2.0], [2.0, 0.5])
    assert np.array_equal(normalize(np.array([1.0, -2.0]), stats), [0.0, 0.0])
    ident = NormStats.identity(3)
    v = np.array([0.3, -1.0, 9.0])
    assert np.array_equal(normalize(v, ident), v)
    fv = normalize(FusedVector(7, [3.0, -1.5]), stats)
    assert fv.slot == 7 and list(fv.values) == [1.0, 1.0]
    with pytest.raises(DimensionMismatchError):
        normalize(np.zeros(3), stats)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.integers(0, 2 ** 31))
def test_normalize_round_trip(values, seed):
    rng = np.random.default_rng(seed)
    v = np.array(values)
    stats = NormStats(rng.uniform(-100, 100, v.size), 10.0 ** rng.uniform(-3, 3, v.size))
    back = denormalize(normalize(v, stats), stats)
    assert np.all(np.abs(back - v) <= 1e-9 * np.maximum(1.0, np.abs(v)))


def test_window_fifo():
    lay = DeviceLayout(("A",), (1,))
    w = TrainingWindow(lay, capacity=3)
    assert len(push_slot(w, FusedVector(0, [0.0]))) == 1
    for s in (1, 2, 3):
        push_slot(w, FusedVector(s, [float(s)]))
    assert w.slots == [1, 2, 3]
    push_slot(w, FusedVector(4, [4.0]))
    assert w.slots == [2, 3, 4]
    assert w.matrix().tolist() == [[2.0, 3.0, 4.0]]
    with pytest.raises(SlotOrderError):
        push_slot(w, FusedVector(4, [0.0]))
    with pytest.raises(DimensionMismatchError):
        push_slot(w, FusedVector(9, [0.0, 1.0]))


@given(st.integers(1, 6), st.lists(st.integers(1, 3), min_size=1, max_size=30))
def test_window_capacity_and_order(capacity, gaps):
    w = TrainingWindow(DeviceLayout(("A",), (1,)), capacity)
    slot = 0
    for g in gaps:
        slot += g
        w.push(FusedVector(slot, [float(slot)]))
        assert len(w) <= capacity
        assert w.slots == sorted(set(w.slots))
    assert w.matrix().shape == (1, min(capacity, len(gaps)))


def test_matrix_csv_round_trip_is_exact():
    lay = DeviceLayout(("a", "b"), (2, 1))
    D = np.random.default_rng(0).standard_normal((3, 5)) * 1e3
    buf = io.StringIO()
    write_matrix_csv(buf, lay, D)
    text = buf.getvalue()
    assert text.splitlines()[0] == "a.0,a.1,b.0"
    assert "\r" not in text
    lay2, D2 = read_matrix_csv(io.StringIO(text))
    assert lay2 == lay and np.array_equal(D2, D)


@pytest.mark.parametrize("text,line", [
    ("a.0,a.1\n1,2\n3\n", 3),
    ("a.0\n1\nfoo\n", 3),
    ("a.0\n1\nnan\n", 3),
    ("a.0\n\n1\n,\n", 4),
])
def test_matrix_csv_errors_carry_line_numbers(text, line):
    with pytest.raises(CsvFormatError) as exc:
        read_matrix_csv(io.StringIO(text))
    assert f"line {line}" in str(exc.value)
