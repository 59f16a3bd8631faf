import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_da.fileio import (
    MalformedFileError, container_from_bytes, container_to_bytes, field_from_bytes, field_to_bytes, read_container,
    read_field, write_container, write_field,
)
from hybrid_da.sphere import GaussGrid, GridField, RingGrid, SpectralField, dof_count


def grid_field(seed=0, nvar=2):
    rng = np.random.default_rng(seed)
    return GridField(GaussGrid(8, 15), rng.standard_normal((nvar, 8, 15)), tuple(f"v{i}" for i in range(nvar)))


def spectral_field(seed=0):
    rng = np.random.default_rng(seed)
    n = dof_count(7)
    return SpectralField(7, rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n)), ("a", "b"))


def test_grid_round_trip_is_bit_exact(tmp_path):
    f = grid_field()
    write_field(tmp_path / "g.hda", f)
    g = read_field(tmp_path / "g.hda")
    assert np.array_equal(f.values, g.values)
    assert g.names == f.names and g.grid.shape == f.grid.shape


def test_spectral_round_trip_is_bit_exact():
    f = spectral_field()
    g = field_from_bytes(field_to_bytes(f))
    assert np.array_equal(f.coeffs, g.coeffs)
    assert g.truncation == 7 and g.names == ("a", "b")


def test_ring_round_trip():
    f = GridField(RingGrid(36), np.arange(36.0)[None, None, :])
    g = field_from_bytes(field_to_bytes(f))
    assert isinstance(g.grid, RingGrid) and np.array_equal(f.values, g.values)


def test_serialization_is_deterministic():
    assert field_to_bytes(grid_field(3)) == field_to_bytes(grid_field(3))
    meta = {"b": 1, "a": [1, 2]}
    assert container_to_bytes(meta, {"x": np.ones(3)}) == container_to_bytes(dict(reversed(meta.items())),
                                                                              {"x": np.ones(3)})


def test_container_round_trip(tmp_path):
    arrays = {"x": np.random.default_rng(0).standard_normal((4, 3)), "k": np.arange(5), "e": np.zeros((0, 2))}
    write_container(tmp_path / "c.hda", {"note": "hi", "n": 3}, arrays)
    meta, back = read_container(tmp_path / "c.hda")
    assert meta == {"note": "hi", "n": 3}
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])


@pytest.mark.parametrize("cut", [0, 3, 9, 20, -8, -1])
def test_truncated_files_rejected(cut):
    data = field_to_bytes(grid_field())
    with pytest.raises(MalformedFileError) as err:
        field_from_bytes(data[:cut])
    assert err.value.offset >= 0


def test_bad_magic_and_version():
    data = bytearray(field_to_bytes(grid_field()))
    bad = bytes(b"XXXX" + data[4:])
    with pytest.raises(MalformedFileError) as err:
        field_from_bytes(bad)
    assert err.value.offset == 0
    data[4] = 9
    with pytest.raises(MalformedFileError):
        field_from_bytes(bytes(data))


def test_trailing_bytes_rejected():
    with pytest.raises(MalformedFileError):
        field_from_bytes(field_to_bytes(grid_field()) + b"\0" * 8)
    with pytest.raises(MalformedFileError):
        container_from_bytes(container_to_bytes({}, {"x": np.ones(2)}) + b"\0")


def test_kind_mismatch():
    with pytest.raises(MalformedFileError):
        container_from_bytes(field_to_bytes(grid_field()))
    with pytest.raises(MalformedFileError):
        field_from_bytes(container_to_bytes({}, {"x": np.ones(2)}))


@settings(max_examples=30, deadline=None)
@given(st.binary(max_size=200))
def test_random_bytes_never_crash_unexpectedly(blob):
    for reader in (field_from_bytes, container_from_bytes):
        try:
            reader(blob)
        except (MalformedFileError, ValueError):
            pass


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=50))
def test_container_values_exact(values):
    a = np.array(values)
    _, back = container_from_bytes(container_to_bytes({}, {"a": a}))
    assert np.array_equal(back["a"], a)
