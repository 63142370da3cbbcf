"""Round trips and corruption handling for the binary raster formats."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from odisal.errors import BadImage, CorruptFile
from odisal.formats import (
    read_image,
    read_sal,
    read_saliency,
    read_tensor,
    write_image,
    write_sal,
    write_tensor,
)


def test_sal_round_trip(tmp_path):
    raster = np.random.default_rng(0).uniform(0, 1, size=(13, 29))
    path = tmp_path / "m.sal"
    write_sal(path, raster)
    back = read_sal(path)
    np.testing.assert_allclose(back, raster, atol=1e-7)  # f32 payload


def test_sal_header_layout(tmp_path):
    path = tmp_path / "m.sal"
    write_sal(path, np.zeros((2, 3)))
    blob = path.read_bytes()
    assert blob[:4] == b"SAL1"
    assert int.from_bytes(blob[4:8], "little") == 3  # width
    assert int.from_bytes(blob[8:12], "little") == 2  # height
    assert len(blob) == 12 + 4 * 6


def test_sal_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.sal"
    path.write_bytes(b"JUNK" + bytes(8))
    with pytest.raises(CorruptFile):
        read_sal(path)


def test_sal_rejects_truncation(tmp_path):
    path = tmp_path / "m.sal"
    write_sal(path, np.ones((4, 4)))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CorruptFile):
        read_sal(path)


def test_sal_rejects_non_finite(tmp_path):
    with pytest.raises(CorruptFile):
        write_sal(tmp_path / "m.sal", np.array([[1.0, np.nan]]))


@settings(
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    seed=st.integers(0, 2**31),
)
def test_tensor_round_trip(tmp_path, shape, seed):
    tensor = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    path = tmp_path / f"t{seed}.ten"
    write_tensor(path, tensor)
    back = read_tensor(path)
    assert back.shape == tuple(shape)
    np.testing.assert_array_equal(back.astype(np.float32), tensor)


def test_tensor_rejects_truncation(tmp_path):
    path = tmp_path / "t.ten"
    write_tensor(path, np.ones((3, 3)))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CorruptFile):
        read_tensor(path)


def test_tensor_rejects_bad_rank(tmp_path):
    path = tmp_path / "t.ten"
    path.write_bytes(b"TEN1" + (99).to_bytes(4, "little"))
    with pytest.raises(CorruptFile):
        read_tensor(path)


def test_image_round_trip_rgb(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(8, 10, 3)).astype(float)
    path = tmp_path / "img.png"
    write_image(path, img)
    back = read_image(path)
    np.testing.assert_array_equal(back, img)


def test_image_gray_saliency_convention(tmp_path):
    sal = np.linspace(0, 1, 64).reshape(8, 8)
    path = tmp_path / "sal.png"
    write_image(path, sal)
    back = read_saliency(path)
    assert back.shape == (8, 8)
    assert np.abs(back - sal).max() <= 0.5 / 255 + 1e-9  # 8-bit quantization


def test_read_image_rejects_garbage(tmp_path):
    path = tmp_path / "junk.png"
    path.write_bytes(b"this is not a png")
    with pytest.raises(BadImage):
        read_image(path)


def test_read_saliency_sal_passthrough(tmp_path):
    raster = np.array([[0.0, 2.5], [7.0, 0.25]])
    path = tmp_path / "x.sal"
    write_sal(path, raster)
    back = read_saliency(path)
    np.testing.assert_allclose(back, raster, atol=1e-7)
