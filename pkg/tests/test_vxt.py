"""VXT1 tensor blobs and the SSCM1 model container."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxssc import networks, vxt
from voxssc.networks import ModelFormatError, NetConfig


def test_header_layout():
    arr = np.zeros((2, 3), dtype=np.float32)
    blob = vxt.tensor_to_bytes(arr)
    assert blob[:4] == b"VXT1"
    assert blob[4] == 0  # float32 code
    assert blob[5] == 2  # rank
    assert len(blob) == 4 + 2 + 2 * 4 + 6 * 4


@settings(max_examples=40, deadline=None)
@given(arrays(dtype=np.float32,
              shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_float32(arr):
    got, end = vxt.tensor_from_bytes(vxt.tensor_to_bytes(arr))
    assert got.dtype == np.float32
    np.testing.assert_array_equal(got, arr)


def test_roundtrip_float64(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5))
    vxt.save_tensor(tmp_path / "t.vxt", arr)
    got = vxt.load_tensor(tmp_path / "t.vxt")
    assert got.dtype == np.float64
    np.testing.assert_array_equal(got, arr)


def test_rejects_bad_magic():
    with pytest.raises(vxt.VxtError, match="magic"):
        vxt.tensor_from_bytes(b"NOPE" + b"\x00" * 10)


def test_rejects_truncated_payload():
    blob = vxt.tensor_to_bytes(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(vxt.VxtError, match="truncated"):
        vxt.tensor_from_bytes(blob[:-1])


def test_rejects_unsupported_dtype():
    with pytest.raises(vxt.VxtError, match="dtype"):
        vxt.tensor_to_bytes(np.zeros(3, dtype=np.int32))


def test_load_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "t.vxt"
    path.write_bytes(vxt.tensor_to_bytes(np.zeros(2, dtype=np.float32)) + b"x")
    with pytest.raises(vxt.VxtError, match="trailing"):
        vxt.load_tensor(path)


def test_offset_chaining():
    a = np.arange(4, dtype=np.float32)
    b = np.arange(6, dtype=np.float64).reshape(2, 3)
    buf = vxt.tensor_to_bytes(a) + vxt.tensor_to_bytes(b)
    got_a, off = vxt.tensor_from_bytes(buf)
    got_b, end = vxt.tensor_from_bytes(buf, off)
    assert end == len(buf)
    np.testing.assert_array_equal(got_a, a)
    np.testing.assert_array_equal(got_b, b)


# ---------------------------------------------------------------------------
# SSCM1


def test_model_save_load_save_byte_identical(tmp_path):
    cfg = NetConfig(dims=(8, 8, 8), width_mult=0.25)
    net = networks.build_depth_net(cfg, seed=11)
    p1 = tmp_path / "a.sscm"
    p2 = tmp_path / "b.sscm"
    networks.save_model(net, p1)
    networks.save_model(networks.load_model(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_model_roundtrip_preserves_params(tmp_path):
    cfg = NetConfig(dims=(8, 8, 8), width_mult=0.5)
    net = networks.build_mid_fusion(cfg, seed=4)
    path = tmp_path / "m.sscm"
    networks.save_model(net, path)
    loaded = networks.load_model(path)
    assert loaded.variant == "mid"
    assert loaded.cfg == net.cfg
    assert set(loaded.params) == set(net.params)
    for name in net.params:
        np.testing.assert_array_equal(loaded.params[name]["w"], net.params[name]["w"])
        np.testing.assert_array_equal(loaded.params[name]["b"], net.params[name]["b"])


def test_model_rejects_corrupted_magic(tmp_path):
    cfg = NetConfig(dims=(8, 8, 8), width_mult=0.25)
    net = networks.build_depth_net(cfg, seed=0)
    path = tmp_path / "m.sscm"
    networks.save_model(net, path)
    buf = bytearray(path.read_bytes())
    buf[0] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(ModelFormatError, match="magic"):
        networks.load_model(path)


def test_model_rejects_missing_block(tmp_path):
    cfg = NetConfig(dims=(8, 8, 8), width_mult=0.25)
    net = networks.build_depth_net(cfg, seed=0)
    del net.params["h3"]
    path = tmp_path / "m.sscm"
    networks.save_model(net, path)
    with pytest.raises(ModelFormatError, match="h3"):
        networks.load_model(path)
