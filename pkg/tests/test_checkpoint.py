import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from taskmoe import checkpoint as ck
from taskmoe.errors import FormatError, VersionError
from taskmoe.optim import Adam


def sample_tensors():
    rng = np.random.default_rng(0)
    return {"a": rng.standard_normal((3, 4)).astype(np.float32).astype(np.float64),
            "b.c": np.arange(5.0), "scalar": np.array(2.5)}


def test_layout():
    buf = ck.encode_checkpoint(sample_tensors(), {"step": 3})
    assert buf[:4] == b"X2EL" and buf[4] == 1
    (hlen,) = struct.unpack("<Q", buf[5:13])
    import json
    header = json.loads(buf[13:13 + hlen])
    assert header["a"] == {"shape": [3, 4], "dtype": "f32", "offset": 0}
    assert header["b.c"]["offset"] == 48
    assert header["__meta__"] == {"step": 3}
    payload = buf[13 + hlen:]
    assert len(payload) == 4 * (12 + 5 + 1)
    assert np.frombuffer(payload, "<f4", count=5, offset=48).tolist() == [0, 1, 2, 3, 4]


def test_roundtrip_is_byte_identical(tmp_path):
    t = sample_tensors()
    p1 = ck.save_checkpoint(tmp_path / "one.x2el", t, {"step": 7, "config": {"x": 1}})
    loaded = ck.load_checkpoint(p1)
    assert loaded.step == 7 and loaded.config == {"x": 1}
    for k, v in t.items():
        assert np.array_equal(loaded.tensors[k], v) and loaded.tensors[k].dtype == np.float64
    p2 = ck.save_checkpoint(tmp_path / "two.x2el", loaded.tensors, loaded.meta)
    assert p1.read_bytes() == p2.read_bytes()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=5),
                  elements=st.floats(width=32, allow_nan=False)))
def test_float32_values_survive_bit_exact(arr):
    loaded = ck.decode_checkpoint(ck.encode_checkpoint({"x": arr.astype(np.float64)}))
    assert np.array_equal(loaded.tensors["x"].astype(np.float32).view(np.uint32), arr.view(np.uint32))


def test_truncation_raises_format_error_with_offset():
    buf = ck.encode_checkpoint(sample_tensors(), {"step": 1})
    for cut in (0, 2, 4, 5, 9, 13, 40, len(buf) - 1):
        with pytest.raises(FormatError) as info:
            ck.decode_checkpoint(buf[:cut])
        assert 0 <= info.value.offset <= len(buf)
    with pytest.raises(FormatError):
        ck.decode_checkpoint(buf + b"\0\0\0\0")


def test_bad_header_and_version():
    buf = bytearray(ck.encode_checkpoint(sample_tensors()))
    buf[4] = 2
    with pytest.raises(VersionError):
        ck.decode_checkpoint(bytes(buf))
    bad = b"X2EL\x01" + struct.pack("<Q", 3) + b"{x]"
    with pytest.raises(FormatError) as info:
        ck.decode_checkpoint(bad)
    assert info.value.offset == 13
    with pytest.raises(FormatError) as info:
        ck.decode_checkpoint(b"NOPE" + bytes(20))
    assert info.value.offset == 0


def test_truncated_file_leaves_no_partial_state(tmp_path):
    path = tmp_path / "c.x2el"
    ck.save_checkpoint(path, sample_tensors())
    path.write_bytes(path.read_bytes()[:-3])
    result = None
    with pytest.raises(FormatError):
        result = ck.load_checkpoint(path)
    assert result is None


def test_adam_lr_zero_and_f32_grid():
    p = {"w": np.array([0.1, -0.2, 0.3]).astype(np.float32).astype(np.float64)}
    before = p["w"].copy()
    opt = Adam()
    opt.update(p, {"w": np.array([1.0, -1.0, 0.0])}, 0.0)
    assert np.array_equal(p["w"], before) and opt.step == 1
    opt.update(p, {"w": np.array([1e-3, 2.0, 0.0])}, 1e-2)
    assert p["w"][2] == before[2]
    for arr in (p["w"], opt.m["w"], opt.v["w"]):
        assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64))


def test_adam_first_step_matches_sign_update():
    # with bias correction the first step moves each coordinate by ~lr * sign(g)
    p = {"w": np.zeros(3)}
    Adam().update(p, {"w": np.array([0.5, -2.0, 1e-3])}, 0.01)
    assert np.allclose(p["w"], [-0.01, 0.01, -0.01], rtol=1e-4)
