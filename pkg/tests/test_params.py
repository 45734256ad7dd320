import struct

import numpy as np
import pytest

from brushrl.autodiff import Tensor
from brushrl.params import (
    Adam,
    FORMAT_VERSION,
    MAGIC,
    ParamSet,
    adam_step,
    he_uniform,
    load_paramset,
    save_paramset,
    zeros,
)


def make_params(seed=0):
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    ps.add("fc.w", he_uniform((4, 3), 4, rng))
    ps.add("fc.b", zeros((3,)))
    ps.add("scalar", Tensor(np.float32(2.5).reshape(())))
    return ps


class TestParamSet:
    def test_duplicate_name_rejected(self):
        ps = ParamSet()
        ps.add("w", zeros((2,)))
        with pytest.raises(ValueError, match="duplicate"):
            ps.add("w", zeros((2,)))

    def test_copy_is_deep(self):
        ps = make_params()
        cp = ps.copy()
        cp["fc.w"].data[0, 0] = 99.0
        assert ps["fc.w"].data[0, 0] != 99.0

    def test_load_values_shape_check(self):
        ps = make_params()
        other = ParamSet()
        other.add("fc.w", zeros((2, 2)))
        other.add("fc.b", zeros((3,)))
        other.add("scalar", zeros(()))
        with pytest.raises(ValueError, match="shape mismatch"):
            ps.load_values(other)

    def test_load_values_copies_version(self):
        ps = make_params()
        other = make_params(1)
        other.version = 7
        ps.load_values(other)
        assert ps.version == 7
        np.testing.assert_array_equal(ps["fc.w"].data, other["fc.w"].data)


class TestAdam:
    def test_first_step_is_minus_lr_sign(self):
        # with bias correction, the first step magnitude is lr regardless of
        # gradient scale (m_hat / sqrt(v_hat) = sign(g) when moments start at 0)
        ps = ParamSet()
        ps.add("w", Tensor(np.zeros(3, np.float32)))
        g = np.array([0.5, -2.0, 1e-3], np.float32)
        adam_step(ps, {"w": g}, {}, lr=0.1, eps=0.0)
        np.testing.assert_allclose(ps["w"].data, [-0.1, 0.1, -0.1], rtol=1e-6)

    def test_version_increments(self):
        ps = make_params()
        adam_step(ps, {}, {})
        assert ps.version == 1

    def test_non_finite_rejected_without_update(self):
        ps = make_params()
        before = ps["fc.w"].data.copy()
        with pytest.raises(ValueError, match="non-finite"):
            adam_step(ps, {"fc.w": np.full((4, 3), np.nan)}, {})
        np.testing.assert_array_equal(ps["fc.w"].data, before)
        assert ps.version == 0

    def test_wrapper_uses_accumulated_grads(self):
        ps = ParamSet()
        ps.add("w", Tensor(np.zeros(2, np.float32)))
        opt = Adam(ps, lr=0.05)
        ps["w"].grad = np.array([1.0, -1.0])
        opt.step()
        np.testing.assert_allclose(ps["w"].data, [-0.05, 0.05], rtol=1e-6)

    def test_converges_on_quadratic(self):
        ps = ParamSet()
        ps.add("x", Tensor(np.array([5.0, -3.0], np.float32)))
        opt = Adam(ps, lr=0.1)
        for _ in range(500):
            opt.step({"x": 2.0 * ps["x"].data.astype(np.float64)})
        assert np.abs(ps["x"].data).max() < 1e-2


class TestCheckpointIO:
    def test_round_trip_bit_exact(self, tmp_path):
        ps = make_params()
        path = tmp_path / "p.ckpt"
        save_paramset(ps, path)
        back = load_paramset(path)
        assert back.names() == ps.names()
        for name, t in ps:
            assert back[name].data.dtype == np.dtype("<f4")
            assert back[name].data.tobytes() == np.asarray(t.data, "<f4").tobytes()

    def test_header_layout(self, tmp_path):
        ps = ParamSet()
        ps.add("ab", Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)))
        path = tmp_path / "p.ckpt"
        save_paramset(ps, path)
        blob = path.read_bytes()
        assert blob[:4] == MAGIC
        assert struct.unpack_from("<I", blob, 4)[0] == FORMAT_VERSION
        assert struct.unpack_from("<I", blob, 8)[0] == 2
        assert blob[12:14] == b"ab"
        assert struct.unpack_from("<I", blob, 14)[0] == 2
        assert struct.unpack_from("<2I", blob, 18) == (2, 3)
        assert len(blob) == 26 + 24

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"nope" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_paramset(path)

    def test_truncated_payload_rejected(self, tmp_path):
        ps = make_params()
        path = tmp_path / "p.ckpt"
        save_paramset(ps, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValueError, match="truncated"):
            load_paramset(path)
