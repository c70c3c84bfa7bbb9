from __future__ import annotations

import operator
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fep.tensor import (ClipShape, FormatError, NonFiniteError, ShapeError, apply_along_axis, as_tensor,
                        decode_tensor, elementwise, encode_tensor, flat_index, load_tensor,
                        reduce_channels, save_tensor, to_volume)


class TestElementwise:
    def test_mul_small_vectors(self):
        np.testing.assert_array_equal(elementwise(operator.mul, [1, 2], [3, 4]), [3, 8])

    def test_add_zeros_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_array_equal(elementwise(operator.add, x, np.zeros_like(x)), x)

    def test_mul_ones_bit_exact(self, rng):
        x = rng.normal(size=(2, 3, 4))
        out = elementwise(operator.mul, x, np.ones_like(x))
        assert out.tobytes() == x.tobytes()

    def test_channel_broadcast(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        m = rng.random((2, 1, 4, 5))
        np.testing.assert_array_equal(elementwise(operator.mul, x, m), x * m)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            elementwise(operator.add, np.zeros((2, 3)), np.zeros((3, 2)))

    def test_no_broadcast_beyond_channels(self):
        with pytest.raises(ShapeError):
            elementwise(operator.add, np.zeros((2, 3, 4, 5)), np.zeros((1, 3, 4, 5)))

    def test_non_finite_result_rejected(self):
        with pytest.raises(NonFiniteError):
            with np.errstate(divide="ignore"):
                elementwise(operator.truediv, [1.0], [0.0])


class TestApplyAlongAxis:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4, 5))
        for ax in range(3):
            np.testing.assert_array_equal(apply_along_axis(x, ax, np.eye(x.shape[ax])), x)

    def test_swap(self):
        out = apply_along_axis(np.array([[1.0], [2.0]]), 0, np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(out, [[2.0], [1.0]])

    def test_orthogonal_preserves_fiber_norms(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        x = rng.normal(size=(3, 4, 6))
        out = apply_along_axis(x, 1, q)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1), rtol=0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(out), np.linalg.norm(x), atol=1e-10)

    def test_inverse_round_trip(self, rng):
        m = rng.normal(size=(5, 5)) + 5 * np.eye(5)
        x = rng.normal(size=(2, 5, 3))
        back = apply_along_axis(apply_along_axis(x, 1, m), 1, np.linalg.inv(m))
        np.testing.assert_allclose(back, x, atol=1e-10)

    def test_matches_fiber_loop(self, rng):
        m = rng.normal(size=(6, 6))
        x = rng.normal(size=(3, 4, 6))
        out = apply_along_axis(x, 2, m)
        for i in range(3):
            for j in range(4):
                np.testing.assert_allclose(out[i, j], m @ x[i, j], atol=1e-13)

    def test_wrong_matrix_size(self):
        with pytest.raises(ShapeError):
            apply_along_axis(np.zeros((3, 4)), 0, np.eye(4))


class TestReduceChannels:
    def test_single_channel(self, rng):
        x = rng.normal(size=(2, 1, 3, 4))
        np.testing.assert_array_equal(reduce_channels(x), x[:, 0])

    def test_ones(self):
        out = reduce_channels(np.ones((2, 3, 4, 5)))
        assert out.shape == (2, 4, 5)
        np.testing.assert_array_equal(out, 3.0)

    def test_naive_loop(self, rng):
        x = rng.normal(size=(3, 4, 5, 6))
        ref = np.zeros((3, 5, 6))
        for t in range(3):
            for c in range(4):
                for h in range(5):
                    for w in range(6):
                        ref[t, h, w] += x[t, c, h, w]
        np.testing.assert_allclose(reduce_channels(x), ref, rtol=0, atol=1e-15 * 4 * np.abs(x).max())

    def test_rank_check(self):
        with pytest.raises(ShapeError):
            reduce_channels(np.zeros((2, 3, 4)))


class TestLayout:
    def test_flat_index_formula(self):
        shape = (3, 2, 4, 5)
        x = np.arange(np.prod(shape), dtype=float).reshape(shape)
        for t, c, h, w in [(0, 0, 0, 0), (1, 1, 2, 3), (2, 0, 3, 4)]:
            expected = ((t * 2 + c) * 4 + h) * 5 + w
            assert flat_index(shape, (t, c, h, w)) == expected
            assert x.ravel()[expected] == x[t, c, h, w]

    def test_flat_index_bounds(self):
        with pytest.raises(IndexError):
            flat_index((2, 2), (2, 0))

    def test_clip_shape_validation(self):
        with pytest.raises(ValueError):
            ClipShape(0, 1, 4, 4)
        cs = ClipShape(8, 1, 16, 16)
        assert cs.dims == (8, 1, 16, 16) and cs.volume == (8, 16, 16)

    def test_as_tensor_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            as_tensor([1.0, np.nan])

    def test_to_volume(self):
        assert to_volume(np.zeros((2, 1, 3, 4))).shape == (2, 3, 4)
        with pytest.raises(ShapeError):
            to_volume(np.zeros((2, 2, 3, 4)))


class TestFept:
    def test_header_layout(self):
        buf = encode_tensor(np.arange(6.0).reshape(2, 3))
        assert buf[:4] == b"FEPT"
        assert struct.unpack_from("<BB2I", buf, 4) == (1, 2, 2, 3)
        assert len(buf) == 4 + 2 + 8 + 48
        assert struct.unpack_from("<d", buf, len(buf) - 8)[0] == 5.0

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2**32 - 1))
    def test_round_trip(self, dims, seed):
        x = np.random.default_rng(seed).normal(size=dims)
        back, end = decode_tensor(encode_tensor(x))
        assert end == len(encode_tensor(x))
        assert back.shape == x.shape and back.tobytes() == x.tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(2, 3, 4))
        save_tensor(x, tmp_path / "x.fept")
        np.testing.assert_array_equal(load_tensor(tmp_path / "x.fept"), x)

    def test_truncation_reports_offset(self):
        buf = encode_tensor(np.ones((2, 2)))
        with pytest.raises(FormatError) as err:
            decode_tensor(buf[:-3])
        assert err.value.offset == 14

    def test_bad_magic_and_version(self):
        buf = bytearray(encode_tensor(np.ones(2)))
        with pytest.raises(FormatError, match="magic"):
            decode_tensor(b"XEPT" + bytes(buf[4:]))
        buf[4] = 9
        with pytest.raises(FormatError, match="version"):
            decode_tensor(bytes(buf))

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "x.fept").write_bytes(encode_tensor(np.ones(2)) + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            load_tensor(tmp_path / "x.fept")
