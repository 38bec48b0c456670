"""Tensor-operation contracts: dilated conv, dilated maxpool, relu,
channel softmax, shape arithmetic, and cross-backend determinism."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adnet import ops
from adnet.backend import available_backends, get_kernels
from adnet.errors import ShapeError

from helpers import conv2d_loops, zero_stuff_by_hand

F32 = np.float32


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(F32)


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 3, 6, 7)
        w = np.zeros((3, 3, 1, 1), dtype=F32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = ops.conv2d(x, w)
        assert np.array_equal(out, x)

    def test_rate1_3x3_ones_on_constant(self):
        # a 3x3 mask at rate 1 covers 5x5; the inserted zeros contribute nothing
        x = np.ones((1, 5, 5), dtype=F32)
        w = np.ones((1, 1, 3, 3), dtype=F32)
        out = ops.conv2d(x, w, rate=1)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 9.0

    def test_rate2_equals_zero_stuffed_kernel(self):
        rng = np.random.default_rng(1)
        x = rand(rng, 1, 8, 8)
        w = rand(rng, 2, 1, 3, 3)
        stuffed = zero_stuff_by_hand(w, 2)
        assert stuffed.shape == (2, 1, 7, 7)
        dilated = ops.conv2d(x, w, rate=2)
        explicit = ops.conv2d(x, stuffed, rate=0)
        assert np.max(np.abs(dilated - explicit)) <= 1e-5

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        for stride, rate in [(1, 0), (2, 0), (1, 1), (2, 2), (3, 1)]:
            x = rand(rng, 2, 13, 11)
            w = rand(rng, 3, 2, 3, 2)
            b = rand(rng, 3)
            got = ops.conv2d(x, w, b, stride=stride, rate=rate)
            want = conv2d_loops(x, w, b, stride, rate)
            assert got.shape == want.shape
            np.testing.assert_allclose(got, want, atol=1e-4)

    def test_bias_applied(self):
        x = np.zeros((1, 3, 3), dtype=F32)
        w = np.zeros((2, 1, 3, 3), dtype=F32)
        b = np.array([1.5, -2.0], dtype=F32)
        out = ops.conv2d(x, w, b)
        assert out[0, 0, 0] == 1.5 and out[1, 0, 0] == -2.0

    def test_channel_mismatch_rejected(self):
        x = np.zeros((2, 5, 5), dtype=F32)
        w = np.zeros((1, 3, 3, 3), dtype=F32)
        with pytest.raises(ShapeError, match="channels"):
            ops.conv2d(x, w)

    def test_kernel_larger_than_input_rejected(self):
        x = np.zeros((1, 4, 4), dtype=F32)
        w = np.zeros((1, 1, 3, 3), dtype=F32)
        with pytest.raises(ShapeError, match="exceeds"):
            ops.conv2d(x, w, rate=1)  # effective 5x5 > 4

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError, match="zero extent"):
            ops.conv2d(np.zeros((1, 0, 4), dtype=F32),
                       np.zeros((1, 1, 1, 1), dtype=F32))

    def test_float64_supported(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 6, 6))
        w = rng.standard_normal((2, 1, 3, 3))
        got = ops.conv2d(x, w, rate=1)
        want = conv2d_loops(x, w, np.zeros(2), 1, 1)
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestMaxpool2d:
    def test_window2_stride2(self):
        x = np.array([[[1, 2], [3, 4]]], dtype=F32)
        assert ops.maxpool2d(x, 2, stride=2).tolist() == [[[4.0]]]

    def test_window2_stride1_single_position(self):
        x = np.array([[[1, 2], [3, 4]]], dtype=F32)
        assert ops.maxpool2d(x, 2, stride=1).tolist() == [[[4.0]]]

    def test_window2_rate1_samples_corners(self):
        x = np.arange(1, 10, dtype=F32).reshape(1, 3, 3)
        # samples (0,0),(0,2),(2,0),(2,2) -> {1,3,7,9}
        assert ops.maxpool2d(x, 2, stride=1, rate=1).tolist() == [[[9.0]]]

    def test_window_larger_than_input_rejected(self):
        with pytest.raises(ShapeError, match="exceeds"):
            ops.maxpool2d(np.zeros((1, 3, 3), dtype=F32), 2, rate=2)

    def test_argmax_first_on_ties(self):
        x = np.full((1, 1, 2, 2), 7.0, dtype=F32)
        _, am = ops.maxpool2d_batch(x, 2, want_argmax=True)
        assert am[0, 0, 0, 0] == 0  # first sample in scan order


class TestElementwise:
    def test_relu_cases(self):
        x = np.array([-1.0, 0.0, 2.0], dtype=F32)
        assert ops.relu(x).tolist() == [0.0, 0.0, 2.0]
        z = np.zeros((2, 3), dtype=F32)
        assert np.array_equal(ops.relu(z), z)
        p = np.array([0.5, 3.0], dtype=F32)
        assert np.array_equal(ops.relu(p), p)

    @pytest.mark.parametrize("val", [0.0, 3.25, -7.0, 1000.0])
    def test_softmax_equal_logits(self, val):
        x = np.full((2, 2, 2), val, dtype=F32)
        out = ops.softmax_channels(x)
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, 0.5)

    def test_softmax_normalizes(self):
        rng = np.random.default_rng(4)
        x = rand(rng, 3, 4, 5)
        out = ops.softmax_channels(x)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, rtol=1e-6)
        assert out.min() >= 0

    def test_softmax_needs_two_channels(self):
        with pytest.raises(ShapeError, match="channels"):
            ops.softmax_channels(np.zeros((1, 2, 2), dtype=F32))


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 4),
           st.integers(1, 4), st.integers(1, 3), st.integers(0, 3),
           st.integers(0, 1000))
    def test_output_shape_arithmetic(self, h, w, kh, kw, stride, rate, seed):
        eff_h = kh + (kh - 1) * rate
        eff_w = kw + (kw - 1) * rate
        if eff_h > h or eff_w > w:
            return
        rng = np.random.default_rng(seed)
        x = rand(rng, 1, h, w)
        weights = rand(rng, 2, 1, kh, kw)
        out = ops.conv2d(x, weights, stride=stride, rate=rate)
        assert out.shape == (2, (h - eff_h) // stride + 1,
                             (w - eff_w) // stride + 1)
        assert np.all(np.isfinite(out))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2),
           st.integers(0, 1000))
    def test_dilation_equivalence(self, kh, kw, rate, seed):
        rng = np.random.default_rng(seed)
        eff_h = kh + (kh - 1) * rate
        eff_w = kw + (kw - 1) * rate
        x = rand(rng, 2, eff_h + 3, eff_w + 3)
        w = rand(rng, 2, 2, kh, kw)
        lib = ops.conv2d(x, w, rate=rate)
        stuffed = ops.conv2d(x, zero_stuff_by_hand(w, rate), rate=0)
        assert np.max(np.abs(lib - stuffed)) <= 1e-5

    def test_zero_stuff_helper_matches_hand_version(self):
        rng = np.random.default_rng(5)
        w = rand(rng, 2, 3, 3, 2)
        for rate in range(4):
            assert np.array_equal(ops.zero_stuff(w, rate),
                                  zero_stuff_by_hand(w, rate))

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(6)
        x = rand(rng, 3, 17, 19)
        w = rand(rng, 4, 3, 3, 3)
        b = rand(rng, 4)
        a1 = ops.conv2d(x, w, b, rate=1)
        a2 = ops.conv2d(x, w, b, rate=1)
        assert np.array_equal(a1, a2)
        p1 = ops.maxpool2d(x, 2, stride=2)
        p2 = ops.maxpool2d(x, 2, stride=2)
        assert np.array_equal(p1, p2)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_linearity_in_kernel(self, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, 2, 9, 9)
        k1 = rand(rng, 3, 2, 3, 3)
        k2 = rand(rng, 3, 2, 3, 3)
        a, b = F32(0.7), F32(-1.3)
        lhs = ops.conv2d(x, a * k1 + b * k2)
        rhs = a * ops.conv2d(x, k1) + b * ops.conv2d(x, k2)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-5)


def test_import_falls_back_without_extension():
    # block the compiled module in a fresh interpreter; the package must
    # import fine and select the numpy backend
    import subprocess
    import sys
    code = (
        "import sys\n"
        "import importlib.abc\n"
        "class Blocker(importlib.abc.MetaPathFinder):\n"
        "    def find_spec(self, name, path=None, target=None):\n"
        "        if name == 'adnet._ckernels':\n"
        "            raise ImportError('blocked for test')\n"
        "sys.meta_path.insert(0, Blocker())\n"
        "import adnet\n"
        "assert adnet.available_backends() == ['python'], adnet.available_backends()\n"
        "import numpy as np\n"
        "x = np.ones((1, 4, 4), dtype=np.float32)\n"
        "w = np.ones((2, 1, 2, 2), dtype=np.float32)\n"
        "out = adnet.conv2d(x, w, rate=1)\n"
        "assert out.shape == (2, 2, 2) and float(out[0, 0, 0]) == 4.0\n"
        "print('fallback ok')\n")
    proc = subprocess.run([sys.executable, "-c", code], capture_output=True,
                          text=True)
    assert proc.returncode == 0, proc.stderr
    assert "fallback ok" in proc.stdout


class TestConcurrency:
    def test_ops_safe_from_concurrent_threads(self):
        # pure functions over immutable inputs: concurrent callers get the
        # same bits as a sequential caller
        from concurrent.futures import ThreadPoolExecutor
        rng = np.random.default_rng(9)
        x = rand(rng, 3, 30, 30)
        x.setflags(write=False)
        w = rand(rng, 4, 3, 3, 3)
        w.setflags(write=False)
        ref = ops.conv2d(x, w, rate=1)
        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(lambda _: ops.conv2d(x, w, rate=1), range(16)))
        assert all(np.array_equal(r, ref) for r in results)


class TestBackends:
    @pytest.mark.parametrize("name", available_backends())
    def test_backend_selectable(self, name, monkeypatch):
        monkeypatch.setenv("ADN_BACKEND", name)
        assert get_kernels().NAME == name

    @pytest.mark.skipif(len(available_backends()) < 2,
                        reason="compiled backend unavailable")
    def test_forward_bit_identical_across_backends_and_threads(self):
        rng = np.random.default_rng(7)
        x = rand(rng, 2, 5, 21, 23)
        w = rand(rng, 6, 5, 3, 4)
        b = rand(rng, 6)
        py, cy = get_kernels("python"), get_kernels("cython")
        for stride, rate in [(1, 0), (2, 1), (1, 3)]:
            ref = py.conv2d_fwd(x, w, b, stride, rate, 1)
            for threads in (1, 2, 4):
                assert np.array_equal(cy.conv2d_fwd(x, w, b, stride, rate, threads),
                                      ref)
            po, pa = py.maxpool2d_fwd(x, 2, stride, rate, 1, True)
            co, ca = cy.maxpool2d_fwd(x, 2, stride, rate, 3, True)
            assert np.array_equal(po, co)
            assert np.array_equal(pa, ca)

    @pytest.mark.skipif(len(available_backends()) < 2,
                        reason="compiled backend unavailable")
    def test_backward_parity_across_backends(self):
        rng = np.random.default_rng(8)
        x = rand(rng, 2, 3, 10, 9)
        w = rand(rng, 4, 3, 3, 3)
        gout = rand(rng, 2, 4, 8, 7)
        py, cy = get_kernels("python"), get_kernels("cython")
        for a, bb in zip(py.conv2d_bwd(x, w, gout, 1, 0),
                         cy.conv2d_bwd(x, w, gout, 1, 0)):
            np.testing.assert_allclose(a, bb, rtol=1e-4, atol=1e-5)
