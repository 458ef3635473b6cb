import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionseg import gradcheck as gc
from fusionseg.errors import ConfigurationError, ShapeError
from fusionseg.fusion import (Fusion, FusionSpec, averaging_kernel, fuse_conv, fuse_conv_backward,
                              fuse_max, fuse_max_backward, fuse_sum, fuse_sum_backward)
from fusionseg.tensor import ConvKernel, concat_channels, conv3d_valid


def streams_at(values):
    """Stack scalars into an (N, 1, 1, 1, 1) stream tensor."""
    return np.array(values, dtype=np.float64).reshape(-1, 1, 1, 1, 1)


def brute_max(s):
    out = np.empty(s.shape[1:])
    for idx in np.ndindex(*s.shape[1:]):
        best = s[(0,) + idx]
        for n in range(1, s.shape[0]):
            if s[(n,) + idx] > best:
                best = s[(n,) + idx]
        out[idx] = best
    return out


def brute_sum(s):
    out = np.empty(s.shape[1:])
    for idx in np.ndindex(*s.shape[1:]):
        acc = s[(0,) + idx]
        for n in range(1, s.shape[0]):
            acc = acc + s[(n,) + idx]
        out[idx] = acc
    return out


class TestFusionSpec:
    def test_round_trip(self):
        spec = FusionSpec("late", "conv")
        assert str(spec) == "point=late function=conv"
        assert FusionSpec.parse(str(spec)) == spec
        assert FusionSpec.parse("function=max point=early") == FusionSpec("early", "max")

    @pytest.mark.parametrize("text", ["point=late", "point=late function=avg", "late conv",
                                      "point=late function=conv extra"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigurationError):
            FusionSpec.parse(text)


class TestMax:
    def test_example(self):
        out, arg = fuse_max(streams_at([1, 5, 3, 2]))
        assert out.item() == 5 and arg.item() == 1

    def test_identical_streams(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 3, 3))
        out, arg = fuse_max(np.stack([x] * 4))
        np.testing.assert_array_equal(out, x)
        assert not np.any(arg)

    def test_backward_routes_to_winner(self):
        s = streams_at([1, 5, 3, 2])
        _, arg = fuse_max(s)
        g = fuse_max_backward(np.full((1, 1, 1, 1), 2.5), arg, 4)
        np.testing.assert_array_equal(g.ravel(), [0, 2.5, 0, 0])

    def test_ties_go_to_lowest_stream(self):
        _, arg = fuse_max(streams_at([1, 4, 4, 4]))
        g = fuse_max_backward(np.ones((1, 1, 1, 1)), arg, 4)
        np.testing.assert_array_equal(g.ravel(), [0, 1, 0, 0])

    def test_brute_force(self):
        s = np.random.default_rng(1).standard_normal((4, 3, 3, 4, 2))
        np.testing.assert_array_equal(fuse_max(s)[0], brute_max(s))

    def test_mass_conservation(self):
        rng = np.random.default_rng(2)
        s = rng.standard_normal((4, 2, 3, 3, 3))
        g = rng.standard_normal((2, 3, 3, 3))
        np.testing.assert_allclose(fuse_max_backward(g, fuse_max(s)[1], 4).sum(axis=0), g)

    def test_bounds_mean_for_nonnegative(self):
        s = np.random.default_rng(3).random((4, 2, 3, 3, 3))
        assert np.all(fuse_max(s)[0] >= fuse_sum(s) / 4)

    def test_single_stream_rejected(self):
        with pytest.raises(ConfigurationError):
            fuse_max(np.zeros((1, 1, 2, 2, 2)))

    def test_finite_differences(self):
        assert gc.check_fusion(np.random.default_rng(4), "max") < 1e-5


class TestSum:
    def test_example(self):
        assert fuse_sum(streams_at([1, 5, 3, 2])).item() == 11

    def test_zero_stream(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal((4, 2, 2, 2, 2))
        s[2] = 0
        np.testing.assert_allclose(fuse_sum(s), s[0] + s[1] + s[3])

    def test_bit_exact_brute_force(self):
        s = np.random.default_rng(1).standard_normal((4, 3, 4, 3, 2))
        np.testing.assert_array_equal(fuse_sum(s), brute_sum(s))

    def test_any_association_order(self):
        s = np.random.default_rng(2).integers(-1000, 1000, (4, 2, 3, 3, 3)).astype(np.float64) / 8
        ref = fuse_sum(s)
        for perm in itertools.permutations(range(4)):
            a, b, c, d = (s[i] for i in perm)
            np.testing.assert_array_equal((a + b) + (c + d), ref)

    def test_backward_broadcasts(self):
        g = np.random.default_rng(3).standard_normal((2, 3, 3, 3))
        gs = fuse_sum_backward(g, 4)
        for n in range(4):
            np.testing.assert_array_equal(gs[n], g)
        np.testing.assert_allclose(gs.sum(axis=0), 4 * g)

    def test_finite_differences(self):
        assert gc.check_fusion(np.random.default_rng(4), "sum") < 1e-5


class TestConv:
    def test_averaging_kernel_equals_mean(self):
        s = np.random.default_rng(0).standard_normal((4, 3, 3, 3, 3))
        k = ConvKernel(averaging_kernel(4, 3), np.zeros(3))
        np.testing.assert_allclose(fuse_conv(s, k), fuse_sum(s) / 4, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-6)])
    def test_identity_sum_kernel_equals_sum(self, dtype, tol):
        s = np.random.default_rng(1).standard_normal((4, 5, 3, 3, 3)).astype(dtype)
        w = (averaging_kernel(4, 5) * 4).astype(dtype)
        out = fuse_conv(s, ConvKernel(w, np.zeros(5, dtype)))
        np.testing.assert_allclose(out, fuse_sum(s), rtol=tol, atol=tol)

    def test_zero_kernel_gives_bias(self):
        s = np.random.default_rng(2).standard_normal((4, 2, 2, 2, 2))
        out = fuse_conv(s, ConvKernel(np.zeros((2, 8, 1, 1, 1)), np.array([0.5, -1.0])))
        assert np.all(out[0] == 0.5) and np.all(out[1] == -1.0)

    def test_matches_concat_then_conv(self):
        rng = np.random.default_rng(3)
        s = rng.standard_normal((4, 3, 2, 3, 2))
        k = ConvKernel(rng.standard_normal((3, 12, 1, 1, 1)), rng.standard_normal(3))
        np.testing.assert_array_equal(fuse_conv(s, k), conv3d_valid(concat_channels(list(s)), k))

    def test_kernel_shape_error_names_expected(self):
        s = np.zeros((4, 3, 2, 2, 2))
        with pytest.raises(ConfigurationError, match=r"\(3, 12, 1, 1, 1\)"):
            fuse_conv(s, ConvKernel(np.zeros((3, 9, 1, 1, 1)), np.zeros(3)))

    def test_backward_shapes(self):
        rng = np.random.default_rng(4)
        s = rng.standard_normal((4, 3, 2, 2, 2))
        k = ConvKernel(rng.standard_normal((3, 12, 1, 1, 1)), np.zeros(3))
        gs, gw, gb = fuse_conv_backward(s, k, np.ones((3, 2, 2, 2)))
        assert gs.shape == s.shape and gw.shape == k.weights.shape and gb.shape == (3,)

    def test_finite_differences(self):
        assert gc.check_fusion(np.random.default_rng(5), "conv") < 1e-5

    def test_layer_init_near_average(self):
        layer = Fusion("conv", 4, 50, np.random.default_rng(0), np.float64)
        assert layer.weight.value.shape == (50, 200, 1, 1, 1)
        assert np.max(np.abs(layer.weight.value - averaging_kernel(4, 50))) <= 0.01
        assert sum(p.size for p in layer.parameters()) == 10050


class TestProperties:
    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            s = rng.standard_normal((4, 2, 2, 3, 2))
            perm = rng.permutation(4)
            np.testing.assert_array_equal(fuse_max(s[perm])[0], fuse_max(s)[0])
            np.testing.assert_allclose(fuse_sum(s[perm]), fuse_sum(s), rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(2, 5), c=st.integers(1, 4), seed=st.integers(0, 2 ** 16))
    def test_output_is_per_stream_shape(self, n, c, seed):
        rng = np.random.default_rng(seed)
        s = rng.standard_normal((n, c, 2, 3, 2))
        for fn in ("max", "sum", "conv"):
            layer = Fusion(fn, n, c, rng, np.float64)
            y, _ = layer.forward(s)
            assert y.shape == s.shape[1:] == layer.output_shape(s.shape)

    def test_layer_rejects_wrong_stack(self):
        with pytest.raises(ShapeError):
            Fusion("sum", 4, 3).output_shape((3, 3, 2, 2, 2))
