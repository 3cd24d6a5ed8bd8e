import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from titrl.autodiff import (
    Tape,
    Tensor,
    activation,
    backward,
    default_dtype,
    dropout,
    exp,
    finite_difference_check,
    gelu,
    layer_norm,
    log_softmax,
    masked_softmax,
    no_grad,
    relu,
)
from titrl.autodiff import weights as weight_io
from titrl.errors import CheckpointError, ConfigError, NumericalError, ShapeError

# values of an independent 50-digit evaluation (mpmath)
GELU_10 = 9.9999999999999999999999238014697583947393402665675
SOFTMAX_1000_0 = (1.0, 5.0759588975494567652918094795743369193055992828928e-435)


def param(a, dtype=None):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=dtype)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])

    def test_annihilator(self):
        a = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal((a @ Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))

    def test_gradients_match_finite_differences_float32(self):
        rng = np.random.default_rng(0)
        a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
        report = finite_difference_check(lambda: a @ b, {"a": a, "b": b}, h=1e-3, tol=1e-3)
        assert report.passed, report

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            Tensor(np.ones((3, 4))) @ Tensor(np.ones((3, 2)))

    def test_batched_broadcast_gradient(self):
        rng = np.random.default_rng(1)
        with default_dtype(np.float64):
            a, b = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(4, 5)))
            report = finite_difference_check(lambda: (a @ b) * 1.5, [a, b], h=1e-6, tol=1e-7)
        assert report.passed, report


class TestLayerNorm:
    def test_constant_vector_collapses_to_bias(self):
        out = layer_norm(Tensor([5, 5, 5, 5]), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_unit_pair(self):
        with default_dtype(np.float64):
            out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)

    def test_moments_of_standardized_output(self):
        x = np.random.default_rng(3).normal(2.0, 3.0, size=8)
        out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-5).data.astype(np.float64)
        # moments recomputed directly from the output
        assert abs(out.mean()) < 1e-4
        assert abs(((out - out.mean()) ** 2).mean() - 1.0) < 1e-4

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x, g, b = param(rng.normal(size=(3, 6))), param(rng.normal(size=6)), param(rng.normal(size=6))
        w = Tensor(rng.normal(size=(3, 6)))
        report = finite_difference_check(lambda: layer_norm(x, g, b) * w, {"x": x, "gain": g, "bias": b})
        assert report.passed, report

    def test_affine_shape_check(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestMaskedSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(masked_softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_single_survivor(self):
        out = masked_softmax(Tensor([9.0, 9.0, 9.0]), np.array([True, False, False]))
        assert out.data.tolist() == [1.0, 0.0, 0.0]

    def test_large_logits_do_not_overflow(self):
        out = masked_softmax(Tensor([1000.0, 0.0])).data
        np.testing.assert_allclose(out, SOFTMAX_1000_0, atol=1e-30)

    def test_fully_masked_row_is_an_error(self):
        with pytest.raises(NumericalError):
            masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False, False, False]]))

    def test_gradient_with_mask(self):
        rng = np.random.default_rng(5)
        x = param(rng.normal(size=(4, 4)))
        mask = np.tril(np.ones((4, 4), dtype=bool))
        w = Tensor(rng.normal(size=(4, 4)))
        report = finite_difference_check(lambda: masked_softmax(x, mask) * w, [x])
        assert report.passed, report
        x.grad = None
        backward((masked_softmax(x, mask) * w).sum())
        assert np.all(x.grad[~mask] == 0.0)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-50, 50)),
        st.data(),
    )
    def test_rows_are_distributions(self, logits, data):
        mask = data.draw(arrays(bool, logits.shape))
        mask[np.arange(len(mask)), data.draw(st.integers(0, logits.shape[1] - 1))] = True
        p = masked_softmax(Tensor(logits), mask).data.astype(np.float64)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
        assert np.all(p[~mask] == 0.0)


class TestActivation:
    def test_gelu_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])

    def test_gelu_ten(self):
        assert abs(float(gelu(Tensor([10.0])).data[0]) - GELU_10) < 1e-4

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            activation(Tensor([1.0]), "swish")

    @pytest.mark.parametrize("kind", ["gelu", "relu", "tanh"])
    def test_gradients(self, kind):
        with default_dtype(np.float64):
            x = param(np.random.default_rng(6).normal(size=10) + 0.05)
            report = finite_difference_check(lambda: activation(x, kind) * 1.7, [x], h=1e-6, tol=1e-6)
        assert report.passed, report


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=50))
        assert dropout(x, 0.0, True, 1) is x

    def test_eval_mode_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=50))
        np.testing.assert_array_equal(dropout(x, 0.1, False, 1).data, x.data)

    def test_law_of_large_numbers(self):
        out = dropout(Tensor(np.ones(10_000)), 0.5, True, 123).data
        assert 0.95 <= out.mean() <= 1.05
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_deterministic_under_seed(self):
        x = Tensor(np.ones(100))
        np.testing.assert_array_equal(dropout(x, 0.3, True, 7).data, dropout(x, 0.3, True, 7).data)

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            dropout(Tensor([1.0]), 1.0, True, 0)


class TestBackward:
    def test_quadratic(self):
        x = param([1.0, 2.0, 3.0])
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_constant_loss(self):
        x = param([1.0, 2.0])
        backward(Tensor(3.0) + (x * 0.0).sum())
        assert x.grad is None or np.all(x.grad == 0.0)
        y = param([1.0])
        backward(Tensor(5.0))
        assert y.grad is None

    def test_non_scalar_rejected(self):
        x = param([1.0, 2.0])
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_reuse_accumulates(self):
        x = param([3.0])
        backward((x * x + x * 2.0 + x).sum())
        np.testing.assert_array_equal(x.grad, [9.0])
        backward((x * 1.0).sum())
        np.testing.assert_array_equal(x.grad, [10.0])

    def test_tape_is_topological_and_unique(self):
        x = param(np.ones(3))
        h = x * 2.0
        loss = (h * h + h).sum()
        tape = Tape.from_root(loss)
        ids = [id(n) for n in tape.nodes]
        assert len(ids) == len(set(ids))
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(node)]

    def test_no_grad_builds_no_graph(self):
        x = param([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_log_softmax_gradient(self):
        x = param(np.random.default_rng(2).normal(size=(3, 5)))
        w = Tensor(np.random.default_rng(3).normal(size=(3, 5)))
        assert finite_difference_check(lambda: log_softmax(x) * w, [x]).passed

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.integers(1, 6), elements=st.floats(0.5, 3.0)))
    def test_elementwise_chain_gradients(self, values):
        with default_dtype(np.float64):
            x = param(values)
            report = finite_difference_check(lambda: (x * x / (x + 1.0) - x**1.5).exp() * 0.3, [x], h=1e-6, tol=1e-6)
        assert report.passed, report


class TestFiniteDifferenceCheck:
    def test_identity_sum_is_exact(self):
        with default_dtype(np.float64):
            x = param(np.arange(5.0))
            report = finite_difference_check(lambda: x, [x], h=0.5, tol=1e-12)
        assert report.max_error == 0.0

    def test_layer_norm_composite(self):
        rng = np.random.default_rng(8)
        x, g, b = param(rng.normal(size=(2, 8))), param(1 + 0.1 * rng.normal(size=8)), param(rng.normal(size=8))
        w = Tensor(rng.normal(size=(8, 3)))
        report = finite_difference_check(lambda: activation(layer_norm(x, g, b) @ w, "gelu"), [x, g, b], h=1e-3, tol=1e-2)
        assert report.passed, report

    def test_detects_a_wrong_gradient(self):
        x = param([1.0, 2.0])

        def broken():
            y = x * 2.0
            y._grad_fn = lambda g: (g * 3.0,)  # deliberately wrong rule
            return y

        assert not finite_difference_check(broken, [x]).passed


class TestNumerics:
    def test_overflow_is_detected(self):
        with pytest.raises(NumericalError):
            exp(Tensor([100.0]))  # exceeds float32 range

    def test_float64_switch(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
            assert (Tensor([1.0]) * 2.0).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_shape_invariant(self):
        t = Tensor(np.zeros((2, 3)))
        assert int(np.prod(t.shape)) == t.data.size
        assert t.data.flags["C_CONTIGUOUS"]

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.normal(size=(4, 8)))
            return dropout(gelu(x @ Tensor(rng.normal(size=(8, 8)))), 0.2, True, 5).data

        assert run().tobytes() == run().tobytes()


class TestWeightFile:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5).astype(np.float32), "s": np.float32(2.5).reshape(())}
        weight_io.save(tmp_path / "w.bin", tensors, "meta")
        loaded, meta = weight_io.load(tmp_path / "w.bin")
        assert meta == "meta"
        assert list(loaded) == list(tensors)
        for k in tensors:
            assert loaded[k].tobytes() == tensors[k].tobytes()
            assert loaded[k].shape == tensors[k].shape

    def test_documented_byte_layout(self):
        blob = weight_io.dumps({"x": np.array([[1.0, 2.0]], dtype=np.float32)})
        expected = b"TITW" + struct.pack("<BI", 1, 0) + struct.pack("<I", 1)
        expected += struct.pack("<H", 1) + b"x" + struct.pack("<B", 2) + struct.pack("<2I", 1, 2)
        expected += struct.pack("<2f", 1.0, 2.0)
        assert blob == expected

    def test_corrupt_file(self):
        with pytest.raises(CheckpointError):
            weight_io.loads(b"TITW\x01")
        with pytest.raises(CheckpointError):
            weight_io.loads(b"NOPE" + b"\x00" * 20)
