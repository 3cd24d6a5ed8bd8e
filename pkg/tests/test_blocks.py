import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from titrl.autodiff import Tensor, default_dtype, finite_difference_check
from titrl.blocks import BlockParams, decoder_block, encoder_block, make_causal_mask, multi_head_self_attention
from titrl.errors import ConfigError, NumericalError


def randomized(p: BlockParams, seed: int, scale: float = 0.5) -> BlockParams:
    rng = np.random.default_rng(seed)
    for name, t in p.named_parameters():
        base = 1.0 if "gain" in name else 0.0
        t.data = (base + scale * rng.normal(size=t.shape)).astype(t.dtype)
    return p


def reference_attention(x, wq, wk, wv, wo, heads, mask=None):
    """Straight-line loop implementation of multi-head scaled dot-product attention."""
    n, d = x.shape
    dh = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros((n, d))
    probs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        p = np.zeros((n, n))
        for i in range(n):
            scores = [sum(q[i, c] * k[j, c] for c in range(cols.start, cols.stop)) / math.sqrt(dh) for j in range(n)]
            allowed = [j for j in range(n) if mask is None or mask[i, j]]
            m = max(scores[j] for j in allowed)
            z = sum(math.exp(scores[j] - m) for j in allowed)
            for j in allowed:
                p[i, j] = math.exp(scores[j] - m) / z
        probs.append(p)
        out[:, cols] = p @ v[:, cols]
    return out @ wo, probs


class TestCausalMask:
    def test_single(self):
        assert make_causal_mask(1).tolist() == [[True]]

    def test_three(self):
        assert make_causal_mask(3).tolist() == [[True, False, False], [True, True, False], [True, True, True]]

    def test_row_counts(self):
        m = make_causal_mask(16)
        for i in range(16):
            assert m[i].sum() == i + 1
            assert m[i, : i + 1].all()


class TestAttention:
    def test_single_token_attends_to_itself(self):
        p = BlockParams(8, 2, rng=np.random.default_rng(0))
        records = []
        multi_head_self_attention(Tensor(np.random.default_rng(1).normal(size=(1, 8))), p, records=records)
        assert len(records) == 2
        for r in records:
            assert r.weights.tolist() == [[1.0]]

    def test_zero_out_projection(self):
        p = BlockParams(8, 2, rng=np.random.default_rng(0))
        p.out_proj.data[:] = 0
        out = multi_head_self_attention(Tensor(np.random.default_rng(1).normal(size=(5, 8))), p)
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("heads,masked", [(1, False), (1, True), (2, True)])
    def test_matches_from_definition(self, heads, masked):
        d = 2 * heads
        with default_dtype(np.float64):
            p = randomized(BlockParams(d, heads), seed=heads)
            x = np.random.default_rng(7).normal(size=(4, d))
            mask = make_causal_mask(4) if masked else None
            records = []
            out = multi_head_self_attention(Tensor(x), p, mask, records=records)
        expected, probs = reference_attention(x, p.q_proj.data, p.k_proj.data, p.v_proj.data, p.out_proj.data, heads, mask)
        np.testing.assert_allclose(out.data, expected, atol=1e-5)
        for r, ref in zip(records, probs):
            np.testing.assert_allclose(r.weights, ref, atol=1e-6)

    def test_fully_masked_row(self):
        p = BlockParams(4, 1)
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(NumericalError):
            multi_head_self_attention(Tensor(np.ones((2, 4))), p, mask)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            BlockParams(6, 4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.sampled_from([1, 2, 4]), st.integers(0, 10_000), st.booleans())
    def test_records_are_distributions(self, n, heads, seed, causal):
        p = randomized(BlockParams(8, heads), seed, scale=1.0)
        records = []
        x = Tensor(np.random.default_rng(seed).normal(size=(n, 8)) * 3)
        (decoder_block if causal else encoder_block)(x, p, records=records)
        assert len(records) == heads
        for r in records:
            w = r.weights.astype(np.float64)
            assert w.shape == (n, n)
            assert np.all((w >= 0) & (w <= 1))
            np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
            if causal:
                assert np.all(w[~make_causal_mask(n)] == 0.0)


class TestEncoderBlock:
    @pytest.mark.parametrize("block", [encoder_block, decoder_block])
    def test_zero_weights_pass_through(self, block):
        z = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
        out = block(z, BlockParams.zeros(8, 2))
        assert out.data.tobytes() == z.data.tobytes()

    @pytest.mark.parametrize("n", [1, 4, 49])
    def test_shape(self, n):
        p = BlockParams(16, 4, rng=np.random.default_rng(n))
        assert encoder_block(Tensor(np.zeros((n + 1, 16))), p).shape == (n + 1, 16)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        p = randomized(BlockParams(8, 2), 3)
        z = rng.normal(size=(5, 8))
        base = encoder_block(Tensor(z), p).data
        for perm in [[0, 2, 1, 4, 3], [0, 4, 3, 2, 1], [0, 3, 4, 1, 2]]:
            out = encoder_block(Tensor(z[perm]), p).data
            np.testing.assert_allclose(out[1:], base[perm][1:], rtol=1e-5, atol=1e-6)
            np.testing.assert_allclose(out[0], base[0], rtol=1e-5, atol=1e-6)

    def test_batched_equals_unbatched(self):
        p = randomized(BlockParams(8, 2), 4)
        z = np.random.default_rng(4).normal(size=(3, 2, 5, 8))
        batched = encoder_block(Tensor(z), p).data
        for i in range(3):
            for j in range(2):
                np.testing.assert_allclose(batched[i, j], encoder_block(Tensor(z[i, j]), p).data, atol=1e-6)

    def test_dropout_only_in_training(self):
        p = randomized(BlockParams(8, 2), 5)
        z = Tensor(np.random.default_rng(5).normal(size=(4, 8)))
        a = encoder_block(z, p, attn_dropout=0.5, ffn_dropout=0.5, training=False).data
        b = encoder_block(z, p).data
        c = encoder_block(z, p, attn_dropout=0.5, ffn_dropout=0.5, training=True, rng=np.random.default_rng(1)).data
        assert a.tobytes() == b.tobytes()
        assert not np.allclose(a, c)


class TestDecoderBlock:
    def test_length_one_equals_unmasked(self):
        p = randomized(BlockParams(8, 2), 6)
        y = Tensor(np.random.default_rng(6).normal(size=(1, 8)))
        assert decoder_block(y, p).data.tobytes() == encoder_block(y, p).data.tobytes()

    def test_causality_probe(self):
        p = randomized(BlockParams(8, 2), 7)
        rng = np.random.default_rng(7)
        y = rng.normal(size=(4, 8))
        base = decoder_block(Tensor(y), p).data
        for t in range(3):
            perturbed = y.copy()
            perturbed[t + 1 :] += rng.normal(size=perturbed[t + 1 :].shape) * 10
            out = decoder_block(Tensor(perturbed), p).data
            assert out[: t + 1].tobytes() == base[: t + 1].tobytes()
            assert not np.allclose(out[t + 1 :], base[t + 1 :])


@pytest.mark.parametrize("block", [encoder_block, decoder_block])
@pytest.mark.parametrize("dtype,h,tol", [(np.float32, 1e-3, 1e-2), (np.float64, 1e-6, 1e-6)])
def test_block_gradients(block, dtype, h, tol):
    with default_dtype(dtype):
        p = randomized(BlockParams(8, 2, d_ff=16), 9, scale=0.3)
        z = Tensor(np.random.default_rng(9).normal(size=(4, 8)), requires_grad=True)
        w = Tensor(np.random.default_rng(10).normal(size=(4, 8)))
        params = dict(p.named_parameters())
        params["input"] = z
        report = finite_difference_check(lambda: block(z, p) * w, params, h=h, tol=tol)
    assert report.passed, report
