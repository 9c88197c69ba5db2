"""Attention, encoder/decoder blocks, masks, and the export hook."""

import csv

import numpy as np
import pytest

from mat.autodiff import Tape, Tensor, backward, finite_diff_gradient, sum_all, tensor
from mat.blocks import (
    AttentionExport,
    AttentionParams,
    causal_mask,
    decoder_block_forward,
    encoder_block_forward,
    init_attention,
    init_decoder_block,
    init_encoder_block,
    multi_head_attention,
    self_attention_mask,
)
from mat.errors import ArgumentError, MaskError
from mat.rng import stream_rng


def _attn(rng, dim=8, heads=2, dtype=np.float64):
    return init_attention(rng, dim, heads, dtype)


def brute_force_attention(params, query, key_value, mask=None, top_k=None):
    """Independent per-head reference in float64 with explicit loops."""
    q = query.astype(np.float64) @ params.w_q.data.astype(np.float64)
    k = key_value.astype(np.float64) @ params.w_k.data.astype(np.float64)
    v = key_value.astype(np.float64) @ params.w_v.data.astype(np.float64)
    heads = params.num_heads
    dh = q.shape[1] // heads
    out = np.zeros_like(q)
    for h in range(heads):
        qs = q[:, h * dh:(h + 1) * dh]
        ks = k[:, h * dh:(h + 1) * dh]
        vs = v[:, h * dh:(h + 1) * dh]
        for i in range(q.shape[0]):
            logits = np.array([qs[i] @ ks[j] / np.sqrt(dh) for j in range(k.shape[0])])
            allowed = np.ones(k.shape[0], dtype=bool) if mask is None else mask[i].copy()
            if top_k is not None and top_k < allowed.sum():
                order = sorted(np.flatnonzero(allowed), key=lambda j: (-logits[j], j))
                keep = np.zeros_like(allowed)
                keep[order[:top_k]] = True
                allowed = keep
            w = np.zeros(k.shape[0])
            live = logits[allowed] - logits[allowed].max()
            w[allowed] = np.exp(live) / np.exp(live).sum()
            out[i, h * dh:(h + 1) * dh] = w @ vs
    return out @ params.w_o.data.astype(np.float64)


class TestMultiHeadAttention:
    def test_single_key_returns_value_row(self):
        rng = stream_rng(0, "check")
        params = _attn(rng, dim=6, heads=2)
        params.w_v = tensor(np.eye(6), dtype=np.float64)
        params.w_o = tensor(np.eye(6), dtype=np.float64)
        query = tensor(rng.normal(size=(4, 6)), dtype=np.float64)
        kv = tensor(rng.normal(size=(1, 6)), dtype=np.float64)
        out = multi_head_attention(params, query, kv)
        np.testing.assert_allclose(out.data, np.tile(kv.data, (4, 1)), atol=1e-12)

    def test_topk_at_least_length_bit_identical(self):
        rng = stream_rng(1, "check")
        params = _attn(rng)
        query = tensor(rng.normal(size=(4, 8)), dtype=np.float64)
        kv = tensor(rng.normal(size=(6, 8)), dtype=np.float64)
        dense = multi_head_attention(params, query, kv)
        sparse = multi_head_attention(params, query, kv, top_k=6)
        np.testing.assert_array_equal(dense.data, sparse.data)

    def test_matches_brute_force_reference(self):
        rng = stream_rng(2, "check")
        params = _attn(rng, dim=8, heads=4)
        query = rng.normal(size=(4, 8))
        kv = rng.normal(size=(6, 8))
        mask = rng.random((4, 6)) > 0.3
        mask[:, 0] = True
        out = multi_head_attention(params, tensor(query, dtype=np.float64),
                                   tensor(kv, dtype=np.float64), mask=mask, top_k=3)
        ref = brute_force_attention(params, query, kv, mask=mask, top_k=3)
        np.testing.assert_allclose(out.data, ref, atol=1e-4)

    def test_zero_top_k_rejected(self):
        rng = stream_rng(3, "check")
        params = _attn(rng)
        x = tensor(np.zeros((2, 8)), dtype=np.float64)
        with pytest.raises(ArgumentError):
            multi_head_attention(params, x, x, top_k=0)

    def test_fully_masked_row_rejected(self):
        rng = stream_rng(4, "check")
        params = _attn(rng)
        x = tensor(np.zeros((2, 8)), dtype=np.float64)
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(MaskError, match="row 1"):
            multi_head_attention(params, x, x, mask=mask)


class TestCausalMask:
    def test_t1(self):
        np.testing.assert_array_equal(causal_mask(1), [[True]])

    def test_t3_lower_triangular(self):
        expected = np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=bool)
        np.testing.assert_array_equal(causal_mask(3), expected)

    def test_invalid_length(self):
        with pytest.raises(ArgumentError):
            causal_mask(0)

    def test_perturbation_before_t_is_invisible(self):
        """Outputs at positions < t' are bit-identical under causal masking."""
        rng = stream_rng(5, "check")
        params = _attn(rng)
        x = rng.normal(size=(6, 8))
        mask = causal_mask(6)
        base = multi_head_attention(params, tensor(x, dtype=np.float64),
                                    tensor(x, dtype=np.float64), mask=mask).data
        x2 = x.copy()
        x2[4] += 10.0
        out = multi_head_attention(params, tensor(x2, dtype=np.float64),
                                   tensor(x2, dtype=np.float64), mask=mask).data
        np.testing.assert_array_equal(base[:4], out[:4])
        assert not np.array_equal(base[4:], out[4:])


class TestEncoderBlock:
    def test_zero_output_projections_give_identity(self):
        rng = stream_rng(6, "check")
        block = init_encoder_block(rng, 8, 2, np.float64)
        block.attn.w_o = tensor(np.zeros((8, 8)), dtype=np.float64)
        block.ffn.w2 = tensor(np.zeros((32, 8)), dtype=np.float64)
        x = tensor(rng.normal(size=(5, 8)), dtype=np.float64)
        out = encoder_block_forward(block, x)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("t", [1, 8, 64])
    def test_shape_preserved(self, t):
        rng = stream_rng(7, "check")
        block = init_encoder_block(rng, 8, 2, np.float32)
        out = encoder_block_forward(block, tensor(rng.normal(size=(t, 8))))
        assert out.shape == (t, 8)

    def test_gradient_matches_finite_differences(self):
        rng = stream_rng(8, "check")
        block = init_encoder_block(rng, 8, 2, np.float64)
        x = tensor(rng.normal(size=(3, 8)), requires_grad=True, dtype=np.float64)

        def f(v):
            return sum_all(encoder_block_forward(block, v))

        with Tape():
            backward(f(x))
        np.testing.assert_allclose(x.grad, finite_diff_gradient(f, x), rtol=1e-3, atol=1e-8)

    def test_permutation_equivariance_without_positions(self):
        rng = stream_rng(9, "check")
        block = init_encoder_block(rng, 8, 2, np.float64)
        x = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        out = encoder_block_forward(block, tensor(x, dtype=np.float64)).data
        out_perm = encoder_block_forward(block, tensor(x[perm], dtype=np.float64)).data
        np.testing.assert_allclose(out[perm], out_perm, atol=1e-5)

    def test_positional_embedding_breaks_permutation_symmetry(self):
        rng = stream_rng(10, "check")
        block = init_encoder_block(rng, 8, 2, np.float64)
        pos = rng.normal(size=(6, 8))
        x = rng.normal(size=(6, 8))
        perm = np.roll(np.arange(6), 1)
        out = encoder_block_forward(block, tensor(x + pos, dtype=np.float64)).data
        out_perm = encoder_block_forward(block, tensor(x[perm] + pos, dtype=np.float64)).data
        assert np.abs(out[perm] - out_perm).max() > 1e-4


class TestDecoderBlock:
    def test_single_memory_token_attended_by_all_queries(self):
        rng = stream_rng(11, "check")
        block = init_decoder_block(rng, 8, 2, np.float64)
        query = tensor(rng.normal(size=(3, 8)), dtype=np.float64)
        memory = tensor(rng.normal(size=(1, 8)), dtype=np.float64)
        out = decoder_block_forward(block, query, memory)
        assert out.shape == (3, 8)

    def test_causal_query_mask_perturbation(self):
        rng = stream_rng(12, "check")
        block = init_decoder_block(rng, 8, 2, np.float64)
        memory = tensor(rng.normal(size=(4, 8)), dtype=np.float64)
        x = rng.normal(size=(5, 8))
        mask = causal_mask(5)
        base = decoder_block_forward(block, tensor(x, dtype=np.float64), memory,
                                     query_self_mask=mask).data
        x2 = x.copy()
        x2[3] -= 5.0
        out = decoder_block_forward(block, tensor(x2, dtype=np.float64), memory,
                                    query_self_mask=mask).data
        np.testing.assert_array_equal(base[:3], out[:3])

    def test_matches_composition_of_sub_operations(self):
        from mat.autodiff import add, layer_norm
        from mat.blocks import feed_forward

        rng = stream_rng(13, "check")
        block = init_decoder_block(rng, 8, 2, np.float64)
        query = tensor(rng.normal(size=(3, 8)), dtype=np.float64)
        memory = tensor(rng.normal(size=(5, 8)), dtype=np.float64)
        out = decoder_block_forward(block, query, memory)

        normed = layer_norm(query, block.ln1.gamma, block.ln1.beta)
        x = add(query, multi_head_attention(block.self_attn, normed, normed))
        x = add(x, multi_head_attention(block.cross_attn,
                                        layer_norm(x, block.ln2.gamma, block.ln2.beta), memory))
        x = add(x, feed_forward(block.ffn, layer_norm(x, block.ln3.gamma, block.ln3.beta)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-5)

    def test_all_invalid_memory_skips_cross_attention(self):
        rng = stream_rng(14, "check")
        block = init_decoder_block(rng, 8, 2, np.float64)
        query = tensor(rng.normal(size=(3, 8)), dtype=np.float64)
        memory = tensor(rng.normal(size=(4, 8)), dtype=np.float64)
        out = decoder_block_forward(block, query, memory,
                                    memory_key_valid=np.zeros(4, dtype=bool))
        # must equal the same block with memory values replaced by garbage
        garbage = tensor(rng.normal(size=(4, 8)) * 100, dtype=np.float64)
        out2 = decoder_block_forward(block, query, garbage,
                                     memory_key_valid=np.zeros(4, dtype=bool))
        np.testing.assert_array_equal(out.data, out2.data)


class TestSelfAttentionMask:
    def test_invalid_slots_keep_diagonal(self):
        valid = np.array([False, False, True, True])
        mask = self_attention_mask(valid, 4, causal=True)
        assert mask[0, 0] and mask[1, 1]
        assert not mask[2, 0] and not mask[2, 1]
        assert mask[3, 2] and mask[3, 3] and not mask[2, 3]

    def test_none_valid_gives_plain_causal(self):
        np.testing.assert_array_equal(self_attention_mask(None, 3, causal=True),
                                      causal_mask(3))
        assert self_attention_mask(None, 3, causal=False) is None


def test_attention_export_csv(tmp_path):
    rng = stream_rng(15, "check")
    params = init_attention(rng, 8, 2, np.float32)
    export = AttentionExport()
    q = tensor(rng.normal(size=(3, 8)).astype(np.float32))
    kv = tensor(rng.normal(size=(4, 8)).astype(np.float32))
    multi_head_attention(params, q, kv, export=export, layer="probe")
    path = tmp_path / "attn.csv"
    export.write_csv(str(path))
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["layer", "head", "query_index", "key_index", "weight"]
    assert len(rows) == 1 + 2 * 3 * 4
    weights = np.array([float(r[4]) for r in rows[1:]]).reshape(2, 3, 4)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-5)
