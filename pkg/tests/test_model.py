import numpy as np
import pytest

from survfuse import model as M
from survfuse import tensor as T
from survfuse.config import ModelConfig
from survfuse.errors import ShapeError


def softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_oracle(q_tokens, kv_tokens, d_k):
    """Direct softmax(Q K^T / sqrt(d_k)) V evaluation (identity projections)."""
    scores = q_tokens @ kv_tokens.T / np.sqrt(d_k)
    return softmax_rows(scores) @ kv_tokens


def mha_oracle(q_tokens, kv_tokens, w):
    """Independent per-head evaluation of the attention module."""
    h, dk = w.heads, w.d_k
    q = q_tokens @ w.wq.data
    k = kv_tokens @ w.wk.data
    v = kv_tokens @ w.wv.data
    outs = []
    for head in range(h):
        sl = slice(head * dk, (head + 1) * dk)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
        outs.append(softmax_rows(scores) @ v[:, sl])
    return np.concatenate(outs, axis=1) @ w.wo.data


def small_config(**kw):
    defaults = dict(d=8, heads=2, clinical_tokens=2, bins=5, epochs=5, batch_size=8)
    defaults.update(kw)
    return ModelConfig(**defaults)


class TestCrossAttention:
    def test_single_key(self):
        rng = np.random.default_rng(0)
        d = 6
        v = rng.normal(size=(1, d))
        alpha = M.TokenSequence(rng.normal(size=(3, d)), "clinical")
        beta = M.TokenSequence(v, "imaging")
        w = M.AttentionWeights.identity(d)
        out = M.cross_attention(alpha, beta, w)
        # softmax over one key is 1: every row is v (identity value projection)
        np.testing.assert_allclose(out.tokens.data, np.repeat(v, 3, axis=0), atol=1e-12)

    def test_identical_value_rows(self):
        rng = np.random.default_rng(1)
        d = 6
        u = rng.normal(size=d)
        alpha = M.TokenSequence(rng.normal(size=(4, d)), "clinical")
        beta = M.TokenSequence(np.tile(u, (5, 1)), "imaging")
        out = M.cross_attention(alpha, beta, M.AttentionWeights.identity(d))
        for row in out.tokens.data:
            np.testing.assert_allclose(row, u, atol=1e-12)

    def test_matches_direct_equation_oracle(self):
        rng = np.random.default_rng(2)
        d = 8
        a = rng.normal(size=(2, d))
        b = rng.normal(size=(3, d))
        out = M.cross_attention(
            M.TokenSequence(a, "clinical"),
            M.TokenSequence(b, "imaging"),
            M.AttentionWeights.identity(d),
        )
        np.testing.assert_allclose(
            out.tokens.data, attention_oracle(a, b, d), atol=1e-12
        )

    def test_multihead_matches_per_head_oracle(self):
        rng = np.random.default_rng(3)
        d = 8
        store = T.ParameterStore(seed=5)
        w = M.AttentionWeights(store, "t", d, heads=2)
        a, b = rng.normal(size=(3, d)), rng.normal(size=(5, d))
        out = M.cross_attention(
            M.TokenSequence(a, "clinical"), M.TokenSequence(b, "imaging"), w
        )
        np.testing.assert_allclose(out.tokens.data, mha_oracle(a, b, w), atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            M.cross_attention(
                M.TokenSequence(np.zeros((2, 4)), "clinical"),
                M.TokenSequence(np.zeros((2, 6)), "imaging"),
                M.AttentionWeights.identity(4),
            )

    def test_convex_combination_envelope(self):
        rng = np.random.default_rng(4)
        d = 6
        w = M.AttentionWeights.identity(d)
        for _ in range(20):
            a = rng.normal(size=(3, d))
            b = rng.normal(size=(4, d))
            out = M.cross_attention(
                M.TokenSequence(a, "clinical"), M.TokenSequence(b, "imaging"), w
            ).tokens.data
            lo, hi = b.min(axis=0), b.max(axis=0)
            assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_permuting_kv_tokens_is_noop(self):
        rng = np.random.default_rng(5)
        d = 8
        store = T.ParameterStore(seed=6)
        w = M.AttentionWeights(store, "p", d, heads=2)
        a, b = rng.normal(size=(3, d)), rng.normal(size=(6, d))
        base = M.cross_attention(
            M.TokenSequence(a, "clinical"), M.TokenSequence(b, "imaging"), w
        ).tokens.data
        perm = rng.permutation(6)
        out = M.cross_attention(
            M.TokenSequence(a, "clinical"), M.TokenSequence(b[perm], "imaging"), w
        ).tokens.data
        np.testing.assert_allclose(out, base, atol=1e-12)

    def test_token_count_contracts(self):
        rng = np.random.default_rng(6)
        d = 8
        store = T.ParameterStore(seed=7)
        w = M.AttentionWeights(store, "s", d, heads=2)
        for n_a in range(1, 9):
            for n_b in range(1, 9):
                out = M.cross_attention(
                    M.TokenSequence(rng.normal(size=(n_a, d)), "clinical"),
                    M.TokenSequence(rng.normal(size=(n_b, d)), "imaging"),
                    w,
                )
                assert out.tokens.shape == (n_a, d)


class TestClinicalEncoder:
    def test_zero_inputs_zero_weights_gives_bias(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, n_covariates=5, seed=0, modality="clinical")
        m.enc_w1.data[:] = 0.0
        m.enc_w2.data[:] = 0.0
        m.enc_b2.data[:] = 1.5
        tokens = m.encode_clinical(np.zeros((1, 5)))
        np.testing.assert_allclose(tokens.data, 1.5)

    def test_shape_contract_defaults(self):
        cfg = ModelConfig()
        m = M.SurvivalTransformer(cfg, n_covariates=9, seed=0, modality="clinical")
        tokens = m.encode_clinical(np.zeros((3, 9)))
        assert tokens.shape == (3, 4, 64)

    def test_deterministic_given_seed(self):
        cfg = small_config()
        x = np.random.default_rng(8).normal(size=(2, 5))
        a = M.SurvivalTransformer(cfg, 5, seed=11, modality="clinical")
        b = M.SurvivalTransformer(cfg, 5, seed=11, modality="clinical")
        assert np.array_equal(
            a.encode_clinical(x).data, b.encode_clinical(x).data
        )

    def test_wrong_width_rejected(self):
        m = M.SurvivalTransformer(small_config(), 5, seed=0, modality="clinical")
        with pytest.raises(ShapeError):
            m.encode_clinical(np.zeros((2, 7)))


class TestFuse:
    def test_token_counts_preserved(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=1, modality="multimodal")
        rng = np.random.default_rng(9)
        c = T.Tensor(rng.normal(size=(2, 2, cfg.d)))
        i = T.Tensor(rng.normal(size=(2, 7, cfg.d)))
        c2, i2 = m.fuse(c, i)
        assert c2.shape == (2, 2, cfg.d)
        assert i2.shape == (2, 7, cfg.d)

    def test_zero_value_projection_reduces_to_layer_norm(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=2, modality="multimodal")
        m.ca_clin.wv.data[:] = 0.0
        rng = np.random.default_rng(10)
        c = T.Tensor(rng.normal(size=(1, 2, cfg.d)))
        i = T.Tensor(rng.normal(size=(1, 4, cfg.d)))
        c2, _ = m.fuse(c, i)
        want = T.layer_norm(c, *m.ln_clin).data
        np.testing.assert_allclose(c2.data, want, atol=1e-12)

    def test_gradient_reaches_both_modalities(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=3, modality="multimodal")
        rng = np.random.default_rng(11)
        c = T.Tensor(rng.normal(size=(1, 2, cfg.d)), requires_grad=True)
        i = T.Tensor(rng.normal(size=(1, 3, cfg.d)), requires_grad=True)
        wc = np.random.default_rng(0).normal(size=(1, 2, cfg.d))
        wi = np.random.default_rng(1).normal(size=(1, 3, cfg.d))

        def f():
            c2, i2 = m.fuse(c, i)
            return T.tsum(c2 * wc) + T.tsum(i2 * wi)

        assert T.grad_check(f, [c, i], step=1e-3) < 1e-4


class TestFinalAttention:
    def test_duplicated_keys_match_self_attention_oracle(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=4, modality="multimodal")
        rng = np.random.default_rng(12)
        c = rng.normal(size=(2, cfg.d))
        ct = T.Tensor(c[None])
        out = m.final_attention(ct, ct).data[0]
        # duplicated keys renormalize to the same convex weights
        self_attn = mha_oracle(c, c, m.final_attn)
        want = T.layer_norm(T.Tensor(c + self_attn), *m.ln_final).data
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_output_shape(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=5, modality="multimodal")
        rng = np.random.default_rng(13)
        c2 = T.Tensor(rng.normal(size=(3, 2, cfg.d)))
        i2 = T.Tensor(rng.normal(size=(3, 6, cfg.d)))
        assert m.final_attention(c2, i2).shape == (3, 2, cfg.d)

    def test_symmetric_variant_keeps_concat_length(self):
        cfg = small_config(final_query="symmetric")
        m = M.SurvivalTransformer(cfg, 5, seed=6, modality="multimodal")
        rng = np.random.default_rng(14)
        c2 = T.Tensor(rng.normal(size=(1, 2, cfg.d)))
        i2 = T.Tensor(rng.normal(size=(1, 6, cfg.d)))
        assert m.final_attention(c2, i2).shape == (1, 8, cfg.d)


class TestAttentionPool:
    def test_single_token_identity(self):
        rng = np.random.default_rng(15)
        tok = rng.normal(size=(1, 6))
        out = M.attention_pool(
            M.TokenSequence(tok, "fused"), rng.normal(size=6)
        )
        np.testing.assert_allclose(out.data, tok[0], atol=1e-12)

    def test_identical_tokens_identity(self):
        rng = np.random.default_rng(16)
        u = rng.normal(size=6)
        out = M.attention_pool(
            M.TokenSequence(np.tile(u, (5, 1)), "fused"), rng.normal(size=6)
        )
        np.testing.assert_allclose(out.data, u, atol=1e-12)

    def test_matches_weighted_sum_oracle(self):
        rng = np.random.default_rng(17)
        d = 6
        tokens = rng.normal(size=(3, d))
        q = rng.normal(size=d)
        weights = softmax_rows((tokens @ q / np.sqrt(d))[None])[0]
        want = weights @ tokens
        out = M.attention_pool(M.TokenSequence(tokens, "fused"), q)
        np.testing.assert_allclose(out.data, want, atol=1e-12)


class TestHeadAndForward:
    def test_zero_weight_head_gives_bias(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=7, modality="clinical")
        m.head_w1.data[:] = 0.0
        m.head_w2.data[:] = 0.0
        m.head_b2.data[:] = np.arange(5.0)
        out = m.head(T.Tensor(np.random.default_rng(18).normal(size=(2, cfg.d))))
        np.testing.assert_allclose(out.data, np.tile(np.arange(5.0), (2, 1)))

    def test_logit_length(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=8, modality="clinical")
        out = M.clinical_only_forward(m, np.zeros(5))
        assert out.shape == (1, 5)

    def test_multimodal_forward_deterministic(self):
        cfg = small_config()
        rng = np.random.default_rng(19)
        x = rng.normal(size=(3, 5))
        img = rng.normal(size=(3, 4, cfg.d))

        def run():
            m = M.SurvivalTransformer(cfg, 5, seed=21, modality="multimodal")
            return m.forward(covariates=x, imaging_tokens=img).data

        assert np.array_equal(run(), run())

    def test_single_clinical_token_self_attention_degenerates(self):
        cfg = small_config(clinical_tokens=1)
        m = M.SurvivalTransformer(cfg, 5, seed=9, modality="clinical")
        x = np.random.default_rng(20).normal(size=(1, 5))
        tokens = m.encode_clinical(x)
        blocked = m._self_block(tokens)
        # one token: attention returns its own value projection path
        v = tokens.data @ m.self_attn.wv.data @ m.self_attn.wo.data
        want = T.layer_norm(T.Tensor(tokens.data + v), *m.ln_self).data
        np.testing.assert_allclose(blocked.data, want, atol=1e-12)

    def test_gradient_full_clinical_path(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=10, modality="clinical")
        rng = np.random.default_rng(22)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))

        def f():
            return T.tsum(m.forward(covariates=x) * w)

        err = T.grad_check(
            f, m.parameters(), step=1e-4, sample=25, rng=np.random.default_rng(1)
        )
        assert err < 1e-4

    def test_gradient_full_multimodal_path(self):
        cfg = small_config()
        m = M.SurvivalTransformer(cfg, 5, seed=11, modality="multimodal")
        rng = np.random.default_rng(23)
        x = rng.normal(size=(2, 5))
        img = rng.normal(size=(2, 3, cfg.d))
        w = rng.normal(size=(2, 5))

        def f():
            return T.tsum(m.forward(covariates=x, imaging_tokens=img) * w)

        err = T.grad_check(
            f, m.parameters(), step=1e-4, sample=20, rng=np.random.default_rng(2)
        )
        assert err < 1e-4

    def test_dropout_switch_changes_training_forward_only(self):
        cfg = small_config(dropout=0.5)
        m = M.SurvivalTransformer(cfg, 5, seed=12, modality="clinical")
        x = np.random.default_rng(24).normal(size=(2, 5))
        plain = m.forward(covariates=x).data
        dropped = m.forward(covariates=x, dropout_rng=np.random.default_rng(3)).data
        assert not np.array_equal(plain, dropped)
        again = m.forward(covariates=x).data
        assert np.array_equal(plain, again)
