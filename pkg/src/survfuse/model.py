"""Multimodal fusion network.

A fully-connected clinical encoder expands the covariate vector into a short
token sequence; imaging tokens come from the (frozen or trainable) volume
encoder. One bidirectional cross-attention round enriches each modality with
the other, a final attention layer queries the concatenated sequence with
the clinical projection, attention pooling collapses the result, and two
fully-connected layers emit the survival-bin logits.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError

MODALITIES = ("clinical", "imaging", "multimodal")


class TokenSequence:
    """Ordered d-wide embedding vectors for one modality."""

    __slots__ = ("tokens", "modality")

    def __init__(self, tokens, modality):
        if modality not in ("clinical", "imaging", "fused"):
            raise ValueError(f"unknown modality {modality!r}")
        t = tokens if isinstance(tokens, T.Tensor) else T.Tensor(tokens)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ShapeError(f"token sequence must be (n >= 1, d), got {t.shape}")
        if not np.all(np.isfinite(t.data)):
            raise ValueError("token sequence contains non-finite entries")
        self.tokens = t
        self.modality = modality

    @property
    def n(self):
        return self.tokens.shape[0]

    @property
    def d(self):
        return self.tokens.shape[1]


class AttentionWeights:
    """Projections for one multi-head attention module (width d, h heads)."""

    def __init__(self, store, prefix, d, heads):
        if d % heads:
            raise ShapeError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_k = d // heads
        self.wq = store.parameter(prefix + ".wq", (d, d))
        self.wk = store.parameter(prefix + ".wk", (d, d))
        self.wv = store.parameter(prefix + ".wv", (d, d))
        self.wo = store.parameter(prefix + ".wo", (d, d))

    @classmethod
    def identity(cls, d, heads=1):
        """Identity projections (no output mixing); used by tests and oracles."""
        store = T.ParameterStore(seed=0)
        w = cls.__new__(cls)
        w.d, w.heads, w.d_k = d, heads, d // heads
        eye = np.eye(d)
        w.wq = store.parameter("i.wq", (d, d), init=eye)
        w.wk = store.parameter("i.wk", (d, d), init=eye)
        w.wv = store.parameter("i.wv", (d, d), init=eye)
        w.wo = store.parameter("i.wo", (d, d), init=eye)
        return w


def _mha(query, kv, w):
    """Multi-head attention on batched tensors: (B, n_q, d) x (B, n_kv, d)."""
    bsz, n_q, d = query.shape
    n_kv = kv.shape[1]
    h, dk = w.heads, w.d_k

    def split(t, n):
        return T.permute(T.reshape(t, (bsz, n, h, dk)), (0, 2, 1, 3))

    q = split(T.matmul(query, w.wq), n_q)
    k = split(T.matmul(kv, w.wk), n_kv)
    v = split(T.matmul(kv, w.wv), n_kv)
    scores = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(dk))
    mixed = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.permute(mixed, (0, 2, 1, 3)), (bsz, n_q, d))
    return T.matmul(merged, w.wo)


def cross_attention(alpha, beta, weights):
    """Enrich alpha with beta: softmax(Q_a K_b^T / sqrt(d_k)) V_b per head,
    heads concatenated and output-projected. Output keeps alpha's length."""
    if alpha.d != beta.d:
        raise ShapeError(f"width mismatch: {alpha.d} vs {beta.d}")
    q = T.reshape(alpha.tokens, (1, alpha.n, alpha.d))
    kv = T.reshape(beta.tokens, (1, beta.n, beta.d))
    out = T.reshape(_mha(q, kv, weights), (alpha.n, alpha.d))
    return TokenSequence(out, "fused")


def attention_pool(seq, query):
    """Collapse a sequence with softmax attention against a learned query."""
    q = query if isinstance(query, T.Tensor) else T.Tensor(query)
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    if tokens.ndim == 2:
        tokens3 = T.reshape(tokens, (1,) + tuple(tokens.shape))
        return T.reshape(_pool_batched(tokens3, q), (tokens.shape[1],))
    return _pool_batched(tokens, q)


def _pool_batched(tokens, q):
    bsz, n, d = tokens.shape
    scores = T.matmul(tokens, T.reshape(q, (d, 1))) * (1.0 / np.sqrt(d))
    weights = T.softmax(scores, axis=1)
    pooled = T.matmul(T.transpose(weights), tokens)
    return T.reshape(pooled, (bsz, d))


class SurvivalTransformer:
    """The trainable survival network for one modality setup."""

    def __init__(self, config, n_covariates, seed, n_imaging_tokens=None,
                 modality="multimodal"):
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        self.config = config
        self.modality = modality
        self.n_covariates = n_covariates
        self.n_imaging_tokens = n_imaging_tokens
        self.store = T.ParameterStore(seed)
        c = config
        p = self.store.parameter

        if modality in ("clinical", "multimodal"):
            self.enc_w1 = p("clin.w1", (n_covariates, c.d))
            self.enc_b1 = p("clin.b1", (c.d,), init="zeros")
            self.enc_w2 = p("clin.w2", (c.d, c.clinical_tokens * c.d))
            self.enc_b2 = p("clin.b2", (c.clinical_tokens * c.d,), init="zeros")

        if modality == "clinical":
            self.self_attn = AttentionWeights(self.store, "selfattn", c.d, c.heads)
            self.ln_self = self._ln("selfattn.ln")
        elif modality == "imaging":
            self.self_attn = AttentionWeights(self.store, "imgattn", c.d, c.heads)
            self.ln_self = self._ln("imgattn.ln")
        else:
            self.ca_clin = AttentionWeights(self.store, "fuse.c_from_i", c.d, c.heads)
            self.ca_img = AttentionWeights(self.store, "fuse.i_from_c", c.d, c.heads)
            self.ln_clin = self._ln("fuse.c.ln")
            self.ln_img = self._ln("fuse.i.ln")
            self.final_attn = AttentionWeights(self.store, "final", c.d, c.heads)
            self.ln_final = self._ln("final.ln")

        self.pool_q = p("pool.q", (c.d,))
        self.head_w1 = p("head.w1", (c.d, c.d))
        self.head_b1 = p("head.b1", (c.d,), init="zeros")
        self.head_w2 = p("head.w2", (c.d, c.bins))
        self.head_b2 = p("head.b2", (c.bins,), init="zeros")

    def _ln(self, prefix):
        return (
            self.store.parameter(prefix + ".g", (self.config.d,), init="ones"),
            self.store.parameter(prefix + ".b", (self.config.d,), init="zeros"),
        )

    def parameters(self):
        return self.store.values()

    # ------------------------------------------------------------------
    # building blocks (batched)

    def encode_clinical(self, x):
        """(B, q) covariates -> (B, n_c, d) clinical tokens."""
        t = x if isinstance(x, T.Tensor) else T.Tensor(x)
        if t.ndim != 2 or t.shape[1] != self.n_covariates:
            raise ShapeError(
                f"expected covariates (B, {self.n_covariates}), got {t.shape}"
            )
        hidden = T.gelu(T.matmul(t, self.enc_w1) + self.enc_b1)
        flat = T.matmul(hidden, self.enc_w2) + self.enc_b2
        c = self.config
        return T.reshape(flat, (t.shape[0], c.clinical_tokens, c.d))

    def _self_block(self, tokens):
        gain, bias = self.ln_self
        return T.layer_norm(tokens + _mha(tokens, tokens, self.self_attn), gain, bias)

    def fuse(self, clinical, imaging):
        """One bidirectional cross-attention round with residual + layer norm."""
        c2 = T.layer_norm(
            clinical + _mha(clinical, imaging, self.ca_clin), *self.ln_clin
        )
        i2 = T.layer_norm(
            imaging + _mha(imaging, clinical, self.ca_img), *self.ln_img
        )
        return c2, i2

    def final_attention(self, clinical2, imaging2):
        """Final attention: K/V from the sequence concatenation, Q from the
        clinical projection (or the concatenation itself in symmetric mode)."""
        concat = T.concat([clinical2, imaging2], axis=1)
        query = concat if self.config.final_query == "symmetric" else clinical2
        out = _mha(query, concat, self.final_attn)
        return T.layer_norm(query + out, *self.ln_final)

    def head(self, pooled, dropout_rng=None):
        hidden = T.gelu(T.matmul(pooled, self.head_w1) + self.head_b1)
        if dropout_rng is not None and self.config.dropout > 0:
            keep = 1.0 - self.config.dropout
            mask = dropout_rng.random(hidden.shape) < keep
            hidden = hidden * (mask.astype(np.float64) / keep)
        return T.matmul(hidden, self.head_w2) + self.head_b2

    # ------------------------------------------------------------------
    # forward passes

    def forward(self, covariates=None, imaging_tokens=None, dropout_rng=None):
        """Batched logits (B, bins) for this model's modality."""
        if self.modality == "clinical":
            tokens = self._self_block(self.encode_clinical(covariates))
        elif self.modality == "imaging":
            tokens = self._self_block(self._imaging(imaging_tokens))
        else:
            c2, i2 = self.fuse(
                self.encode_clinical(covariates), self._imaging(imaging_tokens)
            )
            tokens = self.final_attention(c2, i2)
        pooled = _pool_batched(tokens, self.pool_q)
        return self.head(pooled, dropout_rng)

    @staticmethod
    def _imaging(imaging_tokens):
        t = (
            imaging_tokens
            if isinstance(imaging_tokens, T.Tensor)
            else T.Tensor(imaging_tokens)
        )
        if t.ndim != 3:
            raise ShapeError(f"imaging tokens must be (B, n, d), got {t.shape}")
        return t

    def pooled_representation(self, covariates=None, imaging_tokens=None):
        """The fused pooled vector feeding the head (for embedding export)."""
        if self.modality == "clinical":
            tokens = self._self_block(self.encode_clinical(covariates))
        elif self.modality == "imaging":
            tokens = self._self_block(self._imaging(imaging_tokens))
        else:
            c2, i2 = self.fuse(
                self.encode_clinical(covariates), self._imaging(imaging_tokens)
            )
            tokens = self.final_attention(c2, i2)
        return _pool_batched(tokens, self.pool_q)

    def state_dict(self):
        return self.store.state_dict()

    def load_state_dict(self, state):
        self.store.load_state_dict(state)


def clinical_only_forward(model, x):
    """Covariates -> logits through the self-attention clinical path."""
    if model.modality != "clinical":
        raise ValueError("model was not built for the clinical modality")
    return model.forward(covariates=np.atleast_2d(x))
