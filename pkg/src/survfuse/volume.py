"""Toy-scale 3D patch-transformer volume encoder with self-supervised pretraining.

Volumes are 4-channel voxel grids (the stacked sequence stand-ins). The
encoder tokenizes non-overlapping cubic patches, runs them through a small
transformer, and is pretrained on two proxy tasks: restoring the original
volume from an augmented view (mean absolute error) and a normalized-
temperature contrastive loss across two views per subject. After
pretraining the encoder is frozen for survival training.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, ShapeError

N_CHANNELS = 4


@dataclass(frozen=True)
class Volume:
    """4-channel voxel grid, float32, shape (4, D, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[0] != N_CHANNELS:
            raise ShapeError(f"volume must have shape (4, D, H, W), got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self):
        return self.data.shape[1:]


# ---------------------------------------------------------------------------
# preprocessing


def fit_histogram_landmarks(volumes, n_landmarks=11):
    """Decile landmarks of pooled nonzero voxels, one row per channel."""
    qs = np.linspace(0.0, 1.0, n_landmarks)
    marks = np.empty((N_CHANNELS, n_landmarks))
    for c in range(N_CHANNELS):
        pooled = np.concatenate(
            [v.data[c][v.data[c] != 0].ravel() for v in volumes]
        )
        if pooled.size == 0 or pooled.std() == 0:
            raise DegenerateInputError(f"channel {c} has no usable voxel variation")
        marks[c] = np.quantile(pooled, qs)
    return marks


def preprocess_volume(volume, landmarks):
    """Histogram-standardize each channel onto the reference landmarks, then
    z-normalize using the nonzero-voxel statistics."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    n_landmarks = landmarks.shape[1]
    qs = np.linspace(0.0, 1.0, n_landmarks)
    out = np.empty_like(volume.data, dtype=np.float64)
    for c in range(N_CHANNELS):
        chan = volume.data[c].astype(np.float64)
        mask = chan != 0
        vals = chan[mask]
        if vals.size == 0 or vals.std() == 0:
            raise DegenerateInputError(f"channel {c} is constant")
        own = np.quantile(vals, qs)
        if own[-1] - own[0] <= 0:
            raise DegenerateInputError(f"channel {c} has zero dynamic range")
        mapped = chan.copy()
        mapped[mask] = np.interp(vals, own, landmarks[c])
        mu = mapped[mask].mean()
        sd = mapped[mask].std()
        if sd == 0:
            raise DegenerateInputError(f"channel {c} collapsed to a constant")
        out[c] = (mapped - mu) / sd
    return Volume(out.astype(np.float32))


# ---------------------------------------------------------------------------
# patch tokenization


def extract_patches(volume, patch_size):
    """Non-overlapping p^3 patches, flattened channel-major: (n_patches, 4*p^3)."""
    p = patch_size
    c, d, h, w = volume.data.shape
    if d % p or h % p or w % p:
        raise ShapeError(f"dims {volume.dims} not divisible by patch size {p}")
    blocks = volume.data.reshape(c, d // p, p, h // p, p, w // p, p)
    blocks = blocks.transpose(1, 3, 5, 0, 2, 4, 6)  # (gd, gh, gw, c, p, p, p)
    return blocks.reshape(-1, c * p**3).astype(np.float64)


def assemble_patches(patches, dims, patch_size):
    """Inverse of extract_patches."""
    p = patch_size
    d, h, w = dims
    blocks = np.asarray(patches, dtype=np.float64).reshape(
        d // p, h // p, w // p, N_CHANNELS, p, p, p
    )
    return Volume(blocks.transpose(3, 0, 4, 1, 5, 2, 6).reshape(N_CHANNELS, d, h, w))


def token_count(dims, patch_size):
    d, h, w = dims
    return (d // patch_size) * (h // patch_size) * (w // patch_size)


# ---------------------------------------------------------------------------
# augmentations


def augment_cutout(volume, rng, fraction=0.25):
    """Zero one random axis-aligned box in all channels.

    Returns the augmented volume and the box as (z0, y0, x0, dz, dy, dx).
    """
    if not 0.0 < fraction <= 0.5:
        raise ConfigError(f"cutout fraction must be in (0, 0.5], got {fraction}")
    dims = volume.dims
    size = [max(1, int(round(fraction * s))) for s in dims]
    start = [int(rng.integers(0, s - sz + 1)) for s, sz in zip(dims, size)]
    out = volume.data.copy()
    z0, y0, x0 = start
    dz, dy, dx = size
    out[:, z0 : z0 + dz, y0 : y0 + dy, x0 : x0 + dx] = 0.0
    return Volume(out), (z0, y0, x0, dz, dy, dx)


def augment_patch_swap(volume, rng, n_swaps=8, patch_size=4):
    """Exchange n_swaps disjoint pairs of p^3 blocks (channels move together).

    The voxel multiset is preserved bitwise.
    """
    if n_swaps < 1:
        raise ConfigError(f"n_swaps must be >= 1, got {n_swaps}")
    p = patch_size
    d, h, w = volume.dims
    if d % p or h % p or w % p:
        raise ShapeError(f"dims {volume.dims} not divisible by patch size {p}")
    grid = (d // p, h // p, w // p)
    n_blocks = grid[0] * grid[1] * grid[2]
    if 2 * n_swaps > n_blocks:
        raise ConfigError(f"{n_swaps} swaps need {2 * n_swaps} blocks, have {n_blocks}")
    chosen = rng.choice(n_blocks, size=2 * n_swaps, replace=False)
    out = volume.data.copy()
    for a, b in zip(chosen[::2], chosen[1::2]):
        za, ya, xa = np.unravel_index(a, grid)
        zb, yb, xb = np.unravel_index(b, grid)
        sa = (
            slice(None),
            slice(za * p, (za + 1) * p),
            slice(ya * p, (ya + 1) * p),
            slice(xa * p, (xa + 1) * p),
        )
        sb = (
            slice(None),
            slice(zb * p, (zb + 1) * p),
            slice(yb * p, (yb + 1) * p),
            slice(xb * p, (xb + 1) * p),
        )
        tmp = out[sa].copy()
        out[sa] = out[sb]
        out[sb] = tmp
    return Volume(out)


def make_views(volume, rng, cutout_fraction=0.25, n_swaps=8, patch_size=4):
    """Two independently augmented views (patch swap then cutout)."""
    views = []
    for _ in range(2):
        v = augment_patch_swap(volume, rng, n_swaps=n_swaps, patch_size=patch_size)
        v, _ = augment_cutout(v, rng, fraction=cutout_fraction)
        views.append(v)
    return views


# ---------------------------------------------------------------------------
# proxy-task losses


def reconstruction_loss(decoded, original):
    """Mean absolute voxel error between decoded output and the original."""
    target = original.data if isinstance(original, Volume) else np.asarray(original)
    dec = decoded if isinstance(decoded, T.Tensor) else T.Tensor(decoded)
    if tuple(dec.shape) != tuple(np.asarray(target).shape):
        raise ShapeError(f"shape mismatch: {dec.shape} vs {np.asarray(target).shape}")
    return T.tmean(T.absolute(dec - T.Tensor(np.asarray(target, dtype=np.float64))))


def contrastive_loss(embeddings, temperature=0.1):
    """Symmetric normalized-temperature cross-entropy over cosine similarities.

    Rows 0..B-1 are each subject's first view, rows B..2B-1 the second; each
    anchor's positive is its sibling view.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    e = embeddings if isinstance(embeddings, T.Tensor) else T.Tensor(embeddings)
    n = e.shape[0]
    if n % 2 or n < 4:
        raise ConfigError(f"need an even number >= 4 of view embeddings, got {n}")
    b = n // 2
    norm = T.sqrt(T.tsum(e * e, axis=-1, keepdims=True) + 1e-12)
    z = e / norm
    sims = T.matmul(z, T.transpose(z)) * (1.0 / temperature)
    sims = sims + T.Tensor(np.diag(np.full(n, -1e9)))  # mask self-similarity
    pos = (np.arange(n) + b) % n
    pos_sims = T.take_pairs(sims, np.arange(n), pos)
    return T.tmean(T.logsumexp(sims, axis=-1) - pos_sims)


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderConfig:
    dims: tuple = (16, 16, 16)
    patch_size: int = 4
    d: int = 64
    heads: int = 4
    blocks: int = 2
    projection_dim: int = 32

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by heads {self.heads}")
        for axis in self.dims:
            if axis % self.patch_size:
                raise ConfigError(
                    f"dims {self.dims} not divisible by patch size {self.patch_size}"
                )


class VolumeEncoder:
    """Patch embedder + L transformer blocks + decoder and projection heads."""

    def __init__(self, config, seed):
        self.config = config
        self.frozen = False
        self.store = T.ParameterStore(seed)
        c = config
        self.n_tokens = token_count(c.dims, c.patch_size)
        patch_dim = N_CHANNELS * c.patch_size**3
        p = self.store.parameter
        self.w_embed = p("embed.w", (patch_dim, c.d))
        self.b_embed = p("embed.b", (c.d,), init="zeros")
        self.pos = p("embed.pos", (self.n_tokens, c.d))
        self.block_params = []
        for l in range(c.blocks):
            pre = f"block{l}."
            self.block_params.append(
                {
                    "wq": p(pre + "wq", (c.d, c.d)),
                    "wk": p(pre + "wk", (c.d, c.d)),
                    "wv": p(pre + "wv", (c.d, c.d)),
                    "wo": p(pre + "wo", (c.d, c.d)),
                    "ln1_g": p(pre + "ln1.g", (c.d,), init="ones"),
                    "ln1_b": p(pre + "ln1.b", (c.d,), init="zeros"),
                    "ffn_w1": p(pre + "ffn.w1", (c.d, 2 * c.d)),
                    "ffn_b1": p(pre + "ffn.b1", (2 * c.d,), init="zeros"),
                    "ffn_w2": p(pre + "ffn.w2", (2 * c.d, c.d)),
                    "ffn_b2": p(pre + "ffn.b2", (c.d,), init="zeros"),
                    "ln2_g": p(pre + "ln2.g", (c.d,), init="ones"),
                    "ln2_b": p(pre + "ln2.b", (c.d,), init="zeros"),
                }
            )
        self.w_dec = p("decoder.w", (c.d, patch_dim))
        self.b_dec = p("decoder.b", (patch_dim,), init="zeros")
        self.w_proj1 = p("proj.w1", (c.d, c.d))
        self.b_proj1 = p("proj.b1", (c.d,), init="zeros")
        self.w_proj2 = p("proj.w2", (c.d, c.projection_dim))
        self.b_proj2 = p("proj.b2", (c.projection_dim,), init="zeros")

    def parameters(self):
        return self.store.values()

    def _attention(self, x, bp):
        """Multi-head self-attention on (B, n, d)."""
        c = self.config
        dk = c.d // c.heads
        bsz, n, _ = x.shape

        def split(t):
            return T.permute(T.reshape(t, (bsz, n, c.heads, dk)), (0, 2, 1, 3))

        q = split(T.matmul(x, bp["wq"]))
        k = split(T.matmul(x, bp["wk"]))
        v = split(T.matmul(x, bp["wv"]))
        scores = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(dk))
        mixed = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.permute(mixed, (0, 2, 1, 3)), (bsz, n, c.d))
        return T.matmul(merged, bp["wo"])

    def encode_batch(self, patch_stack):
        """(B, n_patches, patch_dim) array or Tensor -> (B, n, d) token Tensor."""
        x = patch_stack if isinstance(patch_stack, T.Tensor) else T.Tensor(patch_stack)
        tokens = T.matmul(x, self.w_embed) + self.b_embed + self.pos
        for bp in self.block_params:
            attn = self._attention(tokens, bp)
            tokens = T.layer_norm(tokens + attn, bp["ln1_g"], bp["ln1_b"])
            hidden = T.gelu(T.matmul(tokens, bp["ffn_w1"]) + bp["ffn_b1"])
            ffn = T.matmul(hidden, bp["ffn_w2"]) + bp["ffn_b2"]
            tokens = T.layer_norm(tokens + ffn, bp["ln2_g"], bp["ln2_b"])
        return tokens

    def encode(self, volume):
        """Token sequence (n_tokens, d) for one volume; constant when frozen."""
        patches = extract_patches(volume, self.config.patch_size)[None]
        tokens = self.encode_batch(patches)
        out = T.reshape(tokens, (self.n_tokens, self.config.d))
        if self.frozen:
            return T.Tensor(out.data)
        return out

    def decode_batch(self, tokens):
        """Predicted patch stack (B, n_patches, patch_dim) from tokens."""
        return T.matmul(tokens, self.w_dec) + self.b_dec

    def project_batch(self, tokens):
        """Contrastive projections from mean-pooled tokens: (B, projection_dim)."""
        pooled = T.tmean(tokens, axis=1)
        hidden = T.gelu(T.matmul(pooled, self.w_proj1) + self.b_proj1)
        return T.matmul(hidden, self.w_proj2) + self.b_proj2

    def pooled_embedding(self, volume):
        """Mean token embedding, as a plain array (for probes and export)."""
        return self.encode(volume).data.mean(axis=0)

    def freeze(self):
        self.frozen = True
        for t in self.parameters():
            t.requires_grad = False

    def state_dict(self):
        return {
            "params": self.store.state_dict(),
            "frozen": self.frozen,
            "config": self.config,
        }

    @classmethod
    def from_state(cls, state, seed=0):
        enc = cls(state["config"], seed)
        enc.store.load_state_dict(state["params"])
        if state["frozen"]:
            enc.freeze()
        return enc


def combined_ssl_loss(recon, contrast, variant, weight):
    if variant == "additive":
        return recon + weight * contrast
    if variant == "multiplicative":
        return recon * (1.0 + contrast)
    if variant == "reconstruction_only":
        return recon
    if variant == "contrastive_only":
        return contrast
    raise ConfigError(f"unknown ssl variant {variant!r}")


def ssl_pretrain(volumes, encoder_config, ssl_config, seed, heldout=None):
    """Pretrain an encoder on context restoration + contrastive views.

    Returns (encoder, history) where history records the per-step training
    loss and the held-out combined loss before and after training. The
    returned encoder is frozen.
    """
    if len(volumes) < 2:
        raise ConfigError("self-supervised pretraining needs at least 2 subjects")
    if ssl_config.batch_subjects < 2:
        raise ConfigError("contrastive learning needs at least 2 subjects per batch")
    enc = VolumeEncoder(encoder_config, seed)
    rng = np.random.default_rng([seed, 997])
    opt = T.Adam(enc.parameters(), lr=ssl_config.learning_rate)
    history = {"step_loss": [], "heldout_before": None, "heldout_after": None}

    def batch_loss(batch_volumes, aug_rng):
        patches, targets = [], []
        for vol in batch_volumes:
            views = make_views(
                vol,
                aug_rng,
                cutout_fraction=ssl_config.cutout_fraction,
                n_swaps=ssl_config.patch_swaps,
                patch_size=encoder_config.patch_size,
            )
            target = extract_patches(vol, encoder_config.patch_size)
            for view in views:
                patches.append(extract_patches(view, encoder_config.patch_size))
                targets.append(target)
        order = list(range(0, len(patches), 2)) + list(range(1, len(patches), 2))
        stack = np.stack([patches[i] for i in order])
        target_stack = np.stack([targets[i] for i in order])
        tokens = enc.encode_batch(stack)
        recon = reconstruction_loss(enc.decode_batch(tokens), target_stack)
        contrast = contrastive_loss(
            enc.project_batch(tokens), temperature=ssl_config.temperature
        )
        return combined_ssl_loss(
            recon, contrast, ssl_config.variant, ssl_config.contrastive_weight
        )

    eval_set = list(heldout) if heldout else list(volumes)

    def heldout_loss(eval_seed):
        return batch_loss(eval_set, np.random.default_rng([seed, eval_seed])).item()

    history["heldout_before"] = heldout_loss(12345)
    n = len(volumes)
    for step in range(ssl_config.steps):
        take = min(ssl_config.batch_subjects, n)
        idx = rng.choice(n, size=take, replace=False)
        loss = batch_loss([volumes[i] for i in idx], rng)
        history["step_loss"].append(loss.item())
        T.backward(loss)
        opt.step()
    history["heldout_after"] = heldout_loss(12345)
    enc.freeze()
    return enc, history
