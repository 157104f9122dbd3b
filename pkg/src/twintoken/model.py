"""Two-token vision transformer with a token-pair attention mask.

The patch sequence carries two learnable classification tokens: the
source-oriented token at position 0 and the target-oriented token at the
last position.  An additive mask zeroes the attention between those two
positions in every layer, so each token aggregates the patches without
reading the other token.  Two linear heads classify the two token views.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_MASK, Tensor
from .errors import CheckpointError, ConfigurationError, UndefinedSimilarityError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    image_side: int = 16
    patch_side: int = 4
    channels: int = 1
    embed_dim: int = 32
    num_heads: int = 4
    depth: int = 3
    mlp_ratio: float = 2.0
    num_classes: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_side % self.patch_side != 0:
            raise ConfigurationError(
                f"patch_side {self.patch_side} does not divide image_side {self.image_side}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}"
            )
        for name in ("image_side", "patch_side", "channels", "embed_dim", "num_heads", "depth", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigurationError("mlp_ratio must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side * self.patch_side

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class ForwardOutput:
    """Per-batch results: the two token views and the two head logits."""

    feat_src_view: Tensor  # (B, D), position 0
    feat_tgt_view: Tensor  # (B, D), position N-1
    logits_src: Tensor     # (B, C), source head on feat_src_view
    logits_tgt: Tensor     # (B, C), target head on feat_tgt_view
    attention: list = field(default_factory=list)  # optional (B, h, N, N) per layer


def build_token_mask(n: int, enabled: bool = True) -> np.ndarray:
    """Additive attention mask of shape (n, n).

    The two corner entries connecting position 0 and position n-1 get the
    negative sentinel; everything else is exactly 0.  With ``enabled``
    false (mask ablation), the whole matrix is zero.
    """
    if n < 3:
        raise ConfigurationError(f"token mask needs sequence length >= 3, got {n}")
    mask = np.zeros((n, n), dtype=np.float64)
    if enabled:
        mask[0, n - 1] = -NEG_MASK
        mask[n - 1, 0] = -NEG_MASK
    return mask


def masked_attention(x: Tensor, weights: dict, mask: np.ndarray, num_heads: int,
                     capture: list | None = None) -> Tensor:
    """Multi-head attention with the additive token mask.

    ``weights`` maps "q"/"k"/"v"/"o" to (weight, bias) tensor pairs; the
    per-head attention matrices are appended to ``capture`` when given.
    """
    b, n, d_model = x.shape
    if mask.shape != (n, n):
        raise ConfigurationError(f"mask shape {mask.shape} does not match sequence length {n}")
    if d_model % num_heads != 0:
        raise ConfigurationError(f"num_heads {num_heads} does not divide model dim {d_model}")
    d = d_model // num_heads

    def split_heads(t):
        return ad.transpose(ad.reshape(t, (b, n, num_heads, d)), (0, 2, 1, 3))

    q = split_heads(ad.linear(x, *weights["q"]))
    k = split_heads(ad.linear(x, *weights["k"]))
    v = split_heads(ad.linear(x, *weights["v"]))

    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    logits = ad.add(logits, ad.constant(mask))
    attn = ad.softmax_lastdim(logits)  # (B, h, N, N)
    if capture is not None:
        capture.append(attn.data.copy())
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, d_model))
    return ad.linear(ctx, *weights["o"])


def _trunc_normal(rng, shape, std=0.02):
    # clip at two standard deviations, DeiT-style
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


def _xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class TwoTokenTransformer:
    """Toy-scale ViT with [src]/[tgt] tokens and two classifier heads.

    Parameters live in ``self.params`` (name -> Tensor).  With
    ``shared_head`` the target head aliases the source head's tensors
    (single-classifier ablation).
    """

    def __init__(self, config: ModelConfig, seed: int = 0, shared_head: bool = False,
                 mask_enabled: bool = True, activation: str = "gelu"):
        self.config = config
        self.shared_head = shared_head
        self.mask_enabled = mask_enabled
        self.activation = activation
        self.mask = build_token_mask(config.seq_len, enabled=mask_enabled)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        cfg = self.config
        p = self.params
        p["patch_embed.weight"] = ad.param(_xavier_uniform(rng, cfg.patch_dim, cfg.embed_dim))
        p["patch_embed.bias"] = ad.param(np.zeros(cfg.embed_dim))
        p["pos_embed"] = ad.param(_trunc_normal(rng, (cfg.seq_len, cfg.embed_dim)))
        p["token_src"] = ad.param(_trunc_normal(rng, (1, cfg.embed_dim)))
        p["token_tgt"] = ad.param(_trunc_normal(rng, (1, cfg.embed_dim)))
        for layer in range(cfg.depth):
            pre = f"blocks.{layer}."
            p[pre + "ln1.gamma"] = ad.param(np.ones(cfg.embed_dim))
            p[pre + "ln1.beta"] = ad.param(np.zeros(cfg.embed_dim))
            for proj in ("q", "k", "v", "o"):
                p[pre + proj + ".weight"] = ad.param(_xavier_uniform(rng, cfg.embed_dim, cfg.embed_dim))
                p[pre + proj + ".bias"] = ad.param(np.zeros(cfg.embed_dim))
            p[pre + "ln2.gamma"] = ad.param(np.ones(cfg.embed_dim))
            p[pre + "ln2.beta"] = ad.param(np.zeros(cfg.embed_dim))
            p[pre + "ffn1.weight"] = ad.param(_xavier_uniform(rng, cfg.embed_dim, cfg.hidden_dim))
            p[pre + "ffn1.bias"] = ad.param(np.zeros(cfg.hidden_dim))
            p[pre + "ffn2.weight"] = ad.param(_xavier_uniform(rng, cfg.hidden_dim, cfg.embed_dim))
            p[pre + "ffn2.bias"] = ad.param(np.zeros(cfg.embed_dim))
        p["head_src.weight"] = ad.param(_xavier_uniform(rng, cfg.embed_dim, cfg.num_classes))
        p["head_src.bias"] = ad.param(np.zeros(cfg.num_classes))
        if self.shared_head:
            p["head_tgt.weight"] = p["head_src.weight"]
            p["head_tgt.bias"] = p["head_src.bias"]
        else:
            p["head_tgt.weight"] = ad.param(_xavier_uniform(rng, cfg.embed_dim, cfg.num_classes))
            p["head_tgt.bias"] = ad.param(np.zeros(cfg.num_classes))

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def unique_parameters(self) -> dict[str, Tensor]:
        """Parameters deduplicated by identity (shared head counted once)."""
        out, seen = {}, set()
        for name, t in self.params.items():
            if id(t) not in seen:
                seen.add(id(t))
                out[name] = t
        return out

    @staticmethod
    def is_classifier_param(name: str) -> bool:
        return name.startswith("head_src.") or name.startswith("head_tgt.")

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    # -- forward ---------------------------------------------------------

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, C, H, W) -> (B, M, C*p*p), row-major patch order."""
        cfg = self.config
        b, c, h, w = images.shape
        if (c, h, w) != (cfg.channels, cfg.image_side, cfg.image_side):
            raise ConfigurationError(
                f"image shape {(c, h, w)} does not match config "
                f"{(cfg.channels, cfg.image_side, cfg.image_side)}"
            )
        p = cfg.patch_side
        g = h // p
        x = images.reshape(b, c, g, p, g, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, cfg.patch_dim)

    def forward(self, images: np.ndarray, capture_attention: bool = False) -> ForwardOutput:
        cfg = self.config
        p = self.params
        patches = ad.constant(self.patchify(np.asarray(images, dtype=np.float64)))
        b = patches.shape[0]

        x = ad.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])  # (B, M, D)
        tok_s = ad.reshape(ad.tile_rows(p["token_src"], b), (b, 1, cfg.embed_dim))
        tok_t = ad.reshape(ad.tile_rows(p["token_tgt"], b), (b, 1, cfg.embed_dim))
        x = ad.concat([tok_s, x, tok_t], axis=1)  # (B, N, D)
        x = ad.add(x, p["pos_embed"])

        attn_maps = []
        for layer in range(cfg.depth):
            x = self._block(x, layer, b, attn_maps if capture_attention else None)

        feat_src = ad.reshape(ad.index_select(x, 1, [0]), (b, cfg.embed_dim))
        feat_tgt = ad.reshape(ad.index_select(x, 1, [cfg.seq_len - 1]), (b, cfg.embed_dim))
        logits_src = ad.linear(feat_src, p["head_src.weight"], p["head_src.bias"])
        logits_tgt = ad.linear(feat_tgt, p["head_tgt.weight"], p["head_tgt.bias"])
        return ForwardOutput(feat_src, feat_tgt, logits_src, logits_tgt, attn_maps)

    def _block(self, x: Tensor, layer: int, b: int, attn_maps) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"blocks.{layer}."

        normed = ad.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        weights = {name: (p[pre + name + ".weight"], p[pre + name + ".bias"])
                   for name in ("q", "k", "v", "o")}
        attended = masked_attention(normed, weights, self.mask, cfg.num_heads, attn_maps)
        x = ad.add(x, attended)

        normed2 = ad.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        hidden = ad.linear(normed2, p[pre + "ffn1.weight"], p[pre + "ffn1.bias"])
        hidden = ad.gelu(hidden) if self.activation == "gelu" else ad.relu(hidden)
        x = ad.add(x, ad.linear(hidden, p[pre + "ffn2.weight"], p[pre + "ffn2.bias"]))
        return x


def token_cosine_similarity(f_a: np.ndarray, f_b: np.ndarray) -> np.ndarray:
    """Per-sample cosine similarity between two (B, D) feature matrices."""
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    if f_a.shape != f_b.shape or f_a.ndim != 2:
        raise ConfigurationError(f"cosine similarity needs matching (B, D) inputs, got {f_a.shape} and {f_b.shape}")
    na = np.linalg.norm(f_a, axis=1)
    nb = np.linalg.norm(f_b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise UndefinedSimilarityError("cosine similarity undefined for zero-norm row")
    return (f_a * f_b).sum(axis=1) / (na * nb)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(model: TwoTokenTransformer, path):
    """Write parameters plus config to a single npz file (bit-exact)."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "shared_head": model.shared_head,
        "mask_enabled": model.mask_enabled,
        "activation": model.activation,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, t in model.params.items():
        arrays["p:" + name] = t.data
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> TwoTokenTransformer:
    try:
        with np.load(path) as z:
            if "__meta__" not in z:
                raise CheckpointError(f"{path}: missing checkpoint metadata")
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
            config = ModelConfig(**meta["config"])
            model = TwoTokenTransformer(
                config,
                seed=0,
                shared_head=meta["shared_head"],
                mask_enabled=meta["mask_enabled"],
                activation=meta["activation"],
            )
            for name, t in model.params.items():
                key = "p:" + name
                if key not in z:
                    raise CheckpointError(f"{path}: missing parameter {name}")
                stored = z[key]
                if stored.shape != t.data.shape:
                    raise CheckpointError(
                        f"{path}: parameter {name} has shape {stored.shape}, expected {t.data.shape}"
                    )
                t.data = stored.astype(np.float64)
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    return model
