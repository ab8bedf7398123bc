"""Miniature contrastive dual encoder (ViT-style image tower + text tower).

Any block's FFN slot can hold a plain :class:`~suede.moe.ExpertFfn` or a
:class:`~suede.moe.SueLayer`; blocks return the router output (or ``None``)
so auxiliary losses can be collected per forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .moe import ExpertFfn, RouterOutput, SueLayer
from .nn import LayerNorm, Linear, Module, init_weight
from .rng import SplitMix64
from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    exp,
    getitem,
    l2_normalize,
    logsumexp,
    mean,
    minimum,
    no_grad,
    parameter,
    scale,
    softmax,
    swapaxes,
)
from .text import CharTokenizer, PromptBank

LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)
_MASKED = -1e30
# images in [0, 1] are standardised before patch embedding
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ModelDims:
    image_size: int = 32
    channels: int = 1
    patch: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 6
    mlp_ratio: int = 4
    embed_dim: int = 32
    text_dim: int = 64
    text_heads: int = 4
    text_depth: int = 2
    max_len: int = 32
    head: str = "contrastive"

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads or self.text_dim % self.text_heads:
            raise ConfigError("hidden size must be divisible by head count")
        if self.head not in ("contrastive", "linear"):
            raise ConfigError(f"unknown head {self.head!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """Split ``[C,H,W]`` (or ``[N,C,H,W]``) into row-major ``[.., L, P*P*C]`` patches.

    Each patch vector is ordered (row, col, channel).
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise DimensionError(f"expected [N,C,H,W] images, got shape {images.shape}")
    n, c, h, w = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    out = images.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1)
    out = out.reshape(n, gh * gw, patch * patch * c)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    gh, gw = height // patch, width // patch
    x = np.asarray(patches).reshape(gh, gw, patch, patch, channels)
    return x.transpose(4, 0, 2, 1, 3).reshape(channels, height, width)


class Attention(Module):
    def __init__(self, rng: SplitMix64, dim: int, heads: int):
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.heads = heads

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = scale(q @ swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
        if mask is not None:
            att = att + mask
        out = softmax(att, axis=-1) @ v
        return self.proj(out.transpose(0, 2, 1, 3).reshape(b, n, d))


class Block(Module):
    """Pre-norm transformer block whose FFN slot may hold a SueLayer."""

    def __init__(self, rng: SplitMix64, dim: int, heads: int, hidden: int):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ffn: ExpertFfn | SueLayer = ExpertFfn(rng, dim, hidden)

    @property
    def is_sue(self) -> bool:
        return isinstance(self.ffn, SueLayer)

    def __call__(self, x: Tensor, mask=None) -> tuple[Tensor, RouterOutput | None]:
        x = x + self.attn(self.ln1(x), mask)
        h = self.ln2(x)
        if self.is_sue:
            y, router = self.ffn(h)
        else:
            y, router = self.ffn(h), None
        return x + y, router


def _run_blocks(blocks: Sequence[Block], x: Tensor, mask=None) -> tuple[Tensor, list[RouterOutput]]:
    routers = []
    for blk in blocks:
        x, r = blk(x, mask)
        if r is not None:
            routers.append(r)
    return x, routers


class VisionEncoder(Module):
    def __init__(self, rng: SplitMix64, dims: ModelDims):
        d = dims.dim
        self.patch = dims.patch
        self.image_shape = (dims.channels, dims.image_size, dims.image_size)
        self.patch_embed = Linear(rng, dims.patch * dims.patch * dims.channels, d)
        self.cls_token = init_weight(rng, (1, 1, d))
        self.pos_embed = init_weight(rng, (1, dims.n_patches + 1, d))
        self.blocks = [Block(rng, d, dims.heads, d * dims.mlp_ratio) for _ in range(dims.depth)]
        self.ln_post = LayerNorm(d)
        self.proj = init_weight(rng, (d, dims.embed_dim))

    def features(self, images: np.ndarray) -> tuple[Tensor, list[RouterOutput]]:
        """Class-token features ``[N, D]`` after the final norm."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != self.image_shape:
            raise DimensionError(f"expected images of shape [N, {self.image_shape}], got {images.shape}")
        n = images.shape[0]
        pixels = (images - PIXEL_MEAN) / PIXEL_STD
        x = self.patch_embed(Tensor(patchify(pixels, self.patch)))
        cls = broadcast_to(self.cls_token, (n, 1, x.shape[-1]))
        x = concat([cls, x], axis=1) + self.pos_embed
        x, routers = _run_blocks(self.blocks, x)
        return self.ln_post(x[:, 0]), routers

    def __call__(self, images: np.ndarray) -> tuple[Tensor, list[RouterOutput]]:
        feats, routers = self.features(images)
        return l2_normalize(feats @ self.proj), routers


class TextEncoder(Module):
    def __init__(self, rng: SplitMix64, dims: ModelDims):
        d = dims.text_dim
        self.tokenizer = CharTokenizer(dims.max_len)
        self.token_embed = init_weight(rng, (self.tokenizer.vocab_size, d))
        self.pos_embed = init_weight(rng, (dims.max_len, d))
        self.blocks = [Block(rng, d, dims.text_heads, d * dims.mlp_ratio) for _ in range(dims.text_depth)]
        self.ln_final = LayerNorm(d)
        self.proj = init_weight(rng, (d, dims.embed_dim))
        t = dims.max_len
        self._causal = np.triu(np.full((t, t), _MASKED), k=1)

    def __call__(self, prompts: Sequence[str]) -> tuple[Tensor, list[RouterOutput]]:
        ids, eos = self.tokenizer.batch(prompts)
        x = getitem(self.token_embed, ids) + self.pos_embed
        x, routers = _run_blocks(self.blocks, x, self._causal)
        pooled = self.ln_final(x[np.arange(len(prompts)), eos])
        return l2_normalize(pooled @ self.proj), routers


def similarity_matrix(img_emb: Tensor, txt_emb: Tensor, logit_scale: Tensor) -> Tensor:
    """``exp(min(logit_scale, ln 100)) * img_emb @ txt_emb^T``."""
    if img_emb.shape[-1] != txt_emb.shape[-1]:
        raise DimensionError(f"embedding widths differ: {img_emb.shape[-1]} vs {txt_emb.shape[-1]}")
    t = exp(minimum(logit_scale, LOGIT_SCALE_MAX))
    return (img_emb @ txt_emb.transpose()) * t


def contrastive_ce_loss(s: Tensor, symmetric: bool = False) -> Tensor:
    """Cross-entropy of each image row against its matched (diagonal) text."""
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"similarity matrix must be square, got {s.shape}")
    diag = np.arange(s.shape[0])
    matched = s[diag, diag]
    loss = mean(logsumexp(s, axis=1) - matched)
    if symmetric:
        loss = scale(loss + mean(logsumexp(s, axis=0) - matched), 0.5)
    return loss


class DualEncoder(Module):
    def __init__(self, rng: SplitMix64, dims: ModelDims):
        self.dims = dims
        self.vision = VisionEncoder(rng.child("vision"), dims)
        self.text = TextEncoder(rng.child("text"), dims)
        self.logit_scale = parameter(LOGIT_SCALE_INIT)

    def encode_image(self, images) -> tuple[Tensor, list[RouterOutput]]:
        return self.vision(images)

    def encode_text(self, prompts: Sequence[str]) -> tuple[Tensor, list[RouterOutput]]:
        return self.text(prompts)

    def branch_blocks(self, branch: str) -> list[Block]:
        return {"image": self.vision.blocks, "text": self.text.blocks}[branch]

    def loss_terms(self, images, labels, prompts, symmetric: bool = False) -> tuple[Tensor, list[RouterOutput]]:
        """Contrastive loss of a batch plus the routers it touched.

        Each distinct prompt is encoded once and gathered per sample.
        """
        img, img_routers = self.encode_image(images)
        uniq, inverse = np.unique(np.asarray(prompts, dtype=object), return_inverse=True)
        txt, txt_routers = self.encode_text(list(uniq))
        s = similarity_matrix(img, getitem(txt, inverse.reshape(-1)), self.logit_scale)
        return contrastive_ce_loss(s, symmetric), img_routers + txt_routers

    def class_similarities(self, images, bank: PromptBank) -> np.ndarray:
        """Max scaled similarity per class, ``[N, 2]`` as (real, fake)."""
        bank.validate()
        real, fake = bank.real, bank.fake_all()
        with no_grad():
            img, _ = self.encode_image(images)
            txt, _ = self.encode_text(real + fake)
            s = similarity_matrix(img, txt, self.logit_scale).data
        return np.stack([s[:, : len(real)].max(axis=1), s[:, len(real) :].max(axis=1)], axis=1)

    def fake_scores(self, images, bank: PromptBank) -> np.ndarray:
        return classify(self, images, bank)


def class_score(sims: np.ndarray) -> np.ndarray:
    """Two-way softmax over (real, fake) similarities, taken at fake."""
    sims = np.asarray(sims, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(sims[..., 0] - sims[..., 1]))


def classify(model: DualEncoder, images, bank: PromptBank) -> np.ndarray:
    """Fake-score in [0, 1] per image."""
    return class_score(model.class_similarities(images, bank))


class ImageClassifier(Module):
    """Image tower with a two-way linear head (no text branch)."""

    def __init__(self, rng: SplitMix64, dims: ModelDims):
        self.dims = dims
        self.vision = VisionEncoder(rng.child("vision"), dims)
        self.head = Linear(rng.child("head"), dims.dim, 2)

    def branch_blocks(self, branch: str) -> list[Block]:
        if branch != "image":
            raise ConfigError("image-only classifier has no text branch")
        return self.vision.blocks

    def logits(self, images) -> tuple[Tensor, list[RouterOutput]]:
        feats, routers = self.vision.features(images)
        return self.head(feats), routers

    def loss_terms(self, images, labels, prompts=None, symmetric: bool = False):
        logits, routers = self.logits(images)
        y = np.asarray(labels, dtype=np.int64)
        picked = logits[np.arange(len(y)), y]
        return mean(logsumexp(logits, axis=1) - picked), routers

    def fake_scores(self, images, bank: PromptBank | None = None) -> np.ndarray:
        with no_grad():
            logits, _ = self.logits(images)
        return class_score(logits.data)


def build_model(dims: ModelDims, rng: SplitMix64):
    dims.validate()
    if dims.head == "linear":
        return ImageClassifier(rng, dims)
    return DualEncoder(rng, dims)


def convert_to_sue(
    model,
    branch: str,
    layers: Sequence[int],
    rng: SplitMix64,
    n_experts: int = 4,
    k: int = 2,
    shared: bool = True,
    zero_routed: bool = False,
    renormalize: bool = True,
) -> None:
    """Replace the FFN of each listed block with a SueLayer built from it."""
    blocks = model.branch_blocks(branch)
    for idx in layers:
        if not 0 <= idx < len(blocks):
            raise ConfigError(f"{branch} layer index {idx} outside depth {len(blocks)}")
        blk = blocks[idx]
        if blk.is_sue:
            raise ConfigError(f"{branch} block {idx} is already converted")
        blk.ffn = SueLayer.from_base(
            blk.ffn,
            rng.child(branch, idx),
            n_experts,
            k,
            shared=shared,
            zero_routed=zero_routed,
            renormalize=renormalize,
        )


def sue_layers(model) -> list[SueLayer]:
    out = []
    for branch in ("image", "text"):
        try:
            blocks = model.branch_blocks(branch)
        except ConfigError:
            continue
        out.extend(b.ffn for b in blocks if b.is_sue)
    return out

