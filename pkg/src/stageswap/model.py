"""Toy one-stream transformer tracker.

Template and search images are cut into patches, linearly embedded, given
positional embeddings, concatenated (template tokens first), and refined by
a stack of pre-norm encoder blocks. A linear head over the search tokens
produces one matching logit per grid cell plus a squashed 2-d sub-cell
offset per cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class TrackerConfig:
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 4
    template_side: int = 16
    search_side: int = 32

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.template_side % self.patch_size or self.search_side % self.patch_size:
            raise ValueError("image sides must be divisible by patch_size")
        if self.search_side != 2 * self.template_side:
            raise ValueError("search side must be twice the template side")

    @property
    def grid_side(self) -> int:
        return self.search_side // self.patch_size

    @property
    def template_tokens(self) -> int:
        return (self.template_side // self.patch_size) ** 2

    @property
    def search_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def num_tokens(self) -> int:
        return self.template_tokens + self.search_tokens


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S) pixels -> (B, (S/p)^2, p^2) row-major patch rows."""
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ShapeError(f"patchify: expected (B, S, S), got {images.shape}")
    b, s, _ = images.shape
    if s % patch:
        raise ShapeError(f"patchify: side {s} not divisible by patch {patch}")
    g = s // patch
    out = images.reshape(b, g, patch, g, patch).transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(out.reshape(b, g * g, patch * patch))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        self.w = Tensor(rng.normal(0.0, INIT_STD, size=(d_in, d_out)),
                        requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        return ad.add(y, self.b) if self.b is not None else y

    def params(self, prefix: str):
        out = [(prefix + ".w", self.w)]
        if self.b is not None:
            out.append((prefix + ".b", self.b))
        return out


class LayerNorm:
    def __init__(self, dim: int, dtype=np.float32):
        self.g = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b)

    def params(self, prefix: str):
        return [(prefix + ".g", self.g), (prefix + ".b", self.b)]


class EncoderBlock:
    """Pre-norm multi-head self-attention + MLP with residual connections."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype=np.float32):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.ln1 = LayerNorm(dim, dtype)
        self.wq = Linear(dim, dim, rng, dtype)
        # no key bias: softmax scores are invariant to the constant per-query
        # shift it would add, so the parameter would never receive signal
        self.wk = Linear(dim, dim, rng, dtype, bias=False)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, dtype)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, dtype)

    def _split_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        x = ad.reshape(x, (b, t, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.dim:
            raise ShapeError(f"encoder block: channel dim {h.shape[-1]} != {self.dim}")
        b, t, _ = h.shape
        n = self.ln1(h)
        q = self._split_heads(self.wq(n), b, t)
        k = self._split_heads(self.wk(n), b, t)
        v = self._split_heads(self.wv(n), b, t)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(self.head_dim))
        attn = ad.softmax_last_dim(scores)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, self.dim))
        h = ad.add(h, self.wo(ctx))
        n2 = self.ln2(h)
        h = ad.add(h, self.fc2(ad.gelu(self.fc1(n2))))
        return h

    def params(self, prefix: str):
        out = []
        for name, sub in (("ln1", self.ln1), ("wq", self.wq), ("wk", self.wk),
                          ("wv", self.wv), ("wo", self.wo), ("ln2", self.ln2),
                          ("fc1", self.fc1), ("fc2", self.fc2)):
            out.extend(sub.params(f"{prefix}.{name}"))
        return out


class Decoder:
    """Per-cell matching logit and squashed 2-d offset over the search tokens."""

    def __init__(self, dim: int, rng, dtype=np.float32):
        # no score bias: a constant shift over all cell logits leaves both the
        # cell softmax and the argmax unchanged, so it would never learn
        self.score = Linear(dim, 1, rng, dtype, bias=False)
        self.offset = Linear(dim, 2, rng, dtype)

    def params(self, prefix: str):
        return self.score.params(prefix + ".score") + self.offset.params(prefix + ".offset")


@dataclass
class Prediction:
    """Logits over search cells plus the squashed per-cell offset map."""

    score_map: Tensor   # (B, G)
    offset_map: Tensor  # (B, G, 2), components in [0, 1]

    @property
    def cells(self) -> np.ndarray:
        """Argmax cell per sample; ties broken toward the lowest index."""
        return np.argmax(self.score_map.data, axis=-1)

    @property
    def offsets(self) -> np.ndarray:
        """Offset pair at each sample's argmax cell."""
        cells = self.cells
        return self.offset_map.data[np.arange(len(cells)), cells]


def stage_forward(layers, h: Tensor) -> Tensor:
    """Apply a contiguous run of encoder blocks; empty runs are the identity."""
    for blk in layers:
        h = blk(h)
    return h


class TrackerModel:
    def __init__(self, cfg: TrackerConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch_size ** 2, d, rng, dtype)
        self.pos_z = Tensor(rng.normal(0.0, INIT_STD, size=(cfg.template_tokens, d)),
                            requires_grad=True, dtype=dtype)
        self.pos_x = Tensor(rng.normal(0.0, INIT_STD, size=(cfg.search_tokens, d)),
                            requires_grad=True, dtype=dtype)
        self.blocks = [EncoderBlock(d, cfg.num_heads, cfg.mlp_ratio, rng, dtype)
                       for _ in range(cfg.num_layers)]
        self.decoder = Decoder(d, rng, dtype)

    # -- forward pieces ----------------------------------------------------

    def embed(self, z: np.ndarray, x: np.ndarray) -> Tensor:
        """Patch-embed both images, add positional tables, concat [template; search]."""
        cfg = self.cfg
        if z.shape[1:] != (cfg.template_side,) * 2:
            raise ShapeError(f"embed: template shape {z.shape[1:]} != "
                             f"({cfg.template_side}, {cfg.template_side})")
        if x.shape[1:] != (cfg.search_side,) * 2:
            raise ShapeError(f"embed: search shape {x.shape[1:]} != "
                             f"({cfg.search_side}, {cfg.search_side})")
        zp = Tensor(patchify(z, cfg.patch_size), dtype=self.dtype)
        xp = Tensor(patchify(x, cfg.patch_size), dtype=self.dtype)
        zt = ad.add(self.patch_embed(zp), self.pos_z)
        xt = ad.add(self.patch_embed(xp), self.pos_x)
        return ad.concat_tokens(zt, xt)

    def decode(self, tokens: Tensor) -> Prediction:
        cfg = self.cfg
        if tokens.shape[-2] != cfg.num_tokens:
            raise ShapeError(f"decode: expected {cfg.num_tokens} tokens, got {tokens.shape[-2]}")
        search = ad.slice_tokens(tokens, cfg.template_tokens, cfg.num_tokens)
        b = tokens.shape[0]
        logits = ad.reshape(self.decoder.score(search), (b, cfg.search_tokens))
        offsets = ad.sigmoid(self.decoder.offset(search))
        return Prediction(score_map=logits, offset_map=offsets)

    def forward_full(self, z: np.ndarray, x: np.ndarray, plan=None):
        """Run the whole tracker; optionally snapshot tokens at stage boundaries.

        Returns (snapshots, Prediction). Snapshot collection only records
        references, so a planned run computes exactly the same values as an
        unplanned one.
        """
        tokens = self.embed(z, x)
        snaps: list[Tensor] = []
        if plan is None:
            tokens = stage_forward(self.blocks, tokens)
        else:
            ranges = plan.ranges_for_layer_count(len(self.blocks))
            for start, stop in ranges:
                tokens = stage_forward(self.blocks[start:stop], tokens)
                snaps.append(tokens)
        return snaps, self.decode(tokens)

    # -- parameters ----------------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = self.patch_embed.params("patch_embed")
        out.append(("pos_z", self.pos_z))
        out.append(("pos_x", self.pos_x))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.params(f"blocks.{i}"))
        out.extend(self.decoder.params("decoder"))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def embed_params(self) -> list[Tensor]:
        return [self.patch_embed.w, self.patch_embed.b, self.pos_z, self.pos_x]

    def block_params(self, indices=None) -> list[Tensor]:
        blocks = self.blocks if indices is None else [self.blocks[i] for i in indices]
        return [t for i, blk in enumerate(blocks) for _, t in blk.params(str(i))]

    def decoder_params(self) -> list[Tensor]:
        return [t for _, t in self.decoder.params("decoder")]

    def freeze(self):
        for p in self.params():
            p.requires_grad = False
        return self

    def load_state(self, state: dict[str, np.ndarray], prefix: str = ""):
        """Assign parameter buffers from a name->array mapping (bit-exact copy)."""
        for name, p in self.named_params():
            key = prefix + name
            if key not in state:
                raise KeyError(f"load_state: missing parameter {key}")
            arr = np.asarray(state[key], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"load_state: {key} shape {arr.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(arr.copy())
        return self

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + name: p.data.copy() for name, p in self.named_params()}


def copy_params(dst_params: list[Tensor], src_params: list[Tensor]):
    """Bitwise copy of aligned parameter lists (shapes must match)."""
    if len(dst_params) != len(src_params):
        raise ShapeError("copy_params: parameter count mismatch")
    for d, s in zip(dst_params, src_params):
        if d.data.shape != s.data.shape:
            raise ShapeError(f"copy_params: shape {s.data.shape} != {d.data.shape}")
        d.data = s.data.astype(d.data.dtype).copy()
