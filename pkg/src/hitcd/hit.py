"""History injection: the per-tile History Embedding and its update through one ViT block.

Storage form is ``(r*r, d)``. Each step it is projected to the token width,
given its own sin/cos grid encoding, appended after the image tokens of block
``k``, split back out of that block's output and compressed by the adapter
(layer norm + linear) into the next storage form.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .nn import ops
from .nn.module import LayerNorm, Linear, Module, trunc_normal
from .nn.tensor import NonFiniteError, Parameter, Tensor, no_grad
from .vit import ModelConfig, sincos_pos_encoding


class StaleEmbeddingError(ValueError):
    """The embedding was written by a model with a different configuration."""


@dataclass
class HistoryEmbedding:
    grid: int
    dim: int
    values: np.ndarray
    tile_key: str
    config_hash: bytes
    timestamp: int = 0
    step_count: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (self.grid * self.grid, self.dim):
            raise ValueError(f"values shape {self.values.shape} != ({self.grid ** 2}, {self.dim})")
        if len(self.config_hash) != 8:
            raise ValueError("config_hash must be 8 bytes")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")

    def copy(self) -> "HistoryEmbedding":
        return replace(self, values=self.values.copy())


class HitParams(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        D, d, r = cfg.embed_dim, cfg.he_dim, cfg.he_grid
        self.project_in = Linear(d, D, rng)
        self.adapter_norm = LayerNorm(D)
        self.adapter_linear = Linear(D, d, rng)
        if cfg.learned_initial_he:
            self.initial_embedding = Parameter(trunc_normal(rng, (r * r, d), std=1.0))
        else:
            self._zero_initial = np.zeros((r * r, d), dtype=np.float32)
        self._pos = sincos_pos_encoding(r, r, D, cfg.pos_temperature)
        self._cfg = cfg

    @property
    def pos_table(self) -> np.ndarray:
        return self._pos

    def initial(self, batch: int) -> Tensor:
        shape = (batch, self._cfg.he_tokens, self._cfg.he_dim)
        if self._cfg.learned_initial_he:
            return ops.broadcast_to(self.initial_embedding, shape)
        return Tensor(np.broadcast_to(self._zero_initial, shape).copy())

    def project(self, he: Tensor) -> Tensor:
        """(B, r*r, d) -> (B, r*r, D) plus the embedding's positional table."""
        x = self.project_in(he)
        return ops.add(x, Tensor(self._pos.astype(x.dtype)))

    def adapt(self, he_out_raw: Tensor) -> Tensor:
        return self.adapter_linear(self.adapter_norm(he_out_raw))


class HiTInjection:
    """Encoder hook that carries one batch of embeddings through block ``k``."""

    def __init__(self, params: HitParams, he_values: Tensor, mask_history: bool = False):
        self.params = params
        self.stage = params._cfg.fuse_stage
        self.n_extra = params._cfg.he_tokens
        self.he_values = he_values
        self.mask_history = mask_history
        self.he_next: Optional[Tensor] = None
        self.he_out_raw: Optional[Tensor] = None

    def extra_tokens(self, image_tokens: Tensor) -> Tensor:
        return self.params.project(self.he_values)

    def key_mask(self, n_image: int) -> Optional[np.ndarray]:
        if not self.mask_history:
            return None
        return np.concatenate([np.ones(n_image, bool), np.zeros(self.n_extra, bool)])

    def receive(self, extra_out: Tensor) -> None:
        self.he_out_raw = extra_out
        self.he_next = self.params.adapt(extra_out)


def he_init(cfg: ModelConfig, params: HitParams, tile_key: str, timestamp: int = 0) -> HistoryEmbedding:
    with no_grad():
        values = params.initial(1).data[0].astype(np.float32)
    return HistoryEmbedding(cfg.he_grid, cfg.he_dim, values.copy(), tile_key, cfg.config_hash(),
                            timestamp=timestamp, step_count=0)


def check_hash(he: HistoryEmbedding, cfg: ModelConfig) -> None:
    if he.config_hash != cfg.config_hash():
        raise StaleEmbeddingError(
            f"embedding for {he.tile_key!r} has config hash {he.config_hash.hex()}, "
            f"model expects {cfg.config_hash().hex()}")
    if (he.grid, he.dim) != (cfg.he_grid, cfg.he_dim):
        raise StaleEmbeddingError(f"embedding is {he.grid}x{he.grid}x{he.dim}, model expects "
                                  f"{cfg.he_grid}x{cfg.he_grid}x{cfg.he_dim}")


def he_project_in(he: HistoryEmbedding, params: HitParams) -> Tensor:
    check_hash(he, params._cfg)
    vals = Tensor(he.values.astype(params.project_in.weight.dtype)[None])
    return ops.getitem(params.project(vals), 0)


def hit_fuse(image_tokens: Tensor, he_tokens: Tensor, block, key_mask=None) -> tuple[Tensor, Tensor]:
    """Run one block over ``[image_tokens, he_tokens]`` and split the result."""
    squeeze = image_tokens.ndim == 2
    if squeeze:
        image_tokens = ops.reshape(image_tokens, (1,) + image_tokens.shape)
        he_tokens = ops.reshape(he_tokens, (1,) + he_tokens.shape)
    if image_tokens.shape[-1] != he_tokens.shape[-1]:
        raise ops.ShapeError(f"token widths differ: image {image_tokens.shape[-1]}, history {he_tokens.shape[-1]}")
    n = image_tokens.shape[1]
    out = block(ops.concat([image_tokens, he_tokens], axis=1), key_mask)
    img, he = ops.split(out, n, axis=1)
    if squeeze:
        img, he = ops.getitem(img, 0), ops.getitem(he, 0)
    return img, he


def adapter_apply(he_out_raw: Tensor, params: HitParams) -> Tensor:
    return params.adapt(he_out_raw)


@dataclass
class StepResult:
    features: list = field(default_factory=list)
    he_next: Optional[HistoryEmbedding] = None
    logits: Optional[np.ndarray] = None


def hit_step(image, he: HistoryEmbedding, model, timestamp: Optional[int] = None,
             decode: bool = False) -> StepResult:
    """Absorb one preprocessed frame ``(bands, H, W)`` into ``he``.

    Pure in ``he``: the input embedding is not modified; a new one is returned
    with ``step_count + 1``. ``timestamp`` defaults to the current epoch second.
    """
    cfg = model.cfg
    check_hash(he, cfg)
    image = np.asarray(image, dtype=model.dtype)
    with no_grad():
        he_in = Tensor(he.values[None].astype(model.dtype))
        taps, he_next = model.step(image[None], he_in)
        logits = model.decode(taps).data[0] if decode else None
    values = he_next.data[0]
    if not np.all(np.isfinite(values)) or any(not np.all(np.isfinite(t.data)) for t in taps):
        raise NonFiniteError(f"non-finite activations while updating {he.tile_key!r}")
    ts = int(time.time()) if timestamp is None else int(timestamp)
    nxt = HistoryEmbedding(he.grid, he.dim, values.astype(np.float32).copy(), he.tile_key,
                           he.config_hash, timestamp=ts, step_count=he.step_count + 1)
    return StepResult([t.data[0] for t in taps], nxt, logits)
