"""Patch embedding, 2-D sin/cos positions and pre-norm ViT blocks with an injection hook."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Optional, Protocol

import numpy as np

from .nn import ops
from .nn.module import LayerNorm, Linear, Module
from .nn.tensor import Tensor


class ContractViolation(RuntimeError):
    """An injection hook broke the token-count contract of the encoder."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 256
    patch_size: int = 16
    bands: int = 6
    embed_dim: int = 192
    depth: int = 11
    heads: int = 3
    mlp_ratio: float = 4.0
    fuse_stage: int = 5
    he_grid: int = 8
    he_dim: int = 24
    decoder_tap_stages: tuple = (3, 5, 7, 11)
    fpn_dim: int = 128
    learned_initial_he: bool = True
    pos_temperature: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "decoder_tap_stages", tuple(int(s) for s in self.decoder_tap_stages))
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for 2-D sin/cos encodings")
        if not 1 <= self.fuse_stage <= self.depth:
            raise ValueError(f"fuse_stage {self.fuse_stage} outside [1, {self.depth}]")
        taps = self.decoder_tap_stages
        if not taps or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"decoder_tap_stages must be strictly increasing, got {taps}")
        if taps[0] < 1 or taps[-1] > self.depth:
            raise ValueError(f"decoder_tap_stages {taps} outside [1, {self.depth}]")
        if len(taps) > 4:
            raise ValueError("at most four decoder taps are supported")
        if len(taps) > 1 and self.grid % 2:
            raise ValueError(f"token grid {self.grid} must be even for the pyramid decoder")
        if self.he_grid < 1 or self.he_dim < 1:
            raise ValueError("he_grid and he_dim must be >= 1")
        if self.pos_temperature <= 1:
            raise ValueError(f"pos_temperature must exceed 1, got {self.pos_temperature}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def he_tokens(self) -> int:
        return self.he_grid * self.he_grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def config_hash(self) -> bytes:
        """8-byte digest identifying every architecture field."""
        items = sorted(self.to_dict().items())
        text = ";".join(f"{k}={v!r}" for k, v in items)
        return hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()


def sincos_1d(dim: int, pos: np.ndarray, temperature: float = 10000.0) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / temperature ** omega
    out = np.outer(pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_encoding(grid_h: int, grid_w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D encoding: first dim/2 channels encode the row, the rest the column.

    A lower ``temperature`` spreads the frequencies toward faster ones, which separates
    neighbouring positions more on small grids.
    """
    if dim % 4:
        raise ValueError(f"dim {dim} must be divisible by 4")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb = np.concatenate([sincos_1d(dim // 2, rows, temperature), sincos_1d(dim // 2, cols, temperature)], axis=1)
    return emb.astype(np.float32)


def patchify_array(images: np.ndarray, patch: int) -> np.ndarray:
    """(B,C,H,W) -> (B, H/p * W/p, C*p*p); tokens row-major, values band-major."""
    B, C, H, W = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible into {patch}px patches")
    x = images.reshape(B, C, H // patch, patch, W // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B, (H // patch) * (W // patch), C * patch * patch))


class PatchEmbed(Module):
    def __init__(self, cfg: ModelConfig, bands: int, rng: np.random.Generator):
        self.proj = Linear(bands * cfg.patch_size ** 2, cfg.embed_dim, rng)
        self._patch = cfg.patch_size
        self._bands = bands
        self._size = cfg.image_size

    def __call__(self, images) -> Tensor:
        data = images.data if isinstance(images, Tensor) else np.asarray(images)
        if data.ndim == 3:
            data = data[None]
        _, C, H, W = data.shape
        if C != self._bands or H != self._size or W != self._size:
            raise ValueError(f"expected (B,{self._bands},{self._size},{self._size}) input, got {data.shape}")
        flat = patchify_array(data.astype(self.proj.weight.dtype, copy=False), self._patch)
        return self.proj(Tensor(flat))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.q = Linear(dim, dim, rng)
        # no key bias: it shifts every score in a softmax row equally, so its gradient is identically zero
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads

    def __call__(self, x: Tensor, key_mask: Optional[np.ndarray] = None,
                 return_weights: bool = False):
        B, n, D = x.shape
        h = self._heads
        dh = D // h

        def heads_first(t):
            return ops.transpose(ops.reshape(t, (B, n, h, dh)), (0, 2, 1, 3))

        q, k, v = heads_first(self.q(x)), heads_first(self.k(x)), heads_first(self.v(x))
        scores = ops.mul(ops.matmul(q, ops.swap_last(k)), 1.0 / np.sqrt(dh))
        if key_mask is not None:
            # masked keys receive zero weight from every query
            bias = np.where(np.asarray(key_mask, bool), 0.0, -np.inf).astype(x.dtype)
            scores = ops.add(scores, Tensor(bias.reshape(1, 1, 1, n)))
        weights = ops.softmax(scores, axis=-1)
        out = ops.matmul(weights, v)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, n, D))
        out = self.proj(out)
        return (out, weights) if return_weights else out


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class ViTBlock(Module):
    """x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        if x.shape[-1] != self.norm1.gamma.shape[0]:
            raise ops.ShapeError(f"token width {x.shape[-1]} != block width {self.norm1.gamma.shape[0]}")
        x = ops.add(x, self.attn(self.norm1(x), key_mask))
        return ops.add(x, self.mlp(self.norm2(x)))


def vit_block_forward(tokens: Tensor, block: ViTBlock, key_mask=None) -> Tensor:
    return block(tokens, key_mask)


class Injection(Protocol):
    """Hook contract: at block ``stage`` the encoder appends ``extra_tokens(x)``
    (exactly ``n_extra`` of them) after the image tokens, runs the block, splits
    the output at the image-token count and hands the tail to ``receive``."""

    stage: int
    n_extra: int

    def extra_tokens(self, image_tokens: Tensor) -> Tensor: ...

    def receive(self, extra_out: Tensor) -> None: ...

    def key_mask(self, n_image: int) -> Optional[np.ndarray]: ...


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, bands: Optional[int] = None):
        self.patch_embed = PatchEmbed(cfg, bands or cfg.bands, rng)
        self.blocks = [ViTBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self._cfg = cfg
        self._pos = sincos_pos_encoding(cfg.grid, cfg.grid, cfg.embed_dim, cfg.pos_temperature)

    def __call__(self, images, injection: Optional[Injection] = None,
                 trace: Optional[list] = None) -> list[Tensor]:
        """Return the image tokens after every tap stage.

        If ``trace`` is given, the token count entering each block is appended to it.
        """
        cfg = self._cfg
        x = self.patch_embed(images)
        x = ops.add(x, Tensor(self._pos.astype(x.dtype)))
        n_img = x.shape[1]
        taps: list[Tensor] = []
        for i, block in enumerate(self.blocks, start=1):
            if injection is not None and i == injection.stage:
                extra = injection.extra_tokens(x)
                if extra.ndim != 3 or extra.shape[1] != injection.n_extra or extra.shape[0] != x.shape[0]:
                    raise ContractViolation(
                        f"injection at block {i} returned {extra.shape}, expected (B, {injection.n_extra}, D)")
                joint = ops.concat([x, extra], axis=1)
                if trace is not None:
                    trace.append(joint.shape[1])
                out = block(joint, injection.key_mask(n_img))
                x, extra_out = ops.split(out, n_img, axis=1)
                injection.receive(extra_out)
            else:
                if trace is not None:
                    trace.append(n_img)
                x = block(x)
            if x.shape[1] != n_img:
                raise ContractViolation(f"block {i} emitted {x.shape[1]} image tokens, expected {n_img}")
            if i in cfg.decoder_tap_stages:
                taps.append(x)
        return taps


def encoder_forward(images, cfg: ModelConfig, encoder: Encoder,
                    injection: Optional[Injection] = None, trace: Optional[list] = None) -> list[Tensor]:
    if encoder._cfg != cfg:
        raise ValueError("encoder was built for a different ModelConfig")
    return encoder(images, injection, trace)
