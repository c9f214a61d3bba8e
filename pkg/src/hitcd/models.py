"""Full networks: HiT encoder-decoder and the bitemporal baseline, plus checkpoint I/O."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgfile
from .hit import HiTInjection, HitParams
from .nn import checkpoint, ops
from .nn.module import Module
from .nn.tensor import Tensor
from .segmentation import FPNDecoder
from .vit import Encoder, ModelConfig


class HiTModel(Module):
    kind = "hit"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.hit = HitParams(cfg, rng)
        self.decoder = FPNDecoder(cfg, rng)
        self._cfg = cfg

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def dtype(self):
        return self.encoder.patch_embed.proj.weight.dtype

    def initial_he(self, batch: int) -> Tensor:
        he = self.hit.initial(batch)
        return he if he.dtype == self.dtype else Tensor(he.data.astype(self.dtype))

    def step(self, images, he: Tensor, mask_history: bool = False,
             trace: Optional[list] = None) -> tuple[list[Tensor], Tensor]:
        """One frame through the encoder with the history injected at the fuse stage."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=self.dtype)
        if not isinstance(he, Tensor):
            he = Tensor(np.asarray(he, dtype=self.dtype))
        inj = HiTInjection(self.hit, he, mask_history=mask_history)
        taps = self.encoder(images, inj, trace)
        return taps, inj.he_next

    def decode(self, taps: list[Tensor]) -> Tensor:
        return self.decoder(taps)


class BitemporalModel(Module):
    """Encoder on the channel-wise concatenation of two frames, then the same decoder."""

    kind = "bitemporal"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng, bands=2 * cfg.bands)
        self.decoder = FPNDecoder(cfg, rng)
        self._cfg = cfg

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def dtype(self):
        return self.encoder.patch_embed.proj.weight.dtype

    def __call__(self, first, second) -> Tensor:
        x = np.concatenate([np.asarray(first, dtype=self.dtype), np.asarray(second, dtype=self.dtype)], axis=-3)
        return self.decoder(self.encoder(x))


MODEL_KINDS = {"hit": HiTModel, "bitemporal": BitemporalModel}


def save_model(model, directory, extra: Optional[dict] = None) -> Path:
    """Write ``weights.hitw`` and ``model.cfg`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    checkpoint.save(directory / "weights.hitw", model.state_dict())
    meta = {f"model.{k}": v for k, v in model.cfg.to_dict().items()}
    meta["model.kind"] = model.kind
    meta.update(extra or {})
    cfgfile.dump(directory / "model.cfg", meta)
    return directory


def load_model(directory):
    directory = Path(directory)
    meta = cfgfile.load(directory / "model.cfg")
    kind = meta.pop("model.kind", "hit")
    fields = {k[len("model."):]: v for k, v in meta.items() if k.startswith("model.")}
    if "decoder_tap_stages" in fields and not isinstance(fields["decoder_tap_stages"], tuple):
        fields["decoder_tap_stages"] = (fields["decoder_tap_stages"],)
    cfg = ModelConfig.from_dict(fields)
    model = MODEL_KINDS[kind](cfg)
    model.load_state_dict(checkpoint.load(directory / "weights.hitw"))
    return model


def probabilities(logits: Tensor) -> np.ndarray:
    return ops._sigmoid_np(logits.data)
