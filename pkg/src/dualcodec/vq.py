"""Perception expert: vector-quantized autoencoder with a fixed codebook.

Transmits h x w integer codebook indices; the decoder mirrors the fidelity
expert's level split so the two branches align spatially at every level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ContractError
from .sq import AnalysisNet, LevelSplitDecoder
from .tensors import pad_to_multiple


def codebook_quantize(feature: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest codebook row per spatial position (Euclidean, lowest index wins).

    feature: (d, h, w) or (B, d, h, w); codebook: (N, d).
    Returns (tokens, quantized feature of the same shape as the input).
    """
    if codebook.dim() != 2:
        raise ContractError("codebook must be (N, d)")
    squeeze = feature.dim() == 3
    x = feature.unsqueeze(0) if squeeze else feature
    b, d, h, w = x.shape
    if d != codebook.shape[1]:
        raise ContractError(f"feature dim {d} != codebook dim {codebook.shape[1]}")
    flat = x.permute(0, 2, 3, 1).reshape(-1, d).double()
    entries = codebook.detach().double()
    d2 = (flat * flat).sum(1, keepdim=True) - 2.0 * flat @ entries.t() \
        + (entries * entries).sum(1)[None, :]
    tokens = d2.argmin(dim=1)  # argmin returns the first (lowest) index on ties
    quant = codebook[tokens].reshape(b, h, w, d).permute(0, 3, 1, 2).to(feature.dtype)
    tokens = tokens.reshape(b, h, w)
    if squeeze:
        return tokens.squeeze(0), quant.squeeze(0)
    return tokens, quant


def straight_through(continuous: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward = quantized (bit-exact); gradient w.r.t. continuous = identity.

    The quantized side is detached, so reconstruction gradients reach the
    encoder only; the codebook learns through its own loss term.
    """
    if continuous.shape != quantized.shape:
        raise ContractError("straight_through shapes must match")
    return quantized.detach() + (continuous - continuous.detach())


def token_rate(tokens: torch.Tensor, codebook_size: int, mode: str = "fixed") -> float:
    """Transmission cost of a token grid in bits."""
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= codebook_size):
        raise ContractError("token indices outside codebook range")
    if mode == "fixed":
        return float(tokens.numel() * math.ceil(math.log2(codebook_size)))
    if mode == "entropy":
        from .bitstream import encode_token_payload  # owns the payload layout
        payload = encode_token_payload(tokens, codebook_size, mode="entropy")
        return float(8 * len(payload))
    raise ContractError(f"unknown token rate mode {mode!r}")


@dataclass
class VqConfig:
    embed_dim: int = 32
    base_channels: int = 48
    level_channels: tuple[int, ...] = (32, 32, 24, 16)
    codebook_size: int = 1024

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "base_channels": self.base_channels,
            "level_channels": list(self.level_channels),
            "codebook_size": self.codebook_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VqConfig":
        return cls(
            embed_dim=int(d["embed_dim"]),
            base_channels=int(d["base_channels"]),
            level_channels=tuple(int(c) for c in d["level_channels"]),
            codebook_size=int(d["codebook_size"]),
        )


class VqModel(nn.Module):
    """Complete perception expert (one codebook size)."""

    def __init__(self, config: VqConfig):
        super().__init__()
        if config.codebook_size < 2:
            raise ConfigError("vq.codebook_size: must be >= 2")
        self.config = config
        self.encoder = AnalysisNet(config.embed_dim, config.base_channels)
        self.decoder = LevelSplitDecoder(config.embed_dim, config.level_channels)
        self.codebook = nn.Parameter(torch.randn(config.codebook_size, config.embed_dim) * 0.5)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        x = pad_to_multiple(x)
        y = self.encoder(x)
        return y.squeeze(0) if squeeze else y

    def quantize(self, feature: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return codebook_quantize(feature, self.codebook)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token grid (..., h, w) -> quantized feature (..., d, h, w)."""
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.codebook_size):
            raise ContractError("token indices outside codebook range")
        emb = self.codebook[tokens]  # (..., h, w, d)
        return emb.movedim(-1, -3).contiguous()

    def decode(self, feature: torch.Tensor) -> torch.Tensor:
        squeeze = feature.dim() == 3
        y = feature.unsqueeze(0) if squeeze else feature
        x = self.decoder(y)
        return x.squeeze(0) if squeeze else x

    def freeze(self) -> "VqModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def build_vq_model(config_dict: dict) -> VqModel:
    try:
        return VqModel(VqConfig.from_dict(config_dict))
    except KeyError as e:
        raise ConfigError(f"vq config missing field {e}") from e
