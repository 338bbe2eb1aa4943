"""Fidelity expert: scalar-quantized autoencoder with a factorized prior.

The decoder is exposed as N resolution levels (decode block, then upsample
block) plus a frozen output head, so the collaborative orchestrator can
interleave its own modules between levels. Composing the level blocks in
order is the monolithic decoder; there is no second code path to drift.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError
from .rangecoder import PRECISION, pmf_to_quantized_cdf, validate_cdf
from .tensors import generator, pad_to_multiple

DOWNSCALE = 16  # four stride-2 stages


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to integers with halves going away from zero (-1.5 -> -2)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def scalar_quantize(latent: torch.Tensor, mode: str = "round", seed: int | None = None) -> torch.Tensor:
    """Integer rounding, or the additive-uniform-noise training surrogate."""
    if mode == "round":
        return round_half_away(latent)
    if mode == "noise":
        if seed is None:
            noise = torch.rand_like(latent) - 0.5
        else:
            noise = torch.rand(latent.shape, generator=generator(seed), dtype=latent.dtype) - 0.5
        return latent + noise
    raise ContractError(f"unknown quantize mode {mode!r}")


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


class _Center(nn.Module):
    """Shift [0,1] pixels to zero mean before the first conv."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x - 0.5


class ResBlock(nn.Module):
    """conv-lrelu-conv with a (projected) skip; keeps deep stacks trainable."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, kernel_size=1) if cin != cout else nn.Identity()
        self.conv1 = _conv(cin, cout)
        self.conv2 = _conv(cout, cout)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.conv1(x))
        return self.act(self.proj(x) + self.conv2(h))


class AnalysisNet(nn.Module):
    """Four stride-2 conv stages: (3, H, W) -> (C, H/16, W/16)."""

    def __init__(self, latent_channels: int, base_channels: int):
        super().__init__()
        b, c = base_channels, latent_channels
        self.stages = nn.Sequential(
            _Center(),
            _conv(3, b, 2), nn.LeakyReLU(0.2),
            ResBlock(b, b),
            _conv(b, b, 2), nn.LeakyReLU(0.2),
            _conv(b, b, 2), nn.LeakyReLU(0.2),
            _conv(b, c, 2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class LevelSplitDecoder(nn.Module):
    """N decode blocks D^i, N upsample blocks Up^i, and one output head.

    forward() composes exactly decode_level/upsample_level/output_head, so
    level-wise decoding reproduces the monolithic output bit for bit.
    """

    def __init__(self, latent_channels: int, level_channels: tuple[int, ...]):
        super().__init__()
        self.level_channels = tuple(level_channels)
        ins = [latent_channels] + list(level_channels[:-1])
        self.blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for cin, cout in zip(ins, level_channels):
            self.blocks.append(ResBlock(cin, cout))
            self.ups.append(nn.Sequential(
                nn.ConvTranspose2d(cout, cout, kernel_size=4, stride=2, padding=1),
                nn.LeakyReLU(0.2),
            ))
        self._input_channels = tuple(ins)
        self.out_head = _conv(level_channels[-1], 3)

    @property
    def num_levels(self) -> int:
        return len(self.blocks)

    def decode_level(self, level: int, feature: torch.Tensor) -> torch.Tensor:
        if not 0 <= level < self.num_levels:
            raise ContractError(f"level {level} outside [0, {self.num_levels})")
        if feature.shape[-3] != self._input_channels[level]:
            raise ContractError(
                f"level {level} expects {self._input_channels[level]} channels, "
                f"got {feature.shape[-3]}")
        return self.blocks[level](feature)

    def upsample_level(self, level: int, feature: torch.Tensor) -> torch.Tensor:
        if not 0 <= level < self.num_levels:
            raise ContractError(f"level {level} outside [0, {self.num_levels})")
        return self.ups[level](feature)

    def output_head(self, feature: torch.Tensor) -> torch.Tensor:
        return self.out_head(feature)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        y = latent
        for i in range(self.num_levels):
            y = self.upsample_level(i, self.decode_level(i, y))
        return self.output_head(y)


class _LowerBound(torch.autograd.Function):
    """clamp-from-below that still passes gradients pushing the value up."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp(x, min=bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        passthrough = (x >= ctx.bound) | (grad < 0)
        return grad * passthrough, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


class FactorizedDensity(nn.Module):
    """Per-channel monotone cumulative model over the latent (no hyperprior).

    A small chain of monotone univariate maps ending in a sigmoid; the
    likelihood of an integer symbol is the CDF mass of its unit bin.
    """

    LIKELIHOOD_FLOOR = 1e-9

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        scale = init_scale ** (1.0 / (len(dims) - 1))
        for k in range(len(dims) - 1):
            init = float(np.log(np.expm1(1.0 / scale / dims[k + 1])))
            m = nn.Parameter(torch.full((channels, dims[k + 1], dims[k]), init))
            self._matrices.append(m)
            b = nn.Parameter(torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5))
            self._biases.append(b)
            if k < len(dims) - 2:
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: (channels, 1, N)
        for k, (m, b) in enumerate(zip(self._matrices, self._biases)):
            x = torch.matmul(F.softplus(m), x) + b
            if k < len(self._factors):
                x = x + torch.tanh(self._factors[k]) * torch.tanh(x)
        return x

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self._logits(x))

    def likelihood(self, y: torch.Tensor) -> torch.Tensor:
        """P(round(y) | channel) evaluated at y; y shaped (B, C, h, w)."""
        b, c, h, w = y.shape
        if c != self.channels:
            raise ContractError(f"expected {self.channels} channels, got {c}")
        flat = y.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits(flat - 0.5)
        upper = self._logits(flat + 0.5)
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        lik = lower_bound(lik, self.LIKELIHOOD_FLOOR)
        return lik.reshape(c, b, h, w).permute(1, 0, 2, 3)

    def bits(self, y: torch.Tensor) -> torch.Tensor:
        """Total information content of y under the model, in bits."""
        return -torch.log2(self.likelihood(y)).sum()

    @torch.no_grad()
    def symbol_range(self, tail_mass: float = 2.0 ** -(PRECISION + 1), limit: int = 2048) -> tuple[int, int]:
        """Smallest integer range whose per-channel tail mass is below tail_mass."""
        grid = torch.arange(-limit, limit + 1, dtype=torch.float32)
        pts = grid.view(1, 1, -1).expand(self.channels, 1, -1)
        cdf = self.cdf(pts - 0.5)  # P(y < s - 0.5) for each integer s
        left = cdf.amax(dim=0).squeeze(0)   # worst channel
        right = (1.0 - cdf).amax(dim=0).squeeze(0)
        ge = torch.nonzero(left <= tail_mass)
        le = torch.nonzero(right <= tail_mass)
        s_min = int(grid[ge[-1]]) if len(ge) else -limit
        s_max = int(grid[le[0]]) if len(le) else limit
        # margin against drift between training and eval data
        return s_min - 4, max(s_max + 4, s_min - 3)


@dataclass
class FactorizedPrior:
    """Materialized per-channel quantized CDF tables over [s_min, s_max]."""

    cdfs: list = field(repr=False)  # list of np.uint32 arrays, each length n_symbols + 1
    s_min: int = 0
    s_max: int = 0
    precision: int = PRECISION

    def __post_init__(self):
        for c in self.cdfs:
            validate_cdf(np.asarray(c, dtype=np.int64) * (1 << (PRECISION - self.precision)))
        n = self.s_max - self.s_min + 1
        if any(len(c) != n + 1 for c in self.cdfs):
            raise ContractError("CDF length disagrees with symbol range")

    @property
    def channels(self) -> int:
        return len(self.cdfs)

    @property
    def num_symbols(self) -> int:
        return self.s_max - self.s_min + 1

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, s_min: int, precision: int = PRECISION) -> "FactorizedPrior":
        pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
        cdfs = [pmf_to_quantized_cdf(row, precision) for row in pmf]
        return cls(cdfs=cdfs, s_min=s_min, s_max=s_min + pmf.shape[1] - 1, precision=precision)

    @classmethod
    def from_density(cls, density: FactorizedDensity, precision: int = PRECISION) -> "FactorizedPrior":
        s_min, s_max = density.symbol_range()
        grid = torch.arange(s_min, s_max + 1, dtype=torch.float32)
        with torch.no_grad():
            pts = grid.view(1, 1, -1).expand(density.channels, 1, -1)
            cdf = density.cdf(pts + 0.5).squeeze(1).numpy()  # P(y < s + 0.5)
        pmf = np.diff(cdf, axis=1, prepend=0.0)
        pmf[:, -1] += 1.0 - cdf[:, -1]  # fold the right tail into the top bin
        pmf = np.maximum(pmf, 0.0)
        cdfs = [pmf_to_quantized_cdf(row + 1e-12, precision) for row in pmf]
        return cls(cdfs=cdfs, s_min=s_min, s_max=s_max, precision=precision)

    def clamp_symbols(self, symbols: np.ndarray) -> np.ndarray:
        return np.clip(symbols, self.s_min, self.s_max)

    def prob(self, symbols: np.ndarray, channels: np.ndarray) -> np.ndarray:
        """Per-symbol probability; out-of-range symbols use the boundary bin."""
        bins = self.clamp_symbols(np.asarray(symbols, dtype=np.int64)) - self.s_min
        ch = np.asarray(channels, dtype=np.int64)
        stacked = np.stack([np.asarray(c, dtype=np.int64) for c in self.cdfs])
        lo = stacked[ch, bins]
        hi = stacked[ch, bins + 1]
        return (hi - lo) / float(1 << self.precision)

    def tables(self) -> list:
        """Quantized CDF tables for the entropy coder (one per channel)."""
        return [np.asarray(c, dtype=np.uint32) for c in self.cdfs]

    def serialize(self) -> bytes:
        head = struct.pack("<4sBBHii", b"FCDF", 1, self.precision,
                           self.channels, self.s_min, self.s_max)
        body = b"".join(np.asarray(c, dtype="<u4").tobytes() for c in self.cdfs)
        return head + body

    @classmethod
    def deserialize(cls, data: bytes) -> "FactorizedPrior":
        magic, version, precision, channels, s_min, s_max = struct.unpack_from("<4sBBHii", data, 0)
        if magic != b"FCDF":
            raise ContractError("bad CDF table magic")
        if version != 1:
            raise ContractError(f"unsupported CDF table version {version}")
        n = s_max - s_min + 1
        off = struct.calcsize("<4sBBHii")
        cdfs = []
        for _ in range(channels):
            arr = np.frombuffer(data, dtype="<u4", count=n + 1, offset=off).astype(np.uint32)
            cdfs.append(arr)
            off += 4 * (n + 1)
        return cls(cdfs=cdfs, s_min=s_min, s_max=s_max, precision=precision)


def rate_estimate(latent_q: torch.Tensor, prior: FactorizedPrior) -> float:
    """Sum of -log2 p(symbol) under the prior's quantized tables, in bits.

    Accepts integer or noise-perturbed latents; non-integers are mapped to
    their nearest symbol. Out-of-range symbols cost the boundary-bin price.
    """
    x = latent_q.detach()
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[1] != prior.channels:
        raise ContractError(f"latent has {x.shape[1]} channels, prior has {prior.channels}")
    symbols = round_half_away(x).to(torch.int64).numpy()
    ch = np.broadcast_to(np.arange(prior.channels)[None, :, None, None], symbols.shape)
    p = prior.prob(symbols.ravel(), ch.ravel())
    return float(-np.log2(p).sum())


@dataclass
class SqConfig:
    latent_channels: int = 32
    base_channels: int = 48
    level_channels: tuple[int, ...] = (32, 32, 24, 16)
    lambda_rd: float = 0.01
    quality_index: int = 0

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "base_channels": self.base_channels,
            "level_channels": list(self.level_channels),
            "lambda_rd": self.lambda_rd,
            "quality_index": self.quality_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SqConfig":
        return cls(
            latent_channels=int(d["latent_channels"]),
            base_channels=int(d["base_channels"]),
            level_channels=tuple(int(c) for c in d["level_channels"]),
            lambda_rd=float(d["lambda_rd"]),
            quality_index=int(d["quality_index"]),
        )


class SqModel(nn.Module):
    """Complete fidelity expert for one RD trade-off point."""

    def __init__(self, config: SqConfig):
        super().__init__()
        self.config = config
        self.encoder = AnalysisNet(config.latent_channels, config.base_channels)
        self.decoder = LevelSplitDecoder(config.latent_channels, config.level_channels)
        self.density = FactorizedDensity(config.latent_channels)
        self._prior_cache: FactorizedPrior | None = None

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) or (3, H, W) image in [0,1] -> continuous latent."""
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        x = pad_to_multiple(x)
        y = self.encoder(x)
        return y.squeeze(0) if squeeze else y

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        squeeze = latent.dim() == 3
        y = latent.unsqueeze(0) if squeeze else latent
        x = self.decoder(y)
        return x.squeeze(0) if squeeze else x

    def prior(self, refresh: bool = False) -> FactorizedPrior:
        if self._prior_cache is None or refresh:
            self._prior_cache = FactorizedPrior.from_density(self.density)
        return self._prior_cache

    def freeze(self) -> "SqModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def build_sq_model(config_dict: dict) -> SqModel:
    try:
        return SqModel(SqConfig.from_dict(config_dict))
    except KeyError as e:
        raise ConfigError(f"sq config missing field {e}") from e
