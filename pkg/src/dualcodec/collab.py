"""Decoder-side collaboration: per-level enhancement and gated cross-branch
modulation over two frozen expert decoders.

Each branch runs two streams initialized from the same transmitted latent:
an expert stream kept close to the frozen decoder's native trajectory, and a
modulation stream that receives gated residual injections computed from the
*other* branch's enhanced expert feature. Per level i and branch b:

    bar_e = D_b^i(expert_in)          bar_m = D_b^i(mod_in)
    tilde_e = enhance_b^i(bar_m, bar_e)
    tilde_m = modulate_b^i(bar_m, tilde_e_of_other_branch)
    next expert_in = Up_b^i(tilde_e)  next mod_in = Up_b^i(tilde_m)

After the last level the frozen output heads produce the fidelity-anchored
and perception-anchored reconstructions (modulation streams) and the
auxiliary expert-stream reconstructions used for training supervision.

Initialization is anchored: enhancement blocks start as the identity on the
expert feature and modulation blocks start with a zero residual, so an
untrained stack reproduces the frozen experts exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .errors import ConfigError, ContractError
from .sq import LevelSplitDecoder

BRANCHES = ("f", "p")
VARIANTS = ("full", "no_ese", "sft_cem")

GATE_BIAS_INIT = -4.0  # sigmoid(-4) ~ 0.018: near-anchor start


def _conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, padding=1)


def _zero_conv3(cin: int, cout: int) -> nn.Conv2d:
    conv = _conv3(cin, cout)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class EseBlock(nn.Module):
    """Enhanced expert reference from the branch's own two streams.

    Concatenates (mod, expert), projects back to the branch width, and adds
    a zero-initialized residual onto the expert feature: identity at init.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Conv2d(2 * channels, channels, kernel_size=1)
        self.body = nn.Sequential(
            _conv3(channels, channels), nn.LeakyReLU(0.2, inplace=True),
            _zero_conv3(channels, channels),
        )
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, mod_feat: torch.Tensor, expert_feat: torch.Tensor) -> torch.Tensor:
        if mod_feat.shape != expert_feat.shape:
            raise ContractError("enhancement inputs must share a shape")
        u = torch.cat([mod_feat, expert_feat], dim=-3)
        return expert_feat + self.body(self.act(self.proj(u)))


class CemBlock(nn.Module):
    """Dense-gated residual injection from the other branch's expert feature.

    u = cat(mod, cross); gate = sigmoid(G(u)) in [0,1]; out = mod + gate * M(u).
    The gate is spatial (one channel, broadcast) unless per_channel is set.
    """

    def __init__(self, channels: int, cross_channels: int, per_channel: bool = False):
        super().__init__()
        self.channels = channels
        self.cross_channels = cross_channels
        self.proj = nn.Conv2d(channels + cross_channels, channels, kernel_size=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)
        gate_out = channels if per_channel else 1
        gate_final = _conv3(channels, gate_out)
        nn.init.zeros_(gate_final.weight)
        nn.init.constant_(gate_final.bias, GATE_BIAS_INIT)
        self.gate_net = nn.Sequential(
            _conv3(channels, channels), nn.LeakyReLU(0.2, inplace=True),
            gate_final, nn.Sigmoid(),
        )
        self.mod_net = nn.Sequential(
            _conv3(channels, channels), nn.LeakyReLU(0.2, inplace=True),
            _zero_conv3(channels, channels),
        )

    def forward(self, mod_feat: torch.Tensor, cross_feat: torch.Tensor,
                gate_override: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        if mod_feat.shape[-2:] != cross_feat.shape[-2:]:
            raise ContractError("modulation inputs must agree spatially")
        if mod_feat.shape[-3] != self.channels or cross_feat.shape[-3] != self.cross_channels:
            raise ContractError("modulation inputs have unexpected channel widths")
        u = self.act(self.proj(torch.cat([mod_feat, cross_feat], dim=-3)))
        gate = self.gate_net(u)
        if gate_override is not None:
            gate = torch.full_like(gate, float(gate_override))
        out = mod_feat + gate * self.mod_net(u)
        return out, gate


class SftBlock(nn.Module):
    """Ablation: ungated affine modulation driven by the cross feature only.

    out = gamma(cross) * mod + beta(cross); gamma starts at 1, beta at 0.
    """

    def __init__(self, channels: int, cross_channels: int):
        super().__init__()
        self.channels = channels
        self.cross_channels = cross_channels
        self.proj = nn.Conv2d(cross_channels, channels, kernel_size=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)
        self.body = nn.Sequential(
            _conv3(channels, channels), nn.LeakyReLU(0.2, inplace=True),
            _zero_conv3(channels, 2 * channels),
        )

    def affine(self, cross_feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.body(self.act(self.proj(cross_feat)))
        gamma_hat, beta = h.split(self.channels, dim=-3)
        return 1.0 + gamma_hat, beta

    def forward(self, mod_feat: torch.Tensor, cross_feat: torch.Tensor,
                gate_override: float | None = None) -> tuple[torch.Tensor, None]:
        if mod_feat.shape[-2:] != cross_feat.shape[-2:]:
            raise ContractError("modulation inputs must agree spatially")
        gamma, beta = self.affine(cross_feat)
        return gamma * mod_feat + beta, None


@dataclass
class ModeConfig:
    """Structure of the collaboration stack; must match the frozen experts."""

    num_levels: int = 4
    f_channels: tuple[int, ...] = (32, 32, 24, 16)
    p_channels: tuple[int, ...] = (32, 32, 24, 16)
    gate_per_channel: bool = False
    variant: str = "full"
    anchor_mode: str = "both"  # which modulation outputs to materialize

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"mode.variant: unknown kind {self.variant!r}")
        if self.anchor_mode not in ("both", "f", "p"):
            raise ConfigError(f"mode.anchor_mode: must be both|f|p, got {self.anchor_mode!r}")
        if len(self.f_channels) != self.num_levels or len(self.p_channels) != self.num_levels:
            raise ConfigError("mode: per-level channel lists must have num_levels entries")

    def channels(self, branch: str) -> tuple[int, ...]:
        return self.f_channels if branch == "f" else self.p_channels

    def to_dict(self) -> dict:
        return {
            "num_levels": self.num_levels,
            "f_channels": list(self.f_channels),
            "p_channels": list(self.p_channels),
            "gate_per_channel": self.gate_per_channel,
            "variant": self.variant,
            "anchor_mode": self.anchor_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModeConfig":
        return cls(
            num_levels=int(d["num_levels"]),
            f_channels=tuple(int(c) for c in d["f_channels"]),
            p_channels=tuple(int(c) for c in d["p_channels"]),
            gate_per_channel=bool(d["gate_per_channel"]),
            variant=str(d["variant"]),
            anchor_mode=str(d["anchor_mode"]),
        )


def ablation_variant(base: ModeConfig, kind: str) -> ModeConfig:
    """Derive an ablation config: bypass enhancement, or swap in SFT."""
    if kind not in ("no_ese", "sft_cem"):
        raise ConfigError(f"ablation kind must be no_ese|sft_cem, got {kind!r}")
    return replace(base, variant=kind)


@dataclass
class CollabOutput:
    recon: dict = field(default_factory=dict)         # branch -> modulation-stream image
    expert_recon: dict = field(default_factory=dict)  # branch -> expert-stream image
    gates: dict = field(default_factory=dict)         # (branch, level) -> gate map

    def gate_means(self) -> dict:
        return {f"gate_mean_{b}_{i}": float(g.detach().mean())
                for (b, i), g in self.gates.items()}


class CollaborativeDecoder(nn.Module):
    """Trainable collaboration stack over a pair of frozen level decoders.

    Decoding is a pure function of (latents, weights): concurrent decodes of
    distinct inputs are safe; one decode is sequential across levels."""

    def __init__(self, config: ModeConfig):
        super().__init__()
        self.config = config
        other = {"f": "p", "p": "f"}
        self.enhance = nn.ModuleDict()
        self.modulate = nn.ModuleDict()
        for b in BRANCHES:
            own = config.channels(b)
            cross = config.channels(other[b])
            if config.variant != "no_ese":
                self.enhance[b] = nn.ModuleList(EseBlock(c) for c in own)
            if config.variant == "sft_cem":
                self.modulate[b] = nn.ModuleList(
                    SftBlock(c, x) for c, x in zip(own, cross))
            else:
                self.modulate[b] = nn.ModuleList(
                    CemBlock(c, x, config.gate_per_channel) for c, x in zip(own, cross))

    def ese_forward(self, branch: str, level: int, mod_feat: torch.Tensor,
                    expert_feat: torch.Tensor) -> torch.Tensor:
        self._check_branch_level(branch, level)
        if self.config.variant == "no_ese":
            return expert_feat
        return self.enhance[branch][level](mod_feat, expert_feat)

    def cem_forward(self, branch: str, level: int, mod_feat: torch.Tensor,
                    cross_feat: torch.Tensor, gate_override: float | None = None):
        self._check_branch_level(branch, level)
        return self.modulate[branch][level](mod_feat, cross_feat, gate_override)

    def _check_branch_level(self, branch: str, level: int) -> None:
        if branch not in BRANCHES:
            raise ContractError(f"branch must be one of {BRANCHES}, got {branch!r}")
        if not 0 <= level < self.config.num_levels:
            raise ContractError(f"level {level} outside [0, {self.config.num_levels})")

    def check_experts(self, sq_decoder: LevelSplitDecoder, vq_decoder: LevelSplitDecoder) -> None:
        if sq_decoder.level_channels != self.config.f_channels:
            raise ConfigError("mode.f_channels disagree with the fidelity decoder")
        if vq_decoder.level_channels != self.config.p_channels:
            raise ConfigError("mode.p_channels disagree with the perception decoder")

    def forward(self, sq_decoder: LevelSplitDecoder, vq_decoder: LevelSplitDecoder,
                latent_f: torch.Tensor, latent_p: torch.Tensor,
                anchor_mode: str | None = None,
                gate_override: float | None = None,
                clamp: bool = True) -> CollabOutput:
        """Run the level recursion; latents are (B, C, h, w) from one bitstream.

        clamp=False leaves reconstructions unclamped (training wants live
        gradients on out-of-range pixels); decode paths keep the default.
        """
        self.check_experts(sq_decoder, vq_decoder)
        if latent_f.shape[-2:] != latent_p.shape[-2:]:
            raise ConfigError("branch latents disagree spatially")
        anchor_mode = anchor_mode or self.config.anchor_mode
        decoders = {"f": sq_decoder, "p": vq_decoder}
        other = {"f": "p", "p": "f"}
        expert_in = {"f": latent_f, "p": latent_p}
        mod_in = {"f": latent_f, "p": latent_p}
        out = CollabOutput()
        for i in range(self.config.num_levels):
            bar_e = {b: decoders[b].decode_level(i, expert_in[b]) for b in BRANCHES}
            bar_m = {b: decoders[b].decode_level(i, mod_in[b]) for b in BRANCHES}
            tilde_e = {b: self.ese_forward(b, i, bar_m[b], bar_e[b]) for b in BRANCHES}
            tilde_m = {}
            for b in BRANCHES:
                modulated, gate = self.cem_forward(b, i, bar_m[b], tilde_e[other[b]],
                                                   gate_override)
                tilde_m[b] = modulated
                if gate is not None:
                    out.gates[(b, i)] = gate
            expert_in = {b: decoders[b].upsample_level(i, tilde_e[b]) for b in BRANCHES}
            mod_in = {b: decoders[b].upsample_level(i, tilde_m[b]) for b in BRANCHES}
        for b in BRANCHES:
            expert_img = decoders[b].output_head(expert_in[b])
            out.expert_recon[b] = expert_img.clamp(0.0, 1.0) if clamp else expert_img
            if anchor_mode in ("both", b):
                mod_img = decoders[b].output_head(mod_in[b])
                out.recon[b] = mod_img.clamp(0.0, 1.0) if clamp else mod_img
        return out
