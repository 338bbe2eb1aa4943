"""Training: expert pretraining and the frozen-expert collaboration recipe.

Experts are pretrained once (rate-distortion for the fidelity branch, a
standard codebook recipe for the perception branch) and then frozen. The
collaboration run optimizes only the enhancement/modulation modules: the
expert streams keep each branch's native objective, the modulation streams
get the anchored reconstruction objectives plus a token-consistency term on
the perception side. Expert parameter freezing is asserted per step and by
digest at the end of every run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import module_digest
from .collab import CollaborativeDecoder
from .errors import ConfigError, ContractError, FreezeViolationError
from .metrics import PerceptualProxy
from .sq import SqConfig, SqModel, scalar_quantize, round_half_away
from .tensors import generator
from .vq import VqConfig, VqModel, straight_through


@dataclass
class LossWeights:
    """Loss term weights; adversarial defaults to off (0.01 when enabled)."""

    expert_mse: float = 1.0
    expert_proxy: float = 1.0
    mod_mse: float = 1.0
    mod_l1: float = 1.0
    mod_proxy: float = 1.0
    mod_token: float = 0.5
    mod_adv: float = 0.0

    def __post_init__(self):
        for name, v in self.to_dict().items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss_weights.{name}: must be finite and >= 0")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in (
            "expert_mse", "expert_proxy", "mod_mse", "mod_l1",
            "mod_proxy", "mod_token", "mod_adv")}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


def expert_losses(x: torch.Tensor, recon_e_f: torch.Tensor, recon_e_p: torch.Tensor,
                  w: LossWeights, proxy: PerceptualProxy) -> tuple[torch.Tensor, torch.Tensor]:
    """Native objectives of the two expert streams (MSE / perceptual)."""
    loss_f = w.expert_mse * F.mse_loss(recon_e_f, x)
    loss_p = w.expert_proxy * proxy(x, recon_e_p)
    return loss_f, loss_p


def token_consistency_loss(vq_model: VqModel, x: torch.Tensor,
                           recon_p: torch.Tensor) -> torch.Tensor:
    """Mean L1 gap between the frozen perception encoder's features of
    the source and of the perception-anchored reconstruction."""
    with torch.no_grad():
        h = vq_model.encode(x)
    h_hat = vq_model.encode(recon_p)
    return torch.mean(torch.abs(h - h_hat))


def modulation_losses(x: torch.Tensor, recon_f, recon_p, w: LossWeights,
                      proxy: PerceptualProxy, vq_model: VqModel,
                      disc: "PatchDiscriminator | None" = None):
    """Anchored objectives of the two modulation streams.

    Either reconstruction may be None (single-anchor training); its loss is
    then a zero tensor. Returns (loss_f, loss_p, parts) with per-term floats.
    """
    if w.mod_adv > 0 and disc is None:
        raise ConfigError("loss_weights.mod_adv > 0 requires a discriminator")
    zero = torch.zeros((), dtype=x.dtype)
    parts: dict[str, float] = {}
    loss_f = zero
    if recon_f is not None:
        mse = F.mse_loss(recon_f, x)
        prx = proxy(x, recon_f)
        loss_f = w.mod_mse * mse + w.mod_proxy * prx
        parts["mod_f_mse"] = float(mse.detach())
        parts["mod_f_proxy"] = float(prx.detach())
        if w.mod_adv > 0:
            adv = generator_loss(disc, recon_f)
            loss_f = loss_f + w.mod_adv * adv
            parts["mod_f_adv"] = float(adv.detach())
    loss_p = zero
    if recon_p is not None:
        l1 = torch.mean(torch.abs(x - recon_p))
        prx = proxy(x, recon_p)
        tok = token_consistency_loss(vq_model, x, recon_p)
        loss_p = w.mod_l1 * l1 + w.mod_proxy * prx + w.mod_token * tok
        parts["mod_p_l1"] = float(l1.detach())
        parts["mod_p_proxy"] = float(prx.detach())
        parts["mod_p_token"] = float(tok.detach())
        if w.mod_adv > 0:
            adv = generator_loss(disc, recon_p)
            loss_p = loss_p + w.mod_adv * adv
            parts["mod_p_adv"] = float(adv.detach())
    return loss_f, loss_p, parts


def total_loss(loss_e_f, loss_e_p, loss_m_f, loss_m_p) -> torch.Tensor:
    return loss_e_f + loss_e_p + loss_m_f + loss_m_p


class PatchDiscriminator(nn.Module):
    """Three stride-2 convs -> one logit per 8x8 input patch."""

    def __init__(self, base: int = 48):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, 2 * base, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * base, 4 * base, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * base, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-3)


def hinge_real(logits: torch.Tensor) -> torch.Tensor:
    return torch.mean(F.relu(1.0 - logits))


def hinge_fake(logits: torch.Tensor) -> torch.Tensor:
    return torch.mean(F.relu(1.0 + logits))


def generator_loss(disc: PatchDiscriminator, fake: torch.Tensor) -> torch.Tensor:
    return -torch.mean(disc(fake))


def adversarial_step(disc: PatchDiscriminator, disc_opt: torch.optim.Optimizer,
                     real: torch.Tensor, fakes: list) -> float:
    """One hinge-loss discriminator update on detached fakes."""
    disc_opt.zero_grad()
    loss = hinge_real(disc(real))
    for fake in fakes:
        loss = loss + hinge_fake(disc(fake.detach())) / len(fakes)
    loss.backward()
    disc_opt.step()
    return float(loss.detach())


class ImageBatcher:
    """Deterministic shuffled minibatches over an in-memory image stack."""

    def __init__(self, images: torch.Tensor, batch_size: int, seed: int):
        if images.dim() != 4 or images.shape[0] == 0:
            raise ContractError("expected a non-empty (N, 3, H, W) image stack")
        self.images = images
        self.batch_size = min(batch_size, images.shape[0])
        self.gen = generator(seed)
        self._order = torch.zeros(0, dtype=torch.long)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.images.shape[0] // self.batch_size)

    def next(self) -> torch.Tensor:
        if len(self._order) < self.batch_size:
            self._order = torch.randperm(self.images.shape[0], generator=self.gen)
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return self.images[idx]


@dataclass
class PretrainParams:
    steps: int = 6000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0


def pretrain_sq_expert(images: torch.Tensor, config: SqConfig,
                       params: PretrainParams, log=None) -> SqModel:
    """Rate-distortion pretraining of one fidelity expert quality point."""
    torch.manual_seed(params.seed)
    model = SqModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=params.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=params.steps)
    batcher = ImageBatcher(images, params.batch_size, params.seed)
    npix_scale = 255.0 ** 2
    for step in range(params.steps):
        x = batcher.next()
        y = model.encoder(x)
        y_noisy = scalar_quantize(y, "noise")
        x_hat = model.decoder(y_noisy)
        mse = F.mse_loss(x_hat, x)
        bpp = model.density.bits(y_noisy) / x.numel() * x.shape[1]  # bits per pixel
        loss = config.lambda_rd * npix_scale * mse + bpp
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log is not None and (step % 100 == 0 or step == params.steps - 1):
            log({"step": step, "loss": float(loss.detach()), "mse": float(mse.detach()),
                 "bpp": float(bpp.detach())})
    model.prior(refresh=True)
    return model.freeze()


def pretrain_vq_expert(images: torch.Tensor, config: VqConfig,
                       params: PretrainParams, proxy: PerceptualProxy | None = None,
                       log=None, commitment_beta: float = 0.25,
                       dead_code_epochs: int = 2) -> VqModel:
    """Codebook autoencoder pretraining with straight-through gradients.

    Codebook rows unused for `dead_code_epochs` epochs are re-seeded from
    random encoder outputs of the current batch.
    """
    torch.manual_seed(params.seed)
    model = VqModel(config)
    proxy = proxy or PerceptualProxy.load_default()
    opt = torch.optim.Adam(model.parameters(), lr=params.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=params.steps)
    batcher = ImageBatcher(images, params.batch_size, params.seed)
    epoch_steps = batcher.steps_per_epoch
    unused_epochs = torch.zeros(config.codebook_size, dtype=torch.long)
    used_this_epoch = torch.zeros(config.codebook_size, dtype=torch.bool)
    reseed_gen = generator(params.seed + 1)
    for step in range(params.steps):
        x = batcher.next()
        z = model.encode(x)
        tokens, zq = model.quantize(z)
        used_this_epoch[tokens.reshape(-1)] = True
        st = straight_through(z, zq)
        x_hat = model.decode(st)
        l1 = torch.mean(torch.abs(x - x_hat))
        prx = proxy(x, x_hat)
        codebook_loss = F.mse_loss(zq, z.detach())
        commit_loss = F.mse_loss(z, zq.detach())
        loss = l1 + prx + codebook_loss + commitment_beta * commit_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if (step + 1) % epoch_steps == 0:
            unused_epochs = torch.where(used_this_epoch,
                                        torch.zeros_like(unused_epochs),
                                        unused_epochs + 1)
            dead = torch.nonzero(unused_epochs >= dead_code_epochs).squeeze(-1)
            if len(dead):
                flat = z.detach().permute(0, 2, 3, 1).reshape(-1, config.embed_dim)
                pick = torch.randint(flat.shape[0], (len(dead),), generator=reseed_gen)
                with torch.no_grad():
                    model.codebook[dead] = flat[pick]
                unused_epochs[dead] = 0
            used_this_epoch.zero_()
        if log is not None and (step % 100 == 0 or step == params.steps - 1):
            log({"step": step, "loss": float(loss.detach()), "l1": float(l1.detach()),
                 "proxy": float(prx.detach()), "dead": int((unused_epochs > 0).sum())})
    return model.freeze()


@dataclass
class ModeTrainParams:
    steps: int = 20000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    adversarial: bool = False
    disc_lr: float = 1e-4
    log_every: int = 50
    digest_check_every: int = 500


@dataclass
class TrainState:
    step: int = 0
    expert_digests: dict = field(default_factory=dict)
    max_expert_grad_norm: float = 0.0


def _expert_params(sq_models: dict, vq_model: VqModel):
    for m in list(sq_models.values()) + [vq_model]:
        yield from m.parameters()


def expert_grad_norm(sq_models: dict, vq_model: VqModel) -> float:
    total = 0.0
    for p in _expert_params(sq_models, vq_model):
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def train_mode(sq_models: dict, vq_model: VqModel, collab: CollaborativeDecoder,
               images: torch.Tensor, weights: LossWeights, params: ModeTrainParams,
               proxy: PerceptualProxy | None = None, log=None) -> TrainState:
    """Optimize only the collaboration modules against frozen experts.

    sq_models maps quality_index -> frozen SqModel; a quality point is
    sampled per step so one set of modules serves the whole bitrate range.
    """
    torch.manual_seed(params.seed)
    proxy = proxy or PerceptualProxy.load_default()
    for m in list(sq_models.values()) + [vq_model]:
        m.freeze()
        for p in m.parameters():
            p.grad = None  # stale pretraining grads would read as freeze violations
    digests_before = {f"sq_{q}": module_digest(m) for q, m in sq_models.items()}
    digests_before["vq"] = module_digest(vq_model)

    opt = torch.optim.Adam(collab.parameters(), lr=params.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, params.steps))
    disc = disc_opt = None
    if params.adversarial:
        if weights.mod_adv <= 0:
            raise ConfigError("adversarial training enabled but loss_weights.mod_adv is 0")
        disc = PatchDiscriminator()
        disc_opt = torch.optim.Adam(disc.parameters(), lr=params.disc_lr)
    elif weights.mod_adv > 0:
        raise ConfigError("loss_weights.mod_adv > 0 requires adversarial training enabled")

    batcher = ImageBatcher(images, params.batch_size, params.seed)
    qualities = sorted(sq_models)
    qgen = generator(params.seed + 7)
    state = TrainState(expert_digests=dict(digests_before))
    anchor_mode = collab.config.anchor_mode

    def check_digests(where: str) -> None:
        for q, m in sq_models.items():
            if module_digest(m) != digests_before[f"sq_{q}"]:
                raise FreezeViolationError(f"fidelity expert q{q} drifted ({where})")
        if module_digest(vq_model) != digests_before["vq"]:
            raise FreezeViolationError(f"perception expert drifted ({where})")

    for step in range(params.steps):
        x = batcher.next()
        q = qualities[int(torch.randint(len(qualities), (1,), generator=qgen))]
        sq_model = sq_models[q]
        with torch.no_grad():
            prior = sq_model.prior()
            # clamp into the prior's support: exactly what decode-side sees
            latent = round_half_away(sq_model.encode(x)).clamp(prior.s_min, prior.s_max)
            tokens, _ = vq_model.quantize(vq_model.encode(x))
            feat = vq_model.embed(tokens)
        out = collab(sq_model.decoder, vq_model.decoder, latent, feat,
                     anchor_mode=anchor_mode, clamp=False)
        loss_e_f, loss_e_p = expert_losses(
            x, out.expert_recon["f"], out.expert_recon["p"], weights, proxy)
        loss_m_f, loss_m_p, parts = modulation_losses(
            x, out.recon.get("f"), out.recon.get("p"), weights, proxy, vq_model, disc)
        loss = total_loss(loss_e_f, loss_e_p, loss_m_f, loss_m_p)
        opt.zero_grad()
        loss.backward()
        grad_norm = expert_grad_norm(sq_models, vq_model)
        state.max_expert_grad_norm = max(state.max_expert_grad_norm, grad_norm)
        if grad_norm != 0.0:
            raise FreezeViolationError(f"expert gradients appeared at step {step}")
        opt.step()
        sched.step()
        if disc is not None:
            fakes = [r for r in out.recon.values()]
            adversarial_step(disc, disc_opt, x, fakes)
        state.step = step + 1
        if log is not None and (step % params.log_every == 0 or step == params.steps - 1):
            entry = {
                "step": step, "quality": q, "total": float(loss.detach()),
                "expert_f": float(loss_e_f.detach()), "expert_p": float(loss_e_p.detach()),
                "mod_f": float(loss_m_f.detach()), "mod_p": float(loss_m_p.detach()),
                "lr": float(opt.param_groups[0]["lr"]),
                "expert_grad_norm": grad_norm,
            }
            entry.update(parts)
            entry.update(out.gate_means())
            log(entry)
        if (step + 1) % params.digest_check_every == 0:
            check_digests(f"step {step + 1}")
    check_digests("end of run")
    return state


class JsonlLogger:
    """Line-delimited metric log writer."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")

    def __call__(self, entry: dict) -> None:
        self._f.write(json.dumps(entry, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()
