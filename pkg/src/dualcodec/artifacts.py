"""Artifact directory layout and checkpoint wiring.

    <out_dir>/
      config.yaml            resolved experiment config
      digests.json           every checkpoint digest (provenance)
      data/ heldout/         generated image folders (synthetic runs)
      experts/sq_q{i}.pt     one fidelity expert per quality index
      experts/vq.pt          perception expert
      experts/vq_small.pt    optional small-codebook perception expert
      mode/mode_{variant}.pt collaboration checkpoints (full / no_ese / sft_cem)
      logs/*.jsonl           training logs
      eval/results.json      per-image evaluation rows
      eval/...               RD curve files, BD report, plots
"""

from __future__ import annotations

import json
from pathlib import Path

from .bitstream import CodecBundle
from .checkpoint import load_checkpoint, save_checkpoint
from .collab import CollaborativeDecoder, ModeConfig
from .errors import ArtifactMissingError, DigestMismatchError
from .sq import FactorizedPrior, SqModel, build_sq_model
from .vq import VqModel, build_vq_model


def expert_dir(root) -> Path:
    return Path(root) / "experts"


def mode_path(root, variant: str) -> Path:
    return Path(root) / "mode" / f"mode_{variant}.pt"


def eval_dir(root) -> Path:
    return Path(root) / "eval"


def save_sq_expert(root, model: SqModel) -> str:
    prior = model.prior(refresh=True)
    path = expert_dir(root) / f"sq_q{model.config.quality_index}.pt"
    return save_checkpoint(path, "sq_expert", model.config.to_dict(), model,
                           extra={"prior": prior.serialize()})


def save_vq_expert(root, model: VqModel, name: str = "vq") -> str:
    path = expert_dir(root) / f"{name}.pt"
    return save_checkpoint(path, "vq_expert", model.config.to_dict(), model)


def load_sq_expert(path) -> tuple[SqModel, FactorizedPrior, str]:
    payload = load_checkpoint(path, "sq_expert")
    model = build_sq_model(payload["config"])
    model.load_state_dict(payload["state"])
    model.freeze()
    prior = FactorizedPrior.deserialize(payload["extra"]["prior"])
    return model, prior, payload["digest"]


def load_vq_expert(path) -> tuple[VqModel, str]:
    payload = load_checkpoint(path, "vq_expert")
    model = build_vq_model(payload["config"])
    model.load_state_dict(payload["state"])
    model.freeze()
    return model, payload["digest"]


def load_bundle(root, vq_name: str = "vq") -> CodecBundle:
    """Load every fidelity quality point plus the perception expert."""
    exp = expert_dir(root)
    sq_paths = sorted(exp.glob("sq_q*.pt"))
    if not sq_paths:
        raise ArtifactMissingError(
            f"no fidelity expert checkpoints under {exp}; run the pretrain command")
    sq_models, priors, sq_digests = {}, {}, {}
    for path in sq_paths:
        model, prior, digest = load_sq_expert(path)
        q = model.config.quality_index
        sq_models[q] = model
        priors[q] = prior
        sq_digests[q] = digest
    vq_path = exp / f"{vq_name}.pt"
    if not vq_path.exists():
        raise ArtifactMissingError(
            f"{vq_path} not found; run the pretrain command")
    vq_model, vq_digest = load_vq_expert(vq_path)
    return CodecBundle(sq_models, priors, vq_model, sq_digests, vq_digest)


def bundle_digests(bundle: CodecBundle) -> dict:
    d = {f"sq_{q}": digest for q, digest in bundle.sq_digests.items()}
    d["vq"] = bundle.vq_digest
    return d


def save_collab(root, collab: CollaborativeDecoder, bundle: CodecBundle) -> str:
    path = mode_path(root, collab.config.variant)
    return save_checkpoint(path, "mode", collab.config.to_dict(), collab,
                           extra={"expert_digests": bundle_digests(bundle)})


def load_collab(path, bundle: CodecBundle | None = None) -> CollaborativeDecoder:
    """Load a collaboration checkpoint, refusing mismatched experts."""
    payload = load_checkpoint(path, "mode")
    if bundle is not None:
        tagged = payload["extra"].get("expert_digests", {})
        current = bundle_digests(bundle)
        for key, digest in tagged.items():
            if key in current and current[key] != digest:
                raise DigestMismatchError(
                    f"{path} was trained against different expert weights ({key})")
    collab = CollaborativeDecoder(ModeConfig.from_dict(payload["config"]))
    collab.load_state_dict(payload["state"])
    collab.eval()
    return collab


def write_provenance(root, config_yaml: str, digests: dict) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(config_yaml)
    existing = {}
    digest_file = root / "digests.json"
    if digest_file.exists():
        existing = json.loads(digest_file.read_text())
    existing.update(digests)
    digest_file.write_text(json.dumps(existing, indent=1, sort_keys=True) + "\n")
