"""Command-line entry points for reproducible desk-scale experiments.

Subcommands: synth, pretrain, train, encode, decode, eval, ablate, report.
Exit codes: 0 success, 2 config error, 3 missing artifact, 4 contract
violation. All randomness flows from the seeds recorded in the resolved
config, which is written into every output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import bitstream, metrics
from .collab import CollaborativeDecoder, ModeConfig, VARIANTS, ablation_variant
from .config import ExperimentConfig, load_config
from .data import load_folder, synth_dataset
from .errors import (ArtifactMissingError, ConfigError, ContractError,
                     DualCodecError)
from .metrics import PerceptualProxy
from .sq import SqConfig
from .tensors import load_image, save_image
from .training import (JsonlLogger, LossWeights, ModeTrainParams,
                       PretrainParams, pretrain_sq_expert, pretrain_vq_expert,
                       train_mode)
from .vq import VqConfig


def _dataset_images(cfg: ExperimentConfig, root: Path):
    if cfg.dataset.kind == "synthetic":
        folder = root / "data"
        expected = folder / f"img_{cfg.dataset.count - 1:05d}.png"
        if cfg.dataset.count and not expected.exists():
            synth_dataset(cfg.dataset.seed, cfg.dataset.count, cfg.dataset.size, folder)
    else:
        folder = Path(cfg.dataset.path)
    return load_folder(folder)


def _heldout_paths(cfg: ExperimentConfig, root: Path) -> list:
    folder = root / "heldout"
    expected = folder / f"img_{cfg.heldout.count - 1:05d}.png"
    if not expected.exists():
        synth_dataset(cfg.heldout.seed, cfg.heldout.count, cfg.heldout.size, folder)
    return sorted(folder.glob("*.png"))


def cmd_synth(args) -> int:
    paths = synth_dataset(args.seed, args.count, args.size, args.out)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    root = Path(args.out or cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    images, _ = _dataset_images(cfg, root)
    proxy = PerceptualProxy.load_default()
    only = args.only
    digests = {}

    def wanted(tag: str) -> bool:
        return only is None or only == tag

    for idx, lam in enumerate(cfg.sq.lambdas):
        if not wanted(f"sq:{idx}"):
            continue
        sq_cfg = SqConfig(cfg.sq.latent_channels, cfg.sq.base_channels,
                          tuple(cfg.sq.level_channels), lam, idx)
        log = JsonlLogger(root / "logs" / f"sq_q{idx}.jsonl")
        model = pretrain_sq_expert(
            images, sq_cfg,
            PretrainParams(cfg.sq.steps, cfg.sq.batch_size, cfg.sq.lr, cfg.seed + idx),
            log=log)
        log.close()
        digests[f"sq_{idx}"] = art.save_sq_expert(root, model)
        print(f"fidelity expert q{idx} (lambda={lam}) -> {digests[f'sq_{idx}'][:12]}")
    for tag, name, size, steps in (
            ("vq", "vq", cfg.vq.codebook_size, cfg.vq.steps),
            ("vq_small", "vq_small", cfg.vq.small_codebook_size, cfg.vq.small_steps)):
        if not wanted(tag):
            continue
        vq_cfg = VqConfig(cfg.vq.embed_dim, cfg.vq.base_channels,
                          tuple(cfg.vq.level_channels), size)
        log = JsonlLogger(root / "logs" / f"{name}.jsonl")
        model = pretrain_vq_expert(
            images, vq_cfg,
            PretrainParams(steps, cfg.vq.batch_size, cfg.vq.lr, cfg.seed + 100),
            proxy=proxy, log=log, commitment_beta=cfg.vq.commitment_beta,
            dead_code_epochs=cfg.vq.dead_code_epochs)
        log.close()
        digests[name] = art.save_vq_expert(root, model, name=name)
        print(f"perception expert {name} (codebook={size}) -> {digests[name][:12]}")
    art.write_provenance(root, cfg.to_yaml(), digests)
    return 0


def _mode_config(cfg: ExperimentConfig, bundle, variant: str) -> ModeConfig:
    any_sq = next(iter(bundle.sq_models.values()))
    base = ModeConfig(
        num_levels=any_sq.decoder.num_levels,
        f_channels=any_sq.decoder.level_channels,
        p_channels=bundle.vq_model.decoder.level_channels,
        gate_per_channel=cfg.mode.gate_per_channel,
        anchor_mode=cfg.mode.anchor_mode)
    return base if variant == "full" else ablation_variant(base, variant)


def _train_variant(cfg: ExperimentConfig, root: Path, variant: str, steps=None) -> str:
    bundle = art.load_bundle(root)
    images, _ = _dataset_images(cfg, root)
    collab = CollaborativeDecoder(_mode_config(cfg, bundle, variant))
    weights = LossWeights.from_dict(cfg.mode.loss_weights) if cfg.mode.loss_weights \
        else LossWeights()
    params = ModeTrainParams(
        steps=steps if steps is not None else cfg.mode.steps,
        batch_size=cfg.mode.batch_size, lr=cfg.mode.lr, seed=cfg.seed,
        adversarial=cfg.mode.adversarial, disc_lr=cfg.mode.disc_lr)
    log = JsonlLogger(root / "logs" / f"mode_{variant}.jsonl")
    train_mode(bundle.sq_models, bundle.vq_model, collab, images, weights, params,
               log=log)
    log.close()
    digest = art.save_collab(root, collab, bundle)
    art.write_provenance(root, cfg.to_yaml(), {f"mode_{variant}": digest})
    print(f"collaboration modules ({variant}) -> {digest[:12]}")
    return digest


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _train_variant(cfg, Path(args.out or cfg.out_dir), args.variant, args.steps)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    _train_variant(cfg, Path(args.out or cfg.out_dir), args.kind, args.steps)
    return 0


def cmd_encode(args) -> int:
    bundle = art.load_bundle(args.artifacts)
    image = load_image(args.image)
    blob = bitstream.encode_image(image, args.quality, bundle,
                                  token_mode=args.token_mode)
    out = Path(args.out or Path(args.image).with_suffix(".mode").name)
    out.write_bytes(blob)
    h, w = image.shape[-2:]
    print(f"{out}: {len(blob)} bytes, {bitstream.bits_per_pixel(len(blob), h, w):.4f} bpp")
    return 0


def cmd_decode(args) -> int:
    bundle = art.load_bundle(args.artifacts)
    data = Path(args.bitstream).read_bytes()
    collab = None
    if args.anchor in ("f", "p", "both"):
        path = art.mode_path(args.artifacts, args.variant)
        collab = art.load_collab(path, bundle)
    result = bitstream.decode_image(data, args.anchor, bundle, collab=collab)
    out = Path(args.out or Path(args.bitstream).with_suffix(".png").name)
    if isinstance(result, dict):
        for branch, recon in sorted(result.items()):
            path = out.with_name(f"{out.stem}_{branch}{out.suffix}")
            save_image(recon, path)
            print(f"wrote {path}")
    else:
        save_image(result, out)
        print(f"wrote {out}")
    return 0


def _available_collabs(root: Path, bundle) -> dict:
    found = {}
    for variant in VARIANTS:
        path = art.mode_path(root, variant)
        if path.exists():
            found[variant] = art.load_collab(path, bundle)
    if not found:
        raise ArtifactMissingError(
            f"no collaboration checkpoints under {root}/mode; run the train command")
    return found


def _bd_entry(rows, anchor_name, test_name, metric, higher_is_better):
    # default shape-preserving interpolation; the classic polynomial fit is
    # the fallback when a toy curve is not monotone along the metric axis
    try:
        anchor = metrics.rd_curve_from_rows(rows, anchor_name, metric, higher_is_better)
        test = metrics.rd_curve_from_rows(rows, test_name, metric, higher_is_better)
    except ContractError as e:
        return {"error": str(e)}
    for method in ("pchip", "poly"):
        try:
            rate = metrics.bd_rate(anchor, test, method=method)
            met = metrics.bd_metric(anchor, test, method=method)
            return {"bd_rate_percent": rate.bd_rate_percent, "bd_metric": met.bd_metric,
                    "overlap": list(rate.overlap), "method": method}
        except (metrics.NoOverlapError, ContractError) as e:
            err = e
    return {"error": str(err)}


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    root = Path(args.artifacts or cfg.out_dir)
    bundle = art.load_bundle(root)
    collabs = _available_collabs(root, bundle)
    heldout = _heldout_paths(cfg, root)
    qualities = sorted(bundle.sq_models)
    rows = metrics.evaluate_images(bundle, collabs, heldout, qualities,
                                   token_mode=cfg.token_mode)
    out = art.eval_dir(root)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_rows(rows, out / "results.json")

    decoders = sorted(rows[0]["metrics"].keys())
    curve_dir = out / "rd_curves"
    curve_dir.mkdir(exist_ok=True)
    for dec in decoders:
        for metric in ("psnr", "proxy"):
            points = metrics.quality_means(rows, dec, metric)
            lines = [f"# bpp\t{metric}"] + [f"{b:.6f}\t{m:.6f}" for b, m in points]
            (curve_dir / f"{dec}_{metric}.txt").write_text("\n".join(lines) + "\n")

    bd = {}
    for metric, hib in (("psnr", True), ("proxy", False)):
        bd[f"mode_f_vs_expert_f/{metric}"] = _bd_entry(rows, "expert_f", "mode_f", metric, hib)
        bd[f"mode_p_vs_expert_f/{metric}"] = _bd_entry(rows, "expert_f", "mode_p", metric, hib)
    for variant in collabs:
        if variant == "full":
            continue
        for branch in ("f", "p"):
            key = f"mode_{branch}@{variant}_vs_mode_{branch}/psnr"
            bd[key] = _bd_entry(rows, f"mode_{branch}", f"mode_{branch}@{variant}",
                                "psnr", True)
    (out / "bd_report.json").write_text(json.dumps(bd, indent=1, sort_keys=True) + "\n")
    _write_report(out)
    print(f"evaluated {len(heldout)} images x {len(qualities)} quality points -> {out}")
    return 0


def _write_report(out: Path) -> None:
    rows = metrics.read_rows(out / "results.json")
    bd = json.loads((out / "bd_report.json").read_text()) \
        if (out / "bd_report.json").exists() else {}
    decoders = sorted(rows[0]["metrics"].keys())
    qualities = sorted({r["quality"] for r in rows})
    lines = ["# Evaluation report", "",
             f"Images: {len({r['image'] for r in rows})}; "
             f"quality points: {qualities}", "",
             "## Mean metrics per quality point", "",
             "| decoder | quality | bpp | psnr | proxy |",
             "|---|---|---|---|---|"]
    for dec in decoders:
        for q in qualities:
            sel = [r for r in rows if r["quality"] == q]
            bpp = np.mean([r["bpp"] for r in sel])
            ps = [r["metrics"][dec]["psnr"] for r in sel]
            ps = [p for p in ps if np.isfinite(p)]
            prox = np.mean([r["metrics"][dec]["proxy"] for r in sel])
            lines.append(f"| {dec} | {q} | {bpp:.4f} | {np.mean(ps):.3f} | {prox:.5f} |")
    if bd:
        lines += ["", "## Bjontegaard deltas", "",
                  "| comparison | BD-rate % | BD-metric |", "|---|---|---|"]
        for key in sorted(bd):
            e = bd[key]
            if "error" in e:
                lines.append(f"| {key} | n/a | {e['error']} |")
            else:
                lines.append(f"| {key} | {e['bd_rate_percent']:.2f} | {e['bd_metric']:.4f} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _plot_curves(out)


def _plot_curves(out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = metrics.read_rows(out / "results.json")
    decoders = sorted(rows[0]["metrics"].keys())
    for metric in ("psnr", "proxy"):
        fig, ax = plt.subplots(figsize=(5, 4))
        for dec in decoders:
            points = metrics.quality_means(rows, dec, metric)
            ax.plot([b for b, _ in points], [m for _, m in points],
                    marker="o", label=dec)
        ax.set_xlabel("bpp")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"rd_{metric}.png", metadata={"Software": "dualcodec"})
        plt.close(fig)


def cmd_report(args) -> int:
    results = Path(args.results)
    out = results if (results / "results.json").exists() else art.eval_dir(results)
    if not (out / "results.json").exists():
        raise ArtifactMissingError(
            f"{out}/results.json not found; run the eval command first")
    _write_report(out)
    print(f"report regenerated under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualcodec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a deterministic synthetic image folder")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("pretrain", help="train and freeze the expert codecs")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--only", default=None,
                   help="limit to one expert: sq:<idx>, vq, or vq_small")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("train", help="train the collaboration modules")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--variant", default="full", choices=list(VARIANTS))
    s.add_argument("--steps", type=int, default=None)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("encode", help="encode an image into a .mode bitstream")
    s.add_argument("image")
    s.add_argument("--quality", type=int, required=True)
    s.add_argument("--artifacts", required=True)
    s.add_argument("--token-mode", default="fixed", choices=["fixed", "entropy"])
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("decode", help="decode one anchor from a .mode bitstream")
    s.add_argument("bitstream")
    s.add_argument("--anchor", required=True,
                   choices=["f", "p", "both", "expert-f", "expert-p"])
    s.add_argument("--artifacts", required=True)
    s.add_argument("--variant", default="full", choices=list(VARIANTS))
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("eval", help="RD evaluation over the held-out set")
    s.add_argument("--config", required=True)
    s.add_argument("--artifacts", default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="train an ablation variant")
    s.add_argument("--config", required=True)
    s.add_argument("--kind", required=True, choices=["no_ese", "sft_cem"])
    s.add_argument("--out", default=None)
    s.add_argument("--steps", type=int, default=None)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("report", help="regenerate report/plots from stored results")
    s.add_argument("--results", required=True)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    import torch

    torch.set_num_threads(1)  # faster than 2 threads at these tensor sizes
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ArtifactMissingError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return 3
    except ContractError as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 4
    except DualCodecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
