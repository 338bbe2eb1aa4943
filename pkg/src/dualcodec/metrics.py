"""Fidelity/perceptual measurements, Bjontegaard deltas, and RD evaluation.

The perceptual axis uses a fixed random 3-level conv pyramid (weights are a
committed fixture, so numbers are comparable across machines). It is a
stand-in distance, not a calibrated perceptual metric: only d(x, x) = 0 and
symmetry are guaranteed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator
from torch import nn

from .errors import ContractError, DualCodecError

PROXY_FIXTURE = "perceptual_proxy.npz"
PROXY_SEED = 20240117
_PROXY_WIDTHS = (3, 16, 32, 64)


class NoOverlapError(DualCodecError):
    """The two RD curves share no operating range."""


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    """10*log10(1/MSE) for [0,1] images; +inf when identical."""
    if x.shape != y.shape:
        raise ContractError(f"psnr shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(torch.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


class PerceptualProxy(nn.Module):
    """Mean squared distance between unit-normalized pyramid features."""

    def __init__(self, state: dict[str, np.ndarray]):
        super().__init__()
        convs = []
        for i in range(len(_PROXY_WIDTHS) - 1):
            conv = nn.Conv2d(_PROXY_WIDTHS[i], _PROXY_WIDTHS[i + 1],
                             kernel_size=3, stride=2, padding=1)
            conv.weight.data = torch.from_numpy(state[f"w{i}"]).float()
            conv.bias.data = torch.from_numpy(state[f"b{i}"]).float()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @staticmethod
    def fresh_state(seed: int = PROXY_SEED) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        state = {}
        for i in range(len(_PROXY_WIDTHS) - 1):
            cin, cout = _PROXY_WIDTHS[i], _PROXY_WIDTHS[i + 1]
            std = math.sqrt(2.0 / (cin * 9))
            state[f"w{i}"] = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(np.float32)
            state[f"b{i}"] = rng.normal(0.0, 0.05, size=(cout,)).astype(np.float32)
        return state

    @classmethod
    def load_default(cls) -> "PerceptualProxy":
        ref = resources.files("dualcodec") / "fixtures" / PROXY_FIXTURE
        with ref.open("rb") as f:
            state = dict(np.load(f))
        return cls(state)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            norm = torch.sqrt((h * h).sum(dim=-3, keepdim=True) + 1e-10)
            feats.append(h / norm)
        return feats

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise ContractError("proxy inputs must share a shape")
        squeeze = x.dim() == 3
        if squeeze:
            x, y = x.unsqueeze(0), y.unsqueeze(0)
        fx, fy = self.features(x), self.features(y)
        dists = [torch.mean((a - b) ** 2) for a, b in zip(fx, fy)]
        return torch.stack(dists).mean()


_default_proxy: PerceptualProxy | None = None


def perceptual_proxy(x: torch.Tensor, y: torch.Tensor) -> float:
    """Module-level convenience over the shipped fixture weights."""
    global _default_proxy
    if _default_proxy is None:
        _default_proxy = PerceptualProxy.load_default()
    with torch.no_grad():
        return float(_default_proxy(x, y))


@dataclass
class RDCurve:
    points: list  # (bpp, metric) pairs
    metric_name: str = "psnr"
    higher_is_better: bool = True

    def __post_init__(self):
        if len(self.points) < 3:
            raise ContractError("an RD curve needs at least 3 points")
        pts = sorted((float(b), float(m)) for b, m in self.points)
        bpps = [b for b, _ in pts]
        if any(b <= 0 for b in bpps):
            raise ContractError("bpp values must be positive")
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ContractError("duplicate bpp values in RD curve")
        self.points = pts

    @property
    def bpp(self) -> np.ndarray:
        return np.array([b for b, _ in self.points])

    @property
    def metric(self) -> np.ndarray:
        return np.array([m for _, m in self.points])


@dataclass
class BDResult:
    bd_rate_percent: float | None
    bd_metric: float | None
    overlap: tuple  # integration interval (metric axis for rate, log2-rate axis for metric)


def _sorted_axis(x: np.ndarray, y: np.ndarray, strict: bool) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    if strict and np.any(np.diff(xs) <= 0):
        raise ContractError(
            "interpolation axis must be strictly increasing (try method='poly')")
    return xs, ys


def _mean_over_overlap(xa, ya, xb, yb, method: str) -> tuple[float, float, tuple]:
    strict = method == "pchip"  # the polynomial fit tolerates unsorted duplicates
    xa, ya = _sorted_axis(np.asarray(xa, float), np.asarray(ya, float), strict)
    xb, yb = _sorted_axis(np.asarray(xb, float), np.asarray(yb, float), strict)
    lo = max(xa.min(), xb.min())
    hi = min(xa.max(), xb.max())
    if hi <= lo:
        raise NoOverlapError(f"curves do not overlap on [{lo:.4g}, {hi:.4g}]")
    if method == "pchip":
        ia = PchipInterpolator(xa, ya).integrate(lo, hi)
        ib = PchipInterpolator(xb, yb).integrate(lo, hi)
    elif method == "poly":
        pa, pb = np.polyfit(xa, ya, 3), np.polyfit(xb, yb, 3)
        ia = np.polyval(np.polyint(pa), hi) - np.polyval(np.polyint(pa), lo)
        ib = np.polyval(np.polyint(pb), hi) - np.polyval(np.polyint(pb), lo)
    else:
        raise ContractError(f"unknown interpolation method {method!r}")
    return float(ia / (hi - lo)), float(ib / (hi - lo)), (float(lo), float(hi))


def bd_rate(anchor: RDCurve, test: RDCurve, method: str = "pchip") -> BDResult:
    """Average log2-rate gap at equal quality, as a percentage.

    Positive means the test curve spends more bits than the anchor.
    """
    mean_a, mean_t, overlap = _mean_over_overlap(
        anchor.metric, np.log2(anchor.bpp), test.metric, np.log2(test.bpp), method)
    return BDResult(100.0 * (2.0 ** (mean_t - mean_a) - 1.0), None, overlap)


def bd_metric(anchor: RDCurve, test: RDCurve, method: str = "pchip") -> BDResult:
    """Average metric gap at equal rate (test minus anchor)."""
    mean_a, mean_t, overlap = _mean_over_overlap(
        np.log2(anchor.bpp), anchor.metric, np.log2(test.bpp), test.metric, method)
    return BDResult(None, mean_t - mean_a, overlap)


@dataclass
class LatentHistogram:
    symbols: np.ndarray
    counts: np.ndarray
    entropy_bits: float

    def top_mass(self, k: int = 1) -> float:
        total = self.counts.sum()
        if total == 0:
            return 0.0
        return float(np.sort(self.counts)[::-1][:k].sum() / total)


def latent_histogram(latents) -> LatentHistogram:
    """Symbol-frequency histogram over integer latents or token grids."""
    chunks = []
    for item in latents:
        arr = item.detach().numpy() if isinstance(item, torch.Tensor) else np.asarray(item)
        chunks.append(np.rint(arr).astype(np.int64).ravel())
    if not chunks or sum(len(c) for c in chunks) == 0:
        raise ContractError("latent_histogram needs a non-empty sample set")
    flat = np.concatenate(chunks)
    symbols, counts = np.unique(flat, return_counts=True)
    p = counts / counts.sum()
    entropy = float(-(p * np.log2(p)).sum())
    return LatentHistogram(symbols, counts, entropy)


def evaluate_images(bundle, collabs: dict, image_paths, quality_indices,
                    token_mode: str = "fixed") -> list[dict]:
    """Per-image, per-quality metrics for every decode anchor and variant.

    One dual-stream bitstream is produced per (image, quality); every row's
    bpp is computed from those actual bytes, never from a rate surrogate.
    """
    from .bitstream import decode_image, encode_image
    from .tensors import load_image

    proxy = PerceptualProxy.load_default()
    rows = []
    for path in image_paths:
        image = load_image(path)
        for q in quality_indices:
            blob = encode_image(image, q, bundle, token_mode=token_mode)
            h, w = image.shape[-2:]
            bpp = 8.0 * len(blob) / (h * w)
            metrics: dict[str, dict] = {}

            def measure(name: str, recon: torch.Tensor) -> None:
                with torch.no_grad():
                    metrics[name] = {
                        "psnr": psnr(image, recon),
                        "proxy": float(proxy(image, recon)),
                    }

            base = decode_image(blob, "expert-f", bundle)
            measure("expert_f", base)
            measure("expert_p", decode_image(blob, "expert-p", bundle))
            for variant, collab in collabs.items():
                out = decode_image(blob, "both", bundle, collab=collab)
                suffix = "" if variant == "full" else f"@{variant}"
                measure(f"mode_f{suffix}", out["f"])
                measure(f"mode_p{suffix}", out["p"])
            rows.append({
                "image": str(path),
                "quality": int(q),
                "n_bytes": len(blob),
                "bpp": bpp,
                "metrics": metrics,
            })
    return rows


def quality_means(rows: list[dict], decoder: str, metric: str) -> list:
    """Per-quality (mean bpp, mean metric) points for one decode anchor."""
    by_q: dict[int, list] = {}
    for row in rows:
        by_q.setdefault(row["quality"], []).append(
            (row["bpp"], row["metrics"][decoder][metric]))
    points = []
    for q in sorted(by_q):
        vals = by_q[q]
        finite = [m for _, m in vals if math.isfinite(m)]
        points.append((float(np.mean([b for b, _ in vals])), float(np.mean(finite))))
    return points


def rd_curve_from_rows(rows: list[dict], decoder: str, metric: str,
                       higher_is_better: bool) -> RDCurve:
    """Aggregate per-quality means into a validated RD curve."""
    return RDCurve(quality_means(rows, decoder, metric),
                   metric_name=metric, higher_is_better=higher_is_better)


def write_rows(rows: list[dict], path) -> None:
    with open(path, "w") as f:
        json.dump({"rows": rows}, f, indent=1, sort_keys=True)


def read_rows(path) -> list[dict]:
    with open(path) as f:
        return json.load(f)["rows"]
