"""Deterministic procedural image sets for desk-scale experiments.

Each image mixes a smooth gradient base (structure for the fidelity signal),
optional sinusoidal gratings (texture for the perception signal), and a few
soft-edged shape overlays. Content frequency varies widely across the set by
construction; `spectral_highband_ratio` quantifies it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError
from .tensors import from_uint8


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    if rng.random() < 0.5:
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * xx + np.sin(theta) * yy + 1) / 2
    else:
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        t = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        t = t / max(t.max(), 1e-6)
    c0, c1 = rng.uniform(0, 1, size=(2, 3))
    return t[..., None] * c1 + (1 - t[..., None]) * c0


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Localized gratings with amplitude falling off in frequency, so most
    texture energy stays encodable at a 16x-downsampled bottleneck."""
    level = rng.choice([0.0, 0.5, 1.0], p=[0.3, 0.35, 0.35])
    if level == 0.0:
        return np.zeros((size, size, 3))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    tex = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        freq = rng.uniform(0.02, 0.4)
        amp = 0.25 * (0.04 / freq) ** 0.8
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        cy, cx = rng.uniform(0, size, size=2)
        radius = rng.uniform(0.3, 0.9) * size
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
        tex += amp * wave * blob
    weights = rng.uniform(0.5, 1.0, size=3)
    return level * tex[..., None] * weights


def _shapes(rng: np.random.Generator, size: int, img: np.ndarray) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for _ in range(rng.integers(0, 5)):
        color = rng.uniform(0, 1, size=3)
        alpha = rng.uniform(0.5, 1.0)
        cy, cx = rng.uniform(0.1, 0.9, size=2) * size
        extent = rng.uniform(0.08, 0.3) * size
        soft = rng.uniform(0.5, 3.0)
        if rng.random() < 0.5:
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) - extent
        else:
            dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) - extent
        mask = alpha / (1.0 + np.exp(dist / soft))
        img = img * (1 - mask[..., None]) + color * mask[..., None]
    return img


def generate_image(seed: int, index: int, size: int) -> np.ndarray:
    """One deterministic (size, size, 3) uint8 image."""
    rng = np.random.default_rng([seed, index])
    img = _gradient(rng, size)
    img = img + _texture(rng, size)
    img = _shapes(rng, size, img)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def synth_dataset(seed: int, count: int, size: int, out_dir) -> list[Path]:
    """Write `count` procedural PNGs; byte-identical for identical arguments."""
    if size % 16 != 0:
        raise ConfigError("dataset.size: must be a multiple of 16")
    if count < 0:
        raise ConfigError("dataset.count: must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = out / f"img_{i:05d}.png"
        Image.fromarray(generate_image(seed, i, size)).save(path, format="PNG")
        paths.append(path)
    return paths


def load_folder(folder) -> tuple[torch.Tensor, list[Path]]:
    """Stack every PNG in a folder into an (N, 3, H, W) float tensor."""
    folder = Path(folder)
    paths = sorted(folder.glob("*.png"))
    if not paths:
        raise ConfigError(f"dataset: no .png files in {folder}")
    arrays = [np.asarray(Image.open(p).convert("RGB")) for p in paths]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ConfigError(f"dataset: mixed image shapes in {folder}: {shapes}")
    stack = torch.stack([from_uint8(a) for a in arrays])
    return stack, paths


def spectral_highband_ratio(image: torch.Tensor, cutoff: float = 1.0 / 64.0) -> float:
    """Fraction of spectral energy above `cutoff` cycles/pixel (DC included
    in the denominator, so smooth content scores near zero)."""
    gray = image.float().mean(dim=-3).numpy()
    spec = np.abs(np.fft.fft2(gray)) ** 2
    fy = np.fft.fftfreq(gray.shape[0])[:, None]
    fx = np.fft.fftfreq(gray.shape[1])[None, :]
    r = np.sqrt(fy ** 2 + fx ** 2)
    total = spec.sum()
    if total == 0:
        return 0.0
    return float(spec[r > cutoff].sum() / total)
