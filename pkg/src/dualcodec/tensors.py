"""Image tensor helpers: PNG I/O, padding, and seeded RNG plumbing.

Images are torch float32 tensors shaped (3, H, W) with values in [0, 1].
Batched variants are (B, 3, H, W). Spatial dims are padded reflectively to
multiples of 16 before encoding; original dims travel in the bitstream
header and the reconstruction is cropped back.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ContractError

SPATIAL_MULTIPLE = 16


def load_image(path) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path) -> None:
    arr = to_uint8(image)
    Image.fromarray(arr).save(path, format="PNG")


def to_uint8(image: torch.Tensor) -> np.ndarray:
    if image.dim() != 3 or image.shape[0] != 3:
        raise ContractError(f"expected (3, H, W) image, got {tuple(image.shape)}")
    arr = image.detach().clamp(0.0, 1.0).mul(255.0).round().byte()
    return arr.permute(1, 2, 0).contiguous().numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.array(arr, copy=True)).float() / 255.0
    return t.permute(2, 0, 1).contiguous()


def padded_size(n: int, multiple: int = SPATIAL_MULTIPLE) -> int:
    return ((n + multiple - 1) // multiple) * multiple


def pad_to_multiple(image: torch.Tensor, multiple: int = SPATIAL_MULTIPLE) -> torch.Tensor:
    """Reflect-pad the trailing two dims up to the next multiple."""
    h, w = image.shape[-2], image.shape[-1]
    ph, pw = padded_size(h, multiple) - h, padded_size(w, multiple) - w
    if ph == 0 and pw == 0:
        return image
    if h < 2 or w < 2:
        raise ContractError("image too small to reflect-pad")
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x.squeeze(0) if squeeze else x


def crop_to(image: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return image[..., :h, :w]


def check_image_range(image: torch.Tensor, name: str = "image") -> None:
    if image.min() < -1e-6 or image.max() > 1.0 + 1e-6:
        raise ContractError(f"{name} values must lie in [0, 1]")


def generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g
