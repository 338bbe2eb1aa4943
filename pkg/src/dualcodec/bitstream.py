"""The unified dual-stream container: header + SQ payload + VQ payload.

One `.mode` byte string carries everything any decode anchor needs, and the
reported bpp is 8 * len(bytes) / (orig_h * orig_w) — headers included. All
header integers are little-endian. Layout (version 1):

    offset  field
    0       magic  b"MODE"
    4       version            u8
    5       orig_h, orig_w     u16 x 2
    9       quality_index      u8
    10      codebook_size_log2 u8
    11      token_mode         u8   (0 = fixed-width, 1 = entropy-coded)
    12      sq_digest          8 bytes (truncated expert digest)
    20      vq_digest          8 bytes
    28      sq_len, vq_len     u32 x 2
    36      sq_payload, then vq_payload

The entropy token payload embeds its own static frequency table:
u16 unique-symbol count, then (u16 symbol, u16 clamped count) pairs, then
the range-coded local indices.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import native, rangecoder
from .errors import (BadMagicError, ConfigError, ContractError,
                     DigestMismatchError, FormatError, TruncatedStreamError,
                     VersionMismatchError)
from .rangecoder import CodedSymbols, pmf_to_quantized_cdf
from .sq import DOWNSCALE, FactorizedPrior, SqModel, round_half_away
from .tensors import check_image_range, crop_to, padded_size
from .vq import VqModel

MAGIC = b"MODE"
VERSION = 1
_HEADER_FMT = "<4sBHHBBB8s8sII"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

TOKEN_MODE_FIXED = "fixed"
TOKEN_MODE_ENTROPY = "entropy"
_TOKEN_MODES = {TOKEN_MODE_FIXED: 0, TOKEN_MODE_ENTROPY: 1}
_TOKEN_MODE_NAMES = {v: k for k, v in _TOKEN_MODES.items()}

ANCHORS = ("f", "p", "both", "expert-f", "expert-p")


def use_native() -> bool:
    return native.available()


def encode_bins(coded: CodedSymbols, cdfs) -> bytes:
    if use_native():
        return native.range_encode(coded, cdfs)
    return rangecoder.range_encode(coded, cdfs)


def decode_bins(data: bytes, cdfs, cdf_ids) -> CodedSymbols:
    if use_native():
        return native.range_decode(data, cdfs, cdf_ids)
    return rangecoder.range_decode(data, cdfs, cdf_ids)


@dataclass
class StreamMeta:
    orig_h: int
    orig_w: int
    quality_index: int
    codebook_size: int
    token_mode: str
    sq_digest: str  # full hex digests; truncated to 8 bytes on the wire
    vq_digest: str

    @property
    def latent_hw(self) -> tuple[int, int]:
        return padded_size(self.orig_h) // DOWNSCALE, padded_size(self.orig_w) // DOWNSCALE


def _digest8(hexdigest: str) -> bytes:
    return bytes.fromhex(hexdigest)[:8]


def pack_bits(values: np.ndarray, width: int) -> bytes:
    """MSB-first fixed-width bit packing."""
    out = bytearray()
    acc = 0
    nbits = 0
    for v in values.tolist():
        acc = (acc << width) | int(v)
        nbits += width
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return bytes(out)


def unpack_bits(data: bytes, width: int, count: int) -> np.ndarray:
    need = (width * count + 7) // 8
    if len(data) < need:
        raise TruncatedStreamError("fixed-width token payload too short", len(data))
    out = np.empty(count, dtype=np.int64)
    acc = 0
    nbits = 0
    pos = 0
    for i in range(count):
        while nbits < width:
            acc = (acc << 8) | data[pos]
            pos += 1
            nbits += 8
        nbits -= width
        out[i] = (acc >> nbits) & ((1 << width) - 1)
    return out


def encode_token_payload(tokens: torch.Tensor, codebook_size: int, mode: str) -> bytes:
    flat = np.asarray(tokens.detach().reshape(-1).numpy(), dtype=np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= codebook_size):
        raise ContractError("token indices outside codebook range")
    if mode == TOKEN_MODE_FIXED:
        width = max(1, math.ceil(math.log2(codebook_size)))
        return pack_bits(flat, width)
    if mode == TOKEN_MODE_ENTROPY:
        symbols, counts = np.unique(flat, return_counts=True)
        counts16 = np.minimum(counts, 0xFFFF)
        head = struct.pack("<H", len(symbols))
        head += b"".join(struct.pack("<HH", int(s), int(c))
                         for s, c in zip(symbols, counts16))
        if len(symbols) == 0:
            return head
        if len(symbols) == 1:
            return head  # single-symbol grids need no coded body
        cdf = pmf_to_quantized_cdf(counts16.astype(np.float64))
        local = np.searchsorted(symbols, flat)
        coded = encode_bins(CodedSymbols(local, np.zeros(len(flat), dtype=np.int64)), [cdf])
        return head + coded
    raise ContractError(f"unknown token mode {mode!r}")


def decode_token_payload(data: bytes, count: int, codebook_size: int, mode: str) -> np.ndarray:
    if mode == TOKEN_MODE_FIXED:
        width = max(1, math.ceil(math.log2(codebook_size)))
        return unpack_bits(data, width, count)
    if mode == TOKEN_MODE_ENTROPY:
        if len(data) < 2:
            raise TruncatedStreamError("entropy token payload too short", len(data))
        (n_unique,) = struct.unpack_from("<H", data, 0)
        off = 2
        if len(data) < off + 4 * n_unique:
            raise TruncatedStreamError("entropy token table truncated", len(data))
        symbols = np.empty(n_unique, dtype=np.int64)
        counts = np.empty(n_unique, dtype=np.int64)
        for i in range(n_unique):
            symbols[i], counts[i] = struct.unpack_from("<HH", data, off)
            off += 4
        if count == 0:
            return np.zeros(0, dtype=np.int64)
        if n_unique == 0:
            raise FormatError("entropy token payload has empty frequency table")
        if n_unique == 1:
            return np.full(count, symbols[0], dtype=np.int64)
        cdf = pmf_to_quantized_cdf(counts.astype(np.float64))
        coded = decode_bins(data[off:], [cdf], np.zeros(count, dtype=np.int64))
        return symbols[coded.symbols]
    raise ContractError(f"unknown token mode {mode!r}")


def pack(latent_q: torch.Tensor, tokens: torch.Tensor, meta: StreamMeta,
         prior: FactorizedPrior) -> bytes:
    """Serialize one encode pass into the dual-stream container."""
    if meta.orig_h > 0xFFFF or meta.orig_w > 0xFFFF:
        raise FormatError("image dimensions exceed the u16 header fields")
    if meta.token_mode not in _TOKEN_MODES:
        raise ContractError(f"unknown token mode {meta.token_mode!r}")
    symbols = round_half_away(latent_q.detach()).to(torch.int64).numpy()
    if symbols.ndim != 3:
        raise ContractError("latent must be (C, h, w)")
    symbols = prior.clamp_symbols(symbols)
    c = symbols.shape[0]
    bins = (symbols - prior.s_min).reshape(c, -1)
    ids = np.repeat(np.arange(c, dtype=np.int64), bins.shape[1])
    sq_payload = encode_bins(CodedSymbols(bins.reshape(-1), ids), prior.tables())
    vq_payload = encode_token_payload(tokens, meta.codebook_size, meta.token_mode)
    header = struct.pack(
        _HEADER_FMT, MAGIC, VERSION, meta.orig_h, meta.orig_w,
        meta.quality_index, int(round(math.log2(meta.codebook_size))),
        _TOKEN_MODES[meta.token_mode], _digest8(meta.sq_digest),
        _digest8(meta.vq_digest), len(sq_payload), len(vq_payload))
    return header + sq_payload + vq_payload


def unpack_header(data: bytes) -> tuple[StreamMeta, bytes, bytes]:
    if len(data) < HEADER_SIZE:
        raise TruncatedStreamError("bitstream shorter than its header", len(data))
    (magic, version, orig_h, orig_w, quality_index, cb_log2, token_mode,
     sq_d8, vq_d8, sq_len, vq_len) = struct.unpack_from(_HEADER_FMT, data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"bitstream version {version}, expected {VERSION}")
    if token_mode not in _TOKEN_MODE_NAMES:
        raise FormatError(f"unknown token mode id {token_mode}")
    if len(data) != HEADER_SIZE + sq_len + vq_len:
        raise TruncatedStreamError(
            f"payload length mismatch: header says {HEADER_SIZE + sq_len + vq_len}",
            len(data))
    meta = StreamMeta(orig_h, orig_w, quality_index, 1 << cb_log2,
                      _TOKEN_MODE_NAMES[token_mode],
                      sq_d8.hex(), vq_d8.hex())
    sq_payload = data[HEADER_SIZE:HEADER_SIZE + sq_len]
    vq_payload = data[HEADER_SIZE + sq_len:]
    return meta, sq_payload, vq_payload


def unpack(data: bytes, prior: FactorizedPrior) -> tuple[torch.Tensor, torch.Tensor, StreamMeta]:
    """Exact inverse of pack, given the same quality point's prior."""
    meta, sq_payload, vq_payload = unpack_header(data)
    h, w = meta.latent_hw
    c = prior.channels
    ids = np.repeat(np.arange(c, dtype=np.int64), h * w)
    coded = decode_bins(sq_payload, prior.tables(), ids)
    symbols = coded.symbols.reshape(c, h, w) + prior.s_min
    latent = torch.from_numpy(symbols.astype(np.float32))
    tokens_flat = decode_token_payload(vq_payload, h * w, meta.codebook_size, meta.token_mode)
    tokens = torch.from_numpy(tokens_flat.reshape(h, w))
    return latent, tokens, meta


def bits_per_pixel(n_bytes: int, orig_h: int, orig_w: int) -> float:
    return 8.0 * n_bytes / (orig_h * orig_w)


@dataclass
class CodecBundle:
    """Loaded frozen experts for every quality point, plus their digests."""

    sq_models: dict       # quality_index -> SqModel (frozen)
    priors: dict          # quality_index -> FactorizedPrior
    vq_model: VqModel
    sq_digests: dict      # quality_index -> full hex digest
    vq_digest: str

    def sq(self, quality_index: int) -> SqModel:
        if quality_index not in self.sq_models:
            raise ConfigError(
                f"quality_index {quality_index} not loaded "
                f"(have {sorted(self.sq_models)})")
        return self.sq_models[quality_index]

    def prior(self, quality_index: int) -> FactorizedPrior:
        if quality_index not in self.priors:
            raise ConfigError(f"no prior for quality_index {quality_index}")
        return self.priors[quality_index]


def encode_image(image: torch.Tensor, quality_index: int, bundle: CodecBundle,
                 token_mode: str = TOKEN_MODE_FIXED) -> bytes:
    """Image -> dual-stream bytes serving every decode anchor."""
    check_image_range(image)
    sq_model = bundle.sq(quality_index)
    prior = bundle.prior(quality_index)
    with torch.no_grad():
        latent_q = round_half_away(sq_model.encode(image))
        feat = bundle.vq_model.encode(image)
        tokens, _ = bundle.vq_model.quantize(feat)
    meta = StreamMeta(
        orig_h=image.shape[-2], orig_w=image.shape[-1],
        quality_index=quality_index,
        codebook_size=bundle.vq_model.config.codebook_size,
        token_mode=token_mode,
        sq_digest=bundle.sq_digests[quality_index],
        vq_digest=bundle.vq_digest)
    return pack(latent_q, tokens, meta, prior)


def decode_image(data: bytes, anchor: str, bundle: CodecBundle, collab=None):
    """Decode one anchor (or both modulation anchors) from the dual stream.

    anchor: "expert-f" | "expert-p" for the raw frozen experts,
    "f" | "p" | "both" for the collaboration outputs (requires `collab`).
    Returns a (3, H, W) tensor, or a {"f", "p"} dict for "both".
    """
    if anchor not in ANCHORS:
        raise ContractError(f"anchor must be one of {ANCHORS}, got {anchor!r}")
    meta, _, _ = unpack_header(data)
    q = meta.quality_index
    sq_model = bundle.sq(q)
    prior = bundle.prior(q)
    if meta.sq_digest != bundle.sq_digests[q][:16]:
        raise DigestMismatchError(
            "bitstream was produced with a different fidelity expert")
    if meta.vq_digest != bundle.vq_digest[:16]:
        raise DigestMismatchError(
            "bitstream was produced with a different perception expert")
    latent, tokens, meta = unpack(data, prior)
    with torch.no_grad():
        if anchor == "expert-f":
            recon = sq_model.decode(latent).clamp(0.0, 1.0)
            return crop_to(recon, meta.orig_h, meta.orig_w)
        feat = bundle.vq_model.embed(tokens)
        if anchor == "expert-p":
            recon = bundle.vq_model.decode(feat).clamp(0.0, 1.0)
            return crop_to(recon, meta.orig_h, meta.orig_w)
        if collab is None:
            raise ContractError(f"anchor {anchor!r} needs a collaboration checkpoint")
        out = collab(sq_model.decoder, bundle.vq_model.decoder,
                     latent.unsqueeze(0), feat.unsqueeze(0),
                     anchor_mode="both" if anchor == "both" else anchor)
    recons = {b: crop_to(r.squeeze(0), meta.orig_h, meta.orig_w)
              for b, r in out.recon.items()}
    if anchor == "both":
        return recons
    return recons[anchor]
