import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcodec.bitstream import (HEADER_SIZE, StreamMeta,
                                 bits_per_pixel, decode_image,
                                 decode_token_payload, encode_image,
                                 encode_token_payload, pack, pack_bits,
                                 unpack, unpack_bits, unpack_header)
from dualcodec.errors import (BadMagicError, ConfigError, ContractError,
                              DigestMismatchError, FormatError,
                              TruncatedStreamError, VersionMismatchError)


def make_meta(bundle, h=64, w=64, token_mode="fixed"):
    return StreamMeta(h, w, 0, bundle.vq_model.config.codebook_size, token_mode,
                      bundle.sq_digests[0], bundle.vq_digest)


class TestBitPacking:
    @given(st.integers(min_value=1, max_value=16),
           st.lists(st.integers(min_value=0, max_value=2 ** 16 - 1), max_size=100))
    @settings(max_examples=150, deadline=None)
    def test_round_trip(self, width, values):
        values = np.array([v & ((1 << width) - 1) for v in values], dtype=np.int64)
        packed = pack_bits(values, width)
        assert np.array_equal(unpack_bits(packed, width, len(values)), values)

    def test_truncated(self):
        with pytest.raises(TruncatedStreamError):
            unpack_bits(b"\x00", 10, 4)


class TestTokenPayload:
    def test_fixed_round_trip(self, rng):
        tokens = torch.tensor(rng.integers(0, 1024, size=(4, 4)))
        data = encode_token_payload(tokens, 1024, "fixed")
        assert len(data) == (16 * 10 + 7) // 8
        back = decode_token_payload(data, 16, 1024, "fixed")
        assert np.array_equal(back, tokens.reshape(-1).numpy())

    def test_entropy_round_trip(self, rng):
        tokens = torch.tensor(rng.choice(512, size=(8, 8), p=_skew(512)))
        data = encode_token_payload(tokens, 512, "entropy")
        back = decode_token_payload(data, 64, 512, "entropy")
        assert np.array_equal(back, tokens.reshape(-1).numpy())

    def test_single_symbol_grid(self):
        tokens = torch.full((4, 4), 7, dtype=torch.long)
        data = encode_token_payload(tokens, 64, "entropy")
        assert len(data) == 2 + 4  # count field + one (symbol, count) pair
        back = decode_token_payload(data, 16, 64, "entropy")
        assert np.all(back == 7)

    def test_empty_grid(self):
        tokens = torch.zeros(0, dtype=torch.long)
        for mode in ("fixed", "entropy"):
            data = encode_token_payload(tokens, 64, mode)
            assert decode_token_payload(data, 0, 64, mode).size == 0

    def test_out_of_range_tokens_rejected(self):
        with pytest.raises(ContractError):
            encode_token_payload(torch.tensor([[2000]]), 1024, "fixed")


def _skew(n):
    p = np.full(n, 0.2 / (n - 1))
    p[3] = 0.8
    return p


class TestContainer:
    def test_pack_unpack_identity(self, tiny_bundle, rng):
        prior = tiny_bundle.priors[0]
        latent = torch.tensor(
            rng.integers(prior.s_min + 1, prior.s_max, size=(8, 4, 4)),
            dtype=torch.float32)
        tokens = torch.tensor(rng.integers(0, 32, size=(4, 4)))
        for token_mode in ("fixed", "entropy"):
            meta = make_meta(tiny_bundle, token_mode=token_mode)
            blob = pack(latent, tokens, meta, prior)
            latent2, tokens2, meta2 = unpack(blob, prior)
            assert torch.equal(latent, latent2)
            assert torch.equal(tokens, tokens2.to(tokens.dtype))
            assert meta2.orig_h == 64 and meta2.token_mode == token_mode

    def test_total_bits_accounting(self, tiny_bundle, rng):
        prior = tiny_bundle.priors[0]
        latent = torch.zeros(8, 4, 4)
        tokens = torch.zeros(4, 4, dtype=torch.long)
        blob = pack(latent, tokens, make_meta(tiny_bundle), prior)
        meta, sq_payload, vq_payload = unpack_header(blob)
        assert len(blob) == HEADER_SIZE + len(sq_payload) + len(vq_payload)
        assert bits_per_pixel(len(blob), 64, 64) == 8 * len(blob) / 4096

    def test_bad_magic(self, tiny_bundle):
        blob = bytearray(pack(torch.zeros(8, 4, 4), torch.zeros(4, 4, dtype=torch.long),
                              make_meta(tiny_bundle), tiny_bundle.priors[0]))
        blob[0] = ord("X")
        with pytest.raises(BadMagicError):
            unpack_header(bytes(blob))

    def test_version_mismatch(self, tiny_bundle):
        blob = bytearray(pack(torch.zeros(8, 4, 4), torch.zeros(4, 4, dtype=torch.long),
                              make_meta(tiny_bundle), tiny_bundle.priors[0]))
        blob[4] = 99
        with pytest.raises(VersionMismatchError):
            unpack_header(bytes(blob))

    def test_truncation(self, tiny_bundle):
        blob = pack(torch.zeros(8, 4, 4), torch.zeros(4, 4, dtype=torch.long),
                    make_meta(tiny_bundle), tiny_bundle.priors[0])
        with pytest.raises(TruncatedStreamError):
            unpack_header(blob[: HEADER_SIZE - 1])
        with pytest.raises(TruncatedStreamError):
            unpack_header(blob[:-1])

    def test_dims_exceeding_u16(self, tiny_bundle):
        meta = make_meta(tiny_bundle, h=70000, w=64)
        with pytest.raises(FormatError):
            pack(torch.zeros(8, 4, 4), torch.zeros(4, 4, dtype=torch.long),
                 meta, tiny_bundle.priors[0])

    def test_out_of_range_symbols_clamped(self, tiny_bundle):
        prior = tiny_bundle.priors[0]
        latent = torch.full((8, 4, 4), float(prior.s_max + 500))
        blob = pack(latent, torch.zeros(4, 4, dtype=torch.long),
                    make_meta(tiny_bundle), prior)
        latent2, _, _ = unpack(blob, prior)
        assert torch.all(latent2 == prior.s_max)


class TestEndToEnd:
    def test_bpp_equals_file_size_oracle(self, tiny_bundle, tmp_path):
        img = torch.rand(3, 64, 64)
        blob = encode_image(img, 0, tiny_bundle)
        path = tmp_path / "x.mode"
        path.write_bytes(blob)
        assert bits_per_pixel(len(blob), 64, 64) == path.stat().st_size * 8 / 4096

    def test_one_bitstream_serves_all_anchors(self, tiny_bundle, tiny_collab):
        img = torch.rand(3, 64, 64)
        blob = encode_image(img, 0, tiny_bundle)
        rf = decode_image(blob, "expert-f", tiny_bundle)
        rp = decode_image(blob, "expert-p", tiny_bundle)
        both = decode_image(blob, "both", tiny_bundle, collab=tiny_collab)
        assert rf.shape == rp.shape == both["f"].shape == (3, 64, 64)

    def test_decode_is_deterministic(self, tiny_bundle):
        img = torch.rand(3, 64, 64)
        blob = encode_image(img, 0, tiny_bundle)
        assert torch.equal(decode_image(blob, "expert-f", tiny_bundle),
                           decode_image(blob, "expert-f", tiny_bundle))

    def test_odd_dims_round_trip(self, tiny_bundle):
        img = torch.rand(3, 70, 50)
        blob = encode_image(img, 0, tiny_bundle)
        recon = decode_image(blob, "expert-f", tiny_bundle)
        assert recon.shape == (3, 70, 50)

    def test_unknown_quality_rejected(self, tiny_bundle):
        with pytest.raises(ConfigError):
            encode_image(torch.rand(3, 64, 64), 9, tiny_bundle)

    def test_digest_mismatch_is_hard_error(self, tiny_bundle):
        img = torch.rand(3, 64, 64)
        blob = bytearray(encode_image(img, 0, tiny_bundle))
        blob[12] ^= 0xFF  # first byte of the fidelity expert digest
        with pytest.raises(DigestMismatchError):
            decode_image(bytes(blob), "expert-f", tiny_bundle)

    def test_collab_required_for_modulated_anchors(self, tiny_bundle):
        blob = encode_image(torch.rand(3, 64, 64), 0, tiny_bundle)
        with pytest.raises(ContractError):
            decode_image(blob, "f", tiny_bundle)

    def test_image_range_checked(self, tiny_bundle):
        with pytest.raises(ContractError):
            encode_image(torch.rand(3, 64, 64) * 2.0, 0, tiny_bundle)
