import math
from pathlib import Path

import numpy as np
import pytest
import torch

from dualcodec.errors import ContractError
from dualcodec.vq import (VqConfig, VqModel, codebook_quantize,
                          straight_through, token_rate)


class TestCodebookQuantize:
    def test_nearest_neighbor(self):
        cb = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
        feat = torch.tensor([0.9, 0.8]).view(2, 1, 1)
        tokens, quant = codebook_quantize(feat, cb)
        assert tokens.item() == 1
        assert torch.equal(quant.view(2), cb[1])

    def test_tie_breaks_to_lowest_index(self):
        cb = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
        feat = torch.tensor([0.5, 0.5]).view(2, 1, 1)
        tokens, _ = codebook_quantize(feat, cb)
        assert tokens.item() == 0

    def test_matches_brute_force_oracle(self, rng):
        cb = torch.tensor(rng.normal(size=(16, 4)), dtype=torch.float32)
        feat = torch.tensor(rng.normal(size=(4, 6, 7)), dtype=torch.float32)
        tokens, quant = codebook_quantize(feat, cb)
        cb64 = cb.double().numpy()
        for i in range(6):
            for j in range(7):
                v = feat[:, i, j].double().numpy()
                dists = [float(((v - row) ** 2).sum()) for row in cb64]
                expect = int(np.argmin(dists))
                assert tokens[i, j].item() == expect
                assert torch.equal(quant[:, i, j], cb[expect])

    def test_idempotent_on_quantized_features(self, rng):
        cb = torch.tensor(rng.normal(size=(8, 3)), dtype=torch.float32)
        feat = torch.tensor(rng.normal(size=(3, 4, 4)), dtype=torch.float32)
        tokens, quant = codebook_quantize(feat, cb)
        tokens2, quant2 = codebook_quantize(quant, cb)
        assert torch.equal(tokens, tokens2)
        assert torch.equal(quant, quant2)

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            codebook_quantize(torch.zeros(3, 2, 2), torch.zeros(4, 5))


class TestStraightThrough:
    def test_forward_equals_quantized(self):
        cont = torch.randn(2, 3, 3)
        quant = torch.randn(2, 3, 3)
        assert torch.equal(straight_through(cont, quant), quant)

    def test_gradient_is_identity(self):
        cont = torch.randn(2, 3, 3, requires_grad=True)
        quant = torch.randn(2, 3, 3)
        straight_through(cont, quant).sum().backward()
        assert torch.equal(cont.grad, torch.ones_like(cont))

    def test_finite_difference_gradient(self):
        # central differences on the surrogate: stop-gradient terms are held
        # at their unperturbed values (the quantizer itself is flat)
        torch.manual_seed(0)
        cont = torch.randn(2, 2, 2, dtype=torch.float64, requires_grad=True)
        quant = torch.randn(2, 2, 2, dtype=torch.float64)
        w = torch.randn(2, 2, 2, dtype=torch.float64)
        (straight_through(cont, quant) * w).sum().backward()
        frozen = quant - cont.detach()  # value of the detached constants
        eps = 1e-5
        for idx in np.ndindex(2, 2, 2):
            c = cont.detach().clone()
            c[idx] += eps
            up = ((frozen + c) * w).sum()
            c[idx] -= 2 * eps
            dn = ((frozen + c) * w).sum()
            fd = (up - dn) / (2 * eps)
            assert abs(fd - cont.grad[idx]) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            straight_through(torch.zeros(2, 2), torch.zeros(3, 2))


class TestTokenRate:
    def test_fixed_mode_1024(self):
        tokens = torch.zeros(4, 4, dtype=torch.long)
        assert token_rate(tokens, 1024, "fixed") == 160.0

    def test_fixed_mode_small_codebook(self):
        tokens = torch.zeros(4, 4, dtype=torch.long)
        assert token_rate(tokens, 8, "fixed") == 48.0

    def test_entropy_beats_fixed_on_skewed_histogram(self, rng):
        tokens = torch.tensor(
            rng.choice(64, size=(16, 16), p=np.r_[0.92, np.full(63, 0.08 / 63)]))
        assert token_rate(tokens, 64, "entropy") <= token_rate(tokens, 64, "fixed")

    def test_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            token_rate(torch.tensor([[99]]), 8, "fixed")


class TestVqModel:
    def test_shape_contract(self, tiny_vq):
        feat = tiny_vq.encode(torch.rand(3, 64, 64))
        assert feat.shape == (8, 4, 4)

    def test_determinism(self, tiny_vq):
        img = torch.rand(3, 64, 64)
        assert torch.equal(tiny_vq.encode(img), tiny_vq.encode(img.clone()))

    def test_matches_declared_layer_composition(self, tiny_vq):
        img = torch.rand(1, 3, 64, 64)
        manual = img
        for layer in tiny_vq.encoder.stages:
            manual = layer(manual)
        assert torch.equal(tiny_vq.encode(img), manual)

    def test_level_split_equals_monolithic(self, tiny_vq):
        torch.manual_seed(2)
        for _ in range(10):
            tokens = torch.randint(0, 32, (4, 4))
            feat = tiny_vq.embed(tokens).unsqueeze(0)
            h = feat
            for i in range(4):
                h = tiny_vq.decoder.upsample_level(i, tiny_vq.decoder.decode_level(i, h))
            assert torch.equal(tiny_vq.decoder.output_head(h), tiny_vq.decoder(feat))

    def test_embed_matches_quantize(self, tiny_vq):
        feat = tiny_vq.encode(torch.rand(3, 64, 64))
        tokens, quant = tiny_vq.quantize(feat)
        assert torch.equal(tiny_vq.embed(tokens), quant)
        assert tokens.min() >= 0 and tokens.max() < tiny_vq.config.codebook_size

    def test_token_validity_and_quantized_rows(self, tiny_vq, rng):
        feat = torch.tensor(rng.normal(size=(8, 4, 4)), dtype=torch.float32)
        tokens, quant = tiny_vq.quantize(feat)
        for i in range(4):
            for j in range(4):
                assert torch.equal(quant[:, i, j], tiny_vq.codebook[tokens[i, j]])

    def test_pretraining_improves_reconstruction(self, tiny_vq, tiny_images):
        # the gray-baseline comparison runs on the full-size expert in the
        # acceptance suite; the tiny fixture only shows training progress
        torch.manual_seed(0)
        untrained = VqModel(VqConfig(embed_dim=8, base_channels=12,
                                     level_channels=(12, 12, 8, 8), codebook_size=32))
        x = tiny_images[:8]

        def recon_mse(model):
            with torch.no_grad():
                _, quant = model.quantize(model.encode(x))
                recon = model.decode(quant).clamp(0, 1)
            return float(torch.mean((recon - x) ** 2))

        assert recon_mse(tiny_vq) < 0.5 * recon_mse(untrained)


def test_fixed_rate_formula_matches_width():
    for n_cb in (2, 8, 1024, 4096):
        tokens = torch.zeros(3, 5, dtype=torch.long)
        assert token_rate(tokens, n_cb, "fixed") == 15 * math.ceil(math.log2(n_cb))


@pytest.mark.skipif(not Path("artifacts/experts/vq.pt").exists(),
                    reason="full-recipe artifacts not present")
def test_full_size_expert_beats_gray_baseline():
    from dualcodec.artifacts import load_vq_expert
    from dualcodec.data import synth_dataset, load_folder
    synth_dataset(seed=99, count=64, size=64, out_dir="artifacts/heldout")
    images, _ = load_folder("artifacts/heldout")
    vq, _ = load_vq_expert("artifacts/experts/vq.pt")
    with torch.no_grad():
        _, quant = vq.quantize(vq.encode(images))
        recon = vq.decode(quant).clamp(0, 1)
    gray = torch.full_like(images, 0.5)
    assert torch.mean((recon - images) ** 2) < torch.mean((gray - images) ** 2)
