import numpy as np
import pytest
import torch

from dualcodec.bitstream import CodecBundle
from dualcodec.checkpoint import module_digest
from dualcodec.collab import CollaborativeDecoder, ModeConfig
from dualcodec.data import load_folder, synth_dataset
from dualcodec.metrics import PerceptualProxy
from dualcodec.sq import SqConfig
from dualcodec.training import (PretrainParams, pretrain_sq_expert,
                                pretrain_vq_expert)
from dualcodec.vq import VqConfig

torch.set_num_threads(1)

# Small-but-real models shared by the whole suite; trained once per session.
TINY_LC = (12, 12, 8, 8)
TINY_SQ = dict(latent_channels=8, base_channels=12, level_channels=TINY_LC)
TINY_VQ = dict(embed_dim=8, base_channels=12, level_channels=TINY_LC, codebook_size=32)


@pytest.fixture(scope="session")
def proxy():
    return PerceptualProxy.load_default()


@pytest.fixture(scope="session")
def tiny_images(tmp_path_factory):
    folder = tmp_path_factory.mktemp("ds")
    synth_dataset(seed=5, count=16, size=64, out_dir=folder)
    images, _ = load_folder(folder)
    return images


@pytest.fixture(scope="session")
def tiny_sq(tiny_images):
    cfg = SqConfig(**TINY_SQ, lambda_rd=0.01, quality_index=0)
    return pretrain_sq_expert(tiny_images, cfg, PretrainParams(steps=300, batch_size=4, seed=3))


@pytest.fixture(scope="session")
def tiny_vq(tiny_images, proxy):
    cfg = VqConfig(**TINY_VQ)
    return pretrain_vq_expert(tiny_images, cfg, PretrainParams(steps=300, batch_size=4, seed=4),
                              proxy=proxy)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_sq, tiny_vq):
    return CodecBundle({0: tiny_sq}, {0: tiny_sq.prior()}, tiny_vq,
                       {0: module_digest(tiny_sq)}, module_digest(tiny_vq))


@pytest.fixture()
def tiny_collab():
    torch.manual_seed(11)
    return CollaborativeDecoder(ModeConfig(4, TINY_LC, TINY_LC))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
