import numpy as np
import pytest
import torch

from dualcodec.config import ExperimentConfig, load_config, validate
from dualcodec.data import (generate_image, load_folder, spectral_highband_ratio,
                            synth_dataset)
from dualcodec.errors import ConfigError


class TestSynthDataset:
    def test_same_seed_byte_identical(self, tmp_path):
        a = synth_dataset(seed=3, count=4, size=64, out_dir=tmp_path / "a")
        b = synth_dataset(seed=3, count=4, size=64, out_dir=tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a = synth_dataset(seed=3, count=1, size=64, out_dir=tmp_path / "a")
        b = synth_dataset(seed=4, count=1, size=64, out_dir=tmp_path / "b")
        assert a[0].read_bytes() != b[0].read_bytes()

    def test_count_zero_gives_empty_folder_and_clear_error(self, tmp_path):
        paths = synth_dataset(seed=3, count=0, size=64, out_dir=tmp_path / "e")
        assert paths == []
        with pytest.raises(ConfigError, match="no .png files"):
            load_folder(tmp_path / "e")

    def test_size_must_be_multiple_of_16(self, tmp_path):
        with pytest.raises(ConfigError):
            synth_dataset(seed=3, count=1, size=60, out_dir=tmp_path / "x")

    def test_spectral_content_varies_5x(self, tmp_path):
        synth_dataset(seed=11, count=32, size=64, out_dir=tmp_path / "s")
        images, _ = load_folder(tmp_path / "s")
        ratios = [spectral_highband_ratio(img) for img in images]
        assert max(ratios) / max(min(ratios), 1e-12) >= 5.0

    def test_generate_image_shape_and_range(self):
        img = generate_image(seed=1, index=0, size=64)
        assert img.shape == (64, 64, 3) and img.dtype == np.uint8


class TestLoadFolder:
    def test_stacks_sorted(self, tmp_path):
        synth_dataset(seed=5, count=3, size=64, out_dir=tmp_path)
        images, paths = load_folder(tmp_path)
        assert images.shape == (3, 3, 64, 64)
        assert [p.name for p in paths] == sorted(p.name for p in paths)
        assert images.min() >= 0 and images.max() <= 1

    def test_mixed_shapes_rejected(self, tmp_path):
        synth_dataset(seed=5, count=1, size=64, out_dir=tmp_path)
        synth_dataset(seed=5, count=1, size=32, out_dir=tmp_path / "sub")
        (tmp_path / "other.png").write_bytes((tmp_path / "sub" / "img_00000.png").read_bytes())
        with pytest.raises(ConfigError, match="mixed image shapes"):
            load_folder(tmp_path)


class TestConfig:
    def test_defaults_validate(self):
        validate(ExperimentConfig())

    def test_yaml_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        path = tmp_path / "c.yaml"
        path.write_text(cfg.to_yaml())
        loaded = load_config(path)
        assert loaded.to_dict() == cfg.to_dict()

    def test_unknown_key_names_field_path(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("sq:\n  bogus_field: 3\n")
        with pytest.raises(ConfigError, match="sq.bogus_field"):
            load_config(path)

    def test_invalid_values_name_field_path(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("dataset:\n  size: 60\n")
        with pytest.raises(ConfigError, match="dataset.size"):
            load_config(path)
        path.write_text("vq:\n  codebook_size: 3\n")
        with pytest.raises(ConfigError, match="codebook_size"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_overrides_apply(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("seed: 42\nsq:\n  lambdas: [0.01, 0.1]\n  steps: 10\n")
        cfg = load_config(path)
        assert cfg.seed == 42
        assert cfg.sq.lambdas == (0.01, 0.1)
        assert cfg.sq.steps == 10


def test_padding_helpers():
    from dualcodec.tensors import crop_to, pad_to_multiple
    x = torch.rand(3, 70, 33)
    p = pad_to_multiple(x)
    assert p.shape == (3, 80, 48)
    assert torch.equal(crop_to(p, 70, 33), x)
    # reflect padding mirrors interior content
    assert torch.equal(p[:, 70, :33], x[:, 68, :])
