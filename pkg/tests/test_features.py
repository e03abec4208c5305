"""Clip-level feature summaries from encoder token outputs."""

import numpy as np
import pytest
import torch

from maskduo.features import (
    clip_feature,
    extract_clip_features,
    frame_level_features,
    long_clip_feature,
    masked_mean_feature,
    save_features,
)
from maskduo.patches import ShapeSpec


def _shape(nf=5, nt=6, d=96):
    return ShapeSpec(patch_size=16, n_freq=nf, n_time=nt, dim=d)


class TestFrameLevel:
    def test_paper_scale_dims(self):
        shape = ShapeSpec(patch_size=16, n_freq=5, n_time=38, dim=768)
        z = torch.randn(2, 190, 768)
        frames = frame_level_features(z, shape)
        assert frames.shape == (2, 38, 3840)
        assert clip_feature(z, shape).shape == (2, 3840)

    def test_toy_scale_dims(self):
        shape = _shape()
        z = torch.randn(3, 30, 96)
        assert frame_level_features(z, shape).shape == (3, 6, 480)
        assert clip_feature(z, shape).shape == (3, 480)

    def test_concatenation_order_is_frequency_blocks(self):
        # mark each token with its grid row; frame vector = rows stacked in order
        shape = _shape(nf=3, nt=2, d=4)
        z = torch.zeros(1, 6, 4)
        for i in range(6):
            z[0, i] = i // 2  # row index (frequency), since n_time = 2
        frames = frame_level_features(z, shape)
        expect = torch.tensor([0.0] * 4 + [1.0] * 4 + [2.0] * 4)
        assert torch.equal(frames[0, 0], expect)
        assert torch.equal(frames[0, 1], expect)

    def test_single_clip_no_batch_axis(self):
        shape = _shape(nf=2, nt=2, d=4)
        z = torch.randn(4, 4)
        assert frame_level_features(z, shape).shape == (2, 8)

    def test_wrong_token_count_rejected(self):
        with pytest.raises(ValueError):
            frame_level_features(torch.randn(1, 7, 4), _shape(nf=2, nt=2, d=4))


class TestClipAveraging:
    def test_mean_over_time(self):
        shape = _shape(nf=1, nt=3, d=2)
        z = torch.tensor([[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]])
        out = clip_feature(z, shape)
        assert torch.allclose(out, torch.tensor([[3.0, 4.0]]))

    def test_long_clip_weighting(self):
        feats = torch.tensor([[2.0, 0.0], [8.0, 4.0]])
        out = long_clip_feature(feats, [3, 1])
        # (3*2 + 1*8)/4 = 3.5 ; (3*0 + 1*4)/4 = 1.0
        assert torch.allclose(out, torch.tensor([3.5, 1.0], dtype=torch.float64))

    def test_long_clip_equal_weights_is_plain_mean(self, rng):
        feats = torch.from_numpy(rng.normal(size=(4, 8)))
        out = long_clip_feature(feats, [10, 10, 10, 10])
        assert torch.allclose(out, feats.mean(dim=0))

    def test_zero_weight_rejected(self):
        with pytest.raises(ValueError):
            long_clip_feature(torch.randn(2, 4), [3, 0])


class TestMaskedMean:
    def test_mean_over_kept_only(self):
        z = torch.tensor([[[1.0, 1.0], [100.0, 100.0], [3.0, 3.0]]])
        out = masked_mean_feature(z, np.array([0, 2]))
        assert torch.allclose(out, torch.tensor([[2.0, 2.0]]))

    def test_per_clip_indices(self):
        z = torch.stack([torch.ones(4, 2), 2 * torch.ones(4, 2)])
        idx = np.array([[0, 1], [2, 3]])
        out = masked_mean_feature(z, idx)
        assert torch.allclose(out, torch.tensor([[1.0, 1.0], [2.0, 2.0]]))

    def test_empty_kept_rejected(self):
        with pytest.raises(ValueError):
            masked_mean_feature(torch.randn(1, 4, 2), np.array([], dtype=np.int64))


class TestExtraction:
    def test_batched_equals_single_pass(self, toy_shape, rng):
        from maskduo.backbone import EncoderConfig, PatchEncoder
        from maskduo.patches import positional_encoding

        torch.manual_seed(0)
        enc = PatchEncoder(256, EncoderConfig.toy())
        pos = torch.from_numpy(positional_encoding(toy_shape)).float()
        tokens = torch.from_numpy(rng.normal(size=(10, 30, 256)).astype(np.float32))
        a = extract_clip_features(enc, toy_shape, pos, tokens, batch_size=3)
        b = extract_clip_features(enc, toy_shape, pos, tokens, batch_size=10)
        assert a.shape == (10, 480)
        assert torch.allclose(a, b, atol=1e-6)

    def test_restores_training_mode(self, toy_shape, rng):
        from maskduo.backbone import EncoderConfig, PatchEncoder
        from maskduo.patches import positional_encoding

        enc = PatchEncoder(256, EncoderConfig.toy())
        enc.train()
        pos = torch.from_numpy(positional_encoding(toy_shape)).float()
        tokens = torch.from_numpy(rng.normal(size=(2, 30, 256)).astype(np.float32))
        extract_clip_features(enc, toy_shape, pos, tokens)
        assert enc.training


class TestFeatureArchive:
    def test_round_trip(self, tmp_path, rng):
        from maskduo.checkpoint import load_archive

        feats = rng.normal(size=(6, 480)).astype(np.float32)
        labels = np.array([0, 1, 2, 0, 1, 2])
        path = save_features(tmp_path / "f.npz", feats, labels, extra={"source": "unit"})
        arrays, meta = load_archive(path)
        assert (arrays["features"] == feats).all()
        assert (arrays["labels"] == labels).all()
        assert meta["kind"] == "features" and meta["source"] == "unit"

    def test_shape_mismatch_rejected(self, tmp_path, rng):
        with pytest.raises(ValueError):
            save_features(tmp_path / "f.npz", rng.normal(size=(6, 4)), np.zeros(5, dtype=int))
