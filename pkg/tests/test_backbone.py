import numpy as np
import pytest

from psvit.autograd import Tensor, precision
from psvit.backbone import (
    Backbone, BackboneConfig, BackboneConfigError, Bottleneck, extract_features, feature_size, residual_block,
)


def toy_backbone(dim=16, seed=0, norm="affine"):
    cfg = BackboneConfig(8, 4, 16, 2, norm)
    with precision(np.float64):
        return Backbone(cfg, dim, np.random.default_rng(seed))


@pytest.mark.parametrize("size,expected", [(224, 56), (32, 8), (16, 4)])
def test_feature_size(size, expected):
    assert feature_size(size, size) == (expected, expected)


def test_shapes_224_and_32(rng):
    bb = toy_backbone(dim=12)
    F = extract_features(Tensor(rng.standard_normal((3, 224, 224))), bb)
    assert F.shape == (12, 56, 56)
    F = extract_features(Tensor(rng.standard_normal((2, 3, 32, 32))), bb)
    assert F.shape == (2, 12, 8, 8)


def test_full_width_backbone_output(rng):
    bb = Backbone(BackboneConfig(), 192, rng)
    F = extract_features(Tensor(rng.standard_normal((1, 3, 32, 32))), bb)
    assert F.shape == (1, 192, 8, 8)
    total = sum(p.data.size for _, p in bb.named_parameters())
    assert total == Backbone.count(BackboneConfig(), 192)


def test_translation_by_stride_shifts_features(rng):
    bb = toy_backbone()
    img = np.zeros((3, 64, 64))
    img[:, 24:40, 24:40] = rng.standard_normal((3, 16, 16))
    moved = np.roll(img, 4, axis=2)
    with precision(np.float64):
        F = extract_features(Tensor(img), bb).data
        G = extract_features(Tensor(moved), bb).data
    # both inputs are zero near the border, so only interior cells are compared
    np.testing.assert_allclose(G[:, 3:13, 4:13], F[:, 3:13, 3:12], atol=1e-5)


def test_zero_residual_branch_gives_relu_of_input(rng):
    with precision(np.float64):
        block = Bottleneck(16, 4, 16, "affine", rng)
        block.conv3.data[:] = 0
        x = rng.standard_normal((2, 16, 5, 5))
        out = residual_block(Tensor(x), block).data
    np.testing.assert_array_equal(out, np.maximum(x, 0))


def test_projection_shortcut_only_when_channels_change(rng):
    assert Bottleneck(8, 4, 16, "affine", rng).shortcut is not None
    assert Bottleneck(16, 4, 16, "affine", rng).shortcut is None


def test_batch_norm_running_stats_update_in_train_mode(rng):
    bb = toy_backbone(norm="batch")
    x = Tensor(rng.standard_normal((4, 3, 16, 16)) * 3 + 1)
    before = bb.stem_norm.running_mean.copy()
    extract_features(x, bb, train_mode=False)
    np.testing.assert_array_equal(bb.stem_norm.running_mean, before)
    extract_features(x, bb, train_mode=True)
    assert not np.array_equal(bb.stem_norm.running_mean, before)
    assert bb.stem_norm.running_mean.dtype == np.float32


def test_input_validation(rng):
    bb = toy_backbone()
    with pytest.raises(BackboneConfigError):
        extract_features(Tensor(np.zeros((1, 3, 18, 18))), bb)
    with pytest.raises(BackboneConfigError):
        extract_features(Tensor(np.zeros((1, 1, 16, 16))), bb)
    with pytest.raises(BackboneConfigError):
        BackboneConfig(norm="group")
