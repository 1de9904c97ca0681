import numpy as np
import pytest

from psvit.backbone import BackboneConfig
from psvit.model import (
    PRESETS, ConfigError, PsVit, PsVitConfig, StateDictError, build, count_flops, count_params,
    param_breakdown, preset, tie_weights,
)
from psvit.transformer import EncoderLayerParams


def toy(**kw):
    return PsVit(preset("toy", **kw), seed=0)


def test_presets():
    ti, b = PRESETS["ps-vit-ti"], PRESETS["ps-vit-b"]
    assert (ti.iterations, ti.depth, ti.dim, ti.heads, ti.n) == (4, 8, 192, 3, 14)
    assert (b.iterations, b.depth, b.dim, b.heads, b.n) == (4, 10, 384, 6, 14)
    assert ti.dim // ti.heads == b.dim // b.heads == 64


@pytest.mark.parametrize("kw", [dict(heads=5), dict(iterations=0), dict(n=5), dict(input_size=18),
                                dict(dropout=1.0), dict(depth=-1), dict(num_classes=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        preset("toy", **kw)


def test_unknown_preset_and_keys():
    with pytest.raises(ConfigError):
        preset("ps-vit-xl")
    with pytest.raises(ConfigError):
        PsVitConfig.from_dict({"bogus": 1})


def test_config_dict_round_trip():
    cfg = preset("toy", share_weights=True)
    assert PsVitConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("name", ["toy", "ps-vit-ti"])
@pytest.mark.parametrize("share", [False, True])
def test_analytic_params_match_built_model(name, share):
    cfg = preset(name, share_weights=share)
    store, _ = build(cfg)
    assert store.num_params() == count_params(cfg)


def test_tie_weights_delta():
    cfg = preset("ps-vit-ti")
    store, model = build(cfg)
    before = store.num_params()
    tie_weights(model)
    N, C = cfg.iterations, cfg.dim
    enc = EncoderLayerParams.count(C)
    assert before - model.params.num_params() == (N - 1) * enc + (N - 2) * 2 * C
    assert model.params.num_params() == count_params(cfg.replace(share_weights=True))
    with pytest.raises(ConfigError):
        tie_weights(model)


def test_sharing_leaves_flops_unchanged():
    for name in ("ps-vit-ti", "ps-vit-b"):
        cfg = PRESETS[name]
        assert count_flops(cfg) == count_flops(cfg.replace(share_weights=True))


def test_breakdown_sums():
    cfg = PRESETS["ps-vit-b"]
    assert sum(param_breakdown(cfg).values()) == count_params(cfg)


def test_forward_shapes_and_log(rng):
    model = toy()
    images = rng.standard_normal((3, 3, 16, 16))
    logits, log = model.forward(images, return_log=True)
    assert logits.shape == (3, 3)
    assert len(log.raw) == 2 and log.raw[0].shape == (3, 2, 4)
    assert model.forward(images[0]).shape == (1, 3)


def test_head_row_permutation_permutes_logits(rng):
    model = toy()
    images = rng.standard_normal((2, 3, 16, 16))
    model.head_bias.data[:] = rng.standard_normal(3)
    base = model.forward(images).data
    perm = np.array([2, 0, 1])
    model.head_weight.data = model.head_weight.data[perm].copy()
    model.head_bias.data = model.head_bias.data[perm].copy()
    np.testing.assert_allclose(model.forward(images).data, base[:, perm], atol=1e-6)


def test_zero_head_weight_gives_bias(rng):
    model = toy()
    model.head_weight.data[:] = 0
    model.head_bias.data[:] = [1, 2, 3]
    np.testing.assert_array_equal(model.forward(rng.standard_normal((2, 3, 16, 16))).data, [[1, 2, 3]] * 2)


def test_state_dict_round_trip_and_strict_errors():
    a, b = toy(), PsVit(preset("toy"), seed=1)
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])
    state = a.state_dict()
    state.pop("cls_token")
    with pytest.raises(StateDictError, match="missing: cls_token"):
        b.load_state_dict(state)
    b.load_state_dict(state, strict=False)
    wide = PsVit(preset("toy", num_classes=5))
    with pytest.raises(StateDictError, match="shape mismatch"):
        wide.load_state_dict(a.state_dict(), strict=False)


def test_batch_norm_running_stats_in_state_dict():
    model = PsVit(preset("toy", backbone=BackboneConfig(8, 4, 16, 2, "batch")))
    keys = list(model.state_dict())
    assert "backbone.stem.norm.running_mean" in keys
    assert "backbone.stem.norm.running_mean" not in model.params


def test_weight_decay_exemptions():
    store, _ = build(preset("toy"))
    exempt = {p for p in store if not store.decays(p)}
    assert "cls_token" in exempt and "head.fc.bias" in exempt and "vtm.0.ffn.b1" in exempt
    assert "vtm.0.ln1.gamma" in exempt and "backbone.proj.bias" in exempt
    assert store.decays("head.fc.weight") and store.decays("sampler.offset_heads.0")


def test_gradients_reach_every_parameter(rng):
    from psvit import ops
    model = PsVit(preset("toy"), seed=0)
    for head in model.sampler.offset_heads:
        head.data[:] = 0.1 * rng.standard_normal(head.shape)
    loss = ops.cross_entropy_smoothed(model.forward(rng.standard_normal((2, 3, 16, 16))),
                                      targets=np.array([0, 2]), eps=0.1)
    loss.backward()
    for path, p in model.params.items():
        assert p.grad is not None, path
