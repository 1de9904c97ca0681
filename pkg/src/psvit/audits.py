"""Registered gradient audits: every primitive op plus the composed layers.

Each audit draws its inputs from a seed, runs :func:`finite_diff_audit` in
float64 and returns a :class:`GradReport`. Inputs are drawn away from the
kinks of ReLU, max-pool, clamp and the bilinear kernel.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .autograd import Tensor, precision
from .backbone import Backbone, BackboneConfig, Bottleneck, extract_features, residual_block
from .gradcheck import GradReport, finite_diff_audit
from .model import PsVit, preset
from .sampling import GridSpec, SamplerParams, positional_embed, predict_offsets, progressive_sample
from .transformer import AttentionParams, EncoderLayerParams, attention, encoder_layer, mha, vtm

OP_TOL = 1e-3
COMPOSED_TOL = 1e-2
H = 1e-3

Audit = Callable[[int], GradReport]
AUDITS: dict[str, tuple[Audit, float]] = {}


def audit(name: str, tol: float = OP_TOL):
    def deco(fn):
        AUDITS[name] = (fn, tol)
        return fn
    return deco


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _fractional(rng, size, hi, margin=0.05):
    """Locations in [0, hi] whose fractional parts avoid the kernel kinks."""
    whole = rng.integers(0, max(int(hi), 1), size=size)
    frac = rng.uniform(margin, 1 - margin, size=size)
    return np.minimum(whole + frac, hi - margin) if hi >= 1 else np.zeros(size)


def _params_of(pairs) -> list[Tensor]:
    return [t for _, t in pairs]


@audit("add")
def _add(seed):
    rng = np.random.default_rng(seed)
    return finite_diff_audit(ops.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))], H, OP_TOL, seed=seed)


@audit("sub")
def _sub(seed):
    rng = np.random.default_rng(seed)
    return finite_diff_audit(ops.sub, [rng.standard_normal((3, 4)), rng.standard_normal((1, 4))], H, OP_TOL, seed=seed)


@audit("mul")
def _mul(seed):
    rng = np.random.default_rng(seed)
    return finite_diff_audit(ops.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], H, OP_TOL, seed=seed)


@audit("matmul")
def _matmul(seed):
    rng = np.random.default_rng(seed)
    return finite_diff_audit(ops.matmul, [rng.standard_normal((4, 3)), rng.standard_normal((3, 5))], H, OP_TOL, seed=seed)


@audit("relu")
def _relu(seed):
    rng = np.random.default_rng(seed)
    return finite_diff_audit(ops.relu, [_away_from_zero(rng, (4, 5))], H, OP_TOL, seed=seed)


@audit("gelu")
def _gelu(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([[-2.0, -0.5, 0.5, 2.0], rng.standard_normal(8) * 2])
    return finite_diff_audit(ops.gelu, [x], H, OP_TOL, seed=seed)


@audit("softmax_rows")
def _softmax(seed):
    rng = np.random.default_rng(seed)
    return finite_diff_audit(ops.softmax_rows, [rng.standard_normal((3, 5))], H, OP_TOL, seed=seed)


@audit("layer_norm")
def _layer_norm(seed):
    rng = np.random.default_rng(seed)
    x = [rng.standard_normal((3, 4)), 1 + 0.1 * rng.standard_normal(4), 0.1 * rng.standard_normal(4)]
    return finite_diff_audit(ops.layer_norm, x, H, OP_TOL, seed=seed)


@audit("cross_entropy_smoothed")
def _ce(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 5, size=3)
    return finite_diff_audit(
        ops.cross_entropy_smoothed, [rng.standard_normal((3, 5))], H, OP_TOL,
        attrs={"targets": targets, "eps": 0.1}, seed=seed,
    )


@audit("clamp")
def _clamp(seed):
    rng = np.random.default_rng(seed)
    p = np.stack([_fractional(rng, 6, 5), _fractional(rng, 6, 7)]) * 1.4 - 1.0
    lo, hi = np.zeros((2, 1)), np.array([[4.0], [6.0]])
    # keep every coordinate clear of the clamp bounds
    p = np.where(np.abs(p - lo) < 0.05, p + 0.1, p)
    p = np.where(np.abs(p - hi) < 0.05, p - 0.1, p)
    return finite_diff_audit(ops.clamp, [p], H, OP_TOL, attrs={"lo": lo, "hi": hi}, seed=seed)


@audit("bilinear_sample")
def _bilinear(seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((3, 6, 7))
    p = np.stack([_fractional(rng, 9, 5), _fractional(rng, 9, 6)])
    return finite_diff_audit(ops.bilinear_sample, [F, p], H, OP_TOL, seed=seed)


@audit("conv2d")
def _conv(seed):
    rng = np.random.default_rng(seed)
    x = [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))]
    return finite_diff_audit(ops.conv2d, x, H, OP_TOL, attrs={"stride": 2, "padding": 1}, seed=seed)


@audit("conv2d_1x1")
def _conv1(seed):
    rng = np.random.default_rng(seed)
    x = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 1, 1))]
    return finite_diff_audit(ops.conv2d, x, H, OP_TOL, seed=seed, name="conv2d_1x1")


@audit("max_pool2d")
def _pool(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced well beyond 2h keep the argmax stable
    x = rng.permutation(2 * 36).reshape(1, 2, 6, 6) * 0.01
    return finite_diff_audit(ops.max_pool2d, [x], H, OP_TOL, seed=seed)


@audit("channel_affine")
def _affine(seed):
    rng = np.random.default_rng(seed)
    x = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3), rng.standard_normal(3)]
    return finite_diff_audit(ops.channel_affine, x, H, OP_TOL, seed=seed)


@audit("batch_norm_train")
def _bn(seed):
    rng = np.random.default_rng(seed)
    # batch statistics over 256 values per channel keep the truncation error small
    x = [rng.standard_normal((4, 3, 8, 8)), 1 + 0.1 * rng.standard_normal(3), rng.standard_normal(3)]
    return finite_diff_audit(ops.batch_norm_train, x, H, OP_TOL, attrs={"eps": 1e-5}, seed=seed)


@audit("attention")
def _attention(seed):
    rng = np.random.default_rng(seed)
    x = [rng.standard_normal((4, 5)) for _ in range(3)]
    return finite_diff_audit(attention, x, H, OP_TOL, seed=seed, name="attention")


@audit("mha")
def _mha(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        params = AttentionParams.init(8, 2, rng)
        for w in (params.wq, params.wk, params.wv, params.wo):
            w.data *= 10.0
        Z = Tensor(rng.standard_normal((8, 5)), requires_grad=True)
    inputs = [Z] + _params_of(params.named_parameters())
    return finite_diff_audit(lambda z, *_: mha(z, params), inputs, H, OP_TOL, seed=seed, name="mha")


def _layer(rng, dim=8, heads=2):
    with precision(np.float64):
        layer = EncoderLayerParams.init(dim, heads, rng, dropout=0.0)
        for _, t in layer.named_parameters():
            t.data += 0.2 * rng.standard_normal(t.shape)
    return layer


@audit("encoder_layer")
def _encoder(seed):
    rng = np.random.default_rng(seed)
    layer = _layer(rng)
    with precision(np.float64):
        X = Tensor(rng.standard_normal((8, 6)), requires_grad=True)
    inputs = [X] + _params_of(layer.named_parameters())
    return finite_diff_audit(lambda x, *_: encoder_layer(x, layer), inputs, H, OP_TOL, seed=seed, name="encoder_layer")


@audit("vtm", COMPOSED_TOL)
def _vtm(seed):
    rng = np.random.default_rng(seed)
    layers = [_layer(rng), _layer(rng)]
    with precision(np.float64):
        T = Tensor(rng.standard_normal((8, 4)), requires_grad=True)
        cls = Tensor(rng.standard_normal((8, 1)), requires_grad=True)
    inputs = [cls, T] + [t for layer in layers for _, t in layer.named_parameters()]
    return finite_diff_audit(
        lambda c, t, *_: vtm(t, c, layers)[:, 0:1], inputs, H, COMPOSED_TOL, seed=seed, max_coords=16,
        name="vtm",
    )


@audit("positional_embed")
def _posembed(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(6, 8, 2)
    p = np.stack([_fractional(rng, 4, 5), _fractional(rng, 4, 7)])
    return finite_diff_audit(
        lambda pp, w: positional_embed(pp, w, spec), [p, rng.standard_normal((4, 2))], H, OP_TOL,
        seed=seed, name="positional_embed",
    )


@audit("predict_offsets")
def _offsets(seed):
    rng = np.random.default_rng(seed)
    return finite_diff_audit(
        predict_offsets, [rng.standard_normal((6, 4)), rng.standard_normal((2, 6))], H, OP_TOL,
        seed=seed, name="predict_offsets",
    )


@audit("progressive_sample", COMPOSED_TOL)
def _progressive(seed):
    rng = np.random.default_rng(seed)
    C, spec, N = 4, GridSpec(8, 8, 2), 3
    with precision(np.float64):
        sp = SamplerParams.init(C, 2, N, rng, dropout=0.0)
        for _, t in sp.named_parameters():
            t.data += 0.3 * rng.standard_normal(t.shape)
        F = Tensor(rng.standard_normal((C, 8, 8)), requires_grad=True)
    inputs = [F] + _params_of(sp.named_parameters())
    return finite_diff_audit(
        lambda f, *_: progressive_sample(f, sp, spec, N)[0], inputs, H, COMPOSED_TOL,
        seed=seed, max_coords=16, name="progressive_sample",
    )


@audit("residual_block", COMPOSED_TOL)
def _block(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        block = Bottleneck(4, 4, 8, "affine", rng)
        for _, t in block.named_parameters():
            t.data += 0.1 * rng.standard_normal(t.shape)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)), requires_grad=True)
    inputs = [x] + _params_of(block.named_parameters())
    return finite_diff_audit(
        lambda xx, *_: residual_block(xx, block), inputs, H, COMPOSED_TOL, seed=seed, name="residual_block",
    )


@audit("extract_features", COMPOSED_TOL)
def _features(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        bb = Backbone(BackboneConfig.toy(), 8, rng)
        img = Tensor(rng.standard_normal((1, 3, 16, 16)), requires_grad=True)
    return finite_diff_audit(
        lambda x: extract_features(x, bb), [img], H, COMPOSED_TOL, seed=seed, max_coords=64,
        name="extract_features",
    )


def toy_model_config():
    return preset("toy")


def build_audit_model(seed: int) -> PsVit:
    """Toy model in float64 with nonzero offset heads so locations move off the grid."""
    rng = np.random.default_rng([seed, 7])
    with precision(np.float64):
        model = PsVit(toy_model_config(), seed)
        for head in model.sampler.offset_heads:
            head.data[:] = 0.5 * rng.standard_normal(head.shape)
        for path, t in model.params.items():
            if path.endswith(("beta", "bias", "b1", "b2")):
                t.data[:] = 0.1 * rng.standard_normal(t.shape)
    return model


@audit("model", COMPOSED_TOL)
def _model(seed):
    model = build_audit_model(seed)
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((2, 3, 16, 16))
    labels = rng.integers(0, model.config.num_classes, size=2)
    with precision(np.float64):
        x = Tensor(images)

    def loss(*_):
        return ops.cross_entropy_smoothed(model.forward(x), targets=labels, eps=0.1)

    return finite_diff_audit(
        loss, list(model.params.values()), H, COMPOSED_TOL, seed=seed, max_coords=6, name="model",
    )


def run(scope: str = "all", seeds=range(5), tol: float | None = None) -> list[GradReport]:
    """Run the audits in ``scope`` (an audit name, ``"all"`` or ``"model"``)."""
    if scope == "all":
        names = list(AUDITS)
    elif scope in AUDITS:
        names = [scope]
    else:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose from all, {', '.join(AUDITS)}")
    reports = []
    for name in names:
        fn, default_tol = AUDITS[name]
        for seed in seeds:
            rep = fn(seed)
            rep.name = f"{name}[seed={seed}]"
            rep.tol = default_tol if tol is None else tol
            reports.append(rep)
    return reports
