"""End-to-end PS-ViT: backbone, progressive sampler, encoder stack, classifier.

Also holds the configuration presets and the analytic parameter and
multiply-accumulate counts.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, asdict, replace
from typing import Iterator, Mapping

import numpy as np

from . import ops
from .autograd import Tensor
from .backbone import Backbone, BackboneConfig, extract_features, feature_size
from .sampling import GridSpec, SamplerParams, progressive_sample
from .transformer import EncoderLayerParams, trunc_normal, vtm


class ConfigError(ValueError):
    pass


class StateDictError(KeyError):
    """Strict load found missing, unexpected or mis-shaped entries."""

    def __init__(self, missing=(), unexpected=(), mismatched=()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.mismatched = list(mismatched)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        if self.mismatched:
            parts.append("shape mismatch: " + ", ".join(self.mismatched))
        super().__init__("; ".join(parts))

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class PsVitConfig:
    iterations: int = 4          # N, progressive sampling rounds
    depth: int = 8               # N_v, encoder layers after sampling
    dim: int = 192               # C, token dimension
    heads: int = 3               # M
    n: int = 14                  # samples per axis
    share_weights: bool = False
    num_classes: int = 1000
    input_size: int = 224
    dropout: float = 0.1
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.input_size % 4:
            raise ConfigError(f"input size {self.input_size} is not divisible by 4")
        if self.n > self.input_size // 4:
            raise ConfigError(f"{self.n} samples per axis exceed the {self.input_size // 4}-pixel feature map")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PsVitConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("backbone"), Mapping):
            d["backbone"] = BackboneConfig(**d["backbone"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "PsVitConfig":
        return replace(self, **changes)


PRESETS = {
    "ps-vit-ti": PsVitConfig(iterations=4, depth=8, dim=192, heads=3),
    "ps-vit-b": PsVitConfig(iterations=4, depth=10, dim=384, heads=6),
    "toy": PsVitConfig(
        iterations=2, depth=2, dim=16, heads=2, n=2, num_classes=3, input_size=16,
        dropout=0.0, backbone=BackboneConfig.toy(),
    ),
}


def preset(name: str, **overrides) -> PsVitConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


def _no_decay(path: str) -> bool:
    leaf = path.rsplit(".", 1)[-1]
    return leaf in ("gamma", "beta", "bias", "b1", "b2") or path == "cls_token"


class ParamStore:
    """Ordered path -> Tensor map. Aliased tensors appear under one path."""

    def __init__(self, items: Iterator[tuple[str, Tensor]] = ()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        seen: set[int] = set()
        for path, t in items:
            if path in self._params:
                raise ConfigError(f"duplicate parameter path {path!r}")
            if id(t) in seen:
                continue
            seen.add(id(t))
            self._params[path] = t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def decays(self, path: str) -> bool:
        return not _no_decay(path)

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()


class PsVit:
    """A built model: parameter containers plus the forward pipeline."""

    def __init__(self, config: PsVitConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.backbone = Backbone(c.backbone, c.dim, rng)
        self.sampler = SamplerParams.init(c.dim, c.heads, c.iterations, rng, c.share_weights, c.dropout)
        self.layers = [EncoderLayerParams.init(c.dim, c.heads, rng, c.dropout) for _ in range(c.depth)]
        self.cls_token = Tensor(trunc_normal(rng, (c.dim, 1)), requires_grad=True)
        self.head_gamma = Tensor(np.ones(c.dim), requires_grad=True)
        self.head_beta = Tensor(np.zeros(c.dim), requires_grad=True)
        self.head_weight = Tensor(trunc_normal(rng, (c.num_classes, c.dim)), requires_grad=True)
        self.head_bias = Tensor(np.zeros(c.num_classes), requires_grad=True)
        self.params = ParamStore(self.named_parameters())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, p in self.backbone.named_parameters():
            yield f"backbone.{name}", p
        for name, p in self.sampler.named_parameters():
            yield f"sampler.{name}", p
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_parameters():
                yield f"vtm.{i}.{name}", p
        yield "cls_token", self.cls_token
        yield "head.norm.gamma", self.head_gamma
        yield "head.norm.beta", self.head_beta
        yield "head.fc.weight", self.head_weight
        yield "head.fc.bias", self.head_bias

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by normalization running statistics."""
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        for name, norm in self.backbone.named_norms():
            if norm.kind == "batch":
                out[f"backbone.{name}.running_mean"] = norm.running_mean
                out[f"backbone.{name}.running_var"] = norm.running_var
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        mismatched = [
            f"{k} {tuple(np.shape(state[k]))} vs {tuple(own[k].shape)}"
            for k in own if k in state and tuple(np.shape(state[k])) != tuple(own[k].shape)
        ]
        if mismatched or (strict and (missing or unexpected)):
            raise StateDictError(missing, unexpected, mismatched)
        norms = {f"backbone.{name}": norm for name, norm in self.backbone.named_norms()}
        for k, v in state.items():
            if k in self.params:
                self.params[k].data = np.array(v, dtype=self.params[k].data.dtype)
            elif k.endswith((".running_mean", ".running_var")) and k in own:
                prefix, attr = k.rsplit(".", 1)
                setattr(norms[prefix], attr, np.array(v, dtype=getattr(norms[prefix], attr).dtype))

    def grid_spec(self, h: int, w: int) -> GridSpec:
        fh, fw = feature_size(h, w)
        return GridSpec(fh, fw, self.config.n)

    def features(self, images, train_mode: bool = False) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        return extract_features(x, self.backbone, train_mode)

    def forward(self, images, train_mode: bool = False, rng: np.random.Generator | None = None,
                return_log: bool = False):
        """Logits ``B x num_classes`` for a batch of ``3 x H x W`` images."""
        F = self.features(images, train_mode)
        spec = GridSpec(F.shape[2], F.shape[3], self.config.n)
        tokens, log = progressive_sample(F, self.sampler, spec, self.config.iterations, train_mode, rng)
        out = vtm(tokens, self.cls_token, self.layers, train_mode, rng)
        logits = self.head(out[:, :, 0:1])
        return (logits, log) if return_log else logits

    __call__ = forward

    def head(self, cls_col: Tensor) -> Tensor:
        h = ops.layer_norm(cls_col, self.head_gamma, self.head_beta, axis=-2)
        logits = ops.matmul(self.head_weight, h)
        logits = logits.reshape(logits.shape[0], logits.shape[1])
        return logits + self.head_bias


def build(config: PsVitConfig, seed: int = 0) -> tuple[ParamStore, PsVit]:
    model = PsVit(config, seed)
    return model.params, model


def tie_weights(model: PsVit) -> PsVit:
    """Alias every sampler iteration to iteration 1's encoder and offset head."""
    s = model.sampler
    if model.config.share_weights or s.shared:
        raise ConfigError("model already shares sampler weights")
    s.layers = [s.layers[0]] * len(s.layers)
    s.offset_heads = [s.offset_heads[0]] * len(s.offset_heads) if s.offset_heads else []
    model.config = model.config.replace(share_weights=True)
    model.params = ParamStore(model.named_parameters())
    return model


# --- cost accounting ---------------------------------------------------------

@dataclass
class CostReport:
    """Parameter and multiply-accumulate totals with per-module breakdown.

    FLOPs follow the one multiply-accumulate = one FLOP convention; only
    convolutions, matrix products and bilinear gathers are counted.
    """

    params: dict[str, int]
    flops: dict[str, int]

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def rows(self):
        for k in self.params:
            yield k, self.params[k], self.flops.get(k, 0)


def param_breakdown(config: PsVitConfig) -> dict[str, int]:
    c = config
    enc = EncoderLayerParams.count(c.dim)
    n_layers = 1 if c.share_weights else c.iterations
    if c.share_weights:
        n_heads = min(1, c.iterations - 1)
    else:
        n_heads = c.iterations - 1
    return {
        "backbone": Backbone.count(c.backbone, c.dim),
        "sampler": 2 * c.dim + n_layers * enc + n_heads * 2 * c.dim,
        "vtm": c.depth * enc + c.dim,
        "head": 2 * c.dim + c.num_classes * c.dim + c.num_classes,
    }


def count_params(config: PsVitConfig) -> int:
    return sum(param_breakdown(config).values())


def encoder_flops(dim: int, length: int) -> int:
    return 4 * dim * dim * length + 2 * length * length * dim + 2 * 3 * dim * dim * length


def backbone_flops(config: BackboneConfig, dim: int, h: int, w: int) -> int:
    c = config
    h1, w1 = (h + 6 - 7) // 2 + 1, (w + 6 - 7) // 2 + 1
    total = c.stem_channels * 3 * 49 * h1 * w1
    fh, fw = feature_size(h, w)
    px = fh * fw
    cin = c.stem_channels
    for _ in range(c.blocks):
        total += px * (cin * c.width + 9 * c.width * c.width + c.width * c.out_channels)
        if cin != c.out_channels:
            total += px * cin * c.out_channels
        cin = c.out_channels
    return total + px * cin * dim


def flop_breakdown(config: PsVitConfig, input_size: int | None = None, n: int | None = None) -> dict[str, int]:
    c = config
    size = c.input_size if input_size is None else input_size
    n = c.n if n is None else n
    L = n * n
    N = c.iterations
    sampler = N * (4 * c.dim * L + 2 * c.dim * L + encoder_flops(c.dim, L)) + (N - 1) * 2 * c.dim * L
    return {
        "backbone": backbone_flops(c.backbone, c.dim, size, size),
        "sampler": sampler,
        "vtm": c.depth * encoder_flops(c.dim, L + 1),
        "head": c.dim * c.num_classes,
    }


def count_flops(config: PsVitConfig, input_size: int | None = None, n: int | None = None) -> int:
    return sum(flop_breakdown(config, input_size, n).values())


def cost_report(config: PsVitConfig, input_size: int | None = None, n: int | None = None) -> CostReport:
    return CostReport(param_breakdown(config), flop_breakdown(config, input_size, n))
