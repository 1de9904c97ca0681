"""Progressive sampling: iteratively re-sampled tokens over a feature map.

Locations are stored as ``2 x n^2`` matrices, row 0 holding y and row 1
holding x, in feature-map pixel units. A leading batch axis is allowed
everywhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor
from .transformer import EncoderLayerParams, encoder_layer, trunc_normal


class GridConfigError(ValueError):
    pass


class OffsetContractError(RuntimeError):
    """Offsets requested at the final iteration."""


@dataclass(frozen=True)
class GridSpec:
    H: int
    W: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise GridConfigError(f"samples per axis must be >= 1, got {self.n}")
        if self.n > self.H or self.n > self.W:
            raise GridConfigError(f"{self.n}x{self.n} samples do not fit a {self.H}x{self.W} feature map")

    @property
    def s_h(self) -> float:
        return self.H / self.n

    @property
    def s_w(self) -> float:
        return self.W / self.n

    @property
    def num_points(self) -> int:
        return self.n * self.n


def init_grid(spec: GridSpec) -> np.ndarray:
    """Regularly spaced cell centres, enumerated row-major."""
    i = np.arange(spec.num_points)
    row = i // spec.n
    col = i - row * spec.n
    return np.stack([row * spec.s_h + spec.s_h / 2, col * spec.s_w + spec.s_w / 2]).astype(np.float64)


def clamp_locations(p: Tensor, spec: GridSpec) -> Tensor:
    lo = np.zeros((2, 1), dtype=p.data.dtype)
    hi = np.array([[spec.H - 1], [spec.W - 1]], dtype=p.data.dtype)
    return ops.clamp(p, lo=lo, hi=hi)


def bilinear_sample(F: Tensor, p: Tensor) -> Tensor:
    """Tokens ``C x n^2`` read from ``F`` (``C x H x W``) at locations ``p``."""
    return ops.bilinear_sample(F, p)


bilinear_backward = ops.bilinear_backward


def normalize_coords(p: Tensor, spec: GridSpec) -> Tensor:
    """Map each axis affinely onto [-1, 1]; a size-1 axis maps to 0."""
    scale = np.array(
        [[2.0 / (spec.H - 1) if spec.H > 1 else 0.0], [2.0 / (spec.W - 1) if spec.W > 1 else 0.0]],
        dtype=p.data.dtype,
    )
    shift = np.array([[-1.0 if spec.H > 1 else 0.0], [-1.0 if spec.W > 1 else 0.0]], dtype=p.data.dtype)
    return p * Tensor(scale) + Tensor(shift)


def positional_embed(p: Tensor, W_pos: Tensor, spec: GridSpec) -> Tensor:
    return ops.matmul(W_pos, normalize_coords(p, spec))


def predict_offsets(tokens: Tensor, M: Tensor, t: int | None = None, N: int | None = None) -> Tensor:
    """Offsets ``M @ T`` in feature-map pixels.

    When the iteration ``t`` and total ``N`` are given, asking for offsets at
    the final iteration is an error.
    """
    if t is not None and N is not None and t >= N:
        raise OffsetContractError(f"no offsets are predicted at the last iteration (t={t}, N={N})")
    return ops.matmul(M, tokens)


@dataclass
class SamplerParams:
    """Parameters of the sampling loop.

    ``layers`` has one entry per iteration and ``offset_heads`` one per
    iteration except the last. Under weight sharing the entries alias a
    single object.
    """

    pos_proj: Tensor
    layers: list[EncoderLayerParams]
    offset_heads: list[Tensor]

    @property
    def iterations(self) -> int:
        return len(self.layers)

    @property
    def shared(self) -> bool:
        return len(self.layers) > 1 and all(layer is self.layers[0] for layer in self.layers)

    @classmethod
    def init(cls, dim: int, heads: int, N: int, rng: np.random.Generator, share: bool = False,
             dropout: float = 0.1) -> "SamplerParams":
        pos = Tensor(trunc_normal(rng, (dim, 2)), requires_grad=True)
        if share:
            layer = EncoderLayerParams.init(dim, heads, rng, dropout)
            head = Tensor(np.zeros((2, dim)), requires_grad=True)
            return cls(pos, [layer] * N, [head] * (N - 1))
        layers = [EncoderLayerParams.init(dim, heads, rng, dropout) for _ in range(N)]
        heads_ = [Tensor(np.zeros((2, dim)), requires_grad=True) for _ in range(N - 1)]
        return cls(pos, layers, heads_)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "pos_proj", self.pos_proj
        n_layers = 1 if self.shared else len(self.layers)
        for t in range(n_layers):
            for name, p in self.layers[t].named_parameters():
                yield f"layers.{t}.{name}", p
        n_heads = min(1, len(self.offset_heads)) if self.shared else len(self.offset_heads)
        for t in range(n_heads):
            yield f"offset_heads.{t}", self.offset_heads[t]


@dataclass
class TrajectoryLog:
    """Sampling locations per iteration, before and after clamping.

    Arrays are ``2 x n^2`` (or ``B x 2 x n^2`` for a batch).
    """

    raw: list[np.ndarray] = field(default_factory=list)
    clamped: list[np.ndarray] = field(default_factory=list)

    def for_image(self, b: int) -> "TrajectoryLog":
        return TrajectoryLog([r[b] for r in self.raw], [c[b] for c in self.clamped])

    def rows(self) -> Iterator[tuple[int, int, float, float, float, float]]:
        for t, (r, c) in enumerate(zip(self.raw, self.clamped), start=1):
            if r.ndim != 2:
                raise ValueError("rows() needs a single-image log; use for_image(b)")
            for i in range(r.shape[1]):
                yield t, i, float(r[0, i]), float(r[1, i]), float(c[0, i]), float(c[1, i])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "index", "y_raw", "x_raw", "y_clamped", "x_clamped"])
            for row in self.rows():
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "TrajectoryLog":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        iters = sorted({int(r["iteration"]) for r in rows})
        log = cls()
        for t in iters:
            sel = [r for r in rows if int(r["iteration"]) == t]
            sel.sort(key=lambda r: int(r["index"]))
            log.raw.append(np.array([[float(r["y_raw"]) for r in sel], [float(r["x_raw"]) for r in sel]]))
            log.clamped.append(np.array([[float(r["y_clamped"]) for r in sel], [float(r["x_clamped"]) for r in sel]]))
        return log


def progressive_sample(
    F: Tensor,
    params: SamplerParams,
    spec: GridSpec,
    N: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, TrajectoryLog]:
    """Run ``N`` rounds of sample -> fuse -> encode -> move.

    Returns the final tokens and the trajectory of every round's locations.
    The stored locations accumulate offsets without clamping; only the
    location handed to the sampler and positional projection is clamped.
    """
    if N < 1:
        raise GridConfigError(f"iteration count must be >= 1, got {N}")
    if len(params.layers) < N or len(params.offset_heads) < N - 1:
        raise GridConfigError(f"sampler parameters cover {len(params.layers)} iterations, {N} requested")
    if F.shape[-2:] != (spec.H, spec.W):
        raise GridConfigError(f"feature map {F.shape} does not match grid spec {spec.H}x{spec.W}")

    grid = init_grid(spec).astype(F.data.dtype)
    if F.ndim == 4:
        grid = np.broadcast_to(grid, (F.shape[0],) + grid.shape).copy()
    p = Tensor(grid)
    tokens = None
    log = TrajectoryLog()
    for t in range(1, N + 1):
        eff = clamp_locations(p, spec)
        log.raw.append(p.data.copy())
        log.clamped.append(eff.data.copy())
        x = bilinear_sample(F, eff) + positional_embed(eff, params.pos_proj, spec)
        if tokens is not None:
            x = x + tokens
        tokens = encoder_layer(x, params.layers[t - 1], train_mode, rng)
        if t < N:
            p = p + predict_offsets(tokens, params.offset_heads[t - 1], t, N)
    return tokens, log


def write_trajectory_svg(path, log: TrajectoryLog, image: np.ndarray | None = None, stride: int = 4) -> int:
    """Render arrows from the first to the last sampled locations.

    ``image`` (HxW grayscale, any range) is drawn underneath as a raster of
    rectangles. Returns the number of arrows written.
    """
    first, last = log.clamped[0], log.clamped[-1]
    if image is not None:
        h, w = image.shape
    else:
        h = int(round((first[0].max() + 1) * stride))
        w = int(round((first[1].max() + 1) * stride))
    cell = 8
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}" '
        f'viewBox="0 0 {w} {h}">',
        '<defs><marker id="head" markerWidth="4" markerHeight="4" refX="3" refY="2" orient="auto">'
        '<path d="M0,0 L4,2 L0,4 z" fill="red"/></marker></defs>',
    ]
    if image is not None:
        lo, hi = float(image.min()), float(image.max())
        norm = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
        for y in range(h):
            for x in range(w):
                v = int(round(255 * norm[y, x]))
                parts.append(f'<rect x="{x}" y="{y}" width="1" height="1" fill="rgb({v},{v},{v})"/>')
    else:
        parts.append(f'<rect x="0" y="0" width="{w}" height="{h}" fill="rgb(128,128,128)"/>')
    count = 0
    for i in range(first.shape[1]):
        y1, x1 = (first[:, i] + 0.5) * stride
        y2, x2 = (last[:, i] + 0.5) * stride
        parts.append(
            f'<line class="arrow" x1="{x1:.4f}" y1="{y1:.4f}" x2="{x2:.4f}" y2="{y2:.4f}" '
            'stroke="red" stroke-width="0.3" marker-end="url(#head)"/>'
        )
        parts.append(f'<circle cx="{x1:.4f}" cy="{y1:.4f}" r="0.4" fill="yellow"/>')
        count += 1
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
    return count
