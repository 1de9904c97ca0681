"""Central-difference audits of analytic adjoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import DiffOp, Tensor, precision, trace_regions


class AuditError(RuntimeError):
    """The audited function produced a non-finite value."""


@dataclass
class GradReport:
    name: str
    rel_errors: list[float]
    abs_errors: list[float]
    tol: float
    shrunk: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors, default=0.0)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  shrunk={self.shrunk}" if self.shrunk else ""
        if self.skipped:
            extra += f"  skipped={self.skipped}"
        return f"{status}  {self.name:<32s} max_rel={self.max_rel_error:.3e}  tol={self.tol:.0e}{extra}"


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if projection is None:
        return out
    return (out * Tensor(projection)).sum()


def finite_diff_audit(
    op: DiffOp | Callable[..., Tensor],
    inputs: Sequence[Tensor | np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-3,
    *,
    attrs: dict | None = None,
    seed: int = 0,
    max_coords: int | None = None,
    name: str | None = None,
    check: Sequence[bool] | None = None,
) -> GradReport:
    """Compare analytic gradients of ``op`` against central differences.

    Non-scalar outputs are contracted with a fixed random projection. The
    error for each input is normwise: ``max|a - n| / max(|a|, |n|)`` taken
    over the audited coordinates, with the denominator floored at 1e-7.
    ``max_coords`` audits a random subset of coordinates per input, which
    keeps whole-model audits tractable.

    Central differences are only an oracle where the function is smooth on
    ``[x - h, x + h]``. When a probe lands on a different piece of a ReLU,
    clamp, max-pool or bilinear cell than the unperturbed input, the step
    for that coordinate is divided by 10 (up to three times); coordinates
    that still straddle a kink are skipped. Both events are counted in the
    report.

    Array inputs are promoted to float64 tensors; Tensor inputs are used
    as-is (their dtype decides the audit precision).
    """
    attrs = attrs or {}
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        tensors = [
            x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
            for x in inputs
        ]
        for t in tensors:
            t.requires_grad = True
            t.grad = None

        def evaluate() -> Tensor:
            return op(*tensors, **attrs)

        with trace_regions() as base_regions:
            out = evaluate()
        if not np.all(np.isfinite(out.data)):
            raise AuditError(f"{name or getattr(op, 'name', 'op')}: forward is not finite")
        projection = None if out.data.size == 1 else rng.standard_normal(out.shape)

        def value() -> tuple[float, list]:
            with trace_regions() as regions:
                v = float(_scalarize(evaluate(), projection).data.item())
            if not np.isfinite(v):
                raise AuditError(f"{name or getattr(op, 'name', 'op')}: forward is not finite")
            return v, regions

        _scalarize(out, projection).backward()

        rel, ab = [], []
        shrunk = skipped = 0
        for i, t in enumerate(tensors):
            if check is not None and not check[i]:
                continue
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            a_all = analytic.reshape(-1)[coords]
            keep = np.ones(coords.size, dtype=bool)
            n_sel = np.empty_like(a_all)
            for j, c in enumerate(coords):
                orig = flat[c]
                step = h
                for attempt in range(4):
                    flat[c] = orig + step
                    fp, rp = value()
                    flat[c] = orig - step
                    fm, rm = value()
                    flat[c] = orig
                    if rp == base_regions and rm == base_regions:
                        break
                    step /= 10
                else:
                    keep[j] = False
                    skipped += 1
                    continue
                shrunk += attempt > 0
                n_sel[j] = (fp - fm) / (2 * step)
            a_sel, n_sel = a_all[keep], n_sel[keep]
            diff = float(np.max(np.abs(a_sel - n_sel))) if a_sel.size else 0.0
            denom = max(float(np.max(np.abs(a_sel), initial=0.0)), float(np.max(np.abs(n_sel), initial=0.0)))
            rel.append(diff / max(denom, 1e-7))
            ab.append(diff)
    return GradReport(name or getattr(op, "name", "fn"), rel, ab, tol, shrunk, skipped)
