"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor


@dataclass
class GradCheckReport:
    per_parameter: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance

    def worst(self) -> tuple[str, float] | None:
        if not self.per_parameter:
            return None
        name = max(self.per_parameter, key=self.per_parameter.get)
        return name, self.per_parameter[name]


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      h: float = 1e-4, max_entries: int | None = None,
                      seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``max_entries`` caps how many entries per parameter are probed (sampled
    without replacement, deterministic in ``seed``); None probes all of them.
    """
    report = GradCheckReport()
    params = list(params)
    if not params:
        return report
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in gradient check")
    loss.backward()
    rng = np.random.default_rng(seed)
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(loss_fn().data)
            flat[k] = orig - h
            fm = float(loss_fn().data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while probing {p.name or i}")
            numeric[j] = (fp - fm) / (2 * h)
        err = rel_error(analytic.reshape(-1)[idx], numeric)
        report.per_parameter[p.name or f"param{i}"] = float(err.max()) if err.size else 0.0
        report.checked_entries += int(idx.size)
    return report


def generic_weights(module, seed: int = 0) -> None:
    """Overwrite parameters with O(1/sqrt(fan_in)) random values.

    Training init (zero biases, unit gains, small embeddings) leaves some
    gradients far below what a central difference resolves in f64; generic
    weights keep every path numerically visible.
    """
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        shape = p.data.shape
        if name.endswith("gamma"):
            value = 1.0 + 0.1 * rng.standard_normal(shape)
        elif p.data.ndim == 1:
            value = 0.1 * rng.standard_normal(shape)
        else:
            fan_in = shape[0] if p.data.ndim == 2 else int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) / np.sqrt(fan_in)
        p.data = value.astype(p.data.dtype)
