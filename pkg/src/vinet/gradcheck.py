"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, precision, record_patterns

# denominator floor: derivatives smaller than this are compared in absolute terms,
# so float64 round-off on near-zero entries does not dominate the ratio
SCALE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)
    n_reduced_step: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def merge(self, other: "GradCheckReport", prefix: str = "") -> None:
        for k, v in other.max_rel_error.items():
            self.max_rel_error[prefix + k] = v
            self.n_checked[prefix + k] = other.n_checked[k]
            self.n_reduced_step[prefix + k] = other.n_reduced_step[k]

    def lines(self) -> list[str]:
        return [f"{name:40s} max_rel_err={err:.3e} checked={self.n_checked[name]}"
                f" reduced_step={self.n_reduced_step[name]}"
                for name, err in self.max_rel_error.items()]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), SCALE_FLOOR)


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
               max_entries: Optional[int] = None, seed: int = 0,
               min_step: float = 1e-9) -> GradCheckReport:
    """Compare backprop gradients of scalar ``fn()`` against central differences.

    ``params`` are leaf tensors that ``fn`` reads; they are perturbed in place
    and restored. When a step of size ``h`` flips a relu mask or a pooling
    argmax, the difference quotient straddles a kink, so the step is halved
    until the activation pattern matches the unperturbed one.
    ``max_entries`` caps how many entries per parameter are probed (chosen
    with ``seed``); ``None`` probes all of them.
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with record_patterns() as base_pattern:
        out = fn()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    base_pattern = list(base_pattern)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    def evaluate() -> tuple[float, list]:
        with record_patterns() as pat:
            val = float(fn().data.reshape(-1)[0])
        return val, list(pat)

    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, reduced = 0.0, 0
        for i in idx:
            orig = flat[i]
            step = h
            while True:
                flat[i] = orig + step
                fp, pat_p = evaluate()
                flat[i] = orig - step
                fm, pat_m = evaluate()
                flat[i] = orig
                if (pat_p == base_pattern and pat_m == base_pattern) or step <= min_step:
                    break
                step /= 2
            if step < h:
                reduced += 1
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[i]), numeric))
        report.max_rel_error[name] = worst
        report.n_checked[name] = int(idx.size)
        report.n_reduced_step[name] = reduced
    return report


def check_op(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
             h: float = 1e-5, weight_output: bool = True) -> GradCheckReport:
    """Gradient-check ``op(*inputs)`` reduced to a scalar by a fixed random projection."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed + 1000)
    proj = None

    def fn() -> Tensor:
        nonlocal proj
        out = op(*tensors)
        if not weight_output:
            return out.sum()
        if proj is None:
            proj = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
        return (out * proj).sum()

    with precision(np.float64):
        return grad_check(fn, {f"input{i}": t for i, t in enumerate(tensors)}, h=h, seed=seed)
