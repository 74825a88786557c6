"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    worst: str = ""
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def __str__(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return f"grad_check {state}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e}) over {self.n_checked} elements {self.worst}"


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    tol: float = 1e-4,
    h: float = 1e-5,
    n_samples: int = 32,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn`` against central differences.

    ``fn`` maps the input tensors to one output tensor; the check reduces it
    to a scalar with a fixed random projection. Inputs are promoted to float64.
    Each input contributes ``min(size, n_samples)`` randomly chosen elements.
    Inputs that are already ``Tensor`` objects are perturbed in place, so
    parameters captured by ``fn`` can be passed directly.
    """
    rng = np.random.default_rng(seed)
    tensors: list[Tensor] = []
    for x in inputs:
        if isinstance(x, Tensor):
            if x.data.dtype != np.float64:
                x.data = x.data.astype(np.float64)
            x.requires_grad = True
            x.grad = None
            tensors.append(x)
        else:
            tensors.append(Tensor(np.array(x, dtype=np.float64), requires_grad=True))

    out = fn(*tensors)
    proj = rng.standard_normal(out.shape) / np.sqrt(max(out.size, 1))

    def scalar() -> float:
        with no_grad():
            return float(np.sum(fn(*tensors).data * proj))

    out.backward(proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst, worst_at, per_input, count = 0.0, "", [], 0
    for i, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, n_samples), replace=False)
        agrad = analytic[i].reshape(-1)
        input_worst = 0.0
        for j in picks:
            old = flat[j]
            flat[j] = old + h
            fp = scalar()
            flat[j] = old - h
            fm = scalar()
            flat[j] = old
            num = (fp - fm) / (2 * h)
            err = rel_error(float(agrad[j]), num)
            count += 1
            input_worst = max(input_worst, err)
            if err > worst:
                label = names[i] if names else f"input {i}"
                worst, worst_at = err, f"(worst: {label}[{j}] analytic {agrad[j]:.6e} numeric {num:.6e})"
        per_input.append(input_worst)
    return GradCheckReport(worst, tol, count, worst_at, per_input)
