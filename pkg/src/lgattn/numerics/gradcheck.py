"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from lgattn.numerics.tensor import Tape, Tensor, no_grad


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    params: list[ParamReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def __str__(self) -> str:
        lines = [f"{p.name}: rel={p.max_rel_error:.3e} abs={p.max_abs_error:.3e} n={p.checked} "
                 f"{'ok' if p.passed else 'FAIL'}" for p in self.params]
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against ``(f(p+h) - f(p-h)) / 2h``.

    ``f`` closes over ``params`` and is re-evaluated after each in-place
    perturbation. The relative error of a parameter is the largest absolute
    entry difference divided by the largest gradient magnitude in that
    parameter (analytic or numeric), which stays meaningful for entries whose
    true gradient is near zero. ``max_entries`` caps how many entries per
    parameter are perturbed (chosen at random, reproducibly).
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    with no_grad():
        for name, p, ga in zip(names, params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                numeric[n] = (fp - fm) / (2 * step)
            picked = ga.reshape(-1)[idx]
            abs_err = float(np.max(np.abs(picked - numeric))) if idx.size else 0.0
            denom = max(float(np.max(np.abs(picked), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
            rel = abs_err / denom if denom > 0 else 0.0
            report.params.append(ParamReport(name, rel, abs_err, int(idx.size), rel < tolerance))
    return report
