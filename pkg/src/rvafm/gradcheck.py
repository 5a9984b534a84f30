"""Central finite-difference checking of autodiff gradients."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grad


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> max relative error
    tol: float = 1e-4
    eps: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def summary(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_error:.3e} (worst: {worst}, tol={self.tol:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max abs difference scaled by the larger gradient magnitude of the pair."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients of the scalar ``f()`` against central differences.

    ``f`` must rebuild its graph on every call. With ``max_entries`` only a
    seeded random subset of each parameter's entries is perturbed.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    zero_grad(params)
    analytic = backward(f(), inputs=params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, eps=eps)
    for name, p in zip(names, params):
        base = p.data.copy()
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = np.empty(len(flat_idx))
        with no_grad():
            for n, k in enumerate(flat_idx):
                bumped = base.copy().reshape(-1)
                bumped[k] = base.reshape(-1)[k] + eps
                p.assign(bumped.reshape(base.shape))
                hi = f().item()
                bumped[k] = base.reshape(-1)[k] - eps
                p.assign(bumped.reshape(base.shape))
                lo = f().item()
                numeric[n] = (hi - lo) / (2 * eps)
        p.assign(base)
        report.errors[name] = relative_error(analytic[p].reshape(-1)[flat_idx], numeric)
    return report
