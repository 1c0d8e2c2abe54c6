"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Parameter, Tape, Tensor, no_grad
from .graph import backward


class NondeterministicClosure(RuntimeError):
    pass


@dataclass
class CoordResult:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class CheckReport:
    tolerance: float
    step: float
    max_rel_err: dict = field(default_factory=dict)  # parameter name -> worst relative error
    coords: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        return (f"gradcheck: {len(self.coords)} coords over {len(self.max_rel_err)} params, "
                f"max rel err {self.worst:.3e} (tol {self.tolerance:g}) -> "
                f"{'PASS' if self.passed else 'FAIL'}")


def rel_err(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    return 0.0 if denom == 0.0 else abs(a - n) / denom


def _scalar(t) -> float:
    return t.item() if isinstance(t, Tensor) else float(t)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      step: float = 1e-5, tolerance: float = 1e-6,
                      n_coords: Optional[int] = None, seed: int = 0,
                      residual_fn: Optional[Callable[[], Tensor]] = None) -> CheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values every
    call.  Frozen parameters are skipped entirely.  With ``n_coords`` the
    coordinates are drawn uniformly from the union of all checked entries;
    otherwise every entry is checked.

    For a mean-of-squares loss, ``residual_fn`` may return the unreduced
    residual ``r`` (loss = mean(r**2)).  The difference ``f(+h) - f(-h)`` is
    then formed as ``mean((r+ - r-) * (r+ + r-))``, which is the same quantity
    without the cancellation that rounding both scalar losses to one ulp
    causes.  The analytic side always differentiates ``loss_fn``.
    """
    live = [p for p in params if not p.frozen]
    report = CheckReport(tolerance=tolerance, step=step)
    if not live:
        return report

    with no_grad():
        f0 = _scalar(loss_fn())
        f1 = _scalar(loss_fn())
    if f0 != f1:
        raise NondeterministicClosure(f"loss closure is not deterministic: {f0!r} != {f1!r}")

    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss, accumulate=False)

    sizes = np.array([p.size for p in live])
    if n_coords is None:
        picks = [(k, j) for k, p in enumerate(live) for j in range(p.size)]
    else:
        rng = np.random.default_rng(seed)
        flat = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        picks = []
        for f in sorted(flat):
            k = int(np.searchsorted(bounds, f, side="right"))
            picks.append((k, int(f - (bounds[k - 1] if k else 0))))

    for k, j in picks:
        p = live[k]
        flat_view = p.data.reshape(-1)
        orig = flat_view[j]
        # the representable spacing, not 2 * step, is what the difference spans
        span = float((orig + step) - (orig - step))
        with no_grad():
            if residual_fn is None:
                flat_view[j] = orig + step
                fp = _scalar(loss_fn())
                flat_view[j] = orig - step
                fm = _scalar(loss_fn())
                diff = fp - fm
            else:
                flat_view[j] = orig + step
                rp = residual_fn().data
                flat_view[j] = orig - step
                rm = residual_fn().data
                diff = float(np.mean((rp - rm) * (rp + rm)))
        flat_view[j] = orig
        num = diff / span
        g = grads.get(p.name)
        ana = 0.0 if g is None else float(g.reshape(-1)[j])
        err = rel_err(ana, num)
        idx = tuple(int(i) for i in np.unravel_index(j, p.shape))
        report.coords.append(CoordResult(p.name, idx, ana, num, err))
        report.max_rel_err[p.name] = max(report.max_rel_err.get(p.name, 0.0), err)
    return report
