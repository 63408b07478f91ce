"""Central finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tape


class GradCheckError(AssertionError):
    def __init__(self, report):
        super().__init__(f"gradient check failed for {report.failing} "
                         f"(max rel. err {report.max_error:.3g} > {report.tolerance:g})")
        self.report = report


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failing(self) -> list:
        return [k for k, e in self.errors.items() if e > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing

    def __str__(self):
        rows = [f"{k:40s} {e:.3e}" for k, e in self.errors.items()]
        rows.append(f"max {self.max_error:.3e} tol {self.tolerance:g} -> "
                    f"{'pass' if self.passed else 'FAIL ' + ', '.join(self.failing)}")
        return "\n".join(rows)


def grad_check(loss_fn, params, h: float = 1e-3, tolerance: float = 1e-3,
               max_entries: int = 24, rng=None, raise_on_fail: bool = False,
               precision=None) -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``loss_fn``.

    ``loss_fn(tape)`` must build a scalar loss on ``tape`` from ``params``.
    For each parameter up to ``max_entries`` coordinates are probed; the
    error is ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-6)`` in vector norm.

    With ``precision=np.float64`` the parameters are promoted for the
    duration of the check (and restored afterwards), so both gradients are
    computed in double precision and float32 rounding of the loss does not
    swamp small derivatives.
    """
    params = list(params)
    if precision is not None:
        saved = [(p.data, p.grad) for p in params]
        try:
            for p in params:
                p.data = p.data.astype(precision)
                p.grad = np.zeros_like(p.data)
            return grad_check(loss_fn, params, h, tolerance, max_entries, rng, raise_on_fail)
        finally:
            for p, (d, g) in zip(params, saved):
                p.data, p.grad = d, g
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    def value():
        return float(loss_fn(Tape(record=False)).data)

    report = GradCheckReport(tolerance)
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            # use the step actually representable in the parameter dtype
            step = float(np.float32(orig + h)) - float(np.float32(orig - h)) \
                if p.data.dtype == np.float32 else 2 * h
            num[j] = (fp - fm) / step
        a = analytic[p.name].reshape(-1)[idx].astype(np.float64)
        denom = max(np.linalg.norm(a), np.linalg.norm(num), 1e-6)
        report.errors[p.name] = float(np.linalg.norm(a - num) / denom)
    if raise_on_fail and not report.passed:
        raise GradCheckError(report)
    return report
