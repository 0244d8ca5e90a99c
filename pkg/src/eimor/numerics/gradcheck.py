"""Central-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, no_tape


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    tol: float
    checked: int
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_err <= self.tol


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _shifted(evaluate, flat, c, value) -> float:
    orig = flat[c]
    flat[c] = value
    try:
        return evaluate()
    finally:
        flat[c] = orig


def gradcheck(f, params, eps: float = 1e-6, tol: float = 1e-4, samples: int = 32,
              seed: int = 0, order: int = 2) -> GradcheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``params`` maps names to leaf tensors (a list is named by position). At
    most ``samples`` random coordinates per tensor are probed; the step for
    coordinate ``i`` is ``eps * max(1, |theta_i|)``. ``order=4`` uses the
    five-point stencil, which tolerates a larger step and so keeps roundoff
    from swamping very small gradients in deep models.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"gradcheck needs 64-bit tensors; {name} is {p.data.dtype}")

    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    offsets = (1, -1) if order == 2 else (1, -1, 2, -2)
    report = GradcheckReport(0.0, None, None, tol, 0)

    def evaluate() -> float:
        with no_tape():
            return float(f().data)

    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        bad = np.argwhere(~np.isfinite(analytic))
        if len(bad):
            report.failures.append(f"{name}{tuple(int(i) for i in bad[0])}: non-finite gradient")
            continue
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > samples:
            coords = np.sort(rng.choice(flat.size, size=samples, replace=False))
        for c in coords:
            orig = flat[c]
            h = eps * max(1.0, abs(orig))

            at = {k: _shifted(evaluate, flat, c, orig + k * h) for k in offsets}
            if order == 2:
                numeric = (at[1] - at[-1]) / (2 * h)
            else:
                numeric = (8 * (at[1] - at[-1]) - (at[2] - at[-2])) / (12 * h)
            a = float(analytic.reshape(-1)[c])
            err = rel_err(a, numeric)
            report.checked += 1
            if not np.isfinite(err):
                report.failures.append(f"{name}{np.unravel_index(c, p.shape)}: non-finite difference")
                continue
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_param = name
                report.worst_index = tuple(int(i) for i in np.unravel_index(c, p.shape))
    return report
