"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward


@dataclass
class GradCheckReport:
    passed: bool
    max_abs_error: float
    max_rel_error: float
    n_checked: int
    failures: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def _analytic(f, leaves):
    with Tape() as tape:
        loss = f(*leaves)
    return backward(tape, loss, leaves)


def _value(f, leaves) -> float:
    out = f(*leaves).item()
    if not np.isfinite(out):
        raise NonFiniteError("grad_check: non-finite function value")
    return out


def grad_check(f: Callable[..., Tensor], point: Sequence, step: float = 1e-5,
               rtol: float = 1e-4, atol: float = 1e-7,
               grad_fn: Callable | None = None) -> GradCheckReport:
    """Compare analytic and central-difference gradients of scalar ``f``.

    ``point`` is a sequence of arrays or leaf Tensors (leaves are perturbed in
    place and restored). A coordinate passes when
    ``|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)``.
    ``grad_fn`` replaces the tape gradient; used to test the checker itself.
    """
    leaves = [p if isinstance(p, Tensor) else Tensor(p, requires_grad=True) for p in point]
    for leaf in leaves:
        leaf.requires_grad = True
    if grad_fn is None:
        g = _analytic(f, leaves)
        analytic = [g[leaf] for leaf in leaves]
    else:
        analytic = [np.asarray(a, dtype=np.float64) for a in grad_fn(*leaves)]

    max_abs = max_rel = 0.0
    failures = []
    count = 0
    for li, leaf in enumerate(leaves):
        flat = leaf.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _value(f, leaves)
            flat[i] = orig - step
            fm = _value(f, leaves)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            ana = float(analytic[li].reshape(-1)[i])
            err = abs(ana - num)
            scale_ = max(abs(ana), abs(num))
            rel = err / scale_ if scale_ > 0 else 0.0
            max_abs = max(max_abs, err)
            if err > atol:
                max_rel = max(max_rel, rel)
            if err > atol + rtol * scale_:
                failures.append((li, i, ana, num))
            count += 1
    return GradCheckReport(not failures, max_abs, max_rel, count, failures)
