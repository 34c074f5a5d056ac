"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

# Denominator floor for the relative error; keeps components whose true
# gradient is numerically zero from dividing FD noise by FD noise.
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: tuple[int, tuple[int, ...]] | None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def _set(t: Tensor, idx: tuple[int, ...], value: float) -> None:
    # Tensors are frozen for callers; the checker is the one place that edits in place.
    t.data.flags.writeable = True
    t.data[idx] = value
    t.data.flags.writeable = False


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild its graph from ``params`` on every call. With
    ``samples`` set, that many (parameter, index) pairs are drawn uniformly
    over all scalar entries instead of checking every entry.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape, params)

    entries = [(p, idx) for p, t in enumerate(params) for idx in np.ndindex(t.shape)]
    if samples is not None and samples < len(entries):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(entries), size=samples, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    worst, worst_at = 0.0, None
    for p, idx in entries:
        t = params[p]
        orig = float(t.data[idx])
        _set(t, idx, orig + h)
        up = loss_fn().item()
        _set(t, idx, orig - h)
        down = loss_fn().item()
        _set(t, idx, orig)
        err = relative_error(float(grads[p][idx]), (up - down) / (2 * h))
        if err > worst:
            worst, worst_at = err, (p, idx)
    return GradCheckReport(worst, len(entries), worst_at)
