"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``param``.

    ``fn`` must rebuild its graph from ``param.data`` on every call.  When
    ``indices`` is given only those entries are probed; others stay NaN.
    """
    out = np.full(param.shape, np.nan) if indices is not None else np.zeros(param.shape)
    it = indices if indices is not None else list(np.ndindex(*param.shape))
    for idx in it:
        old = param.data[idx].copy()
        param.data[idx] = old + h
        fp = float(fn().data)
        param.data[idx] = old - h
        fm = float(fn().data)
        param.data[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max absolute difference scaled by the largest gradient magnitude."""
    ok = ~np.isnan(numeric)
    a = np.asarray(analytic, dtype=np.float64)[ok]
    n = np.asarray(numeric, dtype=np.float64)[ok]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def check_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    sample: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare backward() against finite differences for each named parameter.

    Returns the relative error per parameter.  With ``sample`` set, that many
    random entries per parameter are probed instead of all of them.
    """
    for p in params.values():
        p.grad = None
    fn().backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for k, p in params.items()}
    errors = {}
    for name, p in params.items():
        idx = None
        if sample is not None and p.size > sample:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.size, size=sample, replace=False)
            idx = [np.unravel_index(i, p.shape) for i in flat]
        num = numerical_grad(fn, p, h=h, indices=idx)
        errors[name] = relative_error(analytic[name], num)
    return errors
