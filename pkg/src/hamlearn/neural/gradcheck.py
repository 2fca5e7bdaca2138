"""Central finite-difference checks of autodiff gradients."""
from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from .autodiff import Tensor


def numerical_gradient(
    f: Callable[[Dict[str, np.ndarray]], float],
    params: Dict[str, np.ndarray],
    step: float = 1e-5,
    coords: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. every entry of ``params``.

    ``coords`` restricts the check to the given flat indices per tensor; other
    entries are left as NaN.
    """
    grads = {}
    for name, p in params.items():
        g = np.full(p.shape, np.nan)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        idx = range(flat.size) if coords is None else coords.get(name, ())
        for k in idx:
            old = flat[k]
            flat[k] = old + step
            up = f(params)
            flat[k] = old - step
            down = f(params)
            flat[k] = old
            gflat[k] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def autodiff_gradient(
    f_tensor: Callable[[Dict[str, Tensor]], Tensor], params: Dict[str, np.ndarray]
) -> Dict[str, np.ndarray]:
    leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in params.items()}
    out = f_tensor(leaves)
    out.backward()
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise; NaN entries of ``numeric`` are dropped."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    keep = np.isfinite(n)
    a, n = a[keep], n[keep]
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(
    f_tensor: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-8,
    coords: Optional[Dict[str, np.ndarray]] = None,
) -> np.ndarray:
    """Relative errors of autodiff against central differences, all tensors pooled."""
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    analytic = autodiff_gradient(f_tensor, params)

    def f(p):
        return float(f_tensor({k: Tensor(v) for k, v in p.items()}).data)

    numeric = numerical_gradient(f, params, step, coords)
    return np.concatenate([relative_errors(analytic[k], numeric[k], floor) for k in params])
