"""Central finite-difference verification of analytic gradients.

The numeric side only ever calls forward passes under ``no_grad``, so it
stays independent of the backward implementations it checks.  Intended for
float64 runs; float32 rounding drowns the comparison.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, clear_tape, no_grad


def numeric_gradient(fn, tensors: list, index: int, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn(*tensors).item()`` w.r.t. one input."""
    target = tensors[index]
    base = target.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn(*tensors).item()
            flat[i] = original - h
            minus = fn(*tensors).item()
            flat[i] = original
            gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradients(fn, tensors: list) -> list:
    """Backward-pass gradients of ``fn(*tensors)`` for each input."""
    for t in tensors:
        t.grad = None
    clear_tape()
    out = fn(*tensors)
    out.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def gradient_error(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float) -> float:
    """Worst elementwise relative error, with an absolute floor.

    The floor enters through the denominator: wherever both gradients are
    below atol/rtol in magnitude, a difference of atol still passes.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    fn,
    tensors: list,
    wrt: list | None = None,
    h: float = 1e-5,
    rtol: float = 1e-6,
    atol: float = 1e-9,
) -> float:
    """Compare analytic and central-difference gradients of a scalar map.

    ``fn`` must map the given tensors to a scalar Tensor.  Returns the worst
    relative error across the checked inputs and raises ``AssertionError``
    beyond ``rtol``.
    """
    if wrt is None:
        wrt = [i for i, t in enumerate(tensors) if t.requires_grad]
    analytic = analytic_gradients(fn, tensors)
    worst = 0.0
    for i in wrt:
        numeric = numeric_gradient(fn, tensors, i, h=h)
        err = gradient_error(analytic[i], numeric, rtol, atol)
        worst = max(worst, err)
        if err >= rtol:
            raise AssertionError(
                f"gradient mismatch on input {i}: relative error {err:.3e} >= {rtol:.1e}"
            )
    return worst


def random_tensor(rng: np.random.Generator, shape: tuple, scale: float = 1.0, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=requires_grad)


def random_tensor_away_from(
    rng: np.random.Generator,
    shape: tuple,
    margin: float = 0.25,
    scale: float = 1.0,
    requires_grad: bool = True,
) -> Tensor:
    """Random tensor with every element at least ``margin`` from zero.

    Keeps finite differences clear of the kinks in relu/abs-style maps.
    """
    values = rng.uniform(margin, margin + scale, size=shape)
    signs = rng.choice((-1.0, 1.0), size=shape)
    return Tensor(values * signs, requires_grad=requires_grad)
