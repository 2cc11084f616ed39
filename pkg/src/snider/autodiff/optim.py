from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import Parameter


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: Sequence[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place. Gradients are left untouched."""
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing[:5])}")
    for p in params:
        dt = p.data.dtype.type
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= dt(beta1)
        p.adam_m += dt(1 - beta1) * g
        p.adam_v *= dt(beta2)
        p.adam_v += dt(1 - beta2) * (g * g)
        m_hat = p.adam_m / dt(1 - beta1**t)
        v_hat = p.adam_v / dt(1 - beta2**t)
        p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))


def global_grad_norm(params: Iterable[Parameter]) -> float:
    acc = 0.0
    for p in params:
        if p.grad is not None:
            acc += float(np.dot(p.grad.reshape(-1).astype(np.float64), p.grad.reshape(-1).astype(np.float64)))
    return math.sqrt(acc)


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm
