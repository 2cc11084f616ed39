"""Finite-difference verification of the full multi-task gradient.

Checking every scalar of a multi-million-parameter model by central
differences is out of reach, so each parameter tensor is probed at its
largest-gradient entry plus a few seeded random entries, and the whole
gradient is additionally checked along random directions (a directional
derivative touches every entry at once).

Central differences approximate a derivative only where the function is
smooth over [x - h, x + h]. With small initial weights many leaky_relu
inputs and L1 residuals sit near zero, so a step of h often crosses a kink.
The perturbed evaluations therefore replay the branch choices (signs,
pooling argmax, clamp masks) of the unperturbed point: they evaluate the
smooth piece that contains x, whose derivative at x is the true one. Probes
where replay overrode a live branch are counted in ``kink_crossings``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tape, backward, precision
from .networks import SniderModel, build_snider
from .training import Batch, LossWeights, _loss_tensors

DEFAULT_H = 1e-3
DEFAULT_TOL = 1e-3
# gradients below this magnitude are compared absolutely against it
GRAD_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def random_batch(size: int, batch: int, seed: int, dtype=np.float64) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        rng.uniform(0, 1, (batch, 3, size, size)).astype(dtype),
        rng.uniform(0, 1, (batch, 3, size, size)).astype(dtype),
        rng.uniform(0, 1, (batch, 3, size, size)).astype(dtype),
        (rng.uniform(0, 1, (batch, 1, size, size)) > 0.5).astype(dtype),
        rng.integers(4, 9, (batch, 1)).astype(dtype),
    )


def total_loss(model: SniderModel, batch: Batch, weights: LossWeights):
    return F.weighted_sum(_loss_tensors(model, batch), weights.as_tuple())


@dataclass
class GradCheckResult:
    # (parameter, index, analytic, numeric, relative error)
    entries: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)
    # (analytic, numeric, relative error) along random unit directions
    directional: list[tuple[float, float, float]] = field(default_factory=list)
    kink_crossings: int = 0

    @property
    def max_rel_error(self) -> float:
        errs = [e[-1] for e in self.entries] + [d[-1] for d in self.directional]
        return max(errs) if errs else 0.0

    def failures(self, tol: float = DEFAULT_TOL) -> list:
        return [e for e in self.entries if e[-1] > tol] + [d for d in self.directional if d[-1] > tol]

    @property
    def n_params_checked(self) -> int:
        return len({e[0] for e in self.entries})

    def worst(self, k: int = 5) -> list:
        return sorted(self.entries, key=lambda e: -e[-1])[:k]


def check_model_gradients(
    variant: str = "tiny",
    size: int = 8,
    seed: int = 0,
    batch: int = 4,
    h: float = DEFAULT_H,
    random_entries: int = 2,
    directions: int = 3,
    weights: LossWeights | None = None,
) -> GradCheckResult:
    """Compare backprop with central differences of the weighted total loss in 64-bit mode."""
    weights = weights or LossWeights()
    with precision(np.float64):
        model = build_snider(variant, size, seed)
        data = random_batch(size, batch, seed + 1)
        params = list(model.named_parameters())

        for _, p in params:
            p.grad = None
        with F.trace_branches() as base_trace, Tape() as tape:
            loss = total_loss(model, data, weights)
        backward(loss, tape)
        grads = {name: p.grad.copy() for name, p in params}
        result = GradCheckResult()

        def evaluate() -> float:
            with F.trace_branches(replay=base_trace) as trace:
                value = total_loss(model, data, weights).item()
            result.kink_crossings += trace.crossed()
            return value

        def central(perturb) -> float:
            perturb(h)
            up = evaluate()
            perturb(-h)
            down = evaluate()
            perturb(0.0)
            return (up - down) / (2 * h)

        rng = np.random.default_rng(seed + 2)
        for name, p in params:
            g = grads[name].reshape(-1)
            flat = p.data.reshape(-1)
            picks = {int(np.argmax(np.abs(g)))}
            picks.update(int(i) for i in rng.choice(flat.size, size=min(random_entries, flat.size), replace=False))
            for i in sorted(picks):
                old = flat[i]

                def perturb(delta, i=i, old=old):
                    flat[i] = old + delta

                num = central(perturb)
                ana = float(g[i])
                index = tuple(int(v) for v in np.unravel_index(i, p.shape))
                result.entries.append((name, index, ana, num, relative_error(ana, num)))

        base = {name: p.data.copy() for name, p in params}
        for _ in range(directions):
            dirs = {name: rng.standard_normal(p.shape) for name, p in params}
            norm = np.sqrt(sum(float((d * d).sum()) for d in dirs.values()))

            def perturb(delta):
                for name, p in params:
                    p.data[...] = base[name] + (delta / norm) * dirs[name]

            num = central(perturb)
            ana = sum(float((grads[n] * d).sum()) for n, d in dirs.items()) / norm
            result.directional.append((ana, num, relative_error(ana, num)))
    return result
