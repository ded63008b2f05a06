"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradSample:
    tensor_index: int
    coord: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), 1e-6)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    n_coords: int = 5,
    h: float = 1e-3,
    seed: int = 0,
) -> List[GradSample]:
    """Compare analytic and numeric gradients of a scalar function.

    The analytic gradient is taken from ``fn`` evaluated on ``inputs`` as
    given (float32 in practice). The numeric oracle re-evaluates ``fn`` on
    float64 copies so that f32 rounding does not pollute the difference
    quotient. ``n_coords`` random coordinates are probed per input that
    requires grad.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    samples: List[GradSample] = []
    base64 = [t.data.astype(np.float64) for t in inputs]
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        grad_k = analytic[k] if analytic[k] is not None else np.zeros(t.shape)
        flat = rng.choice(t.size, size=min(n_coords, t.size), replace=False)
        for f in flat:
            coord = np.unravel_index(int(f), t.shape)
            vals = []
            for sign in (1.0, -1.0):
                arrays = [a.copy() for a in base64]
                arrays[k][coord] += sign * h
                probe = [Tensor(a, requires_grad=False) for a in arrays]
                vals.append(float(fn(*probe).data))
            numeric = (vals[0] - vals[1]) / (2 * h)
            samples.append(GradSample(k, tuple(int(c) for c in coord), float(grad_k[coord]), numeric))
    return samples


def max_rel_err(samples: Sequence[GradSample]) -> float:
    return max((s.rel_err for s in samples), default=0.0)
