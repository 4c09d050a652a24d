"""Finite-difference gradient checking.

The oracle is central differences computed in whatever dtype the parameters
carry; callers who want the full 64-bit reference build their model with
float64 parameters. The check is independent of the tape's backward rules by
construction: it only ever calls the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Parameter, Tape, Tensor, backward, mul, sum_all


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    tolerance: float
    worst: tuple[str, int, float, float]  # (param name, flat index, analytic, fd)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(analytic: float, fd: float) -> float:
    denom = max(abs(analytic), abs(fd))
    if denom < 1e-7:
        return abs(analytic - fd)  # both effectively zero; compare absolutely
    return abs(analytic - fd) / denom


def grad_check(
    forward,
    params: list[Parameter],
    x,
    tolerance: float = 1e-4,
    n_coords: int = 200,
    h: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    `forward(x)` may return any shape; it is reduced to a scalar by a fixed
    random projection so one backward pass covers every output. At least
    n_coords parameter coordinates are sampled across all params.
    """
    rng = np.random.default_rng(seed)

    out_probe = forward(x)
    proj = Tensor(rng.standard_normal(out_probe.data.shape), dtype=out_probe.data.dtype)

    def loss() -> Tensor:
        return sum_all(mul(forward(x), proj))

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        backward(tape, loss())
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    total = sum(p.data.size for p in params)
    n_coords = min(max(n_coords, len(params)), total)
    # sample coordinates roughly proportionally to parameter size, >=1 each
    picks: list[tuple[Parameter, int]] = []
    for p in params:
        k = max(1, round(n_coords * p.data.size / total))
        idx = rng.choice(p.data.size, size=min(k, p.data.size), replace=False)
        picks.extend((p, int(i)) for i in idx)

    worst = ("", -1, 0.0, 0.0)
    max_err = 0.0
    for p, i in picks:
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss().item()
        flat[i] = orig - h
        down = loss().item()
        flat[i] = orig
        fd = (up - down) / (2.0 * h)
        a = float(analytic[p.name].reshape(-1)[i])
        err = _rel_error(a, fd)
        if err > max_err:
            max_err = err
            worst = (p.name, i, a, fd)
    return GradCheckReport(max_rel_error=max_err, n_coords=len(picks),
                           tolerance=tolerance, worst=worst)
