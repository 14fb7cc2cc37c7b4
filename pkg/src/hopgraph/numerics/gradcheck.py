"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from hopgraph.errors import NumericError
from hopgraph.numerics.tensor import Parameter, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: Optional[tuple]  # (parameter name, flat index)
    checked: int
    tolerance: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Parameter],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. ``max_coords`` caps the coordinates probed per parameter (sampled
    with ``seed``); ``None`` checks every coordinate.
    """
    for p in params.values():
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("finite_difference_check: non-finite value at the base point")
    backward(out)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    rng = np.random.default_rng(seed)
    worst, worst_at, checked = 0.0, None, 0
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        local = 0.0
        for k in coords:
            orig = flat[k]
            flat[k] = orig + epsilon
            plus = f().item()
            flat[k] = orig - epsilon
            minus = f().item()
            flat[k] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"finite_difference_check: non-finite value perturbing {name}[{k}]")
            numeric = (plus - minus) / (2.0 * epsilon)
            err = relative_error(analytic[name].reshape(-1)[k], numeric, floor)
            local = max(local, err)
            if err > worst:
                worst, worst_at = err, (name, int(k))
            checked += 1
        per_param[name] = local
    return GradCheckReport(worst, worst_at, checked, tolerance, per_param)
