"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Graph, Tensor, _frozen, backward


@dataclass(frozen=True)
class GradReport:
    max_abs_err: float
    max_rel_err: float
    worst_param: tuple  # (parameter name, flat index)
    n_checked: int

    def to_dict(self) -> dict:
        return {
            "max_abs_err": self.max_abs_err,
            "max_rel_err": self.max_rel_err,
            "worst_param": {"name": self.worst_param[0], "index": self.worst_param[1]},
            "n_checked": self.n_checked,
        }


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {t.shape}")
    return float(t.data.reshape(-1)[0])


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> GradReport:
    """Compare ``backward`` against central differences on every coordinate.

    ``f`` must be deterministic (disable dropout). Relative error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``. Parameter data is
    restored before returning.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    with Graph() as graph:
        loss = f(params)
    reference = _scalar(loss)
    analytic = backward(graph, loss, params)
    if _scalar(f(params)) != reference:
        raise ContractError("function is not deterministic: two evaluations disagree")

    worst_abs, worst_rel, worst = 0.0, 0.0, ("", -1)
    n = 0
    for name, p in params.items():
        original = p.data
        grad = analytic[name].data.reshape(-1)
        try:
            for i in range(original.size):
                probe = original.copy()
                probe.flat[i] = original.flat[i] + eps
                p.data = _frozen(probe)
                f_plus = _scalar(f(params))
                probe = original.copy()
                probe.flat[i] = original.flat[i] - eps
                p.data = _frozen(probe)
                f_minus = _scalar(f(params))
                numeric = (f_plus - f_minus) / (2 * eps)
                abs_err = abs(grad[i] - numeric)
                rel_err = abs_err / max(1e-8, abs(grad[i]) + abs(numeric))
                worst_abs = max(worst_abs, abs_err)
                if rel_err > worst_rel or worst[1] < 0:
                    worst_rel, worst = max(worst_rel, rel_err), (name, i)
                n += 1
        finally:
            p.data = original
    return GradReport(float(worst_abs), float(worst_rel), worst, n)
