"""Central finite-difference checks for the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .matcher import PARAM_NAMES, TinyMatcherParams, _backward, _forward


@dataclass
class GradCheckReport:
    block_errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_relative_error(self) -> float:
        return max(self.block_errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max |a - n| over the block, divided by the larger of the two max-norms."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_matcher_gradients(
    params: TinyMatcherParams, tokens: np.ndarray, dloss_dlogit: float = 1.0, h: float = 1e-4
) -> GradCheckReport:
    """Compare backprop against central differences of ``dloss_dlogit * logit``."""
    tokens = np.asarray(tokens, dtype=np.float64).reshape(1, *tokens.shape[-2:])
    _, cache = _forward(params, tokens)
    analytic = _backward(params, cache, np.array([dloss_dlogit]))
    report = GradCheckReport()
    work = params.copy()
    for name in PARAM_NAMES:
        base = work.blocks[name]

        def f(value: np.ndarray) -> float:
            work.blocks[name] = value
            return dloss_dlogit * float(_forward(work, tokens)[0][0])

        numeric = numeric_gradient(f, base, h)
        work.blocks[name] = base
        report.block_errors[name] = relative_error(analytic[name], numeric)
    return report
