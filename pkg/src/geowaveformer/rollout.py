"""Autoregressive roll-outs: the sliding-window scheme and the progressive
scheme that starts from a single initial field."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class RolloutDivergence(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite prediction at roll-out step {step}" + (f" ({detail})" if detail else ""))


def _one_step(model, window: list, cache: dict | None):
    if hasattr(model, "predict_next"):
        return model.predict_next(window, cache)
    return model(window)


def _finite(u) -> bool:
    data = u.data if isinstance(u, Tensor) else np.asarray(u)
    return bool(np.all(np.isfinite(data)))


def predict_steps(model, window, m: int, trace: list | None = None, cache: dict | None = None) -> list:
    """Predict ``m`` fields after ``window`` (``k`` fields, oldest first).

    After each step the oldest field is dropped and the prediction appended.
    ``trace`` (a list) receives the window used at every step. ``model`` is
    either an object with ``predict_next(window, cache)`` or a plain callable
    taking the window. Gradients flow through the predictions.
    """
    window = list(window)
    if len(window) < 1:
        raise ValueError("empty window")
    if m < 1:
        raise ValueError(f"horizon m must be >= 1, got {m}")
    cache = {} if cache is None else cache
    out = []
    for i in range(m):
        if trace is not None:
            trace.append(list(window))
        u = _one_step(model, window, cache)
        if not _finite(u):
            raise RolloutDivergence(i)
        out.append(u)
        window = window[1:] + [u]
    return out


def constant_window(u0, k: int) -> list:
    """``k`` references to the same initial field."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [u0] * k


def progressive_predict(model, u0, n: int, k: int | None = None, trace: list | None = None,
                        cache: dict | None = None) -> list:
    """Predict ``u_1..u_n`` from ``u_0`` alone.

    The first window is ``k`` copies of ``u_0``; each prediction then enters
    from the right, so the model runs ``n`` times.
    """
    if n < 1:
        raise ValueError(f"horizon n must be >= 1, got {n}")
    if k is None:
        k = model.config.window
    return predict_steps(model, constant_window(u0, k), n, trace=trace, cache=cache)


def to_numpy(fields) -> np.ndarray:
    """Stack a list of fields (Tensors or arrays) into ``(steps, N, d)``."""
    return np.stack([f.data if isinstance(f, Tensor) else np.asarray(f) for f in fields])


def rollout_numpy(model, window, m: int, progressive: bool = False) -> np.ndarray:
    """Gradient-free roll-out returning a ``(m, N, d)`` array."""
    with T.no_grad():
        if progressive:
            preds = progressive_predict(model, window[0] if isinstance(window, (list, tuple)) else window, m)
        else:
            preds = predict_steps(model, window, m)
    return to_numpy(preds)
