"""Adam optimizer and gradient-norm utilities for the autodiff tensors."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import NonFiniteValue, ShapeMismatch, Tensor


class MissingGradient(RuntimeError):
    """step() was called but no parameter carries a gradient."""


class Adam:
    """Adam with bias correction; moment arrays are keyed by parameter name.

    Gradients are cleared after each step so the next backward pass starts
    from zero. Parameters whose gradient was never populated in an iteration
    are treated as having a zero gradient (their moments simply decay), but
    if *no* parameter has a gradient the call is a caller bug and raises
    :class:`MissingGradient`.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 < beta1 < 1.0 or not 0.0 < beta2 < 1.0:
            raise ValueError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
        if not 0.0 < eps < 1e-2:
            raise ValueError(f"eps must lie in (0, 1e-2), got {eps}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        """Apply one Adam update to every named parameter."""
        if not params:
            raise MissingGradient("step() called with no parameters")
        if not any(p.has_grad() for p in params.values()):
            raise MissingGradient("no parameter carries a gradient; run backward() first")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = p._grad if p._grad is not None else np.zeros_like(p.values)
            if not np.isfinite(g).all():
                raise NonFiniteValue(f"non-finite gradient for parameter {name!r}")
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.values)
                v = np.zeros_like(p.values)
            else:
                v = self._v[name]
                if m.shape != p.values.shape:
                    raise ShapeMismatch(
                        f"moment shape {m.shape} does not match parameter {name!r} {p.shape}")
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            p.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p._grad = None

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self._m.items()},
            "v": {k: v.copy() for k, v in self._v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self._m = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state["m"].items()}
        self._v = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state["v"].items()}


def global_grad_norm(params: dict[str, Tensor]) -> float:
    """Euclidean norm of all gradients stacked into one vector."""
    total = 0.0
    for p in params.values():
        if p._grad is not None:
            total += float((p._grad * p._grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p._grad is not None:
                p._grad *= scale
    return norm
