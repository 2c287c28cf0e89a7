"""Shared test oracles: finite-difference gradients and comparison rules."""

from __future__ import annotations

from typing import Callable

import numpy as np

from vcnav.autodiff import Tape, Tensor, backward

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7  # for gradient pairs that are both essentially zero


def fd_gradients(fn: Callable[[], float], params: dict[str, Tensor],
                 h: float = FD_STEP) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function w.r.t. each parameter element.

    ``fn`` must be a pure re-evaluation of the forward pass reading the live
    parameter values (any internal randomness must be re-seeded per call).
    """
    out = {}
    for name, p in params.items():
        flat = p.values.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        out[name] = g.reshape(p.values.shape)
    return out


def max_rel_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    """Worst elementwise relative error, with an absolute fallback near zero."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(diff <= ABS_TOL, 0.0, diff / np.maximum(scale, 1e-300))
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


def check_gradients(build: Callable[[], Tensor], params: dict[str, Tensor],
                    rel_tol: float = REL_TOL) -> float:
    """Compare backward() gradients against the finite-difference oracle.

    ``build`` runs one forward pass and returns the scalar loss tensor; it is
    called once under a tape for backward and repeatedly (untaped) for the
    finite differences.
    """
    for p in params.values():
        p.zero_grad()
    with Tape():
        loss = build()
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    numeric = fd_gradients(lambda: float(build().values.reshape(())), params)
    err = max_rel_error(analytic, numeric)
    assert err < rel_tol, f"gradient mismatch: max relative error {err:.3e} >= {rel_tol}"
    return err
