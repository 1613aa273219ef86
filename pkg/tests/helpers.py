"""Shared test utilities.

``finite_difference_grad`` is the independent gradient oracle: it evaluates a
plain ``f(arrays) -> float`` under central differences and never touches the
autodiff tape, so comparisons against analytic gradients are meaningful.
"""

from __future__ import annotations

import numpy as np

REPO_ROOT = __file__.rsplit("/", 2)[0]
GAMES_DIR = f"{REPO_ROOT}/games"


def finite_difference_grad(f, arrays, step: float = 1e-5, coords=None):
    """Central-difference gradients of ``f`` w.r.t. each array in ``arrays``.

    ``coords`` optionally limits the check to a list of flat indices per
    array (full gradients otherwise).  Returns a list of (indices, grads)
    pairs aligned with ``arrays``.
    """
    out = []
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        if coords is None:
            idx = np.arange(flat.size)
        else:
            idx = np.asarray(coords[k], dtype=np.int64)
        grads = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = f(arrays)
            flat[i] = orig - step
            down = f(arrays)
            flat[i] = orig
            grads[j] = (up - down) / (2.0 * step)
        out.append((idx, grads))
    return out


def assert_grads_close(analytic, fd_pairs, rtol: float = 1e-4, atol: float = 1e-7):
    """Compare analytic gradient arrays against finite-difference output."""
    for a, (idx, fd) in zip(analytic, fd_pairs):
        got = a.reshape(-1)[idx]
        ok = np.isclose(got, fd, rtol=rtol, atol=atol)
        if not ok.all():
            bad = np.argmin(ok)
            raise AssertionError(
                f"gradient mismatch at flat index {idx[bad]}: "
                f"analytic {got[bad]:.10g} vs finite-difference {fd[bad]:.10g}"
            )


def sample_coords(rng: np.random.Generator, size: int, k: int):
    """Up to ``k`` distinct flat indices into an array of ``size`` entries."""
    if size <= k:
        return np.arange(size)
    return rng.choice(size, size=k, replace=False)
