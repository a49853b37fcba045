"""Shared test utilities: finite-difference gradient oracle and helpers."""

import numpy as np
import pytest

from fass.engine import Tape


def fd_gradient(fn, tensors, step=1e-3):
    """Central finite differences of a scalar-tensor function, per input.

    Returns (analytic, numeric) gradient pairs in input order.  fn must be
    re-evaluable: it is called repeatedly with the same tensor objects while
    their data is perturbed in place.
    """
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    pairs = []
    for t in tensors:
        analytic = t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = fn().item()
            flat[i] = orig - step
            lm = fn().item()
            flat[i] = orig
            nflat[i] = (lp - lm) / (2.0 * step)
        pairs.append((analytic, numeric))
    return pairs


def relative_error(a, b):
    num = np.linalg.norm(a.astype(np.float64) - b.astype(np.float64))
    den = np.linalg.norm(a.astype(np.float64)) + np.linalg.norm(b.astype(np.float64)) + 1e-12
    return num / den


def assert_gradients_match(fn, tensors, step=1e-3, tol=1e-2):
    for i, (analytic, numeric) in enumerate(fd_gradient(fn, tensors, step)):
        err = relative_error(analytic, numeric)
        assert err < tol, f"gradient {i} mismatch: relative error {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
