"""Shared numerical primitives: stable softmax and seeded random streams.

All arrays are float64 numpy arrays in C (row-major) order. Random numbers
come from numpy's PCG64 bit generator, which is fully specified and produces
identical streams on every platform for a given seed.
"""

import numpy as np

DTYPE = np.float64


class NumericalError(ValueError):
    """Raised when a computation meets or produces non-finite values."""


def make_rng(seed, *spawn_key):
    """Return a PCG64-backed Generator for ``seed``.

    Extra integers select an independent child stream (numpy SeedSequence
    spawn keys), so ``make_rng(seed, i)`` gives the i-th context its own
    stream regardless of generation order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.PCG64(ss))


def sample_gaussian(rng, n):
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal(n)


def stable_softmax(v, axis=-1):
    """Softmax along ``axis`` computed with max-subtraction."""
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(v)):
        raise NumericalError("non-finite logits")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis=-1):
    v = np.asarray(v, dtype=DTYPE)
    if not np.all(np.isfinite(v)):
        raise NumericalError("non-finite logits")
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def block_diag(top, bottom):
    """Two-block diagonal matrix from square blocks ``top`` and ``bottom``."""
    top = np.atleast_2d(np.asarray(top, dtype=DTYPE))
    bottom = np.atleast_2d(np.asarray(bottom, dtype=DTYPE))
    a, b = top.shape[0], bottom.shape[0]
    out = np.zeros((a + b, a + b))
    out[:a, :a] = top
    out[a:, a:] = bottom
    return out
