"""Dense float64 kernel: the few differentiable primitives the model needs.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Random
streams use numpy's PCG64 bit generator seeded through ``SeedSequence``,
which is stable across platforms and numpy releases.
"""

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "as_matrix",
    "matmul",
    "tanh_elem",
    "sigm_elem",
    "hadamard",
    "softmax_rows",
    "derive_rng",
    "gaussian_noise",
    "grad_check",
]


def as_matrix(a, name="array"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def tanh_elem(a):
    return np.tanh(np.asarray(a, dtype=np.float64))


def sigm_elem(a):
    a = np.asarray(a, dtype=np.float64)
    # exp(-log(1 + e^-a)) never overflows
    return np.exp(-np.logaddexp(0.0, -a))


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def softmax_rows(a):
    a = as_matrix(a)
    if a.shape[1] == 0:
        raise ShapeError("softmax_rows needs non-empty rows")
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def derive_rng(seed, *keys):
    """Independent generator for ``(seed, *keys)``.

    Keys are non-negative integers, e.g. ``derive_rng(seed, round, client)``.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def gaussian_noise(rng, shape, sigma):
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.zeros(shape)
    return rng.normal(0.0, sigma, size=shape)


def grad_check(f, x, eps=1e-5):
    """Max relative error between the analytic and central-difference gradients.

    ``f(x)`` returns ``(value, gradient)``. The error for coordinate i is
    ``|g_a - g_n| / max(1, |g_a|, |g_n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    value, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic.shape} does not match x {x.shape}")
    if not np.isfinite(value):
        raise NumericError("f is not finite at x")

    numeric = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        fp = f(xp)[0]
        fm = f(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2 * eps)

    if x.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
