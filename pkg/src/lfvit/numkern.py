"""Dense float32 kernels shared by every stage of the model.

Tensors are plain ``numpy.ndarray`` objects in float32, row-major.  All
kernels are pure and never mutate their inputs.
"""

import numpy as np
from scipy.special import erf

from lfvit.errors import DimensionError

DTYPE = np.float32


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    """``a @ b`` for ``a[..., M, K]`` and ``b[K, N]`` (or matching batch dims)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return np.matmul(a, b)


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta_shift, eps: float = 1e-6) -> np.ndarray:
    x = as_tensor(x)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + DTYPE(eps)) * as_tensor(gamma) + as_tensor(beta_shift)


def gelu(x) -> np.ndarray:
    # exact erf form, not the tanh approximation
    x = as_tensor(x)
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(DTYPE)


def linear(x, weight, bias=None) -> np.ndarray:
    """``x @ weight + bias`` over the last axis; leading axes are flattened into one GEMM."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), weight).reshape(*lead, -1)
    if bias is not None:
        y = y + bias
    return y
