"""Pure-numpy versions of the compiled kernels, bitwise compatible with them."""

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    out = np.zeros((a.shape[0], b.shape[1]))
    tmp = np.empty_like(out)
    # one rank-1 update per k keeps the per-element summation order left-to-right
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[None, k, :], out=tmp)
        out += tmp
    return out


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError("bmm shape mismatch")
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]))
    tmp = np.empty_like(out)
    for k in range(a.shape[2]):
        np.multiply(a[:, :, k, None], b[:, None, k, :], out=tmp)
        out += tmp
    return out


def rowsum(x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        out += x[:, j]
    return out
