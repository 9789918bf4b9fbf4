"""Dense linear-algebra kernels used by the moment equations.

``vec`` is column-major throughout, so that ``vec(A X B) == kron(B.T, A) @ vec(X)``.
"""
from __future__ import annotations

import numpy as np

# Diagonal Pade(6, 6) coefficients: c_k = c_{k-1} (q - k + 1) / (k (2q - k + 1)).
_PADE_ORDER = 6
_PADE_COEFFS = [1.0]
for _k in range(1, _PADE_ORDER + 1):
    _PADE_COEFFS.append(
        _PADE_COEFFS[-1] * (_PADE_ORDER - _k + 1) / (_k * (2 * _PADE_ORDER - _k + 1))
    )
_PADE_COEFFS = tuple(_PADE_COEFFS)

# Scaled matrix norm bound for the Pade approximant.
_THETA = 0.5


class ExpmOverflowError(ArithmeticError):
    """Raised when squaring in the matrix exponential overflows."""


def vec(X: np.ndarray) -> np.ndarray:
    return np.asarray(X).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int | None = None) -> np.ndarray:
    return np.asarray(v).reshape((rows, rows if cols is None else cols), order="F")


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product of two 2-d arrays (1-d inputs are taken as rows)."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2:
        A = np.atleast_2d(A)
    if B.ndim != 2:
        B = np.atleast_2d(B)
    ra, ca = A.shape
    rb, cb = B.shape
    # faster than np.kron for the tiny operands used here
    return (A[:, None, :, None] * B[None, :, None, :]).reshape(ra * rb, ca * cb)


def kron_sum(A, B) -> np.ndarray:
    """Kronecker sum ``A (+) B = A (x) I + I (x) B``.

    Square d x d inputs give a d^2 x d^2 matrix. Two d-vectors are treated as
    d x 1 columns, which gives a d^2 x d matrix.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim == 1 and B.ndim == 1:
        if A.shape != B.shape:
            raise ValueError(f"vector Kronecker sum needs equal lengths, got {A.shape} and {B.shape}")
        eye = np.eye(A.shape[0])
        return kron(A[:, None], eye) + kron(eye, B[:, None])
    if A.ndim == 2 and B.ndim == 2:
        if A.shape[0] != A.shape[1] or A.shape != B.shape:
            raise ValueError(f"matrix Kronecker sum needs equal square shapes, got {A.shape} and {B.shape}")
        eye = np.eye(A.shape[0])
        return kron(A, eye) + kron(eye, B)
    raise ValueError("kron_sum arguments must both be vectors or both be square matrices")


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential by Pade(6, 6) with scaling and squaring.

    Accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``. The scaling
    power is chosen so that the infinity norm of every scaled matrix is at
    most 0.5, where the Pade truncation error is below unit roundoff.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expm needs square matrices, got shape {A.shape}")
    n = A.shape[-1]
    norm = float(np.abs(A).sum(axis=-1).max()) if A.size else 0.0
    if not np.isfinite(norm):
        raise ValueError("expm input has non-finite entries")
    s = 0
    if norm > _THETA:
        s = int(np.ceil(np.log2(norm / _THETA)))
    X = A * (0.5 ** s) if s else A
    c = _PADE_COEFFS
    X2 = X @ X
    X4 = X2 @ X2
    X6 = X4 @ X2
    V = c[2] * X2 + c[4] * X4 + c[6] * X6
    W = c[3] * X2 + c[5] * X4
    idx = np.arange(n)
    V[..., idx, idx] += c[0]
    W[..., idx, idx] += c[1]
    U = X @ W
    E = np.linalg.solve(V - U, V + U)
    if s:
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(s):
                E = E @ E
    if not np.isfinite(E).all():
        raise ExpmOverflowError(f"matrix exponential overflowed after {s} squarings (norm {norm:.3g})")
    return E


def psd_repair(S: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Nearest symmetric PSD matrix in Frobenius norm, plus ``jitter * I``."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"psd_repair needs a square matrix, got shape {S.shape}")
    sym = 0.5 * (S + S.T)
    w, Q = np.linalg.eigh(sym)
    if w[0] >= 0.0 and jitter == 0.0:
        return sym
    out = (Q * np.clip(w, 0.0, None)) @ Q.T
    out = 0.5 * (out + out.T)
    if jitter:
        out = out + jitter * np.eye(S.shape[0])
    return out
