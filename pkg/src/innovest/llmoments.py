"""Order-beta Local Linearization prediction of the first two moments.

Over one fine-grid step starting at ``tau`` the drift and diffusion are
replaced by their linear-in-state, linear-in-time Ito-Taylor approximations::

    f ~ A x + a0 + a1 (t - tau)        g_i ~ B_i x + b_i0 + b_i1 (t - tau)

The resulting linear moment equations are solved exactly by a single matrix
exponential of the (d^2 + 2d + 7)-square block matrix ``M``: the mean
increment is ``L2 expm(M h) u`` and ``vec(P)`` is ``L1 expm(M h) u``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import SdeModel
from .numerics import expm, kron, kron_sum, vec


class MomentError(ArithmeticError):
    """Prediction failed (non-finite coefficients or exponential overflow)."""


@dataclass(frozen=True)
class ItoTaylorCoeffs:
    a0: np.ndarray  # (d,)
    a1: np.ndarray  # (d,)
    b0: np.ndarray  # (d, m), column i is b_{i,0}
    b1: np.ndarray  # (d, m)
    A: np.ndarray   # (d, d)
    B: np.ndarray   # (m, d, d)


@dataclass(frozen=True)
class MomentState:
    t: float
    y: np.ndarray
    P: np.ndarray

    @property
    def V(self) -> np.ndarray:
        return self.P - np.outer(self.y, self.y)

    @classmethod
    def from_mean_cov(cls, t, y, V) -> "MomentState":
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return cls(t, y, np.asarray(V, dtype=float) + np.outer(y, y))


@dataclass(frozen=True)
class Layout:
    """Index ranges of the blocks of ``M`` and ``u`` for state dimension d."""
    d: int

    @property
    def d2(self):
        return self.d * self.d

    @property
    def size(self):
        return self.d2 + 2 * self.d + 7

    @property
    def second(self):  # block driven by C and the third block
        return slice(self.d2, self.d2 + self.d + 2)

    @property
    def third(self):  # block started at r, first d entries are the mean increment
        return slice(self.d2 + self.d + 2, self.d2 + 2 * self.d + 4)

    @property
    def mean(self):
        return slice(self.d2 + self.d + 2, self.d2 + 2 * self.d + 2)

    @property
    def scalars(self):
        return self.d2 + 2 * self.d + 4  # first of the three scalar states


@lru_cache(maxsize=None)
def _layout(d: int) -> Layout:
    return Layout(d)


@lru_cache(maxsize=None)
def selectors(d: int):
    """``(L1, L2, L, r)`` for state dimension d."""
    lay = _layout(d)
    L1 = np.zeros((lay.d2, lay.size))
    L1[:, :lay.d2] = np.eye(lay.d2)
    L2 = np.zeros((d, lay.size))
    L2[:, lay.mean] = np.eye(d)
    L = np.hstack([np.eye(d), np.zeros((d, 2))])
    r = np.zeros(d + 2)
    r[-1] = 1.0
    return L1, L2, L, r


def ito_taylor_coeffs(model: SdeModel, beta: int, tau: float, y, theta) -> ItoTaylorCoeffs:
    if beta not in (1, 2):
        raise ValueError(f"beta must be 1 or 2, got {beta}")
    if beta == 2 and not model.has_hessians:
        raise ValueError("beta=2 needs drift and diffusion Hessian callbacks")
    y = np.asarray(y, dtype=float)
    A = np.asarray(model.drift_jac_x(tau, y, theta), dtype=float).reshape(model.d, model.d)
    a0 = np.asarray(model.drift(tau, y, theta), dtype=float) - A @ y
    a1 = np.array(model.drift_dt(tau, y, theta), dtype=float)
    B = np.asarray(model.diffusion_jac_x(tau, y, theta), dtype=float).reshape(model.m, model.d, model.d)
    G = np.asarray(model.diffusion(tau, y, theta), dtype=float).reshape(model.d, model.m)
    b0 = G - np.einsum("ijk,k->ji", B, y)
    b1 = np.array(model.diffusion_dt(tau, y, theta), dtype=float).reshape(model.d, model.m)
    if beta == 2:
        GGt = G @ G.T
        a1 = a1 + 0.5 * np.einsum("jl,kjl->k", GGt, model.drift_hess(tau, y, theta))
        b1 = b1 + 0.5 * np.einsum("jl,ikjl->ki", GGt, model.diffusion_hess(tau, y, theta))
    return ItoTaylorCoeffs(a0=a0, a1=a1, b0=b0, b1=b1, A=A, B=B)


@dataclass(frozen=True)
class AugmentedSystem:
    M: np.ndarray
    u: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    C_block: np.ndarray
    r: np.ndarray
    B_blocks: tuple  # (B1, B2, B3, B4, B5)
    beta: tuple      # (beta1, ..., beta5)
    Lsel: np.ndarray
    Acal: np.ndarray


def _assemble(co: ItoTaylorCoeffs, y: np.ndarray, P: np.ndarray):
    d = y.size
    lay = _layout(d)
    L1, L2, L, r = selectors(d)
    A, B, a0, a1, b0, b1 = co.A, co.B, co.a0, co.a1, co.b0, co.b1
    eye = np.eye(d)

    # vec(B P B^T) = (B kron B) vec(P) for column-major vec
    Acal = kron(A, eye) + kron(eye, A)
    beta4 = kron_sum(a0, a0)
    beta5 = kron_sum(a1, a1)
    if B.any():
        # sums over i of kron(B_i, B_i), kron(b_i, B_i) + kron(B_i, b_i)
        Acal += np.einsum("iab,ice->acbe", B, B).reshape(d * d, d * d)
        beta4 += (np.einsum("ai,icb->acb", b0, B) + np.einsum("iab,ci->acb", B, b0)).reshape(d * d, d)
        beta5 += (np.einsum("ai,icb->acb", b1, B) + np.einsum("iab,ci->acb", B, b1)).reshape(d * d, d)
    beta1 = b0 @ b0.T
    beta2 = b0 @ b1.T + b1 @ b0.T
    beta3 = b1 @ b1.T

    Cb = np.zeros((d + 2, d + 2))
    Cb[:d, :d] = A
    Cb[:d, d] = a1
    Cb[:d, d + 1] = A @ y + a0
    Cb[d, d + 1] = 1.0

    B1 = vec(beta1) + beta4 @ y
    B2 = vec(beta2) + beta5 @ y
    B3 = vec(beta3)
    B4 = beta4 @ L
    B5 = beta5 @ L

    n = lay.size
    d2 = lay.d2
    s = lay.scalars
    sec, thr = lay.second, lay.third
    M = np.zeros((n, n))
    M[:d2, :d2] = Acal
    M[:d2, sec] = B5
    M[:d2, thr] = B4
    M[:d2, s] = B3
    M[:d2, s + 1] = B2
    M[:d2, s + 2] = B1
    M[sec, sec] = Cb
    M[sec, thr] = np.eye(d + 2)
    M[thr, thr] = Cb
    M[s, s + 1] = 2.0
    M[s + 1, s + 2] = 1.0

    u = np.zeros(n)
    u[:d2] = vec(P)
    u[thr] = r
    u[-1] = 1.0
    return M, u, dict(L1=L1, L2=L2, C_block=Cb, r=r, B_blocks=(B1, B2, B3, B4, B5),
                      beta=(beta1, beta2, beta3, beta4, beta5), Lsel=L, Acal=Acal)


def build_augmented(model: SdeModel, beta: int, tau: float, state: MomentState, theta) -> AugmentedSystem:
    co = ito_taylor_coeffs(model, beta, tau, state.y, theta)
    M, u, parts = _assemble(co, np.asarray(state.y, dtype=float), np.asarray(state.P, dtype=float))
    return AugmentedSystem(M=M, u=u, **parts)


def predict_step(model: SdeModel, beta: int, state: MomentState, t_target: float, theta) -> MomentState:
    """Advance ``(y, P)`` from ``state.t`` to ``t_target`` with one exponential."""
    h = t_target - state.t
    if h < 0:
        raise ValueError(f"t_target {t_target} precedes state time {state.t}")
    y = np.asarray(state.y, dtype=float)
    co = ito_taylor_coeffs(model, beta, state.t, y, theta)
    M, u, _ = _assemble(co, y, np.asarray(state.P, dtype=float))
    if not np.all(np.isfinite(M)):
        raise MomentError(f"non-finite moment coefficients at t={state.t}")
    try:
        w = expm(M * h) @ u
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise MomentError(f"exponential failed on step [{state.t}, {t_target}]: {exc}") from exc
    d = y.size
    lay = _layout(d)
    y_new = y + w[lay.mean]
    P_new = w[:lay.d2].reshape((d, d), order="F")
    P_new = 0.5 * (P_new + P_new.T)
    return MomentState(float(t_target), y_new, P_new)
