"""Numeric hot loops: frequency-response sweeps and fixed-step LTI simulation.

Two interchangeable backends provide the same functions:

* ``numba`` -- ``@njit``-compiled kernels (default when numba imports cleanly),
* ``numpy`` -- pure-numpy fallback using stacked/batched linear algebra.

Selection is controlled by the environment variable ``HHINF_KERNELS`` with
values ``auto`` (default), ``numba`` or ``numpy``, read once at import time.
``benchmarks/bench_kernels.py`` times both backends against each other.

The frequency sweep works on the Hessenberg form of the state matrix so each
frequency point costs O(n^2 (1 + m)) instead of a dense O(n^3) factorization.
"""

import os

import numpy as np
import scipy.linalg

_REQUESTED = os.environ.get("HHINF_KERNELS", "auto").strip().lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"HHINF_KERNELS must be 'auto', 'numba' or 'numpy', got {_REQUESTED!r}")

_HAS_NUMBA = False
if _REQUESTED in ("auto", "numba"):
    try:
        from numba import njit
        _HAS_NUMBA = True
    except ImportError:
        if _REQUESTED == "numba":
            raise
        _HAS_NUMBA = False

_BACKEND = "numba" if _HAS_NUMBA else "numpy"


def active_backend() -> str:
    """Name of the backend selected at import time ('numba' or 'numpy')."""
    return _BACKEND


# ----------------------------------------------------------------- numpy path

def _hess_sweep_numpy(H, BH, CH, D, omegas):
    n = H.shape[0]
    nw = omegas.shape[0]
    eye = np.eye(n, dtype=complex)
    M = (1j * omegas)[:, None, None] * eye - H
    rhs = np.broadcast_to(BH.astype(complex), (nw, n, BH.shape[1]))
    X = np.linalg.solve(M, rhs)
    return CH @ X + D


def _lti_steps_numpy(Phi, psib, x0, n_sub, n_samples):
    n = x0.shape[0]
    out = np.empty((n_samples + 1, n))
    x = x0.copy()
    out[0] = x
    for k in range(n_samples):
        for _ in range(n_sub):
            x = Phi @ x + psib
        out[k + 1] = x
    return out


# ----------------------------------------------------------------- numba path

if _HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _hess_sweep_numba(H, BH, CH, D, omegas):  # pragma: no cover - jit
        n = H.shape[0]
        m = BH.shape[1]
        p = CH.shape[0]
        nw = omegas.shape[0]
        out = np.empty((nw, p, m), dtype=np.complex128)
        M = np.empty((n, n), dtype=np.complex128)
        X = np.empty((n, m), dtype=np.complex128)
        for w in range(nw):
            jw = 1j * omegas[w]
            for i in range(n):
                for j in range(n):
                    M[i, j] = -H[i, j]
                M[i, i] += jw
            for i in range(n):
                for j in range(m):
                    X[i, j] = BH[i, j]
            # LU on the upper Hessenberg matrix with adjacent-row pivoting
            for k in range(n - 1):
                if abs(M[k + 1, k]) > abs(M[k, k]):
                    for j in range(k, n):
                        tmp = M[k, j]
                        M[k, j] = M[k + 1, j]
                        M[k + 1, j] = tmp
                    for j in range(m):
                        tmp = X[k, j]
                        X[k, j] = X[k + 1, j]
                        X[k + 1, j] = tmp
                fac = M[k + 1, k] / M[k, k]
                M[k + 1, k] = 0.0
                for j in range(k + 1, n):
                    M[k + 1, j] -= fac * M[k, j]
                for j in range(m):
                    X[k + 1, j] -= fac * X[k, j]
            for i in range(n - 1, -1, -1):
                for j in range(m):
                    acc = X[i, j]
                    for l in range(i + 1, n):
                        acc -= M[i, l] * X[l, j]
                    X[i, j] = acc / M[i, i]
            for i in range(p):
                for j in range(m):
                    acc = 0.0 + 0.0j
                    for l in range(n):
                        acc += CH[i, l] * X[l, j]
                    out[w, i, j] = acc + D[i, j]
        return out

    @njit(cache=True, nogil=True)
    def _lti_steps_numba(Phi, psib, x0, n_sub, n_samples):  # pragma: no cover
        n = x0.shape[0]
        out = np.empty((n_samples + 1, n))
        x = x0.copy()
        xn = np.empty(n)
        out[0] = x
        for k in range(n_samples):
            for _ in range(n_sub):
                for i in range(n):
                    acc = psib[i]
                    for j in range(n):
                        acc += Phi[i, j] * x[j]
                    xn[i] = acc
                for i in range(n):
                    x[i] = xn[i]
            out[k + 1] = x
        return out


# ------------------------------------------------------------------- dispatch

def freq_sweep(A, B, C, D, omegas):
    """Evaluate C (jw I - A)^{-1} B + D over omegas; returns (nw, p, m) complex."""
    omegas = np.asarray(omegas, dtype=float)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float)
    n = A.shape[0]
    if n == 0 or B.shape[1] == 0 or C.shape[0] == 0:
        return np.broadcast_to(D.astype(complex), (omegas.size,) + D.shape).copy()
    H, Q = scipy.linalg.hessenberg(A, calc_q=True)
    BH = Q.T @ B
    CH = C @ Q
    if _BACKEND == "numba":
        return _hess_sweep_numba(
            np.ascontiguousarray(H), np.ascontiguousarray(BH),
            np.ascontiguousarray(CH), np.ascontiguousarray(D), omegas)
    return _hess_sweep_numpy(H, BH, CH, D, omegas)


def rk4_transition(A, h):
    """One-step transition pair (Phi, Psi) of classical RK4 on ``xdot = A x + b``.

    For a linear system with constant input the RK4 update is exactly the
    4th-order Taylor map ``x+ = Phi x + Psi b``.
    """
    n = A.shape[0]
    hA = h * A
    Phi = np.eye(n)
    term = np.eye(n)
    for k in range(1, 5):
        term = term @ hA / k
        Phi = Phi + term
    Psi = h * (np.eye(n) + hA / 2 + hA @ hA / 6 + hA @ hA @ hA / 24)
    return Phi, Psi


def lti_step_states(A, b, x0, h, n_sub, n_samples):
    """States of ``xdot = A x + b`` at ``n_samples+1`` output instants.

    Integrates with RK4 at internal step ``h``; ``n_sub`` internal steps per
    output sample. Returns array (n_samples+1, n) including the initial state.
    """
    Phi, Psi = rk4_transition(np.asarray(A, dtype=float), h)
    psib = Psi @ np.asarray(b, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if _BACKEND == "numba":
        return _lti_steps_numba(np.ascontiguousarray(Phi), psib, x0,
                                n_sub, n_samples)
    return _lti_steps_numpy(Phi, psib, x0, n_sub, n_samples)
