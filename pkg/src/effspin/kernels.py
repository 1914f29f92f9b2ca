"""Hot contraction kernels with optional numba acceleration.

Every kernel has a pure-numpy implementation and, when numba is importable,
an @njit twin.  The active set is chosen once at import time; setting the
environment variable EFFSPIN_NO_NUMBA=1 forces the numpy path.  Both paths
produce identical results up to floating-point reassociation, and
benchmarks/bench_kernels.py times them side by side.

Conventions (see transfer.py):
  tensors       (d, Dl, Dr), tensor[s] is the Dl x Dr bond matrix
  right vectors Dr_ket x Dr_bra matrices rho, transported leftwards
  left vectors  Dl_ket x Dl_bra matrices sigma, transported rightwards
  pairing       (sigma | rho) = sum_ij sigma_ij rho_ij   (bilinear, no conj)
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("EFFSPIN_NO_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _FORCE_NUMPY:
        raise ImportError
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    njit = None
    NUMBA_ENABLED = False


# ---------------------------------------------------------------- numpy path

def _transfer_right_np(ket, bra, rho):
    # sum_s ket[s] @ rho @ bra[s]^dagger
    tmp = np.tensordot(ket, rho, axes=(2, 0))          # (d, Dl_k, Drb)
    return np.tensordot(tmp, bra.conj(), axes=([0, 2], [0, 2]))


def _transfer_left_np(ket, bra, sigma):
    # sum_s ket[s]^T @ sigma @ conj(bra[s])
    tmp = np.tensordot(ket, sigma, axes=(1, 0))        # (d, Dr_k, Dlb)
    return np.tensordot(tmp, bra.conj(), axes=([0, 2], [0, 1]))


def _op1_right_np(op, ket, bra, rho):
    # sum_{s s'} op[s', s] ket[s] @ rho @ bra[s']^dagger
    tmp = np.tensordot(ket, rho, axes=(2, 0))          # (s, Dl_k, Drb)
    tmp = np.tensordot(op, tmp, axes=(1, 0))           # (s', Dl_k, Drb)
    return np.tensordot(tmp, bra.conj(), axes=([0, 2], [0, 2]))


def _op1_left_np(op, ket, bra, sigma):
    tmp = np.tensordot(ket, sigma, axes=(1, 0))        # (s, Dr_k, Dlb)
    tmp = np.tensordot(op, tmp, axes=(1, 0))           # (s', Dr_k, Dlb)
    return np.tensordot(tmp, bra.conj(), axes=([0, 2], [0, 1]))


def _pair_np(sigma, rho):
    return complex(np.sum(sigma * rho))


# ---------------------------------------------------------------- numba path

if NUMBA_ENABLED:

    @njit(cache=True)
    def _transfer_right_nb(ket, bra, rho):
        d = ket.shape[0]
        out = np.zeros((ket.shape[1], bra.shape[1]), dtype=np.complex128)
        rho = np.ascontiguousarray(rho)
        for s in range(d):
            ks = np.ascontiguousarray(ket[s])
            braT = np.ascontiguousarray(np.conj(bra[s]).T)
            out += np.dot(np.dot(ks, rho), braT)
        return out

    @njit(cache=True)
    def _transfer_left_nb(ket, bra, sigma):
        d = ket.shape[0]
        out = np.zeros((ket.shape[2], bra.shape[2]), dtype=np.complex128)
        sigma = np.ascontiguousarray(sigma)
        for s in range(d):
            ketT = np.ascontiguousarray(ket[s].T)
            bs = np.ascontiguousarray(np.conj(bra[s]))
            out += np.dot(np.dot(ketT, sigma), bs)
        return out

    @njit(cache=True)
    def _op1_right_nb(op, ket, bra, rho):
        d = ket.shape[0]
        out = np.zeros((ket.shape[1], bra.shape[1]), dtype=np.complex128)
        rho = np.ascontiguousarray(rho)
        for s in range(d):
            ks = np.ascontiguousarray(ket[s])
            for sp in range(d):
                if op[sp, s] != 0:
                    braT = np.ascontiguousarray(np.conj(bra[sp]).T)
                    out += op[sp, s] * np.dot(np.dot(ks, rho), braT)
        return out

    @njit(cache=True)
    def _op1_left_nb(op, ket, bra, sigma):
        d = ket.shape[0]
        out = np.zeros((ket.shape[2], bra.shape[2]), dtype=np.complex128)
        sigma = np.ascontiguousarray(sigma)
        for s in range(d):
            ketT = np.ascontiguousarray(ket[s].T)
            for sp in range(d):
                if op[sp, s] != 0:
                    bs = np.ascontiguousarray(np.conj(bra[sp]))
                    out += op[sp, s] * np.dot(np.dot(ketT, sigma), bs)
        return out

    @njit(cache=True)
    def _pair_nb(sigma, rho):
        return np.sum(sigma * rho)

    transfer_right = _transfer_right_nb
    transfer_left = _transfer_left_nb
    op1_right = _op1_right_nb
    op1_left = _op1_left_nb
    pair = _pair_nb
else:
    transfer_right = _transfer_right_np
    transfer_left = _transfer_left_np
    op1_right = _op1_right_np
    op1_left = _op1_left_np
    pair = _pair_np


# Two-site kernels stay in numpy: the d^2-blocked tensordot path is BLAS-bound
# and a numba loop variant gains nothing (see benchmarks).

def op2_right(h, ket1, ket2, bra1, bra2, rho):
    """Apply the two-site operator transfer map to a right vector.

    h is (d1'*d2', d1*d2) with <s't'|h|st>; returns the Dl x Dl matrix
    sum h[(s't'),(st)] ket1[s] ket2[t] rho (bra1[s'] bra2[t'])^dagger.
    """
    d1, d2 = ket1.shape[0], ket2.shape[0]
    d1b, d2b = bra1.shape[0], bra2.shape[0]
    hh = h.reshape(d1b, d2b, d1, d2)
    tmp = np.tensordot(ket2, rho, axes=(2, 0))                  # (t, m, Drb)
    tmp = np.tensordot(tmp, bra2.conj(), axes=(2, 2))           # (t, m, t', mb)
    tmp = np.tensordot(hh, tmp, axes=([1, 3], [2, 0]))          # (s', s, m, mb)
    tmp = np.tensordot(ket1, tmp, axes=([0, 2], [1, 2]))        # (a, s', mb)
    return np.tensordot(tmp, bra1.conj(), axes=([1, 2], [0, 2]))


def op2_left(h, ket1, ket2, bra1, bra2, sigma):
    """Left-transport a left vector through a two-site operator term."""
    d1, d2 = ket1.shape[0], ket2.shape[0]
    d1b, d2b = bra1.shape[0], bra2.shape[0]
    hh = h.reshape(d1b, d2b, d1, d2)
    tmp = np.tensordot(ket1, sigma, axes=(1, 0))                # (s, m, Dlb)
    tmp = np.tensordot(tmp, bra1.conj(), axes=(2, 1))           # (s, m, s', mb)
    tmp = np.tensordot(hh, tmp, axes=([0, 2], [2, 0]))          # (t', t, m, mb)
    tmp = np.tensordot(ket2, tmp, axes=([0, 1], [1, 2]))        # (b, t', mb)
    return np.tensordot(tmp, bra2.conj(), axes=([1, 2], [0, 1]))


def op2_expectation(h, ket1, ket2, bra1, bra2, sigma, rho):
    """(sigma | J_h^{ket1 ket2, bra1 bra2} | rho)."""
    return _pair_np(op2_left(h, ket1, ket2, bra1, bra2, sigma), rho)


def warmup():
    """Trigger JIT compilation of the active kernel set (no-op for numpy)."""
    a = np.zeros((2, 2, 2), dtype=np.complex128)
    a[0] = np.eye(2)
    m = np.eye(2, dtype=np.complex128)
    o = np.eye(2, dtype=np.complex128)
    transfer_right(a, a, m)
    transfer_left(a, a, m)
    op1_right(o, a, a, m)
    op1_left(o, a, a, m)
    pair(m, m)
