"""Spin operator matrices and two-site bond Hamiltonians.

Basis ordering is m = S, S-1, ..., -S throughout.  All matrices are
complex128; energies are in units of the exchange coupling (hbar = 1).
"""

import numpy as np


def spin_matrices(two_s):
    """Return (Sx, Sy, Sz) for spin S = two_s / 2."""
    s = two_s / 2.0
    dim = two_s + 1
    m = s - np.arange(dim)
    sz = np.diag(m).astype(np.complex128)
    sp = np.zeros((dim, dim), dtype=np.complex128)
    for i in range(1, dim):
        # <m+1| S+ |m> with m = m[i]
        sp[i - 1, i] = np.sqrt(s * (s + 1) - m[i] * (m[i] + 1))
    sm = sp.conj().T
    sx = 0.5 * (sp + sm)
    sy = -0.5j * (sp - sm)
    return sx, sy, sz


def pauli():
    """Pauli matrices (x, y, z) plus raising/lowering (p, m)."""
    sx = np.array([[0, 1], [1, 0]], dtype=np.complex128)
    sy = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
    sz = np.array([[1, 0], [0, -1]], dtype=np.complex128)
    sp = np.array([[0, 1], [0, 0]], dtype=np.complex128)
    sm = np.array([[0, 0], [1, 0]], dtype=np.complex128)
    return sx, sy, sz, sp, sm


def heisenberg_bond(two_s_a, two_s_b):
    """S_a . S_b on the product space, ordered (a ⊗ b)."""
    ops_a = spin_matrices(two_s_a)
    ops_b = spin_matrices(two_s_b)
    dim = (two_s_a + 1) * (two_s_b + 1)
    h = np.zeros((dim, dim), dtype=np.complex128)
    for oa, ob in zip(ops_a, ops_b):
        h += np.kron(oa, ob)
    return h


def aklt_bond():
    """Nearest-neighbour AKLT term: x + x^2/3 + 2/3 with x = S.S (spin 1).

    Equals twice the projector onto the total-spin-2 subspace.
    """
    x = heisenberg_bond(2, 2)
    return x + (x @ x) / 3.0 + (2.0 / 3.0) * np.eye(9)


def aklt_impurity_bond(impurity_first):
    """Coupling of an S=3/2 impurity to an S=1 neighbour.

    x + (2/7) x^2 + 5/7, proportional to the projector onto total spin 5/2.
    `impurity_first` selects the ordering (impurity ⊗ bulk) vs (bulk ⊗ impurity).
    """
    if impurity_first:
        x = heisenberg_bond(3, 2)
    else:
        x = heisenberg_bond(2, 3)
    return x + (2.0 / 7.0) * (x @ x) + (5.0 / 7.0) * np.eye(12)


def total_sz(dims_two_s):
    """Sum of S^z over a list of sites given by their 2S values."""
    mats = [spin_matrices(t)[2] for t in dims_two_s]
    dim = int(np.prod([t + 1 for t in dims_two_s]))
    out = np.zeros((dim, dim), dtype=np.complex128)
    for k in range(len(mats)):
        factors = [np.eye(t + 1, dtype=np.complex128) for t in dims_two_s]
        factors[k] = mats[k]
        term = factors[0]
        for f in factors[1:]:
            term = np.kron(term, f)
        out += term
    return out


def kron_chain(*mats):
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out
