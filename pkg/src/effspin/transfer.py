"""Transfer operators, spectral data, and infinite boundary environments.

An MPS tensor is a complex array (d, Dl, Dr).  The transfer operator built
from a ket tensor X and bra tensor Y acts on "right vectors" (Dr_ket x Dr_bra
matrices) as rho -> sum_s X^s rho (Y^s)^dagger, and on "left vectors" as
sigma -> sum_s (X^s)^T sigma conj(Y^s).  Left and right vectors pair
bilinearly, (sigma|rho) = sum_ij sigma_ij rho_ij.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels, linalg


class NormalizationError(ValueError):
    """Transfer spectrum inconsistent with a normalized state."""


class GaplessError(ValueError):
    """|lambda_2| is too close to 1 for geometric environment sums."""


def check_tensor(a):
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 3:
        raise ValueError(f"MPS tensor must have rank 3, got shape {a.shape}")
    return a


class TransferOperator:
    """T_X^Y with ket tensor X and bra tensor Y (defaults to X)."""

    def __init__(self, ket, bra=None):
        self.ket = check_tensor(ket)
        self.bra = self.ket if bra is None else check_tensor(bra)
        if self.ket.shape[0] != self.bra.shape[0]:
            raise ValueError("ket/bra physical dimensions differ: "
                             f"{self.ket.shape[0]} vs {self.bra.shape[0]}")

    @property
    def shape_right(self):
        return (self.ket.shape[2], self.bra.shape[2])

    @property
    def shape_left(self):
        return (self.ket.shape[1], self.bra.shape[1])

    @property
    def dim(self):
        n = self.shape_right
        return n[0] * n[1]

    def apply_right(self, rho):
        return kernels.transfer_right(self.ket, self.bra, rho)

    def apply_left(self, sigma):
        return kernels.transfer_left(self.ket, self.bra, sigma)

    def matvec(self, x):
        rho = x.reshape(self.shape_right)
        return self.apply_right(rho).ravel()

    def rmatvec(self, x):
        sigma = x.reshape(self.shape_left)
        return self.apply_left(sigma).ravel()

    def to_dense(self):
        """Dense matrix indexed ((a, a'), (b, b')), kets first."""
        d, dl, dr = self.ket.shape
        _, bl, br = self.bra.shape
        return np.einsum("sab,scd->acbd", self.ket, self.bra.conj()).reshape(
            dl * bl, dr * br)


class OperatorTransfer:
    """J_h^{XY}: two-site operator h sandwiched between ket pair and bra pair."""

    def __init__(self, h, ket1, ket2, bra1=None, bra2=None):
        self.ket1 = check_tensor(ket1)
        self.ket2 = check_tensor(ket2)
        self.bra1 = self.ket1 if bra1 is None else check_tensor(bra1)
        self.bra2 = self.ket2 if bra2 is None else check_tensor(bra2)
        dk = self.ket1.shape[0] * self.ket2.shape[0]
        db = self.bra1.shape[0] * self.bra2.shape[0]
        self.h = np.asarray(h, dtype=np.complex128)
        if self.h.shape != (db, dk):
            raise ValueError(f"operator shape {self.h.shape} does not match "
                             f"physical dimensions ({db}, {dk})")
        if self.ket1.shape[2] != self.ket2.shape[1] or self.bra1.shape[2] != self.bra2.shape[1]:
            raise ValueError("bond dimension mismatch between the two sites")

    def apply_right(self, rho):
        return kernels.op2_right(self.h, self.ket1, self.ket2, self.bra1,
                                 self.bra2, rho)

    def apply_left(self, sigma):
        return kernels.op2_left(self.h, self.ket1, self.ket2, self.bra1,
                                self.bra2, sigma)

    def expectation(self, sigma, rho):
        return kernels.pair(self.apply_left(sigma), rho)


def op1_transfer_right(op, ket, bra, rho):
    return kernels.op1_right(np.asarray(op, dtype=np.complex128), ket, bra, rho)


def op1_transfer_left(op, ket, bra, sigma):
    return kernels.op1_left(np.asarray(op, dtype=np.complex128), ket, bra, sigma)


def pair(sigma, rho):
    return kernels.pair(sigma, rho)


def fixed_points(a, tol=1e-12):
    """Dominant (l, r) of T_A^A, Hermitian, with (l|r) = 1 and Tr r = 1."""
    t = TransferOperator(a)
    dim = t.dim
    lam, right, left = linalg.dominant_eigenpair(
        t.matvec, dim, tol=tol, apply_transpose=t.rmatvec)
    d = a.shape[1]
    r = right.reshape(t.shape_right)
    l = left.reshape(t.shape_left)
    # a CP-map fixed point is Hermitian up to a global phase
    r = r / np.trace(r)
    r = 0.5 * (r + r.conj().T)
    l = l / kernels.pair(l, r)
    l = 0.5 * (l + l.conj().T)
    return lam, l, r


@dataclass
class SpectralData:
    """Leading transfer-operator eigenvalues with biorthonormal eigenvectors."""

    eigenvalues: np.ndarray            # sorted by descending magnitude
    left: list = field(repr=False, default_factory=list)   # matrices
    right: list = field(repr=False, default_factory=list)
    xi_bulk: float = 0.0               # unit cells; 0.0 when undefined (D = 1)

    def __len__(self):
        return len(self.eigenvalues)


def _biorthonormalize(w, lefts, rights, cluster_tol=1e-8):
    """Rescale left vectors so that (l_i | r_j) = delta_ij.

    Degenerate clusters are handled by inverting the overlap block; the
    individual vectors inside a cluster are basis-dependent but the cluster
    projector is not.
    """
    n = len(w)
    scale = max(np.max(np.abs(w)), 1e-300)
    order = np.argsort(-np.abs(w), kind="stable")
    w = w[order]
    lefts = [lefts[i] for i in order]
    rights = [rights[i] for i in order]
    i = 0
    while i < n:
        j = i + 1
        while j < n and abs(w[j] - w[i]) <= cluster_tol * scale:
            j += 1
        block = np.array([[np.sum(lefts[p] * rights[q]) for q in range(i, j)]
                          for p in range(i, j)])
        inv = np.linalg.inv(block)
        new_lefts = []
        for p in range(i, j):
            acc = np.zeros_like(lefts[i])
            for q in range(i, j):
                acc = acc + inv[p - i, q - i] * lefts[q]
            new_lefts.append(acc)
        lefts[i:j] = new_lefts
        i = j
    return w, lefts, rights


def spectral_data(t, m=6, expect_normalized=True, dense_cutoff=1100):
    """Leading m eigenpairs of a TransferOperator, biorthonormalized.

    xi_bulk = -1 / ln|lambda_2| in unit cells.  Raises NormalizationError if
    |lambda_1 - 1| > 1e-6 while expect_normalized, and GaplessError when
    |lambda_2| is within 1e-12 of 1.
    """
    dim = t.dim
    if m > dim:
        raise ValueError(f"requested {m} eigenpairs from a dimension-{dim} map")
    if dim <= dense_cutoff or m > dim - 2:
        import scipy.linalg as sla
        dense = t.to_dense()
        w, vl, vr = sla.eig(dense, left=True, right=True)
        order = np.argsort(-np.abs(w), kind="stable")[:m]
        w = w[order]
        lefts = [vl[:, k].conj().reshape(t.shape_left) for k in order]
        rights = [vr[:, k].reshape(t.shape_right) for k in order]
    else:
        import scipy.sparse.linalg as spla
        op = spla.LinearOperator((dim, dim), matvec=t.matvec, dtype=np.complex128)
        opt = spla.LinearOperator((dim, dim), matvec=t.rmatvec, dtype=np.complex128)
        w, vr = spla.eigs(op, k=m, which="LM", tol=1e-12)
        wl, vlt = spla.eigs(opt, k=m, which="LM", tol=1e-12)
        order = np.argsort(-np.abs(w), kind="stable")
        orderl = np.argsort(-np.abs(wl), kind="stable")
        if np.max(np.abs(w[order] - wl[orderl])) > 1e-6 * max(1.0, np.abs(w[order[0]])):
            raise linalg.ConvergenceError("left/right Arnoldi spectra disagree")
        w = w[order]
        rights = [vr[:, k].reshape(t.shape_right) for k in order]
        lefts = [vlt[:, k].reshape(t.shape_left) for k in orderl]

    w, lefts, rights = _biorthonormalize(w, lefts, rights)
    lam1 = w[0]
    if expect_normalized and abs(lam1 - 1.0) > 1e-6:
        raise NormalizationError(f"dominant transfer eigenvalue {lam1} is not 1; "
                                 "state is not normalized")
    xi = 0.0
    if len(w) > 1:
        mag2 = abs(w[1])
        if mag2 >= 1.0 - 1e-12:
            raise GaplessError(f"|lambda_2| = {mag2} is too close to 1")
        if mag2 > 0.0:
            xi = -1.0 / np.log(mag2)
    return SpectralData(eigenvalues=w, left=lefts, right=rights, xi_bulk=float(xi))


@dataclass
class BoundaryEnvironments:
    """Summed semi-infinite energy environments of a uniform background."""

    libc: np.ndarray                   # left vector (matrix) at the left bond
    ribc: np.ndarray                   # right vector (matrix) at the right bond
    energy_origin_shift: float         # (l1 | J_h^{AA} | r1) removed from h


def boundary_environments(a, h, l=None, r=None, tol=1e-10, lam2=None):
    """LIBC/RIBC for uniform tensor `a` and two-site bond operator `h`.

    The energy origin is shifted so that the per-bond expectation vanishes;
    the geometric sums are then evaluated with deflated linear solves.
    """
    a = check_tensor(a)
    if l is None or r is None:
        _, l, r = fixed_points(a)
    t = TransferOperator(a)
    if lam2 is None:
        m = min(2, t.dim)
        sd = spectral_data(t, m=m)
        lam2 = abs(sd.eigenvalues[1]) if len(sd) > 1 else 0.0
    if lam2 >= 1.0 - 1e-8:
        raise GaplessError(f"|lambda_2| = {lam2}: state is gapless or unnormalized")

    shift = kernels.pair(OperatorTransfer(h, a, a).apply_left(l), r)
    if abs(shift.imag) > 1e-8 * max(1.0, abs(shift)):
        raise ValueError(f"bond operator has non-real expectation {shift}")
    shift = shift.real
    h_shifted = h - shift * np.eye(h.shape[0])
    jop = OperatorTransfer(h_shifted, a, a)

    rhs_l = jop.apply_left(l)
    libc = linalg.deflated_solve(t.rmatvec, rhs_l.ravel(),
                                 deflate_left=r.ravel(), deflate_right=l.ravel(),
                                 tol=tol).reshape(t.shape_left)
    rhs_r = jop.apply_right(r)
    ribc = linalg.deflated_solve(t.matvec, rhs_r.ravel(),
                                 deflate_left=l.ravel(), deflate_right=r.ravel(),
                                 tol=tol).reshape(t.shape_right)
    return BoundaryEnvironments(libc=libc, ribc=ribc, energy_origin_shift=shift)
