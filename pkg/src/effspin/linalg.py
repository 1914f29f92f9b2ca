"""Dense and iterative complex linear algebra used by all contractions.

Everything works on plain complex128 ndarrays.  Iterative routines operate on
abstract linear maps (callables on flat vectors) so that transfer operators
never have to be materialized at large bond dimension.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

HERMITIAN_RTOL = 1e-12
EIG_TOL = 1e-10
SOLVE_TOL = 1e-9
PD_FLOOR = 1e-12


class ConvergenceError(RuntimeError):
    """Iterative solver failed; carries the last residual (and state if any)."""

    def __init__(self, msg, residual=None, state=None):
        super().__init__(msg)
        self.residual = residual
        self.state = state


def check_hermitian(m, rtol=HERMITIAN_RTOL):
    scale = max(np.max(np.abs(m)), 1e-300)
    dev = np.max(np.abs(m - m.conj().T))
    if dev > rtol * scale:
        raise ValueError(f"matrix is not Hermitian: max|M - M^H| = {dev:.3e} "
                         f"(allowed {rtol * scale:.3e})")


def hermitian_eig(m, rtol=HERMITIAN_RTOL):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a Hermitian matrix."""
    check_hermitian(m, rtol)
    w, v = np.linalg.eigh(m)
    return w, v


def generalized_eig(h, g, null_tol=PD_FLOOR):
    """Solve H v = lam G v for Hermitian H and positive semidefinite G.

    The null space of G (eigenvalues below null_tol * max eigenvalue) is
    projected out; returned eigenvectors satisfy v_i^H G v_j = delta_ij on the
    retained subspace.  Raises ValueError if G is indefinite beyond tolerance.
    """
    check_hermitian(h)
    check_hermitian(g)
    wg, ug = np.linalg.eigh(g)
    scale = max(wg[-1], 0.0)
    if scale <= 0.0:
        raise ValueError("G is identically zero")
    if wg[0] < -null_tol * scale:
        raise ValueError(f"G is indefinite: min eigenvalue {wg[0]:.3e}")
    keep = wg > null_tol * scale
    if not np.any(keep):
        raise ValueError("G has no eigenvalues above the null-space tolerance")
    basis = ug[:, keep] / np.sqrt(wg[keep])
    h_red = basis.conj().T @ h @ basis
    h_red = 0.5 * (h_red + h_red.conj().T)
    w, v = np.linalg.eigh(h_red)
    return w, basis @ v


def sqrtm_psd(m, floor=0.0):
    """Principal square root of a Hermitian positive semidefinite matrix."""
    check_hermitian(m)
    w, v = np.linalg.eigh(m)
    w = np.clip(w, floor, None)
    return (v * np.sqrt(w)) @ v.conj().T


def inv_sqrt(m, floor=PD_FLOOR):
    """R with R m R = identity, for Hermitian positive definite m.

    Raises ValueError when the smallest eigenvalue falls below `floor`.
    """
    check_hermitian(m)
    w, v = np.linalg.eigh(m)
    if w[0] < floor:
        raise ValueError(f"matrix not positive definite above floor: "
                         f"min eigenvalue {w[0]:.3e} < {floor:.3e}")
    return (v / np.sqrt(w)) @ v.conj().T


def _as_operator(apply, dim):
    return spla.LinearOperator((dim, dim), matvec=apply, dtype=np.complex128)


def dominant_eigenpair(apply, dim, tol=EIG_TOL, max_iter=None,
                       apply_transpose=None, seed=0):
    """Dominant eigenvalue with biorthonormal right/left eigenvectors.

    `apply` maps flat complex vectors of length dim; `apply_transpose`
    implements the transposed map (required for the left vector unless the
    problem is small enough to densify, dim <= 64).  Returns (lam, right,
    left) with the bilinear pairing sum(left * right) = 1.
    """
    if max_iter is None:
        max_iter = max(300, 40 * dim)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)

    if dim <= 64 and apply_transpose is None:
        dense = np.column_stack([apply(e) for e in np.eye(dim, dtype=np.complex128)])
        w, vl, vr = sla.eig(dense, left=True, right=True)
        k = int(np.argmax(np.abs(w)))
        lam, right, left = w[k], vr[:, k], vl[:, k].conj()
    else:
        if apply_transpose is None:
            raise ValueError("apply_transpose is required for dim > 64")
        try:
            w, vr = spla.eigs(_as_operator(apply, dim), k=1, which="LM",
                              v0=v0, tol=tol / 10, maxiter=max_iter)
            wl, vlt = spla.eigs(_as_operator(apply_transpose, dim), k=1,
                                which="LM", v0=v0, tol=tol / 10, maxiter=max_iter)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceError(
                f"dominant eigenpair did not converge in {max_iter} iterations",
                residual=getattr(exc, "eigenvalues", None)) from exc
        lam, right, left = w[0], vr[:, 0], vlt[:, 0]
        if abs(wl[0] - lam) > 1e-6 * max(1.0, abs(lam)):
            raise ConvergenceError(
                f"left/right dominant eigenvalues disagree: {lam} vs {wl[0]}",
                residual=abs(wl[0] - lam))

    res = np.linalg.norm(apply(right) - lam * right)
    if res > tol * max(1.0, abs(lam)):
        raise ConvergenceError(f"dominant eigenpair residual {res:.3e} > {tol:.3e}",
                               residual=res)
    overlap = np.sum(left * right)
    if abs(overlap) < 1e-14:
        raise ConvergenceError("left/right dominant eigenvectors are orthogonal",
                               residual=abs(overlap))
    left = left / overlap
    return lam, right, left


def deflated_solve(apply, rhs, deflate_left, deflate_right, tol=SOLVE_TOL,
                   max_iter=None):
    """Evaluate sum_{k>=2} (1 - lam_k)^{-1} |r_k)(l_k| rhs for the map T.

    Solves (1 - T + |r1)(l1|) x = P rhs with P = 1 - |r1)(l1| projecting off
    the dominant pair (deflate_right = r1, deflate_left = l1, bilinear
    pairing), then enforces (l1|x) = 0.  Requires |lam_2| < 1.
    """
    dim = rhs.size
    if max_iter is None:
        max_iter = max(1000, 20 * dim)
    l1 = deflate_left.ravel()
    r1 = deflate_right.ravel()
    b = rhs.ravel()
    b = b - r1 * np.sum(l1 * b)

    def matvec(x):
        return x - apply(x) + r1 * np.sum(l1 * x)

    op = _as_operator(matvec, dim)
    x, info = spla.gmres(op, b, rtol=tol, atol=tol * max(np.linalg.norm(b), 1e-300),
                         maxiter=max_iter, restart=min(dim, 200))
    if info != 0:
        res = np.linalg.norm(matvec(x) - b)
        raise ConvergenceError(f"deflated solve stagnated (info={info})", residual=res)
    x = x - r1 * np.sum(l1 * x)
    return x


def principal_angles(u, v, metric=None):
    """Principal angles between the column spans of u and v.

    With `metric` G the angles are measured in the G inner product
    (vectors are G-orthonormalized first).
    """
    if metric is not None:
        w = sqrtm_psd(metric)
        u = w @ u
        v = w @ v
    qu, _ = np.linalg.qr(u)
    qv, _ = np.linalg.qr(v)
    s = np.linalg.svd(qu.conj().T @ qv, compute_uv=False)
    s = np.clip(s, -1.0, 1.0)
    return np.arccos(s)
