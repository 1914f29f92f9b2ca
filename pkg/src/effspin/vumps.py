"""Variational uniform-MPS ground-state search (VUMPS) for the ABAHC.

The bond-alternating chain is blocked into two-site unit cells, so the
variational state is a single-tensor uniform MPS with physical dimension 4.
The solver is generic over the cell dimension and the two-cell bond operator,
which lets the exact AKLT tensors reuse the same state type.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import linalg, spins, transfer

CHECKPOINT_VERSION = 1


# --------------------------------------------------------------- Hamiltonian

@dataclass
class AbahcHamiltonian:
    """Antiferromagnetic bond-alternating Heisenberg chain, S = 1/2.

    Bond strengths alternate 1 +/- delta; the bond inside a unit cell is the
    strong one.  Two-cell operators act on the blocked basis |s1 s2 s3 s4>.
    """

    delta: float = 0.03

    d_site: int = field(default=2, init=False)
    d_cell: int = field(default=4, init=False)
    sites_per_cell: int = field(default=2, init=False)

    def __post_init__(self):
        self.ss = spins.heisenberg_bond(1, 1)          # S.S for two spin-1/2
        self.sz = spins.spin_matrices(1)[2]

    @property
    def strong(self):
        return 1.0 + abs(self.delta)

    @property
    def weak(self):
        return 1.0 - abs(self.delta)

    def cell_sz(self):
        i2 = np.eye(2)
        return np.kron(self.sz, i2) + np.kron(i2, self.sz)

    def cell_bond(self, h_z=0.0):
        """Two-cell bond operator whose sum over cells gives the Hamiltonian.

        The strong intra-cell bonds are split half/half between the two
        adjacent cell-bond terms; a uniform Zeeman term -h_z S^z is folded in
        the same way.
        """
        i2, i4 = np.eye(2), np.eye(4)
        h = 0.5 * self.strong * spins.kron_chain(self.ss, i4)
        h += self.weak * spins.kron_chain(i2, self.ss, i2)
        h += 0.5 * self.strong * spins.kron_chain(i4, self.ss)
        if h_z:
            z = self.cell_sz()
            h -= h_z * 0.5 * (np.kron(z, i4) + np.kron(i4, z))
        return h

    def center_left(self, h_z=0.0, local_scale=1.0):
        """Coupling of the last left cell to the single defect site (4 x 2)."""
        i2, i4 = np.eye(2), np.eye(4)
        h = 0.5 * self.strong * np.kron(self.ss, i2)
        h += local_scale * self.weak * np.kron(i2, self.ss)
        if h_z:
            h -= h_z * (0.5 * np.kron(self.cell_sz(), i2) + 0.5 * np.kron(i4, self.sz))
        return h

    def center_right(self, h_z=0.0, local_scale=1.0):
        """Coupling of the defect site to the first right cell (2 x 4)."""
        i2, i4 = np.eye(2), np.eye(4)
        h = local_scale * self.weak * np.kron(self.ss, i2)
        h += 0.5 * self.strong * np.kron(i2, self.ss)
        if h_z:
            h -= h_z * (0.5 * np.kron(self.sz, i4) + 0.5 * np.kron(i2, self.cell_sz()))
        return h

    def cell_site_op(self, op, slot):
        """Embed a single-site operator at slot 0 or 1 of a cell."""
        i2 = np.eye(2)
        return np.kron(op, i2) if slot == 0 else np.kron(i2, op)


# --------------------------------------------------------------- state type

@dataclass
class UniformMps:
    """Uniform MPS in mixed canonical form with dominant environments."""

    al: np.ndarray
    ar: np.ndarray
    ac: np.ndarray
    c: np.ndarray
    energy_density: float = np.nan      # per physical site
    grad_norm: float = np.nan
    delta: float = np.nan
    sites_per_cell: int = 2
    seed: int | None = None

    @property
    def d(self):
        return self.al.shape[0]

    @property
    def bond_dim(self):
        return self.al.shape[1]

    @property
    def tensor(self):
        """Background tensor for window states (left-isometric, l = identity)."""
        return self.al

    @property
    def r_env(self):
        r = self.c @ self.c.conj().T
        r = 0.5 * (r + r.conj().T)
        return r / np.trace(r).real

    @property
    def l_env(self):
        return np.eye(self.bond_dim, dtype=np.complex128)

    def spectral(self, m=6):
        return transfer.spectral_data(transfer.TransferOperator(self.al), m=m)

    def xi_bulk(self, m=2):
        return self.spectral(m=m).xi_bulk


def uniform_from_tensor(a, **meta):
    """Wrap an exactly known left- and right-isometric tensor (e.g. AKLT)."""
    a = transfer.check_tensor(a)
    dim = a.shape[1]
    c = np.eye(dim, dtype=np.complex128) / np.sqrt(dim)
    return UniformMps(al=a, ar=a, ac=a / np.sqrt(dim), c=c, **meta)


# --------------------------------------------------------------- VUMPS core

class VumpsError(linalg.ConvergenceError):
    """VUMPS did not reach the gradient tolerance; carries the best state."""


def _polar_isometries(ac, c):
    d, D, _ = ac.shape
    u_l, _ = sla.polar(ac.reshape(d * D, D))
    u_c, _ = sla.polar(c)
    al = (u_l @ u_c.conj().T).reshape(d, D, D)
    u_r, _ = sla.polar(ac.transpose(1, 0, 2).reshape(D, d * D), side="left")
    u_cr, _ = sla.polar(c, side="left")
    ar = (u_cr.conj().T @ u_r).reshape(D, d, D).transpose(1, 0, 2)
    return al, ar


def _fixed_point(t_op, which, guess, tol):
    """Dominant right ('r') or left ('l') fixed-point matrix, trace 1."""
    dim = t_op.dim
    matvec = t_op.matvec if which == "r" else t_op.rmatvec
    if dim <= 64:
        dense = np.column_stack([matvec(e) for e in np.eye(dim, dtype=np.complex128)])
        w, v = sla.eig(dense)
        x = v[:, int(np.argmax(np.abs(w)))]
    else:
        w, v = spla.eigs(spla.LinearOperator((dim, dim), matvec=matvec,
                                             dtype=np.complex128),
                         k=1, which="LM", v0=guess.ravel(), tol=tol)
        x = v[:, 0]
    m = x.reshape(t_op.shape_right if which == "r" else t_op.shape_left)
    m = m / np.trace(m)
    return 0.5 * (m + m.conj().T)


class _Effective:
    """Effective center Hamiltonians for one VUMPS iteration.

    Index conventions, with hr[s', u', s, u] = <s' u'|h|s u>:
      P[s', s, c, a] = sum_a0 conj(AL[s'])_{a0 c} AL[s]_{a0 a}
      Q[u', u, e, b] = sum_b0 conj(AR[u'])_{e b0} AR[u]_{b b0}
    """

    def __init__(self, h, al, ar, lh, rh):
        d, D, _ = al.shape
        self.d, self.D = d, D
        self.lh, self.rh = lh, rh
        self.hr = h.reshape(d, d, d, d)
        self.p = np.einsum("pqc,sqa->psca", al.conj(), al)
        self.q = np.einsum("weq,ubq->wueb", ar.conj(), ar)
        # K1[(w, c), (u, a)]: bond with the left neighbour, open right site
        self.k1 = np.einsum("pwsu,psca->wcua", self.hr, self.p).reshape(d * D, d * D)
        # K2[(p, e), (s, b)]: bond with the right neighbour, open left site
        self.k2 = np.einsum("pwsu,wueb->pesb", self.hr, self.q).reshape(d * D, d * D)

    def apply_ac(self, x):
        d, D = self.d, self.D
        xt = x.reshape(d, D, D)
        out = (self.k1 @ xt.reshape(d * D, D)).reshape(d, D, D)
        t2 = (self.k2 @ xt.transpose(0, 2, 1).reshape(d * D, D)).reshape(d, D, D)
        out += t2.transpose(0, 2, 1)
        out += np.einsum("aq,sab->sqb", self.lh, xt)
        out += xt @ self.rh
        return out.ravel()

    def apply_c(self, y):
        D = self.D
        ym = y.reshape(D, D)
        tmp = np.einsum("psca,ab->pscb", self.p, ym)
        tmp = np.einsum("pwsu,pscb->wucb", self.hr, tmp)
        out = np.einsum("wucb,wueb->ce", tmp, self.q)
        out += self.lh.T @ ym + ym @ self.rh
        return out.ravel()


def _smallest_eigvec(apply, dim, v0, tol, label):
    op = spla.LinearOperator((dim, dim), matvec=apply, dtype=np.complex128)
    try:
        w, v = spla.eigsh(op, k=1, which="SA", v0=v0.ravel(),
                          tol=max(tol, 1e-14), maxiter=max(4000, 40 * dim))
    except spla.ArpackNoConvergence as exc:
        raise linalg.ConvergenceError(f"{label} eigensolve failed") from exc
    vec = v[:, 0]
    k = int(np.argmax(np.abs(vec)))
    vec = vec * (np.abs(vec[k]) / vec[k])
    return w[0], vec


def vumps_ground_state(h, D, tol_gradient=1e-8, max_iter=500, seed=0,
                       d=None, hbond=None, sites_per_cell=None):
    """Optimize a uniform MPS for a nearest-neighbour (cell-blocked) chain.

    `h` is an AbahcHamiltonian; alternatively pass `d` and the two-cell bond
    matrix `hbond` directly for other models.  Returns a UniformMps whose
    gradient norm is below tol_gradient, or raises VumpsError (carrying the
    best state) once max_iter is exhausted.
    """
    if hbond is None:
        hbond = h.cell_bond()
        d = h.d_cell
        sites_per_cell = h.sites_per_cell
        delta = h.delta
    else:
        sites_per_cell = sites_per_cell or 1
        delta = getattr(h, "delta", np.nan)
    if D < 2:
        raise ValueError("bond dimension must be at least 2")
    if tol_gradient <= 0:
        raise ValueError("tol_gradient must be positive")

    rng = np.random.default_rng(seed)
    ac = rng.standard_normal((d, D, D)) + 1j * rng.standard_normal((d, D, D))
    ac /= np.linalg.norm(ac)
    c = rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D))
    c /= np.linalg.norm(c)
    al, ar = _polar_isometries(ac, c)

    ident = np.eye(D, dtype=np.complex128)
    grad = 1.0
    energy_cell = np.nan
    for _ in range(max_iter):
        inner_tol = float(np.clip(grad / 100.0, 1e-13, 1e-4))
        t_al = transfer.TransferOperator(al)
        t_ar = transfer.TransferOperator(ar)
        rl = _fixed_point(t_al, "r", c @ c.conj().T, inner_tol)
        ll = _fixed_point(t_ar, "l", c.conj().T @ c, inner_tol)

        lh_one = transfer.OperatorTransfer(hbond, al, al).apply_left(ident)
        e_l = transfer.pair(lh_one, rl).real
        rh_one = transfer.OperatorTransfer(hbond, ar, ar).apply_right(ident)
        e_r = transfer.pair(ll, rh_one).real
        energy_cell = 0.5 * (e_l + e_r)
        hs = hbond - energy_cell * np.eye(hbond.shape[0])

        lh_one = transfer.OperatorTransfer(hs, al, al).apply_left(ident)
        rh_one = transfer.OperatorTransfer(hs, ar, ar).apply_right(ident)
        lh = linalg.deflated_solve(t_al.rmatvec, lh_one.ravel(),
                                   deflate_left=rl.ravel(), deflate_right=ident.ravel(),
                                   tol=inner_tol).reshape(D, D)
        rh = linalg.deflated_solve(t_ar.matvec, rh_one.ravel(),
                                   deflate_left=ll.ravel(), deflate_right=ident.ravel(),
                                   tol=inner_tol).reshape(D, D)
        lh = 0.5 * (lh + lh.conj().T)
        rh = 0.5 * (rh + rh.conj().T)

        eff = _Effective(hs, al, ar, lh, rh)
        _, ac_vec = _smallest_eigvec(eff.apply_ac, d * D * D, ac, inner_tol, "AC")
        _, c_vec = _smallest_eigvec(eff.apply_c, D * D, c, inner_tol, "C")
        ac = ac_vec.reshape(d, D, D)
        c = c_vec.reshape(D, D)
        c /= np.linalg.norm(c)
        al, ar = _polar_isometries(ac, c)

        b = eff.apply_ac(ac.ravel()).reshape(d, D, D)
        b -= np.einsum("sab,bc->sac", al, eff.apply_c(c.ravel()).reshape(D, D))
        grad = float(np.linalg.norm(b))
        if grad <= tol_gradient:
            break
    state = UniformMps(al=al, ar=ar, ac=ac, c=c,
                       energy_density=energy_cell / sites_per_cell,
                       grad_norm=grad, delta=delta,
                       sites_per_cell=sites_per_cell, seed=seed)
    if grad > tol_gradient:
        raise VumpsError(f"VUMPS gradient {grad:.3e} above tolerance "
                         f"{tol_gradient:.3e} after {max_iter} iterations",
                         residual=grad, state=state)
    return state


def fidelity_per_cell(u1, u2):
    """|dominant eigenvalue| of the mixed transfer operator of two states."""
    t = transfer.TransferOperator(u1.al, u2.al)
    lam, _, _ = linalg.dominant_eigenpair(t.matvec, t.dim, tol=1e-11,
                                          apply_transpose=t.rmatvec)
    return float(abs(lam))


@dataclass
class SeedReport:
    energies: list
    grad_norms: list
    fidelities: list            # pairwise |lambda| of mixed transfer
    energy_spread: float
    converged: bool
    passed: bool


def multi_seed_consistency(h, D, tol=1e-8, n_seeds=3, max_iter=500, seeds=None):
    """Optimize from several random seeds and compare the results."""
    if n_seeds < 2:
        raise ValueError("need at least two seeds")
    seeds = list(seeds) if seeds is not None else list(range(n_seeds))
    states, energies, grads, converged = [], [], [], True
    for s in seeds:
        try:
            u = vumps_ground_state(h, D, tol_gradient=tol, max_iter=max_iter, seed=s)
        except VumpsError as exc:
            u = exc.state
            converged = False
        states.append(u)
        energies.append(u.energy_density)
        grads.append(u.grad_norm)
    fids = [fidelity_per_cell(states[i], states[j])
            for i in range(len(states)) for j in range(i + 1, len(states))]
    spread = float(np.max(energies) - np.min(energies))
    return SeedReport(energies=energies, grad_norms=grads, fidelities=fids,
                      energy_spread=spread, converged=converged,
                      passed=converged and spread < 10 * tol)


# --------------------------------------------------------------- checkpoints

def save_uniform(path, u):
    """Serialize a UniformMps; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        np.savez(fh, version=CHECKPOINT_VERSION, al=u.al, ar=u.ar, ac=u.ac,
                 c=u.c, energy_density=u.energy_density, grad_norm=u.grad_norm,
                 delta=u.delta, sites_per_cell=u.sites_per_cell,
                 seed=-1 if u.seed is None else u.seed)


def load_uniform(path):
    with np.load(path) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data['version']}")
        seed = int(data["seed"])
        return UniformMps(al=data["al"], ar=data["ar"], ac=data["ac"], c=data["c"],
                          energy_density=float(data["energy_density"]),
                          grad_norm=float(data["grad_norm"]),
                          delta=float(data["delta"]),
                          sites_per_cell=int(data["sites_per_cell"]),
                          seed=None if seed < 0 else seed)
