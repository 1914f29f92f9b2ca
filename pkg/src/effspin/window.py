"""Uniform MPS with windows: states, effective center problem, and TDVP.

A window state keeps the optimized uniform background tensor A (left
isometric, so the left fixed point is the identity and the right fixed point
is r = C C^dagger) and replaces a finite contiguous list of tensors.  Window
tensors may have different physical dimensions: for the ABAHC weak-weak
defect the center tensor spans one site (d = 2) between two-site cells
(d = 4); for the AKLT chain an S=3/2 impurity tensor (d = 4) sits between
S=1 sites (d = 3).

All energies are measured with the uniform per-bond expectation subtracted,
so a pure-background window has energy zero and all geometric sums converge.

Bond bookkeeping: a window of K tensors carries K+1 bond operators, bonds[j]
coupling positions (j-1, j), where positions -1 and K stand for background
cells.  LIBC collects every bond term wholly inside the left background
region, transported to the left bond of position 0; RIBC is the mirror, so
the junction bonds bonds[0] and bonds[K] are handled explicitly.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import kernels, linalg, transfer

WINDOW_CHECKPOINT_VERSION = 1


@dataclass
class DefectSpec:
    """Lattice defect carried by a window.

    kind "weak_weak": one extra site whose two neighbouring bonds are weak;
    kind "none": one extra full unit cell (no perturbation; sanity checks).
    local_scale multiplies the two defect bonds, a knob for additional local
    Hamiltonian corrections (1.0 = purely geometric defect).
    """

    kind: str = "weak_weak"
    local_scale: float = 1.0


@dataclass
class WindowMps:
    """Uniform background with a finite list of replaced tensors."""

    background: object                  # UniformMps
    tensors: list
    sites_per_tensor: list
    first_site: int = 0

    def copy(self):
        return WindowMps(self.background, [t.copy() for t in self.tensors],
                         list(self.sites_per_tensor), self.first_site)

    @property
    def dims(self):
        return [t.shape[0] for t in self.tensors]

    def site_span(self):
        n = int(np.sum(self.sites_per_tensor))
        return self.first_site, self.first_site + n

    def norm(self):
        sigma = self.background.l_env
        for t in self.tensors:
            sigma = kernels.transfer_left(t, t, sigma)
        return kernels.pair(sigma, self.background.r_env).real

    def normalize(self):
        n = self.norm()
        if n <= 0:
            raise ValueError("window state has non-positive norm")
        scale = n ** (-0.5 / len(self.tensors))
        self.tensors = [t * scale for t in self.tensors]
        return self


@dataclass
class WindowHamiltonian:
    """Shifted bond operators plus boundary environments for one layout."""

    background: object
    bonds: list                        # K+1 operators; bonds[j] couples (j-1, j)
    libc: np.ndarray
    ribc: np.ndarray
    shift: float
    lam2: float
    bond_factory: object = field(repr=False, default=None)

    def rebuild(self, dims):
        """Bond list for a different window layout of the same model."""
        return build_window_hamiltonian(
            self.background, dims, self.bond_factory,
            _reuse=(self.libc, self.ribc, self.shift, self.lam2))


def abahc_bond_factory(model, defect=None, h_z=0.0):
    """Bond operators keyed by the physical dimensions they couple."""
    defect = defect or DefectSpec()

    def factory(dl, dr):
        if (dl, dr) == (model.d_cell, model.d_cell):
            return model.cell_bond(h_z)
        if (dl, dr) == (model.d_cell, model.d_site):
            return model.center_left(h_z, defect.local_scale)
        if (dl, dr) == (model.d_site, model.d_cell):
            return model.center_right(h_z, defect.local_scale)
        raise ValueError(f"no bond operator for dimensions ({dl}, {dr})")

    return factory


def build_window_hamiltonian(background, dims, bond_factory, tol=1e-10,
                             _reuse=None):
    """Assemble shifted bond operators and LIBC/RIBC for a window layout."""
    a = background.tensor
    d_a = a.shape[0]
    h_uniform = bond_factory(d_a, d_a)
    if _reuse is None:
        sd = transfer.spectral_data(transfer.TransferOperator(a),
                                    m=min(2, a.shape[1] ** 2))
        lam2 = abs(sd.eigenvalues[1]) if len(sd) > 1 else 0.0
        env = transfer.boundary_environments(a, h_uniform, l=background.l_env,
                                             r=background.r_env, tol=tol,
                                             lam2=lam2)
        libc, ribc, shift = env.libc, env.ribc, env.energy_origin_shift
    else:
        libc, ribc, shift, lam2 = _reuse
    seq = [d_a] + list(dims) + [d_a]
    bonds = []
    for dl, dr in zip(seq[:-1], seq[1:]):
        h = bond_factory(dl, dr)
        bonds.append(h - shift * np.eye(h.shape[0]))
    return WindowHamiltonian(background=background, bonds=bonds, libc=libc,
                             ribc=ribc, shift=shift, lam2=lam2,
                             bond_factory=bond_factory)


def build_defect_window(background, model, defect, n, h_z=0.0, tol=1e-10):
    """Window of 2N+1 tensors around a defect, initialized from the background.

    The weak-weak center tensor spans one site and is seeded from a symmetric
    half-cell contraction of A; a small z field during the optimization picks
    one of the two degenerate spin branches.  Returns (WindowMps, WindowHamiltonian).
    """
    if n < 0:
        raise ValueError("window half-length N must be non-negative")
    a = background.tensor
    d_cell = a.shape[0]
    spc = background.sites_per_cell
    if defect.kind == "weak_weak":
        if spc != 2:
            raise ValueError("weak-weak defect requires a two-site unit cell")
        ds = model.d_site
        half = np.full(ds, 1.0 / np.sqrt(ds))
        a_split = a.reshape(ds, ds, a.shape[1], a.shape[2])
        center = np.tensordot(half, a_split, axes=(0, 1)).astype(np.complex128)
        dims = [d_cell] * n + [ds] + [d_cell] * n
        sites = [spc] * n + [1] + [spc] * n
        tensors = ([a.copy() for _ in range(n)] + [center]
                   + [a.copy() for _ in range(n)])
        first_site = -n * spc
    elif defect.kind == "none":
        dims = [d_cell] * (2 * n + 1)
        sites = [spc] * (2 * n + 1)
        tensors = [a.copy() for _ in range(2 * n + 1)]
        first_site = -n * spc
    else:
        raise ValueError(f"unknown defect kind {defect.kind!r}")
    ham = build_window_hamiltonian(background, dims,
                                   abahc_bond_factory(model, defect, h_z),
                                   tol=tol)
    w = WindowMps(background=background, tensors=tensors,
                  sites_per_tensor=sites, first_site=first_site)
    w.normalize()
    return w, ham


# --------------------------------------------------------------- the engine

def _left_plain(kets, bras, l0):
    envs = [l0]
    for k, b in zip(kets, bras):
        envs.append(kernels.transfer_left(k, b, envs[-1]))
    return envs


def _right_plain(kets, bras, r0):
    k = len(kets)
    envs = [None] * (k + 1)
    envs[k] = r0
    for j in range(k - 1, -1, -1):
        envs[j] = kernels.transfer_right(kets[j], bras[j], envs[j + 1])
    return envs


def _left_ham(w, ham, el):
    """hl[j]: bond terms wholly left of position j, at the left bond of j."""
    a = w.background.tensor
    l0 = w.background.l_env
    hl = [ham.libc]
    for j, tj in enumerate(w.tensors):
        nxt = kernels.transfer_left(tj, tj, hl[j])
        if j == 0:
            nxt = nxt + kernels.op2_left(ham.bonds[0], a, tj, a, tj, l0)
        else:
            tl = w.tensors[j - 1]
            nxt = nxt + kernels.op2_left(ham.bonds[j], tl, tj, tl, tj, el[j - 1])
        hl.append(nxt)
    return hl


def _right_ham(w, ham, er):
    """hr[j]: bond terms wholly right of position j, at the right bond of j."""
    a = w.background.tensor
    r0 = w.background.r_env
    k = len(w.tensors)
    hr = [None] * k
    hr[k - 1] = ham.ribc
    for j in range(k - 2, -1, -1):
        tn = w.tensors[j + 1]
        nxt = kernels.transfer_right(tn, tn, hr[j + 1])
        if j + 2 == k:
            nxt = nxt + kernels.op2_right(ham.bonds[k], tn, a, tn, a, r0)
        else:
            tr = w.tensors[j + 2]
            nxt = nxt + kernels.op2_right(ham.bonds[j + 2], tn, tr, tn, tr,
                                          er[j + 3])
        hr[j] = nxt
    return hr


def window_energy_norm(w, ham):
    """(<H>, <psi|psi>) for the shifted window Hamiltonian."""
    a = w.background.tensor
    r0 = w.background.r_env
    k = len(w.tensors)
    el = _left_plain(w.tensors, w.tensors, w.background.l_env)
    hl = _left_ham(w, ham, el)
    tail = kernels.op2_left(ham.bonds[k], w.tensors[k - 1], a,
                            w.tensors[k - 1], a, el[k - 1])
    energy = kernels.pair(hl[k], r0) + kernels.pair(tail, r0)
    energy = energy + kernels.pair(el[k], ham.ribc)
    norm = kernels.pair(el[k], r0).real
    return energy.real, norm


def window_energy(w, ham):
    e, n = window_energy_norm(w, ham)
    return e / n


def _open_site(sigma, ket, rho):
    # out[s, A, B] = sigma[a, A] ket[s, a, b] rho[b, B]
    t = np.tensordot(sigma, ket, axes=(0, 1))          # (A, s, b)
    return np.tensordot(t, rho, axes=(2, 0)).transpose(1, 0, 2)


def _open_bond_right(h, ket1, ket2, bra1, sigma, rho):
    """Bond term over (p-1, p) with the bra tensor at p left open."""
    d1b = bra1.shape[0]
    d2b = h.shape[0] // d1b
    hr = h.reshape(d1b, d2b, ket1.shape[0], ket2.shape[0])
    t = np.tensordot(sigma, ket1, axes=(0, 1))         # (A, s, q)
    t = np.tensordot(t, ket2, axes=(2, 1))             # (A, s, u, b)
    t = np.tensordot(t, rho, axes=(3, 0))              # (A, s, u, B)
    t = np.tensordot(hr, t, axes=([2, 3], [1, 2]))     # (p, w, A, B)
    out = np.tensordot(bra1.conj(), t, axes=([0, 1], [0, 2]))  # (C, w, B)
    return out.transpose(1, 0, 2)


def _open_bond_left(h, ket1, ket2, bra2, sigma, rho):
    """Bond term over (p, p+1) with the bra tensor at p left open."""
    d2b = bra2.shape[0]
    d1b = h.shape[0] // d2b
    hr = h.reshape(d1b, d2b, ket1.shape[0], ket2.shape[0])
    t = np.tensordot(sigma, ket1, axes=(0, 1))         # (A, s, q)
    t = np.tensordot(t, ket2, axes=(2, 1))             # (A, s, u, b)
    t = np.tensordot(t, rho, axes=(3, 0))              # (A, s, u, d)
    t = np.tensordot(t, bra2.conj(), axes=(3, 2))      # (A, s, u, w, C)
    out = np.tensordot(hr, t, axes=([1, 2, 3], [3, 1, 2]))     # (p, A, C)
    return out


def window_gradients(w, ham):
    """Raw gradients of <H> and <psi|psi> w.r.t. each conjugated window tensor.

    Returns (grads, norm_grads, el, er, energy, norm); el/er are plain
    environments indexed by bond (el[j] sits left of position j).
    """
    a = w.background.tensor
    l0 = w.background.l_env
    r0 = w.background.r_env
    k = len(w.tensors)
    el = _left_plain(w.tensors, w.tensors, l0)
    er = _right_plain(w.tensors, w.tensors, r0)
    hl = _left_ham(w, ham, el)
    hr = _right_ham(w, ham, er)
    grads, ngrads = [], []
    for q in range(k):
        t = w.tensors[q]
        g = _open_site(hl[q], t, er[q + 1])
        g += _open_site(el[q], t, hr[q])
        if q == 0:
            g += _open_bond_right(ham.bonds[0], a, t, a, l0, er[1])
        else:
            tl = w.tensors[q - 1]
            g += _open_bond_right(ham.bonds[q], tl, t, tl, el[q - 1], er[q + 1])
        if q == k - 1:
            g += _open_bond_left(ham.bonds[k], t, a, a, el[q], r0)
        else:
            tr = w.tensors[q + 1]
            g += _open_bond_left(ham.bonds[q + 1], t, tr, tr, el[q], er[q + 2])
        grads.append(g)
        ngrads.append(_open_site(el[q], t, er[q + 1]))
    tail = kernels.op2_left(ham.bonds[k], w.tensors[k - 1], a,
                            w.tensors[k - 1], a, el[k - 1])
    energy = kernels.pair(hl[k], r0) + kernels.pair(tail, r0)
    energy = energy + kernels.pair(el[k], ham.ribc)
    norm = kernels.pair(el[k], r0).real
    return grads, ngrads, el, er, energy.real, norm


# --------------------------------------------------------------- overlaps

def _same_background(w1, w2):
    b1, b2 = w1.background, w2.background
    return b1 is b2 or (np.allclose(b1.al, b2.al) and np.allclose(b1.c, b2.c))


def _aligned(w1, w2):
    """Pad both windows with background cells onto a common site span."""
    if not _same_background(w1, w2):
        raise ValueError("window states have different backgrounds")
    a = w1.background.tensor
    spc = w1.background.sites_per_cell
    s1, e1 = w1.site_span()
    s2, e2 = w2.site_span()
    start, end = min(s1, s2), max(e1, e2)
    lists = []
    for w, s, e in ((w1, s1, e1), (w2, s2, e2)):
        if (s - start) % spc or (end - e) % spc:
            raise ValueError("window spans are not aligned on unit cells")
        lists.append([a] * ((s - start) // spc) + list(w.tensors)
                     + [a] * ((end - e) // spc))
    return lists[0], lists[1]


def window_overlap(bra, ket):
    """<bra|ket> by transfer contraction through the union of the windows."""
    kets, bras = _aligned(ket, bra)
    sigma = ket.background.l_env
    for kt, bt in zip(kets, bras):
        if kt.shape[0] != bt.shape[0]:
            raise ValueError("aligned windows have mismatched physical dimensions")
        sigma = kernels.transfer_left(kt, bt, sigma)
    return complex(kernels.pair(sigma, ket.background.r_env))


def window_fidelity(w1, w2):
    """|<w1|w2>| between normalized window states over one background."""
    return abs(window_overlap(w1, w2)) / np.sqrt(w1.norm() * w2.norm())


def fidelity_distance(w_ref, w):
    """sqrt(1 - |<ref|w>|), the window-length trade-off measure."""
    return float(np.sqrt(max(0.0, 1.0 - window_fidelity(w_ref, w))))


def insertion_value(bra, ket, pos_ops):
    """<bra| sum of single-tensor operator insertions |ket>, same span.

    pos_ops maps window position -> operator on that tensor's full physical
    space; the value sums the separate insertions (not normalized).
    """
    if bra.site_span() != ket.site_span():
        raise ValueError("insertion_value requires identical spans")
    env = ket.background.l_env
    acc = np.zeros_like(env)
    for j, (kt, bt) in enumerate(zip(ket.tensors, bra.tensors)):
        acc = kernels.transfer_left(kt, bt, acc)
        op = pos_ops.get(j)
        if op is not None:
            acc = acc + kernels.op1_left(np.asarray(op, dtype=np.complex128),
                                         kt, bt, env)
        env = kernels.transfer_left(kt, bt, env)
    return complex(kernels.pair(acc, ket.background.r_env))


def background_insertion(w, side, n_cells, op_cell):
    """Unnormalized <op> at a background cell n_cells beyond the window edge."""
    a = w.background.tensor
    op = np.asarray(op_cell, dtype=np.complex128)
    if side == "left":
        sigma = kernels.op1_left(op, a, a, w.background.l_env)
        for _ in range(n_cells):
            sigma = kernels.transfer_left(a, a, sigma)
        for t in w.tensors:
            sigma = kernels.transfer_left(t, t, sigma)
        return complex(kernels.pair(sigma, w.background.r_env))
    if side == "right":
        rho = kernels.op1_right(op, a, a, w.background.r_env)
        for _ in range(n_cells):
            rho = kernels.transfer_right(a, a, rho)
        for t in reversed(w.tensors):
            rho = kernels.transfer_right(t, t, rho)
        return complex(kernels.pair(w.background.l_env, rho))
    raise ValueError("side must be 'left' or 'right'")


def site_expectation(w, global_site, op_site, embed_cell):
    """<O> at one physical site, inside or outside the window, normalized.

    `op_site` acts on a single site; `embed_cell(op, slot)` embeds it in a
    background cell.  Window tensors covering one site take op_site directly.
    """
    start, end = w.site_span()
    spc = w.background.sites_per_cell
    norm = w.norm()
    if global_site < start:
        offset = start - 1 - global_site
        val = background_insertion(w, "left", offset // spc,
                                   embed_cell(op_site, spc - 1 - offset % spc))
        return val.real / norm
    if global_site >= end:
        offset = global_site - end
        val = background_insertion(w, "right", offset // spc,
                                   embed_cell(op_site, offset % spc))
        return val.real / norm
    site = start
    for pos, (t, ns) in enumerate(zip(w.tensors, w.sites_per_tensor)):
        if site <= global_site < site + ns:
            slot = global_site - site
            op = op_site if ns == 1 else embed_cell(op_site, slot)
            return insertion_value(w, w, {pos: op}).real / norm
        site += ns
    raise AssertionError("unreachable")


def bond_expectation(w, ham, j):
    """Normalized expectation of the shifted bond operator bonds[j]."""
    a = w.background.tensor
    l0, r0 = w.background.l_env, w.background.r_env
    k = len(w.tensors)
    el = _left_plain(w.tensors, w.tensors, l0)
    er = _right_plain(w.tensors, w.tensors, r0)
    if j == 0:
        v = kernels.op2_left(ham.bonds[0], a, w.tensors[0], a, w.tensors[0], l0)
        val = kernels.pair(v, er[1])
    elif j == k:
        v = kernels.op2_left(ham.bonds[k], w.tensors[k - 1], a,
                             w.tensors[k - 1], a, el[k - 1])
        val = kernels.pair(v, r0)
    else:
        v = kernels.op2_left(ham.bonds[j], w.tensors[j - 1], w.tensors[j],
                             w.tensors[j - 1], w.tensors[j], el[j - 1])
        val = kernels.pair(v, er[j + 1])
    return complex(val) / kernels.pair(el[k], r0).real


# ------------------------------------------------------- tangent-space gauge

@dataclass
class TangentGauge:
    """Null-space gauge of the background tensor for orthogonal insertions.

    vl (d, D, D(d-1)) satisfies sum_s A^s+ vl^s = 0 and sum_s vl^s+ vl^s = 1.
    vr (d, D(d-1), D) satisfies sum_s (A^s r^1/2) vr^s+ = 0 with row isometry.
    Insertions C(X) built from them are exactly orthogonal to the vacuum when
    the tensors between the insertion and the contraction boundary are
    background tensors, and |C(X)|^2 = Tr(X X+) in the vacuum environments.
    """

    a: np.ndarray
    r: np.ndarray
    r_sqrt: np.ndarray
    r_inv_sqrt: np.ndarray
    vl: np.ndarray
    vr: np.ndarray

    @classmethod
    def build(cls, background, floor=1e-12):
        a = background.tensor
        d, dl, dr = a.shape
        r = background.r_env
        r_sqrt = linalg.sqrtm_psd(r)
        r_inv_sqrt = linalg.inv_sqrt(r, floor=floor)
        null_l = sla.null_space(a.reshape(d * dl, dr).conj().T)
        vl = null_l.reshape(d, dl, dl * (d - 1))
        a_weighted = np.einsum("sab,bc->sac", a, r_sqrt)
        null_r = sla.null_space(a_weighted.transpose(1, 0, 2).reshape(dl, d * dr))
        vr = null_r.conj().T.reshape(dr * (d - 1), d, dr).transpose(1, 0, 2)
        return cls(a=a, r=r, r_sqrt=r_sqrt, r_inv_sqrt=r_inv_sqrt, vl=vl, vr=vr)

    def c_from_x_left(self, x):
        return np.einsum("sak,km,mb->sab", self.vl, x, self.r_inv_sqrt)

    def c_from_x_right(self, x):
        return np.einsum("ak,skm,mb->sab", x, self.vr, self.r_inv_sqrt)

    def project_left(self, g):
        """M with min_X Tr(X X+) + 2 Re<C(X)|g> solved by X = -M."""
        return np.einsum("sak,sab,mb->km", self.vl.conj(), g,
                         self.r_inv_sqrt.conj())

    def project_right(self, g):
        return np.einsum("sab,mb,skm->ak", g, self.r_inv_sqrt.conj(),
                         self.vr.conj())


# --------------------------------------------------- effective center problem

def effective_center_problem(background, ham, d_center, dense_limit=6000):
    """(H_eff, N_eff) for the single replaced tensor of the minimal window.

    Hermitian matrices on the d_center * D^2 space, indexed ((s,a,b) bra,
    (s,a,b) ket).  `ham` must describe the single-tensor layout [d_center].
    """
    a = background.tensor
    d_a = a.shape[0]
    dl = a.shape[1]
    dim = d_center * dl * dl
    if dim > dense_limit:
        raise ValueError(f"center problem dimension {dim} exceeds dense limit "
                         f"{dense_limit}")
    if len(ham.bonds) != 2:
        raise ValueError("effective_center_problem expects a single-tensor window")
    l0 = background.l_env
    r0 = background.r_env
    h_left, h_right = ham.bonds[0], ham.bonds[1]

    eye_d = np.eye(d_center)
    h_eff = np.einsum("sS,aA,bB->SABsab", eye_d, ham.libc, r0, optimize=True)
    h_eff += np.einsum("sS,aA,bB->SABsab", eye_d, l0, ham.ribc, optimize=True)
    # left-cell closure carries l0 through the pair; right closure carries r0
    p = np.einsum("pQc,qQ,tqa->ptca", a.conj(), l0, a, optimize=True)
    hl_r = h_left.reshape(d_a, d_center, d_a, d_center)
    h_eff += np.einsum("pwts,ptAa,bB->wABsab", hl_r, p, r0, optimize=True)
    q = np.einsum("weQ,qQ,ubq->wueb", a.conj(), r0, a, optimize=True)
    hr_r = h_right.reshape(d_center, d_a, d_center, d_a)
    h_eff += np.einsum("pwsu,wuBb,aA->pABsab", hr_r, q, l0, optimize=True)
    h_eff = h_eff.reshape(dim, dim)
    h_eff = 0.5 * (h_eff + h_eff.conj().T)

    n_eff = np.einsum("sS,aA,bB->SABsab", eye_d, l0, r0, optimize=True)
    n_eff = n_eff.reshape(dim, dim)
    n_eff = 0.5 * (n_eff + n_eff.conj().T)
    return h_eff, n_eff


def solve_center(background, ham, d_center, floor=1e-12):
    """Minimal generalized eigenpair of (H_eff, N_eff): (lambda, tensor)."""
    h_eff, n_eff = effective_center_problem(background, ham, d_center)
    wn = np.linalg.eigvalsh(n_eff)
    if wn[0] < floor * wn[-1]:
        raise ValueError(f"N_eff not positive definite above floor: min "
                         f"eigenvalue {wn[0]:.3e}")
    w, v = linalg.generalized_eig(h_eff, n_eff, null_tol=floor)
    dl = background.tensor.shape[1]
    b = v[:, 0].reshape(d_center, dl, dl)
    return float(w[0]), b


# ----------------------------------------------------------------- TDVP

def _center_positions(w, d_bg):
    """Positions updated without the tangent-gauge restriction."""
    centers = {q for q, d in enumerate(w.dims) if d != d_bg}
    if not centers:
        centers = {len(w.tensors) // 2}
    return centers


def _psd_inverse(m, floor=1e-12):
    m = 0.5 * (m + m.conj().T)
    wv, vv = np.linalg.eigh(m)
    wv = np.clip(wv, floor * max(wv[-1].real, floor), None)
    return (vv / wv) @ vv.conj().T


def tdvp_directions(w, ham, gauge):
    """Per-position descent directions, the energy, and tangent weights.

    Background-dimension positions left (right) of the window center are
    parametrized through the left (right) tangent gauge; defect positions
    get the fully metric-inverted gradient.  The X equations are solved in
    the exact insertion metric of the current environments, which reduces to
    the unit metric at the vacuum.  Returns (directions, energy, x_norms)
    with x_norms[q] the squared insertion norm of the update (equal to
    Tr(X X+) for gauge positions at the vacuum).
    """
    grads, ngrads, el, er, energy, norm = window_gradients(w, ham)
    e0 = energy / norm
    d_bg = gauge.a.shape[0]
    centers = _center_positions(w, d_bg)
    anchor_left = min(centers)
    anchor_right = max(centers)
    rinv = gauge.r_inv_sqrt
    dirs, x_norms = [], []
    for q in range(len(w.tensors)):
        g_eff = (grads[q] - e0 * ngrads[q]) / norm
        if q not in centers and w.tensors[q].shape[0] == d_bg:
            if q < anchor_left:
                m = gauge.project_left(g_eff)
                gl = kernels.transfer_left(gauge.vl, gauge.vl, el[q])
                gr = rinv @ (er[q + 1] / norm) @ rinv
                x = -_psd_inverse(gl).conj() @ m @ _psd_inverse(gr)
                dirs.append(gauge.c_from_x_left(x))
            else:
                # right-type gauge also covers cells between two defects
                m = gauge.project_right(g_eff)
                gr2 = kernels.transfer_right(gauge.vr, gauge.vr,
                                             rinv @ (er[q + 1] / norm) @ rinv)
                x = -_psd_inverse(el[q]).conj() @ m @ _psd_inverse(gr2)
                dirs.append(gauge.c_from_x_right(x))
            x_norms.append(max(0.0, float(-np.real(np.vdot(x, m)))))
        else:
            sigma_inv = _psd_inverse(el[q])
            rho_inv = _psd_inverse(er[q + 1] / norm)
            t = np.tensordot(sigma_inv, g_eff, axes=(0, 1))    # (a, s, B)
            c = -np.tensordot(t, rho_inv, axes=(2, 0)).transpose(1, 0, 2)
            dirs.append(c)
            x_norms.append(max(0.0, float(-np.real(np.vdot(c, g_eff)))))
    return dirs, e0, x_norms


def tdvp_imaginary_step(w, ham, gauge, dtau, backtrack_floor=1e-8,
                        energy_slack=1e-12):
    """One imaginary-time step; halves dtau until the energy does not rise.

    Returns (new_window, info dict).  Raises ConvergenceError when the step
    size falls below backtrack_floor without achieving descent.
    """
    dirs, e0, x_norms = tdvp_directions(w, ham, gauge)
    dt = dtau
    backtracks = 0
    while True:
        trial = w.copy()
        trial.tensors = [t + dt * c for t, c in zip(trial.tensors, dirs)]
        trial.normalize()
        e1 = window_energy(trial, ham)
        if e1 <= e0 + energy_slack * max(1.0, abs(e0)):
            move = dt * np.sqrt(max(0.0, sum(x_norms)))
            info = {"energy": e1, "energy_before": e0, "step": dt,
                    "backtracks": backtracks, "x_norms": x_norms,
                    "state_change": move}
            return trial, info
        dt *= 0.5
        backtracks += 1
        if dt < backtrack_floor:
            raise linalg.ConvergenceError(
                f"TDVP step failed to descend above floor {backtrack_floor:.1e}"
                f" (energy {e0} -> {e1})", residual=e1 - e0, state=w)


class _LocalProblem:
    """Per-position quadratic forms <W|H_loc|W>, <W|N_loc|W> as matrix-free maps.

    Environments are built once from the other tensors; the operators then
    act on an arbitrary tensor at position q.
    """

    def __init__(self, w, ham, q, envs=None):
        a = w.background.tensor
        l0, r0 = w.background.l_env, w.background.r_env
        k = len(w.tensors)
        if envs is None:
            el = _left_plain(w.tensors, w.tensors, l0)
            er = _right_plain(w.tensors, w.tensors, r0)
            hl = _left_ham(w, ham, el)
            hr = _right_ham(w, ham, er)
        else:
            el, er, hl, hr = envs
        self.shape = w.tensors[q].shape
        self.sig, self.rho = el[q], er[q + 1]
        self.hl_q, self.hr_q = hl[q], hr[q]
        self.tl, self.env_l = (a, l0) if q == 0 else (w.tensors[q - 1], el[q - 1])
        self.tr, self.env_r = (a, r0) if q == k - 1 else (w.tensors[q + 1], er[q + 2])
        self.h_left = ham.bonds[q]
        self.h_right = ham.bonds[q + 1]

    @property
    def dim(self):
        d, dl, dr = self.shape
        return d * dl * dr

    def apply_h(self, wq):
        g = _open_site(self.hl_q, wq, self.rho)
        g += _open_site(self.sig, wq, self.hr_q)
        g += _open_bond_right(self.h_left, self.tl, wq, self.tl,
                              self.env_l, self.rho)
        g += _open_bond_left(self.h_right, wq, self.tr, self.tr,
                             self.sig, self.env_r)
        return g

    def apply_n(self, wq):
        return _open_site(self.sig, wq, self.rho)

    def solve(self, v0, tol=1e-12):
        """Smallest eigenpair of (H_loc, N_loc) via the N^{-1/2} transform."""
        import scipy.sparse.linalg as spla
        d = self.shape[0]
        si = _psd_root_inverse(self.sig)
        ri = _psd_root_inverse(self.rho)

        def to_tensor(z):
            # w = N^{-1/2} z:  sigma^{-T/2} z rho^{-1/2} per physical index
            zt = z.reshape(self.shape)
            t = np.tensordot(si, zt, axes=(0, 1))          # (a, s, b)
            return np.tensordot(t, ri, axes=(2, 0)).transpose(1, 0, 2)

        def matvec(z):
            g = self.apply_h(to_tensor(z))
            t = np.tensordot(si, g, axes=(0, 1))           # (a, s, B)
            return np.tensordot(t, ri, axes=(2, 0)).transpose(1, 0, 2).ravel()

        t = np.tensordot(linalg.sqrtm_psd(self.sig), v0, axes=(0, 1))
        z0 = np.tensordot(t, linalg.sqrtm_psd(self.rho), axes=(2, 0))
        z0 = z0.transpose(1, 0, 2).ravel()
        op = spla.LinearOperator((self.dim, self.dim), matvec=matvec,
                                 dtype=np.complex128)
        try:
            vals, vecs = spla.eigsh(op, k=1, which="SA", v0=z0,
                                    tol=max(tol, 1e-13),
                                    maxiter=max(2000, 20 * self.dim))
        except spla.ArpackNoConvergence as exc:
            raise linalg.ConvergenceError("local window eigensolve failed") from exc
        return float(vals[0]), to_tensor(vecs[:, 0])


def _psd_root_inverse(m, floor=1e-12):
    m = 0.5 * (m + m.conj().T)
    wv, vv = np.linalg.eigh(m)
    wv = np.clip(wv, floor * max(wv[-1].real, floor), None)
    return (vv / np.sqrt(wv)) @ vv.conj().T


def refresh_sweep(w, ham, tol=1e-11):
    """Replace every window tensor by its local minimizer, left to right.

    Each replacement solves the per-position generalized eigenproblem in the
    current environments (right environments ahead of the sweep are fresh by
    construction, left environments are extended incrementally), so the
    energy decreases monotonically.  The joint fixed point is the same
    variational stationary point that the TDVP flow targets; the sweep
    relaxes the nearly degenerate spin-polarization mode that plain
    imaginary-time steps only cure at a rate set by the small
    symmetry-breaking field.
    """
    w = w.copy()
    a = w.background.tensor
    l0, r0 = w.background.l_env, w.background.r_env
    k = len(w.tensors)
    er = _right_plain(w.tensors, w.tensors, r0)
    hr = _right_ham(w, ham, er)
    el = [l0]
    hl = [ham.libc]
    lam = np.nan
    for q in range(k):
        prob = _LocalProblem(w, ham, q, envs=(el + [None] * (k - q), er,
                                              hl + [None] * (k - q), hr))
        lam, new_t = prob.solve(w.tensors[q], tol=tol)
        # normalize this tensor against the local metric
        nrm = np.real(np.vdot(new_t, prob.apply_n(new_t)))
        w.tensors[q] = new_t / np.sqrt(nrm)
        tq = w.tensors[q]
        nxt = kernels.transfer_left(tq, tq, hl[q])
        if q == 0:
            nxt += kernels.op2_left(ham.bonds[0], a, tq, a, tq, l0)
        else:
            tl = w.tensors[q - 1]
            nxt += kernels.op2_left(ham.bonds[q], tl, tq, tl, tq, el[q - 1])
        hl.append(nxt)
        el.append(kernels.transfer_left(tq, tq, el[q]))
    return w, lam


@dataclass
class TdvpSchedule:
    dtau_start: float = 0.1
    dtau_min: float = 1e-3
    shrink: float = 0.5
    grow: float = 1.25
    grow_after: int = 5
    tol: float = 1e-9
    max_steps: int = 20000
    sweep_every: int | None = 5


def optimize_window(w, ham, gauge=None, schedule=None):
    """Imaginary-time optimization of all window tensors over the background.

    The step size starts at schedule.dtau_start and shrinks geometrically
    whenever backtracking fires or the per-step state change falls below a
    proportional threshold; convergence is declared once the change is below
    schedule.tol with the step size at its floor.  Every sweep_every steps
    each tensor is additionally replaced by its local minimizer in the
    current environments (same variational fixed point), which relaxes the
    nearly degenerate spin-polarization mode at rate independent of the
    small symmetry-breaking field.  Returns (window, info).
    """
    schedule = schedule or TdvpSchedule()
    gauge = gauge or TangentGauge.build(w.background)
    w = w.copy().normalize()
    dt = schedule.dtau_start
    energy = window_energy(w, ham)
    steps = 0
    clean = 0
    while steps < schedule.max_steps:
        if schedule.sweep_every and steps % schedule.sweep_every == 0:
            w, energy = refresh_sweep(w, ham)
        try:
            w_new, info = tdvp_imaginary_step(w, ham, gauge, dt)
        except linalg.ConvergenceError:
            if dt <= schedule.dtau_min:
                raise
            dt = max(schedule.dtau_min, dt * schedule.shrink)
            continue
        steps += 1
        # state change of the step from the update-direction norms; equals
        # the successive-state fidelity distance to leading order but has no
        # floating-point floor near convergence
        step_change = info["state_change"]
        energy = info["energy"]
        w = w_new
        if info["backtracks"] > 0:
            clean = 0
            if dt > schedule.dtau_min:
                dt = max(schedule.dtau_min, dt * schedule.shrink)
        else:
            clean += 1
        scaled_tol = schedule.tol * max(1.0, dt / schedule.dtau_min)
        if step_change < scaled_tol:
            if dt <= schedule.dtau_min * 1.0001:
                return w, {"energy": energy, "steps": steps, "dtau": dt,
                           "converged": True, "step_change": step_change}
            dt = max(schedule.dtau_min, dt * schedule.shrink)
            clean = 0
        elif clean >= schedule.grow_after and dt < schedule.dtau_start:
            dt = min(schedule.dtau_start, dt * schedule.grow)
            clean = 0
    raise linalg.ConvergenceError(
        f"window optimization did not converge in {schedule.max_steps} steps",
        residual=energy, state=w)


def pad_window(w, ham, pad_left, pad_right):
    """Extend a window with background cells (state unchanged)."""
    a = w.background.tensor
    spc = w.background.sites_per_cell
    tensors = [a.copy() for _ in range(pad_left)] + [t.copy() for t in w.tensors]
    tensors += [a.copy() for _ in range(pad_right)]
    sites = [spc] * pad_left + list(w.sites_per_tensor) + [spc] * pad_right
    w2 = WindowMps(w.background, tensors, sites,
                   w.first_site - pad_left * spc)
    return w2, ham.rebuild(w2.dims)


def tangent_energy_weights(w, ham, gauge=None, m_range=12, floor=1e-28):
    """Tangent-space energy weights of the first imaginary-time step.

    The window is padded with background cells out to +-m_range around its
    span; for each padded position the weight is Tr(X X+) of the gauge
    projection of H|psi>, and for the defect positions the metric norm of
    the center update.  Returns (offsets, weights) with offsets in unit
    cells relative to the window center; weights below `floor` are reported
    as computed but flagged by the caller for fit exclusion.
    """
    gauge = gauge or TangentGauge.build(w.background)
    pad = int(m_range)
    w2, ham2 = pad_window(w, ham, pad, pad)
    _, _, x_norms = tdvp_directions(w2, ham2, gauge)
    centers = _center_positions(w2, gauge.a.shape[0])
    mid = (min(centers) + max(centers)) / 2.0
    offsets = [q - mid for q in range(len(w2.tensors))]
    return offsets, x_norms


# ------------------------------------------------------------- checkpoints

def save_window(path, w, background_path=""):
    arrays = {f"tensor_{i}": t for i, t in enumerate(w.tensors)}
    with open(path, "wb") as fh:
        np.savez(fh, version=WINDOW_CHECKPOINT_VERSION,
                 n_tensors=len(w.tensors),
                 sites_per_tensor=np.asarray(w.sites_per_tensor),
                 first_site=w.first_site,
                 background_path=np.bytes_(str(background_path).encode()),
                 background_al=w.background.al, background_c=w.background.c,
                 **arrays)


def load_window(path, background):
    with np.load(path) as data:
        if int(data["version"]) != WINDOW_CHECKPOINT_VERSION:
            raise ValueError(f"unsupported window checkpoint version "
                             f"{data['version']}")
        if not np.allclose(data["background_al"], background.al):
            raise ValueError("window checkpoint does not match this background")
        n = int(data["n_tensors"])
        tensors = [data[f"tensor_{i}"] for i in range(n)]
        return WindowMps(background=background, tensors=tensors,
                         sites_per_tensor=[int(x) for x in data["sites_per_tensor"]],
                         first_site=int(data["first_site"]))
