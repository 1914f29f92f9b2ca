"""Exact constructions for the AKLT chain doped with S=3/2 impurities.

Every closed form here (profiles, Gram matrices, effective-field matrices,
scattering amplitudes) has a companion transfer-contraction path so the two
can be checked against each other; the bond dimension is 2 throughout, so
the contractions are exact and cheap.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels, linalg, spins, transfer, vumps, window

SQ13 = np.sqrt(1.0 / 3.0)
SQ23 = np.sqrt(2.0 / 3.0)

UP, DOWN = "up", "down"


def bulk_tensor():
    """Bulk tensor of the valence-bond ground state, d = 3, D = 2.

    Physical index ordered m = +1, 0, -1; normalized so the uniform state
    has unit norm in the thermodynamic limit (transfer eigenvalue 1).
    """
    _, _, _, sp, sm = spins.pauli()
    sz = spins.pauli()[2]
    a = np.zeros((3, 2, 2), dtype=np.complex128)
    a[0] = SQ23 * sp
    a[1] = -SQ13 * sz
    a[2] = -SQ23 * sm
    return a


def impurity_tensor(sigma):
    """Impurity tensor for effective-spin label sigma ('up' or 'down').

    d = 4 (S = 3/2, ordered m = 3/2, 1/2, -1/2, -3/2), D = 2.
    """
    _, _, sz, sp, sm = spins.pauli()
    b = np.zeros((4, 2, 2), dtype=np.complex128)
    if sigma == UP:
        b[0] = sp
        b[1] = -SQ13 * sz
        b[2] = -SQ13 * sm
    elif sigma == DOWN:
        b[1] = SQ13 * sp
        b[2] = -SQ13 * sz
        b[3] = -sm
    else:
        raise ValueError(f"sigma must be 'up' or 'down', got {sigma!r}")
    return b


def uniform_state():
    """The uniform ground state wrapped as a UniformMps (exact tensors)."""
    return vumps.uniform_from_tensor(bulk_tensor(), energy_density=0.0,
                                     grad_norm=0.0, sites_per_cell=1)


def transfer_channels():
    """Closed-form dominant and z-channel eigenvectors of the bulk transfer.

    Returns (l1, r1, l2, r2) with (l1|r1) = (l2|r2) = 1 in the convention
    where the left dominant vector is the identity.
    """
    sz = spins.pauli()[2]
    eye = np.eye(2, dtype=np.complex128)
    return eye, eye / 2.0, sz.astype(np.complex128), sz / 2.0


# ------------------------------------------------------------- closed forms

def f_profile(i):
    """Magnetization at site i around a single 'up' impurity at site 0."""
    i = int(i)
    if i == 0:
        return 5.0 / 6.0
    return (2.0 / 3.0) * (-1.0 / 3.0) ** abs(i)


def f_partial_sum(radius):
    return f_profile(0) + 2 * sum(f_profile(i) for i in range(1, radius + 1))


def edge_profile(i):
    """Magnetization at site i >= 1 near the left edge of an open chain."""
    if i < 1:
        raise ValueError("edge profile is defined for sites i >= 1")
    return -2.0 * (-1.0 / 3.0) ** i


def g1(i, sep):
    """First-impurity profile with two impurities at 0 and sep."""
    return (1.0 + 0.25 * (i == sep)) * f_profile(i)


def g2(i, sep):
    return g1(sep - i, sep)


def delta_overlap(sep):
    """Overlap parameter of the two-impurity Gram matrix."""
    return (-1.0 / 3.0) ** (sep + 1)


def gram_matrix(sep):
    """Closed-form 4x4 Gram matrix of the two-impurity basis (uu, ud, du, dd)."""
    if sep < 2:
        raise ValueError("impurity separation must be at least 2")
    d = delta_overlap(sep)
    g = np.zeros((4, 4), dtype=np.complex128)
    g[0, 0] = g[3, 3] = 1.0 - d
    g[1, 1] = g[2, 2] = 1.0 + d
    g[1, 2] = g[2, 1] = -2.0 * d
    return g


def beta_pm(sep):
    """Mixing coefficients of the orthonormalized qubit basis."""
    d = delta_overlap(sep)
    bp = 0.5 * (np.sqrt(1.0 / (1.0 - d)) + np.sqrt(1.0 / (1.0 + 3.0 * d)))
    bm = 0.5 * (np.sqrt(1.0 / (1.0 - d)) - np.sqrt(1.0 / (1.0 + 3.0 * d)))
    return bp, bm


def qubit_transform(sep):
    """Closed-form inverse square root of the Gram matrix (block structure)."""
    bp, bm = beta_pm(sep)
    t = np.zeros((4, 4), dtype=np.complex128)
    t[0, 0] = t[3, 3] = bp + bm
    t[1, 1] = t[2, 2] = bp
    t[1, 2] = t[2, 1] = bm
    return t


def effective_fields(fields, profile):
    """h_eff = 2 sum_i profile(i) h_i for a field configuration.

    `fields` maps site -> length-3 vector; returns a length-3 array.
    """
    out = np.zeros(3)
    for i, h in fields.items():
        out += 2.0 * profile(int(i)) * np.asarray(h, dtype=float)
    return out


def pauli_field_matrix(heff):
    """(1/2) sum_alpha h_alpha sigma_alpha."""
    sx, sy, sz, _, _ = spins.pauli()
    hx, hy, hz = heff
    return 0.5 * (hx * sx + hy * sy + hz * sz)


def two_spin_field_matrix(heff1, heff2):
    """Closed-form 4x4 matrix of a Zeeman term in the two-impurity basis."""
    x1, y1, z1 = heff1
    x2, y2, z2 = heff2
    m = np.array([
        [z1 + z2, x2 - 1j * y2, x1 - 1j * y1, 0],
        [x2 + 1j * y2, z1 - z2, 0, x1 - 1j * y1],
        [x1 + 1j * y1, 0, -z1 + z2, x2 - 1j * y2],
        [0, x1 + 1j * y1, x2 + 1j * y2, -z1 - z2],
    ], dtype=np.complex128)
    return 0.5 * m


# ------------------------------------------------------------ window states

def labeled_window(labels, positions, span=None):
    """Window state with impurity tensors at given sites, bulk elsewhere.

    `labels` are 'up'/'down' for each impurity; `span` (lo, hi) optionally
    widens the window (inclusive site range) so operators can be inserted.
    """
    if len(labels) != len(positions):
        raise ValueError("labels and positions must have equal length")
    if sorted(positions) != list(positions):
        raise ValueError("impurity positions must be increasing")
    lo = min(positions)
    hi = max(positions)
    if span is not None:
        lo, hi = min(lo, span[0]), max(hi, span[1])
    a = bulk_tensor()
    by_pos = dict(zip(positions, labels))
    tensors = []
    for site in range(lo, hi + 1):
        if site in by_pos:
            tensors.append(impurity_tensor(by_pos[site]))
        else:
            tensors.append(a.copy())
    return window.WindowMps(background=uniform_state(), tensors=tensors,
                            sites_per_tensor=[1] * len(tensors), first_site=lo)


def aklt_bond_factory():
    """Bond operators for AKLT windows, keyed by physical dimensions."""

    def factory(dl, dr):
        if (dl, dr) == (3, 3):
            return spins.aklt_bond()
        if (dl, dr) == (3, 4):
            return spins.aklt_impurity_bond(impurity_first=False)
        if (dl, dr) == (4, 3):
            return spins.aklt_impurity_bond(impurity_first=True)
        raise ValueError(f"no AKLT bond operator for dimensions ({dl}, {dr})")

    return factory


def window_hamiltonian(dims):
    """Shifted AKLT bond operators and boundary environments for a layout."""
    return window.build_window_hamiltonian(uniform_state(), dims,
                                           aklt_bond_factory())


def magnetization(w, site):
    """<S^z> at a site of an AKLT window state (bulk or impurity tensor)."""
    sz1 = spins.spin_matrices(2)[2]
    sz32 = spins.spin_matrices(3)[2]
    start, end = w.site_span()
    norm = w.norm()
    if start <= site < end:
        pos = site - start
        op = sz32 if w.tensors[pos].shape[0] == 4 else sz1
        return window.insertion_value(w, w, {pos: op}).real / norm
    side = "left" if site < start else "right"
    n = (start - 1 - site) if site < start else (site - end)
    return window.background_insertion(w, side, n, sz1).real / norm


def profile_via_contraction(w, site):
    """Transfer-contraction magnetization, cross-check of the closed forms."""
    return magnetization(w, site)


def edge_profile_contraction(i):
    """<S^z_i> near the left edge by direct contraction (edge label 'up')."""
    if i < 1:
        raise ValueError("edge profile is defined for sites i >= 1")
    a = bulk_tensor()
    sz1 = spins.spin_matrices(2)[2]
    l_edge = np.zeros((2, 2), dtype=np.complex128)
    l_edge[0, 0] = 2.0                       # (l_edge | r1) = 1 with r1 = 1/2
    sigma = l_edge
    for _ in range(i - 1):
        sigma = kernels.transfer_left(a, a, sigma)
    sigma = kernels.op1_left(sz1, a, a, sigma)
    _, r1 = np.eye(2, dtype=np.complex128), np.eye(2, dtype=np.complex128) / 2
    return kernels.pair(sigma, r1).real


def gram_matrix_contraction(sep):
    """Gram matrix of the two-impurity basis by transfer contraction."""
    labels = [(UP, UP), (UP, DOWN), (DOWN, UP), (DOWN, DOWN)]
    states = [labeled_window(lab, (0, sep)) for lab in labels]
    g = np.zeros((4, 4), dtype=np.complex128)
    for i in range(4):
        for j in range(4):
            g[i, j] = window.window_overlap(states[i], states[j])
    return g


def _site_field_op(h, dim):
    ops = spins.spin_matrices(2 if dim == 3 else 3)
    return sum(hc * op for hc, op in zip(h, ops))


def field_matrix_contraction(fields, positions):
    """<u_a| sum_i h_i . S_i |u_b> over the 2^k labeled basis, by contraction."""
    k = len(positions)
    sites = sorted(set(int(i) for i in fields) | set(positions))
    span = (min(sites), max(sites))
    basis = [tuple(UP if (idx >> (k - 1 - j)) & 1 == 0 else DOWN
                   for j in range(k)) for idx in range(2 ** k)]
    states = [labeled_window(lab, positions, span=span) for lab in basis]
    lo = states[0].first_site
    pos_ops = {}
    for i, h in fields.items():
        pos = int(i) - lo
        dim = states[0].tensors[pos].shape[0]
        pos_ops[pos] = _site_field_op(np.asarray(h, dtype=float), dim)
    m = np.zeros((2 ** k, 2 ** k), dtype=np.complex128)
    for a in range(2 ** k):
        for b in range(2 ** k):
            m[a, b] = window.insertion_value(states[a], states[b], pos_ops)
    return m


def effective_field_matrix(fields, positions, method="formula"):
    """Matrix of a Zeeman perturbation in the labeled ground-state basis.

    For one impurity returns the free-spin form (1/2) h_eff . sigma; for two
    impurities the closed 4x4 form with profile-weighted effective fields.
    method="contraction" computes every element by transfer contraction
    instead (required for three or more impurities).
    """
    positions = tuple(int(p) for p in positions)
    if method == "contraction":
        return field_matrix_contraction(fields, positions)
    if len(positions) == 1:
        p0 = positions[0]
        shifted = {int(i) - p0: h for i, h in fields.items()}
        return pauli_field_matrix(effective_fields(shifted, f_profile))
    if len(positions) == 2:
        p0, p1 = positions
        sep = p1 - p0
        shifted = {int(i) - p0: h for i, h in fields.items()}
        h1 = effective_fields(shifted, lambda i: g1(i, sep))
        h2 = effective_fields(shifted, lambda i: g2(i, sep))
        return two_spin_field_matrix(h1, h2)
    raise ValueError("closed forms cover one or two impurities; use "
                     "method='contraction'")


# --------------------------------------------------------- frame dependence

@dataclass
class FrameReport:
    """Eigenvector-frame comparison across random field configurations."""

    n_impurities: int
    separations: tuple
    n_configs: int
    seed: int
    max_angle: float
    dependent: bool
    angle_tol: float
    resampled: int = 0
    configs: list = field(repr=False, default_factory=list)


def _greedy_match_angles(va, vb, gram):
    """Angles between greedily matched eigenvector pairs in the G metric.

    The angle is evaluated from the explicit residual v - w (w+ G v), which
    stays accurate down to machine precision for nearly parallel vectors
    (1 - |overlap| loses half the digits there).
    """
    coeff = va.conj().T @ gram @ vb
    overlaps = np.abs(coeff)
    n = va.shape[1]
    rows = list(range(n))
    cols = list(range(n))
    angles = []
    while rows:
        idx = np.argmax(overlaps[np.ix_(rows, cols)])
        i, j = divmod(int(idx), len(cols))
        a, b = rows[i], cols[j]
        res = vb[:, b] - va[:, a] * coeff[a, b]
        s2 = np.real(res.conj() @ gram @ res)
        angles.append(np.arcsin(min(1.0, float(np.sqrt(max(s2, 0.0))))))
        rows.pop(i)
        cols.pop(j)
    return np.array(angles)


def _cluster_subspace_angles(wa, va, wb, vb, gram, cluster_tol=1e-6):
    """Angles between eigenspaces matched cluster by cluster.

    Eigenvalues are clustered at relative tolerance (wide enough to absorb
    the exponentially small physical splittings of the uniform-field case);
    each pair of matched clusters contributes its largest principal angle,
    computed from the explicit residual so nearly identical subspaces give
    machine-size angles.
    """
    scale = max(np.max(np.abs(wa)), np.max(np.abs(wb)), 1e-300)

    def clusters(w):
        out, start = [], 0
        for i in range(1, len(w) + 1):
            if i == len(w) or abs(w[i] - w[i - 1]) > cluster_tol * scale:
                out.append((start, i))
                start = i
        return out

    ca, cb = clusters(wa), clusters(wb)
    if len(ca) != len(cb) or any((a1 - a0) != (b1 - b0)
                                 for (a0, a1), (b0, b1) in zip(ca, cb)):
        return np.array([np.pi / 2])
    angles = []
    for (a0, a1), (b0, b1) in zip(ca, cb):
        ua, ub = va[:, a0:a1], vb[:, b0:b1]
        res = ub - ua @ (ua.conj().T @ gram @ ub)
        m = res.conj().T @ gram @ res
        s = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (m + m.conj().T)), 0, 1))
        angles.append(float(np.arcsin(np.max(s))))
    return np.array(angles)


def frame_dependence_test(n_impurities=3, sep1=3, sep2=3, n_configs=10,
                          seed=0, angle_tol=1e-6, support_pad=5,
                          uniform_fields=False):
    """Check whether z-field eigenframes depend on the field configuration.

    Solves lam G v = H v for H = u_k^t (sum_i h_{i,z} S_i^z) u_k over random
    field configurations (i.i.d. uniform on [-1, 1] with finite support) and
    compares the G-orthonormal eigenvector frames pairwise.  With random
    fields, configurations with nearly degenerate spectra are resampled;
    uniform-field configurations are intrinsically degenerate and are
    compared cluster-subspace against cluster-subspace instead.
    """
    if n_configs < 2:
        raise ValueError("need at least two configurations")
    if n_impurities == 2:
        positions = (0, sep1)
    elif n_impurities == 3:
        positions = (0, sep1 + 1, sep1 + sep2 + 2)
    else:
        raise ValueError("frame test covers two or three impurities")
    lo = -support_pad
    hi = positions[-1] + support_pad
    support = list(range(lo, hi + 1))

    k = len(positions)
    basis = [tuple(UP if (idx >> (k - 1 - j)) & 1 == 0 else DOWN
                   for j in range(k)) for idx in range(2 ** k)]
    states = [labeled_window(lab, positions, span=(lo, hi)) for lab in basis]
    dim = 2 ** k
    gram = np.zeros((dim, dim), dtype=np.complex128)
    for a in range(dim):
        for b in range(dim):
            gram[a, b] = window.window_overlap(states[a], states[b])
    gram = 0.5 * (gram + gram.conj().T)

    rng = np.random.default_rng(seed)
    frames = []
    spectra = []
    configs = []
    resampled = 0
    while len(frames) < n_configs:
        if uniform_fields:
            amp = rng.uniform(0.2, 1.0)
            hz = {i: amp for i in support}
        else:
            hz = {i: rng.uniform(-1.0, 1.0) for i in support}
        fields = {i: (0.0, 0.0, v) for i, v in hz.items()}
        h = field_matrix_contraction(fields, positions)
        h = 0.5 * (h + h.conj().T)
        w, v = linalg.generalized_eig(h, gram)
        if not uniform_fields:
            gaps = np.diff(w)
            if np.min(gaps) < 1e-10 * max(1.0, np.max(np.abs(w))):
                resampled += 1
                continue
        frames.append(v)
        spectra.append(w / max(np.max(np.abs(w)), 1e-300))
        configs.append(hz)
    max_angle = 0.0
    for i in range(len(frames)):
        for j in range(i + 1, len(frames)):
            if uniform_fields:
                ang = _cluster_subspace_angles(spectra[i], frames[i],
                                               spectra[j], frames[j], gram)
            else:
                ang = _greedy_match_angles(frames[i], frames[j], gram)
            max_angle = max(max_angle, float(np.max(ang)))
    return FrameReport(n_impurities=n_impurities, separations=(sep1, sep2),
                       n_configs=n_configs, seed=seed, max_angle=max_angle,
                       dependent=max_angle > angle_tol, angle_tol=angle_tol,
                       resampled=resampled, configs=configs)


# ---------------------------------------------------------- scattering terms

@dataclass
class ScatteringReport:
    """Transfer-chain value with an impurity at each of three sites.

    full_value: the complete contraction of the magnetization element;
    path_term: the triple-scattering channel extracted by projector
    insertions; closed_form: the quoted closed-form expression
    -(2/3)(-1/3)^(L + L'' + 2) for that channel.
    """

    lengths: tuple
    full_value: float
    path_term: float
    closed_form: float


def scattering_closed_form(seg1, seg3):
    return -(2.0 / 3.0) * (-1.0 / 3.0) ** (seg1 + seg3 + 2)


def scattering_report(seg1, seg2, seg3):
    """Magnetization element past three aligned impurities, and its
    triple-scattering channel.

    The measured site sits seg3 + 1 sites past the third impurity; segment
    lengths count bulk sites between consecutive impurities.
    """
    if min(seg1, seg2, seg3) < 0:
        raise ValueError("segment lengths must be non-negative")
    a = bulk_tensor()
    b = impurity_tensor(UP)
    sz1 = spins.spin_matrices(2)[2]
    l1, r1, l2, r2 = transfer_channels()

    def t_a(sigma, n):
        for _ in range(n):
            sigma = kernels.transfer_left(a, a, sigma)
        return sigma

    def t_b(sigma):
        return kernels.transfer_left(b, b, sigma)

    sigma = t_b(l1.copy())
    sigma = t_a(sigma, seg1)
    sigma = t_b(sigma)
    sigma = t_a(sigma, seg2)
    sigma = t_b(sigma)
    sigma = t_a(sigma, seg3)
    sigma = kernels.op1_left(sz1, a, a, sigma)
    full = kernels.pair(sigma, r1).real

    def project(sigma, lvec, rvec):
        return lvec * kernels.pair(sigma, rvec)

    sigma = project(t_b(l1.copy()), l2, r2)
    sigma = t_a(sigma, seg1)
    sigma = project(t_b(sigma), l1, r1)
    sigma = t_a(sigma, seg2)
    sigma = project(t_b(sigma), l2, r2)
    sigma = t_a(sigma, seg3)
    sigma = kernels.op1_left(sz1, a, a, sigma)
    path = kernels.pair(sigma, r1).real

    return ScatteringReport(lengths=(seg1, seg2, seg3), full_value=full,
                            path_term=path,
                            closed_form=scattering_closed_form(seg1, seg3))


# ------------------------------------------------------------- full report

@dataclass
class EffectiveSpinReport:
    """Two-impurity summary: profiles, Gram data, and the qubit basis."""

    positions: tuple
    sites: list
    profile: list                  # g1 + g2 over `sites` (both labels 'up')
    gram: np.ndarray
    gram_contraction: np.ndarray
    delta: float
    beta_plus: float
    beta_minus: float
    transform: np.ndarray


def two_spin_report(sep, site_radius=10):
    positions = (0, sep)
    sites = list(range(-site_radius, sep + site_radius + 1))
    prof = [g1(i, sep) + g2(i, sep) for i in sites]
    bp, bm = beta_pm(sep)
    return EffectiveSpinReport(positions=positions, sites=sites, profile=prof,
                               gram=gram_matrix(sep),
                               gram_contraction=gram_matrix_contraction(sep),
                               delta=delta_overlap(sep), beta_plus=bp,
                               beta_minus=bm, transform=qubit_transform(sep))
