"""Experiment pipelines: defect profiles, window trade-off, interaction decay.

Everything here drives the lower-level modules and returns plain dataclasses
that the CLI serializes to CSV/SVG.  Exponential fits are log-linear least
squares over a fit window that drops pre-asymptotic points (closer than one
correlation length to the origin), values at the numerical floor, and points
close enough to the reference window length to be saturated.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg, spins, transfer, vumps, window


@dataclass
class ExpFit:
    slope: float
    intercept: float
    decay_length: float
    r_squared: float
    points_used: list
    slope_drop_first: float = np.nan     # slope refitted without the smallest x


def fit_exponential(xs, ys, xi_hint=None, floor=1e-12, exclude_above=None):
    """Log-linear fit of y ~ A exp(slope * x).

    Points with x below xi_hint (pre-asymptotic), y below `floor`, or x above
    `exclude_above` (saturated by a finite reference) are excluded.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = ys > floor
    if xi_hint is not None:
        keep &= xs >= xi_hint
    if exclude_above is not None:
        keep &= xs <= exclude_above
    if np.sum(keep) < 3:
        raise ValueError(f"exponential fit needs at least 3 usable points, "
                         f"got {int(np.sum(keep))}")
    x, y = xs[keep], np.log(ys[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - np.mean(y)) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    slope_drop = np.nan
    if np.sum(keep) >= 4:
        slope_drop = np.polyfit(x[1:], y[1:], 1)[0]
    return ExpFit(slope=float(slope), intercept=float(intercept),
                  decay_length=float(-1.0 / slope) if slope < 0 else np.inf,
                  r_squared=float(r2), points_used=x.tolist(),
                  slope_drop_first=float(slope_drop))


@dataclass
class SweepResult:
    variable: str
    values: list
    measurements: dict
    fit: ExpFit | None
    metadata: dict = field(default_factory=dict)


# ----------------------------------------------------------------- profiles

def magnetization_profile(w, model, sites):
    """<S^z_i> for a window state of the blocked spin-1/2 chain."""
    sz = spins.spin_matrices(1)[2]
    return {int(i): window.site_expectation(w, int(i), sz, model.cell_site_op)
            for i in sites}


def defect_profile(w, model, site_radius=60, optimized=True):
    """Magnetization profile around the defect with sum and symmetry checks.

    Raises ValueError when handed a state not marked as optimized.
    """
    if not (optimized and getattr(w, "optimized", True)):
        raise ValueError("defect_profile expects an optimized window state")
    sites = range(-site_radius, site_radius + 1)
    prof = magnetization_profile(w, model, sites)
    total = sum(prof.values())
    asym = max(abs(prof[i] - prof[-i]) for i in range(1, site_radius + 1))
    spc = w.background.sites_per_cell
    spectral = transfer.spectral_data(
        transfer.TransferOperator(w.background.tensor), m=2)
    lam2 = abs(spectral.eigenvalues[1])
    tail = abs(prof[site_radius]) / max(1e-300, 1 - lam2 ** (1.0 / spc))
    return {"profile": prof, "sum": total, "max_asymmetry": asym,
            "tail_bound": tail}


# ------------------------------------------------------------- window sweep

def optimize_defect_window(background, model, defect, n, h_z,
                           schedule=None, gauge=None, center_seed=None):
    """Build and optimize one defect window (fresh initialization)."""
    w, ham = window.build_defect_window(background, model, defect, n, h_z=h_z)
    if center_seed is None and defect.kind == "weak_weak":
        _, center_seed = window.solve_center(background, ham if n == 0 else
                                             window.build_defect_window(
                                                 background, model, defect, 0,
                                                 h_z=h_z)[1], model.d_site)
    if center_seed is not None and defect.kind == "weak_weak":
        w.tensors[n] = center_seed.copy()
        w.normalize()
    w_opt, info = window.optimize_window(w, ham, gauge=gauge, schedule=schedule)
    return w_opt, ham, info


def window_sweep(background, model, defect, n_list, n_max, h_z=1e-3,
                 schedule=None, saturation_margin=None):
    """Fidelity-distance trade-off against the window length (one defect).

    Windows are optimized independently for each N; the distance is measured
    against the N = n_max state.  The fitted decay length is compared with
    the bulk correlation length by the caller.
    """
    n_list = sorted(set(int(n) for n in n_list))
    if n_max < max(n_list):
        raise ValueError("n_max must be at least max(n_list)")
    xi = background.xi_bulk()
    gauge = window.TangentGauge.build(background)
    ham0 = window.build_defect_window(background, model, defect, 0, h_z=h_z)[1]
    _, seed = window.solve_center(background, ham0, model.d_site)
    states = {}
    energies = {}
    for n in sorted(set(n_list + [n_max])):
        w_opt, _, info = optimize_defect_window(
            background, model, defect, n, h_z, schedule=schedule, gauge=gauge,
            center_seed=seed)
        states[n] = w_opt
        energies[n] = info["energy"]
    ref = states[n_max]
    distances = [window.fidelity_distance(ref, states[n]) for n in n_list]
    if saturation_margin is None:
        saturation_margin = 2.0 * xi
    fit = None
    try:
        fit = fit_exponential(n_list, distances, xi_hint=xi,
                              exclude_above=n_max - saturation_margin)
    except ValueError:
        pass
    usable = [n for n, d in zip(n_list, distances) if d > 1e-12]
    if len(usable) < 3:
        raise ValueError("window sweep produced fewer than 3 usable points")
    return SweepResult(
        variable="N", values=n_list,
        measurements={"fidelity_distance": distances,
                      "energy": [energies[n] for n in n_list]},
        fit=fit,
        metadata={"xi_bulk": xi, "n_max": n_max, "h_z": h_z,
                  "bond_dim": background.bond_dim,
                  "delta": background.delta}), states


# --------------------------------------------------------- two-spin states

@dataclass
class TwoSpinState:
    """Two single-site defect tensors separated by L background cells."""

    window: window.WindowMps
    separation: int
    center: np.ndarray


def compose_two_spin_state(background, center, separation):
    """Place the optimized single-defect center at sites 0 and 2L+1."""
    if separation < 1:
        raise ValueError("separation must be at least one unit cell")
    a = background.tensor
    spc = background.sites_per_cell
    tensors = [center.copy()] + [a.copy() for _ in range(separation)] + [center.copy()]
    sites = [1] + [spc] * separation + [1]
    w = window.WindowMps(background=background, tensors=tensors,
                         sites_per_tensor=sites, first_site=0)
    w.normalize()
    return TwoSpinState(window=w, separation=separation, center=center)


def two_spin_hamiltonian(background, model, defect, separation, h_z=0.0):
    dims = [model.d_site] + [model.d_cell] * separation + [model.d_site]
    return window.build_window_hamiltonian(
        background, dims, window.abahc_bond_factory(model, defect, h_z))


def single_defect_energy(background, model, defect, center, h_z=0.0):
    """Field-free (or given-field) energy of the minimal single-defect state."""
    w, ham = window.build_defect_window(background, model, defect, 0, h_z=h_z)
    w.tensors = [center.copy()]
    w.normalize()
    return window.window_energy(w, ham)


def two_spin_energy(ts, ham, vacuum_energy=0.0):
    """E(L): direct contraction with the boundary environments.

    The h_loc origin shift enters as the scalar 2 * vacuum_energy so the
    energy of two far-separated defects vanishes.
    """
    e, n = window.window_energy_norm(ts.window, ham)
    return e / n - 2.0 * vacuum_energy


def jeff_sweep(background, model, defect, l_list, h_z, delta_e=0.145,
               optimize=False, schedule=None, l_ref=None):
    """Effective two-defect interaction versus separation.

    The man-made branch composes the optimized single-defect center tensor;
    E(infinity) is taken at l_ref (default max(10 xi, 2 max L)).  With
    optimize=True the two-defect windows are re-optimized by TDVP under the
    uniform field h_z before the (field-free) energies are measured, with an
    independently optimized large-L reference.
    """
    l_list = sorted(set(int(l) for l in l_list))
    xi = background.xi_bulk()
    warn = None
    if max(l_list) < xi:
        warn = "all separations below the correlation length; fit suppressed"
    ham0 = window.build_defect_window(background, model, defect, 0, h_z=h_z)[1]
    _, center = window.solve_center(background, ham0, model.d_site)
    e_vac = single_defect_energy(background, model, defect, center)
    if l_ref is None:
        l_ref = int(max(10 * xi, 2 * max(l_list)))
    ham_free = {}

    def e_man(sep):
        ts = compose_two_spin_state(background, center, sep)
        if sep not in ham_free:
            ham_free[sep] = two_spin_hamiltonian(background, model, defect, sep)
        return two_spin_energy(ts, ham_free[sep], e_vac)

    e_ref = e_man(l_ref)
    man = [e_man(sep) for sep in l_list]
    jeff_man = [e - e_ref for e in man]
    measurements = {"e_man": man, "jeff_man": jeff_man}

    if optimize:
        if not (h_z < delta_e):
            raise ValueError(f"h_z = {h_z} must stay below the gap estimate "
                             f"{delta_e}")
        gauge = window.TangentGauge.build(background)
        l_ref_opt = max(l_list) + int(math.ceil(2 * xi))

        def e_opt(sep):
            ts = compose_two_spin_state(background, center, sep)
            ham_z = two_spin_hamiltonian(background, model, defect, sep, h_z=h_z)
            w_opt, _ = window.optimize_window(ts.window, ham_z, gauge=gauge,
                                              schedule=schedule)
            if sep not in ham_free:
                ham_free[sep] = two_spin_hamiltonian(background, model, defect,
                                                     sep)
            e, n = window.window_energy_norm(w_opt, ham_free[sep])
            return e / n - 2.0 * e_vac
        e_ref_opt = e_opt(l_ref_opt)
        opt = [e_opt(sep) for sep in l_list]
        measurements["e_opt"] = opt
        measurements["jeff_opt"] = [e - e_ref_opt for e in opt]

    fit = None
    if warn is None:
        try:
            fit = fit_exponential(l_list, np.abs(jeff_man), xi_hint=xi)
        except ValueError as exc:
            warn = str(exc)
    return SweepResult(variable="L", values=l_list, measurements=measurements,
                       fit=fit,
                       metadata={"xi_bulk": xi, "h_z": h_z, "delta_e": delta_e,
                                 "l_ref": l_ref, "vacuum_energy": e_vac,
                                 "warning": warn,
                                 "bond_dim": background.bond_dim})


# ------------------------------------------------- spectral series evaluator

def two_spin_energy_series(background, model, defect, center, separation):
    """Two-defect energy numerator and norm from the full transfer spectrum.

    Evaluates the explicit eigenchannel sums (boundary terms plus the double
    sum over interior channels) and returns (numerator, norm, bracket) where
    `bracket` is the single-defect stationarity combination that the h_loc
    origin shift sends to zero.  Dense path: requires a full spectral
    decomposition of the background transfer operator.
    """
    sep = int(separation)
    if sep < 1:
        raise ValueError("separation must be at least one unit cell")
    a = background.tensor
    dim = a.shape[1] ** 2
    ham = two_spin_hamiltonian(background, model, defect, sep)
    h_left = ham.bonds[0]          # (cell | site)
    h_right = ham.bonds[1]         # (site | cell)
    h_raw = ham.bond_factory(model.d_cell, model.d_cell)
    h_aa = h_raw - ham.shift * np.eye(h_raw.shape[0])

    sd = transfer.spectral_data(transfer.TransferOperator(a), m=dim)
    lam = sd.eigenvalues
    lefts, rights = sd.left, sd.right

    t_b = transfer.TransferOperator(center)
    j_aa = transfer.OperatorTransfer(h_aa, a, a)

    def jloc_left(sigma):
        s1 = transfer.OperatorTransfer(h_left, a, center).apply_left(sigma)
        s1 = transfer.TransferOperator(a).apply_left(s1)
        s2 = transfer.TransferOperator(a).apply_left(sigma)
        s2 = transfer.OperatorTransfer(h_right, center, a).apply_left(s2)
        return s1 + s2

    tb_left = [t_b.apply_left(l) for l in lefts]
    tb_1i = np.array([transfer.pair(tb_left[0], r) for r in rights])
    tb_i1 = np.array([transfer.pair(tb_left[i], rights[0]) for i in range(dim)])
    jh_left = [j_aa.apply_left(l) for l in lefts]
    jh = np.array([[transfer.pair(jh_left[i], rights[k]) for k in range(dim)]
                   for i in range(dim)])
    jloc_1i = np.array([transfer.pair(jloc_left(lefts[0]), r) for r in rights])
    jloc_i1 = np.array([transfer.pair(jloc_left(lefts[i]), rights[0])
                        for i in range(dim)])
    libc_tb = np.array([transfer.pair(t_b.apply_left(ham.libc), r)
                        for r in rights])
    tb_ribc = np.array([transfer.pair(tb_left[i], ham.ribc) for i in range(dim)])

    bracket = libc_tb[0] + tb_ribc[0] + jloc_1i[0]

    num = 2.0 * bracket
    norm = tb_1i[0] * tb_i1[0]
    for i in range(1, dim):
        li = lam[i]
        norm += li ** sep * tb_1i[i] * tb_i1[i]
        num += (-li ** (sep - 1) / (1.0 - li)) * (jh[0, i] * tb_i1[i]
                                                  + tb_1i[i] * jh[i, 0])
        num += li ** sep * (libc_tb[i] * tb_i1[i] + tb_1i[i] * tb_ribc[i])
        num += li ** (sep - 1) * (jloc_1i[i] * tb_i1[i] + tb_1i[i] * jloc_i1[i])
    for j in range(1, dim):
        for k in range(1, dim):
            lj, lk = lam[j], lam[k]
            if abs(lj - lk) > 1e-12 * max(abs(lj), abs(lk), 1e-300):
                geom = (lj ** (sep - 1) - lk ** (sep - 1)) / (lj - lk)
            else:
                geom = (sep - 1) * lj ** (sep - 2) if sep >= 2 else 0.0
            num += geom * tb_1i[j] * jh[j, k] * tb_i1[k]
    return num, norm, bracket

# ------------------------------------------------------------------ outputs

CSV_SCHEMA = 1


def format_float(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, columns, rows):
    """CSV with a schema comment line; deterministic byte-for-byte."""
    lines = [f"# schema={CSV_SCHEMA}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(format_float(v) if not isinstance(v, str) else v
                              for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def sweep_rows(sweep):
    cols = [sweep.variable] + list(sweep.measurements)
    rows = []
    for i, v in enumerate(sweep.values):
        rows.append([v] + [sweep.measurements[k][i] for k in sweep.measurements])
    return cols, rows


def plot_sweep_svg(path, sweep, ylabel, ykey=None, title=None):
    """Log-linear plot of one sweep with the fitted exponential overlaid."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "effspin"
    ykey = ykey or next(iter(sweep.measurements))
    xs = np.asarray(sweep.values, dtype=float)
    ys = np.abs(np.asarray(sweep.measurements[ykey], dtype=float))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(xs, ys, "o", label=ykey)
    if "jeff_opt" in sweep.measurements and ykey != "jeff_opt":
        ax.semilogy(xs, np.abs(np.asarray(sweep.measurements["jeff_opt"])),
                    "s", mfc="none", label="jeff_opt")
    if sweep.fit is not None and np.isfinite(sweep.fit.slope):
        grid = np.linspace(xs.min(), xs.max(), 100)
        ax.semilogy(grid, np.exp(sweep.fit.intercept + sweep.fit.slope * grid),
                    "-", label=f"fit: decay length {sweep.fit.decay_length:.3g}")
    ax.set_xlabel(sweep.variable)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
