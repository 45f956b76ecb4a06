"""Pseudopotential analysis of a periodic geometry.

RF nulls, secular frequencies, the dimensionless curvature
kappa = h^2 |det Hess phi|^(1/3), trap depth via flood-fill percolation, site
enumeration (main and spurious), and anharmonic Taylor coefficients.

All quantities are per unit drive voltage with lengths in the geometry's
units; the pseudopotential is carried as |grad phi|^2 (per volt squared), so
results depend only on the electrode geometry.  SI conversion happens in the
units module and in the ``length_unit`` arguments here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .field import SpectralModel, required_modes
from .geometry import Mode

_CBRT4 = 4.0 ** (1.0 / 3.0)


class NoNullError(RuntimeError):
    """Newton iteration failed to locate an RF null."""


class DegenerateTrapError(RuntimeError):
    """Vanishing Hessian eigenvalue: secular frequencies undefined."""


class UnconfinedError(RuntimeError):
    """The basin around the site leaks out at zero threshold."""


@dataclass
class TrapSite:
    position: np.ndarray  # (3,)
    hessian: np.ndarray  # (3, 3) of phi per volt
    eigenvalues: np.ndarray  # (3,), ascending
    principal_axes: np.ndarray  # (3, 3), columns are axes
    grad_norm: float
    is_null: bool = True
    is_spurious: bool = False
    flags: list = field(default_factory=list)

    @property
    def det(self):
        return float(np.prod(self.eigenvalues))

    def kappa(self, h):
        """Dimensionless curvature h^2 |det H|^(1/3)."""
        return h * h * abs(self.det) ** (1.0 / 3.0)

    def pseudo_curvature(self):
        """Geometric-mean curvature sqrt scale of the pseudopotential well,
        (det 2 H^T H)^(1/6) for a null; comparable across sites."""
        m = 2.0 * self.hessian @ self.hessian
        return float(np.linalg.det(m)) ** (1.0 / 6.0)


def _site_from_point(model, x, tol_grad):
    res = model.evaluate(np.asarray(x, dtype=float)[None], order=2)
    g = res["grad"][0]
    hess = res["hess"][0]
    lam, vec = np.linalg.eigh(hess)
    return TrapSite(position=np.asarray(x, float), hessian=hess,
                    eigenvalues=lam, principal_axes=vec,
                    grad_norm=float(np.linalg.norm(g)),
                    is_null=float(np.linalg.norm(g)) < tol_grad)


def find_rf_null(geom, guess, model=None, max_iter=60):
    """Newton iteration on grad phi = 0 with the analytic Hessian.

    Converged when |grad| < 1e-12 / d.  Raises NoNullError on divergence or
    exit from the slab; a site whose Hessian has a zero eigenvalue is flagged.
    """
    if model is None:
        model = SpectralModel(geom)
    d = geom.cell.d
    tol = 1e-12 / d
    x = np.array(guess, dtype=float)
    zlo, zhi = model.z_limits
    margin = geom.pixel_width
    step_cap = 0.25 * d
    for _ in range(max_iter):
        res = model.evaluate(x[None], order=2)
        g = res["grad"][0]
        if np.linalg.norm(g) < tol:
            break
        hess = res["hess"][0]
        try:
            step = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError as exc:
            raise NoNullError(f"singular Hessian at {x}") from exc
        n = np.linalg.norm(step)
        if n > step_cap:
            step *= step_cap / n
        x = x + step
        if not (zlo + margin <= x[2] <= zhi - margin):
            raise NoNullError(f"Newton iteration left the slab at {x}")
    else:
        raise NoNullError(f"no convergence after {max_iter} iterations, |g|="
                          f"{np.linalg.norm(g):.3e}")
    site = _site_from_point(model, x, tol)
    if np.any(np.abs(site.eigenvalues) < 1e-12 / d**2):
        site.flags.append("degenerate_curvature")
    return site


def secular_frequencies(site, ion, drive, length_unit=1.0):
    """Angular secular frequencies omega_i = e U |lambda_i| / (sqrt2 M w_rf).

    ``length_unit`` is the SI size of one geometry length unit (m).
    """
    lam = site.eigenvalues / length_unit**2
    if np.any(lam == 0):
        raise DegenerateTrapError("zero Hessian eigenvalue")
    return abs(ion.charge) * drive.u_rf * np.abs(lam) / (
        math.sqrt(2.0) * ion.mass * drive.omega_rf)


def mean_secular_frequency(site, ion, drive, length_unit=1.0):
    w = secular_frequencies(site, ion, drive, length_unit)
    return float(np.prod(w)) ** (1.0 / 3.0)


def solve_urf(site, ion, omega_rf, omega_tilde, length_unit=1.0):
    """Drive amplitude reaching the target mean secular frequency."""
    det = abs(site.det) / length_unit**6
    if det == 0:
        raise DegenerateTrapError("zero Hessian determinant")
    return math.sqrt(2.0) * ion.mass * omega_tilde * omega_rf / (
        abs(ion.charge) * det ** (1.0 / 3.0))


# ---------------------------------------------------------------------------
# trap depth by flood-fill percolation


@dataclass
class DepthResult:
    depth: float  # |grad phi|^2 at the escape saddle (per volt^2)
    eta: float
    saddle: np.ndarray
    margin_limited: bool
    polished: bool


def _pseudo_grid(model, nxy, z_values):
    g = model.grid(nxy, z_values, order=1)
    gr = g["grad"]
    pseudo = gr[:, 0] ** 2 + gr[:, 1] ** 2 + gr[:, 2] ** 2  # (nz, nx, ny)
    return np.moveaxis(pseudo, 0, 2), g["shape"]  # (nx, ny, nz)


def _pseudo_point(model, x, order=1):
    res = model.evaluate(np.asarray(x, float)[None], order=2)
    g = res["grad"][0]
    hess = res["hess"][0]
    P = float(g @ g)
    gradP = 2.0 * hess @ g
    if order < 2:
        return P, gradP, None
    T = model.third_derivatives(x)
    hessP = 2.0 * (hess @ hess + np.einsum("k,ijk->ij", g, T))
    return P, gradP, hessP


def _polish_saddle(model, x0, d, max_iter=40):
    """Newton on grad|grad phi|^2 = 0; returns (P, x, ok)."""
    x = np.array(x0, dtype=float)
    zlo, zhi = model.z_limits
    margin = model.geom.pixel_width
    for _ in range(max_iter):
        P, gP, hP = _pseudo_point(model, x, order=2)
        if np.linalg.norm(gP) < 1e-13 / d**3:
            lam = np.linalg.eigvalsh(hP)
            return P, x, bool(np.sum(lam < 0) == 1)
        try:
            step = -np.linalg.solve(hP, gP)
        except np.linalg.LinAlgError:
            return P, x, False
        n = np.linalg.norm(step)
        cap = 0.05 * d
        if n > cap:
            step *= cap / n
        x = x + step
        if not (zlo + margin * 0.5 <= x[2] <= zhi - margin * 0.5):
            return P, x, False
    return P, x, False


def trap_depth(geom, site, model=None, nxy=64, nz=25, margin_tol=1e-4):
    """Depth of the pseudopotential basin around a site.

    Flood-fill percolation on a 2x2-tiled grid over the unit cell: the depth
    is the lowest threshold at which the flooded region around the site
    reaches an escape region (open mode: z above 5h; covered/bilayer: the
    near-plane margins, any other designed site, or the tile boundary).  The
    bottleneck saddle is then polished by Newton on the analytic gradient,
    which removes the grid-resolution dependence.
    """
    if model is None:
        model = SpectralModel(geom)
    cell = geom.cell
    mode = Mode(geom.mode)
    px = geom.pixel_width
    h_site = site.position[2]
    if mode is Mode.OPEN:
        z_lo, z_hi = 2.0 * px, 5.5 * h_site
        escape_z_lo, escape_z_hi = False, False
    else:
        z_lo, z_hi = 2.0 * px, geom.H - 2.0 * px
        escape_z_lo, escape_z_hi = True, True
    # lateral resolution able to carry the modes needed at the z margin
    nmx, nmy = required_modes(cell.lx, cell.ly, z_lo, tol=margin_tol)
    nxy_eff = (max(nxy, 2 * nmx + 2), max(nxy, 2 * nmy + 2))
    z_values = np.linspace(z_lo, z_hi, nz)
    P1, (nx, ny) = _pseudo_grid(SpectralModel(geom, n_modes=(nmx, nmy)),
                                nxy_eff, z_values)
    ntile = 2
    P = np.tile(P1, (ntile, ntile, 1))

    xg = np.arange(ntile * nx) * (cell.lx / nx)
    yg = np.arange(ntile * ny) * (cell.ly / ny)
    zg = z_values

    def cell_index(pos, tile=(0, 0)):
        i = int(round((pos[0] + tile[0] * cell.lx) / (cell.lx / nx))) % (ntile * nx)
        j = int(round((pos[1] + tile[1] * cell.ly) / (cell.ly / ny))) % (ntile * ny)
        k = int(np.clip(round((pos[2] - z_lo) / (zg[1] - zg[0])), 0, nz - 1))
        return i, j, k

    seed = cell_index(site.position)
    escape = np.zeros_like(P, dtype=bool)
    if mode is Mode.OPEN:
        escape[:, :, zg >= 5.0 * h_site] = True
    if escape_z_lo:
        escape[:, :, 0] = True
    if escape_z_hi:
        escape[:, :, -1] = True
    escape[0, :, :] = escape[-1, :, :] = True
    escape[:, 0, :] = escape[:, -1, :] = True
    # other designed sites (own periodic images and cell neighbors)
    for tx in range(ntile):
        for ty in range(ntile):
            for sx, sy in cell.site_xy():
                idx = cell_index((sx, sy, h_site), (tx, ty))
                if idx == seed:
                    continue
                escape[idx] = True
    if escape[seed]:
        raise UnconfinedError("site coincides with an escape cell")

    order = np.argsort(P, axis=None)
    values = P.ravel()[order]
    seed_flat = np.ravel_multi_index(seed, P.shape)

    def connected(threshold):
        lab, _ = ndimage.label(P <= threshold)
        s = lab.ravel()[seed_flat]
        return s != 0 and bool(np.any(lab[escape] == s))

    if connected(values[0]):
        raise UnconfinedError("basin leaks at zero threshold")
    lo, hi = 0, values.size - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if connected(values[mid]):
            hi = mid
        else:
            lo = mid
    depth = float(values[hi])
    bneck = np.unravel_index(order[hi], P.shape)
    margin_limited = bool(
        (escape_z_lo and bneck[2] <= 1) or (escape_z_hi and bneck[2] >= nz - 2))
    x_b = np.array([xg[bneck[0]], yg[bneck[1]], zg[bneck[2]]])
    P_pol, x_pol, ok = _polish_saddle(model, x_b, cell.d)
    polished = bool(ok and abs(P_pol - depth) < 0.5 * depth + 1e-12)
    if polished:
        depth = float(P_pol)
        x_b = x_pol
    eta = h_site * h_site * depth
    return DepthResult(depth=depth, eta=float(eta), saddle=x_b,
                       margin_limited=margin_limited, polished=polished)


# ---------------------------------------------------------------------------
# site enumeration


def find_all_minima(geom, model=None, nxy=64, nz=33, dedupe=1e-3):
    """All pseudopotential minima in one unit cell, classified main/spurious.

    Local grid minima of |grad phi|^2 seed Newton searches; sites within
    dedupe*d of each other are merged; a site is main if it is the nearest
    found minimum to a designed lattice site.
    """
    if model is None:
        model = SpectralModel(geom)
    cell = geom.cell
    mode = Mode(geom.mode)
    px = geom.pixel_width
    if mode is Mode.OPEN:
        z_lo, z_hi = 2.0 * px, 5.0 * cell.d
    else:
        z_lo, z_hi = 2.0 * px, geom.H - 2.0 * px
    z_values = np.linspace(z_lo, z_hi, nz)
    P, (nx, ny) = _pseudo_grid(model, nxy, z_values)
    neighbors = []
    for ax_, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        neighbors.append(np.roll(P, shift, axis=ax_))
    zp = np.full_like(P, np.inf)
    neighbors.append(np.concatenate([P[:, :, 1:], zp[:, :, :1]], axis=2))
    neighbors.append(np.concatenate([zp[:, :, :1], P[:, :, :-1]], axis=2))
    is_min = np.ones_like(P, dtype=bool)
    for nb in neighbors:
        is_min &= P <= nb
    idx = np.argwhere(is_min)
    d = cell.d
    tol = 1e-12 / d
    sites = []
    for i, j, k in idx:
        x0 = np.array([i * cell.lx / nx, j * cell.ly / ny, z_values[k]])
        try:
            site = find_rf_null(geom, x0, model=model)
        except NoNullError:
            P0, x1, ok = _polish_min(model, x0, d)
            if not ok:
                continue
            site = _site_from_point(model, x1, tol)
            site.is_null = False
        sites.append(site)
    # wrap into the cell and dedupe
    uniq = []
    for site in sites:
        site.position[0] %= cell.lx
        site.position[1] %= cell.ly
        if any(_site_distance(site, other, cell) < dedupe * d for other in uniq):
            continue
        uniq.append(site)
    designed = cell.site_xy()
    for site in uniq:
        site.is_spurious = True
    for sx, sy in designed:
        best = None
        for site in uniq:
            dist = _wrap_dist(site.position[:2], (sx, sy), cell)
            if best is None or dist < best[0]:
                best = (dist, site)
        if best is not None and best[0] < 0.25 * d:
            best[1].is_spurious = False
    uniq.sort(key=lambda s: (round(s.position[0], 9), round(s.position[1], 9),
                             round(s.position[2], 9)))
    return uniq


def _wrap_dist(a, b, cell):
    dx = (a[0] - b[0] + cell.lx / 2) % cell.lx - cell.lx / 2
    dy = (a[1] - b[1] + cell.ly / 2) % cell.ly - cell.ly / 2
    return math.hypot(dx, dy)


def _site_distance(s1, s2, cell):
    dxy = _wrap_dist(s1.position[:2], s2.position[:2], cell)
    return math.hypot(dxy, s1.position[2] - s2.position[2])


def _polish_min(model, x0, d, max_iter=60):
    """Newton (with descent safeguard) on the pseudopotential minimum."""
    x = np.array(x0, dtype=float)
    zlo, zhi = model.z_limits
    margin = model.geom.pixel_width
    P, gP, hP = _pseudo_point(model, x, order=2)
    for _ in range(max_iter):
        if np.linalg.norm(gP) < 1e-13 / d**3:
            lam = np.linalg.eigvalsh(hP)
            return P, x, bool(np.all(lam > 0))
        try:
            step = -np.linalg.solve(hP, gP)
        except np.linalg.LinAlgError:
            return P, x, False
        if step @ gP > 0:
            step = -gP * (0.01 * d / max(np.linalg.norm(gP), 1e-300))
        n = np.linalg.norm(step)
        if n > 0.05 * d:
            step *= 0.05 * d / n
        x_new = x + step
        x_new[2] = np.clip(x_new[2], zlo + margin, zhi - margin if
                           np.isfinite(zhi) else x_new[2])
        P_new, gP_new, hP_new = _pseudo_point(model, x_new, order=2)
        if P_new > P + 1e-12:
            step *= 0.25
            x_new = x + step
            P_new, gP_new, hP_new = _pseudo_point(model, x_new, order=2)
        x, P, gP, hP = x_new, P_new, gP_new, hP_new
    return P, x, False


# ---------------------------------------------------------------------------
# anharmonicity


def anharmonic_coefficients(geom, site, model=None, span=0.1, n_samples=25):
    """Taylor anharmonicity of the pseudopotential along principal axes.

    Fits degree-6 polynomials over +-span*h and returns
    (c3_z, c4_z, c4_inplane) with c_n = a_n h^(n-2) / a_2.  The span is halved
    (and the result flagged via a warning list on the site) if the fit is
    ill-conditioned.
    """
    if model is None:
        model = SpectralModel(geom)
    h = site.position[2]
    axes = site.principal_axes
    iz = int(np.argmax(np.abs(axes[2, :])))
    ix = int(np.argmax(np.abs(axes[0, :])))
    if ix == iz:
        ix = (iz + 1) % 3
    out = {}
    for label, col in (("z", iz), ("x", ix)):
        e = axes[:, col]
        if e[2] < 0 if label == "z" else e[0] < 0:
            e = -e
        cur_span = span * h
        for _ in range(6):
            t = np.linspace(-cur_span, cur_span, n_samples)
            pts = site.position[None, :] + t[:, None] * e[None, :]
            res = model.evaluate(pts, order=1)
            g = res["grad"]
            P = np.sum(g * g, axis=1)
            ts = t / cur_span
            V = np.vander(ts, 7, increasing=True)
            cond = np.linalg.cond(V)
            if cond <= 1e8:
                coef, *_ = np.linalg.lstsq(V, P, rcond=None)
                a = coef / cur_span ** np.arange(7)
                break
            cur_span *= 0.5
        else:
            site.flags.append(f"anharmonic_fit_conditioning_{label}")
            a = np.zeros(7)
        a2 = a[2]
        out[label] = (a[3] * h / a2, a[4] * h * h / a2)
    c3_z, c4_z = out["z"]
    _, c4_x = out["x"]
    return float(c3_z), float(c4_z), float(c4_x)
