"""Bang-bang electrode-pattern optimization.

Which pixels of each plane carry RF so that the geometric-mean curvature
kappa = h^2 |det Hess phi|^(1/3) at the designed lattice sites is maximal,
subject to the sites being RF nulls (grad phi = 0 there) with the in-plane
principal axes along x and y (Hess_xy = 0).

The field is linear in the pixel weights, so for a fixed curvature-direction
matrix A the subproblem

    max_w  sum_s tr(A_s Hess(w; site_s)),   w in [0,1]^pixels,
    s.t.   grad phi(site_s) = 0,  Hess_xy(site_s) = 0

is a linear program whose vertex solutions are bang-bang (weights 0/1 except
at most one pixel per constraint).  Iterating A <- adj(H)/|det H|^(2/3) (the
gradient direction of |det|^(1/3)) climbs the curvature; a damped blend with
the previous direction handles the occasional oscillation.  Per-pixel
sensitivity maps are synthesized with FFTs, so one iteration costs a few
transforms plus one LP solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

from .field import SpectralModel, required_modes
from .geometry import (BilayerGeometry, ElectrodePattern, GeometryError,
                       Mode, Plane, UnitCell, lattice_symmetry_ops)

DEFAULT_TOL = 1e-6


class OptimizationError(RuntimeError):
    """Infeasible or degenerate pattern subproblem."""


@dataclass(frozen=True)
class OptimizationProblem:
    cell: UnitCell
    h: float
    mode: Mode
    H: float | None = None
    resolution: int = 128
    n_modes: tuple | None = None
    mirror_z: bool = False  # acceleration only; never required
    lattice_symmetry: bool = False

    def __post_init__(self):
        mode = Mode(self.mode)
        if mode is not Mode.OPEN:
            H = self.H if self.H is not None else 2.0 * self.h
            object.__setattr__(self, "H", H)
            if not 0 < self.h < H:
                raise GeometryError("need 0 < h < H")
        elif self.H is not None:
            raise GeometryError("open mode forbids H")
        object.__setattr__(self, "mode", mode)

    @property
    def planes(self):
        return (Plane.BOTTOM, Plane.TOP) if self.mode is Mode.BILAYER \
            else (Plane.BOTTOM,)


@dataclass
class OptimizationResult:
    problem: OptimizationProblem
    geometry: BilayerGeometry
    kappa: float
    kappa_per_site: np.ndarray
    converged: bool
    iterations: int
    history: list
    grad_residual: float
    hxy_residual: float
    A: np.ndarray  # final curvature-direction matrices, (n_sites, 3, 3)


class _PatternBasis:
    """FFT machinery mapping pixel weights to site fields and back."""

    def __init__(self, problem: OptimizationProblem):
        self.problem = problem
        cell = problem.cell
        n = problem.resolution
        self.shape = (n, n)
        z_min = problem.h if problem.mode is Mode.OPEN else min(
            problem.h, problem.H - problem.h)
        self.n_modes = problem.n_modes or required_modes(cell.lx, cell.ly, z_min)
        nmx, nmy = self.n_modes
        nx = np.arange(-nmx, nmx + 1)
        ny = np.arange(-nmy, nmy + 1)
        self.kx = 2 * np.pi * nx / cell.lx
        self.ky = 2 * np.pi * ny / cell.ly
        self.kk = np.hypot(self.kx[:, None], self.ky[None, :])
        # analytic pixel transform factors
        px = np.exp(-1j * np.pi * nx / n) * np.sinc(nx / n)
        py = np.exp(-1j * np.pi * ny / n) * np.sinc(ny / n)
        self.pixel_factor = (px[:, None] * py[None, :]) / (n * n)
        self.wrap_ix = np.mod(nx, n)
        self.wrap_iy = np.mod(ny, n)
        self.sites = cell.site_xy()
        self.site_phase = np.exp(1j * (
            self.kx[:, None, None] * self.sites[:, 0][None, None, :]
            + self.ky[None, :, None] * self.sites[:, 1][None, None, :]))
        from .field import _green_factors
        self.green = {}
        for plane in problem.planes:
            g0, g1, _ = _green_factors(self.kk, problem.h, problem.H,
                                       problem.mode, plane)
            self.green[plane] = (g0, g1)

    def synthesize(self, coeff):
        """Real per-pixel map of sum_k coeff(k) U_p(k) over the pixel grid."""
        n = self.shape[0]
        buf = np.zeros((n, n), dtype=complex)
        np.add.at(buf, (self.wrap_ix[:, None], self.wrap_iy[None, :]),
                  coeff * self.pixel_factor)
        return np.fft.fft2(buf).real

    def constraint_maps(self):
        """Per-pixel coefficients of [gx, gy, gz, hxy] at each site; the maps
        are independent of the iteration and computed once."""
        rows = []
        for s in range(len(self.sites)):
            ph = self.site_phase[:, :, s]
            per_plane = []
            for plane in self.problem.planes:
                g0, g1 = self.green[plane]
                per_plane.append([
                    self.synthesize(1j * self.kx[:, None] * g0 * ph),
                    self.synthesize(1j * self.ky[None, :] * g0 * ph),
                    self.synthesize(g1 * ph),
                    self.synthesize(-self.kx[:, None] * self.ky[None, :] * g0 * ph),
                ])
            for comp in range(4):
                rows.append(np.concatenate(
                    [per_plane[ip][comp].ravel()
                     for ip in range(len(self.problem.planes))]))
        return np.array(rows)

    def objective_map(self, A):
        """Sensitivity tr(A_s Hess_p(site_s)) summed over sites, per plane."""
        kx = self.kx[:, None]
        ky = self.ky[None, :]
        maps = []
        for plane in self.problem.planes:
            g0, g1 = self.green[plane]
            coeff = np.zeros_like(g0, dtype=complex)
            for s in range(len(self.sites)):
                As = A[s]
                ph = self.site_phase[:, :, s]
                cf = (-As[0, 0] * kx**2 - As[1, 1] * ky**2
                      + As[2, 2] * self.kk**2
                      - 2.0 * As[0, 1] * kx * ky) * g0
                cf = cf + 2.0j * (As[0, 2] * kx + As[1, 2] * ky) * g1
                coeff = coeff + cf * ph
            maps.append(self.synthesize(coeff))
        return maps

    def kernel(self, site_index, A, multipliers):
        """Spec kernel: tr(A Hess_p) - mu.grad_p - nu hxy_p for one site."""
        mu = np.asarray(multipliers, dtype=float)
        kx = self.kx[:, None]
        ky = self.ky[None, :]
        ph = self.site_phase[:, :, site_index]
        out = {}
        for plane in self.problem.planes:
            g0, g1 = self.green[plane]
            cf = (-A[0, 0] * kx**2 - A[1, 1] * ky**2 + A[2, 2] * self.kk**2
                  - 2.0 * A[0, 1] * kx * ky) * g0
            cf = cf + 2.0j * (A[0, 2] * kx + A[1, 2] * ky) * g1
            cf = cf - mu[0] * 1j * kx * g0 - mu[1] * 1j * ky * g0 \
                - mu[2] * g1 - mu[3] * (-kx * ky * g0)
            out[plane] = self.synthesize(cf * ph)
        return out

    def geometry(self, weights):
        """BilayerGeometry from the stacked weight vector."""
        n = self.shape[0]
        npix = n * n
        w = np.asarray(weights, dtype=float)
        bottom = ElectrodePattern(np.clip(w[:npix].reshape(n, n), 0, 1))
        top = None
        if self.problem.mode is Mode.BILAYER:
            top = ElectrodePattern(np.clip(w[npix:].reshape(n, n), 0, 1),
                                   Plane.TOP)
        H = None if self.problem.mode is Mode.OPEN else self.problem.H
        return BilayerGeometry(self.problem.cell, self.problem.mode, bottom,
                               top, H=H)

    def site_fields(self, geom):
        """Gradient and Hessian at every designed site at height h."""
        model = SpectralModel(geom, n_modes=self.n_modes)
        pts = np.column_stack([self.sites,
                               np.full(len(self.sites), self.problem.h)])
        res = model.evaluate(pts, order=2)
        return res["grad"], res["hess"]


def curvature_kernel(problem, site_index, A, multipliers, basis=None):
    """Per-pixel sensitivity map on each plane (dict keyed by Plane)."""
    basis = basis or _PatternBasis(problem)
    return basis.kernel(site_index, np.asarray(A, dtype=float), multipliers)


def _direction_from_hessians(hessians):
    """A_s = sign(det) adj(H_s) / |det H_s|^(2/3): the ascent direction of
    |det|^(1/3), per site."""
    A = np.empty((len(hessians), 3, 3))
    for s, hs in enumerate(hessians):
        det = np.linalg.det(hs)
        if abs(det) < 1e-300:
            raise OptimizationError("degenerate Hessian in direction update")
        adj = np.linalg.inv(hs) * det
        A[s] = np.sign(det) * adj / abs(det) ** (2.0 / 3.0)
    return A


def _seed_directions(n_sites, n_seeds, rng):
    """Curvature-direction seeds.  The identity is useless here (pixel
    Hessians are traceless, so tr(1 . H_p) = 0 for every pixel); instead we
    seed the symmetric z-antitrap direction plus anisotropic in-plane
    directions (single-layer optima break the x/y symmetry at moderate h/d)
    and random symmetric matrices."""
    seeds = [np.diag([1.0, 1.0, -2.0]), np.diag([2.0, -1.0, -1.0]),
             np.diag([-1.0, 2.0, -1.0])]
    while len(seeds) < n_seeds:
        M = rng.normal(size=(3, 3))
        M = 0.5 * (M + M.T)
        seeds.append(M)
    return [np.tile(a / np.linalg.norm(a), (n_sites, 1, 1))
            for a in seeds[:n_seeds]]


def _symmetrize_map(m, ops):
    for op in ops:
        m = 0.5 * (m + op(m))
    return m


def optimize_pattern(problem, tol=DEFAULT_TOL, max_iter=200, n_seeds=4,
                     seed_A=None, rng=None):
    """Iterated linearized determinant maximization.

    Returns the best seed's OptimizationResult.  ``seed_A`` (shape
    (n_sites, 3, 3) or (3, 3)) warm-starts the direction iteration and
    suppresses the random seeds.
    """
    rng = np.random.default_rng(rng if rng is not None else 2024)
    basis = _PatternBasis(problem)
    n_sites = len(basis.sites)
    A_eq = basis.constraint_maps()
    b_eq = np.zeros(A_eq.shape[0])
    sym_ops = lattice_symmetry_ops(problem.cell.lattice, basis.shape) \
        if problem.lattice_symmetry else []

    if seed_A is not None:
        seed_A = np.asarray(seed_A, dtype=float)
        if seed_A.shape == (3, 3):
            seed_A = np.tile(seed_A, (n_sites, 1, 1))
        seeds = [seed_A]
    else:
        seeds = _seed_directions(n_sites, n_seeds, rng)

    best = None
    for A0 in seeds:
        result = _run_single_seed(problem, basis, A_eq, b_eq, A0, tol,
                                  max_iter, sym_ops)
        if result is None:
            continue
        if best is None or result.kappa > best.kappa:
            best = result
    if best is None:
        raise OptimizationError("no seed produced a confining pattern")
    return best


def _solve_lp(c, A_eq, b_eq):
    res = linprog(-c, A_eq=A_eq, b_eq=b_eq, bounds=(0.0, 1.0),
                  method="highs")
    if res.status != 0:
        raise OptimizationError(f"LP failed: {res.message}")
    return res.x


def _run_single_seed(problem, basis, A_eq, b_eq, A0, tol, max_iter, sym_ops):
    n = basis.shape[0]
    npix = n * n * len(problem.planes)
    A_cur = np.array(A0)
    A_accept = None
    kappa_prev = -np.inf
    history = []
    best_state = None
    damp = 0.0
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        maps = basis.objective_map(A_cur)
        if sym_ops:
            maps = [_symmetrize_map(m, sym_ops) for m in maps]
        c = np.concatenate([m.ravel() for m in maps])
        w = _solve_lp(c, A_eq, b_eq)
        if problem.mirror_z and problem.mode is Mode.BILAYER:
            half = n * n
            mean = 0.5 * (w[:half] + w[half:])
            w = np.concatenate([mean, mean])
        geom = basis.geometry(w)
        grad, hess = basis.site_fields(geom)
        dets = np.array([np.linalg.det(hs) for hs in hess])
        if np.any(np.abs(dets) < 1e-250):
            if best_state is None:
                return None
            break
        kappa_sites = problem.h**2 * np.abs(dets) ** (1.0 / 3.0)
        kappa = float(kappa_sites.mean())
        if kappa < kappa_prev * (1.0 - 1e-9):
            # oscillation: damp the direction update toward the last accepted
            damp = max(1.0, 2.0 * damp)
            if damp > 64 or A_accept is None:
                break
            A_new = _direction_from_hessians(hess)
            A_cur = (A_new + damp * A_accept) / (1.0 + damp)
            continue
        history.append(kappa)
        state = (w, geom, grad, hess, kappa_sites, kappa, np.array(A_cur))
        best_state = state
        if kappa_prev > 0 and abs(kappa - kappa_prev) <= tol * kappa:
            converged = True
            break
        kappa_prev = kappa
        A_accept = np.array(A_cur)
        A_new = _direction_from_hessians(hess)
        damp = max(0.0, damp / 2.0)
        A_cur = (A_new + damp * A_accept) / (1.0 + damp)
    if best_state is None:
        return None
    w, geom, grad, hess, kappa_sites, kappa, A_fin = best_state
    if problem.mode is not Mode.COVERED and w.mean() > 0.5:
        # complement pattern: identical trap (phi -> 1 - phi between
        # equipotential boundaries), but RF on the compact patches
        w = 1.0 - w
        geom = basis.geometry(w)
        grad, hess = basis.site_fields(geom)
        A_fin = -A_fin
    flagged = bool(damp > 64)
    return OptimizationResult(
        problem=problem, geometry=geom, kappa=kappa,
        kappa_per_site=kappa_sites,
        converged=converged and not flagged, iterations=it, history=history,
        grad_residual=float(np.max(np.abs(grad))),
        hxy_residual=float(np.max(np.abs(hess[:, 0, 1]))),
        A=A_fin,
    )


def flip_kappa(result, pixel_flat, refind_null=True):
    """kappa of the pattern with one pixel flipped (0<->1), for optimality
    certificates.  The RF null is re-found near the first designed site."""
    from .pseudo import NoNullError, find_rf_null

    problem = result.problem
    basis = _PatternBasis(problem)
    n = basis.shape[0]
    npix = n * n
    w = [np.array(result.geometry.bottom.weights)]
    if result.geometry.top is not None:
        w.append(np.array(result.geometry.top.weights))
    plane_i, rest = divmod(pixel_flat, npix)
    i, j = divmod(rest, n)
    w[plane_i][i, j] = 1.0 - round(w[plane_i][i, j])
    geom = basis.geometry(np.concatenate([wi.ravel() for wi in w]))
    if not refind_null:
        _, hess = basis.site_fields(geom)
        return problem.h**2 * abs(np.linalg.det(hess[0])) ** (1.0 / 3.0)
    guess = np.array([*basis.sites[0], problem.h])
    try:
        site = find_rf_null(geom, guess, model=SpectralModel(geom, basis.n_modes))
    except NoNullError:
        return 0.0
    return site.kappa(problem.h)


def sweep_lattice(lattice, mode, h_over_d_values, resolution=128, H_over_h=2.0,
                  tol=DEFAULT_TOL, with_depth=True, rng=None, progress=None):
    """Optimize a lattice over a list of h/d values, warm-starting each point
    from the previous direction matrices.  Returns a list of row dicts."""
    from .pseudo import UnconfinedError, find_rf_null, trap_depth

    cell = UnitCell.for_lattice(lattice, 1.0)
    rows = []
    seed_A = None
    for hd in h_over_d_values:
        mode_ = Mode(mode)
        H = None if mode_ is Mode.OPEN else H_over_h * hd
        problem = OptimizationProblem(cell=cell, h=hd, mode=mode_, H=H,
                                      resolution=resolution)
        row = {"h_over_d": hd, "kappa": np.nan, "eta": np.nan,
               "converged": False, "error": ""}
        try:
            result = optimize_pattern(problem, tol=tol, seed_A=seed_A,
                                      n_seeds=2, rng=rng)
            seed_A = result.A
            row["kappa"] = result.kappa
            row["converged"] = result.converged
            row["result"] = result
            if with_depth:
                model = SpectralModel(result.geometry)
                site = find_rf_null(result.geometry,
                                    [*cell.site_xy()[0], hd], model=model)
                depth = trap_depth(result.geometry, site, model=model)
                row["eta"] = depth.eta
                row["site"] = site
                row["depth_margin_limited"] = depth.margin_limited
        except Exception as exc:  # per-point failures recorded, sweep continues
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows
