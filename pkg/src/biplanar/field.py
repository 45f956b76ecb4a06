"""Spectral evaluation of the potential between two parallel planes.

The potential of a periodic surface-potential map Phi(x, y, 0) propagates into
the slab mode by mode,

    phi(r) = sum_k  Phi~(k) * W(k, z) * exp(i (k_x x + k_y y)),

where W is sinh(k(H-z))/sinh(kH) between grounded planes (exp(-kz) with no
cover plane) and Phi~ are the Fourier coefficients of the surface map.  A
patterned top plane contributes the same series under z -> H - z, with a
lateral displacement entering as a phase factor on its spectrum.  Pixel
patterns use the analytic transform of each rectangular pixel, so the series
is exact for the piecewise-constant surface potential.

Gradients and Hessians are analytic per mode (ik factors, closed-form z
derivatives of W), which keeps the Hessian traceless to rounding.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.fft import next_fast_len

from .geometry import BilayerGeometry, GeometryError, Mode, Plane

DEFAULT_TOL = 1e-10


class DomainError(GeometryError):
    """Evaluation point outside the valid region of the slab."""


class TruncationWarning(UserWarning):
    """Mode truncation may not reach the requested accuracy at this point."""


@dataclass
class FieldEval:
    """Potential (per unit drive voltage), gradient and Hessian at one point."""

    phi: float
    grad: np.ndarray  # (3,)
    hessian: np.ndarray  # (3, 3), symmetric, traceless up to rounding


def required_modes(lx, ly, z_min, tol=DEFAULT_TOL):
    """Per-axis mode counts so the neglected tail exp(-k z_min) is below tol.

    The slowest-decaying neglected mode on axis i has k = 2 pi (N_i+1) / L_i.
    """
    if z_min <= 0:
        raise DomainError("z_min must be positive")
    if tol >= 1:
        return 1, 1
    decades = math.log(1.0 / tol)
    nx = max(1, math.ceil(decades * lx / (2 * math.pi * z_min)))
    ny = max(1, math.ceil(decades * ly / (2 * math.pi * z_min)))
    return nx, ny


def surface_green_fourier(k, z, H, mode):
    """Weight of a surface Fourier mode of the bottom plane at height z.

    Covered/bilayer: sinh(k(H-z))/sinh(kH), evaluated in the overflow-safe
    factored form exp(-kz)*(1-exp(-2k(H-z)))/(1-exp(-2kH)); open: exp(-kz).
    """
    k = np.asarray(k, dtype=float)
    if np.any(k < 0):
        raise DomainError("wavenumber must be nonnegative")
    if Mode(mode) is Mode.OPEN:
        if np.any(np.asarray(z) < 0):
            raise DomainError("open mode requires z >= 0")
        return np.exp(-k * z)
    if H is None or H <= 0:
        raise DomainError("covered/bilayer mode requires positive H")
    if np.any(np.asarray(z) < 0) or np.any(np.asarray(z) > H):
        raise DomainError("z must lie within the slab [0, H]")
    with np.errstate(invalid="ignore", divide="ignore"):
        num = -np.expm1(-2.0 * k * (H - z))
        den = -np.expm1(-2.0 * k * H)
        out = np.exp(-k * z) * np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return np.where(k == 0, (H - z) / H, out)


def _green_factors(k, z, H, mode, plane):
    """(W, dW/dz, d2W/dz2) for one plane's contribution, vectorized.

    k and z broadcast; the k = 0 column is the closed-form linear limit.
    """
    k = np.asarray(k, dtype=float)
    z = np.asarray(z, dtype=float)
    if Mode(mode) is Mode.OPEN:
        e = np.exp(-k * z)
        return e, -k * e, k * k * e
    kz = k * z
    kzc = k * (H - z)
    den = -np.expm1(-2.0 * k * H)  # 1 - exp(-2kH)
    safe_den = np.where(den > 0, den, 1.0)
    if plane is Plane.BOTTOM:
        # sinh(k(H-z))/sinh(kH) and derivatives
        g0 = np.exp(-kz) * (-np.expm1(-2.0 * kzc)) / safe_den
        g1 = -k * np.exp(-kz) * (1.0 + np.exp(-2.0 * kzc)) / safe_den
        g0 = np.where(k == 0, (H - z) / H, g0)
        g1 = np.where(k == 0, -1.0 / H + 0.0 * z, g1)
    else:
        # sinh(kz)/sinh(kH) and derivatives
        g0 = np.exp(-kzc) * (-np.expm1(-2.0 * kz)) / safe_den
        g1 = k * np.exp(-kzc) * (1.0 + np.exp(-2.0 * kz)) / safe_den
        g0 = np.where(k == 0, z / H, g0)
        g1 = np.where(k == 0, 1.0 / H + 0.0 * z, g1)
    return g0, g1, k * k * g0


def pattern_spectrum(pattern, n_modes):
    """Fourier coefficients of a pixel pattern over |n_x|<=N_x, |n_y|<=N_y.

    Uses the analytic transform of each rectangular pixel (FFT of the weight
    grid times pixel-center phase and sinc form factors); exact for the
    piecewise-constant pattern at every mode, including beyond the pixel
    Nyquist index.
    """
    w = pattern.weights
    npx, npy = w.shape
    nmx, nmy = n_modes
    nx = np.arange(-nmx, nmx + 1)
    ny = np.arange(-nmy, nmy + 1)
    wf = np.fft.fft2(w)
    coeff = wf[np.ix_(np.mod(nx, npx), np.mod(ny, npy))] / (npx * npy)
    phase_x = np.exp(-1j * np.pi * nx / npx) * np.sinc(nx / npx)
    phase_y = np.exp(-1j * np.pi * ny / npy) * np.sinc(ny / npy)
    return coeff * phase_x[:, None] * phase_y[None, :]


class SpectralModel:
    """Assembled Fourier representation of a BilayerGeometry.

    Immutable after construction; evaluation methods are pure and can be
    called concurrently.
    """

    def __init__(self, geom: BilayerGeometry, n_modes=None, tol=DEFAULT_TOL):
        self.geom = geom
        cell = geom.cell
        if n_modes is None:
            z_ref = 0.1 * geom.H if geom.H is not None else 0.1 * cell.d
            n_modes = required_modes(cell.lx, cell.ly, z_ref, tol)
        self.n_modes = n_modes
        nmx, nmy = n_modes
        nx = np.arange(-nmx, nmx + 1)
        ny = np.arange(-nmy, nmy + 1)
        self.kx = 2 * np.pi * nx / cell.lx
        self.ky = 2 * np.pi * ny / cell.ly
        self.kk = np.hypot(self.kx[:, None], self.ky[None, :])
        self.coeff_bottom = pattern_spectrum(geom.bottom, n_modes)
        if geom.top is not None:
            off = np.asarray(geom.offset)
            shift = np.exp(-1j * (self.kx[:, None] * off[0] + self.ky[None, :] * off[1]))
            self.coeff_top = pattern_spectrum(geom.top, n_modes) * shift
        else:
            self.coeff_top = None
        self._mode = Mode(geom.mode)

    # -- geometry helpers ---------------------------------------------------

    @property
    def z_limits(self):
        H = self.geom.H
        return (0.0, H if H is not None else np.inf)

    def check_points(self, pts, margin=None):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[-1] != 3:
            raise DomainError("points must be 3-vectors")
        if margin is None:
            margin = self.geom.pixel_width
        zlo, zhi = self.z_limits
        z = pts[:, 2]
        if np.any(z < zlo + margin) or np.any(z > zhi - margin):
            raise DomainError(
                f"z must lie in [{zlo + margin:.4g}, {zhi - margin:.4g}]"
            )
        return pts

    def truncation_estimate(self, z):
        """Bound on the neglected spectral tail at height z (per plane distance)."""
        zlo, zhi = self.z_limits
        dist = np.minimum(z - zlo, zhi - z) if np.isfinite(zhi) else z - zlo
        k_next = 2 * np.pi * min(
            (self.n_modes[0] + 1) / self.geom.cell.lx,
            (self.n_modes[1] + 1) / self.geom.cell.ly,
        )
        return np.exp(-k_next * np.asarray(dist))

    # -- point evaluation ---------------------------------------------------

    def evaluate(self, pts, order=2, chunk=512):
        """phi, grad, hessian at points (N, 3).  Returns dict of arrays."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = pts.shape[0]
        out = {"phi": np.empty(n)}
        if order >= 1:
            out["grad"] = np.empty((n, 3))
        if order >= 2:
            out["hess"] = np.empty((n, 3, 3))
        kx = self.kx[:, None]
        ky = self.ky[None, :]
        for lo in range(0, n, chunk):
            sl = slice(lo, min(lo + chunk, n))
            p = pts[sl]
            z = p[:, 2][:, None, None]
            phase = np.exp(1j * (kx[None] * p[:, 0, None, None]
                                 + ky[None] * p[:, 1, None, None]))
            g0b, g1b, g2b = _green_factors(self.kk[None], z, self.geom.H,
                                           self._mode, Plane.BOTTOM)
            c = self.coeff_bottom[None] * g0b
            c1 = self.coeff_bottom[None] * g1b
            c2 = self.coeff_bottom[None] * g2b
            if self.coeff_top is not None:
                g0t, g1t, g2t = _green_factors(self.kk[None], z, self.geom.H,
                                               self._mode, Plane.TOP)
                c = c + self.coeff_top[None] * g0t
                c1 = c1 + self.coeff_top[None] * g1t
                c2 = c2 + self.coeff_top[None] * g2t
            cp = c * phase
            out["phi"][sl] = cp.real.sum(axis=(1, 2))
            if order >= 1:
                c1p = c1 * phase
                out["grad"][sl, 0] = -(kx[None] * cp.imag).sum(axis=(1, 2))
                out["grad"][sl, 1] = -(ky[None] * cp.imag).sum(axis=(1, 2))
                out["grad"][sl, 2] = c1p.real.sum(axis=(1, 2))
            if order >= 2:
                h = out["hess"][sl]
                h[:, 0, 0] = -(kx[None] ** 2 * cp.real).sum(axis=(1, 2))
                h[:, 1, 1] = -(ky[None] ** 2 * cp.real).sum(axis=(1, 2))
                h[:, 2, 2] = (c2 * phase).real.sum(axis=(1, 2))
                h[:, 0, 1] = h[:, 1, 0] = -(kx[None] * ky[None] * cp.real).sum(axis=(1, 2))
                h[:, 0, 2] = h[:, 2, 0] = -(kx[None] * c1p.imag).sum(axis=(1, 2))
                h[:, 1, 2] = h[:, 2, 1] = -(ky[None] * c1p.imag).sum(axis=(1, 2))
        return out

    def third_derivatives(self, pt):
        """Full symmetric third-derivative tensor (3,3,3) at one point."""
        x, y, z = np.asarray(pt, dtype=float)
        kx = self.kx[:, None]
        ky = self.ky[None, :]
        phase = np.exp(1j * (kx * x + ky * y))
        g0, g1, g2 = _green_factors(self.kk, z, self.geom.H, self._mode, Plane.BOTTOM)
        # third z-derivative of W: for covered modes d3W/dz3 = k^2 * dW/dz
        c0 = self.coeff_bottom * g0
        c1 = self.coeff_bottom * g1
        c3 = self.coeff_bottom * (self.kk**2) * g1
        if self.coeff_top is not None:
            t0, t1, t2 = _green_factors(self.kk, z, self.geom.H, self._mode, Plane.TOP)
            c0 = c0 + self.coeff_top * t0
            c1 = c1 + self.coeff_top * t1
            c3 = c3 + self.coeff_top * (self.kk**2) * t1
        cp0 = c0 * phase
        cp1 = c1 * phase
        cp3 = c3 * phase
        T = np.zeros((3, 3, 3))

        def fill(i, j, l, val):
            for a, b, cidx in {(i, j, l), (i, l, j), (j, i, l), (j, l, i),
                               (l, i, j), (l, j, i)}:
                T[a, b, cidx] = val

        fill(0, 0, 0, (kx**3 * cp0.imag).sum())
        fill(0, 0, 1, (kx**2 * ky * cp0.imag).sum())
        fill(0, 1, 1, (kx * ky**2 * cp0.imag).sum())
        fill(1, 1, 1, (ky**3 * cp0.imag).sum())
        fill(0, 0, 2, -(kx**2 * cp1.real).sum())
        fill(0, 1, 2, -(kx * ky * cp1.real).sum())
        fill(1, 1, 2, -(ky**2 * cp1.real).sum())
        fill(0, 2, 2, -(kx * (self.kk**2 * c0 * phase).imag).sum())
        fill(1, 2, 2, -(ky * (self.kk**2 * c0 * phase).imag).sum())
        fill(2, 2, 2, cp3.real.sum())
        return T

    # -- grid evaluation (FFT synthesis per z slice) ------------------------

    def grid(self, nxy, z_values, order=1):
        """Fields on the regular cell grid x_i = i L_x/nx at each z.

        Returns dict with 'phi' (nz, nx, ny) and, for order>=1, 'grad'
        (nz, 3, nx, ny).  nxy may be a scalar or (nx, ny); it is raised to
        hold all modes without aliasing.
        """
        if np.isscalar(nxy):
            nxy = (nxy, nxy)
        nmx, nmy = self.n_modes
        nx = next_fast_len(max(int(nxy[0]), 2 * nmx + 2))
        ny = next_fast_len(max(int(nxy[1]), 2 * nmy + 2))
        z_values = np.atleast_1d(np.asarray(z_values, dtype=float))
        nz = z_values.size
        phi = np.empty((nz, nx, ny))
        grad = np.empty((nz, 3, nx, ny)) if order >= 1 else None
        ix = np.mod(np.arange(-nmx, nmx + 1), nx)
        iy = np.mod(np.arange(-nmy, nmy + 1), ny)
        kx = self.kx[:, None]
        ky = self.ky[None, :]
        scale = nx * ny

        def synth(cgrid):
            buf = np.zeros((nx, ny), dtype=complex)
            buf[np.ix_(ix, iy)] = cgrid
            return scale * np.fft.ifft2(buf).real

        for iz, z in enumerate(z_values):
            g0, g1, _ = _green_factors(self.kk, z, self.geom.H, self._mode,
                                       Plane.BOTTOM)
            c0 = self.coeff_bottom * g0
            c1 = self.coeff_bottom * g1
            if self.coeff_top is not None:
                t0, t1, _ = _green_factors(self.kk, z, self.geom.H, self._mode,
                                           Plane.TOP)
                c0 = c0 + self.coeff_top * t0
                c1 = c1 + self.coeff_top * t1
            phi[iz] = synth(c0)
            if order >= 1:
                grad[iz, 0] = synth(1j * kx * c0)
                grad[iz, 1] = synth(1j * ky * c0)
                grad[iz, 2] = synth(c1)
        out = {"phi": phi, "shape": (nx, ny)}
        if order >= 1:
            out["grad"] = grad
        return out


def evaluate_field(geom, r, model=None, n_modes=None):
    """FieldEval (phi per volt, gradient, Hessian) at a single point.

    Raises DomainError for points outside the slab or within one pixel width
    of a patterned plane; warns if the default mode truncation is marginal.
    """
    if model is None:
        model = SpectralModel(geom, n_modes=n_modes)
    pts = model.check_points(r)
    tail = float(model.truncation_estimate(pts[0, 2]))
    if tail > 1e-8:
        warnings.warn(
            f"spectral tail estimate {tail:.2e} at z={pts[0, 2]:.4g}; "
            "increase n_modes for full accuracy",
            TruncationWarning,
            stacklevel=2,
        )
    res = model.evaluate(pts, order=2)
    return FieldEval(float(res["phi"][0]), res["grad"][0], res["hess"][0])
