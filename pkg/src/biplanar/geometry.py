"""Unit cells, pixelated electrode patterns and bi-layer trap geometries.

Conventions: the periodicity cell is the rectangle [0, L_x) x [0, L_y);
pixel (i, j) of an N_x x N_y pattern covers
[i*L_x/N_x, (i+1)*L_x/N_x) x [j*L_y/N_y, (j+1)*L_y/N_y).  Weights are the
fraction of the drive voltage applied to a pixel (0 grounded, 1 full RF).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

SQRT3 = np.sqrt(3.0)


class GeometryError(ValueError):
    """Inconsistent cell, pattern or slab parameters."""


class Lattice(str, Enum):
    SQUARE = "square"
    TRIANGULAR = "triangular"
    HONEYCOMB = "honeycomb"
    KAGOME = "kagome"


class Mode(str, Enum):
    OPEN = "open_single_layer"
    COVERED = "covered_single_layer"
    BILAYER = "bilayer"


class Plane(str, Enum):
    BOTTOM = "bottom"
    TOP = "top"


# Fractional site coordinates in the rectangular cell, chosen so that every
# site is interior and the x/y axes are lattice axes (the optimizer forces the
# in-plane principal axes along them).
_LATTICE_TABLE = {
    Lattice.SQUARE: {
        "aspect": 1.0,  # L_y / L_x
        "lx_over_d": 1.0,
        "sites": [(0.5, 0.5)],
    },
    Lattice.TRIANGULAR: {
        "aspect": SQRT3,
        "lx_over_d": 1.0,
        "sites": [(0.25, 0.25), (0.75, 0.75)],
    },
    Lattice.HONEYCOMB: {
        "aspect": SQRT3,  # cell sqrt(3) d x 3 d
        "lx_over_d": SQRT3,
        "sites": [(0.25, 1 / 12), (0.25, 5 / 12), (0.75, 7 / 12), (0.75, 11 / 12)],
    },
    Lattice.KAGOME: {
        "aspect": SQRT3,
        "lx_over_d": 2.0,
        "sites": [(0.0, 0.0), (0.5, 0.0), (0.25, 0.25),
                  (0.5, 0.5), (0.0, 0.5), (0.75, 0.75)],
    },
}


@dataclass(frozen=True)
class UnitCell:
    """Rectangular periodicity cell with the designed trap sites."""

    lattice: Lattice
    d: float  # nearest-neighbor trap spacing
    lx: float
    ly: float
    sites: tuple  # fractional (fx, fy) pairs

    def __post_init__(self):
        if self.d <= 0 or self.lx <= 0 or self.ly <= 0:
            raise GeometryError("cell lengths must be positive")
        table = _LATTICE_TABLE[Lattice(self.lattice)]
        if len(self.sites) != len(table["sites"]):
            raise GeometryError(
                f"{self.lattice} cell must contain {len(table['sites'])} sites"
            )

    @classmethod
    def for_lattice(cls, lattice, d=1.0):
        table = _LATTICE_TABLE[Lattice(lattice)]
        lx = table["lx_over_d"] * d
        return cls(Lattice(lattice), d, lx, lx * table["aspect"],
                   tuple(table["sites"]))

    def site_xy(self):
        """Site positions in length units, shape (n_sites, 2)."""
        f = np.asarray(self.sites, dtype=float)
        return f * np.array([self.lx, self.ly])


def _check_power_of_two(n):
    return n >= 32 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ElectrodePattern:
    """Pixel weight map on one electrode plane."""

    weights: np.ndarray  # (N_x, N_y), values in [0, 1]
    plane: Plane = Plane.BOTTOM

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise GeometryError("pattern weights must be a 2-D array")
        if not (_check_power_of_two(w.shape[0]) and _check_power_of_two(w.shape[1])):
            raise GeometryError(
                f"pattern resolution must be powers of two >= 32, got {w.shape}"
            )
        if np.any(w < -1e-12) or np.any(w > 1 + 1e-12):
            raise GeometryError("pattern weights must lie in [0, 1]")
        object.__setattr__(self, "weights", np.clip(w, 0.0, 1.0))

    @property
    def shape(self):
        return self.weights.shape


@dataclass(frozen=True)
class BilayerGeometry:
    """Electrode patterns on one or two planes bounding the trapping slab.

    ``open_single_layer`` has no top plane (H infinite);
    ``covered_single_layer`` has a grounded plane at z=H;
    ``bilayer`` has patterned planes at z=0 and z=H, the top one optionally
    displaced laterally by ``offset``.
    """

    cell: UnitCell
    mode: Mode
    bottom: ElectrodePattern
    top: ElectrodePattern | None = None
    H: float | None = None
    offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        mode = Mode(self.mode)
        if mode is Mode.BILAYER:
            if self.top is None:
                raise GeometryError("bilayer mode requires a top pattern")
            if self.H is None or self.H <= 0:
                raise GeometryError("bilayer mode requires a positive plane spacing H")
        elif mode is Mode.COVERED:
            if self.top is not None:
                raise GeometryError("covered mode has a grounded (unpatterned) top plane")
            if self.H is None or self.H <= 0:
                raise GeometryError("covered mode requires a positive plane spacing H")
        else:  # open
            if self.top is not None or self.H is not None:
                raise GeometryError("open mode forbids a top plane and H")
        off = np.asarray(self.offset, dtype=float)
        if off.shape != (2,):
            raise GeometryError("offset must be a 2-vector")
        off = np.mod(off, [self.cell.lx, self.cell.ly])
        object.__setattr__(self, "offset", (float(off[0]), float(off[1])))

    @property
    def pixel_width(self):
        nx, ny = self.bottom.shape
        return max(self.cell.lx / nx, self.cell.ly / ny)

    def with_offset(self, offset):
        return replace(self, offset=tuple(np.asarray(offset, dtype=float)))

    def scaled(self, s):
        """Uniformly rescale all lengths by s (kappa and eta are invariant)."""
        cell = UnitCell(self.cell.lattice, self.cell.d * s, self.cell.lx * s,
                        self.cell.ly * s, self.cell.sites)
        return BilayerGeometry(
            cell, self.mode, self.bottom, self.top,
            None if self.H is None else self.H * s,
            (self.offset[0] * s, self.offset[1] * s),
        )


def pixel_centers(cell, shape):
    """Pixel-center coordinate arrays (x of shape (N_x,), y of shape (N_y,))."""
    nx, ny = shape
    x = (np.arange(nx) + 0.5) * (cell.lx / nx)
    y = (np.arange(ny) + 0.5) * (cell.ly / ny)
    return x, y


def disc_pattern(cell, shape, centers, radius, plane=Plane.BOTTOM):
    """Pattern with unit-weight discs (periodically wrapped) at the given centers."""
    x, y = pixel_centers(cell, shape)
    w = np.zeros(shape)
    for cx, cy in np.atleast_2d(centers):
        dx = np.remainder(x - cx + cell.lx / 2, cell.lx) - cell.lx / 2
        dy = np.remainder(y - cy + cell.ly / 2, cell.ly) - cell.ly / 2
        w[dx[:, None] ** 2 + dy[None, :] ** 2 <= radius**2] = 1.0
    return ElectrodePattern(w, plane)


def ring_pattern(cell, shape, centers, r_inner, r_outer, plane=Plane.BOTTOM):
    """Annular electrodes r_inner <= r <= r_outer around the given centers."""
    if not 0 <= r_inner < r_outer:
        raise GeometryError("ring radii must satisfy 0 <= r_inner < r_outer")
    x, y = pixel_centers(cell, shape)
    w = np.zeros(shape)
    for cx, cy in np.atleast_2d(centers):
        dx = np.remainder(x - cx + cell.lx / 2, cell.lx) - cell.lx / 2
        dy = np.remainder(y - cy + cell.ly / 2, cell.ly) - cell.ly / 2
        r2 = dx[:, None] ** 2 + dy[None, :] ** 2
        w[(r2 >= r_inner**2) & (r2 <= r_outer**2)] = 1.0
    return ElectrodePattern(w, plane)


def single_site_geometry(lattice, h_over_d, mode, pattern_builder, resolution=128,
                         H_over_h=2.0):
    """Convenience constructor: same electrode shape under every lattice site."""
    cell = UnitCell.for_lattice(lattice, 1.0)
    mode = Mode(mode)
    centers = cell.site_xy()
    bottom = pattern_builder(cell, (resolution, resolution), centers, Plane.BOTTOM)
    h = h_over_d * cell.d
    if mode is Mode.OPEN:
        return BilayerGeometry(cell, mode, bottom), h
    H = H_over_h * h
    if mode is Mode.COVERED:
        return BilayerGeometry(cell, mode, bottom, H=H), h
    top = pattern_builder(cell, (resolution, resolution), centers, Plane.TOP)
    return BilayerGeometry(cell, mode, bottom, top, H=H), h


# ---------------------------------------------------------------------------
# Exact pixel-index symmetry operations (used by the optional symmetrization
# pass of the optimizer).  Each op maps a weight grid to an equivalent one.


def lattice_symmetry_ops(lattice, shape):
    """Index maps (functions on weight grids) generating the point group
    that acts exactly on the pixel grid for our site placements."""
    nx, ny = shape
    ops = []

    def mirror_x_quarter(w):
        # reflection about x = L_x/4 (sites at fx = 1/4, 3/4)
        return np.roll(w[::-1, :], nx // 2, axis=0)

    def mirror_x_half(w):
        # reflection about x = L_x/2 (site at fx = 1/2)
        return w[::-1, :]

    def mirror_y_quarter(w):
        return np.roll(w[:, ::-1], ny // 2, axis=1)

    def mirror_y_half(w):
        return w[:, ::-1]

    def half_shift(w):
        return np.roll(w, (nx // 2, ny // 2), axis=(0, 1))

    lattice = Lattice(lattice)
    if lattice is Lattice.SQUARE:
        ops = [mirror_x_half, mirror_y_half]
        if nx == ny:
            ops.append(lambda w: w.T[:, ::-1])  # 90 degree rotation about center
    elif lattice is Lattice.TRIANGULAR:
        ops = [mirror_x_quarter, mirror_y_quarter, half_shift]
    elif lattice is Lattice.HONEYCOMB:
        ops = [mirror_x_quarter, half_shift]
    elif lattice is Lattice.KAGOME:
        ops = [mirror_x_quarter, mirror_y_quarter]
    return ops


def symmetrize(weights, ops, rounds=3):
    """Average a weight grid over the group generated by the given ops."""
    w = np.array(weights, dtype=float)
    for _ in range(rounds):
        for op in ops:
            w = 0.5 * (w + op(w))
    return w
