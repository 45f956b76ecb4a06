"""Pattern import/export: ASCII PGM weight maps plus a plain-text header.

A geometry is stored as <base>.header.txt together with <base>.bottom.pgm and,
for bilayer mode, <base>.top.pgm.  Weights are quantized to the PGM maxval
(255 by default, 65535 for optimizer output); reading and re-writing a file is
byte-identical.
"""

from __future__ import annotations

import numpy as np

from .geometry import (BilayerGeometry, ElectrodePattern, GeometryError,
                       Lattice, Mode, Plane, UnitCell)


class PatternFormatError(GeometryError):
    """Malformed PGM or header file."""


def write_pgm(path, pattern, maxval=255):
    """Write a weight grid as plain (P2) PGM; rows are y, columns are x."""
    if maxval not in (255, 65535):
        raise PatternFormatError("maxval must be 255 or 65535")
    w = pattern.weights
    q = np.rint(w * maxval).astype(int)
    nx, ny = w.shape
    lines = [f"P2", f"# biplanar electrode pattern plane={Plane(pattern.plane).value}",
             f"{nx} {ny}", f"{maxval}"]
    # PGM scans top row first; store y descending so the file reads like a plot
    for j in range(ny - 1, -1, -1):
        lines.append(" ".join(str(v) for v in q[:, j]))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_pgm(path):
    """Read a plain PGM written by write_pgm; returns (weights, plane, maxval)."""
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read()
    plane = Plane.BOTTOM
    tokens = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if line.startswith("#"):
            if "plane=top" in line:
                plane = Plane.TOP
            continue
        tokens.extend((lineno, t) for t in line.split())
    if not tokens or tokens[0][1] != "P2":
        raise PatternFormatError(f"{path}: not a plain (P2) PGM")
    try:
        nx, ny, maxval = (int(tokens[i][1]) for i in (1, 2, 3))
        values = np.array([int(t) for _, t in tokens[4:]], dtype=float)
    except ValueError as exc:
        bad = next((t for t in tokens[1:] if not t[1].lstrip("-").isdigit()), None)
        where = f" at line {bad[0]} ('{bad[1]}')" if bad else ""
        raise PatternFormatError(f"{path}: non-integer token{where}") from exc
    if values.size != nx * ny:
        raise PatternFormatError(
            f"{path}: expected {nx * ny} samples, found {values.size}"
        )
    if values.min() < 0 or values.max() > maxval:
        raise PatternFormatError(f"{path}: sample out of range 0..{maxval}")
    grid = values.reshape(ny, nx)[::-1].T / maxval
    return ElectrodePattern(grid, plane), maxval


_HEADER_KEYS = ("lattice_kind", "d", "L_x", "L_y", "H", "mode",
                "offset_x", "offset_y", "sites")


def write_header(path, geom):
    cell = geom.cell
    sites = ";".join(f"{fx!r},{fy!r}" for fx, fy in cell.sites)
    entries = {
        "lattice_kind": Lattice(cell.lattice).value,
        "d": repr(cell.d),
        "L_x": repr(cell.lx),
        "L_y": repr(cell.ly),
        "H": "inf" if geom.H is None else repr(geom.H),
        "mode": Mode(geom.mode).value,
        "offset_x": repr(geom.offset[0]),
        "offset_y": repr(geom.offset[1]),
        "sites": sites,
    }
    with open(path, "w", encoding="utf-8") as f:
        for key in _HEADER_KEYS:
            f.write(f"{key} = {entries[key]}\n")


def read_header(path):
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise PatternFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in entries]
    if missing:
        raise PatternFormatError(f"{path}: missing keys {missing}")
    return entries


def save_geometry(base, geom, maxval=255):
    """Write header + pattern PGMs under the given path base; returns paths."""
    paths = [f"{base}.header.txt", f"{base}.bottom.pgm"]
    write_header(paths[0], geom)
    write_pgm(paths[1], geom.bottom, maxval)
    if geom.top is not None:
        paths.append(f"{base}.top.pgm")
        write_pgm(paths[2], geom.top, maxval)
    return paths


def load_geometry(base):
    """Load a geometry written by save_geometry."""
    entries = read_header(f"{base}.header.txt")
    sites = tuple(
        tuple(float(v) for v in pair.split(","))
        for pair in entries["sites"].split(";")
    )
    cell = UnitCell(Lattice(entries["lattice_kind"]), float(entries["d"]),
                    float(entries["L_x"]), float(entries["L_y"]), sites)
    mode = Mode(entries["mode"])
    bottom, _ = read_pgm(f"{base}.bottom.pgm")
    top = None
    if mode is Mode.BILAYER:
        top, _ = read_pgm(f"{base}.top.pgm")
    H = None if entries["H"] == "inf" else float(entries["H"])
    offset = (float(entries["offset_x"]), float(entries["offset_y"]))
    return BilayerGeometry(cell, mode, bottom, top, H, offset)
