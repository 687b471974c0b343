"""Spectra, attenuation tables, and phantoms.

Attenuation values are tabulated in 1/cm on keV energy grids.  The built-in
materials (soft_tissue, bone, iron) pin their 30 keV and 80 keV samples to
the reference anchor values and fill the rest of the 10..150 keV grid with a
two-component fit (photoelectric ~E^-3 plus a Klein-Nishina-shaped Compton
term) through those anchors.  Queries interpolate log-linearly between
samples and refuse to extrapolate.

Spectra are discrete: point masses at sample energies whose weights sum to
one, so a single-line spectrum reproduces the monochromatic model exactly.
"""

from __future__ import annotations

import io as _io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import ImageGrid

__all__ = [
    "Spectrum",
    "MaterialTable",
    "Disc",
    "Ellipse",
    "Ball",
    "Ellipsoid",
    "AnalyticPhantom",
    "VoxelPhantom",
    "attenuation_at",
    "normalize_spectrum",
    "monochromatize",
    "builtin_material",
    "builtin_materials",
    "delta_spectrum",
    "two_peak_spectrum",
    "read_spectrum_csv",
    "write_spectrum_csv",
    "read_material_csv",
    "write_material_csv",
    "read_phantom_file",
    "write_phantom_file",
]

ELECTRON_REST_KEV = 510.99895

# Reference attenuation anchors in 1/cm at (30 keV, 80 keV).
_ANCHORS = {
    "soft_tissue": (0.40, 0.19),
    "bone": (2.56, 0.43),
    "iron": (64.38, 4.69),
}
_ANCHOR_LOW_KEV = 30.0
_ANCHOR_HIGH_KEV = 80.0


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Spectrum:
    """Discrete spectrum: point masses at ``energies_keV`` with ``weights``."""

    energies_keV: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.energies_keV, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if e.shape != w.shape or e.ndim != 1:
            raise ValueError("energies and weights must be matching 1D arrays")
        if np.any(e <= 0):
            raise ValueError("energies must be positive")
        if np.any(np.diff(e) <= 0):
            raise ValueError("energies must be strictly increasing")
        if np.any(w < 0) or not np.sum(w) > 0:
            raise ValueError("weights must be nonnegative with positive sum")
        object.__setattr__(self, "energies_keV", e)
        object.__setattr__(self, "weights", w)

    @property
    def n_lines(self) -> int:
        return int(self.energies_keV.size)

    def is_normalized(self, tol: float = 1e-9) -> bool:
        return abs(float(np.sum(self.weights)) - 1.0) <= tol


def normalize_spectrum(spectrum: Spectrum) -> Spectrum:
    """Scale weights so they sum to one (point-mass quadrature)."""
    total = float(np.sum(spectrum.weights))
    return Spectrum(spectrum.energies_keV.copy(), spectrum.weights / total)


def delta_spectrum(energy_keV: float) -> Spectrum:
    return Spectrum(np.array([float(energy_keV)]), np.array([1.0]))


def two_peak_spectrum(e_low: float = 30.0, e_high: float = 80.0,
                      w_low: float = 0.5) -> Spectrum:
    """Built-in synthetic two-line spectrum for deterministic tests."""
    if not 0.0 <= w_low <= 1.0:
        raise ValueError("w_low must lie in [0, 1]")
    return Spectrum(np.array([e_low, e_high], dtype=float),
                    np.array([w_low, 1.0 - w_low], dtype=float))


# ---------------------------------------------------------------------------
# materials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialTable:
    """Attenuation samples mu(E) in 1/cm on a strictly increasing keV grid."""

    name: str
    energies_keV: np.ndarray
    mu_per_cm: np.ndarray

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.energies_keV, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mu_per_cm, dtype=float))
        if e.shape != mu.shape or e.ndim != 1 or e.size < 2:
            raise ValueError("need matching 1D grids with at least two samples")
        if np.any(np.diff(e) <= 0):
            raise ValueError("energy grid must be strictly increasing")
        if np.any(mu <= 0):
            raise ValueError("attenuation samples must be positive")
        object.__setattr__(self, "energies_keV", e)
        object.__setattr__(self, "mu_per_cm", mu)


def attenuation_at(material: MaterialTable, energy_keV) -> np.ndarray:
    """Log-linear interpolation of mu (1/cm) at ``energy_keV``.

    Exactly tabulated energies return the stored sample.  Energies outside
    the tabulated range raise ``ValueError`` (no extrapolation).
    """
    e = np.asarray(energy_keV, dtype=float)
    grid = material.energies_keV
    if np.any(e < grid[0]) or np.any(e > grid[-1]):
        raise ValueError(
            f"energy outside tabulated range [{grid[0]}, {grid[-1]}] keV "
            f"for material '{material.name}'")
    logmu = np.interp(e, grid, np.log(material.mu_per_cm))
    out = np.exp(logmu)
    # pin exact grid hits to the stored values (no round-trip through exp/log)
    idx = np.searchsorted(grid, e)
    idx = np.clip(idx, 0, grid.size - 1)
    exact = grid[idx] == e
    out = np.where(exact, material.mu_per_cm[idx], out)
    return out if out.ndim else float(out)


def _klein_nishina_sigma(energy_keV: np.ndarray) -> np.ndarray:
    """Total Klein-Nishina cross section (arbitrary units)."""
    k = np.asarray(energy_keV, dtype=float) / ELECTRON_REST_KEV
    t1 = (1 + k) / k**2 * (2 * (1 + k) / (1 + 2 * k) - np.log1p(2 * k) / k)
    t2 = np.log1p(2 * k) / (2 * k)
    t3 = -(1 + 3 * k) / (1 + 2 * k) ** 2
    return t1 + t2 + t3


def _fit_two_component(mu_low: float, mu_high: float) -> Tuple[float, float]:
    """Coefficients (photoelectric, Compton) through the two anchors."""
    fp = (np.array([_ANCHOR_LOW_KEV, _ANCHOR_HIGH_KEV]) / _ANCHOR_LOW_KEV) ** -3
    fc = _klein_nishina_sigma(np.array([_ANCHOR_LOW_KEV, _ANCHOR_HIGH_KEV]))
    fc = fc / fc[0]
    mat = np.array([[fp[0], fc[0]], [fp[1], fc[1]]])
    cp, cc = np.linalg.solve(mat, np.array([mu_low, mu_high]))
    return float(cp), float(cc)


def _build_builtin(name: str, mu_low: float, mu_high: float) -> MaterialTable:
    cp, cc = _fit_two_component(mu_low, mu_high)
    grid = np.arange(10.0, 151.0, 1.0)
    fp = (grid / _ANCHOR_LOW_KEV) ** -3
    fc = _klein_nishina_sigma(grid) / _klein_nishina_sigma(np.array([_ANCHOR_LOW_KEV]))[0]
    mu = cp * fp + cc * fc
    # pin the anchors exactly
    mu[grid == _ANCHOR_LOW_KEV] = mu_low
    mu[grid == _ANCHOR_HIGH_KEV] = mu_high
    return MaterialTable(name=name, energies_keV=grid, mu_per_cm=mu)


_BUILTIN_CACHE: Dict[str, MaterialTable] = {}


def builtin_material(name: str) -> MaterialTable:
    """Return one of the built-in tables: soft_tissue, bone, iron."""
    if name not in _ANCHORS:
        raise KeyError(f"unknown built-in material '{name}' "
                       f"(have: {', '.join(sorted(_ANCHORS))})")
    if name not in _BUILTIN_CACHE:
        _BUILTIN_CACHE[name] = _build_builtin(name, *_ANCHORS[name])
    return _BUILTIN_CACHE[name]


def builtin_materials() -> Dict[str, MaterialTable]:
    return {name: builtin_material(name) for name in _ANCHORS}


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Disc:
    """z-invariant circular cylinder (a disc in any axial slice)."""
    cx: float
    cy: float
    radius: float
    material: str
    density: float = 1.0


@dataclass(frozen=True)
class Ellipse:
    """z-invariant elliptic cylinder; angle rotates the a-axis from +x."""
    cx: float
    cy: float
    a: float
    b: float
    angle_rad: float
    material: str
    density: float = 1.0


@dataclass(frozen=True)
class Ball:
    cx: float
    cy: float
    cz: float
    radius: float
    material: str
    density: float = 1.0


@dataclass(frozen=True)
class Ellipsoid:
    cx: float
    cy: float
    cz: float
    a: float
    b: float
    c: float
    material: str
    density: float = 1.0


Primitive = Union[Disc, Ellipse, Ball, Ellipsoid]


def _chord_quadratic(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Root separation of A t^2 + B t + C = 0 (0 where no real roots)."""
    disc = B * B - 4.0 * A * C
    good = (disc > 0) & (A > 0)
    out = np.zeros_like(disc)
    out[good] = np.sqrt(disc[good]) / A[good]
    return out


def _primitive_chords(prim: Primitive, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Exact intersection lengths of unit-speed rays with one primitive.

    origins, dirs: (N, 3) with unit 3D directions.  The chord is the length
    of the full line's intersection (sources outside the support make full
    and half lines agree).
    """
    if isinstance(prim, Disc):
        o = origins[:, :2] - np.array([prim.cx, prim.cy])
        d = dirs[:, :2]
        A = np.einsum("ij,ij->i", d, d)
        B = 2.0 * np.einsum("ij,ij->i", d, o)
        C = np.einsum("ij,ij->i", o, o) - prim.radius**2
        return _chord_quadratic(A, B, C)
    if isinstance(prim, Ellipse):
        ca, sa = np.cos(prim.angle_rad), np.sin(prim.angle_rad)
        rot = np.array([[ca, sa], [-sa, ca]])  # world -> ellipse frame
        scale = np.array([1.0 / prim.a, 1.0 / prim.b])
        o = (origins[:, :2] - np.array([prim.cx, prim.cy])) @ rot.T * scale
        d = dirs[:, :2] @ rot.T * scale
        A = np.einsum("ij,ij->i", d, d)
        B = 2.0 * np.einsum("ij,ij->i", d, o)
        C = np.einsum("ij,ij->i", o, o) - 1.0
        return _chord_quadratic(A, B, C)
    if isinstance(prim, Ball):
        o = origins - np.array([prim.cx, prim.cy, prim.cz])
        A = np.einsum("ij,ij->i", dirs, dirs)
        B = 2.0 * np.einsum("ij,ij->i", dirs, o)
        C = np.einsum("ij,ij->i", o, o) - prim.radius**2
        return _chord_quadratic(A, B, C)
    if isinstance(prim, Ellipsoid):
        scale = np.array([1.0 / prim.a, 1.0 / prim.b, 1.0 / prim.c])
        o = (origins - np.array([prim.cx, prim.cy, prim.cz])) * scale
        d = dirs * scale
        A = np.einsum("ij,ij->i", d, d)
        B = 2.0 * np.einsum("ij,ij->i", d, o)
        C = np.einsum("ij,ij->i", o, o) - 1.0
        return _chord_quadratic(A, B, C)
    raise TypeError(f"unknown primitive type {type(prim)!r}")


def _primitive_inside(prim: Primitive, pts: np.ndarray) -> np.ndarray:
    """Boolean membership of (N, 3) points."""
    if isinstance(prim, Disc):
        dx = pts[:, 0] - prim.cx
        dy = pts[:, 1] - prim.cy
        return dx * dx + dy * dy <= prim.radius**2
    if isinstance(prim, Ellipse):
        ca, sa = np.cos(prim.angle_rad), np.sin(prim.angle_rad)
        dx = pts[:, 0] - prim.cx
        dy = pts[:, 1] - prim.cy
        xr = (ca * dx + sa * dy) / prim.a
        yr = (-sa * dx + ca * dy) / prim.b
        return xr * xr + yr * yr <= 1.0
    if isinstance(prim, Ball):
        d = pts - np.array([prim.cx, prim.cy, prim.cz])
        return np.einsum("ij,ij->i", d, d) <= prim.radius**2
    if isinstance(prim, Ellipsoid):
        scale = np.array([1.0 / prim.a, 1.0 / prim.b, 1.0 / prim.c])
        d = (pts - np.array([prim.cx, prim.cy, prim.cz])) * scale
        return np.einsum("ij,ij->i", d, d) <= 1.0
    raise TypeError(f"unknown primitive type {type(prim)!r}")


@dataclass(frozen=True)
class AnalyticPhantom:
    """Additive union of primitives with material tags and density scales.

    Overlapping primitives add: the attenuation at a point is the sum of
    ``density * mu_material(E)`` over the primitives containing it, which
    keeps line integrals exactly the sum of per-primitive chord terms.
    """

    primitives: Tuple[Primitive, ...]
    materials: Optional[Dict[str, MaterialTable]] = None

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def material_table(self, name: str) -> MaterialTable:
        if self.materials is not None and name in self.materials:
            return self.materials[name]
        return builtin_material(name)

    def material_names(self) -> List[str]:
        seen: List[str] = []
        for p in self.primitives:
            if p.material not in seen:
                seen.append(p.material)
        return seen

    def material_path_lengths(self, origins: np.ndarray,
                              dirs: np.ndarray) -> Dict[str, np.ndarray]:
        """Density-weighted chord length (mm) per material for each ray."""
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        out: Dict[str, np.ndarray] = {}
        for prim in self.primitives:
            chord = prim.density * _primitive_chords(prim, origins, dirs)
            if prim.material in out:
                out[prim.material] += chord
            else:
                out[prim.material] = chord
        return out

    def line_integral(self, origins: np.ndarray, dirs: np.ndarray,
                      energy_keV: float) -> np.ndarray:
        """Exact line integral of mu (1/cm) along unit-speed rays, in mm units
        (multiply by 0.1 for a dimensionless Beer-law exponent)."""
        paths = self.material_path_lengths(origins, dirs)
        total = None
        for name, length in paths.items():
            mu = float(attenuation_at(self.material_table(name), energy_keV))
            term = mu * length
            total = term if total is None else total + term
        if total is None:
            total = np.zeros(np.atleast_2d(origins).shape[0])
        return total

    def values_at(self, pts: np.ndarray, energy_keV: float) -> np.ndarray:
        """Attenuation (1/cm) at (N, 3) points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        total = np.zeros(pts.shape[0])
        for prim in self.primitives:
            mu = float(attenuation_at(self.material_table(prim.material), energy_keV))
            total += (prim.density * mu) * _primitive_inside(prim, pts)
        return total


@dataclass(frozen=True)
class VoxelPhantom:
    """Voxelized attenuation map (1/cm) on an ImageGrid.

    data is (ny, nx) for single-slice grids or (nz, ny, nx) otherwise.
    """

    data: np.ndarray
    grid: ImageGrid

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        expect2d = self.grid.shape2d
        expect3d = self.grid.shape3d
        if data.shape == expect2d and self.grid.nz == 1:
            pass
        elif data.shape == expect3d:
            pass
        else:
            raise ValueError(f"data shape {data.shape} does not match grid "
                             f"{expect3d} (or {expect2d} for nz = 1)")
        object.__setattr__(self, "data", data)

    @property
    def is_volume(self) -> bool:
        return self.data.ndim == 3


def monochromatize(phantom: AnalyticPhantom, grid: ImageGrid, energy_keV: float,
                   supersample: int = 1) -> VoxelPhantom:
    """Rasterize the attenuation map mu(x; E) (1/cm) on a grid.

    ``supersample`` > 1 averages an n x n (x n for volumes) sub-grid per
    voxel, i.e. coverage-fraction antialiasing of primitive boundaries.
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    xs, ys, zs = grid.xs(), grid.ys(), grid.zs()
    dx = grid.voxel_size_mm
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5

    if grid.nz == 1:
        acc = np.zeros((grid.ny, grid.nx))
        z0 = zs[0]
        for oy in offs:
            for ox in offs:
                X, Y = np.meshgrid(xs + ox * dx, ys + oy * dx)
                pts = np.column_stack([X.ravel(), Y.ravel(),
                                       np.full(X.size, z0)])
                acc += phantom.values_at(pts, energy_keV).reshape(grid.ny, grid.nx)
        return VoxelPhantom(acc / (supersample**2), grid)

    acc3 = np.zeros(grid.shape3d)
    for oz in offs:
        for oy in offs:
            for ox in offs:
                Z, Y, X = np.meshgrid(zs + oz * dx, ys + oy * dx, xs + ox * dx,
                                      indexing="ij")
                pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
                acc3 += phantom.values_at(pts, energy_keV).reshape(grid.shape3d)
    return VoxelPhantom(acc3 / (supersample**3), grid)


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def write_spectrum_csv(spectrum: Spectrum, path) -> None:
    lines = ["energy_keV,weight"]
    for e, w in zip(spectrum.energies_keV, spectrum.weights):
        lines.append(f"{float(e)!r},{float(w)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_spectrum_csv(path) -> Spectrum:
    text = Path(path).read_text()
    rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not rows or rows[0].replace(" ", "") != "energy_keV,weight":
        raise ValueError("spectrum CSV must start with header 'energy_keV,weight'")
    e, w = [], []
    for ln in rows[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise ValueError(f"bad spectrum row: {ln!r}")
        e.append(float(parts[0]))
        w.append(float(parts[1]))
    return Spectrum(np.array(e), np.array(w))


def write_material_csv(material: MaterialTable, path) -> None:
    lines = ["energy_keV,mu_per_cm"]
    for e, mu in zip(material.energies_keV, material.mu_per_cm):
        lines.append(f"{float(e)!r},{float(mu)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_material_csv(path, name: Optional[str] = None) -> MaterialTable:
    p = Path(path)
    text = p.read_text()
    rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not rows or rows[0].replace(" ", "") != "energy_keV,mu_per_cm":
        raise ValueError("material CSV must start with header 'energy_keV,mu_per_cm'")
    e, mu = [], []
    for ln in rows[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise ValueError(f"bad material row: {ln!r}")
        e.append(float(parts[0]))
        mu.append(float(parts[1]))
    return MaterialTable(name=name or p.stem, energies_keV=np.array(e),
                         mu_per_cm=np.array(mu))


def write_phantom_file(phantom: AnalyticPhantom, path) -> None:
    """Write primitive records, one per line.

    disc cx cy r material [density]
    ball cx cy cz r material [density]
    ellipse cx cy a b angle material [density]
    """
    lines = ["# cbctsim phantom"]
    for p in phantom.primitives:
        dens = "" if p.density == 1.0 else f" {p.density!r}"
        if isinstance(p, Disc):
            lines.append(f"disc {p.cx!r} {p.cy!r} {p.radius!r} {p.material}{dens}")
        elif isinstance(p, Ball):
            lines.append(f"ball {p.cx!r} {p.cy!r} {p.cz!r} {p.radius!r} {p.material}{dens}")
        elif isinstance(p, Ellipse):
            lines.append(f"ellipse {p.cx!r} {p.cy!r} {p.a!r} {p.b!r} "
                         f"{p.angle_rad!r} {p.material}{dens}")
        else:
            raise ValueError(f"phantom files cannot describe {type(p).__name__}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_phantom_file(path, materials: Optional[Dict[str, MaterialTable]] = None
                      ) -> AnalyticPhantom:
    prims: List[Primitive] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind = tok[0].lower()
        try:
            if kind == "disc":
                dens = float(tok[5]) if len(tok) > 5 else 1.0
                prims.append(Disc(float(tok[1]), float(tok[2]), float(tok[3]),
                                  tok[4], dens))
            elif kind == "ball":
                dens = float(tok[6]) if len(tok) > 6 else 1.0
                prims.append(Ball(float(tok[1]), float(tok[2]), float(tok[3]),
                                  float(tok[4]), tok[5], dens))
            elif kind == "ellipse":
                dens = float(tok[7]) if len(tok) > 7 else 1.0
                prims.append(Ellipse(float(tok[1]), float(tok[2]), float(tok[3]),
                                     float(tok[4]), float(tok[5]), tok[6], dens))
            else:
                raise ValueError(f"unknown record '{kind}'")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"bad phantom record: {raw!r}") from exc
    return AnalyticPhantom(primitives=tuple(prims), materials=materials)
