"""Forward models: line integrals, polychromatic transmission, noise, traces.

All projectors share the geometry conventions of :mod:`cbctsim.geometry`.
Analytic phantoms are integrated with closed-form chord lengths (the oracle
path); voxel phantoms with exact ray/grid intersection lengths (incremental
traversal) or, optionally, bilinear sampling for smooth images.

Units: path lengths are mm.  ``polychromatic_project`` converts 1/cm
attenuation to a dimensionless Beer-law exponent (factor 0.1 * mm).
Monochromatic ``radon_2d``/``cone_beam_transform`` return value * mm
integrals and, for analytic phantoms with ``energy_keV=None``, integrate the
primitive density field directly (a unit-density disc yields its chord
length).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .geometry import (ConeGeometry, FanGeometry, ImageGrid, ParallelGeometry,
                       unit_vectors)
from .materials import (AnalyticPhantom, Spectrum, VoxelPhantom, attenuation_at)

__all__ = [
    "Sinogram",
    "NoiseConfig",
    "radon_2d",
    "fan_transform",
    "cone_beam_transform",
    "polychromatic_project",
    "add_poisson_noise",
    "metal_trace",
    "alvarez_project",
    "photoelectric_energy_factor",
    "compton_energy_factor",
]

MM_PER_CM = 10.0
_EPS = 1e-12


@dataclass
class Sinogram:
    """Measured or simulated projection data plus its acquisition geometry.

    data layout: parallel/fan (n_views, n_det); cone (n_views, n_v, n_u).
    ``missing`` marks cells that were never measured (offset detectors,
    rebinning gaps); missing cells hold zeros and must not be interpreted.
    """

    data: np.ndarray
    geometry: Union[ParallelGeometry, FanGeometry, ConeGeometry]
    missing: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        expected = self.expected_shape(self.geometry)
        if self.data.shape != expected:
            raise ValueError(f"data shape {self.data.shape}, geometry wants {expected}")
        if self.missing is not None:
            self.missing = np.asarray(self.missing, dtype=bool)
            if self.missing.shape != expected:
                raise ValueError("missing mask shape mismatch")

    @staticmethod
    def expected_shape(geom) -> Tuple[int, ...]:
        if isinstance(geom, ParallelGeometry):
            return (geom.n_views, geom.det_count)
        if isinstance(geom, FanGeometry):
            return (geom.n_views, geom.det_count_u)
        if isinstance(geom, ConeGeometry):
            return (geom.n_views, geom.det_count_v, geom.det_count_u)
        raise TypeError(f"unknown geometry {type(geom)!r}")

    def copy(self) -> "Sinogram":
        return Sinogram(self.data.copy(), self.geometry,
                        None if self.missing is None else self.missing.copy())

    def valid_mask(self) -> np.ndarray:
        if self.missing is None:
            return np.ones(self.data.shape, dtype=bool)
        return ~self.missing


@dataclass(frozen=True)
class NoiseConfig:
    """Photon-counting noise model: incident count and RNG seed."""
    photons_per_ray: float
    seed: int = 0

    def __post_init__(self):
        if not self.photons_per_ray > 0:
            raise ValueError("photons_per_ray must be positive")


# ---------------------------------------------------------------------------
# ray generation
# ---------------------------------------------------------------------------

def rays_for_geometry(geom) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...]]:
    """Unit-speed rays (origins, dirs, data_shape) for every sinogram cell."""
    if isinstance(geom, ParallelGeometry):
        s = geom.s_coords()
        theta, theta_perp = unit_vectors(geom.angles)
        origins = (theta[:, None, :] * s[None, :, None])
        dirs = np.broadcast_to(theta_perp[:, None, :], origins.shape)
        origins3 = np.concatenate([origins, np.zeros(origins.shape[:2] + (1,))], axis=2)
        dirs3 = np.concatenate([dirs, np.zeros(dirs.shape[:2] + (1,))], axis=2)
        shape = (geom.n_views, geom.det_count)
        return origins3.reshape(-1, 3), dirs3.reshape(-1, 3), shape
    if isinstance(geom, FanGeometry):
        u = geom.u_coords()
        theta, _ = unit_vectors(geom.angles)
        src = geom.source_positions()
        det = theta[:, None, :] * u[None, :, None]
        d = det - src[:, None, :]
        d /= np.linalg.norm(d, axis=2, keepdims=True)
        origins = np.broadcast_to(src[:, None, :], d.shape)
        origins3 = np.concatenate([origins, np.zeros(d.shape[:2] + (1,))], axis=2)
        dirs3 = np.concatenate([d, np.zeros(d.shape[:2] + (1,))], axis=2)
        shape = (geom.n_views, geom.det_count_u)
        return origins3.reshape(-1, 3), dirs3.reshape(-1, 3), shape
    if isinstance(geom, ConeGeometry):
        u = geom.u_coords()
        v = geom.v_coords()
        theta, _ = unit_vectors(geom.angles)
        src = geom.source_positions()  # (n, 3)
        det_xy = theta[:, None, None, :] * u[None, None, :, None]
        det_xy = np.broadcast_to(det_xy, (geom.n_views, v.size, u.size, 2))
        det_z = np.broadcast_to(v[None, :, None, None],
                                (geom.n_views, v.size, u.size, 1))
        det = np.concatenate([det_xy, det_z], axis=3)
        d = det - src[:, None, None, :]
        d /= np.linalg.norm(d, axis=3, keepdims=True)
        origins = np.broadcast_to(src[:, None, None, :], d.shape)
        shape = (geom.n_views, geom.det_count_v, geom.det_count_u)
        return origins.reshape(-1, 3), d.reshape(-1, 3), shape
    raise TypeError(f"unknown geometry {type(geom)!r}")


# ---------------------------------------------------------------------------
# voxel ray tracing
# ---------------------------------------------------------------------------

def _slab_range(o, d, lo, hi):
    """Per-axis entry/exit parameters of axis-aligned slabs."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    inside = (o >= lo) & (o <= hi)
    degenerate = np.abs(d) < _EPS
    tlo = np.where(degenerate, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(degenerate, np.where(inside, np.inf, -np.inf), thi)
    return tlo, thi


def siddon_segments_2d(origins: np.ndarray, dirs: np.ndarray, grid: ImageGrid):
    """Exact (ray, pixel, length) triplets for in-plane rays over a 2D grid.

    origins/dirs are (N, 2)  (unit directions).  Returns
    (ray_index, flat_pixel_index, length_mm) int64/int64/float64 arrays; the
    flat index is row-major over (ny, nx).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n = origins.shape[0]
    dx = grid.voxel_size_mm
    x0 = grid.xs()[0] - dx / 2.0
    y0 = grid.ys()[0] - dx / 2.0
    x1 = x0 + grid.nx * dx
    y1 = y0 + grid.ny * dx

    txlo, txhi = _slab_range(origins[:, 0], dirs[:, 0], x0, x1)
    tylo, tyhi = _slab_range(origins[:, 1], dirs[:, 1], y0, y1)
    t_in = np.maximum(txlo, tylo)
    t_out = np.minimum(txhi, tyhi)
    hit = t_out > t_in
    t_in = np.where(hit, t_in, 0.0)
    t_out = np.where(hit, t_out, 0.0)

    xplanes = x0 + np.arange(grid.nx + 1) * dx
    yplanes = y0 + np.arange(grid.ny + 1) * dx
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = (xplanes[None, :] - origins[:, 0:1]) / dirs[:, 0:1]
        ty = (yplanes[None, :] - origins[:, 1:2]) / dirs[:, 1:2]
    cand = np.concatenate([tx, ty, t_in[:, None], t_out[:, None]], axis=1)
    cand = np.where(np.isfinite(cand), cand, t_in[:, None])
    cand = np.clip(cand, t_in[:, None], t_out[:, None])
    cand.sort(axis=1)

    seg = np.diff(cand, axis=1)
    tmid = 0.5 * (cand[:, :-1] + cand[:, 1:])
    px = origins[:, 0:1] + tmid * dirs[:, 0:1]
    py = origins[:, 1:2] + tmid * dirs[:, 1:2]
    ix = np.floor((px - x0) / dx).astype(np.int64)
    iy = np.floor((py - y0) / dx).astype(np.int64)
    ok = (seg > _EPS) & (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
    ray_idx = np.broadcast_to(np.arange(n)[:, None], seg.shape)
    flat = iy * grid.nx + ix
    return ray_idx[ok], flat[ok], seg[ok]


def _integrate_siddon_2d(image: np.ndarray, grid: ImageGrid,
                         origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    rays, flat, seg = siddon_segments_2d(origins, dirs, grid)
    out = np.zeros(origins.shape[0])
    np.add.at(out, rays, image.ravel()[flat] * seg)
    return out


def siddon_segments_3d(origins: np.ndarray, dirs: np.ndarray, grid: ImageGrid):
    """3D analogue of :func:`siddon_segments_2d` (flat index over nz,ny,nx)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n = origins.shape[0]
    dx = grid.voxel_size_mm
    x0 = grid.xs()[0] - dx / 2.0
    y0 = grid.ys()[0] - dx / 2.0
    z0 = grid.zs()[0] - dx / 2.0
    x1, y1, z1 = x0 + grid.nx * dx, y0 + grid.ny * dx, z0 + grid.nz * dx

    txlo, txhi = _slab_range(origins[:, 0], dirs[:, 0], x0, x1)
    tylo, tyhi = _slab_range(origins[:, 1], dirs[:, 1], y0, y1)
    tzlo, tzhi = _slab_range(origins[:, 2], dirs[:, 2], z0, z1)
    t_in = np.maximum(np.maximum(txlo, tylo), tzlo)
    t_out = np.minimum(np.minimum(txhi, tyhi), tzhi)
    hit = t_out > t_in
    t_in = np.where(hit, t_in, 0.0)
    t_out = np.where(hit, t_out, 0.0)

    planes = [x0 + np.arange(grid.nx + 1) * dx,
              y0 + np.arange(grid.ny + 1) * dx,
              z0 + np.arange(grid.nz + 1) * dx]
    cands = []
    for ax, pl in enumerate(planes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl[None, :] - origins[:, ax:ax + 1]) / dirs[:, ax:ax + 1]
        cands.append(t)
    cand = np.concatenate(cands + [t_in[:, None], t_out[:, None]], axis=1)
    cand = np.where(np.isfinite(cand), cand, t_in[:, None])
    cand = np.clip(cand, t_in[:, None], t_out[:, None])
    cand.sort(axis=1)

    seg = np.diff(cand, axis=1)
    tmid = 0.5 * (cand[:, :-1] + cand[:, 1:])
    ix = np.floor((origins[:, 0:1] + tmid * dirs[:, 0:1] - x0) / dx).astype(np.int64)
    iy = np.floor((origins[:, 1:2] + tmid * dirs[:, 1:2] - y0) / dx).astype(np.int64)
    iz = np.floor((origins[:, 2:3] + tmid * dirs[:, 2:3] - z0) / dx).astype(np.int64)
    ok = ((seg > _EPS) & (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
          & (iz >= 0) & (iz < grid.nz))
    ray_idx = np.broadcast_to(np.arange(n)[:, None], seg.shape)
    flat = (iz * grid.ny + iy) * grid.nx + ix
    return ray_idx[ok], flat[ok], seg[ok]


def _bilinear_sample(image: np.ndarray, grid: ImageGrid,
                     px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Bilinear image samples at mm positions; zero outside the grid."""
    dx = grid.voxel_size_mm
    fx = (px - grid.xs()[0]) / dx
    fy = (py - grid.ys()[0]) / dx
    ix = np.floor(fx).astype(np.int64)
    iy = np.floor(fy).astype(np.int64)
    wx = fx - ix
    wy = fy - iy
    out = np.zeros_like(px)
    for oy in (0, 1):
        for ox in (0, 1):
            gx = ix + ox
            gy = iy + oy
            inside = (gx >= 0) & (gx < grid.nx) & (gy >= 0) & (gy < grid.ny)
            w = (wx if ox else 1 - wx) * (wy if oy else 1 - wy)
            vals = np.zeros_like(px)
            vals[inside] = image[gy[inside], gx[inside]]
            out += w * vals
    return out


def _integrate_joseph_2d(image: np.ndarray, grid: ImageGrid,
                         origins: np.ndarray, dirs: np.ndarray,
                         step_fraction: float = 0.5) -> np.ndarray:
    """Line integrals of the bilinear image model, fixed-step midpoint rule."""
    dx = grid.voxel_size_mm
    x0 = grid.xs()[0] - dx / 2.0
    y0 = grid.ys()[0] - dx / 2.0
    x1, y1 = x0 + grid.nx * dx, y0 + grid.ny * dx
    txlo, txhi = _slab_range(origins[:, 0], dirs[:, 0], x0, x1)
    tylo, tyhi = _slab_range(origins[:, 1], dirs[:, 1], y0, y1)
    t_in = np.maximum(txlo, tylo)
    t_out = np.minimum(txhi, tyhi)
    hit = t_out > t_in
    t_in = np.where(hit, t_in, 0.0)
    t_out = np.where(hit, t_out, 0.0)

    step = dx * step_fraction
    n_steps = int(np.ceil(np.max(t_out - t_in) / step)) if origins.size else 0
    out = np.zeros(origins.shape[0])
    if n_steps == 0:
        return out
    k = np.arange(n_steps)
    t = t_in[:, None] + (k[None, :] + 0.5) * step
    live = t < t_out[:, None]
    px = origins[:, 0:1] + t * dirs[:, 0:1]
    py = origins[:, 1:2] + t * dirs[:, 1:2]
    vals = _bilinear_sample(image, grid, px.ravel(), py.ravel()).reshape(t.shape)
    return np.sum(vals * live, axis=1) * step


# ---------------------------------------------------------------------------
# projectors
# ---------------------------------------------------------------------------

def _project_analytic(phantom: AnalyticPhantom, geom, energy_keV):
    origins, dirs, shape = rays_for_geometry(geom)
    if energy_keV is None:
        total = None
        for prim in phantom.primitives:
            from .materials import _primitive_chords
            term = prim.density * _primitive_chords(prim, origins, dirs)
            total = term if total is None else total + term
        vals = total if total is not None else np.zeros(origins.shape[0])
    else:
        vals = phantom.line_integral(origins, dirs, energy_keV)
    return vals.reshape(shape)


def _project_voxel_2d(vox: VoxelPhantom, geom, method: str):
    if vox.is_volume:
        raise ValueError("2D projection expects a single-slice voxel phantom")
    origins, dirs, shape = rays_for_geometry(geom)
    if method == "siddon":
        integrate = _integrate_siddon_2d
    elif method == "joseph":
        integrate = _integrate_joseph_2d
    else:
        raise ValueError(f"unknown ray-tracing method {method!r}")
    # bound peak memory: per-ray crossing lists scale with the grid size
    chunk = max(256, 2_000_000 // (vox.grid.nx + vox.grid.ny))
    vals = np.empty(origins.shape[0])
    for lo in range(0, origins.shape[0], chunk):
        hi = lo + chunk
        vals[lo:hi] = integrate(vox.data, vox.grid, origins[lo:hi, :2],
                                dirs[lo:hi, :2])
    return vals.reshape(shape)


def radon_2d(obj, geom: ParallelGeometry, energy_keV: Optional[float] = None,
             method: str = "siddon") -> Sinogram:
    """Parallel-beam transform (value * mm line integrals).

    obj: AnalyticPhantom (closed-form chords; density field if
    ``energy_keV`` is None, else mu(E)-weighted) or VoxelPhantom
    (``method`` 'siddon' for exact piecewise-constant chords, 'joseph' for
    bilinear sampling of smooth images).
    """
    if not isinstance(geom, ParallelGeometry):
        raise TypeError("radon_2d expects a ParallelGeometry")
    if isinstance(obj, AnalyticPhantom):
        data = _project_analytic(obj, geom, energy_keV)
    elif isinstance(obj, VoxelPhantom):
        data = _project_voxel_2d(obj, geom, method)
    else:
        raise TypeError("obj must be AnalyticPhantom or VoxelPhantom")
    return Sinogram(data=data, geometry=geom)


def fan_transform(obj, geom: FanGeometry, energy_keV: Optional[float] = None,
                  method: str = "siddon") -> Sinogram:
    """Fan-beam transform on the virtual detector (value * mm integrals)."""
    if not isinstance(geom, FanGeometry):
        raise TypeError("fan_transform expects a FanGeometry")
    if isinstance(obj, AnalyticPhantom):
        data = _project_analytic(obj, geom, energy_keV)
    elif isinstance(obj, VoxelPhantom):
        data = _project_voxel_2d(obj, geom, method)
    else:
        raise TypeError("obj must be AnalyticPhantom or VoxelPhantom")
    return Sinogram(data=data, geometry=geom)


def cone_beam_transform(obj, geom: ConeGeometry,
                        energy_keV: Optional[float] = None) -> Sinogram:
    """Cone-beam transform over the circular trajectory (value * mm).

    The v = 0 detector row reproduces the fan transform of the midplane.
    """
    if not isinstance(geom, ConeGeometry):
        raise TypeError("cone_beam_transform expects a ConeGeometry")
    if isinstance(obj, AnalyticPhantom):
        data = _project_analytic(obj, geom, energy_keV)
    elif isinstance(obj, VoxelPhantom):
        origins, dirs, shape = rays_for_geometry(geom)
        vol = obj.data if obj.is_volume else obj.data[None, :, :]
        grid = obj.grid
        out = np.zeros(origins.shape[0])
        rays_per_view = shape[1] * shape[2]
        for view in range(shape[0]):
            sl = slice(view * rays_per_view, (view + 1) * rays_per_view)
            rid, flat, seg = siddon_segments_3d(origins[sl], dirs[sl], grid)
            acc = np.zeros(rays_per_view)
            np.add.at(acc, rid, vol.ravel()[flat] * seg)
            out[sl] = acc
        data = out.reshape(shape)
    else:
        raise TypeError("obj must be AnalyticPhantom or VoxelPhantom")
    return Sinogram(data=data, geometry=geom)


def polychromatic_project(phantom: AnalyticPhantom, geom, spectrum: Spectrum
                          ) -> Sinogram:
    """Beer-law log-transmission under a discrete spectrum.

    P = -ln sum_k w_k exp(-integral of mu(., E_k) in 1/cm over the ray in cm).
    Requires a normalized spectrum (point masses summing to 1).
    """
    if not spectrum.is_normalized():
        raise ValueError("spectrum weights must sum to 1 (see normalize_spectrum)")
    origins, dirs, shape = rays_for_geometry(geom)
    paths = phantom.material_path_lengths(origins, dirs)  # mm, density-weighted
    mats = {name: phantom.material_table(name) for name in paths}
    trans = np.zeros(origins.shape[0])
    for e, w in zip(spectrum.energies_keV, spectrum.weights):
        expo = np.zeros(origins.shape[0])
        for name, length in paths.items():
            mu = float(attenuation_at(mats[name], e))
            expo += (mu / MM_PER_CM) * length
        trans += w * np.exp(-expo)
    data = -np.log(trans).reshape(shape)
    return Sinogram(data=data, geometry=geom)


def add_poisson_noise(sino: Sinogram, noise: NoiseConfig) -> Sinogram:
    """Photon-counting noise: N ~ Poisson(I0 * exp(-P)), out = -ln(max(N, 1/2)/I0).

    Deterministic under a fixed seed; missing cells are left untouched.
    """
    rng = np.random.default_rng(noise.seed)
    data = np.array(sino.data, dtype=np.float64, copy=True)
    valid = sino.valid_mask()
    expected = noise.photons_per_ray * np.exp(-data[valid])
    counts = rng.poisson(expected).astype(np.float64)
    data[valid] = -np.log(np.maximum(counts, 0.5) / noise.photons_per_ray)
    return Sinogram(data=data, geometry=sino.geometry,
                    missing=None if sino.missing is None else sino.missing.copy())


def metal_trace(metal, geom) -> np.ndarray:
    """Boolean sinogram-shaped mask: rays meeting the metal region.

    ``metal`` may be an AnalyticPhantom, an object with ``.primitives``, or an
    iterable of primitives.  A ray belongs to the trace exactly when its
    intersection with the region has positive length.
    """
    prims = getattr(metal, "primitives", metal)
    origins, dirs, shape = rays_for_geometry(geom)
    from .materials import _primitive_chords
    mask = np.zeros(origins.shape[0], dtype=bool)
    for prim in prims:
        mask |= _primitive_chords(prim, origins, dirs) > 0.0
    return mask.reshape(shape)


def photoelectric_energy_factor(e0_keV: float):
    """p(E) ~ E^-3, normalized to 1 at the reference energy."""
    def p(e_keV):
        return (np.asarray(e_keV, dtype=float) / e0_keV) ** -3
    return p


def compton_energy_factor(e0_keV: float):
    """q(E) = Klein-Nishina cross section, normalized to 1 at the reference."""
    from .materials import _klein_nishina_sigma
    ref = _klein_nishina_sigma(np.array([e0_keV]))[0]
    def q(e_keV):
        return _klein_nishina_sigma(np.asarray(e_keV, dtype=float)) / ref
    return q


def alvarez_project(psi_p, psi_q, geom, spectrum: Spectrum,
                    p_of_E=None, q_of_E=None, e0_keV: float = 80.0,
                    method: str = "siddon") -> Sinogram:
    """Two-basis spectral forward model.

    P = -ln sum_k w_k exp(-p(E_k) * L[psi_p] - q(E_k) * L[psi_q]) where L is
    the 1/cm-to-dimensionless line integral of each basis image (analytic
    phantom density fields or voxel phantoms).  Defaults: p(E) ~ E^-3 and
    q(E) = Klein-Nishina shape, both 1 at ``e0_keV``.
    """
    if not spectrum.is_normalized():
        raise ValueError("spectrum weights must sum to 1 (see normalize_spectrum)")
    if p_of_E is None:
        p_of_E = photoelectric_energy_factor(e0_keV)
    if q_of_E is None:
        q_of_E = compton_energy_factor(e0_keV)

    def basis_integral(obj):
        if obj is None:
            return 0.0
        if isinstance(obj, AnalyticPhantom):
            return _project_analytic(obj, geom, None) / MM_PER_CM
        if isinstance(obj, VoxelPhantom):
            if isinstance(geom, ConeGeometry):
                return cone_beam_transform(obj, geom).data / MM_PER_CM
            if isinstance(geom, FanGeometry):
                return fan_transform(obj, geom, method=method).data / MM_PER_CM
            return radon_2d(obj, geom, method=method).data / MM_PER_CM
        raise TypeError("basis images must be AnalyticPhantom or VoxelPhantom")

    lp = basis_integral(psi_p)
    lq = basis_integral(psi_q)
    shape = Sinogram.expected_shape(geom)
    trans = np.zeros(shape, dtype=np.float64)
    for e, w in zip(spectrum.energies_keV, spectrum.weights):
        trans += w * np.exp(-(float(p_of_E(e)) * lp + float(q_of_E(e)) * lq))
    return Sinogram(data=-np.log(trans), geometry=geom)
