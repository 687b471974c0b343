"""Scan geometries, image grids, and detector-domain resampling.

Conventions used across the package
-----------------------------------
* The rotation axis is the z axis; all distances are millimetres.
* For a view angle ``phi``, ``theta(phi) = (cos phi, sin phi)`` and
  ``theta_perp(phi) = (sin phi, -cos phi)``.
* A parallel-beam ray ``(theta, s)`` is the line ``{x : x . theta(angle) = s}``.
* The fan/cone source sits at ``-r * theta_perp(phi)`` (polar angle
  ``phi + pi/2``) at height z = 0 and moves on a circle of radius ``r``.
* Detector coordinates ``(u, v)`` live on the virtual detector plane through
  the rotation axis, spanned by ``theta(phi)`` (u) and z (v).  The physical
  detector at distance ``R`` sees these coordinates scaled by ``R / r``.

With these choices the fan ray through detector coordinate ``u`` coincides
with the parallel ray ``(phi + gamma_u, r * sin gamma_u)`` where
``u = r * tan gamma_u``, and a point ``x`` at height ``z`` projects to
``u = r * (x . theta) / U`` and ``v = z * r / U`` with
``U = r + x . theta_perp > 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

__all__ = [
    "ImageGrid",
    "ParallelGeometry",
    "FanGeometry",
    "ConeGeometry",
    "uniform_angles",
    "unit_vectors",
    "data_to_image_coords",
    "fan_to_parallel_rebin",
    "subsample_detector",
]


def uniform_angles(count: int, start: float = 0.0, span: float = 2.0 * np.pi) -> np.ndarray:
    """Uniform view angles ``start + k * span / count`` for ``k < count``."""
    if count < 1:
        raise ValueError("need at least one view angle")
    return start + np.arange(count) * (span / count)


def unit_vectors(phi):
    """Return ``theta(phi)`` and ``theta_perp(phi)`` as (..., 2) arrays."""
    phi = np.asarray(phi, dtype=float)
    theta = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    theta_perp = np.stack([np.sin(phi), -np.cos(phi)], axis=-1)
    return theta, theta_perp


def _centered_coords(count: int, spacing: float) -> np.ndarray:
    return (np.arange(count) - (count - 1) / 2.0) * spacing


@dataclass(frozen=True)
class ImageGrid:
    """Regular voxel grid centred on the rotation axis.

    ``origin_mm`` is the coordinate of the grid centre.  The in-plane origin
    must stay on the rotation axis; the z origin may be shifted for
    sub-volumes.
    """

    nx: int
    ny: int
    nz: int = 1
    voxel_size_mm: float = 1.0
    origin_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("grid dimensions must be positive")
        if not self.voxel_size_mm > 0:
            raise ValueError("voxel size must be positive")
        if self.origin_mm[0] != 0.0 or self.origin_mm[1] != 0.0:
            raise ValueError("grid must be centred on the rotation axis (origin x = y = 0)")

    def xs(self) -> np.ndarray:
        return _centered_coords(self.nx, self.voxel_size_mm) + self.origin_mm[0]

    def ys(self) -> np.ndarray:
        return _centered_coords(self.ny, self.voxel_size_mm) + self.origin_mm[1]

    def zs(self) -> np.ndarray:
        return _centered_coords(self.nz, self.voxel_size_mm) + self.origin_mm[2]

    @property
    def shape2d(self) -> Tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def shape3d(self) -> Tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    def extent_radius(self) -> float:
        """Radius of the circle enclosing the in-plane grid corners."""
        hx = self.nx * self.voxel_size_mm / 2.0
        hy = self.ny * self.voxel_size_mm / 2.0
        return float(np.hypot(hx, hy))


@dataclass(frozen=True)
class ParallelGeometry:
    """2D parallel-beam sampling: view angles x signed detector offsets s."""

    angles: np.ndarray
    det_count: int
    det_spacing_mm: float

    def __post_init__(self):
        object.__setattr__(self, "angles", np.atleast_1d(np.asarray(self.angles, dtype=float)))
        if self.det_count < 1 or not self.det_spacing_mm > 0:
            raise ValueError("invalid detector sampling")

    @property
    def n_views(self) -> int:
        return int(self.angles.size)

    def s_coords(self) -> np.ndarray:
        return _centered_coords(self.det_count, self.det_spacing_mm)


@dataclass(frozen=True)
class FanGeometry:
    """Fan-beam sampling on the virtual (axis-centred) flat detector.

    ``r_mm`` is the source-to-axis distance, ``R_mm`` the source-to-detector
    distance; detector u coordinates are stored pre-scaled to the virtual
    detector (physical coordinates are ``R/r`` times larger).
    """

    angles: np.ndarray
    det_count_u: int
    det_spacing_mm_u: float
    r_mm: float
    R_mm: float

    def __post_init__(self):
        object.__setattr__(self, "angles", np.atleast_1d(np.asarray(self.angles, dtype=float)))
        if self.det_count_u < 1 or not self.det_spacing_mm_u > 0:
            raise ValueError("invalid detector sampling")
        if not (0 < self.r_mm <= self.R_mm):
            raise ValueError("need 0 < r_mm <= R_mm")

    @property
    def n_views(self) -> int:
        return int(self.angles.size)

    def u_coords(self) -> np.ndarray:
        return _centered_coords(self.det_count_u, self.det_spacing_mm_u)

    def source_positions(self) -> np.ndarray:
        """(n_views, 2) source points at polar angle phi + pi/2."""
        _, theta_perp = unit_vectors(self.angles)
        return -self.r_mm * theta_perp

    def fov_radius(self) -> float:
        """Radius of the fully sampled field of view."""
        umax = float(np.max(np.abs(self.u_coords())))
        return self.r_mm * umax / np.hypot(self.r_mm, umax)


@dataclass(frozen=True)
class ConeGeometry:
    """Circular-trajectory cone-beam sampling with optional detector offset.

    ``offset_fraction`` shifts the detector along +u by that fraction of the
    detector width; 0.5 means each view covers only half of the extended
    field of view (the opposite view supplies the other half).  The v grid is
    symmetric before any offset is applied (offsets act on u only).
    """

    angles: np.ndarray
    det_count_u: int
    det_spacing_mm_u: float
    det_count_v: int
    det_spacing_mm_v: float
    r_mm: float
    R_mm: float
    offset_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "angles", np.atleast_1d(np.asarray(self.angles, dtype=float)))
        if min(self.det_count_u, self.det_count_v) < 1:
            raise ValueError("invalid detector sampling")
        if not (self.det_spacing_mm_u > 0 and self.det_spacing_mm_v > 0):
            raise ValueError("invalid detector spacing")
        if not (0 < self.r_mm <= self.R_mm):
            raise ValueError("need 0 < r_mm <= R_mm")
        if not 0.0 <= self.offset_fraction <= 0.5:
            raise ValueError("offset_fraction must lie in [0, 0.5]")

    @property
    def n_views(self) -> int:
        return int(self.angles.size)

    def detector_width(self) -> float:
        return self.det_count_u * self.det_spacing_mm_u

    def u_coords(self) -> np.ndarray:
        shift = self.offset_fraction * self.detector_width()
        return _centered_coords(self.det_count_u, self.det_spacing_mm_u) + shift

    def v_coords(self) -> np.ndarray:
        return _centered_coords(self.det_count_v, self.det_spacing_mm_v)

    def source_positions(self) -> np.ndarray:
        """(n_views, 3) source points (z = 0)."""
        _, theta_perp = unit_vectors(self.angles)
        pts = -self.r_mm * theta_perp
        return np.concatenate([pts, np.zeros((pts.shape[0], 1))], axis=1)

    def fov_radius(self) -> float:
        """Radius of the cylinder every single view covers in u.

        Deliberately conservative for offset detectors: with a large
        ``offset_fraction`` a single view sees little of one side, so
        this shrinks toward zero even though a full-circle scan covers
        the extended field of view in union.
        """
        u = self.u_coords()
        usym = float(min(abs(u[0]), abs(u[-1])))
        return self.r_mm * usym / np.hypot(self.r_mm, usym)

    def midplane_fan(self) -> FanGeometry:
        """Fan geometry of the central detector row (v = 0 plane)."""
        if self.offset_fraction != 0.0:
            raise ValueError("midplane fan extraction assumes a centred detector")
        return FanGeometry(
            angles=self.angles,
            det_count_u=self.det_count_u,
            det_spacing_mm_u=self.det_spacing_mm_u,
            r_mm=self.r_mm,
            R_mm=self.R_mm,
        )


def data_to_image_coords(geom, points, phi):
    """Project 3D points onto the virtual detector for view angle ``phi``.

    Parameters
    ----------
    geom : FanGeometry or ConeGeometry
        Supplies the source radius ``r_mm``.
    points : (N, 3) array
        Image-space points in mm (z ignored for fan geometries only in the
        sense that v is still returned).
    phi : float
        View angle in radians.

    Returns
    -------
    u, v, U : arrays of shape (N,)
        Virtual-detector coordinates and the source-side distance
        ``U = r + x . theta_perp``.  Points with ``U <= 0`` (behind the
        source) raise ``ValueError``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    r = geom.r_mm
    theta, theta_perp = unit_vectors(float(phi))
    U = r + pts[:, :2] @ theta_perp
    if np.any(U <= 0):
        raise ValueError("point on or behind the source plane (U <= 0)")
    u = r * (pts[:, :2] @ theta) / U
    v = pts[:, 2] * r / U
    return u, v, U


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    """Wrap angles into [0, 2*pi)."""
    return np.mod(a, 2.0 * np.pi)


def fan_to_parallel_rebin(sino, det_count: Optional[int] = None,
                          det_spacing_mm: Optional[float] = None):
    """Resample fan-beam data onto a parallel (theta, s) grid.

    The fan ray at (phi, u) equals the parallel ray at
    ``theta = phi + gamma_u`` and ``s = r * sin gamma_u`` with
    ``u = r * tan gamma_u``.  The inverse map used here is
    ``gamma = arcsin(s / r)``, ``phi = theta - gamma``, ``u = r * tan gamma``,
    with bilinear interpolation on the (phi, u) grid.  Output cells whose u
    falls outside the detector, or which touch missing input cells, are
    flagged missing and zero-filled; no extrapolation is performed.

    Requires fan data covering phi in [0, 2*pi) on a uniform angle grid.
    """
    from .projector import Sinogram  # local import to avoid a module cycle

    geom = sino.geometry
    if not isinstance(geom, FanGeometry):
        raise TypeError("fan_to_parallel_rebin expects a fan sinogram")
    angles = geom.angles
    n_phi = angles.size
    dphi = 2.0 * np.pi / n_phi
    steps = np.diff(angles)
    if not (np.allclose(steps, steps[0]) and np.isclose(steps[0], dphi)):
        raise ValueError("rebinning requires a uniform full-circle angle grid")

    u = geom.u_coords()
    r = geom.r_mm
    s_max = geom.fov_radius()
    if det_count is None:
        det_count = geom.det_count_u
    if det_spacing_mm is None:
        det_spacing_mm = 2.0 * s_max / det_count

    par = ParallelGeometry(angles=angles.copy(), det_count=det_count,
                           det_spacing_mm=det_spacing_mm)
    s = par.s_coords()

    data = np.asarray(sino.data, dtype=np.float64)
    missing_in = sino.missing if sino.missing is not None else np.zeros(data.shape, dtype=bool)

    out = np.zeros((n_phi, det_count), dtype=np.float64)
    out_missing = np.zeros_like(out, dtype=bool)

    inside = np.abs(s) < r
    gamma = np.full(det_count, np.nan)
    gamma[inside] = np.arcsin(s[inside] / r)
    u_tgt = np.full(det_count, np.nan)
    u_tgt[inside] = r * np.tan(gamma[inside])

    # fractional index on the uniform u grid
    fu = (u_tgt - u[0]) / geom.det_spacing_mm_u
    iu0 = np.floor(fu).astype(np.int64, copy=False)
    wu = fu - iu0
    u_ok = inside & (fu >= 0) & (fu <= geom.det_count_u - 1)
    iu0c = np.clip(iu0, 0, geom.det_count_u - 2)
    # keep exact right-edge hits addressable
    at_edge = u_ok & (iu0 == geom.det_count_u - 1)
    wu = np.where(at_edge, 1.0, wu)
    iu0 = np.where(u_ok, np.minimum(iu0, geom.det_count_u - 2), iu0c)

    for it in range(n_phi):
        theta = angles[it]
        phi_tgt = theta - gamma
        f_phi = _wrap_angle(phi_tgt - angles[0]) / dphi
        ip0 = np.floor(f_phi).astype(np.int64)
        wp = f_phi - ip0
        ip0 = np.mod(ip0, n_phi)
        ip1 = np.mod(ip0 + 1, n_phi)

        valid = u_ok & np.isfinite(f_phi)
        iu = np.where(valid, iu0, 0)
        p00 = data[ip0, iu]
        p01 = data[ip0, iu + 1]
        p10 = data[ip1, iu]
        p11 = data[ip1, iu + 1]
        val = ((1 - wp) * ((1 - wu) * p00 + wu * p01)
               + wp * ((1 - wu) * p10 + wu * p11))

        m00 = missing_in[ip0, iu]
        m01 = missing_in[ip0, iu + 1]
        m10 = missing_in[ip1, iu]
        m11 = missing_in[ip1, iu + 1]
        touched = m00 | m01 | m10 | m11

        out[it] = np.where(valid, val, 0.0)
        out_missing[it] = ~valid | touched

    out[out_missing] = 0.0
    return Sinogram(data=out.astype(np.float32), geometry=par, missing=out_missing)


def subsample_detector(sino, offset_fraction: float, u_crop: float):
    """Simulate a narrow, offset detector from a full cone-beam sinogram.

    The retained window on the u axis has width ``u_crop`` (mm) and is
    centred at ``offset_fraction * u_crop`` (the offset convention used by
    ``ConeGeometry``).  The result keeps the full input grid: cells outside
    the window are zero-filled and flagged in the missing-data mask, so a
    zero-filled embedding of the output is idempotent on the retained region.
    """
    from .projector import Sinogram  # local import to avoid a module cycle

    geom = sino.geometry
    if not isinstance(geom, ConeGeometry):
        raise TypeError("subsample_detector expects a cone sinogram")
    if not 0.0 <= offset_fraction <= 0.5:
        raise ValueError("offset_fraction must lie in [0, 0.5]")
    if not 0 < u_crop <= geom.detector_width():
        raise ValueError("u_crop must be positive and at most the detector width")

    u = geom.u_coords()
    center = offset_fraction * u_crop
    lo, hi = center - u_crop / 2.0, center + u_crop / 2.0
    keep = (u >= lo - 1e-12) & (u <= hi + 1e-12)

    data = np.array(sino.data, copy=True)
    missing = (np.array(sino.missing, copy=True) if sino.missing is not None
               else np.zeros(data.shape, dtype=bool))
    drop = ~keep
    data[..., drop] = 0.0
    missing[..., drop] = True
    return Sinogram(data=data, geometry=geom, missing=missing)
