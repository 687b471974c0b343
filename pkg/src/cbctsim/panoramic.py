"""Panoramic image generation from a reconstructed volume.

The dental workflow: threshold the volume to a bone mask, split it into
upper and lower jaws, fit a smooth reference curve through each dental
arch, then integrate the volume along the curve normals to unroll the
arch into a flat 2D image.  Integration across the arch averages out
in-plane streaks, which is what makes these images useful as priors even
when the axial slices are corrupted.

Coordinates are mm throughout; masks and volumes follow the (nz, ny, nx)
layout of VoxelPhantom (plain (ny, nx) for single-slice grids).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.signal import find_peaks

from .geometry import ImageGrid

__all__ = [
    "ArchCurve",
    "JawSplit",
    "PanoramicImage",
    "connected_components",
    "fit_arch_curve",
    "otsu_threshold",
    "panoramic_project",
    "split_jaws",
]


def otsu_threshold(values):
    """Histogram threshold maximizing between-class variance.

    Uses a 256-bin histogram over the value range.  Ties are broken
    toward the lowest maximizing bin edge.  Returns ``(threshold,
    binary)`` where ``binary = values >= threshold``.
    """
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError("values must be finite")
    if lo == hi:
        raise ValueError("constant input has no threshold")
    counts, edges = np.histogram(values.ravel(), bins=256, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = counts / counts.sum()
    mass = w * centers
    w0 = np.cumsum(w)[:-1]
    w1 = 1.0 - w0
    m0 = np.cumsum(mass)[:-1]
    m_total = mass.sum()
    valid = (w0 > 0) & (w1 > 0)
    sigma_b = np.zeros(255)
    mu0 = np.divide(m0, w0, out=np.zeros(255), where=valid)
    mu1 = np.divide(m_total - m0, w1, out=np.zeros(255), where=valid)
    sigma_b[valid] = (w0 * w1 * (mu0 - mu1) ** 2)[valid]
    k = int(np.argmax(sigma_b))
    threshold = float(edges[k + 1])
    return threshold, values >= threshold


def connected_components(binary):
    """Label a binary image with face connectivity, largest first.

    Returns ``(labels, sizes)``: labels run 1..n ordered by decreasing
    voxel count (0 is background), sizes is the matching count array.
    """
    binary = np.asarray(binary).astype(bool)
    structure = ndimage.generate_binary_structure(binary.ndim, 1)
    raw, n = ndimage.label(binary, structure=structure)
    if n == 0:
        return np.zeros(binary.shape, dtype=np.int32), np.zeros(0, dtype=int)
    counts = np.bincount(raw.ravel())[1:]
    order = np.argsort(-counts, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], counts[order]


@dataclass(frozen=True)
class JawSplit:
    """Axial split of a bone mask into lower (below) and upper (above)."""

    z_index: int
    lower_mask: np.ndarray
    upper_mask: np.ndarray

    def __post_init__(self):
        if (self.lower_mask & self.upper_mask).any():
            raise ValueError("jaw masks overlap")


def split_jaws(bone_mask) -> JawSplit:
    """Split a 3D bone mask at the waist of its axial area profile.

    The per-slice voxel count typically shows two humps, one per jaw;
    the split plane is the minimum between the two tallest peaks.
    """
    bone_mask = np.asarray(bone_mask).astype(bool)
    if bone_mask.ndim != 3:
        raise ValueError("split_jaws expects a 3D mask")
    profile = bone_mask.sum(axis=(1, 2)).astype(float)
    peaks, props = find_peaks(profile, height=0.0)
    if len(peaks) < 2:
        raise ValueError("area profile has fewer than two peaks; cannot "
                         "locate the jaw gap")
    top2 = peaks[np.argsort(-props["peak_heights"], kind="stable")[:2]]
    z_lo, z_hi = int(top2.min()), int(top2.max())
    z_split = z_lo + int(np.argmin(profile[z_lo:z_hi + 1]))
    lower = bone_mask.copy()
    lower[z_split:] = False
    upper = bone_mask.copy()
    upper[:z_split] = False
    return JawSplit(z_split, lower, upper)


@dataclass(frozen=True)
class ArchCurve:
    """Sampled reference curve through a dental arch, with unit normals.

    ``points`` is (n, 2) mm, ``normals`` matches it, ``s`` is the
    arclength parameter spanning [0, 1], and ``half_width_mm`` is the
    integration half-depth used by the panoramic projection.
    """

    points: np.ndarray
    normals: np.ndarray
    s: np.ndarray
    half_width_mm: float = 15.0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        normals = np.asarray(self.normals, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
            raise ValueError("points must be (n, 2) with n >= 2")
        if normals.shape != points.shape:
            raise ValueError("normals must match points")
        if not np.all(np.isfinite(points)) or not np.all(np.isfinite(normals)):
            raise ValueError("curve contains non-finite values")
        norms = np.hypot(normals[:, 0], normals[:, 1])
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("normals must be unit length")
        if s.shape != (points.shape[0],) or s[0] != 0.0 or s[-1] != 1.0 \
                or np.any(np.diff(s) <= 0):
            raise ValueError("s must increase strictly from 0 to 1")
        if not self.half_width_mm > 0:
            raise ValueError("half_width_mm must be positive")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "s", s)


def _segments_self_intersect(pts: np.ndarray) -> bool:
    """Check whether the polyline pts crosses itself (shared ends ignored)."""
    a = pts[:-1]
    b = pts[1:]
    n = len(a)
    d = b - a

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    for i in range(n - 2):
        js = np.arange(i + 2, n)
        r = d[i]
        q, sseg = a[js], d[js]
        denom = cross(r[None, :], sseg)
        qp = q - a[i]
        t = np.where(denom != 0, cross(qp, sseg) / np.where(denom == 0, 1.0,
                                                            denom), np.inf)
        u = np.where(denom != 0, cross(qp, r[None, :]) / np.where(
            denom == 0, 1.0, denom), np.inf)
        hit = (denom != 0) & (t > 1e-12) & (t < 1 - 1e-12) \
            & (u > 1e-12) & (u < 1 - 1e-12)
        if hit.any():
            return True
    return False


def fit_arch_curve(mask, grid: ImageGrid, degree: int = 4,
                   n_samples: int = 200,
                   half_width_mm: float = 15.0) -> ArchCurve:
    """Fit a smooth centerline through an arch-shaped mask.

    The mask (2D, or 3D projected along z) is swept in polar angle
    around its centroid; each angular station contributes the centroid
    of its pixels, and a polynomial radius-versus-angle fit of the given
    degree smooths the stations.  Strongly elongated masks (principal
    axis ratio above 8) are swept along their principal axis instead,
    which handles straight bars where the polar parameterization folds.
    The result is resampled to uniform arclength with normals from the
    rotated tangent.

    Masks whose sweep collapses to fewer stations than the polynomial
    needs are rejected: a single blob or a transverse line has no arch
    direction to follow.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim == 3:
        mask = mask.any(axis=0)
    if mask.ndim != 2:
        raise ValueError("mask must be 2D or 3D")
    if mask.shape != grid.shape2d:
        raise ValueError(f"mask shape {mask.shape} does not match grid "
                         f"{grid.shape2d}")
    if not mask.any():
        raise ValueError("mask is empty")
    iy, ix = np.nonzero(mask)
    pts = np.column_stack([grid.xs()[ix], grid.ys()[iy]])
    center = pts.mean(axis=0)
    centered = pts - center
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 0 or len(pts) < 2:
        raise ValueError("mask is a point; no arch to fit")
    # a straight mask with no transverse extent is a line, not an arch
    # (curved single-pixel arcs keep a large minor eigenvalue and pass)
    if np.sqrt(max(evals[0], 0.0)) < 0.5 * grid.voxel_size_mm:
        raise ValueError("mask is a line; no arch to fit")
    elongation = np.sqrt(evals[1] / max(evals[0], 1e-30))
    n_bins = 64
    if elongation > 8.0:
        axis = evecs[:, 1]
        ortho = evecs[:, 0]
        u = centered @ axis
        v = centered @ ortho
        edges = np.linspace(u.min(), u.max(), n_bins + 1)
        which = np.clip(np.digitize(u, edges) - 1, 0, n_bins - 1)
        stations = []
        for b in range(n_bins):
            sel = which == b
            if sel.any():
                stations.append((0.5 * (edges[b] + edges[b + 1]),
                                 v[sel].mean()))
        if len(stations) < degree + 1:
            raise ValueError("mask sweep collapsed to too few stations for "
                             f"a degree-{degree} fit")
        su = np.array([st[0] for st in stations])
        sv = np.array([st[1] for st in stations])
        coef = np.polynomial.polynomial.polyfit(su, sv, degree)
        ud = np.linspace(su[0], su[-1], 4 * n_samples)
        vd = np.polynomial.polynomial.polyval(ud, coef)
        dense = center + np.outer(ud, axis) + np.outer(vd, ortho)
    else:
        theta = np.arctan2(centered[:, 1], centered[:, 0])
        radius = np.hypot(centered[:, 0], centered[:, 1])
        # unwrap the occupied angular range so the sweep has no seam
        order = np.argsort(theta)
        gaps = np.diff(theta[order])
        wrap_gap = theta[order][0] + 2 * np.pi - theta[order][-1]
        if len(gaps) and gaps.max() > wrap_gap:
            cut = theta[order][int(np.argmax(gaps))]
            theta = np.where(theta <= cut, theta + 2 * np.pi, theta)
        edges = np.linspace(theta.min(), theta.max(), n_bins + 1)
        which = np.clip(np.digitize(theta, edges) - 1, 0, n_bins - 1)
        stations = []
        for b in range(n_bins):
            sel = which == b
            if sel.any():
                stations.append((0.5 * (edges[b] + edges[b + 1]),
                                 radius[sel].mean()))
        if len(stations) < degree + 1:
            raise ValueError("mask sweep collapsed to too few stations for "
                             f"a degree-{degree} fit")
        st = np.array([s[0] for s in stations])
        sr = np.array([s[1] for s in stations])
        coef = np.polynomial.polynomial.polyfit(st, sr, degree)
        td = np.linspace(st[0], st[-1], 4 * n_samples)
        rd = np.polynomial.polynomial.polyval(td, coef)
        dense = center + np.column_stack([rd * np.cos(td), rd * np.sin(td)])

    seglen = np.hypot(*np.diff(dense, axis=0).T)
    arclen = np.concatenate([[0.0], np.cumsum(seglen)])
    total = arclen[-1]
    if total < 2.0 * grid.voxel_size_mm:
        raise ValueError("fitted curve is shorter than two voxels; mask is "
                         "degenerate")
    s_uniform = np.linspace(0.0, 1.0, n_samples)
    x = np.interp(s_uniform * total, arclen, dense[:, 0])
    y = np.interp(s_uniform * total, arclen, dense[:, 1])
    points = np.column_stack([x, y])
    if _segments_self_intersect(points):
        raise ValueError("fitted curve self-intersects; mask is not "
                         "arch-shaped")
    tangent = np.gradient(points, axis=0)
    tnorm = np.hypot(tangent[:, 0], tangent[:, 1])
    tangent /= tnorm[:, None]
    normals = np.column_stack([-tangent[:, 1], tangent[:, 0]])
    return ArchCurve(points, normals, s_uniform, half_width_mm)


@dataclass(frozen=True)
class PanoramicImage:
    """Unrolled arch image P(s, z) plus sampling bookkeeping.

    ``data`` is (nz, n_s): one row per volume slice, one column per
    curve station.  ``coverage`` gives, per station, the fraction of
    normal-line samples that landed inside the volume; columns with low
    coverage integrate over less material than their neighbors.
    """

    data: np.ndarray
    s: np.ndarray
    z_mm: np.ndarray
    coverage: np.ndarray


def _bilinear_sample(plane: np.ndarray, grid: ImageGrid,
                     xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample a (ny, nx) plane at mm positions; outside points get zero."""
    xs, ys = grid.xs(), grid.ys()
    fx = (xy[:, 0] - xs[0]) / grid.voxel_size_mm
    fy = (xy[:, 1] - ys[0]) / grid.voxel_size_mm
    inside = (fx >= 0) & (fx <= len(xs) - 1) & (fy >= 0) & (fy <= len(ys) - 1)
    fx = np.clip(fx, 0, len(xs) - 1 - 1e-9)
    fy = np.clip(fy, 0, len(ys) - 1 - 1e-9)
    ix = fx.astype(int)
    iy = fy.astype(int)
    wx = fx - ix
    wy = fy - iy
    vals = (plane[iy, ix] * (1 - wx) * (1 - wy)
            + plane[iy, ix + 1] * wx * (1 - wy)
            + plane[iy + 1, ix] * (1 - wx) * wy
            + plane[iy + 1, ix + 1] * wx * wy)
    return np.where(inside, vals, 0.0), inside


def panoramic_project(volume, curve: ArchCurve,
                      step_mm: float = 0.5) -> PanoramicImage:
    """Integrate the volume along curve normals: P(s, z) over [-a, a].

    ``volume`` is a VoxelPhantom or any object with ``data`` and
    ``grid`` attributes.  The integral uses midpoint quadrature with
    sample spacing at most ``step_mm``; samples are bilinear in-plane
    (slices sit exactly on grid z positions, so this is the trilinear
    rule restricted to them).  Samples outside the grid contribute zero
    and lower the station's coverage figure.
    """
    if not step_mm > 0:
        raise ValueError("step_mm must be positive")
    data = np.asarray(volume.data, dtype=float)
    grid = volume.grid
    if data.ndim == 2:
        data = data[None, :, :]
    a = curve.half_width_mm
    n_t = max(2, int(np.ceil(2.0 * a / step_mm)))
    dt = 2.0 * a / n_t
    t = -a + (np.arange(n_t) + 0.5) * dt
    # sample positions: (n_s * n_t, 2)
    pos = (curve.points[:, None, :]
           + t[None, :, None] * curve.normals[:, None, :]).reshape(-1, 2)
    nz = data.shape[0]
    pano = np.zeros((nz, len(curve.points)))
    inside = None
    for k in range(nz):
        vals, inside = _bilinear_sample(data[k], grid, pos)
        pano[k] = vals.reshape(len(curve.points), n_t).sum(axis=1) * dt
    coverage = inside.reshape(len(curve.points), n_t).mean(axis=1)
    return PanoramicImage(pano, curve.s.copy(),
                          np.asarray(grid.zs(), dtype=float), coverage)
