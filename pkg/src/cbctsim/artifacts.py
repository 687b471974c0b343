"""Beam-hardening artifact model for metal inserts, and streak geometry.

A polychromatic scan of a water-like background with embedded metal
measures, along each ray, the monochromatic line integral plus an excess
that depends only on the metal path length t through the insert.  For a
symmetric two-line spectral model that excess is

    f(t) = ln(sinh(lam * t) / (lam * t)),

a smooth, even, nonnegative function of the composite hardening strength
lam times t.  Reconstructing the excess alone and negating it gives the
additive artifact image ("corrector"): adding it to the uncorrected FBP
restores the monochromatic image up to discretization error.

The artifact is streaky because f is superadditive: rays crossing two
separated inserts carry more excess than the sum of the single-insert
excesses, so the corrector concentrates along lines tangent to two
inserts at once.  ``streak_predictor`` returns those bitangent lines in
the same (theta, s) coordinates the parallel projector uses.

Path lengths enter the hardening model in cm; the projector reports
chords in mm, and the helpers here convert explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import ImageGrid, ParallelGeometry, uniform_angles
from .materials import Disc, Ellipse, _primitive_chords
from .projector import Sinogram, rays_for_geometry
from .recon_analytic import FilterSpec, Image2D, fbp_2d

MM_PER_CM = 10.0

ConvexPrimitive = Union[Disc, Ellipse]


@dataclass(frozen=True)
class MetalRegion:
    """Disjoint union of strictly convex metal inserts (discs, ellipses).

    The primitives are z-invariant cross sections, pairwise disjoint with
    positive separation.  Disjointness keeps a ray's metal path length the
    plain sum of per-primitive chords, and it is a hypothesis of the
    bitangent streak count, so overlapping or touching inserts are
    rejected at construction.
    """

    primitives: Tuple[ConvexPrimitive, ...]

    def __post_init__(self):
        prims = tuple(self.primitives)
        object.__setattr__(self, "primitives", prims)
        for p in prims:
            if isinstance(p, Disc):
                if p.radius <= 0:
                    raise ValueError("disc radius must be positive")
            elif isinstance(p, Ellipse):
                if p.a <= 0 or p.b <= 0:
                    raise ValueError("ellipse semi-axes must be positive")
            else:
                raise TypeError(
                    "metal primitives must be Disc or Ellipse, got "
                    f"{type(p).__name__}")
        for i in range(len(prims)):
            for j in range(i + 1, len(prims)):
                if not _pair_disjoint(prims[i], prims[j]):
                    raise ValueError(
                        f"metal primitives {i} and {j} overlap or touch; "
                        "the region must be pairwise disjoint")

    def is_empty(self) -> bool:
        return len(self.primitives) == 0


def as_metal_region(obj) -> MetalRegion:
    """Coerce a MetalRegion, a phantom, or a primitive sequence to a region."""
    if isinstance(obj, MetalRegion):
        return obj
    prims = getattr(obj, "primitives", obj)
    return MetalRegion(tuple(prims))


@dataclass(frozen=True)
class BeamHardeningParams:
    """Hardening strength and series-expansion order.

    ``lam`` is the composite strength of the two-line spectral model, per
    cm of metal path.  ``alpha_eps`` is the analogous composite for the
    truncated series form (spectral asymmetry times line separation), and
    ``n_terms`` its expansion order.
    """

    lam: float
    alpha_eps: float = 0.0
    n_terms: int = 1

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.alpha_eps < 0:
            raise ValueError("alpha_eps must be nonnegative")
        if self.n_terms < 1:
            raise ValueError("n_terms must be at least 1")
        if self.n_terms > 8:
            raise ValueError("n_terms above 8 buys nothing but factorial "
                             "overflow risk; use <= 8")


def bh_mismatch(path_cm, lam):
    """Beam-hardening excess ln(sinh(x)/x) with x = lam * path_cm.

    Even in lam, zero at zero path, strictly increasing and nonnegative.
    Three numeric branches keep it accurate from x = 0 to x ~ 1e308:
    a Taylor polynomial below 0.25, the direct formula in the middle, and
    x - ln(2x) once sinh would overflow.
    """
    t = np.asarray(path_cm, dtype=float)
    if np.any(t < 0):
        raise ValueError("metal path lengths must be nonnegative")
    x = np.abs(float(lam)) * t
    out = np.empty_like(x)

    small = x < 0.25
    big = x >= 30.0
    mid = ~small & ~big

    xs = x[small]
    x2 = xs * xs
    out[small] = x2 * (1.0 / 6.0 + x2 * (-1.0 / 180.0
                                         + x2 * (1.0 / 2835.0 - x2 / 37800.0)))
    xm = x[mid]
    out[mid] = np.log(np.sinh(xm) / xm)
    xb = x[big]
    out[big] = xb - np.log(2.0 * xb) + np.log1p(-np.exp(-2.0 * xb))

    if np.ndim(path_cm) == 0:
        return float(out)
    return out


def metal_chord_sinogram(metal, geom) -> Sinogram:
    """Chord length (mm) of each ray through the metal region.

    Uses exact per-primitive chords, so the values are free of any grid
    discretization.  Disjointness makes the sum the chord of the union.
    """
    region = as_metal_region(metal)
    origins, dirs, shape = rays_for_geometry(geom)
    total = np.zeros(origins.shape[0])
    for prim in region.primitives:
        total += _primitive_chords(prim, origins, dirs)
    return Sinogram(total.reshape(shape), geom)


def _default_scan(grid: ImageGrid) -> ParallelGeometry:
    """Parallel scan sized to the grid: half-circle, detector covers the
    diagonal so no corner is truncated."""
    n_views = max(360, min(720, 2 * max(grid.nx, grid.ny)))
    ds = grid.voxel_size_mm
    half_diag = 0.5 * math.hypot(grid.nx * ds, grid.ny * ds)
    det_count = int(np.ceil(2.0 * half_diag / ds)) + 3
    angles = uniform_angles(n_views, 0.0, np.pi)
    return ParallelGeometry(angles=angles, det_count=det_count,
                            det_spacing_mm=ds)


def bh_corrector(metal, lam: float, grid: ImageGrid,
                 geom: Optional[ParallelGeometry] = None,
                 spec: FilterSpec = FilterSpec()) -> Image2D:
    """Additive artifact image: minus the FBP of the hardening excess.

    The corrected reconstruction is FBP(measured) + corrector; by
    linearity of FBP that equals the FBP of the excess-free data.
    """
    region = as_metal_region(metal)
    if geom is None:
        geom = _default_scan(grid)
    if region.is_empty():
        return Image2D(np.zeros(grid.shape2d), grid)
    chords_mm = metal_chord_sinogram(region, geom)
    mism = bh_mismatch(chords_mm.data / MM_PER_CM, lam)
    img = fbp_2d(Sinogram(mism, geom), grid, spec)
    return Image2D(-img.data, grid, truncated=img.truncated)


def apply_decomposition(sino: Sinogram, metal, lam: float) -> Sinogram:
    """Add the metal hardening excess to a monochromatic sinogram.

    Bins whose rays miss the metal are returned bit-identical; the
    geometry and missing-data mask are carried through unchanged.
    """
    region = as_metal_region(metal)
    chords_mm = metal_chord_sinogram(region, sino.geometry)
    excess = bh_mismatch(chords_mm.data / MM_PER_CM, lam)
    return Sinogram(sino.data + excess, sino.geometry, missing=sino.missing)


def upsilon_expansion(metal, params: BeamHardeningParams, grid: ImageGrid,
                      geom: Optional[ParallelGeometry] = None,
                      spec: FilterSpec = FilterSpec()) -> Image2D:
    """Series form of the artifact image, truncated at ``params.n_terms``.

    Reconstructs sum_k (-1)^k / k * y(t)^k where
    y(t) = sum_n (alpha_eps * t)^(2n) / (2n+1)!  collects the even moments
    of the spectral model.  Both sums run to n_terms.  As the order grows
    this converges to -ln(1 + y) = -ln(sinh(x)/x) with x = alpha_eps * t,
    i.e. to ``bh_corrector`` with lam taken as alpha_eps.

    Raises when alpha_eps times the largest metal chord reaches pi, where
    the outer sum stops converging.
    """
    region = as_metal_region(metal)
    if geom is None:
        geom = _default_scan(grid)
    if region.is_empty() or params.alpha_eps == 0.0:
        return Image2D(np.zeros(grid.shape2d), grid)

    t = metal_chord_sinogram(region, geom).data / MM_PER_CM
    x = params.alpha_eps * t
    xmax = float(x.max())
    if xmax >= np.pi:
        raise ValueError(
            f"alpha_eps * max chord = {xmax:.3f} >= pi; the series "
            "expansion diverges there, use bh_corrector instead")

    x2 = x * x
    y = np.zeros_like(x)
    for n in range(params.n_terms, 0, -1):
        y = (y + 1.0 / math.factorial(2 * n + 1)) * x2
    series = np.zeros_like(y)
    yk = np.ones_like(y)
    for k in range(1, params.n_terms + 1):
        yk = yk * y
        series += ((-1.0) ** k / k) * yk
    return fbp_2d(Sinogram(series, geom), grid, spec)


def fit_lambda(measured: Sinogram, reference: Sinogram, metal,
               lam_bounds: Tuple[float, float] = (1e-6, 100.0)) -> float:
    """Least-squares hardening strength from metal-trace residuals.

    Minimizes the sum of squared differences between the measured-minus
    -reference sinogram and the model excess, over the bins whose rays
    actually cross the metal.  The strength is fitted as one composite
    scalar; nothing here tries to derive it from a spectrum.
    """
    if measured.data.shape != reference.data.shape:
        raise ValueError("measured and reference sinograms differ in shape")
    region = as_metal_region(metal)
    chords_cm = metal_chord_sinogram(region, measured.geometry).data / MM_PER_CM
    on = chords_cm > 0.0
    if not np.any(on):
        raise ValueError("no ray crosses the metal region; nothing to fit")
    diff = measured.data[on] - reference.data[on]
    t = chords_cm[on]

    def sse(lam: float) -> float:
        r = diff - bh_mismatch(t, lam)
        return float(r @ r)

    res = minimize_scalar(sse, bounds=lam_bounds, method="bounded",
                          options={"xatol": 1e-12})
    return float(res.x)


# ---------------------------------------------------------------------------
# bitangent streak geometry


def _center(prim: ConvexPrimitive) -> np.ndarray:
    return np.array([prim.cx, prim.cy], dtype=float)


def _support_height(prim: ConvexPrimitive, theta) -> np.ndarray:
    """Support of the centered primitive in direction (cos t, sin t).

    The two tangent lines of the primitive with normal angle theta sit at
    s = center . theta_hat +/- h(theta).
    """
    theta = np.asarray(theta, dtype=float)
    if isinstance(prim, Disc):
        return np.broadcast_to(float(prim.radius), theta.shape).copy()
    rel = theta - prim.angle_rad
    return np.sqrt((prim.a * np.cos(rel)) ** 2 + (prim.b * np.sin(rel)) ** 2)


def _pair_disjoint(p: ConvexPrimitive, q: ConvexPrimitive,
                   n_scan: int = 2880) -> bool:
    """Separating-direction test for two convex primitives.

    Two compact convex sets are disjoint exactly when some direction
    separates their support intervals; for discs the best direction is
    the center line and the test is exact.
    """
    if isinstance(p, Disc) and isinstance(q, Disc):
        d = math.hypot(q.cx - p.cx, q.cy - p.cy)
        return d > p.radius + q.radius
    theta = np.linspace(0.0, 2.0 * np.pi, n_scan, endpoint=False)
    u = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    gap = (u @ (_center(q) - _center(p))
           - _support_height(p, theta) - _support_height(q, theta))
    return bool(gap.max() > 0.0)


def _canonical_line(theta: float, s: float) -> Tuple[float, float]:
    """Fold (theta, s) into theta in [0, pi); (theta+pi, -s) is the same line."""
    theta = theta % (2.0 * np.pi)
    if theta >= np.pi:
        theta -= np.pi
        s = -s
    return float(theta), float(s)


def _same_line(a: Tuple[float, float], b: Tuple[float, float],
               ang_tol: float = 1e-6, s_tol: float = 1e-6) -> bool:
    dth = abs(a[0] - b[0])
    if dth < ang_tol:
        return abs(a[1] - b[1]) < s_tol
    if np.pi - dth < ang_tol:
        return abs(a[1] + b[1]) < s_tol
    return False


def _disc_pair_bitangents(p: Disc, q: Disc) -> List[Tuple[float, float]]:
    """Closed-form common tangents of two disjoint discs.

    A line {x . (cos t, sin t) = s} is tangent to a disc (c, r) when
    c . (cos t, sin t) - s = sigma r with sigma = +/-1; matching the two
    discs gives d cos(t - beta) = sigma2 r2 - sigma1 r1 along the center
    line direction beta.  sigma1 is fixed to +1: the mirrored sign choices
    reproduce the same lines with theta shifted by pi.
    """
    c1, c2 = _center(p), _center(q)
    delta = c2 - c1
    d = float(np.hypot(*delta))
    beta = math.atan2(delta[1], delta[0])
    lines: List[Tuple[float, float]] = []
    for sigma2 in (1.0, -1.0):
        u = (sigma2 * q.radius - p.radius) / d
        spread = math.acos(max(-1.0, min(1.0, u)))
        for theta in (beta + spread, beta - spread):
            s = c1[0] * math.cos(theta) + c1[1] * math.sin(theta) - p.radius
            lines.append(_canonical_line(theta, s))
    return lines


def _scan_pair_bitangents(p: ConvexPrimitive, q: ConvexPrimitive,
                          n_scan: int = 4096) -> List[Tuple[float, float]]:
    """Common tangents of two disjoint convex primitives by root scanning.

    With sigma1 = +1 the tangent of p at normal angle theta sits at
    s_p(theta) = c_p . theta_hat - h_p(theta); a common tangent is a root
    of s_p - s_q over the full circle, for the two relative orientations
    of q.  Roots are bracketed on a dense grid and polished by bisection.
    """
    cp, cq = _center(p), _center(q)

    def s_of(c, prim, theta, sigma):
        return (c[0] * np.cos(theta) + c[1] * np.sin(theta)
                - sigma * _support_height(prim, theta))

    lines: List[Tuple[float, float]] = []
    thetas = np.linspace(0.0, 2.0 * np.pi, n_scan + 1)
    for sigma2 in (1.0, -1.0):
        g = s_of(cp, p, thetas, 1.0) - s_of(cq, q, thetas, sigma2)
        sign_flip = np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]
        for i in sign_flip:
            lo, hi = thetas[i], thetas[i + 1]
            glo = g[i]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                gm = float(s_of(cp, p, mid, 1.0) - s_of(cq, q, mid, sigma2))
                if gm == 0.0:
                    lo = hi = mid
                    break
                if (gm > 0) == (glo > 0):
                    lo, glo = mid, gm
                else:
                    hi = mid
            theta = 0.5 * (lo + hi)
            s = float(s_of(cp, p, np.asarray(theta), 1.0))
            lines.append(_canonical_line(theta, s))
    return lines


def pair_bitangents(p: ConvexPrimitive,
                    q: ConvexPrimitive) -> List[Tuple[float, float]]:
    """Four common tangent lines of a disjoint convex pair, as (theta, s)."""
    if not _pair_disjoint(p, q):
        raise ValueError("bitangents are defined for disjoint primitives only")
    if isinstance(p, Disc) and isinstance(q, Disc):
        return _disc_pair_bitangents(p, q)
    return _scan_pair_bitangents(p, q)


def streak_predictor(metal) -> List[Tuple[float, float]]:
    """Predicted streak lines of the hardening artifact.

    The excess is superadditive in the path length, so it piles up on
    rays meeting two inserts; the reconstruction filter turns the edges
    of that double-coverage set, the common tangents of each insert pair,
    into bright streaks.  Returns the deduplicated bitangents of all
    pairs in (theta, s) parallel coordinates, theta in [0, pi), sorted.
    Fewer than two inserts produce no streaks.
    """
    region = as_metal_region(metal)
    prims = region.primitives
    lines: List[Tuple[float, float]] = []
    for i in range(len(prims)):
        for j in range(i + 1, len(prims)):
            for line in pair_bitangents(prims[i], prims[j]):
                if not any(_same_line(line, seen) for seen in lines):
                    lines.append(line)
    lines.sort()
    return lines
