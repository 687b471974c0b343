"""Sinogram-domain metal artifact reduction.

Rays that pass through metal carry values dominated by the implant and by
beam-hardening excess, so classical corrections treat the metal trace as
missing data and rebuild it from its surroundings.  Three fillers live
here:

* ``li_inpaint``: per-view linear interpolation across the trace.
* ``tv_inpaint``: descent on a masked least-squares objective with a
  smoothed total-variation penalty, so the fill favors piecewise-flat
  completions instead of straight chords.
* ``nmar``: normalize the sinogram by the forward projection of a prior
  image, interpolate the nearly flat result, then denormalize.  The
  normalization flattens tissue structure across the trace, which removes
  the transition artifacts plain interpolation leaves behind.

All fillers only write inside the (optionally dilated) trace; samples
outside it pass through bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .materials import VoxelPhantom
from .projector import Sinogram, radon_2d
from .recon_iterative import tv_energy, tv_gradient

__all__ = [
    "InpaintProblem",
    "dilate_trace",
    "li_inpaint",
    "nmar",
    "threshold_prior",
    "tv_inpaint",
]


def dilate_trace(trace: np.ndarray, samples: int) -> np.ndarray:
    """Widen a trace mask along the detector axis by ``samples`` on each side.

    Dilation runs only along the last axis: each view's trace grows
    independently, matching the per-view interpolation that follows.
    """
    trace = np.asarray(trace, dtype=bool)
    if samples < 0:
        raise ValueError("dilation must be nonnegative")
    if samples == 0 or not trace.any():
        return trace.copy()
    structure = np.zeros((3,) * trace.ndim, dtype=bool)
    center = (1,) * (trace.ndim - 1)
    structure[center] = True
    return ndimage.binary_dilation(trace, structure=structure,
                                   iterations=samples)


@dataclass
class InpaintProblem:
    """Observed sinogram, untrusted-sample mask, and fill parameters.

    ``dilate`` widens the trace by that many detector samples before any
    fill, which suppresses the half-corrupted transition samples at the
    trace boundary.  Set it to 0 to fill the given trace verbatim.
    """

    sino: Sinogram
    trace: np.ndarray
    lam_inpaint: float = 0.1
    dilate: int = 1
    _effective: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        trace = np.asarray(self.trace, dtype=bool)
        if trace.shape != self.sino.data.shape:
            raise ValueError(f"trace shape {trace.shape} does not match "
                             f"sinogram {self.sino.data.shape}")
        if self.lam_inpaint < 0:
            raise ValueError("lam_inpaint must be nonnegative")
        if int(self.dilate) != self.dilate or self.dilate < 0:
            raise ValueError("dilate must be a nonnegative integer")
        self.trace = trace
        self.dilate = int(self.dilate)
        self._effective = dilate_trace(trace, self.dilate)
        if not np.all(np.isfinite(self.sino.data[~self._effective])):
            raise ValueError("sinogram is not finite outside the trace")

    def effective_trace(self) -> np.ndarray:
        """The trace after dilation; the region every filler rewrites."""
        return self._effective.copy()


def _interp_rows(data: np.ndarray, trace: np.ndarray):
    """Fill trace runs row by row.  Returns (filled, fully_masked_rows)."""
    out = data.copy()
    bad_rows = []
    idx = np.arange(data.shape[-1], dtype=float)
    flat_out = out.reshape(-1, data.shape[-1])
    flat_trace = trace.reshape(-1, data.shape[-1])
    for i in range(flat_out.shape[0]):
        t = flat_trace[i]
        if not t.any():
            continue
        if t.all():
            flat_out[i] = flat_out[i].mean()
            bad_rows.append(i)
            continue
        flat_out[i, t] = np.interp(idx[t], idx[~t], flat_out[i, ~t])
    return out, bad_rows


def li_inpaint(problem: InpaintProblem) -> Sinogram:
    """Linear interpolation across the trace, one detector row at a time.

    Trace runs touching a detector edge extend the nearest trusted value.
    A row with no trusted sample at all falls back to its own mean and is
    reported through a warning.
    """
    out, bad = _interp_rows(problem.sino.data.astype(float, copy=True),
                            problem.effective_trace())
    if bad:
        warnings.warn(f"rows {bad} are fully masked; filled with the row "
                      "mean", stacklevel=2)
    return Sinogram(out, problem.sino.geometry, missing=problem.sino.missing)


def tv_inpaint(problem: InpaintProblem, iterations: int = 300,
               eps_tv: float = 1e-2, init: np.ndarray | None = None,
               on_iterate=None) -> Sinogram:
    """Accelerated descent on the masked fill objective.

    The objective is 0.5 * ||(Q - P) off trace||^2 plus ``lam_inpaint``
    times the smoothed total variation of Q over the whole sinogram.
    Trusted samples are pulled back to the data while the trace region is
    shaped only by the penalty.

    Each step backtracks from a momentum point until it satisfies a
    sufficient-decrease test there, and is kept only when it also lowers
    the best objective so far, so the reported objective never increases.
    Small smoothing makes the penalty stiff near flat regions; momentum
    is what keeps convergence practical there, and ``eps_tv`` should stay
    around a percent of the data scale.  If no step length achieves any
    decrease the solver aborts with the iteration state in the message.

    Starts from the observed data with the trace zeroed unless ``init``
    is given.  ``on_iterate(k, objective)`` is called once per iteration
    with the best objective.
    """
    if not problem.lam_inpaint > 0:
        raise ValueError("tv_inpaint needs lam_inpaint > 0")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    p = problem.sino.data.astype(float, copy=True)
    keep = ~problem.effective_trace()
    if init is None:
        q = np.where(keep, p, 0.0)
    else:
        q = np.asarray(init, dtype=float).copy()
        if q.shape != p.shape:
            raise ValueError("init shape does not match the sinogram")
    lam = problem.lam_inpaint

    def objective(x):
        r = (x - p) * keep
        return 0.5 * float(r.ravel() @ r.ravel()) + lam * tv_energy(x, eps_tv)

    f_cur = objective(q)
    extrap = q
    momentum = 1.0
    step = 1.0
    for k in range(iterations):
        grad = (extrap - p) * keep + lam * tv_gradient(extrap, eps_tv)
        gg = float(grad.ravel() @ grad.ravel())
        if gg == 0.0:
            break
        f_ref = objective(extrap)
        t = step
        for _ in range(60):
            cand = extrap - t * grad
            f_cand = objective(cand)
            if f_cand <= f_ref - 1e-4 * t * gg:
                break
            t *= 0.5
        else:
            raise RuntimeError(
                "tv_inpaint stalled: no step length decreases the objective "
                f"(iteration {k}, objective {f_ref:.6g}, trial {f_cand:.6g}, "
                f"step {t:.3g}, |grad|^2 {gg:.3g})")
        if f_cand <= f_cur:
            q_new, f_new = cand, f_cand
        else:
            q_new, f_new = q, f_cur
        m_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum * momentum))
        extrap = q_new + (momentum / m_new) * (cand - q_new) \
            + ((momentum - 1.0) / m_new) * (q_new - q)
        q, f_cur, momentum = q_new, f_new, m_new
        step = min(t * 2.0, 1e6)
        if on_iterate is not None:
            on_iterate(k, f_cur)
    # The minimizer is returned whole: the penalty is global, so trusted
    # samples relax slightly toward smoothness (vanishing with the weight).
    return Sinogram(q, problem.sino.geometry, missing=problem.sino.missing)


def threshold_prior(image: np.ndarray, air_below: float, bone_above: float,
                    tissue_value: float, bone_value: float,
                    air_value: float = 0.0) -> np.ndarray:
    """Three-level prior from a reconstructed slice.

    Pixels below ``air_below`` become ``air_value``, pixels at or above
    ``bone_above`` become ``bone_value``, everything between becomes
    ``tissue_value``.  Thresholds are caller-supplied because no fixed
    pair suits every reconstruction scale.
    """
    if not air_below < bone_above:
        raise ValueError("air_below must lie below bone_above")
    image = np.asarray(image, dtype=float)
    prior = np.full_like(image, tissue_value)
    prior[image < air_below] = air_value
    prior[image >= bone_above] = bone_value
    return prior


def nmar(sino: Sinogram, prior, trace: np.ndarray, dilate: int = 1,
         eps_norm: float = 1e-8, method: str = "siddon") -> Sinogram:
    """Normalized interpolation: flatten by a prior, fill, denormalize.

    ``prior`` supplies the normalization image: a VoxelPhantom, or any
    object with ``data`` and ``grid`` attributes (a reconstruction
    result works as is).  Its forward projection divides the sinogram,
    the nearly flat quotient is linearly interpolated across the trace,
    and the product restores the original scale.  Samples outside the
    dilated trace are returned untouched.

    ``eps_norm`` floors the divisor.  A prior whose projections never
    exceed the floor normalizes nothing and is rejected.
    """
    if isinstance(prior, VoxelPhantom):
        phantom = prior
    else:
        phantom = VoxelPhantom(np.asarray(prior.data, dtype=float),
                               prior.grid)
    r_prior = radon_2d(phantom, sino.geometry, method=method).data
    if not np.any(r_prior > eps_norm):
        raise ValueError("prior projects to nothing: normalization would "
                         "divide by the floor everywhere")
    den = np.maximum(r_prior, eps_norm)
    norm = Sinogram(sino.data / den, sino.geometry)
    problem = InpaintProblem(norm, trace, dilate=dilate)
    filled = li_inpaint(problem).data * den
    mask = problem.effective_trace()
    out = sino.data.copy()
    out[mask] = filled[mask]
    return Sinogram(out, sino.geometry, missing=sino.missing)
