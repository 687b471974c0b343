"""Trace-masked regularized least squares with a paraboloid inner solver.

The reconstruction problem is min over mu of

    (1/2) ||A mu - P||_H^2 + lambda * Gamma(mu),

where A holds exact intersection lengths of each projection line with
each voxel, and H is a diagonal 0/1 weight that drops rays crossing
metal (their data is untrustworthy there).  The outer loop is proximal
gradient: a regularizer half-step followed by the penalized least
squares solve

    g(mu, P) = argmin  ||A z - P||_H^2 + (lambda/gamma) ||z - mu||^2,

which is minimized by iterating a separable paraboloid surrogate.  The
surrogate splits each ray's residual across the voxels it crosses with
convex weights beta_ij = a_ij / (row sum), giving the per-pixel update

    z_j <- z_j - (sum_i a_ij h_i r_i + (lam/gam)(z_j - mu_j))
                 / (sum_i h_i a_ij^2 / beta_ij + lam/gam),

identical to the vectorized form with denominator A^T H A 1 + (lam/gam).
Each update never increases the inner objective (majorize-minimize),
and rays with h_i = 0 influence nothing, bit for bit.

Rays whose row sum is zero (lines missing the grid) have no defined
surrogate weights and carry no information about any voxel; they are
excluded from the fidelity term entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .geometry import ImageGrid, ParallelGeometry
from .projector import rays_for_geometry, siddon_segments_2d


# ---------------------------------------------------------------------------
# system matrix


@dataclass(frozen=True)
class SystemModel:
    """Sparse projection matrix with cached row sums.

    ``matrix`` is (n_rays, n_voxels) CSR of intersection lengths in mm;
    ``sino_shape`` and ``image_shape`` record how the flat axes fold.
    """

    matrix: sp.csr_matrix
    sino_shape: Tuple[int, int]
    image_shape: Tuple[int, int]

    def __post_init__(self):
        m, n = self.matrix.shape
        if m != int(np.prod(self.sino_shape)):
            raise ValueError("matrix rows do not match sino_shape")
        if n != int(np.prod(self.image_shape)):
            raise ValueError("matrix columns do not match image_shape")
        if self.matrix.nnz and self.matrix.data.min() < 0:
            raise ValueError("intersection lengths must be nonnegative")

    @property
    def n_rays(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.matrix.shape[1]

    def row_sums(self) -> np.ndarray:
        cached = getattr(self, "_row_sums", None)
        if cached is None:
            cached = np.asarray(self.matrix.sum(axis=1)).ravel()
            object.__setattr__(self, "_row_sums", cached)
        return cached

    def forward(self, image) -> np.ndarray:
        """A @ image, flattened ray order."""
        x = np.asarray(image, dtype=float).ravel()
        return self.matrix @ x

    def back(self, ray_values) -> np.ndarray:
        """A^T @ values, flattened voxel order."""
        y = np.asarray(ray_values, dtype=float).ravel()
        return self.matrix.T @ y


def build_system_model(geom: ParallelGeometry, grid: ImageGrid) -> SystemModel:
    """Exact-intersection system matrix for a parallel scan of a 2D grid."""
    origins, dirs, shape = rays_for_geometry(geom)
    rays, flat, seg = siddon_segments_2d(origins[:, :2], dirs[:, :2], grid)
    n_rays = origins.shape[0]
    mat = sp.csr_matrix((seg, (rays, flat)),
                        shape=(n_rays, grid.nx * grid.ny))
    return SystemModel(mat, shape, (grid.ny, grid.nx))


@dataclass(frozen=True)
class MaskedFidelity:
    """Diagonal fidelity weights h = 1 - trace, one entry per ray."""

    trace: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.trace)
        if t.dtype != bool:
            vals = np.unique(t)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError("trace must be 0/1 valued")
            t = t.astype(bool)
        object.__setattr__(self, "trace", t)

    @property
    def h(self) -> np.ndarray:
        return (~self.trace).ravel().astype(float)

    @classmethod
    def identity(cls, sino_shape) -> "MaskedFidelity":
        return cls(np.zeros(sino_shape, dtype=bool))

    @classmethod
    def from_metal(cls, metal, geom) -> "MaskedFidelity":
        from .projector import metal_trace
        return cls(metal_trace(metal, geom))


@dataclass(frozen=True)
class IterConfig:
    """Outer-loop knobs: weight, step, counts, and the regularizer plug-in.

    Exactly one of ``reg_grad`` (gradient of Gamma; the half-step
    subtracts gamma times it) or ``corrector`` (an artifact extractor
    whose output is subtracted as-is) may be set; with neither, the
    half-step is the identity.
    """

    lam: float
    gamma: float
    n_outer: int
    n_inner: int
    reg_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    corrector: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.n_outer < 1 or self.n_inner < 1:
            raise ValueError("iteration counts must be at least 1")
        if self.reg_grad is not None and self.corrector is not None:
            raise ValueError("choose either reg_grad or corrector, not both")


def _effective_h(h, model: SystemModel) -> np.ndarray:
    """Flat 0/1 weights with zero-rowsum rays dropped from the fidelity."""
    if isinstance(h, MaskedFidelity):
        h = h.h
    h = np.asarray(h, dtype=float).ravel()
    if h.size != model.n_rays:
        raise ValueError("fidelity weights do not match the ray count")
    return h * (model.row_sums() > 0)


# ---------------------------------------------------------------------------
# objectives


def masked_objective(mu, P, model: SystemModel, fidelity, lam: float = 0.0,
                     reg_energy: Optional[Callable] = None) -> float:
    """(1/2)||A mu - P||_H^2 + lam * Gamma(mu)."""
    h = _effective_h(fidelity, model)
    r = model.forward(mu) - np.asarray(P, dtype=float).ravel()
    val = 0.5 * float(r @ (h * r))
    if lam != 0.0 and reg_energy is not None:
        img = np.asarray(mu, dtype=float).reshape(model.image_shape)
        val += lam * float(reg_energy(img))
    return val


def inner_objective(z, anchor, P, model: SystemModel, h,
                    lam_over_gamma: float) -> float:
    """||A z - P||_H^2 + (lam/gamma) ||z - anchor||^2 (no 1/2 factors)."""
    h = _effective_h(h, model)
    z = np.asarray(z, dtype=float).ravel()
    a = np.asarray(anchor, dtype=float).ravel()
    r = model.matrix @ z - np.asarray(P, dtype=float).ravel()
    return float(r @ (h * r) + lam_over_gamma * ((z - a) @ (z - a)))


def sps_surrogate(z, z_ref, anchor, P, model: SystemModel, h,
                  lam_over_gamma: float) -> float:
    """Separable paraboloid value at z, built around the point z_ref.

    Each ray's squared residual is distributed over its voxels with the
    convex weights beta_ij; at z = z_ref the surrogate equals the inner
    objective (it touches), and it majorizes it everywhere else.
    """
    h = _effective_h(h, model)
    z = np.asarray(z, dtype=float).ravel()
    zr = np.asarray(z_ref, dtype=float).ravel()
    a = np.asarray(anchor, dtype=float).ravel()
    p = np.asarray(P, dtype=float).ravel()
    mat = model.matrix
    rows = model.row_sums()
    resid_ref = mat @ zr - p

    total = 0.0
    diff = z - zr
    indptr, indices, data = mat.indptr, mat.indices, mat.data
    for i in range(mat.shape[0]):
        if h[i] == 0.0:
            continue
        cols = indices[indptr[i]:indptr[i + 1]]
        vals = data[indptr[i]:indptr[i + 1]]
        beta = vals / rows[i]
        inner = (vals / beta) * diff[cols] + resid_ref[i]
        total += float(beta @ (inner * inner))
    total += lam_over_gamma * float((z - a) @ (z - a))
    return total


# ---------------------------------------------------------------------------
# inner solver updates


def _denominator(model: SystemModel, h: np.ndarray,
                 lam_over_gamma: float) -> np.ndarray:
    # A^T H A 1 with the row-sum cache: (A 1)_i is the row sum itself
    return model.back(h * model.row_sums()) + lam_over_gamma


def sps_update_matrix(z, anchor, P, model: SystemModel, h,
                      lam_over_gamma: float) -> np.ndarray:
    """One surrogate minimization step in matrix-vector form."""
    h = _effective_h(h, model)
    z = np.asarray(z, dtype=float).ravel()
    a = np.asarray(anchor, dtype=float).ravel()
    p = np.asarray(P, dtype=float).ravel()
    num = model.back(h * (model.matrix @ z - p)) + lam_over_gamma * (z - a)
    den = _denominator(model, h, lam_over_gamma)
    step = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return z - step


def sps_update_pixelwise(z, anchor, P, model: SystemModel, h,
                         lam_over_gamma: float) -> np.ndarray:
    """The same update written per pixel over the matrix columns.

    Kept as an independent implementation so the two printed forms of
    the iteration can be cross-checked against each other.
    """
    h = _effective_h(h, model)
    z = np.asarray(z, dtype=float).ravel()
    a = np.asarray(anchor, dtype=float).ravel()
    p = np.asarray(P, dtype=float).ravel()
    rows = model.row_sums()
    resid = model.matrix @ z - p
    csc = model.matrix.tocsc()
    out = z.copy()
    for j in range(csc.shape[1]):
        sl = slice(csc.indptr[j], csc.indptr[j + 1])
        i_idx = csc.indices[sl]
        a_ij = csc.data[sl]
        hw = h[i_idx]
        num = float((a_ij * hw) @ resid[i_idx]) \
            + lam_over_gamma * (z[j] - a[j])
        den = float((a_ij * hw) @ rows[i_idx]) + lam_over_gamma
        if den > 0:
            out[j] = z[j] - num / den
    return out


def sps_update_forms_agree(z, anchor, P, model: SystemModel, h,
                           lam_over_gamma: float, tol: float = 1e-12) -> bool:
    """Self-test: the per-pixel and matrix-vector updates coincide."""
    za = sps_update_matrix(z, anchor, P, model, h, lam_over_gamma)
    zb = sps_update_pixelwise(z, anchor, P, model, h, lam_over_gamma)
    scale = max(float(np.abs(za).max()), 1.0)
    return bool(np.abs(za - zb).max() <= tol * scale)


def sps_solve(anchor, P, model: SystemModel, h, lam_over_gamma: float,
              n_iter: int,
              on_iterate: Optional[Callable[[int, np.ndarray], None]] = None
              ) -> np.ndarray:
    """Minimize ||A z - P||_H^2 + (lam/gamma)||z - anchor||^2 by MM steps.

    Starts at the anchor (the first surrogate then touches there) and
    applies ``n_iter`` simultaneous updates.  Voxels with zero
    denominator (possible only with lam_over_gamma = 0 and no unmasked
    ray crossing them) are frozen at the anchor value.
    """
    if lam_over_gamma < 0:
        raise ValueError("lam_over_gamma must be nonnegative")
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    h = _effective_h(h, model)
    z = np.asarray(anchor, dtype=float).ravel().copy()
    for l in range(n_iter):
        z = sps_update_matrix(z, anchor, P, model, h, lam_over_gamma)
        if on_iterate is not None:
            on_iterate(l, z)
    return z


# ---------------------------------------------------------------------------
# outer loop


def _half_step(mu_flat: np.ndarray, model: SystemModel,
               cfg: IterConfig) -> np.ndarray:
    """Regularizer half-step of the proximal-gradient iteration."""
    if cfg.corrector is not None:
        step = np.asarray(cfg.corrector(mu_flat.reshape(model.image_shape)),
                          dtype=float).ravel()
    elif cfg.reg_grad is not None:
        step = cfg.gamma * np.asarray(
            cfg.reg_grad(mu_flat.reshape(model.image_shape)),
            dtype=float).ravel()
    else:
        return mu_flat
    if not np.all(np.isfinite(step)):
        bad = int(np.count_nonzero(~np.isfinite(step)))
        raise ValueError(
            f"regularizer step is non-finite at {bad} of {step.size} pixels; "
            "check the plug-in and its smoothing parameters")
    return mu_flat - step


def pg_outer_step(mu, P, model: SystemModel, fidelity, cfg: IterConfig,
                  on_inner: Optional[Callable[[int, np.ndarray], None]] = None
                  ) -> np.ndarray:
    """One proximal-gradient step: regularizer half-step, then sps_solve."""
    half = _half_step(np.asarray(mu, dtype=float).ravel(), model, cfg)
    return sps_solve(half, P, model, fidelity, cfg.lam / cfg.gamma,
                     cfg.n_inner, on_iterate=on_inner)


def iterate_recon(P, model: SystemModel, fidelity, cfg: IterConfig,
                  mu0=None) -> Tuple[np.ndarray, List[Tuple[int, int, float]]]:
    """Run the full outer loop; returns the image and an objective log.

    The log holds one (k, l, objective) row per inner iteration, where
    the objective is the inner penalized least squares value; it is what
    the CLI writes out as CSV.
    """
    h = _effective_h(fidelity, model)
    if mu0 is None:
        mu = np.zeros(model.n_voxels)
    else:
        mu = np.asarray(mu0, dtype=float).ravel().copy()
    history: List[Tuple[int, int, float]] = []
    lg = cfg.lam / cfg.gamma
    for k in range(cfg.n_outer):
        half = _half_step(mu, model, cfg)

        def log(l, z, k=k, half=half):
            history.append((k, l, inner_objective(z, half, P, model, h, lg)))

        mu = sps_solve(half, P, model, h, lg, cfg.n_inner, on_iterate=log)
    return mu.reshape(model.image_shape), history


# ---------------------------------------------------------------------------
# smoothed total variation


def _forward_diffs(mu: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(mu)
    gy = np.zeros_like(mu)
    gx[:, :-1] = mu[:, 1:] - mu[:, :-1]
    gy[:-1, :] = mu[1:, :] - mu[:-1, :]
    return gx, gy


def tv_energy(mu, eps_tv: float) -> float:
    """Smoothed total variation: sum of sqrt(|grad|^2 + eps^2)."""
    if not eps_tv > 0:
        raise ValueError("eps_tv must be positive")
    mu = np.asarray(mu, dtype=float)
    gx, gy = _forward_diffs(mu)
    return float(np.sum(np.sqrt(gx * gx + gy * gy + eps_tv * eps_tv)))


def tv_gradient(mu, eps_tv: float) -> np.ndarray:
    """Exact gradient of ``tv_energy`` (adjoint of the forward differences)."""
    if not eps_tv > 0:
        raise ValueError("eps_tv must be positive")
    mu = np.asarray(mu, dtype=float)
    gx, gy = _forward_diffs(mu)
    mag = np.sqrt(gx * gx + gy * gy + eps_tv * eps_tv)
    vx, vy = gx / mag, gy / mag
    grad = np.zeros_like(mu)
    grad[:, :-1] -= vx[:, :-1]
    grad[:, 1:] += vx[:, :-1]
    grad[:-1, :] -= vy[:-1, :]
    grad[1:, :] += vy[:-1, :]
    return grad


def make_tv_corrector(scale: float, eps_tv: float
                      ) -> Callable[[np.ndarray], np.ndarray]:
    """Built-in artifact-corrector plug-in: a scaled smoothed-TV gradient.

    Stands in for learned per-iteration correctors, which share this
    signature but are trained elsewhere; training is out of scope here.
    """
    def corrector(mu: np.ndarray) -> np.ndarray:
        return scale * tv_gradient(mu, eps_tv)
    return corrector
