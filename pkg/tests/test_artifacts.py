import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import maximum_filter

from cbctsim.geometry import ImageGrid, ParallelGeometry, uniform_angles
from cbctsim.materials import AnalyticPhantom, Disc, Ellipse, Ball, VoxelPhantom
from cbctsim.projector import Sinogram, radon_2d
from cbctsim.recon_analytic import fbp_2d
from cbctsim.artifacts import (
    BeamHardeningParams,
    MetalRegion,
    apply_decomposition,
    as_metal_region,
    bh_corrector,
    bh_mismatch,
    fit_lambda,
    metal_chord_sinogram,
    pair_bitangents,
    streak_predictor,
    upsilon_expansion,
    _default_scan,
    _scan_pair_bitangents,
    _support_height,
)

DEG = np.pi / 180.0


# ---------------------------------------------------------------------------
# hardening excess function


def test_mismatch_frozen_values():
    # high-precision references for ln(sinh(x)/x)
    refs = {
        1.0: 0.16143936157119563,
        0.5: 0.041324854612918109,
        2.0: 0.59522019205422282,
        10.0: 7.004267724384855,
        35.0: 30.751504757950641,
        700.0: 692.75577248439665,
    }
    for x, ref in refs.items():
        assert bh_mismatch(x, 1.0) == pytest.approx(ref, rel=1e-14)


def test_mismatch_zero_and_branch_seams():
    assert bh_mismatch(0.0, 3.7) == 0.0
    for seam in (0.25, 30.0):
        lo = bh_mismatch(seam - 1e-9, 1.0)
        hi = bh_mismatch(seam + 1e-9, 1.0)
        assert hi == pytest.approx(lo, rel=1e-7)


def test_mismatch_rejects_negative_paths():
    with pytest.raises(ValueError):
        bh_mismatch(np.array([0.1, -0.2]), 1.0)


def test_mismatch_shape_follows_input():
    out = bh_mismatch(np.ones((3, 4)), 0.5)
    assert out.shape == (3, 4)
    assert isinstance(bh_mismatch(1.0, 0.5), float)


@given(lam=st.floats(1e-3, 50.0), t=st.floats(0.0, 10.0))
def test_mismatch_even_in_lam_and_nonnegative(lam, t):
    v = bh_mismatch(t, lam)
    assert v >= 0.0
    assert bh_mismatch(t, -lam) == v


@given(lam=st.floats(1e-3, 50.0), t=st.floats(1e-6, 10.0),
       c=st.floats(0.1, 10.0))
def test_mismatch_depends_on_product_only(lam, t, c):
    a = bh_mismatch(t, lam)
    b = bh_mismatch(t * c, lam / c)
    assert b == pytest.approx(a, rel=1e-12, abs=1e-300)


@given(lam=st.floats(0.01, 20.0))
def test_mismatch_monotone_in_path(lam):
    t = np.linspace(0.0, 12.0, 200)
    v = bh_mismatch(t, lam)
    assert np.all(np.diff(v) > 0)


# ---------------------------------------------------------------------------
# metal regions


def test_metal_region_rejects_overlap_and_touch():
    with pytest.raises(ValueError, match="overlap"):
        MetalRegion((Disc(0, 0, 2, "iron"), Disc(3, 0, 2, "iron")))
    with pytest.raises(ValueError, match="overlap"):
        MetalRegion((Disc(0, 0, 1, "iron"), Disc(2, 0, 1, "iron")))  # touching
    MetalRegion((Disc(0, 0, 1, "iron"), Disc(2.01, 0, 1, "iron")))


def test_metal_region_rejects_overlapping_ellipses():
    e1 = Ellipse(0, 0, 3, 1, 0.4, "iron")
    e2 = Ellipse(2.5, 0, 3, 1, -0.4, "iron")
    with pytest.raises(ValueError, match="overlap"):
        MetalRegion((e1, e2))
    MetalRegion((e1, Ellipse(8, 0, 3, 1, -0.4, "iron")))


def test_metal_region_rejects_bad_primitives():
    with pytest.raises(TypeError):
        MetalRegion((Ball(0, 0, 0, 1, "iron"),))
    with pytest.raises(ValueError):
        MetalRegion((Disc(0, 0, 0.0, "iron"),))
    with pytest.raises(ValueError):
        MetalRegion((Ellipse(0, 0, 1, -1, 0, "iron"),))


def test_as_metal_region_coercions():
    d = Disc(0, 0, 1, "iron")
    r = MetalRegion((d,))
    assert as_metal_region(r) is r
    assert as_metal_region([d]).primitives == (d,)
    assert as_metal_region(AnalyticPhantom((d,))).primitives == (d,)


def test_params_validation():
    BeamHardeningParams(lam=1.0, alpha_eps=0.2, n_terms=4)
    with pytest.raises(ValueError):
        BeamHardeningParams(lam=0.0)
    with pytest.raises(ValueError):
        BeamHardeningParams(lam=1.0, alpha_eps=-0.1)
    with pytest.raises(ValueError):
        BeamHardeningParams(lam=1.0, n_terms=0)
    with pytest.raises(ValueError):
        BeamHardeningParams(lam=1.0, n_terms=9)


def test_chord_sinogram_matches_analytic_disc():
    geom = ParallelGeometry(uniform_angles(4, 0.0, np.pi), 101, 1.0)
    r = 7.5
    sino = metal_chord_sinogram(MetalRegion((Disc(0, 0, r, "iron"),)), geom)
    s = geom.s_coords()
    expect = 2.0 * np.sqrt(np.maximum(r * r - s * s, 0.0))
    assert np.allclose(sino.data, expect[None, :], atol=1e-9)


# ---------------------------------------------------------------------------
# corrector and decomposition

LAM = 2.0


@pytest.fixture(scope="module")
def grid256():
    return ImageGrid(256, 256, 1, 1.0)


@pytest.fixture(scope="module")
def two_discs():
    return MetalRegion((Disc(-20, 0, 4, "iron"), Disc(20, 0, 4, "iron")))


def test_corrector_empty_region_is_zero(grid256):
    phi = bh_corrector(MetalRegion(()), LAM, grid256)
    assert not phi.data.any()


def test_corrector_quadratic_small_strength_scaling(grid256, two_discs):
    phi_b = bh_corrector(two_discs, 1e-2, grid256)
    phi_s = bh_corrector(two_discs, 1e-4, grid256)
    scale = (1e-2 / 1e-4) ** 2
    err = np.abs(phi_s.data * scale - phi_b.data).max()
    assert err < 1e-4 * np.abs(phi_b.data).max()


def test_corrector_centered_disc_is_rotation_symmetric(grid256):
    phi = bh_corrector(MetalRegion((Disc(0, 0, 6, "iron"),)), 0.5, grid256)
    asym = np.abs(phi.data - np.rot90(phi.data)).max()
    assert asym < 1e-10 * np.abs(phi.data).max()
    assert not phi.truncated


def test_corrector_stable_under_grid_refinement(two_discs, grid256):
    # same scan, coarser sampling grid: values agree after block averaging
    coarse = ImageGrid(128, 128, 1, 2.0)
    geom = _default_scan(grid256)
    fine = bh_corrector(two_discs, 0.5, grid256, geom=geom)
    low = bh_corrector(two_discs, 0.5, coarse, geom=geom)
    block = fine.data.reshape(128, 2, 128, 2).mean(axis=(1, 3))
    rms = np.sqrt(np.mean((low.data - block) ** 2))
    assert rms < 0.02 * np.abs(fine.data).max()


def test_decomposition_touches_only_the_trace(two_discs):
    geom = ParallelGeometry(uniform_angles(90, 0.0, np.pi), 257, 1.0)
    rng = np.random.default_rng(7)
    base = Sinogram(rng.normal(size=(90, 257)), geom)
    out = apply_decomposition(base, two_discs, LAM)
    trace = metal_chord_sinogram(two_discs, geom).data > 0
    assert np.array_equal(out.data[~trace], base.data[~trace])
    assert np.all(out.data[trace] > base.data[trace])
    zero = apply_decomposition(base, two_discs, 0.0)
    assert np.array_equal(zero.data, base.data)


def test_decomposition_carries_missing_mask(two_discs):
    geom = ParallelGeometry(uniform_angles(10, 0.0, np.pi), 33, 2.0)
    missing = np.zeros((10, 33), dtype=bool)
    missing[3, 10:20] = True
    base = Sinogram(np.ones((10, 33)), geom, missing=missing)
    out = apply_decomposition(base, two_discs, LAM)
    assert out.missing is not None and np.array_equal(out.missing, missing)


@pytest.fixture(scope="module")
def closure_setup(grid256):
    """Hardened scan of a body with weakly attenuating metallic inserts.

    The inserts are low-density so the plain FBP round trip stays within
    its own tolerance; the hardening strength is large so the excess is a
    substantial inconsistency that the corrector has to remove.
    """
    metal_prims = (Disc(-20, 0, 4, "iron", density=0.1),
                   Disc(20, 0, 4, "iron", density=0.1))
    body = (Ellipse(0, 0, 100, 80, 0.0, "soft_tissue"),
            Disc(-45, 30, 10, "bone", density=0.5),
            Disc(50, -25, 8, "bone", density=0.5))
    metal = MetalRegion(metal_prims)
    phantom = AnalyticPhantom(body + metal_prims)
    geom = ParallelGeometry(uniform_angles(360, 0.0, np.pi), 365, 1.0)
    e0 = 80.0
    clean = radon_2d(phantom, geom, energy_keV=e0)
    lam = 6.0
    hardened = apply_decomposition(clean, metal, lam)
    return grid256, metal, phantom, geom, e0, clean, hardened, lam


def _interior_mask(grid, phantom_discs):
    X, Y = np.meshgrid(grid.xs(), grid.ys())
    inside = (X / 90.0) ** 2 + (Y / 72.0) ** 2 < 1.0
    near = np.zeros_like(inside)
    for d in phantom_discs:
        near |= np.hypot(X - d.cx, Y - d.cy) < d.radius + 4.0
    return inside & ~near


def test_correction_is_fbp_linearity(closure_setup):
    grid, metal, _, geom, _, clean, hardened, lam = closure_setup
    corrected = fbp_2d(hardened, grid).data + bh_corrector(metal, lam, grid,
                                                           geom=geom).data
    ref = fbp_2d(clean, grid).data
    assert np.abs(corrected - ref).max() < 1e-6 * np.abs(ref).max()


def test_corrected_reconstruction_matches_reference_map(closure_setup):
    grid, metal, phantom, geom, e0, clean, hardened, lam = closure_setup
    corrected = fbp_2d(hardened, grid).data + bh_corrector(metal, lam, grid,
                                                           geom=geom).data
    uncorrected = fbp_2d(hardened, grid).data
    X, Y = np.meshgrid(grid.xs(), grid.ys())
    pts = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    truth = phantom.values_at(pts, e0).reshape(grid.shape2d)
    discs = [p for p in phantom.primitives if isinstance(p, Disc)]
    mask = _interior_mask(grid, discs)
    scale = np.sqrt(np.mean(truth[mask] ** 2))
    err = np.sqrt(np.mean((corrected[mask] - truth[mask]) ** 2)) / scale
    err_un = np.sqrt(np.mean((uncorrected[mask] - truth[mask]) ** 2)) / scale
    assert err < 0.03
    assert err < err_un


def test_fit_lambda_recovers_strength(closure_setup):
    _, metal, _, _, _, clean, hardened, lam = closure_setup
    lam_hat = fit_lambda(hardened, clean, metal)
    assert lam_hat == pytest.approx(lam, abs=1e-5)


def test_fit_lambda_with_noise(closure_setup):
    _, metal, _, geom, _, clean, hardened, lam = closure_setup
    rng = np.random.default_rng(11)
    noisy = Sinogram(hardened.data + rng.normal(0.0, 0.01, hardened.data.shape),
                     geom)
    lam_hat = fit_lambda(noisy, clean, metal)
    assert lam_hat == pytest.approx(lam, abs=0.05)


def test_fit_lambda_validation(two_discs):
    geom = ParallelGeometry(uniform_angles(4, 0.0, np.pi), 9, 1.0)
    a = Sinogram(np.zeros((4, 9)), geom)
    b = Sinogram(np.zeros((4, 5)), ParallelGeometry(uniform_angles(4, 0.0, np.pi), 5, 1.0))
    with pytest.raises(ValueError):
        fit_lambda(a, b, two_discs)
    # one view along x only: a far-off disc crosses none of its rays
    one = ParallelGeometry(np.array([0.0]), 9, 1.0)
    far = MetalRegion((Disc(500.0, 0, 1, "iron"),))
    with pytest.raises(ValueError, match="no ray"):
        fit_lambda(Sinogram(np.zeros((1, 9)), one),
                   Sinogram(np.zeros((1, 9)), one), far)


# ---------------------------------------------------------------------------
# series expansion


def test_upsilon_order_one_is_leading_term(grid256, two_discs):
    ae = 0.5
    geom = _default_scan(grid256)
    params = BeamHardeningParams(lam=ae, alpha_eps=ae, n_terms=1)
    ups = upsilon_expansion(two_discs, params, grid256, geom=geom)
    t_cm = metal_chord_sinogram(two_discs, geom).data / 10.0
    lead = fbp_2d(Sinogram(-((ae * t_cm) ** 2) / 6.0, geom), grid256)
    assert np.abs(ups.data - lead.data).max() <= 1e-12 * np.abs(lead.data).max()


def test_upsilon_converges_to_corrector(grid256, two_discs):
    # alpha_eps * max chord = 0.4, inside the convergence region
    ae = 0.5
    geom = _default_scan(grid256)
    params = BeamHardeningParams(lam=ae, alpha_eps=ae, n_terms=4)
    ups = upsilon_expansion(two_discs, params, grid256, geom=geom)
    cor = bh_corrector(two_discs, ae, grid256, geom=geom)
    rel = np.linalg.norm(ups.data - cor.data) / np.linalg.norm(cor.data)
    assert rel < 1e-3


def test_upsilon_zero_strength_and_empty_region(grid256, two_discs):
    params = BeamHardeningParams(lam=1.0, alpha_eps=0.0, n_terms=3)
    assert not upsilon_expansion(two_discs, params, grid256).data.any()
    params = BeamHardeningParams(lam=1.0, alpha_eps=0.3, n_terms=3)
    assert not upsilon_expansion(MetalRegion(()), params, grid256).data.any()


def test_upsilon_rejects_divergent_strength(grid256, two_discs):
    # max chord 0.8 cm: alpha_eps = 4 puts alpha_eps * t at 3.2 >= pi
    params = BeamHardeningParams(lam=1.0, alpha_eps=4.0, n_terms=3)
    with pytest.raises(ValueError, match="pi"):
        upsilon_expansion(two_discs, params, grid256)


# ---------------------------------------------------------------------------
# bitangent prediction


def test_two_unit_discs_oracle():
    m = MetalRegion((Disc(-2, 0, 1, "iron"), Disc(2, 0, 1, "iron")))
    lines = streak_predictor(m)
    assert len(lines) == 4
    expect = [(np.pi / 3, 0.0), (np.pi / 2, -1.0), (np.pi / 2, 1.0),
              (2 * np.pi / 3, 0.0)]
    for (th, s), (eth, es) in zip(lines, expect):
        assert th == pytest.approx(eth, abs=1e-12)
        assert s == pytest.approx(es, abs=1e-12)


def test_single_insert_has_no_streaks():
    assert streak_predictor(MetalRegion((Disc(0, 0, 3, "iron"),))) == []
    assert streak_predictor(MetalRegion(())) == []


def test_streak_predictor_validates_overlap():
    with pytest.raises(ValueError):
        streak_predictor((Disc(0, 0, 2, "iron"), Disc(1, 0, 2, "iron")))


def test_collinear_trio_shares_external_tangents():
    m = MetalRegion((Disc(-6, 0, 1, "iron"), Disc(0, 0, 1, "iron"),
                     Disc(6, 0, 1, "iron")))
    lines = streak_predictor(m)
    # three pairs give 12 bitangents, but all pairs share the same two
    # external tangents y = +-1, so 8 distinct lines remain
    assert len(lines) == 8
    horizontals = [(th, s) for th, s in lines
                   if abs(th - np.pi / 2) < 1e-9]
    assert sorted(s for _, s in horizontals) == pytest.approx([-1.0, 1.0])


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_disc_pair_tangency_property(seed):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.uniform(0.5, 3.0, 2)
    c1 = rng.uniform(-10, 10, 2)
    ang = rng.uniform(0, 2 * np.pi)
    d = r1 + r2 + rng.uniform(0.2, 10.0)
    c2 = c1 + d * np.array([np.cos(ang), np.sin(ang)])
    p = Disc(c1[0], c1[1], r1, "iron")
    q = Disc(c2[0], c2[1], r2, "iron")
    lines = pair_bitangents(p, q)
    assert len(lines) == 4
    for th, s in lines:
        for disc in (p, q):
            dist = abs(disc.cx * np.cos(th) + disc.cy * np.sin(th) - s)
            assert dist == pytest.approx(disc.radius, abs=1e-9)


def test_scan_route_agrees_with_disc_closed_form():
    p = Disc(-2, 0.5, 1.0, "iron")
    q = Disc(2, -0.7, 1.4, "iron")
    closed = sorted(pair_bitangents(p, q))
    scanned = sorted(_scan_pair_bitangents(p, q))
    for (a, b), (c, d) in zip(closed, scanned):
        assert a == pytest.approx(c, abs=1e-9)
        assert b == pytest.approx(d, abs=1e-9)


def test_ellipse_pair_tangency_residuals():
    e1 = Ellipse(-3, 0.5, 2.0, 1.0, 0.3, "iron")
    e2 = Ellipse(3, -1.0, 1.5, 0.8, -0.7, "iron")
    lines = pair_bitangents(e1, e2)
    assert len(lines) == 4
    for th, s in lines:
        for e in (e1, e2):
            dist = abs(e.cx * np.cos(th) + e.cy * np.sin(th) - s)
            h = float(_support_height(e, np.asarray(th)))
            assert dist == pytest.approx(h, abs=1e-8)


def test_bitangents_require_disjoint_pair():
    with pytest.raises(ValueError):
        pair_bitangents(Disc(0, 0, 2, "iron"), Disc(1, 0, 2, "iron"))


# ---------------------------------------------------------------------------
# streak localization in the reconstructed artifact


def test_streaks_sit_on_predicted_lines(grid256, two_discs):
    """Line-integral scores of |corrector| peak on the predicted bitangents.

    Each predicted line must have a strong local maximum of the line
    score within 2 degrees and 2 detector bins.
    """
    phi = bh_corrector(two_discs, LAM, grid256)
    lines = streak_predictor(two_discs)
    X, Y = np.meshgrid(grid256.xs(), grid256.ys())
    absphi = np.abs(phi.data)
    for d in two_discs.primitives:
        absphi[np.hypot(X - d.cx, Y - d.cy) < d.radius + 6.0] = 0.0

    chk = ParallelGeometry(uniform_angles(360, 0.0, np.pi), 257, 1.0)
    scores = radon_2d(VoxelPhantom(absphi, grid256), chk, method="joseph").data
    ang, s_ax = chk.angles, chk.s_coords()
    bin_mm = chk.det_spacing_mm
    peaks = (scores == maximum_filter(scores, size=5)) \
        & (scores > 0.3 * scores.max())
    pk_i, pk_j = np.nonzero(peaks)

    assert len(lines) == 4
    for th, s in lines:
        dth = np.abs((ang[pk_i] - th + np.pi / 2) % np.pi - np.pi / 2)
        ds = np.abs(s_ax[pk_j] - s)
        assert np.any((dth <= 2 * DEG) & (ds <= 2 * bin_mm)), \
            f"no |phi| maximum near line ({th:.3f}, {s:.1f})"
