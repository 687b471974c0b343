import numpy as np
import pytest

from cbctsim.geometry import (ConeGeometry, FanGeometry, ImageGrid,
                              ParallelGeometry, uniform_angles)
from cbctsim.materials import AnalyticPhantom, Disc


@pytest.fixture
def unit_disc():
    """Density-1 disc of radius 1 at the origin (material tag unused)."""
    return AnalyticPhantom(primitives=(Disc(0.0, 0.0, 1.0, "soft_tissue"),))


@pytest.fixture
def small_parallel():
    return ParallelGeometry(angles=uniform_angles(40), det_count=64,
                            det_spacing_mm=0.05)


@pytest.fixture
def small_fan():
    return FanGeometry(angles=uniform_angles(48), det_count_u=64,
                       det_spacing_mm_u=2.0, r_mm=500.0, R_mm=800.0)


@pytest.fixture
def small_cone():
    return ConeGeometry(angles=uniform_angles(48), det_count_u=64,
                        det_spacing_mm_u=2.0, det_count_v=17,
                        det_spacing_mm_v=2.0, r_mm=500.0, R_mm=800.0)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.max(np.abs(b))
    return 0.0 if denom == 0 else float(np.max(np.abs(a - b)) / denom)
