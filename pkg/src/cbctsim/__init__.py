"""cbctsim: simulation and reconstruction toolkit for low-dose dental CBCT."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    artifacts,
    cli,
    geometry,
    interior,
    io,
    mar,
    materials,
    panoramic,
    projector,
    recon_analytic,
    recon_iterative,
)
