"""Command line front end: phantom -> project -> reconstruct -> correct.

Settings resolve in three layers: command line flags override key=value
pairs from an optional --config file, which override built-in defaults.
Every run that writes files also drops a JSON manifest next to its
primary output holding the resolved configuration, a hash of it,
library versions, and a checksum per output file.  Manifests carry no
timestamps, so repeating a run with the same configuration produces
byte-identical artifacts.

Exit codes: 0 success; 2 configuration error (unknown key, bad value,
missing input, refusing to overwrite without --force); 3 numerical
failure, with a diagnostics file written next to the intended output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import tempfile
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy
from PIL import Image

from . import __version__
from . import io as cio
from .artifacts import bh_corrector, streak_predictor
from .geometry import (ConeGeometry, FanGeometry, ImageGrid, ParallelGeometry,
                       uniform_angles)
from .interior import InteriorConfig, make_null_function
from .mar import (InpaintProblem, li_inpaint, nmar, threshold_prior,
                  tv_inpaint)
from .materials import (AnalyticPhantom, Disc, Ellipse, Spectrum,
                        VoxelPhantom, attenuation_at, builtin_material,
                        delta_spectrum, monochromatize, normalize_spectrum,
                        read_phantom_file, read_spectrum_csv,
                        two_peak_spectrum, write_phantom_file)
from .panoramic import fit_arch_curve, otsu_threshold, panoramic_project, split_jaws
from .projector import (NoiseConfig, Sinogram, add_poisson_noise,
                        metal_trace, polychromatic_project, radon_2d)
from .recon_analytic import FilterSpec, fan_fbp_2d, fbp_2d, fdk
from .recon_iterative import (IterConfig, MaskedFidelity, build_system_model,
                              iterate_recon, sps_update_matrix,
                              sps_update_pixelwise, tv_gradient)


class ConfigError(Exception):
    """Bad or inconsistent run configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# option model and three-layer resolution


@dataclass(frozen=True)
class Opt:
    """One named setting of a subcommand.

    ``kind`` drives the pre-run path checks: "input" must exist,
    "output" must not (unless --force), "flag" is boolean, "value" is
    anything else.  ``default`` may be a callable taking the settings
    resolved so far, for defaults derived from other options.
    """

    name: str
    kind: str = "value"
    type: Callable = str
    default: object = None
    required: bool = False
    positive: bool = False
    choices: Optional[Tuple[str, ...]] = None
    help: str = ""

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


_GLOBAL_OPTS = [
    Opt("seed", type=int, default=0, help="seed for all randomness"),
    Opt("threads", type=int, default=0,
        help="worker count recorded in the manifest (0 = all cores); "
             "results never depend on it"),
    Opt("force", kind="flag", default=False,
        help="allow overwriting existing outputs"),
    Opt("verbose", kind="flag", default=False,
        help="print progress notes to stderr"),
]

_WINDOW_OPTS = [
    Opt("window-center", type=float,
        help="PNG display window center (default: data midrange)"),
    Opt("window-width", type=float, positive=True,
        help="PNG display window width (default: data range)"),
]


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config_file(path) -> Dict[str, str]:
    """Parse key=value lines; '#' starts a comment, blank lines ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    entries: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("_", "-")
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected key = value, "
                              f"got {raw.strip()!r}")
        if key in entries:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


def resolve_options(opts: List[Opt], flag_values: Dict[str, object],
                    entries: Dict[str, str]) -> Dict[str, object]:
    """Merge flags over config-file entries over defaults.

    ``flag_values`` maps option dest names to parsed flag values (None
    when the flag was not given).  Unknown config keys are rejected so
    typos fail loudly rather than silently falling back to defaults.
    """
    known = {opt.name for opt in opts}
    unknown = sorted(set(entries) - known)
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(unknown))
    resolved: Dict[str, object] = {}
    for opt in opts:
        value = flag_values.get(opt.dest)
        if value is None and opt.name in entries:
            text = entries[opt.name]
            try:
                value = _parse_bool(text) if opt.kind == "flag" else opt.type(text)
            except ValueError as exc:
                raise ConfigError(f"config key {opt.name}: {exc}") from exc
        if value is None:
            value = opt.default(resolved) if callable(opt.default) else opt.default
        if value is None and opt.required:
            raise ConfigError(f"--{opt.name} is required")
        if value is not None:
            if opt.choices is not None and value not in opt.choices:
                raise ConfigError(f"--{opt.name} must be one of "
                                  f"{', '.join(opt.choices)} (got {value!r})")
            if opt.positive and not value > 0:
                raise ConfigError(f"--{opt.name} must be positive (got {value})")
        resolved[opt.dest] = value
    return resolved


def _check_paths(opts: List[Opt], cfg: Dict[str, object]) -> None:
    force = bool(cfg.get("force"))
    for opt in opts:
        value = cfg.get(opt.dest)
        if value is None:
            continue
        if opt.kind == "input" and not Path(value).is_file():
            raise ConfigError(f"input file {value} does not exist")
        if opt.kind == "output" and Path(value).exists() and not force:
            raise ConfigError(f"refusing to overwrite {value} (use --force)")
    primary = _primary_output(opts, cfg)
    if primary is not None:
        manifest = primary + ".manifest.json"
        if Path(manifest).exists() and not force:
            raise ConfigError(f"refusing to overwrite {manifest} (use --force)")


def _primary_output(opts: List[Opt], cfg: Dict[str, object]) -> Optional[str]:
    for opt in opts:
        if opt.kind == "output" and cfg.get(opt.dest) is not None:
            return str(cfg[opt.dest])
    return None


# ---------------------------------------------------------------------------
# manifest and diagnostics


def _manifest_config(opts: List[Opt], cfg: Dict[str, object]) -> Dict[str, object]:
    # force/verbose steer the run, never the computed bytes, so they are
    # kept out of the recorded configuration and of its hash.
    skip = {"force", "verbose"}
    return {opt.name: cfg[opt.dest] for opt in opts if opt.name not in skip}


def write_manifest(path, command: str, opts: List[Opt],
                   cfg: Dict[str, object], outputs: List[str]) -> None:
    recorded = _manifest_config(opts, cfg)
    blob = json.dumps(recorded, sort_keys=True).encode()
    checksums = {}
    for out in outputs:
        checksums[out] = hashlib.sha256(Path(out).read_bytes()).hexdigest()
    manifest = {
        "command": command,
        "config": recorded,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "versions": {
            "cbctsim": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "outputs": checksums,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_diagnostics(path, command: str, cfg: Dict[str, object],
                       exc: BaseException) -> None:
    report = {
        "command": command,
        "config": {key: value for key, value in sorted(cfg.items())},
        "error": {
            "type": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(),
        },
    }
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared pieces


def _note(cfg: Dict[str, object], message: str) -> None:
    if cfg.get("verbose"):
        print(message, file=sys.stderr)


def parse_spectrum(text: str) -> Spectrum:
    """delta:E, two-peak[:LO,HI,FRAC], or a path to a spectrum CSV."""
    if text.startswith("delta:"):
        try:
            return delta_spectrum(float(text[len("delta:"):]))
        except ValueError as exc:
            raise ConfigError(f"bad spectrum {text!r}: {exc}") from exc
    if text == "two-peak":
        return two_peak_spectrum()
    if text.startswith("two-peak:"):
        parts = text[len("two-peak:"):].split(",")
        if len(parts) != 3:
            raise ConfigError("two-peak spectrum takes exactly "
                              "low,high,low_fraction")
        try:
            e_low, e_high, frac = (float(p) for p in parts)
            return two_peak_spectrum(e_low, e_high, frac)
        except ValueError as exc:
            raise ConfigError(f"bad spectrum {text!r}: {exc}") from exc
    if not Path(text).is_file():
        raise ConfigError(f"spectrum file {text} does not exist")
    return normalize_spectrum(read_spectrum_csv(text))


def _det_axis(geom) -> Tuple[int, float]:
    count = getattr(geom, "det_count", None)
    if count is None:
        count = geom.det_count_u
    spacing = getattr(geom, "det_spacing_mm", None)
    if spacing is None:
        spacing = geom.det_spacing_mm_u
    return int(count), float(spacing)


def _grid_for_sinogram(geom, cfg: Dict[str, object]) -> ImageGrid:
    count, spacing = _det_axis(geom)
    nx = cfg.get("nx") or count
    ny = cfg.get("ny") or nx
    voxel = cfg.get("voxel_size") or spacing
    return ImageGrid(int(nx), int(ny), 1, float(voxel))


def _fbp_any(sino: Sinogram, grid: ImageGrid, spec: FilterSpec):
    if isinstance(sino.geometry, FanGeometry):
        return fan_fbp_2d(sino, grid, spec)
    if isinstance(sino.geometry, ParallelGeometry):
        return fbp_2d(sino, grid, spec)
    raise ConfigError("this command needs parallel or fan data; "
                      "cone data goes through recon-fdk")


def _window_bounds(data, center, width) -> Tuple[float, float]:
    if center is None or width is None:
        lo = float(np.min(data))
        hi = float(np.max(data))
        if center is None:
            center = 0.5 * (lo + hi)
        if width is None:
            width = (hi - lo) or 1.0
    return float(center), float(width)


def _save_png(data, path, cfg: Dict[str, object]) -> None:
    center, width = _window_bounds(data, cfg.get("window_center"),
                                   cfg.get("window_width"))
    cio.write_png(data, path, center, width)


def _windowed_u8(image, center: float, width: float) -> np.ndarray:
    lo = center - 0.5 * width
    return np.clip((np.asarray(image, dtype=float) - lo) / width * 255.0,
                   0.0, 255.0).astype(np.uint8)


def _read_trace(path, sino: Sinogram) -> np.ndarray:
    trace = cio.read_sinogram(path).data > 0.5
    if trace.shape != sino.data.shape:
        raise ConfigError(f"trace shape {trace.shape} does not match "
                          f"sinogram shape {sino.data.shape}")
    return trace


def _metal_primitives(path, material: str):
    phantom = read_phantom_file(path)
    picked = tuple(p for p in phantom.primitives if p.material == material)
    if not picked:
        raise ConfigError(f"{path} has no {material!r} primitives; "
                          "pick the metal material with --material")
    return picked


# ---------------------------------------------------------------------------
# subcommands

_COMMANDS: Dict[str, Tuple[str, List[Opt], Callable]] = {}


def _command(name: str, help_text: str, opts: List[Opt]):
    def register(fn):
        _COMMANDS[name] = (help_text, opts + _GLOBAL_OPTS, fn)
        return fn
    return register


def _builtin_phantom(kind: str, radius: float, material: str) -> AnalyticPhantom:
    if kind == "disc":
        return AnalyticPhantom((Disc(0.0, 0.0, radius, material),))
    if kind == "two-crowns":
        return AnalyticPhantom((
            Ellipse(0.0, 0.0, 80.0, 64.0, 0.0, "soft_tissue"),
            Disc(-35.0, 22.0, 8.0, "bone", 0.5),
            Disc(40.0, -18.0, 7.0, "bone", 0.5),
            Disc(-15.0, 0.0, 3.0, "iron", 0.1),
            Disc(18.0, 5.0, 3.0, "iron", 0.1),
        ))
    teeth_angles = np.linspace(np.pi / 6, 5 * np.pi / 6, 8)
    teeth = tuple(Disc(45.0 * math.cos(a), 45.0 * math.sin(a), 4.0, "bone")
                  for a in teeth_angles)
    return AnalyticPhantom((Ellipse(0.0, 0.0, 70.0, 60.0, 0.0, "soft_tissue"),)
                           + teeth)


@_command("phantom", "write a built-in phantom description file", [
    Opt("kind", choices=("disc", "two-crowns", "arch"), default="disc",
        help="disc: one disc; two-crowns: elliptical body with bone and "
             "metal inserts; arch: tissue ellipse with a row of teeth"),
    Opt("out", kind="output", required=True, help="phantom file to write"),
    Opt("radius", type=float, default=60.0, positive=True,
        help="disc kind only"),
    Opt("material", default="soft_tissue", help="disc kind only"),
])
def _cmd_phantom(cfg) -> List[str]:
    phantom = _builtin_phantom(cfg["kind"], cfg["radius"], cfg["material"])
    write_phantom_file(phantom, cfg["out"])
    return [cfg["out"]]


@_command("project", "project a phantom file to a sinogram", [
    Opt("phantom", kind="input", required=True,
        help="phantom description file"),
    Opt("out", kind="output", required=True, help="sinogram to write"),
    Opt("geometry", choices=("parallel", "cone"), default="parallel"),
    Opt("views", type=int, default=360, positive=True),
    Opt("span-deg", type=float, positive=True,
        default=lambda r: 360.0 if r.get("geometry") == "cone" else 180.0,
        help="angular span (default 180 parallel, 360 cone)"),
    Opt("start-deg", type=float, default=0.0),
    Opt("det-count", type=int, default=512, positive=True),
    Opt("det-spacing", type=float, default=1.0, positive=True, help="mm"),
    Opt("det-rows", type=int, default=32, positive=True, help="cone only"),
    Opt("det-row-spacing", type=float, default=1.0, positive=True,
        help="mm, cone only"),
    Opt("src-iso-mm", type=float, default=300.0, positive=True,
        help="source to rotation axis, cone only"),
    Opt("src-det-mm", type=float, default=500.0, positive=True,
        help="source to detector, cone only"),
    Opt("offset-fraction", type=float, default=0.0,
        help="detector offset as a fraction of its width, cone only"),
    Opt("spectrum", default="delta:70.0",
        help="delta:E, two-peak[:LO,HI,FRAC], or a spectrum CSV path"),
    Opt("photons", type=float, default=0.0,
        help="mean photons per ray for Poisson noise; 0 = noiseless"),
])
def _cmd_project(cfg) -> List[str]:
    phantom = read_phantom_file(cfg["phantom"])
    spectrum = parse_spectrum(cfg["spectrum"])
    angles = uniform_angles(cfg["views"], math.radians(cfg["start_deg"]),
                            math.radians(cfg["span_deg"]))
    if cfg["geometry"] == "parallel":
        geom = ParallelGeometry(angles, cfg["det_count"], cfg["det_spacing"])
    else:
        geom = ConeGeometry(angles, cfg["det_count"], cfg["det_spacing"],
                            cfg["det_rows"], cfg["det_row_spacing"],
                            cfg["src_iso_mm"], cfg["src_det_mm"],
                            cfg["offset_fraction"])
    _note(cfg, f"projecting {len(phantom.primitives)} primitives over "
               f"{cfg['views']} views")
    sino = polychromatic_project(phantom, geom, spectrum)
    if cfg["photons"] > 0:
        sino = add_poisson_noise(sino, NoiseConfig(cfg["photons"], cfg["seed"]))
    cio.write_sinogram(sino, cfg["out"])
    return [cfg["out"]]


@_command("recon-fbp", "filtered backprojection of a 2-d sinogram", [
    Opt("sino", kind="input", required=True),
    Opt("out", kind="output", required=True,
        help="volume file (single slice) to write"),
    Opt("nx", type=int, positive=True, help="default: detector bin count"),
    Opt("ny", type=int, positive=True, help="default: nx"),
    Opt("voxel-size", type=float, positive=True,
        help="mm, default: detector spacing"),
    Opt("filter", choices=("ramp", "cosine", "hann"), default="ramp"),
    Opt("cutoff", type=float, default=1.0, positive=True,
        help="fraction of Nyquist"),
    Opt("png", kind="output", help="optional preview PNG"),
] + _WINDOW_OPTS)
def _cmd_recon_fbp(cfg) -> List[str]:
    sino = cio.read_sinogram(cfg["sino"])
    grid = _grid_for_sinogram(sino.geometry, cfg)
    image = _fbp_any(sino, grid, FilterSpec(cfg["filter"], cfg["cutoff"]))
    cio.write_volume(image.data[None, :, :], grid.voxel_size_mm, cfg["out"])
    outputs = [cfg["out"]]
    if cfg["png"]:
        _save_png(image.data, cfg["png"], cfg)
        outputs.append(cfg["png"])
    return outputs


@_command("recon-fdk", "cone-beam reconstruction of a circular scan", [
    Opt("sino", kind="input", required=True, help="cone-beam sinogram"),
    Opt("out", kind="output", required=True, help="volume file to write"),
    Opt("nx", type=int, positive=True, help="default: detector column count"),
    Opt("ny", type=int, positive=True, help="default: nx"),
    Opt("nz", type=int, positive=True, help="default: detector row count"),
    Opt("voxel-size", type=float, positive=True,
        help="mm, default: detector column spacing"),
    Opt("filter", choices=("ramp", "cosine", "hann"), default="ramp"),
    Opt("cutoff", type=float, default=1.0, positive=True),
    Opt("png", kind="output", help="optional midplane preview PNG"),
] + _WINDOW_OPTS)
def _cmd_recon_fdk(cfg) -> List[str]:
    sino = cio.read_sinogram(cfg["sino"])
    geom = sino.geometry
    if not isinstance(geom, ConeGeometry):
        raise ConfigError("recon-fdk needs a cone-beam sinogram")
    nx = cfg["nx"] or geom.det_count_u
    ny = cfg["ny"] or nx
    nz = cfg["nz"] or geom.det_count_v
    voxel = cfg["voxel_size"] or geom.det_spacing_mm_u
    grid = ImageGrid(int(nx), int(ny), int(nz), float(voxel))
    volume = fdk(sino, grid, FilterSpec(cfg["filter"], cfg["cutoff"]))
    cio.write_volume(volume.data, grid.voxel_size_mm, cfg["out"])
    outputs = [cfg["out"]]
    if cfg["png"]:
        _save_png(volume.data[int(nz) // 2], cfg["png"], cfg)
        outputs.append(cfg["png"])
    return outputs


@_command("recon-iter", "penalized least squares reconstruction", [
    Opt("sino", kind="input", required=True, help="parallel-beam sinogram"),
    Opt("out", kind="output", required=True,
        help="volume file (single slice) to write"),
    Opt("nx", type=int, positive=True, help="default: detector bin count"),
    Opt("ny", type=int, positive=True, help="default: nx"),
    Opt("voxel-size", type=float, positive=True,
        help="mm, default: detector spacing"),
    Opt("lam", type=float, default=0.01, help="regularization weight"),
    Opt("gamma", type=float, default=0.02, positive=True,
        help="gradient half-step length"),
    Opt("outer", type=int, default=4, positive=True,
        help="outer (half step + surrogate solve) rounds"),
    Opt("inner", type=int, default=25, positive=True,
        help="surrogate sweeps per round"),
    Opt("regularizer", choices=("tv", "none"), default="tv"),
    Opt("tv-eps", type=float, default=1e-3, positive=True,
        help="smoothing of the TV gradient"),
    Opt("init", choices=("fbp", "zero"), default="fbp",
        help="starting image"),
    Opt("trace", kind="input",
        help="sinogram-format 0/1 mask of rays to exclude from the fit"),
    Opt("metal-phantom", kind="input",
        help="phantom file whose metal primitives define the excluded trace"),
    Opt("material", default="iron",
        help="material name of the metal primitives"),
    Opt("objective-csv", kind="output",
        default=lambda r: r["out"] + ".objective.csv",
        help="per-iteration objective log"),
    Opt("png", kind="output", help="optional preview PNG"),
] + _WINDOW_OPTS)
def _cmd_recon_iter(cfg) -> List[str]:
    sino = cio.read_sinogram(cfg["sino"])
    if not isinstance(sino.geometry, ParallelGeometry):
        raise ConfigError("recon-iter needs a parallel-beam sinogram")
    if cfg["lam"] < 0:
        raise ConfigError("--lam must be nonnegative")
    if cfg["trace"] and cfg["metal_phantom"]:
        raise ConfigError("give either --trace or --metal-phantom, not both")
    grid = _grid_for_sinogram(sino.geometry, cfg)
    if cfg["trace"]:
        fidelity = MaskedFidelity(_read_trace(cfg["trace"], sino))
    elif cfg["metal_phantom"]:
        metal = _metal_primitives(cfg["metal_phantom"], cfg["material"])
        fidelity = MaskedFidelity(metal_trace(metal, sino.geometry))
    else:
        fidelity = MaskedFidelity.identity(sino.data.shape)
    _note(cfg, f"building system matrix for {grid.nx}x{grid.ny} voxels")
    model = build_system_model(sino.geometry, grid)
    reg_grad = None
    if cfg["regularizer"] == "tv":
        eps = cfg["tv_eps"]
        reg_grad = lambda m: tv_gradient(m, eps)
    itercfg = IterConfig(lam=cfg["lam"], gamma=cfg["gamma"],
                         n_outer=cfg["outer"], n_inner=cfg["inner"],
                         reg_grad=reg_grad)
    mu0 = None
    if cfg["init"] == "fbp":
        mu0 = fbp_2d(sino, grid, FilterSpec()).data.ravel()
    image, history = iterate_recon(sino.data.ravel(), model, fidelity,
                                   itercfg, mu0)
    cio.write_volume(image[None, :, :], grid.voxel_size_mm, cfg["out"])
    rows = ["k,l,objective"]
    rows += [f"{k},{l},{obj!r}" for k, l, obj in history]
    Path(cfg["objective_csv"]).write_text("\n".join(rows) + "\n")
    outputs = [cfg["out"], cfg["objective_csv"]]
    if cfg["png"]:
        _save_png(image, cfg["png"], cfg)
        outputs.append(cfg["png"])
    return outputs


@_command("interior-demo", "show a reconstruction-invisible interior image", [
    Opt("out-prefix", required=True, help="prefix for the three PNGs"),
    Opt("mu-png", kind="output",
        default=lambda r: r["out_prefix"] + "-mu.png"),
    Opt("with-null-png", kind="output",
        default=lambda r: r["out_prefix"] + "-with-null.png"),
    Opt("difference-png", kind="output",
        default=lambda r: r["out_prefix"] + "-difference.png"),
    Opt("grid-size", type=int, default=256, positive=True),
    Opt("voxel-size", type=float, default=1.0, positive=True, help="mm"),
    Opt("d-roi", type=float, default=25.0, positive=True,
        help="region-of-interest radius, mm"),
    Opt("l-roi", type=float, default=30.0, positive=True,
        help="truncation radius, mm (larger than --d-roi)"),
    Opt("theta0-deg", type=float, default=0.0,
        help="direction of the filtration lines"),
    Opt("moments", type=int, default=4, positive=True,
        help="vanishing moments of the null profile"),
    Opt("outer-support-mm", type=float, positive=True,
        help="default: chosen from the grid extent"),
    Opt("amplitude", type=float, default=0.5, positive=True,
        help="null image peak as a fraction of the phantom peak"),
])
def _cmd_interior_demo(cfg) -> List[str]:
    if not cfg["d_roi"] < cfg["l_roi"]:
        raise ConfigError("--d-roi must be smaller than --l-roi")
    n = cfg["grid_size"]
    grid = ImageGrid(n, n, 1, cfg["voxel_size"])
    phantom = AnalyticPhantom((Disc(0.0, 0.0, 0.8 * cfg["d_roi"],
                                    "soft_tissue"),))
    mu = monochromatize(phantom, grid, 70.0).data
    roi = InteriorConfig(cfg["d_roi"], cfg["l_roi"],
                         math.radians(cfg["theta0_deg"]))
    _note(cfg, "building the null profile")
    _profile, null_image = make_null_function(roi, grid, cfg["moments"],
                                              cfg["outer_support_mm"])
    tilde = cfg["amplitude"] * float(np.max(mu)) * null_image.data
    both = np.stack([mu, mu + tilde])
    center, width = _window_bounds(both, cfg.get("window_center"),
                                   cfg.get("window_width"))
    cio.write_png(mu, cfg["mu_png"], center, width)
    cio.write_png(mu + tilde, cfg["with_null_png"], center, width)
    half = float(np.max(np.abs(tilde))) or 1.0
    cio.write_png(tilde, cfg["difference_png"], 0.0, 2.0 * half)
    return [cfg["mu_png"], cfg["with_null_png"], cfg["difference_png"]]


@_command("bh-corrector", "additive beam-hardening artifact image", [
    Opt("metal-phantom", kind="input", required=True,
        help="phantom file holding the metal inserts"),
    Opt("material", default="iron",
        help="material name of the metal primitives"),
    Opt("out", kind="output", required=True,
        help="volume file (single slice) to write"),
    Opt("lam", type=float, default=6.0, positive=True,
        help="hardening excess per unit squared metal path"),
    Opt("nx", type=int, default=256, positive=True),
    Opt("ny", type=int, positive=True, default=lambda r: r.get("nx")),
    Opt("voxel-size", type=float, default=1.0, positive=True, help="mm"),
    Opt("views", type=int, default=360, positive=True),
    Opt("span-deg", type=float, default=180.0, positive=True),
    Opt("det-count", type=int, default=512, positive=True),
    Opt("det-spacing", type=float, default=1.0, positive=True, help="mm"),
    Opt("png", kind="output", help="optional preview PNG"),
] + _WINDOW_OPTS)
def _cmd_bh_corrector(cfg) -> List[str]:
    metal = _metal_primitives(cfg["metal_phantom"], cfg["material"])
    grid = ImageGrid(cfg["nx"], cfg["ny"], 1, cfg["voxel_size"])
    geom = ParallelGeometry(uniform_angles(cfg["views"], 0.0,
                                           math.radians(cfg["span_deg"])),
                            cfg["det_count"], cfg["det_spacing"])
    image = bh_corrector(metal, cfg["lam"], grid, geom)
    cio.write_volume(image.data[None, :, :], grid.voxel_size_mm, cfg["out"])
    outputs = [cfg["out"]]
    if cfg["png"]:
        _save_png(image.data, cfg["png"], cfg)
        outputs.append(cfg["png"])
    return outputs


@_command("streaks", "predict metal streak lines", [
    Opt("metal-phantom", kind="input", required=True,
        help="phantom file holding the metal inserts"),
    Opt("material", default="iron",
        help="material name of the metal primitives"),
    Opt("out", kind="output", required=True,
        help="CSV of predicted (theta_rad, s_mm) lines"),
    Opt("overlay-volume", kind="input",
        help="reconstruction to draw the lines onto"),
    Opt("overlay-png", kind="output",
        default=lambda r: (r["overlay_volume"] + ".overlay.png")
        if r.get("overlay_volume") else None,
        help="where the overlay rendering goes"),
] + _WINDOW_OPTS)
def _cmd_streaks(cfg) -> List[str]:
    metal = _metal_primitives(cfg["metal_phantom"], cfg["material"])
    lines = streak_predictor(metal)
    cio.write_streaks_csv(lines, cfg["out"])
    outputs = [cfg["out"]]
    if cfg["overlay_volume"]:
        data, voxel = cio.read_volume(cfg["overlay_volume"])
        midplane = data[data.shape[0] // 2]
        center, width = _window_bounds(midplane, cfg.get("window_center"),
                                       cfg.get("window_width"))
        u8 = _windowed_u8(midplane, center, width)
        _paint_lines(u8, lines, voxel)
        Image.fromarray(u8, mode="L").save(Path(cfg["overlay_png"]),
                                           format="PNG")
        outputs.append(cfg["overlay_png"])
    return outputs


def _paint_lines(u8: np.ndarray, lines, voxel: float) -> None:
    """Burn 1-pixel-wide white lines x cos(t) + y sin(t) = s into u8."""
    ny, nx = u8.shape
    xs = (np.arange(nx) - (nx - 1) / 2.0) * voxel
    ys = (np.arange(ny) - (ny - 1) / 2.0) * voxel
    mesh_x, mesh_y = np.meshgrid(xs, ys)
    for theta, s in lines:
        offsets = mesh_x * math.cos(theta) + mesh_y * math.sin(theta) - s
        u8[np.abs(offsets) <= 0.6 * voxel] = 255


@_command("mar", "fill the metal trace of a sinogram", [
    Opt("sino", kind="input", required=True,
        help="parallel or fan sinogram"),
    Opt("trace", kind="input", required=True,
        help="sinogram-format 0/1 mask of the metal trace"),
    Opt("method", choices=("li", "tv", "nmar"), default="li"),
    Opt("out", kind="output", required=True, help="corrected sinogram"),
    Opt("png", kind="output", default=lambda r: r["out"] + ".png",
        help="FBP preview of the corrected data"),
    Opt("dilate", type=int, default=1,
        help="extra detector bins treated as untrusted on each side"),
    Opt("lam-inpaint", type=float, default=0.1,
        help="smoothness weight of the tv method"),
    Opt("iterations", type=int, default=300, positive=True,
        help="tv method only"),
    Opt("tv-eps", type=float, default=1e-2, positive=True,
        help="tv method only"),
    Opt("prior-volume", kind="input",
        help="nmar prior image; default: thresholded FBP of the li fill"),
    Opt("air-below", type=float, default=0.01,
        help="prior threshold, 1/mm: below this is air"),
    Opt("bone-above", type=float, default=0.035,
        help="prior threshold, 1/mm: at or above this is bone"),
    Opt("tissue-mu", type=float, default=0.02,
        help="prior tissue value, 1/mm"),
    Opt("bone-mu", type=float, default=0.05, help="prior bone value, 1/mm"),
    Opt("nx", type=int, positive=True,
        help="preview grid, default: detector bin count"),
    Opt("ny", type=int, positive=True, help="default: nx"),
    Opt("voxel-size", type=float, positive=True,
        help="mm, default: detector spacing"),
] + _WINDOW_OPTS)
def _cmd_mar(cfg) -> List[str]:
    sino = cio.read_sinogram(cfg["sino"])
    if isinstance(sino.geometry, ConeGeometry):
        raise ConfigError("mar works on 2-d (parallel or fan) sinograms")
    if cfg["dilate"] < 0:
        raise ConfigError("--dilate must be nonnegative")
    if cfg["lam_inpaint"] < 0:
        raise ConfigError("--lam-inpaint must be nonnegative")
    trace = _read_trace(cfg["trace"], sino)
    problem = InpaintProblem(sino, trace, cfg["lam_inpaint"], cfg["dilate"])
    grid = _grid_for_sinogram(sino.geometry, cfg)
    if cfg["method"] == "li":
        corrected = li_inpaint(problem)
    elif cfg["method"] == "tv":
        corrected = tv_inpaint(problem, iterations=cfg["iterations"],
                               eps_tv=cfg["tv_eps"])
    else:
        if cfg["prior_volume"]:
            data, voxel = cio.read_volume(cfg["prior_volume"])
            prior_grid = ImageGrid(data.shape[2], data.shape[1], 1, voxel)
            prior = VoxelPhantom(data[0], prior_grid)
        else:
            _note(cfg, "building the nmar prior from an li-filled FBP")
            seed_image = _fbp_any(li_inpaint(problem), grid, FilterSpec())
            levels = threshold_prior(seed_image.data, cfg["air_below"],
                                     cfg["bone_above"], cfg["tissue_mu"],
                                     cfg["bone_mu"])
            prior = VoxelPhantom(levels, grid)
        corrected = nmar(sino, prior, trace, dilate=cfg["dilate"])
    cio.write_sinogram(corrected, cfg["out"])
    preview = _fbp_any(corrected, grid, FilterSpec())
    _save_png(preview.data, cfg["png"], cfg)
    return [cfg["out"], cfg["png"]]


@_command("panorama", "unroll a volume along its dental arch", [
    Opt("volume", kind="input", required=True, help="volume file"),
    Opt("out", kind="output", required=True,
        help="panoramic image (volume format, one slice)"),
    Opt("png", kind="output", default=lambda r: r["out"] + ".png"),
    Opt("curve-csv", kind="output",
        default=lambda r: r["out"] + ".curve.csv",
        help="fitted arch curve samples"),
    Opt("half-width", type=float, default=15.0, positive=True,
        help="integration half-depth across the arch, mm"),
    Opt("step", type=float, default=0.5, positive=True,
        help="quadrature step along the normals, mm"),
    Opt("jaw", choices=("none", "lower", "upper"), default="none",
        help="fit the arch on one jaw instead of all segmented bone"),
    Opt("degree", type=int, default=4, positive=True,
        help="arch polynomial degree"),
    Opt("samples", type=int, default=200, positive=True,
        help="stations along the arch"),
] + _WINDOW_OPTS)
def _cmd_panorama(cfg) -> List[str]:
    data, voxel = cio.read_volume(cfg["volume"])
    nz, ny, nx = data.shape
    grid = ImageGrid(nx, ny, nz, voxel)
    _threshold, bone = otsu_threshold(data)
    if cfg["jaw"] != "none":
        split = split_jaws(bone)
        bone = split.lower_mask if cfg["jaw"] == "lower" else split.upper_mask
    _note(cfg, f"fitting a degree-{cfg['degree']} arch to "
               f"{int(bone.sum())} bone voxels")
    curve = fit_arch_curve(bone, grid, cfg["degree"], cfg["samples"],
                           cfg["half_width"])
    pano = panoramic_project(VoxelPhantom(data, grid), curve, cfg["step"])
    cio.write_volume(pano.data[None, :, :], voxel, cfg["out"])
    _save_png(pano.data, cfg["png"], cfg)
    cio.write_curve_csv(curve, cfg["curve_csv"])
    return [cfg["out"], cfg["png"], cfg["curve_csv"]]


# ---------------------------------------------------------------------------
# selftest


def _check_anchors() -> None:
    anchors = {"soft_tissue": (0.40, 0.19), "bone": (2.56, 0.43),
               "iron": (64.38, 4.69)}
    for name, (mu30, mu80) in anchors.items():
        table = builtin_material(name)
        for energy, expected in ((30.0, mu30), (80.0, mu80)):
            got = float(attenuation_at(table, energy))
            assert abs(got - expected) <= 1e-12, \
                f"{name} at {energy} keV: {got} != {expected}"


def _check_delta_is_mono() -> None:
    phantom = AnalyticPhantom((Disc(0.0, 0.0, 10.0, "soft_tissue"),))
    geom = ParallelGeometry(uniform_angles(16, 0.0, np.pi), 32, 1.0)
    poly = polychromatic_project(phantom, geom, delta_spectrum(60.0)).data
    mono = radon_2d(phantom, geom, energy_keV=60.0).data / 10.0
    scale = float(np.max(np.abs(mono)))
    assert np.max(np.abs(poly - mono)) <= 1e-12 * scale, \
        "delta spectrum disagrees with monochromatic projection"


def _check_voxel_radon() -> None:
    radius, n, span = 20.0, 256, 44.0
    phantom = AnalyticPhantom((Disc(0.0, 0.0, radius, "soft_tissue"),))
    grid = ImageGrid(n, n, 1, span / n)
    voxels = monochromatize(phantom, grid, 70.0, supersample=8)
    geom = ParallelGeometry(uniform_angles(8, 0.0, np.pi), n, span / n)
    sino = radon_2d(voxels, geom, method="siddon").data
    mu = float(attenuation_at(builtin_material("soft_tissue"), 70.0))
    offsets = geom.s_coords()
    chords = 2.0 * np.sqrt(np.maximum(radius ** 2 - offsets ** 2, 0.0))
    expected = np.tile(mu * chords, (8, 1))
    keep = chords >= 0.3 * radius  # tangent rays have no stable chord
    rel = float(np.max(np.abs(sino[:, keep] - expected[:, keep])
                       / expected[:, keep]))
    assert rel < 0.02, f"voxel projection off by {rel:.3%}"


def _check_surrogate_forms() -> None:
    grid = ImageGrid(8, 8, 1, 0.5)
    geom = ParallelGeometry(uniform_angles(6, 0.0, np.pi), 12, 0.5)
    model = build_system_model(geom, grid)
    rng = np.random.default_rng(3)
    z = rng.normal(size=model.image_shape[0] * model.image_shape[1])
    anchor = rng.normal(size=z.size)
    target = rng.normal(size=model.n_rays)
    h = np.ones(model.n_rays)
    first = sps_update_matrix(z, anchor, target, model, h, 1.0)
    second = sps_update_pixelwise(z, anchor, target, model, h, 1.0)
    scale = float(np.max(np.abs(first))) or 1.0
    assert np.max(np.abs(first - second)) <= 1e-12 * scale, \
        "surrogate update forms disagree"


def _check_li_rows() -> None:
    geom = ParallelGeometry(np.array([0.0]), 4, 1.0)
    sino = Sinogram(np.array([[2.0, 0.0, 0.0, 4.0]]), geom)
    trace = np.array([[False, True, True, False]])
    filled = li_inpaint(InpaintProblem(sino, trace, dilate=0)).data
    expected = np.array([[2.0, 8.0 / 3.0, 10.0 / 3.0, 4.0]])
    assert np.max(np.abs(filled - expected)) <= 1e-12, \
        "linear interpolation fill is wrong"


def _check_otsu() -> None:
    values = np.array([10.0] * 5 + [200.0] * 5)
    _threshold, binary = otsu_threshold(values)
    assert binary.tolist() == [False] * 5 + [True] * 5, \
        "two-level threshold misclassifies"


def _check_roundtrip() -> None:
    geom = ParallelGeometry(uniform_angles(5, 0.0, np.pi), 7, 1.5)
    sino = Sinogram(np.arange(35, dtype=float).reshape(5, 7), geom)
    with tempfile.TemporaryDirectory() as tmp:
        first = Path(tmp) / "a.sino"
        second = Path(tmp) / "b.sino"
        cio.write_sinogram(sino, first)
        cio.write_sinogram(cio.read_sinogram(first), second)
        assert first.read_bytes() == second.read_bytes(), \
            "sinogram round trip is not byte stable"
        vol_first = Path(tmp) / "a.vol"
        vol_second = Path(tmp) / "b.vol"
        cio.write_volume(np.arange(24, dtype=float).reshape(2, 3, 4), 0.5,
                         vol_first)
        data, voxel = cio.read_volume(vol_first)
        cio.write_volume(data, voxel, vol_second)
        assert vol_first.read_bytes() == vol_second.read_bytes(), \
            "volume round trip is not byte stable"


def _check_bitangent_count() -> None:
    metal = AnalyticPhantom((Disc(-10.0, 0.0, 3.0, "iron"),
                             Disc(10.0, 0.0, 3.0, "iron")))
    lines = streak_predictor(metal)
    assert len(lines) == 4, f"expected 4 bitangent lines, got {len(lines)}"


@_command("selftest", "run the built-in oracle checks", [])
def _cmd_selftest(cfg) -> List[str]:
    checks = [
        ("attenuation anchors", _check_anchors),
        ("delta spectrum is monochromatic", _check_delta_is_mono),
        ("voxel projection matches disc chords", _check_voxel_radon),
        ("surrogate update forms agree", _check_surrogate_forms),
        ("trace interpolation", _check_li_rows),
        ("binary threshold", _check_otsu),
        ("file format round trip", _check_roundtrip),
        ("bitangent line count", _check_bitangent_count),
    ]
    for name, check in checks:
        check()
        print(f"ok {name}")
    print(f"selftest passed ({len(checks)} checks)")
    return []


# ---------------------------------------------------------------------------
# driver


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbctsim",
        description="simulate and reconstruct dental cone-beam CT scans")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    for name, (help_text, opts, _handler) in _COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=None, metavar="PATH",
                         help="key=value file supplying defaults for any flag")
        for opt in opts:
            flag = "--" + opt.name
            if opt.kind == "flag":
                cmd.add_argument(flag, action="store_const", const=True,
                                 default=None, help=opt.help)
            else:
                cmd.add_argument(flag, type=opt.type, default=None,
                                 choices=opt.choices, help=opt.help)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_help(sys.stderr)
        return 2
    _help_text, opts, handler = _COMMANDS[ns.command]
    try:
        entries = read_config_file(ns.config) if ns.config else {}
        flag_values = {opt.dest: getattr(ns, opt.dest) for opt in opts}
        cfg = resolve_options(opts, flag_values, entries)
        _check_paths(opts, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        outputs = handler(cfg)
    except ConfigError as exc:
        # a handler can only discover some configuration problems after
        # opening its inputs (wrong geometry kind, mismatched shapes)
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        primary = _primary_output(opts, cfg)
        diag = (primary + ".diagnostics.json") if primary \
            else "cbctsim-diagnostics.json"
        _write_diagnostics(diag, ns.command, cfg, exc)
        print(f"numerical failure: {exc} (diagnostics in {diag})",
              file=sys.stderr)
        return 3
    if outputs:
        manifest_path = outputs[0] + ".manifest.json"
        write_manifest(manifest_path, ns.command, opts, cfg, outputs)
        for path in outputs:
            print(f"wrote {path}")
        print(f"manifest {manifest_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
