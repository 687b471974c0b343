"""Binary and tabular file formats.

Sinograms and volumes use a line-oriented text header followed by raw
little-endian 32-bit floats, so files stay portable, diffable at the
header level, and bit-reproducible.  Write/read/write of the same object
produces identical bytes, which the command-line manifests rely on.

Header layout: a magic line, ``key = value`` lines, then a single
``end_header`` line; the payload starts on the next byte.  Sinogram
payloads are view-major (then v, then u); volumes are x-fastest.  An
optional missing-sample bitmask follows sinogram data as packed bits in
the same ordering.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import ConeGeometry, FanGeometry, ParallelGeometry
from .panoramic import ArchCurve
from .projector import Sinogram

__all__ = [
    "read_curve_csv",
    "read_sinogram",
    "read_streaks_csv",
    "read_volume",
    "write_curve_csv",
    "write_png",
    "write_sinogram",
    "write_streaks_csv",
    "write_volume",
]

_SINO_MAGIC = "cbctsim-sinogram-v1"
_VOLUME_MAGIC = "cbctsim-volume-v1"


def _angle_params(angles: np.ndarray) -> tuple[float, float]:
    """Uniform-sweep parameters (start, step) or an error."""
    angles = np.asarray(angles, dtype=float)
    if angles.size == 1:
        return float(angles[0]), 0.0
    step = (angles[-1] - angles[0]) / (angles.size - 1)
    dev = np.abs(np.diff(angles) - step).max()
    if dev > 1e-9 * max(1.0, abs(step)):
        raise ValueError("only uniformly spaced view angles can be "
                         f"serialized (spacing deviates by {dev:.3g} rad)")
    return float(angles[0]), float(step)


def _format_header(magic: str, items: list[tuple[str, str]]) -> bytes:
    lines = [magic]
    lines += [f"{key} = {value}" for key, value in items]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _parse_header(blob: bytes, magic: str):
    """Split the header off a file blob: (dict, payload_bytes)."""
    marker = b"end_header\n"
    pos = blob.find(marker)
    if pos < 0:
        raise ValueError("missing end_header line")
    head = blob[:pos].decode("ascii").splitlines()
    if not head or head[0] != magic:
        raise ValueError(f"bad magic line (wanted {magic!r})")
    fields = {}
    for line in head[1:]:
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields, blob[pos + len(marker):]


def write_sinogram(sino: Sinogram, path) -> None:
    """Serialize projection data with its acquisition geometry."""
    geom = sino.geometry
    start, step = _angle_params(geom.angles)
    if isinstance(geom, ParallelGeometry):
        kind = "parallel"
        cu, su = geom.det_count, geom.det_spacing_mm
        cv, sv = 1, 0.0
        r, big_r, off = 0.0, 0.0, 0.0
    elif isinstance(geom, FanGeometry):
        kind = "fan"
        cu, su = geom.det_count_u, geom.det_spacing_mm_u
        cv, sv = 1, 0.0
        r, big_r, off = geom.r_mm, geom.R_mm, 0.0
    elif isinstance(geom, ConeGeometry):
        kind = "cone"
        cu, su = geom.det_count_u, geom.det_spacing_mm_u
        cv, sv = geom.det_count_v, geom.det_spacing_mm_v
        r, big_r, off = geom.r_mm, geom.R_mm, geom.offset_fraction
    else:
        raise TypeError(f"unsupported geometry {type(geom).__name__}")
    items = [
        ("type", kind),
        ("angles_count", str(geom.n_views)),
        ("angle_start_rad", repr(start)),
        ("angle_step_rad", repr(step)),
        ("det_count_u", str(cu)),
        ("det_spacing_mm_u", repr(float(su))),
        ("det_count_v", str(cv)),
        ("det_spacing_mm_v", repr(float(sv))),
        ("r_mm", repr(float(r))),
        ("R_mm", repr(float(big_r))),
        ("offset_fraction", repr(float(off))),
        ("dtype", "f32le"),
        ("dims", " ".join(str(n) for n in sino.data.shape)),
        ("missing", "1" if sino.missing is not None else "0"),
    ]
    payload = np.ascontiguousarray(sino.data, dtype="<f4").tobytes()
    if sino.missing is not None:
        payload += np.packbits(sino.missing.ravel()).tobytes()
    Path(path).write_bytes(_format_header(_SINO_MAGIC, items) + payload)


def read_sinogram(path) -> Sinogram:
    fields, payload = _parse_header(Path(path).read_bytes(), _SINO_MAGIC)
    if fields.get("dtype") != "f32le":
        raise ValueError(f"unsupported dtype {fields.get('dtype')!r}")
    n_views = int(fields["angles_count"])
    angles = (float(fields["angle_start_rad"])
              + float(fields["angle_step_rad"]) * np.arange(n_views))
    kind = fields["type"]
    cu = int(fields["det_count_u"])
    su = float(fields["det_spacing_mm_u"])
    if kind == "parallel":
        geom = ParallelGeometry(angles, cu, su)
    elif kind == "fan":
        geom = FanGeometry(angles, cu, su, float(fields["r_mm"]),
                           float(fields["R_mm"]))
    elif kind == "cone":
        geom = ConeGeometry(angles, cu, su, int(fields["det_count_v"]),
                            float(fields["det_spacing_mm_v"]),
                            float(fields["r_mm"]), float(fields["R_mm"]),
                            float(fields["offset_fraction"]))
    else:
        raise ValueError(f"unknown geometry type {kind!r}")
    dims = tuple(int(n) for n in fields["dims"].split())
    count = int(np.prod(dims))
    data = np.frombuffer(payload[:4 * count], dtype="<f4").reshape(dims)
    missing = None
    if fields.get("missing") == "1":
        packed = np.frombuffer(payload[4 * count:], dtype=np.uint8)
        missing = np.unpackbits(packed)[:count].astype(bool).reshape(dims)
    return Sinogram(data.astype(np.float64), geom, missing=missing)


def write_volume(data, voxel_size_mm: float, path) -> None:
    """Serialize a (nz, ny, nx) volume or (ny, nx) slice, x-fastest."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 2:
        data = data[None, :, :]
    if data.ndim != 3:
        raise ValueError("volume must be 2D or 3D")
    if not voxel_size_mm > 0:
        raise ValueError("voxel_size_mm must be positive")
    nz, ny, nx = data.shape
    items = [
        ("dims", f"{nx} {ny} {nz}"),
        ("voxel_size_mm", repr(float(voxel_size_mm))),
        ("dtype", "f32le"),
    ]
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    Path(path).write_bytes(_format_header(_VOLUME_MAGIC, items) + payload)


def read_volume(path) -> tuple[np.ndarray, float]:
    """Read a volume file: ((nz, ny, nx) float array, voxel_size_mm)."""
    fields, payload = _parse_header(Path(path).read_bytes(), _VOLUME_MAGIC)
    if fields.get("dtype") != "f32le":
        raise ValueError(f"unsupported dtype {fields.get('dtype')!r}")
    nx, ny, nz = (int(n) for n in fields["dims"].split())
    data = np.frombuffer(payload[:4 * nx * ny * nz], dtype="<f4")
    return (data.reshape(nz, ny, nx).astype(np.float64),
            float(fields["voxel_size_mm"]))


def write_png(image, path, center: float, width: float) -> None:
    """8-bit grayscale export with an explicit display window.

    Values map linearly from [center - width/2, center + width/2] onto
    0..255 and clip outside it.  Row 0 of the array is the top image row.
    """
    if not width > 0:
        raise ValueError("window width must be positive")
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("PNG export takes a 2D image")
    lo = center - 0.5 * width
    u8 = np.clip((image - lo) / width * 255.0, 0.0, 255.0)
    Image.fromarray(u8.astype(np.uint8), mode="L").save(Path(path),
                                                        format="PNG")


def write_curve_csv(curve: ArchCurve, path) -> None:
    lines = ["s,x_mm,y_mm,nx,ny"]
    for s, (x, y), (nx, ny) in zip(curve.s, curve.points, curve.normals):
        lines.append(f"{float(s)!r},{float(x)!r},{float(y)!r},"
                     f"{float(nx)!r},{float(ny)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve_csv(path, half_width_mm: float = 15.0) -> ArchCurve:
    rows = [ln.strip() for ln in Path(path).read_text().splitlines()
            if ln.strip()]
    if not rows or rows[0].replace(" ", "") != "s,x_mm,y_mm,nx,ny":
        raise ValueError("curve CSV must start with header "
                         "'s,x_mm,y_mm,nx,ny'")
    values = np.array([[float(c) for c in ln.split(",")] for ln in rows[1:]])
    if values.shape[1] != 5:
        raise ValueError("curve CSV rows need 5 columns")
    return ArchCurve(values[:, 1:3], values[:, 3:5], values[:, 0],
                     half_width_mm)


def write_streaks_csv(lines_thetas_s, path) -> None:
    """Write predicted streak lines as rows of (theta_rad, s_mm)."""
    out = ["theta_rad,s_mm"]
    for theta, s in lines_thetas_s:
        out.append(f"{float(theta)!r},{float(s)!r}")
    Path(path).write_text("\n".join(out) + "\n")


def read_streaks_csv(path) -> np.ndarray:
    rows = [ln.strip() for ln in Path(path).read_text().splitlines()
            if ln.strip()]
    if not rows or rows[0].replace(" ", "") != "theta_rad,s_mm":
        raise ValueError("streak CSV must start with header 'theta_rad,s_mm'")
    if len(rows) == 1:
        return np.zeros((0, 2))
    return np.array([[float(c) for c in ln.split(",")] for ln in rows[1:]])
