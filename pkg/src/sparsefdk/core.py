"""Acquisition geometry, array containers and the CBCT binary file format.

Array layout used throughout the package:

* volumes are stored as ``(N_z, N_y, N_x)`` arrays (C-order, z slowest);
* projection stacks are stored as ``(M, N_s, N_v)`` arrays (C-order, angle
  slowest, axial detector index fastest).

The isocenter sits at the volume center, i.e. voxel index ``(N - 1) / 2`` on
every axis, and detector coordinate ``(s, v) = (0, 0)`` is the detector center.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"CBCT"
DTYPE_TAG = "f32le"
KINDS = ("volume", "projections", "model")


class GeometryError(ValueError):
    """Raised for geometries or arrays violating the acquisition invariants."""


class ContainerError(ValueError):
    """Raised when a CBCT container cannot be written or decoded."""


def _triple(value, name: str, cast) -> tuple:
    try:
        out = tuple(cast(v) for v in value)
    except TypeError as exc:
        raise GeometryError(f"{name} must be a sequence") from exc
    return out


@dataclass(frozen=True)
class Geometry:
    """Circular-orbit cone-beam acquisition.

    Distances are in mm, angles in radians. ``det_shape`` is ``(N_s, N_v)``
    and ``vol_shape`` is ``(N_x, N_y, N_z)``.
    """

    n_angles: int
    angular_range: float
    sid: float
    sdd: float
    det_shape: tuple[int, int]
    det_spacing: tuple[float, float]
    vol_shape: tuple[int, int, int]
    vol_spacing: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "n_angles", int(self.n_angles))
        object.__setattr__(self, "angular_range", float(self.angular_range))
        object.__setattr__(self, "sid", float(self.sid))
        object.__setattr__(self, "sdd", float(self.sdd))
        object.__setattr__(self, "det_shape", _triple(self.det_shape, "det_shape", int))
        object.__setattr__(self, "det_spacing", _triple(self.det_spacing, "det_spacing", float))
        object.__setattr__(self, "vol_shape", _triple(self.vol_shape, "vol_shape", int))
        object.__setattr__(self, "vol_spacing", _triple(self.vol_spacing, "vol_spacing", float))
        self.validate()

    def validate(self) -> None:
        if len(self.det_shape) != 2 or len(self.det_spacing) != 2:
            raise GeometryError("detector shape and spacing need exactly 2 entries")
        if len(self.vol_shape) != 3 or len(self.vol_spacing) != 3:
            raise GeometryError("volume shape and spacing need exactly 3 entries")
        numbers = (self.angular_range, self.sid, self.sdd, *self.det_spacing, *self.vol_spacing)
        if not all(math.isfinite(x) for x in numbers):
            raise GeometryError("geometry values must be finite")
        if self.sid <= 0:
            raise GeometryError(f"sid must be positive, got {self.sid}")
        if self.sdd <= self.sid:
            raise GeometryError(f"sdd ({self.sdd}) must exceed sid ({self.sid})")
        if self.angular_range <= 0:
            raise GeometryError("angular_range must be positive")
        counts = (self.n_angles, *self.det_shape, *self.vol_shape)
        if min(counts) < 4:
            raise GeometryError(f"all counts must be >= 4, got {counts}")
        if self.n_angles % 4:
            raise GeometryError(f"n_angles must be divisible by 4, got {self.n_angles}")
        if self.det_shape[0] % 4 or self.det_shape[1] % 4:
            raise GeometryError(f"detector dims must be divisible by 4, got {self.det_shape}")
        if min(*self.det_spacing, *self.vol_spacing) <= 0:
            raise GeometryError("spacings must be strictly positive")

    @property
    def delta_theta(self) -> float:
        return self.angular_range / self.n_angles

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * self.delta_theta

    @property
    def stack_shape(self) -> tuple[int, int, int]:
        return (self.n_angles, self.det_shape[0], self.det_shape[1])

    @property
    def volume_array_shape(self) -> tuple[int, int, int]:
        """Storage shape of a volume, ``(N_z, N_y, N_x)``."""
        nx, ny, nz = self.vol_shape
        return (nz, ny, nx)

    def detector_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates ``(s, v)`` in mm."""
        ns, nv = self.det_shape
        ds, dv = self.det_spacing
        return (np.arange(ns) - (ns - 1) / 2) * ds, (np.arange(nv) - (nv - 1) / 2) * dv

    def voxel_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-center coordinates ``(x, y, z)`` in mm, one 1D array per axis."""
        return tuple(
            (np.arange(n) - (n - 1) / 2) * d for n, d in zip(self.vol_shape, self.vol_spacing)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_angles": self.n_angles,
            "angular_range": self.angular_range,
            "sid": self.sid,
            "sdd": self.sdd,
            "det_shape": list(self.det_shape),
            "det_spacing": list(self.det_spacing),
            "vol_shape": list(self.vol_shape),
            "vol_spacing": list(self.vol_spacing),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Geometry":
        names = ("n_angles", "angular_range", "sid", "sdd",
                 "det_shape", "det_spacing", "vol_shape", "vol_spacing")
        missing = [k for k in names if k not in d]
        if missing:
            raise GeometryError(f"geometry is missing fields: {', '.join(missing)}")
        return cls(**{k: d[k] for k in names})

    @classmethod
    def load(cls, path) -> "Geometry":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise GeometryError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise GeometryError(f"{path}: geometry must be a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def clinical_geometry() -> Geometry:
    """The full-size clinical acquisition (400 views, 800x800 detector, 512^3 volume)."""
    return Geometry(
        n_angles=400,
        angular_range=2 * math.pi,
        sid=1200.0,
        sdd=1500.0,
        det_shape=(800, 800),
        det_spacing=(0.5, 0.5),
        vol_shape=(512, 512, 512),
        vol_spacing=(0.5, 0.5, 0.5),
    )


def _finite_array(data, shape, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise GeometryError(f"{what} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Volume:
    """Voxel grid of attenuation values (mm^-1); ``data`` is ``(N_z, N_y, N_x)``."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise GeometryError(f"volume data must be 3D, got shape {arr.shape}")
        object.__setattr__(self, "data", _finite_array(arr, arr.shape, "volume"))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(N_x, N_y, N_z)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @classmethod
    def zeros(cls, geom: Geometry) -> "Volume":
        return cls(np.zeros(geom.volume_array_shape), geom.vol_spacing)

    def check(self, geom: Geometry) -> None:
        if self.shape != geom.vol_shape:
            raise GeometryError(f"volume shape {self.shape} does not match geometry {geom.vol_shape}")


@dataclass(frozen=True)
class ProjectionStack:
    """Line integrals for every view; ``data`` is ``(M, N_s, N_v)``."""

    geometry: Geometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "data", _finite_array(self.data, self.geometry.stack_shape, "projection stack")
        )

    @classmethod
    def zeros(cls, geom: Geometry) -> "ProjectionStack":
        return cls(geom, np.zeros(geom.stack_shape))

    def with_data(self, data: np.ndarray) -> "ProjectionStack":
        return ProjectionStack(self.geometry, data)


# --------------------------------------------------------------------------
# CBCT container
# --------------------------------------------------------------------------


def _expected_length(header: dict[str, Any]) -> int:
    kind = header.get("kind")
    if kind not in KINDS:
        raise ContainerError(f"unknown container kind {kind!r}")
    dims = header.get("dims")
    if not isinstance(dims, (list, tuple)) or not all(isinstance(d, int) for d in dims):
        raise ContainerError("header 'dims' must be a list of integers")
    if kind == "model":
        # (w_rows, w_cols, h_rows, h_cols)
        if len(dims) != 4 or min(dims) < 1:
            raise ContainerError(f"model dims must be 4 positive counts, got {dims}")
        return dims[0] * dims[1] + dims[2] * dims[3]
    if len(dims) != 3 or min(dims) < 4:
        raise ContainerError(f"{kind} dims must be 3 counts >= 4, got {dims}")
    return dims[0] * dims[1] * dims[2]


def write_container(path, header: dict[str, Any], payload) -> None:
    """Write ``payload`` as a CBCT container.

    Layout: ``b"CBCT"``, little-endian uint32 header length, UTF-8 JSON
    header, then the payload as little-endian float32 in C order.
    """
    header = dict(header)
    header.setdefault("dtype", DTYPE_TAG)
    if header["dtype"] != DTYPE_TAG:
        raise ContainerError("unsupported encoding")
    flat = np.asarray(payload, dtype=np.float64).ravel()
    expected = _expected_length(header)
    if flat.size != expected:
        raise ContainerError(
            f"payload has {flat.size} values but header dims {header['dims']} need {expected}"
        )
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    raw = np.asarray(payload).ravel().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(raw)


def read_container(path) -> tuple[dict[str, Any], np.ndarray]:
    """Read a CBCT container; returns ``(header, float32 payload)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ContainerError("not a CBCT container")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if 8 + hlen > len(buf):
        raise ContainerError("corrupt header")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError("corrupt header") from exc
    if not isinstance(header, dict):
        raise ContainerError("corrupt header")
    if header.get("dtype") != DTYPE_TAG:
        raise ContainerError("unsupported encoding")
    expected = _expected_length(header)
    body = buf[8 + hlen :]
    if len(body) != 4 * expected:
        raise ContainerError("corrupt payload")
    return header, np.frombuffer(body, dtype="<f4").copy()


def save_volume(path, vol: Volume) -> None:
    write_container(
        path,
        {"kind": "volume", "dims": list(vol.shape), "spacing_mm": list(vol.spacing)},
        vol.data,
    )


def load_volume(path) -> Volume:
    header, payload = read_container(path)
    if header["kind"] != "volume":
        raise ContainerError(f"expected a volume container, got {header['kind']!r}")
    nx, ny, nz = header["dims"]
    spacing = header.get("spacing_mm", (1.0, 1.0, 1.0))
    return Volume(payload.astype(np.float64).reshape(nz, ny, nx), tuple(spacing))


def save_projections(path, stack: ProjectionStack) -> None:
    geom = stack.geometry
    write_container(
        path,
        {
            "kind": "projections",
            "dims": list(geom.stack_shape),
            "spacing_mm": list(geom.det_spacing),
            "geometry": geom.to_dict(),
        },
        stack.data,
    )


def load_projections(path) -> ProjectionStack:
    header, payload = read_container(path)
    if header["kind"] != "projections":
        raise ContainerError(f"expected a projections container, got {header['kind']!r}")
    if "geometry" not in header:
        raise ContainerError("projections container lacks a geometry")
    geom = Geometry.from_dict(header["geometry"])
    if list(geom.stack_shape) != list(header["dims"]):
        raise ContainerError("header dims disagree with the embedded geometry")
    return ProjectionStack(geom, payload.astype(np.float64).reshape(geom.stack_shape))
