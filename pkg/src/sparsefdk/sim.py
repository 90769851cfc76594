"""Ellipsoid phantoms and Poisson transmission noise.

Noise is reproducible across platforms: every detector cell draws its
uniforms from SplitMix64 applied to a counter built from ``(seed, cell index,
draw index)``, so the result does not depend on evaluation order or on the
numpy RNG implementation. Counts are sampled by inverse-CDF sequential search
when the mean is below 10 and by a rounded normal (Box-Muller) otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import Geometry, GeometryError, ProjectionStack, Volume

MU_WATER = 0.02  # mm^-1


@dataclass(frozen=True)
class EllipsoidSpec:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    euler_z_rotation: float = 0.0
    density: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        if len(self.center) != 3 or len(self.semi_axes) != 3:
            raise GeometryError("ellipsoid center and semi_axes need 3 entries")
        if not all(a > 0 and math.isfinite(a) for a in self.semi_axes):
            raise GeometryError(f"semi-axes must be positive, got {self.semi_axes}")

    def contains(self, x, y, z):
        """Boolean mask of points inside (boundary included)."""
        c, s = math.cos(self.euler_z_rotation), math.sin(self.euler_z_rotation)
        dx = np.asarray(x) - self.center[0]
        dy = np.asarray(y) - self.center[1]
        dz = np.asarray(z) - self.center[2]
        # coordinates in the ellipsoid's own frame (rotate by -phi)
        u = c * dx + s * dy
        w = -s * dx + c * dy
        a, b, cc = self.semi_axes
        return (u / a) ** 2 + (w / b) ** 2 + (dz / cc) ** 2 <= 1.0

    def rotated(self, phi: float) -> "EllipsoidSpec":
        """This ellipsoid rotated by ``phi`` about the z axis through the origin."""
        c, s = math.cos(phi), math.sin(phi)
        x, y, z = self.center
        return EllipsoidSpec((c * x - s * y, s * x + c * y, z), self.semi_axes,
                             self.euler_z_rotation + phi, self.density)

    @classmethod
    def from_dict(cls, d) -> "EllipsoidSpec":
        try:
            return cls(d["center"], d["semi_axes"], d.get("euler_z_rotation", 0.0), d["density"])
        except (KeyError, TypeError) as exc:
            raise GeometryError(f"invalid ellipsoid record {d!r}") from exc

    def to_dict(self) -> dict:
        return {"center": list(self.center), "semi_axes": list(self.semi_axes),
                "euler_z_rotation": self.euler_z_rotation, "density": self.density}


def load_specs(path) -> list[EllipsoidSpec]:
    """Read a JSON list of ellipsoid records."""
    with open(path, encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GeometryError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(records, list) or not records:
        raise GeometryError(f"{path}: expected a non-empty JSON list of ellipsoids")
    return [EllipsoidSpec.from_dict(r) for r in records]


# Yu-Ye-Wang 3D head phantom: (A, a, b, c, x0, y0, z0, phi[deg]) in units of
# the half field of view. Only z rotations, which is what EllipsoidSpec supports.
_SHEPP3D = (
    (1.0, 0.6900, 0.920, 0.900, 0.0, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.880, 0.0, 0.0, 0.0, 0.0),
    (-0.2, 0.4100, 0.160, 0.210, -0.22, 0.0, -0.25, 108.0),
    (-0.2, 0.3100, 0.110, 0.220, 0.22, 0.0, -0.25, 72.0),
    (0.2, 0.2100, 0.250, 0.500, 0.0, 0.35, -0.25, 0.0),
    (0.2, 0.0460, 0.046, 0.046, 0.0, 0.1, -0.25, 0.0),
    (0.1, 0.0460, 0.023, 0.020, -0.08, -0.65, -0.25, 0.0),
    (0.1, 0.0460, 0.023, 0.020, 0.06, -0.65, -0.25, 90.0),
    (0.2, 0.0560, 0.040, 0.100, 0.06, -0.105, 0.625, 90.0),
    (-0.2, 0.0560, 0.056, 0.100, 0.0, 0.100, 0.625, 0.0),
)


def shepp3d(geom: Geometry, mu: float = MU_WATER) -> list[EllipsoidSpec]:
    """Ten-ellipsoid head phantom scaled to the smallest half-extent of the volume."""
    half = min(n * d for n, d in zip(geom.vol_shape, geom.vol_spacing)) / 2
    return [
        EllipsoidSpec((x0 * half, y0 * half, z0 * half), (a * half, b * half, c * half),
                      math.radians(phi), amp * mu)
        for amp, a, b, c, x0, y0, z0, phi in _SHEPP3D
    ]


def jittered_shepp3d(geom: Geometry, rng: np.random.Generator, amount: float = 0.08,
                     mu: float = MU_WATER, min_shell: float | None = None) -> list[EllipsoidSpec]:
    """A random variant of :func:`shepp3d`.

    The skull pair is scaled as a whole by up to ``amount`` (it must stay
    nested); inner ellipsoids get independent jitter on centers, axes,
    rotation and density. The finished phantom is rotated about z by a
    uniform random angle, so no view direction is special.

    ``min_shell`` (mm), when given, thickens the skull so that each inner
    semi-axis sits at least that far inside the outer one. On coarse grids
    the stock shell is thinner than a voxel.
    """
    half = min(n * d for n, d in zip(geom.vol_shape, geom.vol_spacing)) / 2
    base = shepp3d(geom, mu)
    scale = 1 + rng.uniform(-amount, 0.0, 3)
    out = [EllipsoidSpec(e.center, tuple(np.array(e.semi_axes) * scale), e.euler_z_rotation, e.density)
           for e in base[:2]]
    if min_shell is not None:
        outer, inner = out
        axes = tuple(min(i, o - min_shell) for i, o in zip(inner.semi_axes, outer.semi_axes))
        out[1] = EllipsoidSpec(inner.center, axes, inner.euler_z_rotation, inner.density)
    for e in base[2:]:
        center = np.array(e.center) * scale + rng.uniform(-amount, amount, 3) * half * 0.5
        axes = np.array(e.semi_axes) * (1 + rng.uniform(-amount, amount, 3) * 2)
        phi = e.euler_z_rotation + rng.uniform(-amount, amount) * math.pi
        density = e.density * (1 + rng.uniform(-amount, amount) * 4)
        out.append(EllipsoidSpec(tuple(center), tuple(axes), phi, density))
    turn = rng.uniform(0.0, 2 * math.pi)
    return [e.rotated(turn) for e in out]


def phantom_volume(geom: Geometry, specs) -> Volume:
    """Sum of densities of every ellipsoid containing each voxel center."""
    specs = list(specs)
    if not specs:
        raise GeometryError("phantom needs at least one ellipsoid")
    xs, ys, zs = geom.voxel_coords()
    z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
    data = np.zeros(geom.volume_array_shape)
    for e in specs:
        data[e.contains(x, y, z)] += e.density
    return Volume(data, geom.vol_spacing)


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, index: np.ndarray, draw: int) -> np.ndarray:
    """Uniforms in (0, 1) for ``(seed, element index, draw)`` counters.

    ``u = (top 53 bits of splitmix64(splitmix64(seed) ^ (2 * index + draw)) + 0.5) / 2^53``.
    """
    with np.errstate(over="ignore"):
        key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
        ctr = index.astype(np.uint64) * np.uint64(2) + np.uint64(draw)
        bits = _splitmix64(ctr ^ key) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) / 2.0**53


def poisson_counts(mean: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic Poisson draws, one per element of ``mean`` (flattened order)."""
    mean = np.asarray(mean, dtype=np.float64)
    flat = mean.ravel()
    idx = np.arange(flat.size, dtype=np.uint64)
    u1 = counter_uniforms(seed, idx, 0)
    u2 = counter_uniforms(seed, idx, 1)
    out = np.empty(flat.size)

    big = flat >= 10.0
    z = np.sqrt(-2.0 * np.log(u1[big])) * np.cos(2.0 * np.pi * u2[big])
    out[big] = np.maximum(np.rint(flat[big] + np.sqrt(flat[big]) * z), 0.0)

    small = ~big
    lam = flat[small]
    u = u1[small]
    k = np.zeros(lam.size)
    pmf = np.exp(-lam)
    cdf = pmf.copy()
    active = u > cdf
    # mean < 10 leaves a tail below 1e-16 past k = 60
    for step in range(1, 100):
        if not active.any():
            break
        pmf = pmf * lam / step
        k[active] += 1
        cdf = cdf + pmf
        active &= u > cdf
    out[small] = k
    return out.reshape(mean.shape)


@dataclass(frozen=True)
class NoiseConfig:
    i0: float = 1e5
    seed: int = 0

    def __post_init__(self):
        if not self.i0 > 0:
            raise ValueError(f"i0 must be positive, got {self.i0}")


def add_poisson_noise_array(proj: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    if np.any(proj < 0):
        raise ValueError("line integrals must be non-negative before adding noise")
    counts = poisson_counts(cfg.i0 * np.exp(-proj), cfg.seed)
    return -np.log(np.maximum(counts, 1.0) / cfg.i0)


def add_poisson_noise(stack: ProjectionStack, cfg: NoiseConfig) -> ProjectionStack:
    """Beer-Lambert photon noise: ``I ~ Poisson(i0 exp(-p))``, ``p' = -ln(max(I, 1) / i0)``."""
    return stack.with_data(add_poisson_noise_array(stack.data, cfg))


def noisy_dataset(geom: Geometry, count: int, seed: int = 0, i0: float = 5e4, mu: float = MU_WATER,
                  min_shell: float | None = None):
    """``count`` pairs of (noisy projections, ground truth) from jittered head phantoms.

    Phantoms are clipped at zero so every line integral is physical.
    ``min_shell`` is passed to :func:`jittered_shepp3d`.
    """
    from .projector import forward_project

    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        specs = jittered_shepp3d(geom, rng, mu=mu, min_shell=min_shell)
        gt = Volume(np.maximum(phantom_volume(geom, specs).data, 0.0), geom.vol_spacing)
        clean = forward_project(geom, gt)
        noisy = add_poisson_noise(clean, NoiseConfig(i0, seed * 1000 + i))
        pairs.append((noisy, gt))
    return pairs
