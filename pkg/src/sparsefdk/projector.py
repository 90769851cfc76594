"""Cone-beam forward projection and voxel-driven FDK backprojection.

The source sits at ``(sid cos t, sid sin t, 0)``. A point ``(x, y, z)`` maps
to detector coordinates

    U = sid - x cos t - y sin t
    s = sdd (-x sin t + y cos t) / U
    v = sdd z / U

``fdk_backproject`` (B) and ``backproject_adjoint`` (B^T) share this map and
the same bilinear weights, so they are an exact transpose pair. The ray-driven
``forward_project`` is only used to synthesize data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .core import Geometry, ProjectionStack, Volume


@dataclass(frozen=True)
class DetectorHit:
    s: float
    v: float
    u_dist: float

    @property
    def in_front(self) -> bool:
        """False when the point lies at or behind the source plane."""
        return self.u_dist > 0


def voxel_to_detector(geom: Geometry, angle_index: int, xyz) -> DetectorHit:
    if not 0 <= angle_index < geom.n_angles:
        raise IndexError(f"angle index {angle_index} outside [0, {geom.n_angles})")
    x, y, z = (float(c) for c in xyz)
    theta = angle_index * geom.delta_theta
    c, s = math.cos(theta), math.sin(theta)
    u = geom.sid - x * c - y * s
    if u <= 0:
        return DetectorHit(math.nan, math.nan, u)
    return DetectorHit(geom.sdd * (-x * s + y * c) / u, geom.sdd * z / u, u)


def distance_weight(geom: Geometry, u_dist, plain: bool = False):
    """Per-voxel backprojection weight.

    ``plain`` gives unit weight. Otherwise ``0.5 * sid * sdd / U**2``: the
    classical ``(sid/U)^2`` term, the 1/2 full-scan redundancy factor and the
    ``sdd/sid`` magnification that rescales a ramp applied in physical detector
    units to the isocenter plane.
    """
    if plain:
        return np.ones_like(np.asarray(u_dist, dtype=float))
    return 0.5 * geom.sid * geom.sdd / np.asarray(u_dist, dtype=float) ** 2


def set_threads(n: int | None) -> None:
    if n:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


@njit(cache=True, parallel=True, fastmath=False)
def _backproject_kernel(proj, cos_t, sin_t, xs, ys, zs, sid, sdd, ds, dv, dtheta, plain, out):
    n_ang, ns, nv = proj.shape
    cs = (ns - 1) * 0.5
    cv = (nv - 1) * 0.5
    nz = zs.shape[0]
    # prange over y: every voxel is written by exactly one worker, and the
    # sum over angles runs in a fixed order
    for iy in prange(ys.shape[0]):
        y = ys[iy]
        for ix in range(xs.shape[0]):
            x = xs[ix]
            for m in range(n_ang):
                u = sid - x * cos_t[m] - y * sin_t[m]
                if u <= 0.0:
                    continue
                mag = sdd / u
                fs = mag * (-x * sin_t[m] + y * cos_t[m]) / ds + cs
                i0 = math.floor(fs)
                if i0 < -1 or i0 > ns - 1:
                    continue
                a = fs - i0
                if plain:
                    w = dtheta
                else:
                    w = 0.5 * sid * sdd / (u * u) * dtheta
                for iz in range(nz):
                    fv = mag * zs[iz] / dv + cv
                    j0 = math.floor(fv)
                    if j0 < -1 or j0 > nv - 1:
                        continue
                    b = fv - j0
                    val = 0.0
                    if i0 >= 0:
                        if j0 >= 0:
                            val += (1.0 - a) * (1.0 - b) * proj[m, i0, j0]
                        if j0 + 1 < nv:
                            val += (1.0 - a) * b * proj[m, i0, j0 + 1]
                    if i0 + 1 < ns:
                        if j0 >= 0:
                            val += a * (1.0 - b) * proj[m, i0 + 1, j0]
                        if j0 + 1 < nv:
                            val += a * b * proj[m, i0 + 1, j0 + 1]
                    out[iz, iy, ix] += w * val


@njit(cache=True, parallel=True, fastmath=False)
def _backproject_adjoint_kernel(vol, cos_t, sin_t, xs, ys, zs, sid, sdd, ds, dv, dtheta, plain, out):
    n_ang, ns, nv = out.shape
    cs = (ns - 1) * 0.5
    cv = (nv - 1) * 0.5
    nz = zs.shape[0]
    # prange over angles: each worker owns whole detector frames
    for m in prange(n_ang):
        for iy in range(ys.shape[0]):
            y = ys[iy]
            for ix in range(xs.shape[0]):
                x = xs[ix]
                u = sid - x * cos_t[m] - y * sin_t[m]
                if u <= 0.0:
                    continue
                mag = sdd / u
                fs = mag * (-x * sin_t[m] + y * cos_t[m]) / ds + cs
                i0 = math.floor(fs)
                if i0 < -1 or i0 > ns - 1:
                    continue
                a = fs - i0
                if plain:
                    w = dtheta
                else:
                    w = 0.5 * sid * sdd / (u * u) * dtheta
                for iz in range(nz):
                    fv = mag * zs[iz] / dv + cv
                    j0 = math.floor(fv)
                    if j0 < -1 or j0 > nv - 1:
                        continue
                    b = fv - j0
                    g = w * vol[iz, iy, ix]
                    if i0 >= 0:
                        if j0 >= 0:
                            out[m, i0, j0] += (1.0 - a) * (1.0 - b) * g
                        if j0 + 1 < nv:
                            out[m, i0, j0 + 1] += (1.0 - a) * b * g
                    if i0 + 1 < ns:
                        if j0 >= 0:
                            out[m, i0 + 1, j0] += a * (1.0 - b) * g
                        if j0 + 1 < nv:
                            out[m, i0 + 1, j0 + 1] += a * b * g


@njit(cache=True)
def _trilinear(vol, fx, fy, fz):
    nz, ny, nx = vol.shape
    x0 = math.floor(fx)
    y0 = math.floor(fy)
    z0 = math.floor(fz)
    if x0 < -1 or y0 < -1 or z0 < -1 or x0 > nx - 1 or y0 > ny - 1 or z0 > nz - 1:
        return 0.0
    ax = fx - x0
    ay = fy - y0
    az = fz - z0
    acc = 0.0
    for dz in range(2):
        k = z0 + dz
        if k < 0 or k >= nz:
            continue
        wz = az if dz else 1.0 - az
        for dy in range(2):
            j = y0 + dy
            if j < 0 or j >= ny:
                continue
            wy = ay if dy else 1.0 - ay
            for dx in range(2):
                i = x0 + dx
                if i < 0 or i >= nx:
                    continue
                wx = ax if dx else 1.0 - ax
                acc += wz * wy * wx * vol[k, j, i]
    return acc


@njit(cache=True, parallel=True)
def _forward_kernel(vol, cos_t, sin_t, s_coords, v_coords, sid, sdd, spacing, step_max, out):
    nz, ny, nx = vol.shape
    n_ang = cos_t.shape[0]
    ns = s_coords.shape[0]
    nv = v_coords.shape[0]
    dx, dy, dz = spacing[0], spacing[1], spacing[2]
    hx = (nx + 1) * 0.5 * dx
    hy = (ny + 1) * 0.5 * dy
    hz = (nz + 1) * 0.5 * dz
    for r in prange(n_ang * ns):
        m = r // ns
        i = r % ns
        c = cos_t[m]
        sn = sin_t[m]
        sx = sid * c
        sy = sid * sn
        s = s_coords[i]
        for j in range(nv):
            # ray from source to detector cell (s, v): src + t * d, t in [0, 1]
            ddx = -sdd * c - s * sn
            ddy = -sdd * sn + s * c
            ddz = v_coords[j]
            t0 = 0.0
            t1 = 1.0
            ok = True
            for ax in range(3):
                if ax == 0:
                    o, d, h = sx, ddx, hx
                elif ax == 1:
                    o, d, h = sy, ddy, hy
                else:
                    o, d, h = 0.0, ddz, hz
                if abs(d) < 1e-15:
                    if o < -h or o > h:
                        ok = False
                    continue
                ta = (-h - o) / d
                tb = (h - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
            if not ok or t1 <= t0:
                out[m, i, j] = 0.0
                continue
            length = math.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
            seg = (t1 - t0) * length
            n = int(math.ceil(seg / step_max))
            if n < 1:
                n = 1
            h_t = (t1 - t0) / n
            acc = 0.0
            for k in range(n):
                t = t0 + (k + 0.5) * h_t
                px = sx + t * ddx
                py = sy + t * ddy
                pz = t * ddz
                acc += _trilinear(
                    vol,
                    px / dx + (nx - 1) * 0.5,
                    py / dy + (ny - 1) * 0.5,
                    pz / dz + (nz - 1) * 0.5,
                )
            out[m, i, j] = acc * h_t * length


# --------------------------------------------------------------------------
# public operators
# --------------------------------------------------------------------------


def _trig(geom: Geometry):
    angles = geom.angles
    return np.cos(angles), np.sin(angles)


def forward_project_array(geom: Geometry, vol: np.ndarray, step: float | None = None) -> np.ndarray:
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    if vol.shape != geom.volume_array_shape:
        raise ValueError(f"volume array {vol.shape} does not match {geom.volume_array_shape}")
    if step is None:
        step = min(geom.vol_spacing) / 2
    cos_t, sin_t = _trig(geom)
    s, v = geom.detector_coords()
    out = np.zeros(geom.stack_shape)
    _forward_kernel(vol, cos_t, sin_t, s, v, geom.sid, geom.sdd,
                    np.asarray(geom.vol_spacing, dtype=np.float64), float(step), out)
    return out


def forward_project(geom: Geometry, vol: Volume, step: float | None = None) -> ProjectionStack:
    """Line integrals through ``vol`` by midpoint ray sampling with trilinear lookup.

    ``step`` defaults to half the smallest voxel spacing.
    """
    vol.check(geom)
    return ProjectionStack(geom, forward_project_array(geom, vol.data, step))


def backproject_array(geom: Geometry, proj: np.ndarray, plain: bool = False) -> np.ndarray:
    proj = np.ascontiguousarray(proj, dtype=np.float64)
    if proj.shape != geom.stack_shape:
        raise ValueError(f"projection array {proj.shape} does not match {geom.stack_shape}")
    cos_t, sin_t = _trig(geom)
    xs, ys, zs = geom.voxel_coords()
    ds, dv = geom.det_spacing
    out = np.zeros(geom.volume_array_shape)
    _backproject_kernel(proj, cos_t, sin_t, xs, ys, zs, geom.sid, geom.sdd, ds, dv,
                        geom.delta_theta, bool(plain), out)
    return out


def backproject_adjoint_array(geom: Geometry, vol: np.ndarray, plain: bool = False) -> np.ndarray:
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    if vol.shape != geom.volume_array_shape:
        raise ValueError(f"volume array {vol.shape} does not match {geom.volume_array_shape}")
    cos_t, sin_t = _trig(geom)
    xs, ys, zs = geom.voxel_coords()
    ds, dv = geom.det_spacing
    out = np.zeros(geom.stack_shape)
    _backproject_adjoint_kernel(vol, cos_t, sin_t, xs, ys, zs, geom.sid, geom.sdd, ds, dv,
                                geom.delta_theta, bool(plain), out)
    return out


def fdk_backproject(geom: Geometry, stack: ProjectionStack, plain_backprojection: bool = False) -> Volume:
    """Distance-weighted backprojection, summed over views and scaled by the angular step.

    Detector values are read with bilinear interpolation; cells off the
    detector read as zero. ``plain_backprojection`` drops the distance weight.
    """
    return Volume(backproject_array(geom, stack.data, plain_backprojection), geom.vol_spacing)


def backproject_adjoint(geom: Geometry, vol: Volume, plain_backprojection: bool = False) -> ProjectionStack:
    """Exact transpose of :func:`fdk_backproject`."""
    vol.check(geom)
    return ProjectionStack(geom, backproject_adjoint_array(geom, vol.data, plain_backprojection))
