import math

import numpy as np
import pytest

from sparsefdk.core import Geometry, ProjectionStack, Volume
from sparsefdk.projector import (
    backproject_adjoint,
    distance_weight,
    fdk_backproject,
    forward_project,
    voxel_to_detector,
)
from sparsefdk.sim import EllipsoidSpec, phantom_volume


def ray_plane_hit(geom, m, xyz):
    """Intersect the source->point ray with the detector plane, independently of the closed form."""
    theta = m * geom.delta_theta
    src = np.array([geom.sid * math.cos(theta), geom.sid * math.sin(theta), 0.0])
    normal = -np.array([math.cos(theta), math.sin(theta), 0.0])  # central ray direction
    center = src + geom.sdd * normal
    e_s = np.array([-math.sin(theta), math.cos(theta), 0.0])
    d = np.asarray(xyz, dtype=float) - src
    t = geom.sdd / float(d @ normal)
    hit = src + t * d - center
    return float(hit @ e_s), float(hit[2]), float(d @ normal)


def brute_backproject(geom, proj, plain=False):
    """Per-voxel loop over (z, y, x, m), written without the production loop order."""
    xs, ys, zs = geom.voxel_coords()
    ns, nv = geom.det_shape
    ds, dv = geom.det_spacing
    out = np.zeros(geom.volume_array_shape)
    for iz, z in enumerate(zs):
        for iy, y in enumerate(ys):
            for ix, x in enumerate(xs):
                total = 0.0
                for m in range(geom.n_angles):
                    s, v, u = ray_plane_hit(geom, m, (x, y, z))
                    if u <= 0:
                        continue
                    fs = s / ds + (ns - 1) / 2
                    fv = v / dv + (nv - 1) / 2
                    val = 0.0
                    for i in range(ns):
                        for j in range(nv):
                            wi = max(0.0, 1 - abs(fs - i))
                            wj = max(0.0, 1 - abs(fv - j))
                            val += wi * wj * proj[m, i, j]
                    w = 1.0 if plain else 0.5 * geom.sid * geom.sdd / u**2
                    total += w * val * geom.delta_theta
                out[iz, iy, ix] = total
    return out


def test_isocenter_maps_to_center(tiny_geom):
    for m in range(tiny_geom.n_angles):
        hit = voxel_to_detector(tiny_geom, m, (0, 0, 0))
        assert hit.s == pytest.approx(0.0, abs=1e-12)
        assert hit.v == 0.0
        assert hit.u_dist == pytest.approx(tiny_geom.sid)


def test_isocenter_clinical():
    from sparsefdk.core import clinical_geometry

    hit = voxel_to_detector(clinical_geometry(), 17, (0, 0, 0))
    assert hit.u_dist == pytest.approx(1200.0)


def test_on_axis_magnification(tiny_geom):
    hit = voxel_to_detector(tiny_geom, 0, (0, 0, 3.0))
    assert hit.s == 0.0
    assert hit.v == pytest.approx(tiny_geom.sdd * 3.0 / tiny_geom.sid)


def test_matches_ray_plane_oracle(tiny_geom, rng):
    for _ in range(50):
        m = int(rng.integers(tiny_geom.n_angles))
        xyz = rng.uniform(-5, 5, 3)
        hit = voxel_to_detector(tiny_geom, m, xyz)
        s, v, u = ray_plane_hit(tiny_geom, m, xyz)
        assert hit.s == pytest.approx(s, abs=1e-10)
        assert hit.v == pytest.approx(v, abs=1e-10)
        assert hit.u_dist == pytest.approx(u, abs=1e-10)


def test_opposite_views_mirror_s(tiny_geom, rng):
    half = tiny_geom.n_angles // 2
    for _ in range(20):
        x, y = rng.uniform(-5, 5, 2)
        m = int(rng.integers(half))
        a = voxel_to_detector(tiny_geom, m, (x, y, 0))
        b = voxel_to_detector(tiny_geom, m + half, (x, y, 0))
        # the tangential offset s * U / sdd flips sign; magnification differs between the views
        assert a.s * a.u_dist == pytest.approx(-b.s * b.u_dist, abs=1e-10)


def test_opposite_views_mirror_s_at_isocenter_plane(tiny_geom):
    half = tiny_geom.n_angles // 2
    # points on the line through the isocenter perpendicular to the central ray have U = sid at both views
    a = voxel_to_detector(tiny_geom, 0, (0, 4.0, 0))
    b = voxel_to_detector(tiny_geom, half, (0, 4.0, 0))
    assert a.s == pytest.approx(-b.s, abs=1e-10)


def test_behind_source_flagged(tiny_geom):
    hit = voxel_to_detector(tiny_geom, 0, (tiny_geom.sid + 1, 0, 0))
    assert not hit.in_front
    assert math.isnan(hit.s)


def test_forward_zero_and_linear(tiny_geom, rng):
    assert not forward_project(tiny_geom, Volume.zeros(tiny_geom)).data.any()
    vol = Volume(rng.uniform(size=tiny_geom.volume_array_shape), (1, 1, 1))
    a = forward_project(tiny_geom, vol).data
    b = forward_project(tiny_geom, Volume(3.5 * vol.data, (1, 1, 1))).data
    np.testing.assert_allclose(b, 3.5 * a, rtol=1e-12, atol=1e-12)


def test_forward_ball_chord():
    g = Geometry(4, 2 * math.pi, 200.0, 400.0, (4, 4), (0.5, 0.5), (64, 64, 64), (1.0, 1.0, 1.0))
    r = 20.0
    vol = phantom_volume(g, [EllipsoidSpec((0, 0, 0), (r, r, r), 0.0, 1.0)])
    p = forward_project(g, vol, step=0.05).data
    # cells adjacent to the center carry rays within 0.5 mm of the central ray
    for m in range(g.n_angles):
        for value in p[m, 1:3, 1:3].ravel():
            assert abs(value - 2 * r) / (2 * r) < 0.01


def test_forward_z_shift_moves_response(rng):
    g = Geometry(4, 2 * math.pi, 100.0, 200.0, (8, 64), (1.0, 0.25), (8, 8, 16), (1.0, 1.0, 1.0))
    vol = np.zeros(g.volume_array_shape)
    vol[8, 3:5, 3:5] = 1.0
    shifted = np.roll(vol, 1, axis=0)
    a = forward_project(g, Volume(vol, g.vol_spacing)).data[0, 3:5].sum(axis=0)
    b = forward_project(g, Volume(shifted, g.vol_spacing)).data[0, 3:5].sum(axis=0)
    _, v = g.detector_coords()
    shift = (b @ v) / b.sum() - (a @ v) / a.sum()
    assert shift == pytest.approx(g.sdd * 1.0 / g.sid, rel=0.05)


def test_backproject_zero(tiny_geom):
    assert not fdk_backproject(tiny_geom, ProjectionStack.zeros(tiny_geom)).data.any()


def test_backproject_constant_plain():
    g = Geometry(8, 2 * math.pi, 50.0, 100.0, (16, 16), (2.0, 2.0), (8, 8, 8), (1.0, 1.0, 1.0))
    stack = ProjectionStack(g, np.ones(g.stack_shape))
    vol = fdk_backproject(g, stack, plain_backprojection=True).data
    # every voxel lands strictly inside the detector for every view
    np.testing.assert_allclose(vol, g.angular_range, rtol=1e-12)


def test_backproject_matches_loop_oracle(tiny_geom, rng):
    proj = rng.normal(size=tiny_geom.stack_shape)
    stack = ProjectionStack(tiny_geom, proj)
    for plain in (False, True):
        got = fdk_backproject(tiny_geom, stack, plain).data
        np.testing.assert_allclose(got, brute_backproject(tiny_geom, proj, plain), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("plain", [False, True])
def test_adjoint_inner_product(tiny_geom, rng, plain):
    for _ in range(20):
        p = ProjectionStack(tiny_geom, rng.normal(size=tiny_geom.stack_shape))
        x = Volume(rng.normal(size=tiny_geom.volume_array_shape), tiny_geom.vol_spacing)
        lhs = float(np.sum(fdk_backproject(tiny_geom, p, plain).data * x.data))
        rhs = float(np.sum(p.data * backproject_adjoint(tiny_geom, x, plain).data))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


def test_adjoint_zero(tiny_geom):
    assert not backproject_adjoint(tiny_geom, Volume.zeros(tiny_geom)).data.any()


def test_adjoint_unit_voxel_footprint():
    # an even grid has no voxel exactly at the isocenter; use the nearest one
    g = Geometry(8, 2 * math.pi, 20.0, 40.0, (8, 8), (2.0, 2.0), (8, 8, 8), (1.0, 1.0, 1.0))
    vol = np.zeros(g.volume_array_shape)
    vol[4, 4, 4] = 1.0
    out = backproject_adjoint(g, Volume(vol, g.vol_spacing)).data
    xs, ys, zs = g.voxel_coords()
    for m in range(g.n_angles):
        hit = voxel_to_detector(g, m, (xs[4], ys[4], zs[4]))
        nz = np.argwhere(out[m] != 0)
        assert len(nz) <= 4
        assert np.ptp(nz[:, 0]) <= 1 and np.ptp(nz[:, 1]) <= 1
        expected = distance_weight(g, hit.u_dist) * g.delta_theta
        assert out[m].sum() == pytest.approx(float(expected), rel=1e-12)


def test_distance_weight_values(tiny_geom):
    assert distance_weight(tiny_geom, tiny_geom.sid) == pytest.approx(0.5 * tiny_geom.sdd / tiny_geom.sid)
    assert distance_weight(tiny_geom, 7.0, plain=True) == 1.0
