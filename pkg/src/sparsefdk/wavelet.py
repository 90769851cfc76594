"""Orthonormal 2D Haar transform, fixed at two decomposition levels.

Band naming follows the filter applied along (axis 0, axis 1): ``lh`` is
lowpass down the rows and highpass across the columns, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SQRT1_2 = np.sqrt(0.5)


class WaveletShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Bands:
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray


@dataclass(frozen=True)
class WaveletPyramid2:
    """Level-2 decomposition of an ``R x C`` matrix.

    ``ll2`` and ``level2`` bands are ``R/4 x C/4``; ``level1`` bands are
    ``R/2 x C/2``.
    """

    ll2: np.ndarray
    level2: Bands
    level1: Bands

    @property
    def shape(self) -> tuple[int, int]:
        r, c = self.level1.lh.shape
        return (2 * r, 2 * c)

    def energy(self) -> float:
        arrays = [self.ll2]
        for b in (self.level2, self.level1):
            arrays += [b.lh, b.hl, b.hh]
        return float(sum(np.sum(a * a) for a in arrays))

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "WaveletPyramid2":
        r, c = _check_shape(shape)
        z2 = lambda: np.zeros((r // 4, c // 4))  # noqa: E731
        z1 = lambda: np.zeros((r // 2, c // 2))  # noqa: E731
        return cls(z2(), Bands(z2(), z2(), z2()), Bands(z1(), z1(), z1()))


def _check_shape(shape) -> tuple[int, int]:
    if len(shape) != 2:
        raise WaveletShapeError(f"expected a matrix, got shape {tuple(shape)}")
    r, c = shape
    if r % 4 or c % 4 or r == 0 or c == 0:
        raise WaveletShapeError(f"matrix dims must be positive multiples of 4, got {tuple(shape)}")
    return int(r), int(c)


def _analysis(x):
    # one separable Haar step: (a, b) -> ((a + b)/sqrt2, (a - b)/sqrt2)
    lo = (x[0::2] + x[1::2]) * _SQRT1_2
    hi = (x[0::2] - x[1::2]) * _SQRT1_2
    ll = (lo[:, 0::2] + lo[:, 1::2]) * _SQRT1_2
    lh = (lo[:, 0::2] - lo[:, 1::2]) * _SQRT1_2
    hl = (hi[:, 0::2] + hi[:, 1::2]) * _SQRT1_2
    hh = (hi[:, 0::2] - hi[:, 1::2]) * _SQRT1_2
    return ll, Bands(lh, hl, hh)


def _synthesis(ll, bands: Bands):
    r, c = ll.shape
    lo = np.empty((r, 2 * c))
    hi = np.empty((r, 2 * c))
    lo[:, 0::2] = (ll + bands.lh) * _SQRT1_2
    lo[:, 1::2] = (ll - bands.lh) * _SQRT1_2
    hi[:, 0::2] = (bands.hl + bands.hh) * _SQRT1_2
    hi[:, 1::2] = (bands.hl - bands.hh) * _SQRT1_2
    out = np.empty((2 * r, 2 * c))
    out[0::2] = (lo + hi) * _SQRT1_2
    out[1::2] = (lo - hi) * _SQRT1_2
    return out


def dwt2_level2(x) -> WaveletPyramid2:
    x = np.asarray(x, dtype=np.float64)
    _check_shape(x.shape)
    ll1, level1 = _analysis(x)
    ll2, level2 = _analysis(ll1)
    return WaveletPyramid2(ll2, level2, level1)


def idwt2_level2(p: WaveletPyramid2) -> np.ndarray:
    r4, c4 = p.ll2.shape
    for b in (p.level2.lh, p.level2.hl, p.level2.hh):
        if b.shape != (r4, c4):
            raise WaveletShapeError("level-2 detail bands must match the ll2 shape")
    for b in (p.level1.lh, p.level1.hl, p.level1.hh):
        if b.shape != (2 * r4, 2 * c4):
            raise WaveletShapeError("level-1 detail bands must be twice the ll2 shape")
    return _synthesis(_synthesis(p.ll2, p.level2), p.level1)


def reconstruct_from_ll(ll2, out_shape) -> np.ndarray:
    """Inverse transform of a pyramid whose detail bands are all zero.

    With orthonormal Haar this spreads every coefficient over a 4x4 block,
    scaled by 1/4.
    """
    ll2 = np.asarray(ll2, dtype=np.float64)
    r, c = _check_shape(out_shape)
    if ll2.shape != (r // 4, c // 4):
        raise WaveletShapeError(f"ll2 shape {ll2.shape} does not fit output {(r, c)}")
    return np.repeat(np.repeat(ll2, 4, axis=0), 4, axis=1) * 0.25


def project_to_ll(x) -> np.ndarray:
    """Level-2 LL band of ``x``; the adjoint of :func:`reconstruct_from_ll`."""
    x = np.asarray(x, dtype=np.float64)
    r, c = _check_shape(x.shape)
    return x.reshape(r // 4, 4, c // 4, 4).sum(axis=(1, 3)) * 0.25
