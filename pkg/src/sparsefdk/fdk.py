"""Classical FDK stages: cosine weighting, ramp filtering and the full pipeline.

The filter bank is held in the frequency domain as an ``(M, N_s)`` real
matrix, row ``m`` being the response applied to view ``m`` on the FFT
frequency grid (DC first, then positive, then negative frequencies).
"""

from __future__ import annotations

import numpy as np

from .core import Geometry, GeometryError, ProjectionStack, Volume
from .projector import backproject_array


def cosine_weights_classical(geom: Geometry) -> np.ndarray:
    """``sdd / sqrt(sdd^2 + s^2 + v^2)`` at detector cell centers, shape ``(N_s, N_v)``."""
    s, v = geom.detector_coords()
    return geom.sdd / np.sqrt(geom.sdd**2 + s[:, None] ** 2 + v[None, :] ** 2)


def ramp_response(geom: Geometry) -> np.ndarray:
    """Ram-Lak bank ``|f_k|`` in cycles/mm, identical for every view."""
    freqs = np.abs(np.fft.fftfreq(geom.det_shape[0], d=geom.det_spacing[0]))
    return np.tile(freqs, (geom.n_angles, 1))


def upsample_bank(bank: np.ndarray) -> np.ndarray:
    """Resample an ``N``-point response onto the ``2N``-point grid of the same spacing.

    Even bins copy the original samples, odd bins take the mean of their
    circular neighbours; for the ramp this reproduces the 2N ramp exactly.
    """
    out = np.empty((bank.shape[0], 2 * bank.shape[1]))
    out[:, 0::2] = bank
    out[:, 1::2] = 0.5 * (bank + np.roll(bank, -1, axis=1))
    return out


def upsample_bank_adjoint(g2: np.ndarray) -> np.ndarray:
    odd = g2[:, 1::2]
    return g2[:, 0::2] + 0.5 * (odd + np.roll(odd, 1, axis=1))


def apply_weighting_array(proj: np.ndarray, w: np.ndarray) -> np.ndarray:
    if w.shape != proj.shape[1:]:
        raise GeometryError(f"weight matrix {w.shape} does not match detector {proj.shape[1:]}")
    return proj * w[None, :, :]


def apply_weighting(stack: ProjectionStack, w) -> ProjectionStack:
    """Multiply every view by the same ``(N_s, N_v)`` weight matrix."""
    return stack.with_data(apply_weighting_array(stack.data, np.asarray(w, dtype=np.float64)))


def filter_array(proj: np.ndarray, bank: np.ndarray, pad2x: bool = False) -> np.ndarray:
    """Row-wise ``Re(IFFT_s(H_m * FFT_s(p)))`` along the detector s axis.

    Without padding this is a length-``N_s`` circular convolution. With
    ``pad2x`` the rows are zero-padded to ``2 N_s``, filtered with the
    upsampled bank and cropped back.
    """
    n_ang, ns, _ = proj.shape
    if bank.shape != (n_ang, ns):
        raise GeometryError(f"filter bank {bank.shape} does not match ({n_ang}, {ns})")
    if pad2x:
        spec = np.fft.fft(proj, n=2 * ns, axis=1)
        spec *= upsample_bank(bank)[:, :, None]
        return np.fft.ifft(spec, axis=1)[:, :ns, :].real
    spec = np.fft.fft(proj, axis=1)
    spec *= bank[:, :, None]
    return np.fft.ifft(spec, axis=1).real


def apply_filter_fft(stack: ProjectionStack, bank, pad2x: bool = False) -> ProjectionStack:
    return stack.with_data(filter_array(stack.data, np.asarray(bank, dtype=np.float64), pad2x))


def fdk_reconstruct_array(geom: Geometry, proj: np.ndarray, w: np.ndarray, bank: np.ndarray,
                          plain_backprojection: bool = False, pad2x: bool = False):
    filtered = filter_array(apply_weighting_array(proj, w), bank, pad2x)
    pre = backproject_array(geom, filtered, plain_backprojection)
    return pre, np.maximum(pre, 0.0)


def fdk_reconstruct(geom: Geometry, stack: ProjectionStack, w, bank,
                    plain_backprojection: bool = False, pad2x: bool = False) -> tuple[Volume, Volume]:
    """Weight, filter, backproject, then clamp at zero.

    Returns ``(pre_relu, output)``; the unclamped field is needed for
    gradients.
    """
    pre, out = fdk_reconstruct_array(geom, stack.data, np.asarray(w, dtype=np.float64),
                                     np.asarray(bank, dtype=np.float64),
                                     plain_backprojection, pad2x)
    return Volume(pre, geom.vol_spacing), Volume(out, geom.vol_spacing)


def classical_fdk(geom: Geometry, stack: ProjectionStack, **flags) -> tuple[Volume, Volume]:
    """FDK with analytic cosine weights and the Ram-Lak bank."""
    return fdk_reconstruct(geom, stack, cosine_weights_classical(geom), ramp_response(geom), **flags)
