"""Trainable FDK with wavelet-sparse cosine weights and filter bank.

Only the level-2 Haar LL blocks are stored: ``w_train`` (``N_s/4 x N_v/4``)
for the weighting matrix and ``h_train`` (``M/4 x N_s/4``) for the filter
bank. Detail bands are zero by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .core import ContainerError, Geometry, GeometryError, ProjectionStack, Volume, read_container, write_container
from .fdk import cosine_weights_classical, fdk_reconstruct_array, ramp_response
from .wavelet import project_to_ll, reconstruct_from_ll


@dataclass(frozen=True)
class SparseWaveletParams:
    w_train: np.ndarray
    h_train: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w_train", np.array(self.w_train, dtype=np.float64))
        object.__setattr__(self, "h_train", np.array(self.h_train, dtype=np.float64))

    @property
    def size(self) -> int:
        return self.w_train.size + self.h_train.size


@dataclass(frozen=True)
class FdkModel:
    geom: Geometry
    params: SparseWaveletParams
    plain_backprojection: bool = False
    pad2x: bool = False

    def __post_init__(self):
        ns, nv = self.geom.det_shape
        m = self.geom.n_angles
        if self.params.w_train.shape != (ns // 4, nv // 4):
            raise GeometryError(f"w_train shape {self.params.w_train.shape} != {(ns // 4, nv // 4)}")
        if self.params.h_train.shape != (m // 4, ns // 4):
            raise GeometryError(f"h_train shape {self.params.h_train.shape} != {(m // 4, ns // 4)}")

    def with_params(self, w_train, h_train) -> "FdkModel":
        return replace(self, params=SparseWaveletParams(w_train, h_train))


class ParameterCount(NamedTuple):
    trainable: int
    dense_equivalent: int
    reduction: float


def init_from_classical(geom: Geometry, **flags) -> FdkModel:
    """LL projections of the analytic cosine weights and the Ram-Lak bank."""
    params = SparseWaveletParams(
        project_to_ll(cosine_weights_classical(geom)),
        project_to_ll(ramp_response(geom)),
    )
    return FdkModel(geom, params, **flags)


def materialize(model: FdkModel) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(W_rec, H_rec)`` with shapes ``(N_s, N_v)`` and ``(M, N_s)``."""
    g = model.geom
    w_rec = reconstruct_from_ll(model.params.w_train, g.det_shape)
    h_rec = reconstruct_from_ll(model.params.h_train, (g.n_angles, g.det_shape[0]))
    return w_rec, h_rec


def forward_array(model: FdkModel, proj: np.ndarray):
    w_rec, h_rec = materialize(model)
    return fdk_reconstruct_array(model.geom, proj, w_rec, h_rec,
                                 model.plain_backprojection, model.pad2x)


def forward(model: FdkModel, stack: ProjectionStack) -> tuple[Volume, Volume]:
    """``(pre_relu, output)`` of the materialized pipeline."""
    pre, out = forward_array(model, stack.data)
    sp = model.geom.vol_spacing
    return Volume(pre, sp), Volume(out, sp)


def parameter_count(model: FdkModel) -> ParameterCount:
    ns, nv = model.geom.det_shape
    dense = ns * nv + model.geom.n_angles * ns
    trainable = model.params.size
    return ParameterCount(trainable, dense, 1.0 - trainable / dense)


def save_model(path, model: FdkModel) -> None:
    """Checkpoint as a ``kind: "model"`` container: w_train then h_train."""
    p = model.params
    header = {
        "kind": "model",
        "dims": [*p.w_train.shape, *p.h_train.shape],
        "spacing_mm": list(model.geom.det_spacing),
        "geometry": model.geom.to_dict(),
        "plain_backprojection": model.plain_backprojection,
        "pad2x": model.pad2x,
    }
    write_container(path, header, np.concatenate([p.w_train.ravel(), p.h_train.ravel()]))


def load_model(path) -> FdkModel:
    header, payload = read_container(path)
    if header["kind"] != "model":
        raise ContainerError(f"expected a model container, got {header['kind']!r}")
    if "geometry" not in header:
        raise ContainerError("model container lacks a geometry")
    geom = Geometry.from_dict(header["geometry"])
    wr, wc, hr, hc = header["dims"]
    values = payload.astype(np.float64)
    params = SparseWaveletParams(values[: wr * wc].reshape(wr, wc), values[wr * wc :].reshape(hr, hc))
    return FdkModel(geom, params, bool(header.get("plain_backprojection", False)),
                    bool(header.get("pad2x", False)))
