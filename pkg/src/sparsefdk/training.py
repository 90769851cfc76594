"""Loss, adjoint-chain gradients, Adam and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import GeometryError, ProjectionStack, Volume
from .fdk import apply_weighting_array, filter_array, upsample_bank_adjoint
from .model import FdkModel, forward_array, materialize
from .projector import backproject_adjoint_array, backproject_array
from .wavelet import project_to_ll

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Raised when the loss or a gradient becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class GradPair:
    g_w: np.ndarray
    g_h: np.ndarray


def _as_array(v):
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def mse_loss(output, target) -> float:
    a, b = _as_array(output), _as_array(target)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _filter_grads(weighted, g_filtered, bank, pad2x):
    """Pull ``dL/d(filtered)`` back to the bank and to the weighted projections.

    With ``pf = Re(IFFT(H * FFT(pw)))`` and real H, the filter is
    self-adjoint, and ``dL/dH[m, k] = Re(sum_v X[m, k, v] conj(G[m, k, v])) / n``
    where X and G are the s-axis FFTs of ``pw`` and the incoming gradient.
    """
    ns = weighted.shape[1]
    n = 2 * ns if pad2x else ns
    x_hat = np.fft.fft(weighted, n=n, axis=1)
    g_hat = np.fft.fft(g_filtered, n=n, axis=1)
    g_bank = np.einsum("mkv,mkv->mk", x_hat, g_hat.conj()).real / n
    if pad2x:
        g_bank = upsample_bank_adjoint(g_bank)
    g_weighted = filter_array(g_filtered, bank, pad2x)
    return g_bank, g_weighted


def gradient(model: FdkModel, stack: ProjectionStack | np.ndarray, target: Volume | np.ndarray):
    """MSE loss and its exact gradient with respect to ``(w_train, h_train)``.

    Reverse pass: ReLU mask (subgradient 0 at 0), transpose backprojection,
    transpose filtering, transpose weighting, then LL projection, which is
    the adjoint of the masked inverse Haar transform.
    """
    proj = stack.data if isinstance(stack, ProjectionStack) else np.asarray(stack, dtype=np.float64)
    target = _as_array(target)
    geom = model.geom
    if target.shape != geom.volume_array_shape:
        raise GeometryError(f"target shape {target.shape} != {geom.volume_array_shape}")
    w_rec, h_rec = materialize(model)

    weighted = apply_weighting_array(proj, w_rec)
    filtered = filter_array(weighted, h_rec, model.pad2x)
    pre = backproject_array(geom, filtered, model.plain_backprojection)
    out = np.maximum(pre, 0.0)
    resid = out - target
    loss = float(np.mean(resid**2))

    e = (2.0 / resid.size) * resid * (pre > 0)
    g_filtered = backproject_adjoint_array(geom, e, model.plain_backprojection)
    g_bank, g_weighted = _filter_grads(weighted, g_filtered, h_rec, model.pad2x)
    g_wmat = np.einsum("msv,msv->sv", proj, g_weighted)
    grads = GradPair(project_to_ll(g_wmat), project_to_ll(g_bank))
    if not (math.isfinite(loss) and np.all(np.isfinite(grads.g_w)) and np.all(np.isfinite(grads.g_h))):
        raise NumericalError("non-finite loss or gradient")
    return loss, grads


@dataclass
class AdamState:
    m_w: np.ndarray
    v_w: np.ndarray
    m_h: np.ndarray
    v_h: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, w, h) -> "AdamState":
        return cls(np.zeros_like(w), np.zeros_like(w), np.zeros_like(h), np.zeros_like(h))


def _adam_update(p, g, m, v, t, cfg: TrainConfig):
    m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
    v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
    m_hat = m / (1 - cfg.adam_beta1**t)
    v_hat = v / (1 - cfg.adam_beta2**t)
    return p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), m, v


def adam_step(params, grads: GradPair, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update applied to both parameter blocks.

    ``params`` is a ``(w_train, h_train)`` pair; returns the updated pair and
    a new state.
    """
    w, h = params
    t = state.t + 1
    w, m_w, v_w = _adam_update(w, grads.g_w, state.m_w, state.v_w, t, config)
    h, m_h, v_h = _adam_update(h, grads.g_h, state.m_h, state.v_h, t, config)
    return (w, h), AdamState(m_w, v_w, m_h, v_h, t)


@dataclass
class LogRow:
    epoch: int
    sample_index: int
    train_loss: float
    val_loss: float | None = None


@dataclass
class TrainResult:
    model: FdkModel
    log: list[LogRow] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf


def _unpack(sample):
    stack, vol = sample
    proj = stack.data if isinstance(stack, ProjectionStack) else np.asarray(stack, dtype=np.float64)
    return proj, _as_array(vol)


def evaluate(model: FdkModel, samples) -> float:
    losses = []
    for sample in samples:
        proj, target = _unpack(sample)
        _, out = forward_array(model, proj)
        losses.append(mse_loss(out, target))
    return float(np.mean(losses))


def _check_samples(model: FdkModel, samples, what: str) -> None:
    for i, (stack, vol) in enumerate(samples):
        if isinstance(stack, ProjectionStack) and stack.geometry != model.geom:
            raise GeometryError(f"{what} sample {i}: projection geometry differs from the model")
        proj, target = _unpack((stack, vol))
        if proj.shape != model.geom.stack_shape or target.shape != model.geom.volume_array_shape:
            raise GeometryError(f"{what} sample {i}: array shapes do not match the model geometry")


def train(model: FdkModel, dataset, val, config: TrainConfig | None = None,
          progress=None) -> TrainResult:
    """Adam on one projection stack per step, seeded shuffling per epoch.

    Validation loss is computed after every epoch and the parameters with the
    lowest validation loss are returned (falling back to the training loss
    when ``val`` is empty).
    """
    config = config or TrainConfig()
    dataset, val = list(dataset), list(val)
    if not dataset:
        raise ValueError("training set is empty")
    _check_samples(model, dataset, "training")
    _check_samples(model, val, "validation")

    rng = np.random.default_rng(config.seed)
    w, h = model.params.w_train.copy(), model.params.h_train.copy()
    state = AdamState.zeros_like(w, h)
    result = TrainResult(model)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        rows = []
        for idx in order:
            proj, target = _unpack(dataset[idx])
            loss, grads = gradient(model.with_params(w, h), proj, target)
            (w, h), state = adam_step((w, h), grads, state, config)
            rows.append(LogRow(epoch, int(idx), loss))
        current = model.with_params(w, h)
        score = evaluate(current, val) if val else float(np.mean([r.train_loss for r in rows]))
        if not math.isfinite(score):
            raise NumericalError(f"validation loss is {score} at epoch {epoch}")
        rows[-1].val_loss = score
        result.log.extend(rows)
        if score < result.best_val_loss:
            result.best_val_loss, result.best_epoch, result.model = score, epoch, current
        log.info("epoch %d: train %.6g val %.6g", epoch, np.mean([r.train_loss for r in rows]), score)
        if progress is not None:
            progress(epoch, rows)
    return result


def write_log_csv(path, rows) -> None:
    """``epoch,sample_index,train_loss,val_loss``; val_loss only on each epoch's last row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "sample_index", "train_loss", "val_loss"])
        for r in rows:
            writer.writerow([r.epoch, r.sample_index, repr(r.train_loss),
                             "" if r.val_loss is None else repr(r.val_loss)])
