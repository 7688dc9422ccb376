"""Scalar training objectives and their gradients w.r.t. predictions.

Each function returns a LossValue plus the gradient array(s) needed to
start a backward pass. Batch reduction is the mean within each domain so
the trade-off factor keeps one scale regardless of batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class LossValue:
    value: float
    tag: str

    def __float__(self):
        return self.value


def bce(predictions: np.ndarray, labels: np.ndarray, tag: str = "L_t"):
    """Mean binary cross entropy; gradient w.r.t. predictions."""
    p = predictions.reshape(-1)
    y = np.asarray(labels, dtype=p.dtype).reshape(-1)
    if p.shape != y.shape:
        raise ContractError(f"bce length mismatch: {p.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("bce labels must be in {0, 1}")
    n = p.size
    loss = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    dp = ((-y / p + (1 - y) / (1 - p)) / n).reshape(predictions.shape)
    return LossValue(loss, tag), dp


def domain_loss(d_src: np.ndarray, d_tgt: np.ndarray):
    """Adversarial domain objective, source labeled 0 and target labeled 1:
    mean[-ln(1 - d_src)] + mean[-ln(d_tgt)]."""
    ds = d_src.reshape(-1)
    dt = d_tgt.reshape(-1)
    if ds.size == 0 or dt.size == 0:
        raise ContractError("domain_loss requires a non-empty batch from each domain")
    loss = float(np.mean(-np.log(1 - ds)) + np.mean(-np.log(dt)))
    dds = (1.0 / ((1 - ds) * ds.size)).reshape(d_src.shape)
    ddt = (-1.0 / (dt * dt.size)).reshape(d_tgt.shape)
    return LossValue(loss, "L_d"), dds, ddt


def encoder_loss(l_t1: LossValue, l_t2: LossValue, l_d: LossValue | None = None,
                 lam: float = 1.0) -> LossValue:
    """Encoder objective: L_t1 + L_t2, with the domain term subtracted
    (weighted by lam) during the alignment phase."""
    if lam < 0:
        raise ContractError("trade-off factor must be >= 0")
    value = l_t1.value + l_t2.value
    if l_d is not None:
        value -= lam * l_d.value
    return LossValue(value, "L_enc")


def _ce(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return -q * np.log(p) - (1 - q) * np.log(1 - p)


def discrepancy_loss(p1: np.ndarray, p2: np.ndarray, metric: str = "symmetric-bce"):
    """Disagreement between the two task heads on target predictions.

    symmetric-bce: mean of 0.5*[CE(p2||p1) + CE(p1||p2)];
    l1: mean absolute difference.
    """
    a = p1.reshape(-1)
    b = p2.reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"discrepancy_loss length mismatch: {a.shape} vs {b.shape}")
    n = a.size
    if metric == "symmetric-bce":
        loss = float(np.mean(0.5 * (_ce(b, a) + _ce(a, b))))
        da = 0.5 * ((-b / a + (1 - b) / (1 - a)) + (-np.log(b) + np.log(1 - b))) / n
        db = 0.5 * ((-a / b + (1 - a) / (1 - b)) + (-np.log(a) + np.log(1 - a))) / n
    elif metric == "l1":
        loss = float(np.mean(np.abs(a - b)))
        da = np.sign(a - b) / n
        db = -da
    else:
        raise ContractError(f"unknown discrepancy metric {metric!r} (expected symmetric-bce|l1)")
    return (LossValue(loss, "L_dis"),
            da.reshape(p1.shape).astype(p1.dtype),
            db.reshape(p2.shape).astype(p2.dtype))


def classifier_losses_phase3(l_t1: LossValue, l_t2: LossValue,
                             l_dis: LossValue) -> tuple[LossValue, LossValue]:
    """Decision-alignment head objectives: each task loss plus the discrepancy."""
    return (LossValue(l_t1.value + l_dis.value, "L't1"),
            LossValue(l_t2.value + l_dis.value, "L't2"))
