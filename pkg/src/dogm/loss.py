"""Composite training objective with analytic gradients.

``L = alpha_p * L_po + alpha_v * (L_ve + L_vn) + alpha_d * L_pd``

The occupancy term is a Huber loss averaged over all cells; the velocity and
dynamic-class terms are squared errors averaged over label-occupied cells
only. With no occupied cell those terms are zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dogm.errors import ContractError

DYNAMIC_SPEED = 0.8


@dataclass(frozen=True)
class LossWeights:
    alpha_p: float = 50.0
    alpha_v: float = 0.02
    alpha_d: float = 0.1
    huber_delta: float = 0.02
    occ_mask_threshold: float = 0.7

    def __post_init__(self):
        for name in ("alpha_p", "alpha_v", "alpha_d", "huber_delta", "occ_mask_threshold"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")


def huber(e, delta):
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def huber_grad(e, delta):
    return np.clip(e, -delta, delta)


def dynamic_label(v_e, v_n, occupancy, threshold=0.7):
    """1 on occupied cells moving faster than the dynamic speed threshold."""
    speed = np.hypot(v_e, v_n)
    return ((occupancy > threshold) & (speed > DYNAMIC_SPEED)).astype(np.float64)


def composite_loss(pred: np.ndarray, label: np.ndarray, w: LossWeights = LossWeights()):
    """Loss and its gradient w.r.t. ``pred``.

    ``pred`` is ``(..., 4)`` with channels ``p_o, v_e, v_n, p_d``; ``label`` is
    ``(..., 4)`` with channels ``occupancy, v_e, v_n, dynamic``. Returns
    ``(loss, grad)`` where ``grad`` has the shape of ``pred``.
    """
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape or pred.shape[-1] != 4:
        raise ContractError(f"prediction {pred.shape} and label {label.shape} must match (..., 4)")
    dtype = np.result_type(pred.dtype, np.float32)
    grad = np.zeros(pred.shape, dtype=dtype)
    n_all = pred[..., 0].size

    e_o = pred[..., 0] - label[..., 0]
    loss = w.alpha_p * float(np.sum(huber(e_o, w.huber_delta))) / n_all
    grad[..., 0] = w.alpha_p * huber_grad(e_o, w.huber_delta) / n_all

    mask = label[..., 0] > w.occ_mask_threshold
    n_occ = int(mask.sum())
    if n_occ:
        e_ve = np.where(mask, pred[..., 1] - label[..., 1], 0.0)
        e_vn = np.where(mask, pred[..., 2] - label[..., 2], 0.0)
        e_d = np.where(mask, pred[..., 3] - label[..., 3], 0.0)
        loss += w.alpha_v * float(np.sum(e_ve * e_ve) + np.sum(e_vn * e_vn)) / n_occ
        loss += w.alpha_d * float(np.sum(e_d * e_d)) / n_occ
        grad[..., 1] = 2.0 * w.alpha_v * e_ve / n_occ
        grad[..., 2] = 2.0 * w.alpha_v * e_vn / n_occ
        grad[..., 3] = 2.0 * w.alpha_d * e_d / n_occ
    return loss, grad
