"""Reference loss kernels (numeric only, no gradients)."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateEmbeddingError, InvalidArgumentError
from .geometry import RigidTransform

W_FLOW = 0.5
W_M = 1e-3
W_RED = 0.005
W_AFE = 0.2
W_BT = 0.05
PROB_EPS = 1e-7


def registration_loss(T: RigidTransform, T_hat: RigidTransform, points) -> float:
    """Mean per-point distance between ``T(w)`` and ``T_hat(w)`` in mm."""
    w = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(w) == 0:
        raise InvalidArgumentError("registration_loss needs at least one point")
    return float(np.mean(np.linalg.norm(T.apply(w) - T_hat.apply(w), axis=1)))


def motion_reg_loss(dv) -> float:
    dv = np.asarray(dv, dtype=float).reshape(6)
    return float(dv @ dv)


def flow_loss(flow_pred, flow_gt, valid=None) -> float:
    """Mean end-point error over valid pixels; flows are ``(..., 2)`` arrays."""
    pred = np.asarray(flow_pred, dtype=float)
    gt = np.asarray(flow_gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise InvalidArgumentError("flow fields must have equal shapes (..., 2)")
    epe = np.linalg.norm(pred - gt, axis=-1)
    mask = np.ones(epe.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if mask.shape != epe.shape:
        raise InvalidArgumentError("valid mask must match the flow field shape")
    if not mask.any():
        raise InvalidArgumentError("valid mask is empty")
    return float(epe[mask].mean())


def dirn_loss(l_reg, l_flow, l_m, w_flow: float = W_FLOW, w_m: float = W_M) -> float:
    return float(l_reg + w_flow * l_flow + w_m * l_m)


def _standardize(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise InvalidArgumentError("embedding batches must be B x D with B >= 2")
    if not np.all(np.isfinite(Z)):
        raise InvalidArgumentError("embeddings must be finite")
    c = Z - Z.mean(axis=0)
    std = np.sqrt((c * c).mean(axis=0))
    scale = np.maximum(np.abs(Z).max(axis=0), 1.0)
    if np.any(std <= 1e-12 * scale):
        raise DegenerateEmbeddingError("an embedding column has zero variance over the batch")
    return c / std


def cross_correlation(Z1, Z2) -> np.ndarray:
    """``C[i, j] = mean_b Z1_std[b, i] * Z2_std[b, j]`` with batch-standardized columns."""
    a, b = _standardize(Z1), _standardize(Z2)
    if a.shape != b.shape:
        raise InvalidArgumentError("embedding batches must have the same shape")
    return a.T @ b / a.shape[0]


def barlow_twins_loss(Z1, Z2, w_red: float = W_RED) -> float:
    C = cross_correlation(Z1, Z2)
    diag = np.diag(C)
    invariance = np.sum((1.0 - diag) ** 2)
    redundancy = np.sum(C * C) - np.sum(diag * diag)
    return float(invariance + w_red * redundancy)


def adversarial_feature_loss(sim_probs, real_probs) -> float:
    """``mean(log p_sim) + mean(log(1 - p_real))`` with probabilities clamped to (0, 1)."""
    ps = np.clip(np.asarray(sim_probs, dtype=float).reshape(-1), PROB_EPS, 1.0 - PROB_EPS)
    pr = np.clip(np.asarray(real_probs, dtype=float).reshape(-1), PROB_EPS, 1.0 - PROB_EPS)
    if len(ps) == 0 or len(pr) == 0:
        raise InvalidArgumentError("discriminator outputs must be non-empty")
    return float(np.mean(np.log(ps)) + np.mean(np.log1p(-pr)))


def total_loss(l_dirn, l_afe, l_bt, w_afe: float = W_AFE, w_bt: float = W_BT) -> float:
    return float(l_dirn + w_afe * l_afe + w_bt * l_bt)
