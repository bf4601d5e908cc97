"""Objective terms: contrastive loss, Fisher penalty, CMP and their sum.

The contrastive and CMP gradients are analytic. The Fisher penalty is the
mean squared score norm, so its gradient needs Hessian-vector products of the
per-sample log-likelihood; those are taken as central differences of the
analytic score along each sample's own score direction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .model import (
    GROUPS,
    Batch,
    Forward,
    ModelParams,
    ProbBatch,
    forward,
    per_sample_backward,
    per_sample_forward,
    unpack_stacked,
)
from .numerics import softmax

__all__ = [
    "LossBreakdown",
    "ProbBatch",
    "bernoulli_scores",
    "calshift_gradient",
    "calshift_loss",
    "cmp_penalty",
    "cmp_per_sample",
    "contrastive_loss",
    "empirical_fisher_trace",
    "fisher_penalty",
    "per_sample_scores",
    "softmax_linear_scores",
]

HVP_STEP = 1e-5


@dataclass(frozen=True)
class LossBreakdown:
    contrastive: float
    fisher: float
    cmp: float
    total: float
    lambda1: float
    lambda2: float

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Contrastive


def _contrastive_scaled(A: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE on already temperature-scaled scores.

    Returns the loss and its gradient with respect to ``A``.
    """
    N = A.shape[0]
    row_max = A.max(axis=1, keepdims=True)
    row_lse = row_max[:, 0] + np.log(np.exp(A - row_max).sum(axis=1))
    col_max = A.max(axis=0, keepdims=True)
    col_lse = col_max[0] + np.log(np.exp(A - col_max).sum(axis=0))
    diag = np.diag(A)
    l_txt = np.mean(row_lse - diag)
    l_img = np.mean(col_lse - diag)
    eye = np.eye(N)
    grad = 0.5 * ((softmax(A, axis=1) - eye) + (softmax(A, axis=0) - eye)) / N
    return float(0.5 * (l_txt + l_img)), grad


def contrastive_loss(sim_matrix, tau: float) -> float:
    """CLIP loss for an N x N matrix whose (i, j) entry is sim(text_i, image_j)."""
    M = np.asarray(sim_matrix, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise ValueError(f"similarity matrix must be square and non-empty, got {M.shape}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    return _contrastive_scaled(M / tau)[0]


def _paired_contrastive(Z: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    # Row i pairs sample i's class prototype with every image in the batch.
    A = Z[:, labels].T
    loss, dA = _contrastive_scaled(A)
    onehot = np.eye(Z.shape[1])[labels]
    return loss, dA.T @ onehot


# ---------------------------------------------------------------------------
# Fisher information


def empirical_fisher_trace(scores) -> float:
    """Mean squared norm of per-sample score vectors: trace of the empirical Fisher."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] == 0:
        raise ValueError("no scores given")
    return float(np.mean(np.sum(s * s, axis=1)))


def bernoulli_scores(theta: float, y) -> np.ndarray:
    """d/dtheta log p(y; theta) for Bernoulli observations."""
    if not 0.0 < theta < 1.0:
        raise ValueError("Bernoulli theta must lie in (0, 1)")
    y = np.asarray(y, dtype=np.float64)
    return y / theta - (1.0 - y) / (1.0 - theta)


def softmax_linear_scores(W, X, y) -> np.ndarray:
    """Scores of a bias-free linear softmax head ``p = softmax(W x)``.

    Returns ``(n, K * d)`` rows of ``(onehot(y) - p) outer x``.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.array(X, dtype=np.float64, ndmin=2)
    y = np.asarray(y, dtype=np.int64)
    p = softmax(X @ W.T, axis=1)
    resid = np.eye(W.shape[0])[y] - p
    return (resid[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)


def _scores_from_forward(fw: Forward, labels: np.ndarray) -> np.ndarray:
    p = softmax(fw.Z, axis=1)
    G = np.eye(fw.Z.shape[1])[labels] - p
    return per_sample_backward(fw, G)


def per_sample_scores(params: ModelParams, batch: Batch, groups: Sequence[str] = GROUPS) -> np.ndarray:
    """Per-sample gradients of ``log p(y_i | x_i)``; frozen coordinates are zero."""
    batch.check(params.num_classes, params.feature_dim)
    scores = _scores_from_forward(forward(params, batch.features), batch.labels)
    return scores * params.mask(groups)


def fisher_penalty(params: ModelParams, batch: Batch, groups: Sequence[str] = GROUPS) -> float:
    return empirical_fisher_trace(per_sample_scores(params, batch, groups))


def _fisher_value_and_grad(
    params: ModelParams, batch: Batch, fw: Forward, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    scores = _scores_from_forward(fw, batch.labels) * mask
    n = scores.shape[0]
    value = float(np.mean(np.sum(scores * scores, axis=1)))
    norms = np.linalg.norm(scores, axis=1)
    live = norms > 0
    if not np.any(live):
        return value, np.zeros(params.size)
    v = scores[live] / norms[live, None]
    X = batch.features[live]
    y = batch.labels[live]
    theta = params.to_vector()
    diffs = []
    for sign in (1.0, -1.0):
        W, b, c, lt = unpack_stacked(params, theta + sign * HVP_STEP * v)
        fw_s = per_sample_forward(W, b, c, lt, params.class_base, X)
        diffs.append(_scores_from_forward(fw_s, y))
    hvp = (diffs[0] - diffs[1]) / (2.0 * HVP_STEP) * norms[live, None]
    grad = 2.0 * hvp.sum(axis=0) / n
    return value, grad * mask


# ---------------------------------------------------------------------------
# Confidence misalignment penalty


def cmp_per_sample(pb: ProbBatch, variant: str = "main") -> np.ndarray:
    """Per-sample CMP values.

    ``variant="main"``: true-class probability over the total probability of
    the classes strictly above it; 0 when the true class is top-1.
    ``variant="appendix"``: the same ratio anchored on the predicted (argmax)
    class instead of the true class. Nothing ranks strictly above the argmax,
    so this variant is identically 0; it exists only for side-by-side runs.
    """
    pb.validate()
    p = pb.probs
    idx = np.arange(len(pb))
    if variant == "main":
        anchor = pb.labels
    elif variant == "appendix":
        anchor = np.argmax(p, axis=1)
    else:
        raise ValueError(f"unknown CMP variant {variant!r}")
    pa = p[idx, anchor]
    above = p > pa[:, None]
    above[idx, anchor] = False
    denom = np.sum(np.where(above, p, 0.0), axis=1)
    out = np.zeros(len(pb))
    has = denom > 0
    out[has] = pa[has] / denom[has]
    return out


def cmp_penalty(pb: ProbBatch, variant: str = "main") -> float:
    return float(np.mean(cmp_per_sample(pb, variant)))


def _cmp_value_and_logit_grad(Z: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    # The dominating set is held fixed inside one evaluation; on that piece
    # the ratio is exp(z_y) / sum_S exp(z_j), independent of the softmax norm.
    n = Z.shape[0]
    p = softmax(Z, axis=1)
    idx = np.arange(n)
    py = p[idx, labels]
    above = p > py[:, None]
    above[idx, labels] = False
    D = np.sum(np.where(above, p, 0.0), axis=1)
    has = D > 0
    r = np.zeros(n)
    r[has] = py[has] / D[has]
    G = np.zeros_like(Z)
    G[idx, labels] = r
    safe_D = np.where(has, D, 1.0)
    G -= np.where(above, r[:, None] * p / safe_D[:, None], 0.0)
    return float(r.mean()), G / n


# ---------------------------------------------------------------------------
# Combined objective


def _check_lambdas(lambda1: float, lambda2: float) -> None:
    if not (lambda1 >= 0 and lambda2 >= 0):
        raise ValueError("lambda1 and lambda2 must be non-negative")


def _evaluate(params, batch, lambda1, lambda2, groups, penalty_groups, want_grad):
    _check_lambdas(lambda1, lambda2)
    batch.check(params.num_classes, params.feature_dim)
    train_mask = params.mask(groups)
    pen_mask = train_mask & params.mask(penalty_groups if penalty_groups is not None else groups)
    fw = forward(params, batch.features)
    con, G_con = _paired_contrastive(fw.Z, batch.labels)
    cmp_val, G_cmp = _cmp_value_and_logit_grad(fw.Z, batch.labels)
    if want_grad and lambda1 > 0:
        fis, g_fis = _fisher_value_and_grad(params, batch, fw, pen_mask)
    else:
        scores = _scores_from_forward(fw, batch.labels) * pen_mask
        fis, g_fis = float(np.mean(np.sum(scores * scores, axis=1))), None
    total = con + lambda1 * fis + lambda2 * cmp_val
    br = LossBreakdown(con, fis, cmp_val, float(total), float(lambda1), float(lambda2))
    if not want_grad:
        return br, None
    grad = per_sample_backward(fw, G_con).sum(axis=0) * train_mask
    if lambda2 > 0:
        grad += lambda2 * per_sample_backward(fw, G_cmp).sum(axis=0) * pen_mask
    if g_fis is not None:
        grad += lambda1 * g_fis
    return br, grad


def calshift_loss(
    params: ModelParams,
    batch: Batch,
    lambda1: float = 0.4,
    lambda2: float = 0.4,
    groups: Sequence[str] = GROUPS,
    penalty_groups: Sequence[str] | None = None,
) -> LossBreakdown:
    """Contrastive loss plus ``lambda1 * fisher + lambda2 * cmp`` on one batch.

    ``groups`` are the trainable parameter groups (the Fisher trace runs over
    them); ``penalty_groups`` optionally narrows where the penalties act.
    """
    return _evaluate(params, batch, lambda1, lambda2, groups, penalty_groups, False)[0]


def calshift_value_and_gradient(
    params: ModelParams,
    batch: Batch,
    lambda1: float = 0.4,
    lambda2: float = 0.4,
    groups: Sequence[str] = GROUPS,
    penalty_groups: Sequence[str] | None = None,
) -> tuple[LossBreakdown, np.ndarray]:
    return _evaluate(params, batch, lambda1, lambda2, groups, penalty_groups, True)


def calshift_gradient(
    params: ModelParams,
    batch: Batch,
    lambda1: float = 0.4,
    lambda2: float = 0.4,
    groups: Sequence[str] = GROUPS,
    penalty_groups: Sequence[str] | None = None,
) -> np.ndarray:
    """Gradient of the total over the flat parameter vector.

    Frozen coordinates are returned as zeros so the result lines up with
    ``params.to_vector()``.
    """
    return _evaluate(params, batch, lambda1, lambda2, groups, penalty_groups, True)[1]
