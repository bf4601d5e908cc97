"""Desk-scale dual encoder with a learnable shared prompt context.

The image side is an affine map ``W_img @ x + b_img``. The text side is a
frozen per-class embedding plus one shared context vector (CoOp's unified
context). Class logits are cosine similarities divided by ``exp(log_tau)``.

All forward and backward passes go through :func:`per_sample_forward` and
:func:`per_sample_backward`, which accept parameters either shared across the
batch or stacked with a leading sample axis. The stacked form is what the
Fisher-penalty gradient needs (one perturbed parameter vector per sample).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import DegenerateInputError, cosine_similarity, softmax

GROUPS = ("W_img", "b_img", "context", "log_tau")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelParams:
    W_img: np.ndarray
    b_img: np.ndarray
    class_base: np.ndarray
    context: np.ndarray
    log_tau: float
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "W_img", np.array(self.W_img, dtype=np.float64, ndmin=2))
        object.__setattr__(self, "b_img", np.array(self.b_img, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "class_base", np.array(self.class_base, dtype=np.float64, ndmin=2))
        object.__setattr__(self, "context", np.array(self.context, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "log_tau", float(self.log_tau))
        e, _ = self.W_img.shape
        if self.b_img.shape != (e,) or self.context.shape != (e,) or self.class_base.shape[1] != e:
            raise ValueError(
                f"inconsistent dims: W_img {self.W_img.shape}, b_img {self.b_img.shape}, "
                f"class_base {self.class_base.shape}, context {self.context.shape}"
            )
        if not np.isfinite(self.log_tau):
            raise ValueError("log_tau must be finite")

    @property
    def embed_dim(self) -> int:
        return self.W_img.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W_img.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_base.shape[0]

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    def group_slices(self) -> dict[str, slice]:
        e, d = self.W_img.shape
        sizes = {"W_img": e * d, "b_img": e, "context": e, "log_tau": 1}
        out, start = {}, 0
        for g in GROUPS:
            out[g] = slice(start, start + sizes[g])
            start += sizes[g]
        return out

    @property
    def size(self) -> int:
        return self.W_img.size + 2 * self.embed_dim + 1

    def to_vector(self) -> np.ndarray:
        """Flatten the trainable groups (everything but ``class_base``)."""
        return np.concatenate(
            [self.W_img.ravel(), self.b_img, self.context, [self.log_tau]]
        )

    def with_vector(self, v) -> "ModelParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {v.shape}")
        s = self.group_slices()
        return ModelParams(
            W_img=v[s["W_img"]].reshape(self.W_img.shape),
            b_img=v[s["b_img"]],
            class_base=self.class_base,
            context=v[s["context"]],
            log_tau=v[s["log_tau"]][0],
            seed=self.seed,
        )

    def mask(self, groups: Sequence[str] = GROUPS) -> np.ndarray:
        """Boolean mask over the flat vector selecting ``groups``."""
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        m = np.zeros(self.size, dtype=bool)
        for g, sl in self.group_slices().items():
            if g in groups:
                m[sl] = True
        return m


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    zero_shot: bool = field(default=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise ValueError(f"features must be (n, feature_dim), got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def check(self, num_classes: int, feature_dim: int | None = None) -> None:
        if len(self) == 0:
            raise ValueError("batch is empty")
        if self.labels.min() < 0 or self.labels.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes})")
        if feature_dim is not None and self.features.shape[1] != feature_dim:
            raise ValueError(
                f"feature dim mismatch: batch has {self.features.shape[1]}, model expects {feature_dim}"
            )


@dataclass
class ProbBatch:
    """Per-sample class probabilities with the true labels."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.labels.shape[0]:
            raise ValueError("probs must be (n, K) with one label per row")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def validate(self, atol: float = 1e-9) -> None:
        if len(self) == 0:
            raise ValueError("probability batch is empty")
        p = self.probs
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > atol):
            raise ValueError("probability rows must sum to 1")
        if self.labels.min() < 0 or self.labels.max() >= p.shape[1]:
            raise ValueError("labels out of range")


def init_params(
    num_classes: int,
    feature_dim: int = 16,
    embed_dim: int = 8,
    *,
    rng: np.random.Generator,
    class_means: np.ndarray | None = None,
    pretrain_noise: float = 0.5,
    log_tau: float = 0.0,
    seed: int | None = None,
) -> ModelParams:
    """Random class tokens plus an image map that roughly aligns with them.

    When ``class_means`` (K x feature_dim) is given, ``W_img`` is the least
    squares map sending each centred class mean onto its class token,
    perturbed by Gaussian noise of scale ``pretrain_noise``. This plays the
    role of a pretrained encoder pair, so the untrained model (zero-shot) is
    better than chance.
    """
    base = rng.standard_normal((num_classes, embed_dim))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    if class_means is None:
        W = rng.standard_normal((embed_dim, feature_dim)) / np.sqrt(feature_dim)
        b = np.zeros(embed_dim)
    else:
        M = np.asarray(class_means, dtype=np.float64)
        center = M.mean(axis=0)
        Mc = M - center
        # W @ Mc.T ~= base.T
        W = np.linalg.lstsq(Mc, base, rcond=None)[0].T
        scale = np.linalg.norm(W) / np.sqrt(W.size)
        W = W + pretrain_noise * scale * rng.standard_normal(W.shape)
        b = -W @ center
    return ModelParams(
        W_img=W,
        b_img=b,
        class_base=base,
        context=np.zeros(embed_dim),
        log_tau=log_tau,
        seed=seed,
    )


def encode_image(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.feature_dim:
        raise ValueError(f"x has {x.shape[0]} features, model expects {params.feature_dim}")
    return params.W_img @ x + params.b_img


def encode_class(params: ModelParams, k: int) -> np.ndarray:
    if not 0 <= k < params.num_classes:
        raise ValueError(f"class index {k} out of range [0, {params.num_classes})")
    return params.class_base[k] + params.context


def class_logits(params: ModelParams, x) -> np.ndarray:
    img = encode_image(params, x)
    return np.array(
        [cosine_similarity(img, encode_class(params, k)) for k in range(params.num_classes)]
    ) / params.tau


# ---------------------------------------------------------------------------
# Vectorised passes


@dataclass
class Forward:
    X: np.ndarray
    W: np.ndarray  # (n, e, d) or (e, d)
    U: np.ndarray  # (n, e)
    u_norm: np.ndarray  # (n,)
    U_hat: np.ndarray  # (n, e)
    T_hat: np.ndarray  # (n, K, e) or (K, e)
    t_norm: np.ndarray
    inv_tau: np.ndarray  # (n,)
    S: np.ndarray  # (n, K) cosine similarities
    Z: np.ndarray  # (n, K) logits


def per_sample_forward(
    W, b, context, log_tau, class_base: np.ndarray, X: np.ndarray
) -> Forward:
    """Logits for every row of ``X``.

    Parameters may carry a leading sample axis (``W`` as ``(n, e, d)``,
    ``b`` and ``context`` as ``(n, e)``, ``log_tau`` as ``(n,)``) or be
    shared across samples.
    """
    W = np.asarray(W, dtype=np.float64)
    n = X.shape[0]
    if W.ndim == 3:
        U = np.einsum("ned,nd->ne", W, X)
    else:
        U = X @ W.T
    U = U + b
    u_norm = np.sqrt(np.sum(U * U, axis=-1))
    if np.any(u_norm == 0.0):
        raise DegenerateInputError("zero-norm image embedding")
    U_hat = U / u_norm[:, None]
    context = np.asarray(context, dtype=np.float64)
    if context.ndim == 2:
        T = class_base[None, :, :] + context[:, None, :]
    else:
        T = class_base + context
    t_norm = np.sqrt(np.sum(T * T, axis=-1))
    if np.any(t_norm == 0.0):
        raise DegenerateInputError("zero-norm class embedding")
    T_hat = T / t_norm[..., None]
    if T_hat.ndim == 3:
        S = np.einsum("ne,nke->nk", U_hat, T_hat)
    else:
        S = U_hat @ T_hat.T
    inv_tau = np.broadcast_to(np.exp(-np.asarray(log_tau, dtype=np.float64)), (n,))
    Z = S * inv_tau[:, None]
    return Forward(X, W, U, u_norm, U_hat, T_hat, t_norm, inv_tau, S, Z)


def per_sample_backward(fw: Forward, G: np.ndarray) -> np.ndarray:
    """Per-sample gradients ``(n, P)`` given upstream ``G = dL_i/dZ_i``."""
    n, K = G.shape
    gS = G * fw.inv_tau[:, None]
    T_hat = fw.T_hat if fw.T_hat.ndim == 3 else np.broadcast_to(fw.T_hat, (n,) + fw.T_hat.shape)
    t_norm = fw.t_norm if fw.t_norm.ndim == 2 else np.broadcast_to(fw.t_norm, (n, K))
    gU_hat = np.einsum("nk,nke->ne", gS, T_hat)
    gT_hat = gS[:, :, None] * fw.U_hat[:, None, :]
    gU = (gU_hat - fw.U_hat * np.sum(fw.U_hat * gU_hat, axis=1, keepdims=True)) / fw.u_norm[:, None]
    gT = (gT_hat - T_hat * np.sum(T_hat * gT_hat, axis=2, keepdims=True)) / t_norm[:, :, None]
    gW = gU[:, :, None] * fw.X[:, None, :]
    gc = gT.sum(axis=1)
    glt = -np.sum(G * fw.Z, axis=1)
    return np.concatenate([gW.reshape(n, -1), gU, gc, glt[:, None]], axis=1)


def forward(params: ModelParams, X: np.ndarray) -> Forward:
    return per_sample_forward(
        params.W_img, params.b_img, params.context, params.log_tau, params.class_base, X
    )


def unpack_stacked(params: ModelParams, thetas: np.ndarray):
    """Split stacked flat vectors ``(n, P)`` into per-sample parameter arrays."""
    s = params.group_slices()
    n = thetas.shape[0]
    return (
        thetas[:, s["W_img"]].reshape(n, *params.W_img.shape),
        thetas[:, s["b_img"]],
        thetas[:, s["context"]],
        thetas[:, s["log_tau"]][:, 0],
    )


def batch_logits(params: ModelParams, X) -> np.ndarray:
    X = np.array(X, dtype=np.float64, ndmin=2)
    if X.shape[1] != params.feature_dim:
        raise ValueError(f"X has {X.shape[1]} features, model expects {params.feature_dim}")
    return forward(params, X).Z


def predict_probs(params: ModelParams, batch: Batch):
    batch.check(params.num_classes, params.feature_dim)
    return ProbBatch(softmax(batch_logits(params, batch.features), axis=1), batch.labels)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "seed": params.seed,
        "dims": {
            "embed_dim": params.embed_dim,
            "feature_dim": params.feature_dim,
            "num_classes": params.num_classes,
        },
        "layout": ["W_img", "b_img", "class_base", "context", "log_tau"],
    }
    body = np.concatenate(
        [params.W_img.ravel(), params.b_img, params.class_base.ravel(), params.context, [params.log_tau]]
    ).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(body.tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        body = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {header.get('schema_version')}")
    e = header["dims"]["embed_dim"]
    d = header["dims"]["feature_dim"]
    k = header["dims"]["num_classes"]
    expected = e * d + e + k * e + e + 1
    if body.size != expected:
        raise ValueError(f"checkpoint holds {body.size} floats, header implies {expected}")
    parts = np.split(body, np.cumsum([e * d, e, k * e, e]))
    return ModelParams(
        W_img=parts[0].reshape(e, d),
        b_img=parts[1],
        class_base=parts[2].reshape(k, e),
        context=parts[3],
        log_tau=parts[4][0],
        seed=header.get("seed"),
    )
