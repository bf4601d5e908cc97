"""Gradient-descent training under the CalShift objective, plus sweeps."""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .calibration import DEFAULT_BINS, CalibrationReport, ece
from .datagen import ShiftScenario, few_shot_split, sample_domain
from .losses import LossBreakdown, calshift_loss, calshift_value_and_gradient, per_sample_scores
from .model import GROUPS, Batch, ModelParams, init_params, predict_probs
from .numerics import derive_seed, make_rng

log = logging.getLogger(__name__)

MAX_HALVINGS = 10


class TrainingFailure(RuntimeError):
    """Training diverged; ``params`` holds the last finite state."""

    def __init__(self, message: str, params: ModelParams | None = None):
        super().__init__(message)
        self.params = params


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.4
    lambda2: float = 0.4
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    optimizer: str = "plain"
    damping: float = 1e-3
    train_groups: tuple = GROUPS
    penalty_groups: tuple | None = None
    cmp_variant: str = "main"

    def __post_init__(self):
        nums = (self.lambda1, self.lambda2, self.learning_rate, self.damping)
        if not all(np.isfinite(v) for v in nums):
            raise ValueError("numeric config fields must be finite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 1, or 0 for full batch")
        if self.optimizer not in ("plain", "natural"):
            raise ValueError("optimizer must be 'plain' or 'natural'")
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        object.__setattr__(self, "train_groups", tuple(self.train_groups))
        if self.penalty_groups is not None:
            object.__setattr__(self, "penalty_groups", tuple(self.penalty_groups))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_groups"] = list(self.train_groups)
        d["penalty_groups"] = None if self.penalty_groups is None else list(self.penalty_groups)
        return d


@dataclass
class RunResult:
    config: dict
    epochs: list[LossBreakdown] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    lr_halvings: int = 0
    cell: dict = field(default_factory=dict)
    error: str | None = None
    wall_time: float = 0.0

    def metric(self, split: str, name: str) -> float:
        return self.metrics[split][name]

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "config": self.config,
            "cell": self.cell,
            "epochs": [e.to_dict() for e in self.epochs],
            "metrics": self.metrics,
            "lr_halvings": self.lr_halvings,
            "error": self.error,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(
            config=d["config"],
            epochs=[LossBreakdown(**e) for e in d["epochs"]],
            metrics=d["metrics"],
            lr_halvings=d.get("lr_halvings", 0),
            cell=d.get("cell", {}),
            error=d.get("error"),
            wall_time=d.get("wall_time", 0.0),
        )


def evaluate(params: ModelParams, batch: Batch, num_bins: int = DEFAULT_BINS) -> CalibrationReport:
    return ece(predict_probs(params, batch), num_bins)


def natural_gradient_update(grad, fisher, learning_rate: float, damping: float) -> np.ndarray:
    """``-lr * (F + damping * I)^-1 grad``."""
    grad = np.asarray(grad, dtype=np.float64)
    F = np.asarray(fisher, dtype=np.float64)
    A = F + damping * np.eye(F.shape[0])
    try:
        step = np.linalg.solve(A, grad)
    except np.linalg.LinAlgError as exc:
        raise TrainingFailure(f"natural-gradient solve failed: {exc}") from exc
    if not np.all(np.isfinite(step)):
        raise TrainingFailure("natural-gradient solve produced non-finite values")
    return -learning_rate * step


def empirical_fisher_matrix(params: ModelParams, batch: Batch, groups: Sequence[str] = GROUPS) -> np.ndarray:
    """Mean outer product of per-sample scores over the trainable coordinates."""
    mask = params.mask(groups)
    S = per_sample_scores(params, batch, groups)[:, mask]
    return S.T @ S / S.shape[0]


def _loss_kwargs(cfg: TrainConfig) -> dict:
    return dict(
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2 if cfg.cmp_variant == "main" else 0.0,
        groups=cfg.train_groups,
        penalty_groups=cfg.penalty_groups,
    )


def _relabel(br: LossBreakdown, cfg: TrainConfig) -> LossBreakdown:
    if cfg.cmp_variant != "main":
        # appendix CMP is identically zero, see losses.cmp_per_sample
        return replace(br, lambda2=cfg.lambda2)
    return br


def _breakdown(params: ModelParams, batch: Batch, cfg: TrainConfig) -> LossBreakdown:
    return _relabel(calshift_loss(params, batch, **_loss_kwargs(cfg)), cfg)


def _step_direction(params: ModelParams, batch: Batch, cfg: TrainConfig, grad: np.ndarray) -> np.ndarray:
    if cfg.optimizer == "plain":
        return -cfg.learning_rate * grad
    mask = params.mask(cfg.train_groups)
    F = empirical_fisher_matrix(params, batch, cfg.train_groups)
    out = np.zeros(params.size)
    out[mask] = natural_gradient_update(grad[mask], F, cfg.learning_rate, cfg.damping)
    return out


def natural_gradient_step(params: ModelParams, batch: Batch, cfg: TrainConfig) -> ModelParams:
    batch.check(params.num_classes, params.feature_dim)
    _, grad = calshift_value_and_gradient(params, batch, **_loss_kwargs(cfg))
    step = _step_direction(params, batch, replace(cfg, optimizer="natural"), grad)
    return params.with_vector(params.to_vector() + step)


def _try_step(params, batch, cfg, lr):
    """One step from ``params``, halving ``lr`` until the result is finite.

    Returns the new parameters, the learning rate in force, the number of
    halvings, and the loss breakdown at the starting point.
    """
    br, grad = calshift_value_and_gradient(params, batch, **_loss_kwargs(cfg))
    halvings = 0
    while True:
        step = _step_direction(params, batch, replace(cfg, learning_rate=lr), grad)
        candidate = None
        if np.all(np.isfinite(step)):
            try:
                candidate = params.with_vector(params.to_vector() + step)
                if not np.isfinite(calshift_loss(candidate, batch, **_loss_kwargs(cfg)).total):
                    candidate = None
            except (ValueError, ArithmeticError):
                candidate = None
        if candidate is not None:
            return candidate, lr, halvings, br
        if halvings >= MAX_HALVINGS:
            raise TrainingFailure(f"loss non-finite after {MAX_HALVINGS} learning-rate halvings", params)
        lr *= 0.5
        halvings += 1
        log.warning("non-finite update, learning rate halved to %g", lr)


def train(
    params: ModelParams,
    train_batch: Batch,
    cfg: TrainConfig,
    eval_batches: dict[str, Batch] | None = None,
    num_bins: int = DEFAULT_BINS,
) -> tuple[ModelParams, RunResult]:
    """Minimise the CalShift objective by (natural) gradient descent.

    An empty ``train_batch`` is the zero-shot mode: parameters come back
    unchanged and only the evaluation metrics are filled in. Each epoch
    records the full-batch loss at its starting point.
    """
    start = time.perf_counter()
    result = RunResult(config=cfg.to_dict())
    if len(train_batch) > 0:
        train_batch.check(params.num_classes, params.feature_dim)
        rng = make_rng(cfg.seed)
        lr = cfg.learning_rate
        n = len(train_batch)
        full = cfg.batch_size == 0 or cfg.batch_size >= n
        for _ in range(cfg.epochs):
            if full:
                params, lr, h, br = _try_step(params, train_batch, cfg, lr)
                result.epochs.append(_relabel(br, cfg))
                result.lr_halvings += h
                continue
            result.epochs.append(_breakdown(params, train_batch, cfg))
            order = rng.permutation(n)
            for i in range(0, n, cfg.batch_size):
                sel = order[i : i + cfg.batch_size]
                mb = Batch(train_batch.features[sel], train_batch.labels[sel])
                params, lr, h, _ = _try_step(params, mb, cfg, lr)
                result.lr_halvings += h
    for name, batch in (eval_batches or {}).items():
        rep = evaluate(params, batch, num_bins)
        result.metrics[name] = {"accuracy": rep.accuracy, "ece": rep.ece}
    result.wall_time = time.perf_counter() - start
    return params, result


# ---------------------------------------------------------------------------
# Replicated experiments


@dataclass(frozen=True)
class ExperimentSetup:
    """Everything needed to turn a seed into data and an initial model."""

    scenario: ShiftScenario
    n_pool: int = 400
    n_test: int = 2000
    embed_dim: int = 8
    pretrain_noise: float = 0.5
    init_log_tau: float = 0.0


@dataclass
class ReplicateData:
    pool: Batch
    source_test: Batch
    target_test: Batch
    init: ModelParams


def replicate_init(setup: ExperimentSetup, seed: int) -> ModelParams:
    sc = setup.scenario
    return init_params(
        sc.num_classes,
        sc.feature_dim,
        setup.embed_dim,
        rng=make_rng(derive_seed(seed, "init")),
        class_means=sc.means,
        pretrain_noise=setup.pretrain_noise,
        log_tau=setup.init_log_tau,
        seed=seed,
    )


def replicate_splits(setup: ExperimentSetup, seed: int) -> dict[str, Batch]:
    """The three dataset splits of one replicate, each from its own child seed."""
    sc = setup.scenario
    sizes = {"source-train": setup.n_pool, "source-test": setup.n_test, "target-test": setup.n_test}
    return {
        split: sample_domain(sc, split.split("-")[0], n, make_rng(derive_seed(seed, split)))
        for split, n in sizes.items()
    }


def make_replicate(setup: ExperimentSetup, seed: int) -> ReplicateData:
    splits = replicate_splits(setup, seed)
    return ReplicateData(
        splits["source-train"], splits["source-test"], splits["target-test"], replicate_init(setup, seed)
    )


def run_cell(
    data: ReplicateData,
    cfg: TrainConfig,
    shots: int,
    split_seed: int,
    num_bins: int = DEFAULT_BINS,
) -> tuple[ModelParams, RunResult]:
    """Few-shot split of the pool, train, evaluate on both test domains."""
    train_batch = few_shot_split(data.pool, shots, make_rng(split_seed), data.init.num_classes)
    evals = {"source-test": data.source_test, "target-test": data.target_test}
    return train(data.init, train_batch, cfg, evals, num_bins)


def _sweep_cell(args):
    setup, cfg, shots, seed, key, num_bins, data_fn = args
    data = data_fn(seed) if data_fn is not None else make_replicate(setup, seed)
    t0 = time.perf_counter()
    try:
        _, res = run_cell(data, cfg, shots, derive_seed(seed, "shots", shots), num_bins)
    except (TrainingFailure, ValueError, ArithmeticError) as exc:
        res = RunResult(config=cfg.to_dict(), error=f"{type(exc).__name__}: {exc}")
        res.wall_time = time.perf_counter() - t0
    res.cell = key
    return res


def lambda_sweep(
    setup: ExperimentSetup,
    grid1: Sequence[float],
    grid2: Sequence[float],
    cfg: TrainConfig,
    repeats: int = 1,
    shots: int = 16,
    base_seed: int = 0,
    workers: int = 1,
    num_bins: int = DEFAULT_BINS,
    data_fn: Callable[[int], ReplicateData] | None = None,
) -> list[RunResult]:
    """One run per (lambda1, lambda2, repeat) in cartesian order.

    Data, initial parameters and the training seed depend only on the repeat
    index, so every cell of one repeat sees the same draws and reordering a
    grid does not change any cell's result. Failed cells carry ``error``.
    """
    if not grid1 or not grid2:
        raise ValueError("lambda grids must be non-empty")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    jobs = []
    for l1, l2, r in itertools.product(grid1, grid2, range(repeats)):
        seed = derive_seed(base_seed, "repeat", r)
        cell_cfg = replace(cfg, lambda1=float(l1), lambda2=float(l2), seed=derive_seed(seed, "train"))
        key = {"lambda1": float(l1), "lambda2": float(l2), "repeat": r, "seed": seed, "shots": shots}
        jobs.append((setup, cell_cfg, shots, seed, key, num_bins, data_fn))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_cell, jobs))
    cache: dict[int, ReplicateData] = {}

    def cached(seed):
        if seed not in cache:
            cache[seed] = data_fn(seed) if data_fn is not None else make_replicate(setup, seed)
        return cache[seed]

    return [_sweep_cell(job[:-1] + (cached,)) for job in jobs]


def aggregate(results: Sequence[RunResult], split: str = "target-test") -> dict[tuple[float, float], dict]:
    """Mean and sample standard deviation per (lambda1, lambda2) cell."""
    cells: dict[tuple[float, float], list[RunResult]] = {}
    for r in results:
        cells.setdefault((r.cell["lambda1"], r.cell["lambda2"]), []).append(r)
    out = {}
    for key, runs in cells.items():
        ok = [r for r in runs if r.error is None]
        row = {"runs": len(runs), "failed": len(runs) - len(ok)}
        for m in ("accuracy", "ece"):
            vals = np.array([r.metric(split, m) for r in ok])
            row[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
            row[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[key] = row
    return out
