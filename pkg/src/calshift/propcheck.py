"""Executable checks of the Fisher/KL quadratic relation and CMP properties."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .losses import bernoulli_scores, cmp_per_sample, empirical_fisher_trace
from .model import ProbBatch

FAMILIES = ("gaussian-mean", "bernoulli")
DEFAULT_LADDER = (0.1, 0.05, 0.025, 0.0125)


@dataclass(frozen=True)
class QuadraticCheckResult:
    delta_theta: tuple
    kl_exact: float
    quadratic_form: float
    relative_gap: float


def gaussian_mean_kl(mu_q: float, mu_p: float, sigma: float = 1.0) -> float:
    return (mu_q - mu_p) ** 2 / (2.0 * sigma**2)


def bernoulli_kl(q: float, p: float) -> float:
    """KL(Bernoulli(q) || Bernoulli(p)) with the 0 log 0 = 0 convention."""
    out = 0.0
    if q > 0:
        out += q * math.log(q / p)
    if q < 1:
        out += (1 - q) * math.log((1 - q) / (1 - p))
    return out


def closed_form_fisher(family: str, theta: float, sigma: float = 1.0) -> float:
    if family == "gaussian-mean":
        return 1.0 / sigma**2
    if family == "bernoulli":
        return 1.0 / (theta * (1.0 - theta))
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def fisher_kl_check(
    family: str, theta: float, deltas: Sequence[float] = DEFAULT_LADDER, sigma: float = 1.0
) -> list[QuadraticCheckResult]:
    """Compare KL(q || p_theta) with 0.5 * delta^2 * I(theta), q at theta + delta."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if family == "bernoulli" and not 0 < theta < 1:
        raise ValueError("Bernoulli theta must lie in (0, 1)")
    if family == "gaussian-mean" and not sigma > 0:
        raise ValueError("sigma must be positive")
    info = closed_form_fisher(family, theta, sigma)
    out = []
    for d in deltas:
        q = theta + d
        if family == "bernoulli":
            if not 0 < q < 1:
                raise ValueError(f"theta + delta = {q} leaves (0, 1)")
            kl = bernoulli_kl(q, theta)
        else:
            kl = gaussian_mean_kl(q, theta, sigma)
        quad = 0.5 * d * info * d
        gap = abs(kl - quad) / max(kl, 1e-300)
        out.append(QuadraticCheckResult((float(d),), kl, quad, gap))
    return out


def gap_shrinks(results: Sequence[QuadraticCheckResult], floor: float = 1e-12) -> bool:
    """True if every gap above ``floor`` is followed by a strictly smaller one."""
    gaps = [r.relative_gap for r in results]
    return all(b < a for a, b in zip(gaps, gaps[1:]) if a > floor)


def bernoulli_fisher_estimate(theta: float, n: int, rng: np.random.Generator) -> float:
    """Empirical Fisher trace from n Bernoulli(theta) draws, scored at theta."""
    y = rng.random(n) < theta
    return empirical_fisher_trace(bernoulli_scores(theta, y))


# ---------------------------------------------------------------------------
# CMP properties


@dataclass
class CheckOutcome:
    check: str
    trials: int
    failures: int
    worst: float = 0.0

    @property
    def passed(self) -> bool:
        return self.failures == 0


@dataclass
class PropertyReport:
    outcomes: list[CheckOutcome] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(o.passed for o in self.outcomes)

    def failing(self) -> list[str]:
        return [o.check for o in self.outcomes if not o.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(o) | {"passed": o.passed} for o in self.outcomes]}


def random_prob_rows(rng: np.random.Generator, n: int, max_classes: int = 10):
    """Softmax rows over random logits at random scales, with random labels."""
    K = int(rng.integers(2, max_classes + 1))
    scale = 10.0 ** rng.uniform(-2, 1.5, size=(n, 1))
    probs = np.exp(rng.standard_normal((n, K)) * scale)
    probs /= probs.sum(axis=1, keepdims=True)
    return ProbBatch(probs, rng.integers(0, K, size=n))


def cmp_property_suite(
    rng: np.random.Generator,
    trials: int = 100_000,
    cmp_fn: Callable[[ProbBatch], np.ndarray] | None = None,
) -> PropertyReport:
    """Bounds, zero set and monotone approach of the per-sample CMP.

    ``cmp_fn`` is injectable so a deliberately broken implementation can be
    run through the same harness.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    # looked up at call time so a patched module attribute is honoured
    cmp_fn = cmp_fn or cmp_per_sample
    bounds = CheckOutcome("cmp bounds", 0, 0)
    zeros = CheckOutcome("cmp zero iff top-1 correct", 0, 0)
    remaining = trials
    while remaining > 0:
        n = min(remaining, 10_000)
        pb = random_prob_rows(rng, n)
        vals = np.asarray(cmp_fn(pb))
        bad = ~((vals >= 0) & (vals < 1))
        bounds.trials += n
        bounds.failures += int(bad.sum())
        if bad.any():
            bounds.worst = max(bounds.worst, float(np.max(np.abs(vals[bad]))))
        py = pb.probs[np.arange(n), pb.labels]
        top1 = py >= pb.probs.max(axis=1)
        zeros.trials += n
        zeros.failures += int(np.sum((vals == 0) != top1))
        remaining -= n

    mono = CheckOutcome("cmp monotone approach", 0, 0)
    for _ in range(min(trials, 1000)):
        K = int(rng.integers(2, 8))
        if K == 2:
            t = np.linspace(0.01, 0.499, 25)
            rows = np.column_stack([t, 1.0 - t])
        else:
            # one dominating class; the rest stay below the true class
            dom = float(rng.uniform(max(0.3, 1.0 / K + 0.05), 0.9))
            lo, hi = (1.0 - dom) / (K - 1), min(dom, 1.0 - dom)
            t = lo + (hi - lo) * np.linspace(0.02, 0.98, 25)
            others = np.repeat(((1.0 - dom - t) / (K - 2))[:, None], K - 2, axis=1)
            rows = np.column_stack([t, np.full_like(t, dom), others])
        perm = rng.permutation(K)
        pb = ProbBatch(rows[:, perm], np.full(len(rows), int(np.flatnonzero(perm == 0)[0])))
        vals = np.asarray(cmp_fn(pb))
        steps = np.diff(vals)
        mono.trials += 1
        if np.any(steps <= 0) or np.any(vals >= 1) or np.any(vals < 0):
            mono.failures += 1
            mono.worst = max(mono.worst, float(-steps.min()))
    return PropertyReport([bounds, zeros, mono])
