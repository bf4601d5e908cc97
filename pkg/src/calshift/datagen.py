"""Synthetic covariate-shift scenarios and few-shot sampling.

A scenario is an equal-weight isotropic Gaussian mixture (the source domain).
The target domain translates every component by ``shift_vector`` and scales
its covariance by ``shift_scale``. Labels in both domains come from one fixed
rule, the Bayes classifier of the source mixture (nearest source mean), so
P(y|x) is identical across domains by construction while P(x) moves.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import Batch

DOMAINS = ("source", "target")
SPLITS = ("source-train", "source-test", "target-test")
ALLOWED_SHOTS = (0, 1, 2, 4, 8, 16)


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class ShiftScenario:
    num_classes: int
    feature_dim: int
    component_means: tuple  # K rows of feature_dim floats
    component_cov_scale: float
    shift_vector: tuple
    shift_scale: float

    def __post_init__(self):
        means = np.asarray(self.component_means, dtype=np.float64)
        if means.shape != (self.num_classes, self.feature_dim):
            raise ValueError(f"component_means must be {self.num_classes} x {self.feature_dim}")
        if len(self.shift_vector) != self.feature_dim:
            raise ValueError("shift_vector length must equal feature_dim")
        if not self.component_cov_scale > 0:
            raise ValueError("component_cov_scale must be positive")
        if not self.shift_scale > 0:
            raise ValueError("shift_scale must be positive")
        object.__setattr__(self, "component_means", tuple(tuple(float(v) for v in r) for r in means))
        object.__setattr__(self, "shift_vector", tuple(float(v) for v in self.shift_vector))

    @property
    def means(self) -> np.ndarray:
        return np.array(self.component_means)

    @property
    def sigma(self) -> float:
        return self.component_cov_scale

    def labeling_rule(self, X) -> np.ndarray:
        """Hard Bayes labels of the source mixture: index of the nearest mean."""
        X = np.array(X, dtype=np.float64, ndmin=2)
        M = self.means
        # ||x - m||^2 up to the x-only term; ties go to the lowest index
        d = -2.0 * X @ M.T + np.sum(M * M, axis=1)
        return np.argmin(d, axis=1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["component_means"] = [list(r) for r in self.component_means]
        d["shift_vector"] = list(self.shift_vector)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftScenario":
        return cls(**d)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def make_scenario(
    num_classes: int = 4,
    feature_dim: int = 16,
    separation: float = 3.0,
    sigma: float = 1.0,
    shift_magnitude: float = 1.0,
    shift_scale: float = 1.0,
    seed: int = 0,
) -> ShiftScenario:
    """Random scenario whose closest pair of class means sits ``separation`` apart.

    The shift vector has length ``shift_magnitude * separation`` in a random
    direction, so ``shift_magnitude`` is measured in class-separation units.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    means = rng.standard_normal((num_classes, feature_dim))
    if num_classes > 1:
        gaps = [
            np.linalg.norm(means[i] - means[j])
            for i in range(num_classes)
            for j in range(i + 1, num_classes)
        ]
        means *= separation / min(gaps)
    direction = rng.standard_normal(feature_dim)
    direction /= np.linalg.norm(direction)
    return ShiftScenario(
        num_classes=num_classes,
        feature_dim=feature_dim,
        component_means=means,
        component_cov_scale=sigma,
        shift_vector=shift_magnitude * separation * direction,
        shift_scale=shift_scale,
    )


def sample_domain(scenario: ShiftScenario, domain: str, n: int, rng: np.random.Generator) -> Batch:
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}")
    if n < 1:
        raise ValueError("n must be at least 1")
    comp = rng.integers(scenario.num_classes, size=n)
    noise = rng.standard_normal((n, scenario.feature_dim))
    X = scenario.means[comp]
    if domain == "source":
        X = X + scenario.sigma * noise
    else:
        X = X + np.asarray(scenario.shift_vector) + scenario.sigma * np.sqrt(scenario.shift_scale) * noise
    return Batch(X, scenario.labeling_rule(X))


def few_shot_split(batch: Batch, shots: int, rng: np.random.Generator, num_classes: int | None = None) -> Batch:
    """Exactly ``shots`` examples per class, drawn without replacement."""
    if shots not in ALLOWED_SHOTS:
        raise ValueError(f"shots must be one of {ALLOWED_SHOTS}")
    d = batch.features.shape[1]
    if shots == 0:
        return Batch(np.empty((0, d)), np.empty(0, dtype=np.int64), zero_shot=True)
    K = num_classes if num_classes is not None else int(batch.labels.max()) + 1
    picks = []
    for k in range(K):
        members = np.flatnonzero(batch.labels == k)
        if members.size < shots:
            raise DataError(f"class {k} has {members.size} samples, {shots} shots requested")
        picks.append(rng.choice(members, size=shots, replace=False))
    idx = np.concatenate(picks)
    return Batch(batch.features[idx], batch.labels[idx])


@dataclass
class DatasetManifest:
    scenario: dict
    seed: int
    split: str
    n: int
    path: str
    sha256: str = ""

    @property
    def scenario_hash(self) -> str:
        return ShiftScenario.from_dict(self.scenario).hash()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario_hash"] = self.scenario_hash
        return d

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        d.pop("scenario_hash", None)
        return cls(**d)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(batch: Batch, manifest: DatasetManifest) -> DatasetManifest:
    """Write ``batch`` to ``manifest.path`` and fill in the row count and checksum."""
    d = batch.features.shape[1]
    path = Path(manifest.path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["label"])
        for row, label in zip(batch.features.tolist(), batch.labels.tolist()):
            w.writerow([repr(v) for v in row] + [label])
    manifest.n = len(batch)
    manifest.sha256 = file_sha256(path)
    return manifest


def load_dataset(manifest: DatasetManifest) -> Batch:
    path = Path(manifest.path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    d = manifest.scenario["feature_dim"]
    if header != [f"f{i}" for i in range(d)] + ["label"]:
        raise SchemaError(f"{path}: unexpected header")
    if len(body) != manifest.n:
        raise SchemaError(f"{path}: {len(body)} rows, manifest says {manifest.n}")
    X = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), d)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Batch(X, y)
