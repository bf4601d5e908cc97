"""Command-line entry point: generate | run | sweep | check.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 training failure,
5 property-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .calibration import DEFAULT_BINS
from .datagen import (
    ALLOWED_SHOTS,
    SPLITS,
    DataError,
    DatasetManifest,
    ShiftScenario,
    file_sha256,
    load_dataset,
    make_scenario,
    save_dataset,
)
from .model import GROUPS
from .numerics import derive_seed
from .trainer import (
    ExperimentSetup,
    ReplicateData,
    RunResult,
    TrainConfig,
    TrainingFailure,
    aggregate,
    lambda_sweep,
    replicate_init,
    replicate_splits,
    run_cell,
)

log = logging.getLogger("calshift")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4
EXIT_PROPERTY = 5


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ScenarioSection:
    num_classes: int = 4
    feature_dim: int = 16
    separation: float = 3.0
    sigma: float = 1.0
    shift_magnitude: float = 1.0
    shift_scale: float = 1.5
    seed: int = 0


@dataclass
class DataSection:
    n_pool: int = 400
    n_test: int = 2000


@dataclass
class ModelSection:
    embed_dim: int = 8
    pretrain_noise: float = 1.0
    init_log_tau: float = 0.0


@dataclass
class TrainSection:
    lambda1: float = 0.4
    lambda2: float = 0.4
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 0
    optimizer: str = "plain"
    damping: float = 1e-3
    train_groups: list = field(default_factory=lambda: list(GROUPS))
    penalty_groups: list | None = None
    cmp_variant: str = "main"


@dataclass
class ExperimentSection:
    base_seed: int = 0
    repeats: int = 10
    shots: list = field(default_factory=lambda: [4, 8, 16])
    grid1: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    grid2: list = field(default_factory=lambda: [0.0])
    sweep_shots: int = 16
    sweep_split: str = "target-test"
    bins: int = DEFAULT_BINS


SECTIONS = {
    "scenario": ScenarioSection,
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "experiment": ExperimentSection,
}


@dataclass
class ExperimentConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    out: str = "calshift-out"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls()
        for key, value in raw.items():
            if key == "out":
                cfg.out = str(value)
                continue
            if key not in SECTIONS:
                raise ConfigError(f"unknown config key: {key}")
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key} must be an object")
            section_cls = SECTIONS[key]
            known = {f.name for f in fields(section_cls)}
            for sub in value:
                if sub not in known:
                    raise ConfigError(f"unknown config key: {key}.{sub}")
            try:
                setattr(cfg, key, section_cls(**{**asdict(section_cls()), **value}))
            except TypeError as exc:
                raise ConfigError(f"bad value in section {key}: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        ex = self.experiment
        bad_shots = [s for s in ex.shots if s not in ALLOWED_SHOTS]
        if bad_shots or ex.sweep_shots not in ALLOWED_SHOTS:
            raise ConfigError(f"experiment.shots must be drawn from {ALLOWED_SHOTS}")
        if ex.repeats < 1:
            raise ConfigError("experiment.repeats must be at least 1")
        if not ex.grid1 or not ex.grid2:
            raise ConfigError("experiment.grid1 and experiment.grid2 must be non-empty")
        if ex.sweep_split not in SPLITS:
            raise ConfigError(f"experiment.sweep_split must be one of {SPLITS}")
        if ex.bins < 1:
            raise ConfigError("experiment.bins must be at least 1")
        try:
            self.train_config()
            self.setup()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def scenario_obj(self) -> ShiftScenario:
        return make_scenario(**asdict(self.scenario))

    def setup(self) -> ExperimentSetup:
        return ExperimentSetup(self.scenario_obj(), **asdict(self.data), **asdict(self.model))

    def train_config(self) -> TrainConfig:
        t = asdict(self.train)
        t["train_groups"] = tuple(t["train_groups"])
        if t["penalty_groups"] is not None:
            t["penalty_groups"] = tuple(t["penalty_groups"])
        return TrainConfig(**t)

    def replicate_seeds(self) -> list[int]:
        return [derive_seed(self.experiment.base_seed, "repeat", r) for r in range(self.experiment.repeats)]


# ---------------------------------------------------------------------------
# Report formatting

METRIC_DECIMALS = {"accuracy": 1, "ece": 2}
HIGHER_IS_BETTER = {"accuracy": True, "ece": False}


def format_delta(baseline: float, value: float, metric: str) -> str:
    """Relative change in percent with a direction arrow, e.g. ``"6.8 ↑"``."""
    dec = METRIC_DECIMALS[metric]
    if baseline == 0:
        pct = 0.0 if value == 0 else float("inf")
    else:
        pct = (value - baseline) / abs(baseline) * 100.0
    text = f"{abs(pct):.{dec}f}"
    if float(text) == 0.0:
        return f"{text} →"
    return f"{text} {'↑' if pct > 0 else '↓'}"


def is_improvement(baseline: float, value: float, metric: str) -> bool:
    return value > baseline if HIGHER_IS_BETTER[metric] else value < baseline


METHODS = ("CoOp", "CoOp + FIM", "CoOp + CMP", "CalShift")


def method_lambdas(method: str, lambda1: float, lambda2: float) -> tuple[float, float]:
    return {
        "CoOp": (0.0, 0.0),
        "CoOp + FIM": (lambda1, 0.0),
        "CoOp + CMP": (0.0, lambda2),
        "CalShift": (lambda1, lambda2),
    }[method]


def summary_tables(results: list[RunResult], split: str = "target-test") -> str:
    """Markdown ACC and ECE tables (methods x shots) with delta rows vs baseline."""
    ok = [r for r in results if r.error is None]
    shots = sorted({r.cell["shots"] for r in ok})
    methods = [m for m in METHODS if any(r.cell["method"] == m for r in ok)]
    means: dict[tuple[str, int, str], float] = {}
    for m in methods:
        for s in shots:
            runs = [r for r in ok if r.cell["method"] == m and r.cell["shots"] == s]
            for metric in ("accuracy", "ece"):
                means[m, s, metric] = float(np.mean([100.0 * r.metric(split, metric) for r in runs]))
    lines = []
    for metric, label in (("accuracy", "ACC %"), ("ece", "ECE %")):
        dec = METRIC_DECIMALS[metric]
        lines.append(f"### {label} ({split})")
        lines.append("")
        lines.append("| Method | " + " | ".join(f"{s}-shot" for s in shots) + " |")
        lines.append("|---|" + "---|" * len(shots))
        for m in methods:
            lines.append(f"| {m} | " + " | ".join(f"{means[m, s, metric]:.{dec}f}" for s in shots) + " |")
        if "CoOp" in methods:
            for m in methods:
                if m == "CoOp":
                    continue
                cells = []
                for s in shots:
                    base, val = means["CoOp", s, metric], means[m, s, metric]
                    text = format_delta(base, val, metric)
                    cells.append(f"**{text}**" if is_improvement(base, val, metric) else text)
                lines.append(f"| Δ% {m} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def sweep_table(results: list[RunResult], split: str) -> str:
    agg = aggregate(results, split)
    l1s = sorted({k[0] for k in agg})
    l2s = sorted({k[1] for k in agg})
    valid = {k: v for k, v in agg.items() if np.isfinite(v["accuracy_mean"])}
    best_acc = max(valid, key=lambda k: valid[k]["accuracy_mean"]) if valid else None
    best_ece = min(valid, key=lambda k: valid[k]["ece_mean"]) if valid else None
    lines = [f"### λ sweep ({split}): ACC % / ECE %, mean over repeats", ""]
    lines.append("| λ1 \\ λ2 | " + " | ".join(f"{v:.1f}" for v in l2s) + " |")
    lines.append("|---|" + "---|" * len(l2s))
    for a in l1s:
        cells = []
        for b in l2s:
            row = agg[(a, b)]
            acc = f"{100 * row['accuracy_mean']:.1f}"
            ec = f"{100 * row['ece_mean']:.2f}"
            if (a, b) == best_acc:
                acc = f"**{acc}**"
            if (a, b) == best_ece:
                ec = f"**{ec}**"
            cells.append(f"{acc} / {ec}")
        lines.append(f"| {a:.1f} | " + " | ".join(cells) + " |")
    lines.append("")
    if best_acc is not None:
        lines.append(f"best ACC: λ1={best_acc[0]:.1f}, λ2={best_acc[1]:.1f}")
        lines.append(f"best ECE: λ1={best_ece[0]:.1f}, λ2={best_ece[1]:.1f}")
    return "\n".join(lines) + "\n"


RESULT_COLUMNS = ["lambda1", "lambda2", "seed", "split", "accuracy", "ece_percent", "final_loss"]


def result_rows(r: RunResult, splits) -> list[list]:
    final = r.epochs[-1].total if r.epochs else ""
    rows = []
    for split in splits:
        m = r.metrics.get(split)
        if m is None:
            continue
        rows.append([r.cell["lambda1"], r.cell["lambda2"], r.cell["seed"], split, repr(m["accuracy"]), repr(100 * m["ece"]), repr(final) if final != "" else ""])
    return rows


# ---------------------------------------------------------------------------
# Data on disk


def data_dir(cfg: ExperimentConfig, out: Path, seed: int) -> Path:
    return out / "data" / f"seed-{seed:020d}"


def generate_data(cfg: ExperimentConfig, out: Path) -> tuple[int, int]:
    """Write every replicate's splits; returns (written, up_to_date) counts."""
    setup = cfg.setup()
    sc_dict = setup.scenario.to_dict()
    written = fresh = 0
    for seed in cfg.replicate_seeds():
        d = data_dir(cfg, out, seed)
        d.mkdir(parents=True, exist_ok=True)
        expected_n = {"source-train": setup.n_pool, "source-test": setup.n_test, "target-test": setup.n_test}
        todo = []
        for split in SPLITS:
            mpath = d / f"{split}.json"
            if mpath.exists():
                try:
                    old = DatasetManifest.read(mpath)
                    if (
                        old.scenario == sc_dict
                        and old.seed == seed
                        and old.n == expected_n[split]
                        and Path(old.path).exists()
                        and file_sha256(old.path) == old.sha256
                    ):
                        fresh += 1
                        continue
                except (ValueError, KeyError, TypeError):
                    pass
            todo.append(split)
        if not todo:
            continue
        splits = replicate_splits(setup, seed)
        for split in todo:
            man = DatasetManifest(sc_dict, seed, split, 0, str(d / f"{split}.csv"))
            save_dataset(splits[split], man).write(d / f"{split}.json")
            written += 1
    return written, fresh


def load_replicate(cfg: ExperimentConfig, out: Path, seed: int) -> ReplicateData:
    setup = cfg.setup()
    d = data_dir(cfg, out, seed)
    batches = {}
    for split in SPLITS:
        mpath = d / f"{split}.json"
        if not mpath.exists():
            raise FileNotFoundError(f"{mpath} missing; run `calshift generate` first")
        man = DatasetManifest.read(mpath)
        if man.scenario_hash != setup.scenario.hash():
            raise FileNotFoundError(f"{mpath} was generated for a different scenario; rerun generate")
        batches[split] = load_dataset(man)
    return ReplicateData(batches["source-train"], batches["source-test"], batches["target-test"], replicate_init(setup, seed))


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(cfg: ExperimentConfig, out: Path) -> int:
    written, fresh = generate_data(cfg, out)
    if written == 0:
        print(f"up to date ({fresh} datasets)")
    else:
        print(f"wrote {written} datasets, {fresh} up to date")
    return 0


def run_methods(cfg: ExperimentConfig, out: Path) -> tuple[list[RunResult], bool]:
    base_cfg = cfg.train_config()
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    results, failed = [], False
    timings = {}
    for r_idx, seed in enumerate(cfg.replicate_seeds()):
        data = load_replicate(cfg, out, seed)
        for method in METHODS:
            l1, l2 = method_lambdas(method, base_cfg.lambda1, base_cfg.lambda2)
            tcfg = replace(base_cfg, lambda1=l1, lambda2=l2, seed=derive_seed(seed, "train"))
            for shots in cfg.experiment.shots:
                cell = {"method": method, "shots": shots, "repeat": r_idx, "seed": seed, "lambda1": l1, "lambda2": l2}
                try:
                    _, res = run_cell(data, tcfg, shots, derive_seed(seed, "shots", shots), cfg.experiment.bins)
                except TrainingFailure as exc:
                    failed = True
                    res = RunResult(config=tcfg.to_dict(), error=f"TrainingFailure: {exc}")
                res.cell = cell
                res.config = {**res.config, "experiment": cfg.to_dict()}
                name = f"{method.replace(' + ', '-').replace(' ', '')}_shots{shots:02d}_rep{r_idx:02d}"
                _dump(runs_dir / f"{name}.json", res.to_dict())
                timings[name] = res.wall_time
                results.append(res)
    _dump(out / "timings.json", timings)
    return results, failed


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    results, failed = run_methods(cfg, out)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "shots"] + RESULT_COLUMNS)
        for r in results:
            for row in result_rows(r, ("source-test", "target-test")):
                w.writerow([r.cell["method"], r.cell["shots"]] + row)
    text = summary_tables(results, "target-test") + "\n" + summary_tables(results, "source-test")
    (out / "summary.md").write_text(text)
    print(text, end="")
    if failed:
        log.error("one or more runs failed; partial results kept in %s", out)
        return EXIT_TRAINING
    return 0


def cmd_sweep(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    ex = cfg.experiment
    out.mkdir(parents=True, exist_ok=True)

    def data_fn(seed):
        return load_replicate(cfg, out, seed)

    # make sure data exists before fanning out
    for seed in cfg.replicate_seeds():
        load_replicate(cfg, out, seed)
    results = lambda_sweep(
        cfg.setup(),
        ex.grid1,
        ex.grid2,
        cfg.train_config(),
        repeats=ex.repeats,
        shots=ex.sweep_shots,
        base_seed=ex.base_seed,
        workers=1 if workers <= 1 else workers,
        num_bins=ex.bins,
        data_fn=data_fn if workers <= 1 else None,
    )
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            c = r.cell
            _dump(sweep_dir / f"l1_{c['lambda1']:.3f}_l2_{c['lambda2']:.3f}_rep{c['repeat']:02d}.json", r.to_dict())
            if r.error is None:
                w.writerows(result_rows(r, (ex.sweep_split,)))
            else:
                w.writerow([c["lambda1"], c["lambda2"], c["seed"], ex.sweep_split, "", "", ""])
    text = sweep_table(results, ex.sweep_split)
    (out / "sweep.md").write_text(text)
    print(text, end="")
    if any(r.error for r in results):
        log.error("%d sweep cells failed", sum(1 for r in results if r.error))
        return EXIT_TRAINING
    return 0


def run_checks(trials: int = 100_000, seed: int = 0) -> list[dict]:
    """All property checks as verdict dicts ``{check, trials, failures, worst_gap}``."""
    from . import propcheck
    from .losses import calshift_gradient, calshift_loss
    from .model import Batch, init_params
    from .numerics import fd_gradient, make_rng

    verdicts = []
    gauss = propcheck.fisher_kl_check("gaussian-mean", 0.0, propcheck.DEFAULT_LADDER)
    worst = max(r.relative_gap for r in gauss)
    verdicts.append({"check": "fisher-kl gaussian exact", "trials": len(gauss), "failures": int(worst > 1e-12), "worst_gap": worst})
    bern = propcheck.fisher_kl_check("bernoulli", 0.5, propcheck.DEFAULT_LADDER)
    verdicts.append({
        "check": "fisher-kl bernoulli ladder",
        "trials": len(bern),
        "failures": int(not propcheck.gap_shrinks(bern)),
        "worst_gap": max(r.relative_gap for r in bern),
    })
    rng = make_rng(seed)
    est = propcheck.bernoulli_fisher_estimate(0.3, 10**6, rng)
    exact = propcheck.closed_form_fisher("bernoulli", 0.3)
    gap = abs(est - exact) / exact
    verdicts.append({"check": "bernoulli fisher consistency", "trials": 1, "failures": int(gap > 0.025), "worst_gap": gap})
    report = propcheck.cmp_property_suite(rng, trials)
    for o in report.outcomes:
        verdicts.append({"check": o.check, "trials": o.trials, "failures": o.failures, "worst_gap": o.worst})
    failures, worst = 0, 0.0
    draws = 3
    for _ in range(draws):
        p = init_params(3, 4, 3, rng=rng)
        p = p.with_vector(p.to_vector() + 0.3 * rng.standard_normal(p.size))
        b = Batch(rng.standard_normal((6, 4)), rng.integers(0, 3, 6))
        l1, l2 = rng.uniform(0, 1, 2)
        g = calshift_gradient(p, b, l1, l2)
        fd = fd_gradient(lambda v: calshift_loss(p.with_vector(v), b, l1, l2).total, p.to_vector(), 1e-4)
        rel = float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)))
        worst = max(worst, rel)
        failures += int(rel > 1e-4)
    verdicts.append({"check": "gradient oracle spot check", "trials": draws, "failures": failures, "worst_gap": worst})
    return verdicts


def cmd_check(as_json: bool = False, trials: int = 100_000, seed: int = 0) -> int:
    verdicts = run_checks(trials, seed)
    failing = [v["check"] for v in verdicts if v["failures"]]
    if as_json:
        print(json.dumps({"passed": not failing, "checks": verdicts}, sort_keys=True, indent=1))
    else:
        for v in verdicts:
            status = "PASS" if not v["failures"] else "FAIL"
            print(f"{status}  {v['check']:<32} trials={v['trials']:<7} failures={v['failures']:<5} worst={v['worst_gap']:.3g}")
    if failing:
        print("failing checks: " + ", ".join(failing), file=sys.stderr)
        return EXIT_PROPERTY
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calshift", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="override experiment.base_seed")
        p.add_argument("--bins", type=int, help="override experiment.bins")
        p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("check")
    p.add_argument("--json", action="store_true")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "check":
        return cmd_check(args.json, args.trials, args.seed)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.experiment.base_seed = args.seed
        if args.bins is not None:
            cfg.experiment.bins = args.bins
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "run":
            return cmd_run(cfg, out)
        return cmd_sweep(cfg, out, args.workers)
    except (OSError, DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
