"""Experiment orchestration: configs, runs, sweeps, and reports.

A run streams a dataset through a schedule exactly once, maintaining the
stage-one classifier statistics and (optionally) a replay buffer, then
solves the stage-one predictor, adapts it on the buffer alone, and
evaluates both predictors on a held-out test split. Reports are pure
functions of their configuration, modulo wall-clock fields.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._seeding import seeded_rng
from .adapt import AdaptConfig, AdaptedPredictor, adapt, init_head
from .embeddings import EmbeddingTable, SyntheticSpec, load_embeddings, normalize, synthesize
from .errors import ConfigError, NoClassError, StreamReuseError
from .learners import NccState, RidgeState
from .replay import ReplayBuffer, STRATEGIES
from .schedules import ScheduleSpec, build_schedule, iter_batches

VERSION = "0.1.0"

CLASSIFIERS = ("ncc", "ridge")

#: Environment variable capping sweep parallelism.
THREADS_ENV = "SCROLL_THREADS"

_DEFAULT_STUDY_SCENARIOS = ((20, 20), (20, 80), (90, 10), (50, 50))
_DEFAULT_STUDY_STRATEGIES = ("exemplar", "reservoir")


class ConsumeOnceStream:
    """Iterator wrapper enforcing the observe-once contract of the stream."""

    def __init__(self, batches):
        self._batches = iter(batches)
        self._opened = False

    def __iter__(self):
        if self._opened:
            raise StreamReuseError("the data stream may be consumed only once")
        self._opened = True
        return self._batches


@dataclass(frozen=True)
class DataConfig:
    """Where the train and test tables come from: synthetic or files."""

    synthetic: SyntheticSpec | None = None
    train_path: str | None = None
    test_path: str | None = None
    file_format: str = "binary"

    def __post_init__(self):
        file_side = self.train_path is not None or self.test_path is not None
        if self.synthetic is not None and file_side:
            raise ConfigError("give either a synthetic spec or file paths, not both")
        if self.synthetic is None:
            if self.train_path is None or self.test_path is None:
                raise ConfigError("file data needs both train_path and test_path")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        if not isinstance(d, dict):
            raise ConfigError("data config must be an object")
        known = {"synthetic", "train_path", "test_path", "format"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data fields: {sorted(unknown)}")
        synthetic = SyntheticSpec.from_dict(d["synthetic"]) if "synthetic" in d else None
        return cls(
            synthetic=synthetic,
            train_path=d.get("train_path"),
            test_path=d.get("test_path"),
            file_format=d.get("format", "binary"),
        )

    def to_dict(self) -> dict:
        if self.synthetic is not None:
            return {"synthetic": self.synthetic.to_dict()}
        return {
            "train_path": self.train_path,
            "test_path": self.test_path,
            "format": self.file_format,
        }

    def resolve(self) -> tuple[EmbeddingTable, EmbeddingTable]:
        """Produce normalized train and test tables."""
        if self.synthetic is not None:
            return synthesize(self.synthetic)
        train, _ = load_embeddings(self.train_path, self.file_format)
        test, _ = load_embeddings(self.test_path, self.file_format)
        return normalize(train), normalize(test)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; serializes to/from the CLI's JSON config."""

    data: DataConfig
    schedule: ScheduleSpec
    classifier: str = "ridge"
    ridge_lambda: float = 1.0
    buffer_capacity: int = 0
    buffer_strategy: str = "exemplar"
    buffer_seed: int = 0
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    intermediate_evals: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(
                f"unknown classifier {self.classifier!r}, expected one of {CLASSIFIERS}"
            )
        if not self.ridge_lambda > 0:
            raise ConfigError(f"ridge lambda must be positive, got {self.ridge_lambda}")
        if self.buffer_capacity < 0:
            raise ConfigError("buffer capacity must be >= 0")
        if self.buffer_strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown buffer strategy {self.buffer_strategy!r}, "
                f"expected one of {STRATEGIES}"
            )
        if self.intermediate_evals is not None:
            positions = tuple(int(t) for t in self.intermediate_evals)
            if any(t < 1 for t in positions):
                raise ConfigError("intermediate eval positions must be >= 1")
            object.__setattr__(self, "intermediate_evals", positions)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be an object")
        known = {"data", "schedule", "classifier", "buffer", "adapt",
                 "intermediate_evals", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for required in ("data", "schedule"):
            if required not in d:
                raise ConfigError(f"config is missing {required!r}")
        data = DataConfig.from_dict(d["data"])
        schedule = ScheduleSpec.from_dict(d["schedule"])
        classifier_cfg = d.get("classifier", {"kind": "ridge"})
        if not isinstance(classifier_cfg, dict) or "kind" not in classifier_cfg:
            raise ConfigError("classifier config must be an object with 'kind'")
        bad = set(classifier_cfg) - {"kind", "lambda"}
        if bad:
            raise ConfigError(f"unknown classifier fields: {sorted(bad)}")
        buffer_cfg = d.get("buffer", {})
        if not isinstance(buffer_cfg, dict):
            raise ConfigError("buffer config must be an object")
        bad = set(buffer_cfg) - {"capacity", "strategy", "seed"}
        if bad:
            raise ConfigError(f"unknown buffer fields: {sorted(bad)}")
        capacity = buffer_cfg.get("capacity", 0)
        if "adapt" in d:
            adapt_cfg = AdaptConfig.from_dict(d["adapt"])
        else:
            adapt_cfg = AdaptConfig(mode="adapter" if capacity > 0 else "none")
        evals = d.get("intermediate_evals")
        return cls(
            data=data,
            schedule=schedule,
            classifier=classifier_cfg["kind"],
            ridge_lambda=classifier_cfg.get("lambda", 1.0),
            buffer_capacity=capacity,
            buffer_strategy=buffer_cfg.get("strategy", "exemplar"),
            buffer_seed=buffer_cfg.get("seed", 0),
            adapt=adapt_cfg,
            intermediate_evals=tuple(evals) if evals is not None else None,
            seed=d.get("seed", 0),
        )

    def to_dict(self) -> dict:
        out = {
            "data": self.data.to_dict(),
            "schedule": self.schedule.to_dict(),
            "classifier": {"kind": self.classifier, "lambda": self.ridge_lambda},
            "buffer": {
                "capacity": self.buffer_capacity,
                "strategy": self.buffer_strategy,
                "seed": self.buffer_seed,
            },
            "adapt": self.adapt.to_dict(),
            "seed": self.seed,
        }
        if self.intermediate_evals is not None:
            out["intermediate_evals"] = list(self.intermediate_evals)
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _evaluate(predict_batch, table: EmbeddingTable) -> tuple[float, list[float]]:
    preds = predict_batch(table.vectors)
    accuracy = float(np.mean(preds == table.labels))
    per_class = [
        float(np.mean(preds[table.labels == y] == y)) for y in range(table.class_count)
    ]
    return accuracy, per_class


def _new_state(cfg: ExperimentConfig, table: EmbeddingTable):
    if cfg.classifier == "ncc":
        return NccState(table.class_count, table.dim)
    return RidgeState(table.class_count, table.dim, cfg.ridge_lambda)


def _stage_one_predictor(state):
    if isinstance(state, NccState):
        return state.predict_batch
    return state.solve().predict_batch


def _adapted(cfg: ExperimentConfig, state, buffer) -> AdaptedPredictor:
    """Stage two, always restarted from the stage-one statistics."""
    if cfg.adapt.init_kind == "random":
        head = init_head(
            "random",
            class_count=state.class_count,
            dim=state.dim,
            seed=cfg.adapt.seed,
        )
        kind = "random"
    else:
        head = init_head(cfg.classifier, state)
        kind = cfg.classifier
    return adapt(head, buffer, cfg.adapt, init_kind=kind)


@dataclass
class RunOutcome:
    """Everything a finished run produced, beyond the serializable report."""

    config: ExperimentConfig
    train: EmbeddingTable
    test: EmbeddingTable
    state: NccState | RidgeState
    buffer: ReplayBuffer | None
    predictor: AdaptedPredictor
    report: "RunReport"


@dataclass
class RunReport:
    """Serializable summary of one run."""

    config: dict
    config_hash: str
    accuracy: dict
    per_class_accuracy: dict
    buffer: dict | None
    intermediate: list
    warnings: list
    timing: dict
    version: str = VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config_hash": self.config_hash,
            "config": self.config,
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "buffer": self.buffer,
            "intermediate": self.intermediate,
            "warnings": self.warnings,
            "timing": self.timing,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def execute(cfg: ExperimentConfig) -> RunOutcome:
    """Run one experiment end to end and keep the live objects."""
    t_start = time.perf_counter()
    train, test = cfg.data.resolve()
    schedule = build_schedule(cfg.schedule, train.labels)
    n_batches = schedule.n_batches
    checkpoints = set()
    if cfg.intermediate_evals is not None:
        for t in cfg.intermediate_evals:
            if t > n_batches:
                raise ConfigError(
                    f"intermediate eval position {t} exceeds the {n_batches}-batch stream"
                )
            checkpoints.add(t)

    state = _new_state(cfg, train)
    buffer = (
        ReplayBuffer(cfg.buffer_capacity, cfg.buffer_strategy, cfg.buffer_seed)
        if cfg.buffer_capacity > 0
        else None
    )
    snapshots: dict[int, tuple] = {}
    stream = ConsumeOnceStream(iter_batches(schedule, train))
    t_stream = time.perf_counter()
    for t, batch in enumerate(stream, start=1):
        if buffer is not None:
            buffer.update(batch.vectors, batch.labels, batch.indices)
        state.update_batch(batch.vectors, batch.labels)
        if t in checkpoints:
            snapshots[t] = (state.copy(), buffer.copy() if buffer else None)
    stream_s = time.perf_counter() - t_stream

    warnings: list[str] = []
    t_solve = time.perf_counter()
    stage_one = _stage_one_predictor(state)
    solve_s = time.perf_counter() - t_solve

    t_adapt = time.perf_counter()
    if buffer is not None and cfg.adapt.mode != "none" and buffer.total_stored() > 0:
        predictor = _adapted(cfg, state, buffer)
        warnings.extend(predictor.warnings)
    else:
        if cfg.adapt.mode != "none":
            warnings.append("no replay data available; adaptation skipped")
        head = init_head(cfg.classifier, state)
        predictor = AdaptedPredictor(head, provenance={"init": cfg.classifier})
    adapt_s = time.perf_counter() - t_adapt

    t_eval = time.perf_counter()
    acc_stage_one, per_class_stage_one = _evaluate(stage_one, test)
    acc_adapted, per_class_adapted = _evaluate(predictor.predict_batch, test)
    intermediate = []
    for t in sorted(snapshots):
        snap_state, snap_buffer = snapshots[t]
        snap_acc, _ = _evaluate(_stage_one_predictor(snap_state), test)
        entry = {"t": t, "stage_one_accuracy": snap_acc}
        if snap_buffer is not None and cfg.adapt.mode != "none" and snap_buffer.total_stored() > 0:
            snap_pred = _adapted(cfg, snap_state, snap_buffer)
            entry["adapted_accuracy"], _ = _evaluate(snap_pred.predict_batch, test)
        else:
            entry["adapted_accuracy"] = snap_acc
        intermediate.append(entry)
    eval_s = time.perf_counter() - t_eval

    buffer_section = None
    if buffer is not None:
        warnings.extend(buffer.warnings)
        buffer_section = {
            "per_class_counts": {str(y): c for y, c in buffer.per_class_counts().items()},
            "moment_distances": {
                str(y): d for y, d in buffer.moment_distances(train).items()
            },
            "total_stored": buffer.total_stored(),
            "digest": buffer.content_digest(),
        }

    report = RunReport(
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        accuracy={"stage_one": acc_stage_one, "adapted": acc_adapted},
        per_class_accuracy={
            "stage_one": per_class_stage_one,
            "adapted": per_class_adapted,
        },
        buffer=buffer_section,
        intermediate=intermediate,
        warnings=warnings,
        timing={
            "stream_s": stream_s,
            "solve_s": solve_s,
            "adapt_s": adapt_s,
            "eval_s": eval_s,
            "total_s": time.perf_counter() - t_start,
        },
    )
    return RunOutcome(cfg, train, test, state, buffer, predictor, report)


def run(cfg: ExperimentConfig) -> RunReport:
    """Run one experiment and return its report."""
    return execute(cfg).report


def intermediate_predictor(cfg: ExperimentConfig, t: int) -> AdaptedPredictor:
    """The predictor available after ``t`` stream batches.

    Statistics and buffer are taken at position ``t``; the head is solved
    from them and adaptation restarts from scratch, exactly as a full run
    ending at ``t`` would do.
    """
    if t == 0:
        raise NoClassError("no data observed at stream position 0")
    train, _ = cfg.data.resolve()
    schedule = build_schedule(cfg.schedule, train.labels)
    if t < 0 or t > schedule.n_batches:
        raise ConfigError(
            f"stream position {t} outside the {schedule.n_batches}-batch stream"
        )
    state = _new_state(cfg, train)
    buffer = (
        ReplayBuffer(cfg.buffer_capacity, cfg.buffer_strategy, cfg.buffer_seed)
        if cfg.buffer_capacity > 0
        else None
    )
    stream = ConsumeOnceStream(iter_batches(schedule, train))
    for step, batch in enumerate(stream, start=1):
        if buffer is not None:
            buffer.update(batch.vectors, batch.labels, batch.indices)
        state.update_batch(batch.vectors, batch.labels)
        if step == t:
            break
    if buffer is not None and cfg.adapt.mode != "none" and buffer.total_stored() > 0:
        return _adapted(cfg, state, buffer)
    head = init_head(cfg.classifier, state)
    return AdaptedPredictor(head, provenance={"init": cfg.classifier})


@dataclass
class RobustnessReport:
    """Accuracies and state agreement across schedules of one config."""

    schedules: list
    stage_one_accuracies: list
    adapted_accuracies: list
    stage_one_spread: float
    adapted_spread: float
    state_max_deviation: float

    def to_dict(self) -> dict:
        return {
            "schedules": self.schedules,
            "stage_one_accuracies": self.stage_one_accuracies,
            "adapted_accuracies": self.adapted_accuracies,
            "stage_one_spread": self.stage_one_spread,
            "adapted_spread": self.adapted_spread,
            "state_max_deviation": self.state_max_deviation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _sweep_schedule_specs(
    cfg: ExperimentConfig, n_schedules: int, kinds: tuple[str, ...], class_count: int
) -> list[ScheduleSpec]:
    split_sizes = [c for c in (1, 2, 5) if c <= class_count] or [1]
    specs = []
    split_uses = 0
    for i in range(n_schedules):
        kind = kinds[i % len(kinds)]
        seed = cfg.seed * 1_000_003 + 7919 * i + 13
        if kind == "split":
            c = split_sizes[split_uses % len(split_sizes)]
            split_uses += 1
            specs.append(ScheduleSpec("class_split", seed=seed, classes_per_batch=c))
        elif kind == "gaussian":
            specs.append(ScheduleSpec("gaussian", seed=seed, sigma=0.1))
        elif kind == "random":
            specs.append(ScheduleSpec("random_iid", seed=seed, batch_size=32))
        elif kind == "single":
            specs.append(ScheduleSpec("single_batch", seed=seed))
        else:
            raise ConfigError(
                f"unknown sweep schedule kind {kind!r}; "
                "expected split, gaussian, random or single"
            )
    return specs


def _max_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def _state_deviation(states) -> float:
    worst = 0.0
    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            a, b = states[i], states[j]
            if isinstance(a, NccState):
                worst = max(
                    worst,
                    float(np.abs(a.prototypes - b.prototypes).max()),
                    float(np.abs(a.counts - b.counts).max()),
                )
            else:
                worst = max(
                    worst,
                    float(np.abs(a.cov - b.cov).max()),
                    float(np.abs(a.class_sums - b.class_sums).max()),
                    float(abs(a.seen - b.seen)),
                )
    return worst


def robustness_sweep(
    cfg: ExperimentConfig,
    n_schedules: int,
    kinds: tuple[str, ...] = ("split", "gaussian", "random"),
) -> RobustnessReport:
    """Run one config under many seeded schedules and compare outcomes."""
    if n_schedules < 2:
        raise ConfigError("a robustness sweep needs at least 2 schedules")
    if not kinds:
        raise ConfigError("at least one schedule kind is required")
    train, _ = cfg.data.resolve()
    specs = _sweep_schedule_specs(cfg, n_schedules, tuple(kinds), train.class_count)
    variants = [dataclasses.replace(cfg, schedule=spec) for spec in specs]
    with ThreadPoolExecutor(max_workers=min(_max_threads(), n_schedules)) as pool:
        outcomes = list(pool.map(execute, variants))
    acc_one = [o.report.accuracy["stage_one"] for o in outcomes]
    acc_star = [o.report.accuracy["adapted"] for o in outcomes]
    return RobustnessReport(
        schedules=[spec.to_dict() for spec in specs],
        stage_one_accuracies=acc_one,
        adapted_accuracies=acc_star,
        stage_one_spread=float(max(acc_one) - min(acc_one)),
        adapted_spread=float(max(acc_star) - min(acc_star)),
        state_max_deviation=_state_deviation([o.state for o in outcomes]),
    )


def buffer_study(
    cfg: ExperimentConfig,
    shuffles: int,
    scenarios=_DEFAULT_STUDY_SCENARIOS,
    strategies=_DEFAULT_STUDY_STRATEGIES,
) -> tuple[list[dict], list[dict]]:
    """Per-class buffering study over shuffled single-class streams.

    Each class of the training table is streamed on its own, ``shuffles``
    times in seeded random orders, through a fresh buffer of capacity
    ``b1`` fed ``b2`` samples at a time, for every scenario ``(b1, b2)``
    and strategy. Returns the raw rows (one per class/shuffle) and the
    per-scenario mean/variance summary of the stored-vs-population mean
    distance.
    """
    if shuffles < 2:
        raise ConfigError("the buffer study needs at least 2 shuffles")
    for b1, b2 in scenarios:
        if b1 < 1 or b2 < 1:
            raise ConfigError(f"invalid scenario ({b1}, {b2}): sizes must be >= 1")
    for strategy in strategies:
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown buffer strategy {strategy!r}")
    train, _ = cfg.data.resolve()
    rows: list[dict] = []
    for shuffle in range(shuffles):
        for y in range(train.class_count):
            class_idx = np.flatnonzero(train.labels == y)
            order = seeded_rng(cfg.seed, 500, shuffle, y).permutation(len(class_idx))
            shuffled = class_idx[order]
            for s_i, (b1, b2) in enumerate(scenarios):
                for strat_i, strategy in enumerate(strategies):
                    sub_seed = (
                        cfg.seed + 9_000_000
                        + shuffle * 1_000_000 + y * 1000 + s_i * 10 + strat_i
                    )
                    buf = ReplayBuffer(b1, strategy, seed=sub_seed)
                    for lo in range(0, len(shuffled), b2):
                        idx = shuffled[lo:lo + b2]
                        buf.update(
                            train.vectors[idx],
                            train.labels[idx],
                            idx,
                        )
                    distance = buf.moment_distances(train)[y]
                    rows.append(
                        {
                            "b1": b1,
                            "b2": b2,
                            "strategy": strategy,
                            "class": y,
                            "seed": shuffle,
                            "distance": distance,
                        }
                    )
    summary: list[dict] = []
    for b1, b2 in scenarios:
        for strategy in strategies:
            values = np.array(
                [
                    r["distance"]
                    for r in rows
                    if r["b1"] == b1 and r["b2"] == b2 and r["strategy"] == strategy
                ]
            )
            summary.append(
                {
                    "b1": b1,
                    "b2": b2,
                    "strategy": strategy,
                    "mean_distance": float(values.mean()),
                    "var_distance": float(values.var()),
                }
            )
    return rows, summary


def write_study_summary(summary, path) -> None:
    """Emit the buffer-study summary as a CSV table."""
    with open(path, "w", newline="") as fh:
        fh.write("buffer_size,batch_size,strategy,mean_distance,var_distance\n")
        for row in summary:
            fh.write(
                f"{row['b1']},{row['b2']},{row['strategy']},"
                f"{row['mean_distance']!r},{row['var_distance']!r}\n"
            )
