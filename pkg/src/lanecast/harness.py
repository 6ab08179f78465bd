"""Training, evaluation and the experiment grid."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import OptimizerState, backward, sgd_step, softmax_cross_entropy
from .dataset import (
    DEFAULT_GUARD,
    Clip,
    ManeuverClass,
    SampleBuilder,
    SampleWindow,
    WindowSpec,
    balanced_batches,
    class_counts,
    enumerate_samples,
    split_train_val,
)
from .errors import ConfigurationError, ContractError, DivergenceError, NumericError
from .models import Model, ModelConfig, build_model, batch_logits, load_state, predict, predict_proba, save_model, state_arrays
from .roi import RoiSpec
from .synth import SyntheticConfig, clip_seed, synthetic_clips

log = logging.getLogger(__name__)

NUM_CLASSES = len(ManeuverClass)


# ---------------------------------------------------------------- configs


def _from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class Budget:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_step: int = 10  # epochs between 10x learning-rate drops
    patience: int = 5  # early stop after this many epochs without a better val accuracy
    time_limit: Optional[float] = None  # seconds of training, checked between epochs
    batches_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 3 or self.learning_rate <= 0:
            raise ConfigurationError("budget needs epochs >= 0, batch_size >= 3, learning_rate > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "Budget":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class DatasetConfig:
    """Where windows come from and how they are cut.

    ``source`` is ``"synthetic"`` or a directory whose subdirectories are clip
    directories (PNG frames plus annotation CSVs).
    """

    source: str = "synthetic"
    clips_per_class: int = 100
    clip_length: int = 60
    horizon: int = 20
    tte: int = 0
    roi_scale: int = 2
    input_size: int = 112
    stride: int = 10
    guard: int = DEFAULT_GUARD
    flow_pairs: int = 10
    appearance_frames: int = 5
    train_fraction: float = 0.85
    max_nlc_per_track: Optional[int] = 1
    nlc_from_event_tracks: bool = False
    flow_options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        return _from_dict(cls, data)

    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.horizon, self.tte)

    def roi_spec(self) -> RoiSpec:
        return RoiSpec(self.roi_scale, self.input_size)


def dataset_clips(cfg: DatasetConfig, seed: int):
    if cfg.source == "synthetic":
        return synthetic_clips(SyntheticConfig(cfg.clips_per_class, cfg.clip_length, seed))
    from .imageio import load_clip

    root = Path(cfg.source)
    if not root.is_dir():
        raise ConfigurationError(f"dataset source {root} is not a directory")
    return (load_clip(d) for d in sorted(root.iterdir()) if (d / "contours.csv").exists())


def build_samples(cfg: DatasetConfig, seed: int = 0, clips: Optional[Sequence[Clip]] = None) -> list[SampleWindow]:
    builder = SampleBuilder(cfg.roi_spec(), cfg.appearance_frames, cfg.flow_pairs, dict(cfg.flow_options))
    return list(
        enumerate_samples(
            clips if clips is not None else dataset_clips(cfg, seed),
            cfg.window_spec(),
            cfg.roi_spec(),
            cfg.stride,
            builder,
            guard=cfg.guard,
            max_nlc_per_track=cfg.max_nlc_per_track,
            nlc_from_event_tracks=cfg.nlc_from_event_tracks,
        )
    )


def stack(samples: Sequence[SampleWindow]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.appearance for s in samples]),
        np.stack([s.flow for s in samples]),
        np.array([int(s.label) for s in samples]),
    )


# ---------------------------------------------------------------- evaluation


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows: true class, columns: predicted class
    seconds: float = 0.0
    seed: Optional[int] = None

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return int(np.trace(self.confusion)) / self.total

    @property
    def class_counts(self) -> list[int]:
        return [int(v) for v in self.confusion.sum(axis=1)]

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.astype(int).tolist(),
            "accuracy": self.accuracy,
            "class_counts": self.class_counts,
            "seconds": self.seconds,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(np.array(data["confusion"], dtype=np.int64), data.get("seconds", 0.0), data.get("seed"))


def confusion_matrix(true: Sequence[int], pred: Sequence[int]) -> np.ndarray:
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def evaluate(model: Model, samples: Sequence[SampleWindow], batch_size: int = 32, seed: Optional[int] = None) -> MetricsReport:
    if not samples:
        raise ContractError("cannot evaluate on an empty validation set")
    t0 = time.perf_counter()
    preds, labels = [], []
    for i in range(0, len(samples), batch_size):
        app, flow, y = stack(samples[i : i + batch_size])
        preds.extend(predict(predict_proba(model, app, flow)).tolist())
        labels.extend(y.tolist())
    return MetricsReport(confusion_matrix(labels, preds), time.perf_counter() - t0, seed)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_accuracy: Optional[float]


def _loss(model: Model, app, flow, y, training=True):
    loss = None
    for logits in batch_logits(model, app, flow, training=training):
        part, _ = softmax_cross_entropy(logits, y)
        loss = part if loss is None else loss + part
    return loss


def train_step(model: Model, opt: OptimizerState, batch: Sequence[SampleWindow]) -> float:
    """One SGD step; each head's cross-entropy is summed, so disjoint streams train independently."""
    app, flow, y = stack(batch)
    try:
        loss = _loss(model, app, flow, y)
    except NumericError as exc:
        raise DivergenceError(f"non-finite activations during the forward pass: {exc}") from exc
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    backward(loss)
    grads = [p.grad for p in model.parameters()]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError(f"non-finite gradient at loss {value:.4f}")
    sgd_step(model.parameters(), opt)
    return value


def train(
    model_config: ModelConfig,
    train_samples: Sequence[SampleWindow],
    val_samples: Sequence[SampleWindow],
    budget: Budget = Budget(),
    seed: int = 0,
    checkpoint: Optional[Path] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """SGD with momentum and step decay; keeps the best-validation weights.

    Epoch 0 in the history is the untrained model.
    """
    counts = class_counts(int(s.label) for s in train_samples)
    for cls, n in zip(ManeuverClass, counts):
        if n == 0:
            raise ConfigurationError(f"training set has no {cls.name} samples")
    model = build_model(model_config, seed=clip_seed(seed, "init"))
    opt = OptimizerState.for_params(model.parameters(), budget.learning_rate, budget.momentum, budget.weight_decay)
    history: list[dict] = []

    def record(entry):
        history.append(entry)
        log.info("epoch %(epoch)d loss %(loss)s val %(val_accuracy)s", entry)
        if on_epoch:
            on_epoch(entry)

    val_acc = evaluate(model, val_samples).accuracy if val_samples else None
    record({"epoch": 0, "loss": None, "val_accuracy": val_acc, "learning_rate": None, "seconds": 0.0})
    best_acc, best_epoch, best_state = val_acc, 0, copy.deepcopy(state_arrays(model))
    started = time.perf_counter()
    stale = 0
    for epoch in range(1, budget.epochs + 1):
        opt.learning_rate = budget.learning_rate * 0.1 ** ((epoch - 1) // budget.lr_step)
        losses = [
            train_step(model, opt, batch)
            for batch in balanced_batches(
                train_samples, budget.batch_size, clip_seed(seed, "batches", epoch), budget.batches_per_epoch
            )
        ]
        val_acc = evaluate(model, val_samples).accuracy if val_samples else None
        record(
            {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "val_accuracy": val_acc,
                "learning_rate": opt.learning_rate,
                "seconds": time.perf_counter() - started,
            }
        )
        if val_acc is not None and (best_acc is None or val_acc > best_acc):
            best_acc, best_epoch, best_state = val_acc, epoch, copy.deepcopy(state_arrays(model))
            stale = 0
            if best_acc == 1.0:
                log.info("validation accuracy is perfect; stopping")
                break
        elif val_acc is None:
            best_epoch, best_state = epoch, copy.deepcopy(state_arrays(model))
        else:
            stale += 1
            if stale >= budget.patience:
                log.info("early stop after %d stale epochs", stale)
                break
        if budget.time_limit is not None and time.perf_counter() - started > budget.time_limit:
            log.info("time limit reached after epoch %d", epoch)
            break
    load_state(model, best_state)
    if checkpoint is not None:
        save_model(checkpoint, model, {"best_epoch": best_epoch, "best_accuracy": best_acc, "seed": seed})
    return TrainResult(model, history, best_epoch, best_acc)


# ---------------------------------------------------------------- grid


METHOD_LABELS = {"disjoint": "Disjoint", "st-multiplier": "ST"}


@dataclass(frozen=True)
class GridCell:
    method: str
    horizon: int
    tte: int
    roi_scale: int
    seed: int

    @property
    def key(self) -> str:
        return f"{self.method}_N{self.horizon}_T{self.tte}_x{self.roi_scale}_s{self.seed}"

    def cell_seed(self) -> int:
        return clip_seed(self.seed, self.method, self.horizon, self.tte, self.roi_scale)


@dataclass(frozen=True)
class ExperimentGrid:
    methods: tuple = ("disjoint", "st-multiplier")
    horizons: tuple = (20, 30, 40)
    ttes: tuple = (0, 10, 20)
    roi_scales: tuple = (1, 2, 3, 4)
    seeds: tuple = (0,)
    prediction_horizon: int = 20
    budget: Budget = Budget()
    dataset: DatasetConfig = DatasetConfig()
    models: dict = field(default_factory=dict)  # method -> ModelConfig overrides

    def __post_init__(self):
        for name in ("methods", "horizons", "ttes", "roi_scales", "seeds"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigurationError(f"grid axis {name!r} is empty")
            object.__setattr__(self, name, value)
        bad = [m for m in self.methods if m not in METHOD_LABELS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}")
        for cell in self.cells():
            self.model_config(cell.method)
            replace(self.dataset, horizon=cell.horizon, tte=cell.tte, roi_scale=cell.roi_scale).window_spec()
            RoiSpec(cell.roi_scale)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentGrid":
        data = dict(data)
        if "budget" in data:
            data["budget"] = Budget.from_dict(data["budget"])
        if "dataset" in data:
            data["dataset"] = DatasetConfig.from_dict(data["dataset"])
        return _from_dict(cls, data)

    def model_config(self, method: str) -> ModelConfig:
        overrides = dict(self.models.get(method, {}))
        overrides.setdefault("input_size", self.dataset.input_size)
        overrides.setdefault("flow_pairs", self.dataset.flow_pairs)
        if method == "st-multiplier":
            overrides.setdefault("appearance_frames", self.dataset.appearance_frames)
        return ModelConfig(kind=method, **overrides)

    def classification_cells(self) -> list[GridCell]:
        if 0 not in self.ttes:
            return []
        return [GridCell(m, h, 0, r, s) for m, h, r, s in product(self.methods, self.horizons, self.roi_scales, self.seeds)]

    def prediction_cells(self) -> list[GridCell]:
        ttes = [t for t in self.ttes if t > 0]
        return [
            GridCell(m, self.prediction_horizon, t, r, s)
            for m, t, r, s in product(self.methods, ttes, self.roi_scales, self.seeds)
        ]

    def cells(self) -> list[GridCell]:
        return self.classification_cells() + self.prediction_cells()


@dataclass
class CellResult:
    cell: GridCell
    status: str  # "ok" or "failed"
    report: Optional[MetricsReport] = None
    error: Optional[str] = None
    history: list = field(default_factory=list)

    @property
    def accuracy(self) -> Optional[float]:
        return self.report.accuracy if self.report is not None else None

    def to_dict(self) -> dict:
        return {
            "cell": asdict(self.cell),
            "status": self.status,
            "report": self.report.to_dict() if self.report else None,
            "error": self.error,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CellResult":
        report = MetricsReport.from_dict(data["report"]) if data.get("report") else None
        return cls(GridCell(**data["cell"]), data["status"], report, data.get("error"), data.get("history", []))


def run_cell(grid: ExperimentGrid, cell: GridCell, samples: Sequence[SampleWindow], out_dir: Optional[Path] = None) -> CellResult:
    """Split, train and evaluate one cell."""
    train_set, val_set = split_train_val(samples, grid.dataset.train_fraction, seed=clip_seed(cell.seed, "split"))
    if not val_set:
        raise ConfigurationError("validation split is empty")
    checkpoint = out_dir / "checkpoints" / f"{cell.key}.lcck" if out_dir else None
    result = train(grid.model_config(cell.method), train_set, val_set, grid.budget, cell.cell_seed(), checkpoint)
    report = evaluate(result.model, val_set, seed=cell.cell_seed())
    return CellResult(cell, "ok", report, history=result.history)


SampleProvider = Callable[[DatasetConfig, int], Sequence[SampleWindow]]
CellRunner = Callable[[ExperimentGrid, GridCell, Sequence[SampleWindow], Optional[Path]], CellResult]


def run_grid(
    grid: ExperimentGrid,
    out_dir,
    samples_for: SampleProvider = build_samples,
    runner: CellRunner = run_cell,
) -> list[CellResult]:
    """Run every cell, skipping ones already completed under ``out_dir/cells``.

    A failing cell is recorded as failed and the remaining cells continue.
    """
    out_dir = Path(out_dir)
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    results = []
    cache_key, cache = None, None
    # cells sharing a dataset run back to back so the samples are built once
    order = sorted(grid.cells(), key=lambda c: (c.seed, c.horizon, c.tte, c.roi_scale))
    for cell in order:
        path = cell_dir / f"{cell.key}.json"
        if path.exists():
            previous = CellResult.from_dict(json.loads(path.read_text()))
            if previous.status == "ok":
                results.append(previous)
                continue
        dcfg = replace(grid.dataset, horizon=cell.horizon, tte=cell.tte, roi_scale=cell.roi_scale)
        data_seed = clip_seed(cell.seed, "data")
        try:
            if cache_key != (dcfg, data_seed):
                cache_key, cache = None, None
                cache = samples_for(dcfg, data_seed)
                cache_key = (dcfg, data_seed)
            result = runner(grid, cell, cache, out_dir)
        except Exception as exc:  # noqa: BLE001 - a cell failure must not stop the grid
            log.exception("cell %s failed", cell.key)
            result = CellResult(cell, "failed", error=f"{type(exc).__name__}: {exc}")
        path.write_text(json.dumps(result.to_dict(), indent=1))
        results.append(result)
    rank = {c.key: i for i, c in enumerate(grid.cells())}
    results.sort(key=lambda r: rank[r.cell.key])
    write_tables(grid, results, out_dir)
    return results


def write_tables(grid: ExperimentGrid, results: Sequence[CellResult], out_dir) -> dict[str, Path]:
    from .report import emit_report

    return emit_report(grid, results, out_dir, "csv")
