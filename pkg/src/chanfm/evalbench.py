"""NMSE metric, model-free baselines and evaluation protocols."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .chansim import ConfigError, CsiDataset
from .trainkit import LeakageError, TrainConfig, fit_task
from .wifomodel import ModelConfig, WiFoModel, param_count, task_region

CSV_COLUMNS = (
    "method", "dataset_id", "task", "horizon", "nmse_linear", "nmse_db",
    "n_samples", "seeds", "params_trainable", "params_total", "batch_ms",
)
BASELINES = ("copy_last", "copy_nearest_freq", "linear_extrap")
TIMING_BATCHES = 20
TIMING_BATCH_SIZE = 8


class ZeroPowerError(ValueError):
    pass


def nmse(pred: np.ndarray, truth: np.ndarray, region: np.ndarray | None = None) -> float:
    """sum |truth - pred|^2 / sum |truth|^2, optionally restricted to a boolean region."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    err = np.abs(truth.astype(np.complex128) - pred.astype(np.complex128)) ** 2
    pw = np.abs(truth.astype(np.complex128)) ** 2
    if region is not None:
        region = np.broadcast_to(region, truth.shape)
        err, pw = err[region], pw[region]
    denom = float(pw.sum())
    if denom == 0.0:
        raise ZeroPowerError("truth has zero power on the evaluated region")
    return float(err.sum()) / denom


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else float("-inf")


# -- baselines ---------------------------------------------------------------

def baseline_predict(values: np.ndarray, kind: str, horizon: int, method: str) -> np.ndarray:
    """Model-free fill of the task region of a [..., T, S, F] grid."""
    values = np.asarray(values)
    axis = {"time": -3, "frequency": -1}.get(kind)
    if axis is None:
        raise ValueError(f"task kind must be 'time' or 'frequency', got {kind!r}")
    size = values.shape[axis]
    if not 1 <= horizon < size:
        raise ValueError(f"{kind} horizon {horizon} outside [1, {size})")
    known = size - horizon
    out = values.copy()
    moved = np.moveaxis(out, axis, -1)  # view; writes land in ``out``
    if method == "copy_last":
        if kind != "time":
            raise ValueError("copy_last applies to the time task")
        moved[..., known:] = moved[..., known - 1: known]
    elif method == "copy_nearest_freq":
        if kind != "frequency":
            raise ValueError("copy_nearest_freq applies to the frequency task")
        moved[..., known:] = moved[..., known - 1: known]
    elif method == "linear_extrap":
        if known < 2:
            raise ValueError(f"linear_extrap needs >= 2 known slices, horizon {horizon} leaves {known}")
        last = moved[..., known - 1: known]
        slope = last - moved[..., known - 2: known - 1]
        steps = np.arange(1, horizon + 1)
        moved[..., known:] = last + slope * steps
    else:
        raise ValueError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    return out


def default_baselines(kind: str) -> tuple[str, ...]:
    return ("copy_last", "linear_extrap") if kind == "time" else ("copy_nearest_freq", "linear_extrap")


# -- reports -----------------------------------------------------------------

@dataclass
class EvalEntry:
    method: str
    dataset_id: str
    task: str
    horizon: int
    nmse_linear: float
    nmse_db: float
    n_samples: int
    seeds: tuple[int, ...] = ()
    params_trainable: int = 0
    params_total: int = 0
    batch_ms: float = 0.0

    def row(self) -> dict:
        d = asdict(self)
        d["seeds"] = ";".join(str(s) for s in self.seeds)
        return d

    @classmethod
    def from_row(cls, row: dict) -> "EvalEntry":
        seeds = row["seeds"]
        if isinstance(seeds, str):
            seeds = tuple(int(s) for s in seeds.split(";") if s)
        return cls(
            method=row["method"],
            dataset_id=row["dataset_id"],
            task=row["task"],
            horizon=int(row["horizon"]),
            nmse_linear=float(row["nmse_linear"]),
            nmse_db=float(row["nmse_db"]),
            n_samples=int(row["n_samples"]),
            seeds=tuple(seeds),
            params_trainable=int(row["params_trainable"]),
            params_total=int(row["params_total"]),
            batch_ms=float(row["batch_ms"]),
        )

    def accounting(self) -> str:
        return f"{self.method}: trainable {self.params_trainable} / total {self.params_total}"


@dataclass
class EvalReport:
    entries: list[EvalEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def extend(self, other: "EvalReport") -> None:
        self.entries.extend(other.entries)

    def get(self, method: str, task: str) -> EvalEntry:
        for e in self.entries:
            if e.method == method and e.task == task:
                return e
        raise KeyError((method, task))


def make_entry(method, dataset_id, task, horizon, value, n, seeds=(), counts=(0, 0), batch_ms=0.0) -> EvalEntry:
    return EvalEntry(method, dataset_id, task, int(horizon), float(value), to_db(value), int(n),
                     tuple(int(s) for s in seeds), int(counts[0]), int(counts[1]), float(batch_ms))


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_report(report: EvalReport, path, fmt: str = "csv") -> Path:
    """Write entries in stable column order as CSV or JSON."""
    if not len(report):
        raise ValueError("refusing to write an empty report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [e.row() for e in report.entries]
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    elif fmt == "json":
        payload = [{c: r[c] for c in CSV_COLUMNS} for r in rows]
        path.write_text(json.dumps({"entries": payload}, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> EvalReport:
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        rows = json.loads(text)["entries"]
    else:
        rows = list(csv.DictReader(text.splitlines()))
    return EvalReport([EvalEntry.from_row(r) for r in rows])


# -- protocols ---------------------------------------------------------------

def _task_horizon(dataset: CsiDataset, kind: str, horizon: int | None) -> int:
    T, _, F = dataset.config.shape
    size = T if kind == "time" else F
    return size // 2 if horizon is None else int(horizon)


def evaluate_predictor(predict_fn, dataset: CsiDataset, kind: str, horizon: int, indices=None,
                       batch_size: int = 32, with_scenes: bool = False) -> tuple[float, float]:
    """Pooled NMSE over the task region and median batch latency in ms.

    ``predict_fn(values, kind, horizon[, scenes])`` returns a filled batch.
    Latency is the median over up to 20 batches of 8 samples.
    """
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.intp)
    region = task_region(dataset.config.shape, kind, horizon)
    err = pw = 0.0
    for lo in range(0, idx.size, batch_size):
        sel = idx[lo: lo + batch_size]
        truth = dataset.csi[sel]
        args = (dataset.scenes[sel],) if with_scenes else ()
        pred = predict_fn(truth, kind, horizon, *args)
        diff = np.abs(truth.astype(np.complex128) - pred.astype(np.complex128)) ** 2
        err += float(diff[:, region].sum())
        pw += float((np.abs(truth.astype(np.complex128)) ** 2)[:, region].sum())
    if pw == 0.0:
        raise ZeroPowerError("truth has zero power on the evaluated region")
    times = []
    for lo in range(0, min(idx.size, TIMING_BATCHES * TIMING_BATCH_SIZE), TIMING_BATCH_SIZE):
        sel = idx[lo: lo + TIMING_BATCH_SIZE]
        args = (dataset.scenes[sel],) if with_scenes else ()
        t0 = time.perf_counter()
        predict_fn(dataset.csi[sel], kind, horizon, *args)
        times.append(1e3 * (time.perf_counter() - t0))
    return err / pw, float(np.median(times)) if times else 0.0


def _counts(model) -> tuple[int, int]:
    if hasattr(model, "param_count"):
        c = model.param_count()
        return (c.trainable, c.total) if hasattr(c, "trainable") else tuple(c)
    return (0, 0)


def trained_digests(model) -> set[str]:
    prov = getattr(model, "provenance", {}) or {}
    return {e["csi_digest"] for key in ("pretrained_on", "finetuned_on") for e in prov.get(key, [])}


def evaluate_model(model, dataset: CsiDataset, tasks: Sequence[tuple[str, int | None]], method: str,
                   indices=None, seeds=(), counts=None, fusion: bool = False) -> EvalReport:
    """Evaluate a model's ``predict`` on each task without any leakage check."""
    report = EvalReport()
    n = len(dataset) if indices is None else len(indices)
    counts = _counts(model) if counts is None else counts
    for kind, h in tasks:
        h = _task_horizon(dataset, kind, h)
        value, ms = evaluate_predictor(model.predict, dataset, kind, h, indices, with_scenes=fusion)
        report.entries.append(make_entry(method, dataset.id, kind, h, value, n, seeds, counts, ms))
    return report


def evaluate_baselines(dataset: CsiDataset, tasks, indices=None, seeds=()) -> EvalReport:
    report = EvalReport()
    n = len(dataset) if indices is None else len(indices)
    for kind, h in tasks:
        h = _task_horizon(dataset, kind, h)
        for method in default_baselines(kind):
            if method == "linear_extrap" and (dataset.config.shape[0 if kind == "time" else 2] - h) < 2:
                continue
            fn = lambda v, k, hh, m=method: baseline_predict(v, k, hh, m)
            value, ms = evaluate_predictor(fn, dataset, kind, h, indices)
            report.entries.append(make_entry(method, dataset.id, kind, h, value, n, seeds, (0, 0), ms))
    return report


DEFAULT_TASKS = (("time", None), ("frequency", None))


def zero_shot_eval(model, dataset: CsiDataset, tasks=DEFAULT_TASKS, indices=None, seeds=(),
                   baselines: bool = True) -> EvalReport:
    """Apply a pre-trained model to a held-out dataset with no parameter updates.

    Refuses (``LeakageError``) if the dataset is not flagged held-out or its
    digest appears in the model's training provenance. Zero-shot entries
    report zero trainable parameters.
    """
    if not dataset.config.held_out:
        raise LeakageError(f"dataset {dataset.id} is not flagged held-out")
    if dataset.csi_digest in trained_digests(model):
        raise LeakageError(f"dataset {dataset.id} (digest {dataset.csi_digest[:12]}) was used in training")
    _, total = _counts(model)
    report = evaluate_model(model, dataset, tasks, "wifo_zero_shot", indices, seeds, counts=(0, total))
    if baselines:
        report.extend(evaluate_baselines(dataset, tasks, indices, seeds))
    return report


def split_indices(n: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """First 80% of indices for training, the rest for testing."""
    n_train = int(math.floor(train_frac * n))
    if n_train < 1 or n - n_train < 1:
        raise ConfigError("n_samples", f"{n} samples cannot be split into train and test")
    return np.arange(n_train), np.arange(n_train, n)


def task_specific_train_eval(dataset: CsiDataset, model_config: ModelConfig, train_config: TrainConfig,
                             seeds=None) -> EvalEntry:
    """Train the full architecture from scratch on one dataset and score its test split."""
    train_idx, test_idx = split_indices(len(dataset))
    model = WiFoModel(model_config, seed=train_config.seed)
    if model_config.scene_token_enabled:
        raise ConfigError("scene_token_enabled", "task-specific baseline runs without fusion")
    fit_task(model, dataset, set(model.params), train_config, train_idx)
    kind = train_config.task
    seeds = (train_config.seed,) if seeds is None else seeds
    report = evaluate_model(model, dataset, [(kind, train_config.task_horizon)], "task_specific",
                            test_idx, seeds)
    return report.entries[0]
