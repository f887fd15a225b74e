"""Masked pre-training over a scenario suite, and freeze-policy fine-tuning."""

from __future__ import annotations

import fnmatch
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .chansim import ConfigError, CsiDataset
from .numcore import OptimizerState, Tensor, adam_step, backward, no_grad
from .wifomodel import (
    MASK_KINDS,
    Checkpoint,
    MaskSpec,
    ModelConfig,
    WiFoModel,
    mae_loss,
    patchify,
    sample_mask,
    task_mask,
)

log = logging.getLogger(__name__)


class LeakageError(RuntimeError):
    """A held-out dataset would reach training or evaluation would reuse training data."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 8
    lr: float = 2e-3
    lr_min: float = 1e-4
    schedule: str = "cosine"
    mask_weights: tuple[float, float, float] = (2.0, 1.0, 1.0)  # random, time, frequency
    mask_ratio: float = 0.75
    # pre-training horizons as a fraction of the patch grid along the masked axis
    time_horizon: float = 0.5
    freq_horizon: float = 0.5
    # fine-tuning task and its horizon in raw snapshots/subcarriers (None: half the axis)
    task: str = "frequency"
    task_horizon: int | None = None
    # symmetry augmentation of pre-training batches (see augment_batch)
    augment: bool = True
    # per-axis probability of training on a random half-length window
    crop_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.lr < 0 or self.lr_min < 0:
            raise ConfigError("lr", "learning rates must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("schedule", f"must be 'constant' or 'cosine', got {self.schedule!r}")
        w = self.mask_weights
        if len(w) != 3 or any(x < 0 for x in w) or sum(w) <= 0:
            raise ConfigError("mask_weights", "need 3 non-negative weights with positive sum")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio", "must lie in (0, 1)")
        for name in ("time_horizon", "freq_horizon"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(name, "must lie in (0, 1)")
        if not 0.0 <= self.crop_prob <= 1.0:
            raise ConfigError("crop_prob", "must lie in [0, 1]")
        if self.task not in ("time", "frequency"):
            raise ConfigError("task", f"must be 'time' or 'frequency', got {self.task!r}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_weights"] = list(self.mask_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        d = dict(d)
        if "mask_weights" in d:
            d["mask_weights"] = tuple(float(x) for x in d["mask_weights"])
        return cls(**d)


@dataclass(frozen=True)
class FreezePolicy:
    """Glob patterns naming the parameters left trainable."""

    trainable: tuple[str, ...]

    def resolve(self, names: Sequence[str]) -> set[str]:
        if not self.trainable:
            raise ConfigError("freeze", "policy has no trainable patterns")
        chosen: set[str] = set()
        for pat in self.trainable:
            hits = fnmatch.filter(names, pat)
            if not hits:
                raise ConfigError("freeze", f"pattern {pat!r} matches no parameter")
            chosen.update(hits)
        return chosen


def head_freeze_policy(fusion: bool) -> FreezePolicy:
    """First decoder block and output head trainable, plus the scene MLP when fused."""
    pats = ("decoder.blocks.0.*", "decoder.head.*")
    return FreezePolicy(pats + ("scene.*",) if fusion else pats)


# -- batches -----------------------------------------------------------------

def normalized_patches(values: np.ndarray, model_config: ModelConfig, mask: MaskSpec) -> np.ndarray:
    """Patch a complex batch and scale each sample to unit RMS over its visible tokens."""
    patches = patchify(np.asarray(values, dtype=np.complex64), model_config.patch)
    vis = patches[:, mask.visible]
    rms = np.sqrt((vis * vis).sum(axis=(1, 2)) / (vis.shape[1] * model_config.patch.volume))
    rms = np.where(rms > 0, rms, 1.0).astype(patches.dtype)
    return patches / rms[:, None, None]


def augment_batch(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random symmetries of the sum-of-paths channel, drawn per sample.

    A common phase rotation, a flip of the antenna axis (sin theta -> -sin theta)
    and conjugation paired with a flip of the frequency axis (nu -> -nu, delays
    kept). Each maps a channel to another one the simulator could draw, up to
    per-path constant phases absorbed by the circular path gains.
    """
    v = np.array(values, dtype=np.complex64, copy=True)
    n = v.shape[0]
    v *= np.exp(1j * rng.uniform(-np.pi, np.pi, n)).astype(np.complex64)[:, None, None, None]
    flip_s = rng.random(n) < 0.5
    v[flip_s] = v[flip_s][:, :, ::-1, :]
    mirror = rng.random(n) < 0.5
    v[mirror] = np.conj(v[mirror][:, :, :, ::-1])
    return v


def crop_batch(values: np.ndarray, patch, rng: np.random.Generator, prob: float) -> np.ndarray:
    """Random half-length windows of a [B, T, S, F] batch, one shape per batch.

    Each axis is halved with probability ``prob`` when the half stays
    patch-aligned (and keeps two patches along time and frequency, so the
    horizon masks stay valid). A window of the sum-of-paths channel is
    itself a valid channel: shifting the origin only rotates path phases.
    """
    values = np.asarray(values)
    if prob <= 0.0:
        return values
    sl = [slice(None)]
    for axis, (n, p) in enumerate(zip(values.shape[1:], patch.extents)):
        half = n // 2
        need = 1 if axis == 1 else 2
        if n % 2 == 0 and half % p == 0 and half // p >= need and rng.random() < prob:
            start = int(rng.integers(n - half + 1))
            sl.append(slice(start, start + half))
        else:
            sl.append(slice(None))
    return values[tuple(sl)]


def _check_divisible(datasets: Sequence[CsiDataset], cfg: ModelConfig) -> None:
    for ds in datasets:
        try:
            cfg.patch.grid_dims(ds.config.shape)
        except ValueError as exc:
            raise ConfigError("patch", f"dataset {ds.id}: {exc}") from None


def _horizon(frac: float, size: int) -> int:
    return min(max(int(round(frac * size)), 1), size - 1)


def _draw_mask(kind: str, grid, tc: TrainConfig, rng) -> MaskSpec:
    n = int(np.prod(grid))
    if kind == "random":
        return sample_mask("random", n, grid, tc.mask_ratio, rng)
    if kind == "time":
        return sample_mask("time", n, grid, _horizon(tc.time_horizon, grid[0]))
    return sample_mask("frequency", n, grid, _horizon(tc.freq_horizon, grid[2]))


def _step(model: WiFoModel, opt: OptimizerState, batch_values, mask, grid, lr, scenes=None) -> float:
    x = normalized_patches(batch_values, model.config, mask)
    recon = model.forward(x, mask, grid, scenes)
    loss = mae_loss(recon, x, mask)
    grads = backward(loss)
    named = {p.name: g for p, g in grads.items() if p.name in model.params}
    opt.lr = lr
    adam_step(opt, model.params, named)
    return float(loss.data)


class TrainLog(list):
    """Per-step records; optionally mirrored to a JSON-lines file."""

    def __init__(self, path=None):
        super().__init__()
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def add(self, **record) -> None:
        self.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def running_loss(self, window: int = 50) -> float:
        tail = [r["loss"] for r in self[-window:]]
        return float(np.mean(tail))


def _provenance_entry(ds: CsiDataset, indices=None) -> dict:
    entry = {"id": ds.id, "csi_digest": ds.csi_digest}
    if indices is not None:
        entry["indices"] = [int(i) for i in indices]
    return entry


def pretrain(datasets: Sequence[CsiDataset], model_config: ModelConfig, train_config: TrainConfig,
             log_path=None) -> tuple[Checkpoint, TrainLog]:
    """Self-supervised masked reconstruction over every dataset in the suite.

    Each step draws a dataset uniformly, a batch uniformly within it and a
    mask kind by the curriculum weights.
    """
    if not datasets:
        raise ConfigError("datasets", "need at least one pre-training dataset")
    leaked = [ds.id for ds in datasets if ds.config.held_out]
    if leaked:
        raise LeakageError(f"held-out datasets in pre-training list: {leaked}")
    if model_config.scene_token_enabled:
        raise ConfigError("scene_token_enabled", "pre-training runs without the scene token")
    _check_divisible(datasets, model_config)

    tc = train_config
    rng = np.random.default_rng(tc.seed)
    model = WiFoModel(model_config, seed=int(rng.integers(2**63)))
    opt = OptimizerState(lr=tc.lr)
    weights = np.asarray(tc.mask_weights, dtype=float)
    weights = weights / weights.sum()
    train_log = TrainLog(log_path)

    for step in range(tc.steps):
        di = int(rng.integers(len(datasets)))
        ds = datasets[di]
        idx = np.sort(rng.choice(len(ds), size=min(tc.batch_size, len(ds)), replace=False))
        kind = MASK_KINDS[int(rng.choice(3, p=weights))]
        batch = crop_batch(ds.csi[idx], model_config.patch, rng, tc.crop_prob)
        if tc.augment:
            batch = augment_batch(batch, rng)
        grid = model_config.patch.grid_dims(batch.shape[1:])
        mask = _draw_mask(kind, grid, tc, rng)
        lr = tc.lr_at(step)
        loss = _step(model, opt, batch, mask, grid, lr)
        train_log.add(step=step, dataset=ds.id, mask=kind, loss=loss, lr=lr)
        if step % 500 == 0:
            log.info("pretrain step %d dataset %s mask %s loss %.4f", step, ds.id, kind, loss)

    model.provenance = {"pretrained_on": [_provenance_entry(ds) for ds in datasets]}
    ckpt = Checkpoint.from_model(model, trainable={n: False for n in model.params})
    return ckpt, train_log


def _encoder_frozen(names, trainable: set[str]) -> bool:
    return not any(n in trainable for n in names if n.startswith(("patch_embed.", "encoder.")))


def fit_task(model: WiFoModel, dataset: CsiDataset, trainable: set[str], train_config: TrainConfig,
             indices=None, fusion: bool = False, log_path=None) -> TrainLog:
    """Train the named parameters on the fixed task mask; the rest stay bit-identical.

    With the encoder frozen its outputs never change, so they are computed
    once per sample and only the decoder runs each step.
    """
    tc = train_config
    shape = dataset.config.shape
    grid = model.config.patch.grid_dims(shape)
    size = shape[0] if tc.task == "time" else shape[2]
    horizon = tc.task_horizon if tc.task_horizon is not None else size // 2
    mask = task_mask(tc.task, horizon, shape, model.config.patch)
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.intp)
    if pool.size == 0:
        raise ConfigError("indices", "no training samples")

    rng = np.random.default_rng(tc.seed)
    opt = OptimizerState(lr=tc.lr)
    x_all = normalized_patches(dataset.csi[pool], model.config, mask)
    latents = None
    if _encoder_frozen(model.params, trainable):
        with no_grad():
            latents = np.concatenate([model.encode_visible(x_all[lo: lo + 32], mask, grid).data
                                      for lo in range(0, pool.size, 32)])
    for name, p in model.params.items():
        p.requires_grad = name in trainable
    model.trainable = {name: name in trainable for name in model.params}
    train_log = TrainLog(log_path)
    try:
        for step in range(tc.steps):
            sel = np.sort(rng.choice(pool.size, size=min(tc.batch_size, pool.size), replace=False))
            x = x_all[sel]
            enc = Tensor(latents[sel]) if latents is not None else model.encode_visible(x, mask, grid)
            token = model.scene_token(dataset.scenes[pool[sel]]) if fusion else None
            loss = mae_loss(model.decode_full(enc, mask, grid, token), x, mask)
            grads = backward(loss)
            lr = tc.lr_at(step)
            opt.lr = lr
            adam_step(opt, model.params, {p.name: g for p, g in grads.items() if p.name in model.params})
            train_log.add(step=step, dataset=dataset.id, mask=tc.task, loss=float(loss.data), lr=lr)
    finally:
        for p in model.params.values():
            p.requires_grad = True
    return train_log


def finetune(checkpoint: Checkpoint, dataset: CsiDataset, freeze: FreezePolicy, fusion: bool,
             train_config: TrainConfig, indices=None, log_path=None) -> tuple[Checkpoint, TrainLog]:
    """Adapt a pre-trained checkpoint to one dataset's prediction task.

    With ``fusion`` the scene-token MLP is added (if absent) and fed the
    dataset's scene records. The returned checkpoint flags exactly the
    parameters that were trained.
    """
    model = checkpoint.to_model()
    if fusion:
        if dataset.scenes is None or len(dataset.scenes) != len(dataset):
            raise ConfigError("fusion", f"dataset {dataset.id} has no scene records")
        model.enable_scene_token(seed=train_config.seed)
    elif model.config.scene_token_enabled:
        raise ConfigError("fusion", "checkpoint carries a scene token but fusion is off")
    _check_divisible([dataset], model.config)
    trainable = freeze.resolve(list(model.params))
    train_log = fit_task(model, dataset, trainable, train_config, indices, fusion, log_path)
    prov = dict(model.provenance)
    prov["finetuned_on"] = prov.get("finetuned_on", []) + [_provenance_entry(dataset, indices)]
    model.provenance = prov
    return Checkpoint.from_model(model), train_log
