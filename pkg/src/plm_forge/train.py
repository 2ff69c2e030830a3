"""Optimization: warm-up + cosine schedule, global-norm clipping, AdamW, checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .model import ModelConfig, ModelParams, check_params, init_params, is_norm_or_bias, loss_and_grads, param_shapes
from .seqdata import PackedBatch, Vocabulary

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    def __init__(self, report: "StepReport", checkpoint: str | None):
        self.report = report
        self.checkpoint = checkpoint
        super().__init__(
            f"training diverged at step {report.step} (loss={report.loss}, grad_norm={report.global_grad_norm}); "
            f"last healthy checkpoint: {checkpoint}"
        )


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 6.0e-4
    warmup_steps: int = 3000
    total_steps: int = 350_000
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    batch_size_tokens: int = 4096
    grad_accum: int = 1
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.min_lr_ratio <= 1:
            raise ValueError("min_lr_ratio must be in [0, 1]")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# Optimizer settings paired with each model size.
TRAIN_PRESETS = {
    "small": TrainConfig(peak_lr=6.0e-4, weight_decay=0.1, clip_norm=1.0, warmup_steps=3000, total_steps=350_000),
    "medium": TrainConfig(peak_lr=2.5e-4, weight_decay=0.1, clip_norm=1.0, warmup_steps=3000, total_steps=350_000),
    "base": TrainConfig(peak_lr=2.0e-4, weight_decay=0.1, clip_norm=0.8, warmup_steps=10_000, total_steps=400_000),
    "large": TrainConfig(peak_lr=0.8e-4, weight_decay=0.1, clip_norm=0.8, warmup_steps=10_000, total_steps=400_000),
    "xlarge": TrainConfig(peak_lr=0.1e-4, weight_decay=0.1, clip_norm=0.8, warmup_steps=10_000, total_steps=350_000),
}


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    tokens_seen: int = 0
    seed: int = 0

    @classmethod
    def fresh(cls, params: ModelParams, seed: int = 0) -> "TrainState":
        zeros = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0, 0, seed)


@dataclass
class StepReport:
    step: int
    loss: float
    lr: float
    global_grad_norm: float
    tokens_seen: int

    def healthy(self) -> bool:
        return math.isfinite(self.loss) and math.isfinite(self.global_grad_norm)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> peak over warmup, cosine down to min_lr_ratio*peak, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    peak = config.peak_lr
    if step < config.warmup_steps:
        return peak * step / config.warmup_steps
    floor = peak * config.min_lr_ratio
    if step >= config.total_steps:
        return floor
    frac = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``clip_norm``.

    Returns the clipped gradients and the pre-clip norm. Raises
    ``FloatingPointError`` on non-finite gradients; the training loop turns that
    into a :class:`DivergenceError`.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if norm <= clip_norm:
        return dict(grads), norm
    factor = clip_norm / norm
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, norm


def adam_step(state: TrainState, grads: Mapping[str, np.ndarray], lr: float, weight_decay: float) -> TrainState:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Norm gains and all biases are excluded from the decay term.
    """
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for k, p in state.params.items():
        g = grads[k]
        m = state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        v = state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if weight_decay and not is_norm_or_bias(k):
            update = update + weight_decay * p
        state.params[k] = (p - lr * update).astype(p.dtype)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# checkpoints: manifest (JSON text) + tensors.bin
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    state: TrainState,
    model_config: ModelConfig,
    train_config: TrainConfig | None = None,
    vocab: Vocabulary | None = None,
) -> Path:
    """Write ``manifest.json`` + ``tensors.bin``; replaces ``path`` atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    entries = []
    offset = 0
    with open(tmp / "tensors.bin", "wb") as fh:
        for group, tree in (("param", state.params), ("adam_m", state.m), ("adam_v", state.v)):
            for name in sorted(tree):
                arr = tree[name]
                size = nx.write_tensor(fh, arr)
                entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": size})
                offset += size
    manifest = {
        "format": "plm-forge-checkpoint/1",
        "model_config": model_config.to_dict(),
        "train_config": asdict(train_config) if train_config else None,
        "vocabulary": vocab.to_list() if vocab else None,
        "step": state.step,
        "tokens_seen": state.tokens_seen,
        "seed": state.seed,
        "tensors": entries,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    state: TrainState
    model_config: ModelConfig
    train_config: TrainConfig | None
    vocab: Vocabulary | None


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}/manifest.json: {exc}") from None
    try:
        model_config = ModelConfig.from_dict(manifest["model_config"])
        trees: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        with open(path / "tensors.bin", "rb") as fh:
            for e in manifest["tensors"]:
                fh.seek(e["offset"])
                arr = nx.read_tensor(fh)
                if list(arr.shape) != e["shape"]:
                    raise CheckpointError(f"{e['name']}: blob shape {arr.shape} != manifest {e['shape']}")
                trees[e["group"]][e["name"]] = arr
    except (KeyError, TypeError, ValueError, OSError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    try:
        check_params(trees["param"], model_config)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    # restore init order: global-norm summation order must match an uninterrupted run
    order = list(param_shapes(model_config))
    params = {k: trees["param"][k] for k in order}
    m = {k: trees["adam_m"][k] for k in order} if trees["adam_m"] else {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: trees["adam_v"][k] for k in order} if trees["adam_v"] else {k: np.zeros_like(p) for k, p in params.items()}
    state = TrainState(params, m, v, manifest.get("step", 0), manifest.get("tokens_seen", 0), manifest.get("seed", 0))
    tc = TrainConfig.from_dict(manifest["train_config"]) if manifest.get("train_config") else None
    vocab = Vocabulary.from_list(manifest["vocabulary"]) if manifest.get("vocabulary") else None
    return Checkpoint(state, model_config, tc, vocab)


def write_log_csv(reports: Iterable[StepReport], path: str | Path, append: bool = False) -> None:
    """CSV ``step,loss,lr,grad_norm,tokens_seen``; ``append`` continues an existing log."""
    path = Path(path)
    append = append and path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(["step", "loss", "lr", "grad_norm", "tokens_seen"])
        for r in reports:
            w.writerow([r.step, repr(r.loss), repr(r.lr), repr(r.global_grad_norm), r.tokens_seen])


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def batch_order(n_batches: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic per-epoch shuffle, independent of how many steps ran before."""
    return np.random.default_rng([seed, epoch]).permutation(n_batches)


def micro_batch(batches: Sequence[PackedBatch], index: int, seed: int) -> PackedBatch:
    epoch, pos = divmod(index, len(batches))
    return batches[batch_order(len(batches), seed, epoch)[pos]]


def train_loop(
    batches: Sequence[PackedBatch],
    model_config: ModelConfig,
    config: TrainConfig,
    state: TrainState | None = None,
    *,
    steps: int | None = None,
    checkpoint_dir: str | Path | None = None,
    vocab: Vocabulary | None = None,
    on_step: Callable[[StepReport], None] | None = None,
) -> tuple[TrainState, list[StepReport]]:
    """Run optimizer steps until ``state.step == config.total_steps`` (or ``steps`` more).

    Each step averages gradients over ``config.grad_accum`` micro-batches taken
    from a seeded per-epoch shuffle of ``batches``. The micro-batch sequence
    depends only on the step index, so a resumed run replays exactly.
    """
    if not batches:
        raise ValueError("train_loop needs at least one batch")
    if state is None:
        state = TrainState.fresh(init_params(model_config, config.seed), config.seed)
    end = config.total_steps if steps is None else min(config.total_steps, state.step + steps)
    ckpt_path = Path(checkpoint_dir) / "checkpoint" if checkpoint_dir else None
    last_good: str | None = None
    reports: list[StepReport] = []

    while state.step < end:
        lr = lr_schedule(state.step + 1, config)
        total_loss = 0.0
        acc: dict[str, np.ndarray] | None = None
        n_tok = 0
        for j in range(config.grad_accum):
            mb = micro_batch(batches, state.step * config.grad_accum + j, state.seed)
            value, grads = loss_and_grads(state.params, model_config, mb.inputs, mb.targets, mb.loss_mask)
            total_loss += value / config.grad_accum
            n_tok += mb.n_tokens
            if acc is None:
                acc = grads
            else:
                for k in acc:
                    acc[k] = acc[k] + grads[k]
        if config.grad_accum > 1:
            acc = {k: g / config.grad_accum for k, g in acc.items()}
        report = StepReport(state.step + 1, total_loss, lr, global_norm(acc), state.tokens_seen + n_tok)
        if not report.healthy():
            raise DivergenceError(report, last_good)
        clipped, _ = clip_global_norm(acc, config.clip_norm)
        adam_step(state, clipped, lr, config.weight_decay)
        state.tokens_seen = report.tokens_seen
        reports.append(report)
        if on_step:
            on_step(report)
        if ckpt_path and (state.step % config.checkpoint_every == 0 or state.step == end):
            save_checkpoint(ckpt_path, state, model_config, config, vocab)
            last_good = str(ckpt_path)
    return state, reports


# ---------------------------------------------------------------------------
# finetuning
# ---------------------------------------------------------------------------

FINETUNE_LR_FACTOR = 5
MAX_FINETUNE_EPOCHS = 2


def finetune_init(
    checkpoint: Checkpoint | str | Path,
    base_config: TrainConfig | None = None,
    *,
    steps_per_epoch: int,
    epochs: float = MAX_FINETUNE_EPOCHS,
    model_config: ModelConfig | None = None,
) -> tuple[TrainState, TrainConfig]:
    """Continue from a converged checkpoint with fresh optimizer state.

    Adam moments are zeroed, the step counter restarts, the peak learning
    rate is divided by 5 and the run is capped at two epochs. Warm-up keeps
    the base run's warm-up fraction.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if model_config is not None and model_config != ckpt.model_config:
        raise CheckpointError("checkpoint model config does not match the requested config")
    base = base_config or ckpt.train_config
    if base is None:
        raise CheckpointError("no base training config given or stored in checkpoint")
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be >= 1")
    epochs = min(float(epochs), MAX_FINETUNE_EPOCHS)
    total = max(2, int(math.floor(epochs * steps_per_epoch)))
    warmup = min(total - 1, int(round(base.warmup_steps * total / base.total_steps)))
    config = replace(base, peak_lr=base.peak_lr / FINETUNE_LR_FACTOR, total_steps=total, warmup_steps=warmup)
    params = {k: v.copy() for k, v in ckpt.state.params.items()}
    return TrainState.fresh(params, base.seed), config
