"""Adam training loop, resumable checkpoints, and the penalty-weight sweep."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import AdamState, Checkpoint, save_checkpoint
from .encoders import ModelDims, ModelParams, encode_batch, init_params
from .errors import ConfigError, NonFiniteError, TierError
from .losses import TierConfig, tier_loss
from .numerics import Tape
from .synth_data import SyntheticDataset, stack_samples
from .zeroshot import mean_zero_shot_auc

log = logging.getLogger(__name__)

LOSS_KEYS = ("clip", "patch_pen", "token_pen", "total")


class TrainingAborted(TierError):
    """Raised when a forward pass produced NaN/Inf."""

    def __init__(self, message: str, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    lambda_p: float = 0.2
    lambda_t: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    dataset_path: str | None = None
    checkpoint_every: int = 0  # epochs; 0 saves only at the end
    penalty_average: str = "sample"
    cls_in_penalty: bool = True
    penalty_terms: bool = True
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        self.tier()  # validates lambdas and averaging mode

    @property
    def run_name(self) -> str:
        return "unregularized" if self.lambda_p == 0 and self.lambda_t == 0 else "regularized"

    def tier(self) -> TierConfig:
        return TierConfig(self.lambda_p, self.lambda_t, self.penalty_average, self.cls_in_penalty,
                          self.penalty_terms)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]  # one entry per epoch
    steps: list[dict] = field(default_factory=list)  # one entry per optimizer step

    @property
    def params(self) -> ModelParams:
        return self.checkpoint.params


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
                config: TrainConfig) -> ModelParams:
    """One bias-corrected Adam step; returns new params and mutates ``state``."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step

    def update(name, p):
        g = grads[name]
        if config.weight_decay:
            g = g + config.weight_decay * p
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        return p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)

    return params.map(update)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    # stream tag 1 keeps shuffling independent of the init stream
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def epoch_batches(seed: int, epoch: int, n: int, batch_size: int) -> list[np.ndarray]:
    order = epoch_order(seed, epoch, n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()  # contrastive loss needs two pairs
    return batches


def loss_step(params: ModelParams, pixels: np.ndarray, tokens: np.ndarray,
              tier: TierConfig) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Forward + backward on one batch; returns (loss components, grads)."""
    tape = Tape()
    bound = params.bind(tape)
    breakdown = tier_loss(encode_batch(pixels, tokens, bound), tier, bound.log_temp)
    tape.backward(breakdown.total)
    return breakdown.to_dict(), {k: t.grad for k, t in bound.named().items()}


def train(config: TrainConfig, dataset: SyntheticDataset, init: ModelParams | None = None,
          resume: Checkpoint | None = None, checkpoint_dir=None) -> TrainResult:
    """Train from ``init`` (or a fresh seed init), or continue ``resume`` up to ``config.epochs``."""
    dims: ModelDims = dataset.manifest.dims
    tier = config.tier()
    if resume is not None:
        params, state = resume.params.copy(), resume.optimizer.copy()
        start, history = resume.epoch, [dict(h) for h in resume.history]
        if params.dims != dims:
            raise ConfigError("checkpoint dims do not match the dataset")
    else:
        params = (init if init is not None else init_params(config.seed, dims)).copy()
        state, start, history = AdamState.zeros(params), 0, []

    train_set = dataset.split("train")
    pixels, tokens = stack_samples(train_set) if train_set else (None, None)
    steps: list[dict] = []
    for epoch in range(start, config.epochs):
        epoch_steps = []
        for b, idx in enumerate(epoch_batches(config.seed, epoch, len(train_set), config.batch_size)):
            try:
                losses, grads = loss_step(params, pixels[idx], tokens[idx], tier)
            except NonFiniteError as exc:
                raise TrainingAborted(
                    f"non-finite value at epoch {epoch} step {b}: first non-finite tensor is "
                    f"{exc.tensor_name!r}", exc.tensor_name) from exc
            params = adam_update(params, grads, state, config)
            losses.update(epoch=epoch, step=state.step)
            epoch_steps.append(losses)
        summary = {"epoch": epoch, "steps": len(epoch_steps)}
        for key in LOSS_KEYS:
            summary[key] = float(np.mean([s[key] for s in epoch_steps])) if epoch_steps else math.nan
        history.append(summary)
        steps.extend(epoch_steps)
        log.info("epoch %d: %s", epoch, {k: round(summary[k], 5) for k in LOSS_KEYS})
        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            ckpt = Checkpoint(params, state.copy(), config.to_dict(), epoch + 1, [dict(h) for h in history])
            save_checkpoint(ckpt, Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.ckpt")

    final = Checkpoint(params, state, config.to_dict(), max(start, config.epochs), history)
    return TrainResult(final, history, steps)


# ----------------------------------------------------------------------------
# sweep


@dataclass
class SweepResult:
    lambda_ps: list[float]
    lambda_ts: list[float]
    auc: np.ndarray  # (len(lambda_ps), len(lambda_ts)); NaN for failed cells
    seeds: np.ndarray
    errors: dict[tuple[int, int], str] = field(default_factory=dict)

    @property
    def best(self) -> tuple[int, int]:
        if np.all(np.isnan(self.auc)):
            raise ValueError("every sweep cell failed")
        flat = int(np.nanargmax(self.auc))
        return divmod(flat, self.auc.shape[1])

    def to_csv(self) -> str:
        lines = ["lambda_p\\lambda_t," + ",".join(f"{t:.2f}" for t in self.lambda_ts)]
        for i, p in enumerate(self.lambda_ps):
            lines.append(f"{p:.2f}," + ",".join(repr(float(v)) for v in self.auc[i]))
        return "\n".join(lines) + "\n"

    def best_line(self) -> str:
        i, j = self.best
        return (f"best: lambda_p={self.lambda_ps[i]:.2f} lambda_t={self.lambda_ts[j]:.2f} "
                f"auc={float(self.auc[i, j])!r}")


def grid_values(lo: float, hi: float, step: float) -> list[float]:
    if step <= 0 or hi < lo:
        raise ConfigError("grid needs step > 0 and max >= min")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


_WORKER_DATASET: SyntheticDataset | None = None


def _init_worker(dataset: SyntheticDataset) -> None:
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def run_cell(base: TrainConfig, lambda_p: float, lambda_t: float, dataset: SyntheticDataset,
             registry: dict | None = None) -> float:
    """Train one sweep cell from the seed's initialization and score it on the val split."""
    cfg = dataclasses.replace(base, lambda_p=lambda_p, lambda_t=lambda_t)
    init = init_params(cfg.seed, dataset.manifest.dims)
    result = train(cfg, dataset, init=init)
    return mean_zero_shot_auc(result.params, dataset.split("val"), dataset.catalog, registry)


def _cell_job(args):
    base, i, j, lp, lt, registry = args
    try:
        return i, j, run_cell(base, lp, lt, _WORKER_DATASET, registry), None
    except TierError as exc:
        return i, j, math.nan, f"{type(exc).__name__}: {exc}"


def sweep(lambda_ps: list[float], lambda_ts: list[float], dataset: SyntheticDataset,
          base: TrainConfig | None = None, epochs: int = 1, registry: dict | None = None,
          workers: int = 1, order: list[tuple[int, int]] | None = None) -> SweepResult:
    """Short training run for every (lambda_p, lambda_t) pair, scored by val zero-shot mean AUC.

    Every cell starts from the same initialization and seed, so the result
    does not depend on execution order or worker count. A failing cell is
    recorded as NaN with its error message.
    """
    if not lambda_ps or not lambda_ts:
        raise ConfigError("sweep grid is empty")
    base = dataclasses.replace(base or TrainConfig(), epochs=epochs)
    cells = order or [(i, j) for i in range(len(lambda_ps)) for j in range(len(lambda_ts))]
    jobs = [(base, i, j, lambda_ps[i], lambda_ts[j], registry) for i, j in cells]
    auc = np.full((len(lambda_ps), len(lambda_ts)), np.nan)
    errors = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(dataset,)) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        _init_worker(dataset)
        results = [_cell_job(job) for job in jobs]
    for i, j, value, err in results:
        auc[i, j] = value
        if err is not None:
            errors[(i, j)] = err
            log.warning("sweep cell (%s, %s) failed: %s", lambda_ps[i], lambda_ts[j], err)
    seeds = np.full(auc.shape, base.seed, dtype=np.int64)
    return SweepResult(list(lambda_ps), list(lambda_ts), auc, seeds, errors)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
