from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import DivergedLoss, EmptySet
from ..tokenizer import Chunk, MaskedChunk, mask_all
from .config import ModelConfig, TrainConfig
from .model import ModelParams, loss_and_grad, nll_loss, predict
from .optim import AdamState, adamw_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    train_nll: float
    val_nll: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_nll!r}\t{self.val_nll!r}"


LOG_HEADER = "epoch\ttrain_nll\tval_nll"


@dataclass
class TrainResult:
    params: ModelParams
    log: list[LogRecord] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + [r.line() for r in self.log]) + "\n"


def epoch_seed(seed: int, epoch: int, stream: int = 0) -> int:
    """Independent 64-bit seed for one (epoch, purpose) pair."""
    ss = np.random.SeedSequence([seed & (2**64 - 1), epoch, stream])
    return int(ss.generate_state(1, np.uint64)[0])


def mean_nll(params: ModelParams, masked: Sequence[MaskedChunk], batch_size: int = 64) -> float:
    """Mean over chunks of the per-chunk masked NLL, eval mode."""
    return float(np.mean([nll_loss(p) for p in predict(params, masked, batch_size)]))


def train(
    train_set: Sequence[Chunk],
    val_set: Sequence[Chunk],
    mc: ModelConfig,
    tc: TrainConfig,
    on_epoch: Callable[[LogRecord], None] | None = None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Fit the MLM with AdamW, keeping the parameters with the best validation NLL.

    Each epoch reshuffles the training chunks and draws fresh masks, both from
    seeds derived from ``(tc.seed, epoch)``. Validation masks are drawn once.
    Epoch 0 in the log is the untrained model. Training stops once
    ``tc.patience`` epochs pass without a strict improvement in validation NLL.
    """
    train_set = [c for c in train_set if c.n_real > 0]
    val_set = [c for c in val_set if c.n_real > 0]
    if not train_set:
        raise EmptySet("training set has no non-empty chunks")
    if not val_set:
        raise EmptySet("validation set has no non-empty chunks")
    params = init.copy() if init is not None else ModelParams.init(mc, seed=tc.seed, dtype=tc.dtype)
    state = AdamState.zeros_like(params)
    val_masked = mask_all(val_set, tc.mask_rate, tc.seed)

    result = TrainResult(params.copy())
    first = mask_all(train_set, tc.mask_rate, epoch_seed(tc.seed, 0, 1))
    rec = LogRecord(0, mean_nll(params, first), mean_nll(params, val_masked))
    result.log.append(rec)
    if on_epoch:
        on_epoch(rec)

    best = math.inf
    n = len(train_set)
    for epoch in range(1, tc.max_epochs + 1):
        order = np.random.default_rng(epoch_seed(tc.seed, epoch, 0)).permutation(n)
        masked = mask_all([train_set[i] for i in order], tc.mask_rate, epoch_seed(tc.seed, epoch, 1))
        dropout_rng = np.random.default_rng(epoch_seed(tc.seed, epoch, 2))
        total = 0.0
        for s in range(0, n, tc.batch_size):
            batch = masked[s : s + tc.batch_size]
            loss, grads = loss_and_grad(params, batch, dropout_rng, mode="train")
            if not math.isfinite(loss):
                raise DivergedLoss(f"training loss became {loss} at epoch {epoch}")
            adamw_step(params, grads, state, tc)
            total += loss * len(batch)
        val = mean_nll(params, val_masked)
        if not math.isfinite(val):
            raise DivergedLoss(f"validation loss became {val} at epoch {epoch}")
        rec = LogRecord(epoch, total / n, val)
        result.log.append(rec)
        result.epochs_run = epoch
        if on_epoch:
            on_epoch(rec)
        log.info("epoch %d train %.4f val %.4f", epoch, rec.train_nll, val)
        if val < best:
            best = val
            result.best_epoch = epoch
            result.params = params.copy()
        elif epoch - result.best_epoch >= tc.patience:
            break
    return result

