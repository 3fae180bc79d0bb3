"""Optimisation: loss, learning-rate schedule, Adam, mask draws, training loop."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Pair, eval_batches, greedy_decode_batch, train_batches
from .errors import ConfigError, ContractError, NonFiniteError, TrainingDiverged
from .metrics import EvalReport, bleu4, token_accuracy
from .model import PAD_ID, Model, forward
from .tensor import RngStream, Tape, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = "step,lr,loss,token_acc"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup: int = 4000
    label_smoothing: float = 0.1
    max_steps: int = 1000
    batch_tokens: int = 1024
    seed: int = 1
    log_every: int = 100
    ckpt_every: int = 0
    residual_dropout: float = 0.0

    def validate(self) -> "TrainConfig":
        problems = []
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if self.adam_eps <= 0:
            problems.append("adam_eps must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            problems.append("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.residual_dropout < 1.0:
            problems.append("residual_dropout must lie in [0, 1)")
        for name in ("warmup", "max_steps", "batch_tokens", "log_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.ckpt_every < 0:
            problems.append("ckpt_every must be >= 0")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must fit in 64 bits")
        if problems:
            raise ConfigError("invalid training config: " + "; ".join(problems))
        return self


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` at ``cfg.warmup``, then ``lr * sqrt(warmup / step)``."""
    if step < 1:
        raise ContractError(f"steps are 1-based, got {step}")
    return cfg.lr * min(step / cfg.warmup, math.sqrt(cfg.warmup / step))


# ----------------------------------------------------------------------------
# loss


def label_smoothed_nll(logits: Tensor, targets: np.ndarray, eps: float,
                       pad_id: int = PAD_ID) -> Tensor:
    """Cross-entropy against ``(1 - eps) * onehot + eps / V``, averaged over
    non-pad positions."""
    targets = np.asarray(targets, dtype=np.int64)
    keep = targets != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ContractError("all target positions are padding")
    v = logits.shape[-1]
    if np.any(targets[keep] >= v) or np.any(targets < 0):
        raise ContractError(f"target ids must lie in [0, {v})")
    weights = np.full(logits.shape, eps / v, dtype=logits.dtype)
    np.put_along_axis(weights, targets[..., None],
                      np.take_along_axis(weights, targets[..., None], -1) + (1.0 - eps), axis=-1)
    weights *= keep[..., None]
    lp = T.log_softmax(logits)
    return T.scale(T.total(T.mul(lp, weights)), -1.0 / n)


# ----------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.98, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    if lr <= 0:
        raise ContractError("lr must be positive")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


# ----------------------------------------------------------------------------
# mask draws

_STEP_BITS, _LAYER_BITS, _BRANCH_BITS, _SLOT_BITS = 32, 12, 10, 10
_DROPOUT_SLOT = (1 << _SLOT_BITS) - 1


def mask_counter(step: int, layer: int, branch: int, head: Optional[int] = None) -> int:
    """Pack draw coordinates into one 64-bit counter.

    The low slot is 0 for a whole-branch draw and ``head + 1`` for a per-head draw.
    """
    slot = 0 if head is None else head + 1
    limits = ((step, _STEP_BITS, "step"), (layer, _LAYER_BITS, "layer"),
              (branch, _BRANCH_BITS, "branch"), (slot, _SLOT_BITS, "head"))
    for value, bits, what in limits:
        if not 0 <= value < (1 << bits) - (1 if what == "head" else 0):
            raise ContractError(f"{what} index {value} out of range")
    return (step << 32) | (layer << 20) | (branch << 10) | slot


def mask_schedule(step: int, layer: int, branch: int, head: Optional[int], seed: int) -> float:
    return RngStream(seed).uniform_at(mask_counter(step, layer, branch, head))


@dataclass(frozen=True)
class MaskSchedule:
    """Position-addressed draws for one training step."""

    seed: int
    step: int

    def layer(self, index: int) -> "_LayerDraws":
        return _LayerDraws(self, index)

    def dropout_keep(self, layer: int, shape: tuple, rate: float) -> np.ndarray:
        counter = (self.step << 32) | (layer << 20) | _DROPOUT_SLOT
        return RngStream(self.seed).generator(counter).random(shape) >= rate


@dataclass(frozen=True)
class _LayerDraws:
    schedule: MaskSchedule
    index: int

    def uniform(self, branch: int, head: Optional[int] = None) -> float:
        s = self.schedule
        return mask_schedule(s.step, self.index, branch, head, s.seed)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    metrics: list  # (step, lr, loss, token_acc)
    step: int


def _format_row(row) -> str:
    step, lr, loss, acc = row
    return f"{step},{lr!r},{loss!r},{acc!r}"


def train_loop(model: Model, pairs: Sequence[Pair], cfg: TrainConfig,
               run_dir: Optional[str] = None,
               on_log: Optional[Callable[[tuple], None]] = None,
               stop_when: Optional[Callable[[tuple, Model], bool]] = None) -> TrainResult:
    """Train ``model`` in place for ``cfg.max_steps`` steps.

    ``stop_when(row, model)`` is consulted after each logged row; returning
    true ends training early.

    With ``run_dir`` the metrics go to ``metrics.csv`` there, periodic
    checkpoints to ``last.ckpt`` and the final one to ``final.ckpt``.
    """
    cfg.validate()
    params = model.params
    state = AdamState()
    batches = train_batches(pairs, cfg.batch_tokens, cfg.seed)
    metrics = []
    csv = None
    if run_dir is not None:
        csv = open(os.path.join(run_dir, "metrics.csv"), "w", encoding="utf-8", newline="\n")
        csv.write(METRICS_HEADER + "\n")
    try:
        for step in range(1, cfg.max_steps + 1):
            batch = next(batches)
            lr = lr_at(step, cfg)
            try:
                with Tape() as tape:
                    logits = forward(model, batch.src, batch.tgt_in, training=True,
                                     rng=MaskSchedule(cfg.seed, step),
                                     residual_dropout=cfg.residual_dropout)
                    loss = label_smoothed_nll(logits, batch.tgt_out, cfg.label_smoothing)
                grads = tape.backward(loss, params.values())
                adam_step(params, {n: grads[p] for n, p in params.items()}, state, lr,
                          cfg.beta1, cfg.beta2, cfg.adam_eps)
            except NonFiniteError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            if step % cfg.log_every == 0 or step == cfg.max_steps:
                row = (step, lr, float(loss.data),
                       token_accuracy(logits.data, batch.tgt_out))
                metrics.append(row)
                if csv is not None:
                    csv.write(_format_row(row) + "\n")
                    csv.flush()
                log.info("step %d lr %.3g loss %.4f acc %.4f", *row)
                if on_log is not None:
                    on_log(row)
                if stop_when is not None and stop_when(row, model):
                    break
            if run_dir is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                save_checkpoint(model, os.path.join(run_dir, "last.ckpt"), step)
    finally:
        if csv is not None:
            csv.close()
    if run_dir is not None:
        save_checkpoint(model, os.path.join(run_dir, "final.ckpt"), step)
    return TrainResult(model, metrics, step)


def evaluate(model: Model, pairs: Sequence[Pair], batch_tokens: int = 4096) -> EvalReport:
    """Teacher-forced loss and token accuracy plus greedy-decode BLEU and
    exact match. Drop masks are never applied."""
    if not pairs:
        raise ContractError("no evaluation pairs")
    loss_sum = 0.0
    correct = 0
    n_tok = 0
    for batch in eval_batches(pairs, batch_tokens):
        logits = forward(model, batch.src, batch.tgt_in)
        n = batch.n_tokens
        loss_sum += float(label_smoothed_nll(logits, batch.tgt_out, 0.0).data) * n
        correct += int(((logits.data.argmax(-1) == batch.tgt_out) & batch.weights).sum())
        n_tok += n
    longest = max(len(t) for _, t in pairs) + 1
    hyps = []
    for start in range(0, len(pairs), 256):
        chunk = pairs[start:start + 256]
        hyps += greedy_decode_batch(model, [s for s, _ in chunk], longest)
    refs = [list(t) for _, t in pairs]
    exact = sum(h == r for h, r in zip(hyps, refs)) / len(pairs)
    return EvalReport(bleu=float(bleu4(hyps, refs)), token_accuracy=correct / n_tok,
                      exact_match=float(exact), loss=loss_sum / n_tok, n_samples=len(pairs))
