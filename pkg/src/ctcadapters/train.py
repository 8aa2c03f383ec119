"""Optimizer, learning-rate schedules, and the CTC training loop.

The bi-stage schedule ramps linearly to the peak and back to zero; the
tri-stage schedule ramps up, holds, then decays exponentially to
final_scale * peak. Both are continuous at the stage boundaries. Adam runs
with (0.9, 0.98, 1e-8) defaults; only trainable parameters are touched, so
frozen weights stay bitwise identical through any number of steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .ctc import ctc_loss, edit_distance, greedy_decode
from .errors import ConfigError, NumericalAbortError
from .model import Model
from .synthdata import Utterance
from .transfer import TransferPolicy, apply_policy

SCHEDULE_KINDS = ("bi_stage", "tri_stage")


@dataclass(frozen=True)
class Schedule:
    kind: str
    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.1
    hold_frac: float = 0.4  # tri_stage only
    final_scale: float = 0.05  # tri_stage only

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"train.schedule must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.peak_lr <= 0:
            raise ConfigError(f"train.peak_lr must be > 0, got {self.peak_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"train.total_steps must be >= 1, got {self.total_steps}")
        if not 0 < self.warmup_frac < 1:
            raise ConfigError(f"train.warmup_frac must be in (0,1), got {self.warmup_frac}")
        if self.kind == "tri_stage":
            if not 0 < self.hold_frac < 1 or self.warmup_frac + self.hold_frac > 1:
                raise ConfigError(
                    "train.hold_frac must be in (0,1) with warmup_frac + hold_frac <= 1"
                )
            if not 0 < self.final_scale <= 1:
                raise ConfigError(f"train.final_scale must be in (0,1], got {self.final_scale}")


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at an integer step in [0, total_steps]."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = schedule.warmup_frac * total
    if schedule.kind == "bi_stage":
        if step <= warm:
            return schedule.peak_lr * step / warm
        return schedule.peak_lr * (total - step) / (total - warm)
    hold_end = warm + schedule.hold_frac * total
    if step <= warm:
        return schedule.peak_lr * step / warm
    if step <= hold_end:
        return schedule.peak_lr
    return schedule.peak_lr * schedule.final_scale ** ((step - hold_end) / (total - hold_end))


@dataclass(frozen=True)
class TrainConfig:
    policy: TransferPolicy
    schedule: Schedule
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")


@dataclass
class Batch:
    """Zero-padded frames plus true lengths; the model consumes each
    sequence trimmed to its true length."""

    frames: np.ndarray  # (B, T_max, d_in)
    lengths: np.ndarray  # (B,)
    labels: list[list[int]]

    @classmethod
    def from_utterances(cls, utts: list[Utterance]) -> "Batch":
        if not utts:
            raise ValueError("empty batch")
        t_max = max(u.true_length for u in utts)
        d_in = utts[0].frames.shape[1]
        frames = np.zeros((len(utts), t_max, d_in))
        lengths = np.zeros(len(utts), dtype=np.int64)
        for i, u in enumerate(utts):
            frames[i, : u.true_length] = u.frames
            lengths[i] = u.true_length
        return cls(frames=frames, lengths=lengths, labels=[list(u.labels) for u in utts])

    def __len__(self) -> int:
        return len(self.labels)

    def sequence(self, i: int) -> np.ndarray:
        return self.frames[i, : self.lengths[i]]


@dataclass
class StepReport:
    loss: float
    lr: float
    grad_norm: float


@dataclass
class EvalReport:
    mean_loss: float
    wer: float


class Trainer:
    """Owns the Adam state; the sole mutator of the model's parameters."""

    def __init__(self, model: Model, config: TrainConfig):
        self.model = model
        self.config = config
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def train_step(self, batch: Batch, step: int) -> StepReport:
        """Forward, mean CTC loss, backward, Adam on trainable parameters.

        Applies the policy for this step first, so the freeze window is
        respected; gradients are zeroed on the way out.
        """
        cfg = self.config
        apply_policy(self.model, cfg.policy, step)
        lr = lr_at(cfg.schedule, step)
        self.model.zero_grads()

        total = None
        for i in range(len(batch)):
            logits = self.model.forward(batch.sequence(i))
            loss_i = ctc_loss(tn.log_softmax(logits), batch.labels[i])
            total = loss_i if total is None else tn.add(total, loss_i)
        mean_loss = tn.scale(total, 1.0 / len(batch))
        loss_val = mean_loss.item()
        if not math.isfinite(loss_val):
            raise NumericalAbortError(step=step, lr=lr, grad_norm=float("nan"))
        tn.backward(mean_loss)

        sq_sum = 0.0
        for p in self.model.parameters():
            if p.trainable and p.tensor.grad is not None:
                sq_sum += float((p.tensor.grad**2).sum())
        grad_norm = math.sqrt(sq_sum)
        if not math.isfinite(grad_norm):
            raise NumericalAbortError(step=step, lr=lr, grad_norm=grad_norm)

        clip_scale = 1.0
        if cfg.grad_clip is not None and grad_norm > cfg.grad_clip:
            clip_scale = cfg.grad_clip / grad_norm

        for p in self.model.parameters():
            if not p.trainable or p.tensor.grad is None:
                continue
            g = p.tensor.grad if clip_scale == 1.0 else p.tensor.grad * clip_scale
            t = self._t.get(p.path, 0) + 1
            self._t[p.path] = t
            m = self._m.setdefault(p.path, np.zeros_like(g))
            v = self._v.setdefault(p.path, np.zeros_like(g))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

        self.model.zero_grads()
        return StepReport(loss=loss_val, lr=lr, grad_norm=grad_norm)


def evaluate(model: Model, utterances: list[Utterance]) -> EvalReport:
    """Mean CTC loss and corpus WER (total edits / total reference tokens).

    Pure: no parameter or gradient state is touched.
    """
    if not utterances:
        raise ValueError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    edits = 0
    ref_tokens = 0
    with tn.no_grad():
        for utt in utterances:
            logits = model.forward(utt.frames)
            loss_sum += ctc_loss(tn.log_softmax(logits), list(utt.labels)).item()
            hyp = greedy_decode(logits).tokens
            edits += edit_distance(list(utt.labels), hyp)
            ref_tokens += len(utt.labels)
    return EvalReport(mean_loss=loss_sum / len(utterances), wer=edits / ref_tokens)


def run_training(
    model: Model,
    train_utts: list[Utterance],
    config: TrainConfig,
    eval_utts: list[Utterance] | None = None,
    eval_every: int = 0,
    on_step=None,
    on_eval=None,
) -> list[StepReport]:
    """Drive schedule.total_steps steps with seeded batch sampling.

    Batches are drawn with replacement from a generator keyed on the config
    seed, so a rerun with the same config reproduces the loss trajectory
    bitwise. ``on_step(step, report)`` and ``on_eval(step, split, wer)`` are
    called as rows are produced.
    """
    trainer = Trainer(model, config)
    rng = np.random.default_rng([config.seed, 2])
    reports = []
    total = config.schedule.total_steps
    for step in range(total):
        idx = rng.integers(0, len(train_utts), size=config.batch_size)
        batch = Batch.from_utterances([train_utts[int(i)] for i in idx])
        report = trainer.train_step(batch, step)
        reports.append(report)
        if on_step is not None:
            on_step(step, report)
        if eval_utts and eval_every > 0 and (step + 1) % eval_every == 0:
            res = evaluate(model, eval_utts)
            if on_eval is not None:
                on_eval(step, "eval", res.wer)
    if eval_utts and on_eval is not None:
        res = evaluate(model, eval_utts)
        on_eval(total, "eval", res.wer)
    return reports
