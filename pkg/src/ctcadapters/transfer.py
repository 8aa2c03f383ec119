"""Trainable-parameter selection policies and exact parameter accounting.

Five transfer modes over the same model:

    full_finetune   classifier always; every transformer parameter once the
                    freeze window has passed; frontend never
    adapter         adapters + every layer norm + classifier
    layernorm_only  layer norms + classifier
    topn_finetune   every parameter of the top n blocks + classifier
    topn_adapter    adapters of the top n blocks + every layer norm + classifier

Layer norms inside frozen lower blocks stay frozen under topn_finetune but
train under the adapter modes. Learned positional embeddings count as
transformer body (full_finetune only). Counting works from shapes alone, so
reports on large configs never materialize weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import checkpoint
from .errors import ConfigError, PolicyError
from .model import (
    AdapterConfig,
    Model,
    ModelConfig,
    parameter_manifest,
)

MODES = ("full_finetune", "adapter", "layernorm_only", "topn_finetune", "topn_adapter")
ADAPTER_MODES = ("adapter", "topn_adapter")
FINETUNE_MODES = ("full_finetune", "topn_finetune")
DELTA_MODES = ("adapter", "topn_adapter", "layernorm_only")


@dataclass(frozen=True)
class TransferPolicy:
    """Which parameters train, and (for fine-tune modes) the freeze window."""

    mode: str
    n: int | None = None
    freeze_transformer_steps: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"transfer.mode must be one of {MODES}, got {self.mode!r}")
        if self.mode.startswith("topn"):
            if self.n is None or self.n < 1:
                raise ConfigError(f"transfer.topn must be >= 1 for mode {self.mode}")
        elif self.n is not None:
            raise ConfigError(f"transfer.topn is only valid for top-n modes, not {self.mode}")
        if self.freeze_transformer_steps < 0:
            raise ConfigError(
                f"transfer.freeze_transformer_steps must be >= 0, got {self.freeze_transformer_steps}"
            )


def _path_group(path: str) -> str:
    """Breakdown prefix: frontend, pos, classifier, or layer.<i>.<sublayer>."""
    if path.startswith("layer."):
        return ".".join(path.split(".")[:3])
    return path.split(".")[0]


def _is_trainable(path: str, policy: TransferPolicy, num_layers: int, step: int) -> bool:
    group = _path_group(path)
    if group == "classifier":
        return True
    mode = policy.mode
    if group == "frontend":
        return False
    in_body = step >= policy.freeze_transformer_steps
    if group == "pos":
        return mode == "full_finetune" and in_body
    layer = int(path.split(".")[1])
    sub = path.split(".")[2]
    is_adapter = sub.startswith("adapter_")
    is_ln = sub.startswith("ln_")
    if mode == "full_finetune":
        return in_body
    if mode == "adapter":
        return is_adapter or is_ln
    if mode == "layernorm_only":
        return is_ln
    top = layer >= num_layers - policy.n
    if mode == "topn_finetune":
        return top and in_body
    # topn_adapter: adapters in the top blocks, layer norms everywhere
    return (is_adapter and top) or is_ln


def _validate_policy(
    policy: TransferPolicy,
    num_layers: int,
    adapter_layers: frozenset[int],
) -> None:
    if policy.n is not None and policy.n > num_layers:
        raise PolicyError(f"top-n of {policy.n} exceeds {num_layers} layers")
    if policy.mode == "adapter" and not adapter_layers:
        raise PolicyError("adapter mode requires a model with adapters")
    if policy.mode == "topn_adapter":
        wanted = set(range(num_layers - policy.n, num_layers))
        missing = wanted - set(adapter_layers)
        if missing:
            raise PolicyError(
                f"topn_adapter({policy.n}) needs adapters in layers {sorted(missing)}"
            )


def _model_adapter_layers(model: Model) -> frozenset[int]:
    if model.adapter_config is None:
        return frozenset()
    return model.adapter_config.resolve_placement(model.config.num_layers)


def apply_policy(model: Model, policy: TransferPolicy, step: int = 0) -> None:
    """Set Parameter.trainable for the given training step.

    Frozen parameters also drop out of the autodiff graph, so their
    gradients are never computed. Idempotent; call once per step.
    """
    _validate_policy(policy, model.config.num_layers, _model_adapter_layers(model))
    for p in model.parameters():
        p.trainable = _is_trainable(p.path, policy, model.config.num_layers, step)
        p.tensor.requires_grad = p.trainable
        if p.trainable and p.tensor.grad is None:
            p.tensor.zero_grad()


@dataclass
class ParamReport:
    """Exact counts per path prefix; fraction is trainable/total exactly."""

    total: int
    trainable: int
    breakdown: list[tuple[str, int, bool]] = field(default_factory=list)

    @property
    def fraction(self) -> float:
        return self.trainable / self.total

    def to_csv(self) -> str:
        lines = ["prefix,count,trainable"]
        lines += [f"{prefix},{count},{int(flag)}" for prefix, count, flag in self.breakdown]
        return "\n".join(lines) + "\n"


def _report(
    entries: list[tuple[str, tuple[int, ...]]],
    policy: TransferPolicy,
    num_layers: int,
    adapter_layers: frozenset[int],
) -> ParamReport:
    _validate_policy(policy, num_layers, adapter_layers)
    step = policy.freeze_transformer_steps  # steady-state set for fine-tune modes
    groups: dict[str, tuple[int, bool]] = {}
    total = trainable = 0
    for path, shape in entries:
        count = math.prod(shape)
        flag = _is_trainable(path, policy, num_layers, step)
        total += count
        trainable += count * flag
        group = _path_group(path)
        prev = groups.get(group)
        groups[group] = (count + (prev[0] if prev else 0), flag)
    breakdown = [(g, c, f) for g, (c, f) in groups.items()]
    return ParamReport(total=total, trainable=trainable, breakdown=breakdown)


def count_params(model: Model, policy: TransferPolicy) -> ParamReport:
    """Counts for an instantiated model, using the post-freeze trainable set."""
    entries = [(p.path, p.tensor.shape) for p in model.parameters()]
    return _report(entries, policy, model.config.num_layers, _model_adapter_layers(model))


def count_params_config(
    mc: ModelConfig, ac: AdapterConfig | None, policy: TransferPolicy
) -> ParamReport:
    """Counts straight from config shapes; nothing is allocated."""
    layers = frozenset() if ac is None else ac.resolve_placement(mc.num_layers)
    return _report(parameter_manifest(mc, ac), policy, mc.num_layers, layers)


def trainable_entries_config(
    mc: ModelConfig, ac: AdapterConfig | None, policy: TransferPolicy
) -> list[tuple[str, tuple[int, ...]]]:
    layers = frozenset() if ac is None else ac.resolve_placement(mc.num_layers)
    _validate_policy(policy, mc.num_layers, layers)
    step = policy.freeze_transformer_steps
    return [
        (path, shape)
        for path, shape in parameter_manifest(mc, ac)
        if _is_trainable(path, policy, mc.num_layers, step)
    ]


def delta_checkpoint_size(model: Model, policy: TransferPolicy) -> int:
    """Bytes of the trainable-only checkpoint this policy would produce."""
    return delta_checkpoint_size_config(model.config, model.adapter_config, policy)


def delta_checkpoint_size_config(
    mc: ModelConfig, ac: AdapterConfig | None, policy: TransferPolicy
) -> int:
    return checkpoint.checkpoint_nbytes(trainable_entries_config(mc, ac, policy))


def full_checkpoint_size_config(mc: ModelConfig, ac: AdapterConfig | None) -> int:
    return checkpoint.checkpoint_nbytes(parameter_manifest(mc, ac))


def storage_projection(
    mc: ModelConfig, ac: AdapterConfig | None, max_tasks: int = 5
) -> list[tuple[int, int, int]]:
    """(tasks, finetune_bytes, adapter_bytes) for 1..max_tasks downstream tasks.

    Fine-tuning stores one complete model per task. The adapter flow stores
    the shared base once plus one trainable-only delta per task.
    """
    if ac is None:
        raise ConfigError("storage projection needs an adapter section")
    full_finetune_bytes = full_checkpoint_size_config(mc, None)
    base_bytes = full_checkpoint_size_config(mc, ac)
    delta_bytes = delta_checkpoint_size_config(mc, ac, TransferPolicy("adapter"))
    rows = []
    for t in range(1, max_tasks + 1):
        rows.append((t, t * full_finetune_bytes, base_bytes + t * delta_bytes))
    return rows
