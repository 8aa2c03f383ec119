"""Transformer encoder with per-block adapter slots and a linear CTC head.

Layout per block (post-LN): attention -> optional adapter -> residual ->
layer norm -> feed-forward -> optional adapter -> residual -> layer norm.
Adapters act on each sublayer's output before the residual add, so inserting
a freshly initialized adapter (zero up-projection) never changes the model's
function. The classifier maps d_model to vocab_size+1 logits with the blank
fixed at index vocab_size; log-softmax is applied by the CTC loss, not here.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import AdapterConflictError, ConfigError, SequenceTooShortError
from .tensor import Tensor

LN_EPS = 1e-5

# the two adapter slots in every block; fixed, not configurable
ADAPTER_POSITIONS = ("after_attention", "after_ffn")

FRONTENDS = ("identity", "conv")
POSITIONALS = ("sinusoidal", "learned")
NONLINEARITIES = ("gelu", "relu")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    With the identity frontend, frames are fed straight to the encoder and
    d_in must equal d_model (the frontend then owns no parameters). The conv
    frontend is a stack of strided 1-D convolutions over time followed by a
    linear projection to d_model; all of it counts as frontend parameters.
    """

    num_layers: int
    d_model: int
    num_heads: int
    d_ffn: int
    vocab_size: int  # excludes blank; classifier emits vocab_size+1 logits
    frontend: str = "identity"
    d_in: int | None = None
    conv_channels: tuple[int, ...] = ()
    conv_kernels: tuple[int, ...] = ()
    conv_strides: tuple[int, ...] = ()
    max_seq_len: int = 512
    positional: str = "sinusoidal"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"model.num_layers must be >= 1, got {self.num_layers}")
        if self.d_model < 1:
            raise ConfigError(f"model.d_model must be >= 1, got {self.d_model}")
        if self.num_heads < 1 or self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"model.num_heads must divide d_model ({self.d_model}), got {self.num_heads}"
            )
        if self.d_ffn < 1:
            raise ConfigError(f"model.d_ffn must be >= 1, got {self.d_ffn}")
        if self.vocab_size < 1:
            raise ConfigError(f"model.vocab_size must be >= 1, got {self.vocab_size}")
        if self.max_seq_len < 1:
            raise ConfigError(f"model.max_seq_len must be >= 1, got {self.max_seq_len}")
        if self.frontend not in FRONTENDS:
            raise ConfigError(f"model.frontend must be one of {FRONTENDS}, got {self.frontend!r}")
        if self.positional not in POSITIONALS:
            raise ConfigError(
                f"model.positional must be one of {POSITIONALS}, got {self.positional!r}"
            )
        if self.frontend == "conv":
            n = len(self.conv_channels)
            if n < 1 or len(self.conv_kernels) != n or len(self.conv_strides) != n:
                raise ConfigError(
                    "model.conv_channels/conv_kernels/conv_strides must be equal-length, non-empty"
                )
            if self.d_in is None or self.d_in < 1:
                raise ConfigError("model.d_in is required (>= 1) for the conv frontend")
            if any(k < 1 for k in self.conv_kernels) or any(s < 1 for s in self.conv_strides):
                raise ConfigError("model.conv_kernels and conv_strides must all be >= 1")
            if any(c < 1 for c in self.conv_channels):
                raise ConfigError("model.conv_channels must all be >= 1")
        else:
            if self.d_in is not None and self.d_in != self.d_model:
                raise ConfigError(
                    f"model.d_in must equal d_model ({self.d_model}) for the identity frontend"
                )

    @property
    def input_dim(self) -> int:
        return self.d_model if self.frontend == "identity" else self.d_in

    @property
    def blank_index(self) -> int:
        return self.vocab_size


@dataclass(frozen=True)
class AdapterConfig:
    """Bottleneck adapter hyperparameters.

    placement_layers=None means every layer. Each placed layer gets the two
    fixed slots in ADAPTER_POSITIONS.
    """

    bottleneck: int
    placement_layers: frozenset[int] | None = None
    nonlinearity: str = "gelu"

    def __post_init__(self):
        if self.bottleneck < 1:
            raise ConfigError(f"adapter.bottleneck must be >= 1, got {self.bottleneck}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(
                f"adapter.nonlinearity must be one of {NONLINEARITIES}, got {self.nonlinearity!r}"
            )
        if self.placement_layers is not None:
            object.__setattr__(self, "placement_layers", frozenset(self.placement_layers))

    def resolve_placement(self, num_layers: int) -> frozenset[int]:
        if self.placement_layers is None:
            return frozenset(range(num_layers))
        for i in self.placement_layers:
            if not 0 <= i < num_layers:
                raise ConfigError(
                    f"adapter.placement_layers entry {i} outside [0, {num_layers})"
                )
        return frozenset(self.placement_layers)


def top_n_layers(num_layers: int, n: int) -> frozenset[int]:
    """The indices of the highest n blocks."""
    if not 1 <= n <= num_layers:
        raise ConfigError(f"top-n must be in [1, {num_layers}], got {n}")
    return frozenset(range(num_layers - n, num_layers))


@dataclass
class Parameter:
    """A named weight. `trainable` is owned by the transfer policy."""

    path: str
    tensor: Tensor
    trainable: bool = True


@dataclass
class Adapter:
    """Bottleneck residual module: h + up(phi(down(h)))."""

    down_w: Tensor
    down_b: Tensor
    up_w: Tensor
    up_b: Tensor
    nonlinearity: str = "gelu"


@dataclass
class Block:
    wq: Tensor = None
    bq: Tensor = None
    wk: Tensor = None
    bk: Tensor = None
    wv: Tensor = None
    bv: Tensor = None
    wo: Tensor = None
    bo: Tensor = None
    ln_attn_g: Tensor = None
    ln_attn_b: Tensor = None
    fc1_w: Tensor = None
    fc1_b: Tensor = None
    fc2_w: Tensor = None
    fc2_b: Tensor = None
    ln_ffn_g: Tensor = None
    ln_ffn_b: Tensor = None
    adapter_attn: Adapter | None = None
    adapter_ffn: Adapter | None = None


def base_parameter_manifest(mc: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(path, shape) for every non-adapter parameter, in registry order."""
    entries: list[tuple[str, tuple[int, ...]]] = []
    if mc.frontend == "conv":
        c_in = mc.d_in
        for i, (c_out, k) in enumerate(zip(mc.conv_channels, mc.conv_kernels)):
            entries.append((f"frontend.conv{i}.weight", (k * c_in, c_out)))
            entries.append((f"frontend.conv{i}.bias", (c_out,)))
            c_in = c_out
        entries.append(("frontend.proj.weight", (c_in, mc.d_model)))
        entries.append(("frontend.proj.bias", (mc.d_model,)))
    if mc.positional == "learned":
        entries.append(("pos.embedding", (mc.max_seq_len, mc.d_model)))
    d = mc.d_model
    for layer in range(mc.num_layers):
        p = f"layer.{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            entries.append((f"{p}.attn.{name}.weight", (d, d)))
            entries.append((f"{p}.attn.{name}.bias", (d,)))
        entries.append((f"{p}.ln_attn.gamma", (d,)))
        entries.append((f"{p}.ln_attn.beta", (d,)))
        entries.append((f"{p}.ffn.fc1.weight", (d, mc.d_ffn)))
        entries.append((f"{p}.ffn.fc1.bias", (mc.d_ffn,)))
        entries.append((f"{p}.ffn.fc2.weight", (mc.d_ffn, d)))
        entries.append((f"{p}.ffn.fc2.bias", (d,)))
        entries.append((f"{p}.ln_ffn.gamma", (d,)))
        entries.append((f"{p}.ln_ffn.beta", (d,)))
    entries.append(("classifier.weight", (d, mc.vocab_size + 1)))
    entries.append(("classifier.bias", (mc.vocab_size + 1,)))
    return entries


def adapter_parameter_manifest(
    mc: ModelConfig, ac: AdapterConfig
) -> list[tuple[str, tuple[int, ...]]]:
    """(path, shape) for every adapter parameter, in insertion order."""
    entries: list[tuple[str, tuple[int, ...]]] = []
    d, b = mc.d_model, ac.bottleneck
    for layer in sorted(ac.resolve_placement(mc.num_layers)):
        for slot in ("adapter_attn", "adapter_ffn"):
            p = f"layer.{layer}.{slot}"
            entries.append((f"{p}.down.weight", (d, b)))
            entries.append((f"{p}.down.bias", (b,)))
            entries.append((f"{p}.up.weight", (b, d)))
            entries.append((f"{p}.up.bias", (d,)))
    return entries


def parameter_manifest(
    mc: ModelConfig, ac: AdapterConfig | None
) -> list[tuple[str, tuple[int, ...]]]:
    entries = base_parameter_manifest(mc)
    if ac is not None:
        entries += adapter_parameter_manifest(mc, ac)
    return entries


def describe_architecture(mc: ModelConfig, ac: AdapterConfig | None) -> str:
    """Canonical one-line-per-field text used for checkpoint digests."""
    lines = [
        f"model.num_layers={mc.num_layers}",
        f"model.d_model={mc.d_model}",
        f"model.num_heads={mc.num_heads}",
        f"model.d_ffn={mc.d_ffn}",
        f"model.vocab_size={mc.vocab_size}",
        f"model.frontend={mc.frontend}",
        f"model.d_in={mc.input_dim}",
        f"model.conv_channels={','.join(map(str, mc.conv_channels))}",
        f"model.conv_kernels={','.join(map(str, mc.conv_kernels))}",
        f"model.conv_strides={','.join(map(str, mc.conv_strides))}",
        f"model.max_seq_len={mc.max_seq_len}",
        f"model.positional={mc.positional}",
    ]
    if ac is not None:
        placement = sorted(ac.placement_layers) if ac.placement_layers is not None else "all"
        lines += [
            f"adapter.bottleneck={ac.bottleneck}",
            f"adapter.placement_layers={placement}",
            f"adapter.nonlinearity={ac.nonlinearity}",
        ]
    return "\n".join(lines) + "\n"


def architecture_digest(mc: ModelConfig, ac: AdapterConfig | None) -> str:
    return hashlib.sha256(describe_architecture(mc, ac).encode()).hexdigest()


def sinusoidal_table(max_len: int, d_model: int) -> np.ndarray:
    """pe[pos, 2i] = sin(pos / 10000^(2i/d)), pe[pos, 2i+1] = cos(same)."""
    pe = np.zeros((max_len, d_model))
    pos = np.arange(max_len)[:, None].astype(np.float64)
    i = np.arange(0, d_model, 2).astype(np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def _init_weight(rng: np.random.Generator, path: str, shape: tuple[int, ...]) -> np.ndarray:
    if path == "pos.embedding":
        return rng.normal(0.0, 0.02, size=shape)
    # affine weights (in, out): scale by fan-in for desk-sized stability
    return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)


class Model:
    """Parameter registry plus the forward graph builder.

    Single-writer: one training loop mutates parameters; concurrent reads of
    a frozen model are safe. Parameters live in `params` keyed by path, in a
    deterministic order (base weights first, adapters in insertion order).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.adapter_config: AdapterConfig | None = None
        self.params: dict[str, Parameter] = {}
        self.blocks: list[Block] = [Block() for _ in range(config.num_layers)]
        self._pos_table = (
            sinusoidal_table(config.max_seq_len, config.d_model)
            if config.positional == "sinusoidal"
            else None
        )

    # -- registry ---------------------------------------------------------

    def add_param(self, path: str, data: np.ndarray) -> Parameter:
        if path in self.params:
            raise ValueError(f"duplicate parameter path {path!r}")
        p = Parameter(path, Tensor(data, requires_grad=True))
        self.params[path] = p
        return p

    def param(self, path: str) -> Parameter:
        return self.params[path]

    def parameters(self):
        return self.params.values()

    def total_param_count(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            if p.tensor.grad is not None:
                p.tensor.grad.fill(0.0)

    def digest(self) -> str:
        return architecture_digest(self.config, self.adapter_config)

    # -- forward ----------------------------------------------------------

    def frontend_output_length(self, T: int) -> int:
        if self.config.frontend == "identity":
            return T
        t = T
        for k, s in zip(self.config.conv_kernels, self.config.conv_strides):
            t = (t - k) // s + 1
        return t

    def forward(self, frames) -> Tensor:
        """frames (T, d_in) -> logits (T', vocab_size+1)."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        mc = self.config
        if x.data.ndim != 2 or x.shape[1] != mc.input_dim:
            raise ValueError(
                f"frames must be (T, {mc.input_dim}), got shape {x.shape}"
            )
        T = x.shape[0]
        if T < 1:
            raise SequenceTooShortError("input has no frames")
        if T > mc.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {mc.max_seq_len}")

        if mc.frontend == "conv":
            if self.frontend_output_length(T) < 1:
                raise SequenceTooShortError(
                    f"{T} frames shrink below 1 after the conv frontend"
                )
            for i, (k, s) in enumerate(zip(mc.conv_kernels, mc.conv_strides)):
                w = self.params[f"frontend.conv{i}.weight"].tensor
                b = self.params[f"frontend.conv{i}.bias"].tensor
                x = tn.gelu(tn.affine(tn.unfold_time(x, k, s), w, b))
            x = tn.affine(
                x,
                self.params["frontend.proj.weight"].tensor,
                self.params["frontend.proj.bias"].tensor,
            )

        t_out = x.shape[0]
        if self._pos_table is not None:
            x = tn.add(x, Tensor(self._pos_table[:t_out]))
        else:
            x = tn.add(x, tn.slice_rows(self.params["pos.embedding"].tensor, 0, t_out))

        for block in self.blocks:
            x = self._block_forward(block, x)

        return tn.affine(
            x,
            self.params["classifier.weight"].tensor,
            self.params["classifier.bias"].tensor,
        )

    def _attention(self, blk: Block, x: Tensor) -> Tensor:
        q = tn.affine(x, blk.wq, blk.bq)
        k = tn.affine(x, blk.wk, blk.bk)
        v = tn.affine(x, blk.wv, blk.bv)
        ctx = tn.multi_head_attend(q, k, v, self.config.num_heads)
        return tn.affine(ctx, blk.wo, blk.bo)

    def _block_forward(self, blk: Block, x: Tensor) -> Tensor:
        a = self._attention(blk, x)
        if blk.adapter_attn is not None:
            a = adapter_forward(blk.adapter_attn, a)
        x1 = tn.layer_norm(tn.add(x, a), blk.ln_attn_g, blk.ln_attn_b, LN_EPS)
        f = tn.affine(tn.gelu(tn.affine(x1, blk.fc1_w, blk.fc1_b)), blk.fc2_w, blk.fc2_b)
        if blk.adapter_ffn is not None:
            f = adapter_forward(blk.adapter_ffn, f)
        return tn.layer_norm(tn.add(x1, f), blk.ln_ffn_g, blk.ln_ffn_b, LN_EPS)


def adapter_forward(adapter: Adapter, h: Tensor) -> Tensor:
    """h + up(phi(down(h))); the skip connection is structural."""
    if h.data.ndim != 2 or h.shape[1] != adapter.down_w.shape[0]:
        raise ValueError(
            f"adapter expects (T, {adapter.down_w.shape[0]}) input, got shape {h.shape}"
        )
    phi = tn.gelu if adapter.nonlinearity == "gelu" else tn.relu
    branch = tn.affine(phi(tn.affine(h, adapter.down_w, adapter.down_b)), adapter.up_w, adapter.up_b)
    return tn.add(h, branch)


_BLOCK_ATTRS = {
    "attn.wq.weight": "wq", "attn.wq.bias": "bq",
    "attn.wk.weight": "wk", "attn.wk.bias": "bk",
    "attn.wv.weight": "wv", "attn.wv.bias": "bv",
    "attn.wo.weight": "wo", "attn.wo.bias": "bo",
    "ln_attn.gamma": "ln_attn_g", "ln_attn.beta": "ln_attn_b",
    "ffn.fc1.weight": "fc1_w", "ffn.fc1.bias": "fc1_b",
    "ffn.fc2.weight": "fc2_w", "ffn.fc2.bias": "fc2_b",
    "ln_ffn.gamma": "ln_ffn_g", "ln_ffn.beta": "ln_ffn_b",
}


def build_model(mc: ModelConfig, ac: AdapterConfig | None = None, seed: int = 0) -> Model:
    """Deterministically initialize a model; same seed, same bits.

    Base weights draw from one seeded stream, adapters (if any) from a
    second, so a model built with adapters shares its base weights bitwise
    with the adapter-free model of the same seed.
    """
    model = Model(mc)
    rng = np.random.default_rng([seed, 0])
    for path, shape in base_parameter_manifest(mc):
        if path.endswith(".weight") or path == "pos.embedding":
            data = _init_weight(rng, path, shape)
        elif path.endswith(".gamma"):
            data = np.ones(shape)
        else:  # biases and ln betas start at zero
            data = np.zeros(shape)
        param = model.add_param(path, data)
        leaf = path.split(".", 2)[-1] if path.startswith("layer.") else None
        if leaf is not None:
            layer = int(path.split(".")[1])
            setattr(model.blocks[layer], _BLOCK_ATTRS[leaf], param.tensor)
    if ac is not None:
        insert_adapters(model, ac, seed)
    return model


def insert_adapters(model: Model, ac: AdapterConfig, seed: int = 0) -> Model:
    """Add adapters at the configured layers; function-preserving at init.

    Up-projection weights and biases start at exactly zero and down
    projections at N(0, 1e-3), so the adapted model computes bitwise the
    same outputs as before insertion. Existing parameters are untouched.
    """
    mc = model.config
    placement = ac.resolve_placement(mc.num_layers)
    if model.adapter_config is not None:
        prev = model.adapter_config
        if prev.bottleneck != ac.bottleneck or prev.nonlinearity != ac.nonlinearity:
            raise AdapterConflictError(
                "cannot mix adapter bottlenecks or nonlinearities in one model"
            )
        overlap = prev.resolve_placement(mc.num_layers) & placement
        if overlap:
            raise AdapterConflictError(
                f"adapter slots already occupied at layers {sorted(overlap)}"
            )
    for path, _ in adapter_parameter_manifest(mc, ac):
        if path in model.params:
            raise AdapterConflictError(f"adapter slot already occupied: {path}")

    rng = np.random.default_rng([seed, 1])
    d, b = mc.d_model, ac.bottleneck
    for layer in sorted(placement):
        for slot in ("adapter_attn", "adapter_ffn"):
            prefix = f"layer.{layer}.{slot}"
            down_w = model.add_param(f"{prefix}.down.weight", rng.normal(0.0, 1e-3, (d, b)))
            down_b = model.add_param(f"{prefix}.down.bias", np.zeros(b))
            up_w = model.add_param(f"{prefix}.up.weight", np.zeros((b, d)))
            up_b = model.add_param(f"{prefix}.up.bias", np.zeros(d))
            adapter = Adapter(
                down_w.tensor, down_b.tensor, up_w.tensor, up_b.tensor, ac.nonlinearity
            )
            setattr(model.blocks[layer], slot, adapter)

    if model.adapter_config is None:
        model.adapter_config = AdapterConfig(ac.bottleneck, placement, ac.nonlinearity)
    else:
        merged = model.adapter_config.resolve_placement(mc.num_layers) | placement
        model.adapter_config = AdapterConfig(ac.bottleneck, merged, ac.nonlinearity)
    return model
