"""Experiment configuration files.

INI-style text with up to five sections: [model], [adapter], [transfer],
[train], [data]. Every key is typed and documented in KNOWN_KEYS; unknown
sections or keys are rejected by name. The canonical rendering (defaults
materialized, fixed key order) feeds the config digest that stamps every
emitted CSV.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass

from .errors import ConfigError
from .model import AdapterConfig, ModelConfig, top_n_layers
from .synthdata import SynthSpec
from .train import Schedule, TrainConfig
from .transfer import TransferPolicy


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _str(v: str) -> str:
    return v.strip()


def _int_list(v: str) -> tuple[int, ...]:
    v = v.strip()
    if not v:
        return ()
    return tuple(int(part) for part in v.split(","))


# section -> key -> (parser, default); None default means required when the
# section is present (or when a command needs the section)
KNOWN_KEYS: dict[str, dict[str, tuple]] = {
    "model": {
        "num_layers": (_int, None),
        "d_model": (_int, None),
        "num_heads": (_int, None),
        "d_ffn": (_int, None),
        "vocab_size": (_int, None),
        "frontend": (_str, "identity"),
        "d_in": (_int, -1),  # -1: follow d_model (identity frontend)
        "conv_channels": (_int_list, ()),
        "conv_kernels": (_int_list, ()),
        "conv_strides": (_int_list, ()),
        "max_seq_len": (_int, 512),
        "positional": (_str, "sinusoidal"),
    },
    "adapter": {
        "bottleneck": (_int, None),
        "placement": (_str, "all"),  # all | top:N | comma-separated layer indices
        "nonlinearity": (_str, "gelu"),
    },
    "transfer": {
        "mode": (_str, None),
        "topn": (_int, 0),
        "freeze_transformer_steps": (_int, 0),
    },
    "train": {
        "schedule": (_str, "bi_stage"),
        "peak_lr": (_float, None),
        "total_steps": (_int, None),
        "warmup_frac": (_float, 0.1),
        "hold_frac": (_float, 0.4),
        "final_scale": (_float, 0.05),
        "batch_size": (_int, 8),
        "seed": (_int, 0),
        "beta1": (_float, 0.9),
        "beta2": (_float, 0.98),
        "adam_eps": (_float, 1e-8),
        "grad_clip": (_float, 0.0),  # 0 disables clipping
        "eval_fraction": (_float, 0.1),
        "eval_every": (_int, 0),
        "ablate_finetune_steps": (_int, 0),  # 0: 2 * total_steps
        "ablate_finetune_peak_lr": (_float, 0.0),  # 0: peak_lr / 10
    },
    "data": {
        "vocab_size": (_int, None),
        "d_in": (_int, None),
        "frames_per_token_min": (_int, 1),
        "frames_per_token_max": (_int, 3),
        "noise_sigma": (_float, 0.1),
        "utterance_len_min": (_int, 2),
        "utterance_len_max": (_int, 5),
        "num_utterances": (_int, None),
        "seed": (_int, 0),
        "language_tag": (_str, "a"),
        "language_role": (_str, "single"),
    },
}

SECTION_ORDER = ("model", "adapter", "transfer", "train", "data")


@dataclass
class ExperimentConfig:
    """Parsed, validated sections; absent sections stay None."""

    values: dict[str, dict[str, object]]

    def has(self, section: str) -> bool:
        return section in self.values

    def require(self, *sections: str) -> None:
        for s in sections:
            if s not in self.values:
                raise ConfigError(f"config is missing the [{s}] section")

    # -- section constructors ------------------------------------------------

    def model_config(self) -> ModelConfig:
        self.require("model")
        v = self.values["model"]
        d_in = None if v["d_in"] == -1 else v["d_in"]
        return ModelConfig(
            num_layers=v["num_layers"],
            d_model=v["d_model"],
            num_heads=v["num_heads"],
            d_ffn=v["d_ffn"],
            vocab_size=v["vocab_size"],
            frontend=v["frontend"],
            d_in=d_in,
            conv_channels=v["conv_channels"],
            conv_kernels=v["conv_kernels"],
            conv_strides=v["conv_strides"],
            max_seq_len=v["max_seq_len"],
            positional=v["positional"],
        )

    def adapter_config(self, num_layers: int | None = None) -> AdapterConfig | None:
        if "adapter" not in self.values:
            return None
        v = self.values["adapter"]
        placement = v["placement"]
        if placement == "all":
            layers = None
        elif placement.startswith("top:"):
            if num_layers is None:
                num_layers = self.model_config().num_layers
            layers = top_n_layers(num_layers, int(placement.split(":", 1)[1]))
        else:
            layers = frozenset(_int_list(placement))
        return AdapterConfig(
            bottleneck=v["bottleneck"], placement_layers=layers, nonlinearity=v["nonlinearity"]
        )

    def transfer_policy(self) -> TransferPolicy:
        self.require("transfer")
        v = self.values["transfer"]
        mode = v["mode"]
        n = v["topn"] if mode.startswith("topn") else None
        if mode.startswith("topn") and v["topn"] < 1:
            raise ConfigError(f"transfer.topn is required for mode {mode}")
        return TransferPolicy(
            mode=mode, n=n, freeze_transformer_steps=v["freeze_transformer_steps"]
        )

    def schedule(self) -> Schedule:
        self.require("train")
        v = self.values["train"]
        return Schedule(
            kind=v["schedule"],
            peak_lr=v["peak_lr"],
            total_steps=v["total_steps"],
            warmup_frac=v["warmup_frac"],
            hold_frac=v["hold_frac"],
            final_scale=v["final_scale"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values["train"]
        clip = v["grad_clip"] if v["grad_clip"] > 0 else None
        return TrainConfig(
            policy=self.transfer_policy(),
            schedule=self.schedule(),
            batch_size=v["batch_size"],
            seed=v["seed"],
            beta1=v["beta1"],
            beta2=v["beta2"],
            adam_eps=v["adam_eps"],
            grad_clip=clip,
        )

    def synth_spec(self) -> SynthSpec:
        self.require("data")
        v = self.values["data"]
        return SynthSpec(
            vocab_size=v["vocab_size"],
            d_in=v["d_in"],
            frames_per_token_min=v["frames_per_token_min"],
            frames_per_token_max=v["frames_per_token_max"],
            noise_sigma=v["noise_sigma"],
            utterance_len_min=v["utterance_len_min"],
            utterance_len_max=v["utterance_len_max"],
            num_utterances=v["num_utterances"],
            seed=v["seed"],
            language_tag=v["language_tag"],
        )

    def language_role(self) -> str:
        if "data" not in self.values:
            return "single"
        return self.values["data"]["language_role"]

    # -- canonical form -------------------------------------------------------

    def canonical_text(self) -> str:
        lines = []
        for section in SECTION_ORDER:
            if section not in self.values:
                continue
            lines.append(f"[{section}]")
            for key in KNOWN_KEYS[section]:
                val = self.values[section][key]
                if isinstance(val, tuple):
                    rendered = ",".join(str(x) for x in val)
                elif isinstance(val, float):
                    rendered = repr(val)
                else:
                    rendered = str(val)
                lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def override_seed(self, seed: int) -> None:
        """--seed: replaces the run seed ([train]) and the data seed ([data])."""
        if "train" in self.values:
            self.values["train"]["seed"] = seed
        if "data" in self.values:
            self.values["data"]["seed"] = seed


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config is not valid INI: {exc}") from exc
    values: dict[str, dict[str, object]] = {}
    for section in cp.sections():
        if section not in KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        known = KNOWN_KEYS[section]
        parsed: dict[str, object] = {}
        for key in cp.options(section):
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            parser, _ = known[key]
            raw = cp.get(section, key)
            try:
                parsed[key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"config key {section}.{key}: cannot parse {raw!r}") from exc
        for key, (parser, default) in known.items():
            if key in parsed:
                continue
            if default is None:
                raise ConfigError(f"config key {section}.{key} is required")
            parsed[key] = default
        values[section] = parsed
    if not values:
        raise ConfigError("config file has no sections")
    return ExperimentConfig(values=values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
