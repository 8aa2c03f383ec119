"""Seeded synthetic sequence-recognition corpora.

Each language draws one unit-norm prototype vector per vocabulary token;
an utterance emits a variable number of noisy copies of each token's
prototype, so the recognizer has to learn alignment, not just framewise
classification. `make_language_pair` derives a second language with fresh
prototypes and a permuted label alphabet from the same seed, standing in
for the transfer-to-a-new-language scenario.

Dataset file layout (little-endian): magic b"CASD1", uint32 JSON header
length, the spec echo as JSON, uint32 utterance count, then per utterance
uint32 T, uint32 d_in, float64 frames, uint32 label count, int32 labels.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ctc import min_frames
from .errors import ArtifactMismatchError, ConfigError

MAGIC = b"CASD1"

# sub-stream tags so prototypes, permutations, and utterances never share draws
_PROTO_A, _PROTO_B, _PERM_B, _UTT_A, _UTT_B = 10, 11, 12, 20, 21


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int
    d_in: int
    frames_per_token_min: int = 1
    frames_per_token_max: int = 3
    noise_sigma: float = 0.1
    utterance_len_min: int = 2
    utterance_len_max: int = 5
    num_utterances: int = 100
    seed: int = 0
    language_tag: str = "a"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"data.vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_in < 1:
            raise ConfigError(f"data.d_in must be >= 1, got {self.d_in}")
        if self.frames_per_token_min < 1:
            raise ConfigError(
                f"data.frames_per_token_min must be >= 1, got {self.frames_per_token_min}"
            )
        if self.frames_per_token_max < self.frames_per_token_min:
            raise ConfigError("data.frames_per_token_max must be >= frames_per_token_min")
        if self.noise_sigma < 0:
            raise ConfigError(f"data.noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.utterance_len_min < 1:
            raise ConfigError(f"data.utterance_len_min must be >= 1, got {self.utterance_len_min}")
        if self.utterance_len_max < self.utterance_len_min:
            raise ConfigError("data.utterance_len_max must be >= utterance_len_min")
        if self.num_utterances < 0:
            raise ConfigError(f"data.num_utterances must be >= 0, got {self.num_utterances}")


@dataclass
class Utterance:
    frames: np.ndarray  # (T, d_in)
    labels: list[int]
    true_length: int


@dataclass
class Dataset:
    spec: SynthSpec
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]


def token_prototypes(spec: SynthSpec, stream: int = _PROTO_A) -> np.ndarray:
    """Unit-norm prototype per token, drawn once per language."""
    rng = np.random.default_rng([spec.seed, stream])
    protos = rng.standard_normal((spec.vocab_size, spec.d_in))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _sample_utterance(
    spec: SynthSpec, protos: np.ndarray, rng: np.random.Generator, label_perm=None
) -> Utterance:
    length = int(rng.integers(spec.utterance_len_min, spec.utterance_len_max + 1))
    tokens = rng.integers(0, spec.vocab_size, size=length)
    repeats = rng.integers(
        spec.frames_per_token_min, spec.frames_per_token_max + 1, size=length
    )
    labels = [int(t) for t in (tokens if label_perm is None else label_perm[tokens])]
    # keep every utterance CTC-feasible: repeated labels need a spare frame
    # for the separating blank, so pad repeats until T >= min_frames(labels)
    deficit = min_frames(labels) - int(repeats.sum())
    if deficit > 0:
        for i in range(1, length):
            if deficit == 0:
                break
            if labels[i] == labels[i - 1]:
                repeats[i] += 1
                deficit -= 1
    frames = np.repeat(protos[tokens], repeats, axis=0)
    if spec.noise_sigma > 0:
        frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
    return Utterance(frames=frames, labels=labels, true_length=frames.shape[0])


def _generate(spec: SynthSpec, proto_stream: int, utt_stream: int, label_perm=None) -> Dataset:
    protos = token_prototypes(spec, proto_stream)
    rng = np.random.default_rng([spec.seed, utt_stream])
    utts = [
        _sample_utterance(spec, protos, rng, label_perm) for _ in range(spec.num_utterances)
    ]
    return Dataset(spec=spec, utterances=utts)


def generate(spec: SynthSpec) -> Dataset:
    """One language, fully reproducible from the spec."""
    return _generate(spec, _PROTO_A, _UTT_A)


def make_language_pair(
    spec: SynthSpec, num_utterances_b: int | None = None
) -> tuple[Dataset, Dataset]:
    """Language A plus a second language B derived from the same seed.

    B uses freshly drawn prototypes and a permuted label alphabet, so a
    model trained on A transfers to B only by adapting.
    """
    a = _generate(spec, _PROTO_A, _UTT_A)
    perm = np.random.default_rng([spec.seed, _PERM_B]).permutation(spec.vocab_size)
    spec_b = dataclasses.replace(
        spec,
        language_tag=spec.language_tag + "-b",
        num_utterances=num_utterances_b if num_utterances_b is not None else spec.num_utterances,
    )
    b = _generate(spec_b, _PROTO_B, _UTT_B, label_perm=perm)
    return a, b


def generate_role(spec: SynthSpec, role: str) -> Dataset:
    """single/pair_a generate language A; pair_b generates the B side."""
    if role in ("single", "pair_a"):
        return generate(spec)
    if role == "pair_b":
        perm = np.random.default_rng([spec.seed, _PERM_B]).permutation(spec.vocab_size)
        return _generate(spec, _PROTO_B, _UTT_B, label_perm=perm)
    raise ConfigError(f"data.language_role must be single, pair_a, or pair_b, got {role!r}")


def split_dataset(ds: Dataset, eval_fraction: float) -> tuple[list[Utterance], list[Utterance]]:
    """Deterministic train/eval split keyed on the dataset's own seed."""
    if not 0 <= eval_fraction < 1:
        raise ConfigError(f"train.eval_fraction must be in [0,1), got {eval_fraction}")
    n = len(ds.utterances)
    n_eval = int(round(n * eval_fraction))
    order = np.random.default_rng([ds.spec.seed, 3]).permutation(n)
    eval_idx = set(int(i) for i in order[:n_eval])
    train = [u for i, u in enumerate(ds.utterances) if i not in eval_idx]
    held = [u for i, u in enumerate(ds.utterances) if i in eval_idx]
    return train, held


def save_dataset(ds: Dataset, path: str | Path) -> None:
    header = json.dumps(asdict(ds.spec), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(ds.utterances)))
        for utt in ds.utterances:
            T, d_in = utt.frames.shape
            fh.write(struct.pack("<II", T, d_in))
            fh.write(np.ascontiguousarray(utt.frames).astype("<f8").tobytes())
            fh.write(struct.pack("<I", len(utt.labels)))
            fh.write(np.asarray(utt.labels, dtype="<i4").tobytes())


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ArtifactMismatchError(f"{path}: not a dataset file (bad magic)")
    offset = len(MAGIC)
    (header_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    spec = SynthSpec(**json.loads(blob[offset : offset + header_len].decode()))
    offset += header_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    utts = []
    for _ in range(count):
        T, d_in = struct.unpack_from("<II", blob, offset)
        offset += 8
        frames = np.frombuffer(blob, dtype="<f8", count=T * d_in, offset=offset)
        offset += 8 * T * d_in
        (n_labels,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        labels = np.frombuffer(blob, dtype="<i4", count=n_labels, offset=offset)
        offset += 4 * n_labels
        utts.append(
            Utterance(
                frames=frames.reshape(T, d_in).astype(np.float64),
                labels=[int(l) for l in labels],
                true_length=T,
            )
        )
    return Dataset(spec=spec, utterances=utts)
