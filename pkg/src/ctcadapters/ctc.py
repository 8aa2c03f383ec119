"""CTC loss (log-space forward-backward), greedy decoding, and error-rate metrics.

The loss sums over every monotonic frame-to-label alignment of the extended
label sequence [blank, t1, blank, t2, ..., tL, blank]. Everything runs in log
space with log-sum-exp; probabilities underflow around T=40 otherwise.

Here "words" are vocabulary tokens: the synthetic task treats one token as
one word, so `wer` is a token error rate rather than the word-level rate a
real speech setup would report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleAlignmentError, OracleSizeError
from .tensor import Tensor, _accum, _from_op

NEG_INF = -np.inf

# exp(log-prob rows) must sum to 1 within this tolerance
ROW_SUM_TOL = 1e-9


@dataclass
class DecodeResult:
    """Collapsed token sequence plus the raw per-frame argmax trace."""

    tokens: list[int]
    frame_trace: list[int]


def extended_labels(target: list[int], blank: int) -> np.ndarray:
    """Interleave blanks: [a, b] -> [blank, a, blank, b, blank]."""
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target: list[int]) -> int:
    """Fewest frames that can emit the target: length plus one per adjacent repeat."""
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def _validate_target(target: list[int], vocab_size: int) -> None:
    if len(target) < 1:
        raise ValueError("CTC target must contain at least one label")
    for tok in target:
        if not 0 <= tok < vocab_size:
            raise ValueError(f"label {tok} outside vocabulary [0, {vocab_size})")


def _validate_rows(log_probs: np.ndarray) -> None:
    m = log_probs.max(axis=1)
    if not np.all(np.isfinite(m)):
        raise ValueError("log-prob rows must exponentiate to 1 (found an all--inf or NaN row)")
    log_sums = m + np.log(np.exp(log_probs - m[:, None]).sum(axis=1))
    deviation = np.abs(np.expm1(log_sums))
    if not np.all(deviation <= ROW_SUM_TOL):
        raise ValueError(
            f"log-prob rows must exponentiate to 1 (max deviation {float(deviation.max()):.3e})"
        )


def _forward_alphas(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """alpha[t, s]: log-mass of paths over frames 0..t ending in extended state s."""
    T = log_probs.shape[0]
    S = ext.shape[0]
    emit = log_probs[:, ext]  # (T, S)

    # state s may also be entered from s-2 when it is a label differing from
    # the label two slots back (skipping the blank between distinct labels)
    can_skip = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip[2:] = (ext[2:] != ext[0]) & (ext[2:] != ext[:-2])

    alphas = np.full((T, S), NEG_INF)
    alphas[0, 0] = emit[0, 0]
    if S > 1:
        alphas[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alphas[t - 1]
        stay = prev
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(S, NEG_INF)
        skip[2:] = prev[:-2]
        skip[~can_skip] = NEG_INF
        alphas[t] = np.logaddexp(np.logaddexp(stay, step), skip) + emit[t]
    return alphas


def _backward_betas(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """beta[t, s]: log-mass of paths over frames t+1..T given state s at frame t."""
    T = log_probs.shape[0]
    S = ext.shape[0]
    emit = log_probs[:, ext]

    # skipping from s lands on s+2; allowed under the same rule as the
    # forward skip into s+2
    can_skip_from = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip_from[:-2] = (ext[2:] != ext[0]) & (ext[2:] != ext[:-2])

    betas = np.full((T, S), NEG_INF)
    betas[T - 1, S - 1] = 0.0
    if S > 1:
        betas[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = betas[t + 1] + emit[t + 1]
        stay = nxt
        step = np.full(S, NEG_INF)
        step[:-1] = nxt[1:]
        skip = np.full(S, NEG_INF)
        skip[:-2] = nxt[2:]
        skip[~can_skip_from] = NEG_INF
        betas[t] = np.logaddexp(np.logaddexp(stay, step), skip)
    return betas


def ctc_loss(log_probs: Tensor, target: list[int]) -> Tensor:
    """-log P(target | log_probs) summed over all valid alignments.

    ``log_probs`` is (T, V+1) with the blank fixed at index V; rows must
    exponentiate to 1 within 1e-9. The gradient to ``log_probs`` is the
    negative state posterior from the backward recursion.
    """
    lp = log_probs.data
    if lp.ndim != 2:
        raise ValueError(f"log_probs must be (T, V+1), got shape {log_probs.shape}")
    T, width = lp.shape
    vocab_size = width - 1
    blank = vocab_size
    _validate_target(target, vocab_size)
    _validate_rows(lp)
    need = min_frames(target)
    if T < need:
        raise InfeasibleAlignmentError(
            f"target of length {len(target)} needs at least {need} frames, got {T}"
        )

    ext = extended_labels(target, blank)
    S = ext.shape[0]
    alphas = _forward_alphas(lp, ext)
    tail = alphas[T - 1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alphas[T - 1, S - 2])
    log_p = float(tail)
    loss_val = -log_p

    def bwd(g):
        if not log_probs.requires_grad:
            return
        betas = _backward_betas(lp, ext)
        posterior = np.exp(alphas + betas - log_p)  # (T, S), rows sum to 1
        gamma = np.zeros_like(lp)
        for s in range(S):
            gamma[:, ext[s]] += posterior[:, s]
        _accum(log_probs, float(g) * (-gamma))

    return _from_op(np.asarray(loss_val), (log_probs,), bwd)


def _collapse_matrix(paths: np.ndarray, blank: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapse each row (drop adjacent repeats, then blanks); pad with -1.

    Returns (collapsed (N, T) padded with -1, lengths (N,)).
    """
    n, T = paths.shape
    keep = np.ones((n, T), dtype=bool)
    keep[:, 1:] = paths[:, 1:] != paths[:, :-1]
    keep &= paths != blank
    lengths = keep.sum(axis=1)
    out = np.full((n, T), -1, dtype=paths.dtype)
    pos = keep.cumsum(axis=1) - 1
    rows, cols = np.nonzero(keep)
    out[rows, pos[rows, cols]] = paths[rows, cols]
    return out, lengths


def ctc_loss_bruteforce(log_probs: np.ndarray, target: list[int]) -> float:
    """Exact reference: enumerate every length-T path and sum those that collapse
    to the target. Capped at (V+1)^T <= 10^6 paths."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    T, width = lp.shape
    vocab_size = width - 1
    blank = vocab_size
    _validate_target(target, vocab_size)
    if width**T > 10**6:
        raise OracleSizeError(f"(V+1)^T = {width}^{T} exceeds the 10^6 path cap")

    grids = np.meshgrid(*([np.arange(width)] * T), indexing="ij")
    paths = np.stack([g.reshape(-1) for g in grids], axis=1)  # (width^T, T)
    scores = lp[np.arange(T)[None, :], paths].sum(axis=1)

    collapsed, lengths = _collapse_matrix(paths, blank)
    tgt = np.asarray(target)
    match = lengths == len(target)
    if len(target) <= T:
        match &= (collapsed[:, : len(target)] == tgt).all(axis=1)
    else:
        match[:] = False
    if not match.any():
        raise InfeasibleAlignmentError(
            f"no length-{T} path collapses to the {len(target)}-label target"
        )
    matched = scores[match]
    m = matched.max()
    return float(-(m + np.log(np.exp(matched - m).sum())))


def collapse(frame_labels: list[int], blank: int) -> list[int]:
    """Drop adjacent repeats, then blanks."""
    out: list[int] = []
    prev = None
    for lab in frame_labels:
        if lab != prev and lab != blank:
            out.append(lab)
        prev = lab
    return out


def greedy_decode(logits: Tensor | np.ndarray) -> DecodeResult:
    """Per-frame argmax (ties -> lowest index), then collapse repeats and blanks."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 2:
        raise ValueError(f"logits must be (T, V+1), got shape {arr.shape}")
    blank = arr.shape[1] - 1
    trace = [int(i) for i in arr.argmax(axis=1)]
    return DecodeResult(tokens=collapse(trace, blank), frame_trace=trace)


def edit_distance(reference: list[int], hypothesis: list[int]) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, start=1):
        cur = [i] + [0] * len(hypothesis)
        for j, h in enumerate(hypothesis, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[len(hypothesis)]


def wer(reference: list[int], hypothesis: list[int]) -> float:
    """Edit distance over reference length; may exceed 1 on long hypotheses."""
    if len(reference) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(reference, hypothesis) / len(reference)
