"""Connectionist temporal classification over codebook posteriors.

Grids are (T, P + 1) with the blank symbol in the last column.  All
recursions run in log space; ``numerics.LOG_ZERO`` stands in for log(0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from . import numerics as nx
from .codebook import NO_PHONEME, Codebook

GROUND_TRUTH = "ground-truth"
PSEUDO = "pseudo"


class UnalignableError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSequence:
    phonemes: tuple[int, ...]
    source: str = GROUND_TRUTH

    def __post_init__(self):
        object.__setattr__(self, "phonemes", tuple(int(p) for p in self.phonemes))
        if self.source not in (GROUND_TRUTH, PSEUDO):
            raise ValueError(f"unknown label source {self.source!r}")

    def __len__(self) -> int:
        return len(self.phonemes)

    def __iter__(self):
        return iter(self.phonemes)


@dataclass(frozen=True)
class FramePosteriorGrid:
    """Per-frame distribution over phonemes plus blank (last column)."""

    log_probs: np.ndarray

    @classmethod
    def from_probs(cls, probs) -> "FramePosteriorGrid":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(np.where(probs > 0.0, np.log(np.maximum(probs, 1e-300)), nx.LOG_ZERO))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def blank(self) -> int:
        return self.log_probs.shape[1] - 1

    @property
    def frames(self) -> int:
        return self.log_probs.shape[0]


def phoneme_groups(book: Codebook, n_phonemes: int) -> np.ndarray:
    """Output column for each entry: its phoneme, or blank when unassigned."""
    groups = np.where(book.phoneme_of == NO_PHONEME, n_phonemes, book.phoneme_of)
    if (groups > n_phonemes).any():
        raise ValueError("codebook assigns a phoneme outside the alphabet")
    return groups


def project_to_phonemes(log_posteriors, book: Codebook, n_phonemes: int, groups=None) -> FramePosteriorGrid:
    """Sum entry posteriors by assigned phoneme; unassigned mass goes to blank.

    ``log_posteriors`` is (T, N) as returned by ``codebook.posterior_matrix``.
    ``groups`` overrides the entry-to-column map (e.g. a provisional one).
    """
    if groups is None:
        groups = phoneme_groups(book, n_phonemes)
    out = nx.group_logsumexp(np.atleast_2d(log_posteriors), groups, n_phonemes + 1)
    return FramePosteriorGrid(out.data)


def project_tensor(log_post: nx.Tensor, groups, n_phonemes: int) -> nx.Tensor:
    return nx.group_logsumexp(log_post, groups, n_phonemes + 1)


def _extend(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = np.asarray(target, dtype=np.int64)
    return ext


def min_frames(target: Sequence[int]) -> int:
    """Shortest frame count that can emit ``target`` (a blank between repeats)."""
    t = list(target)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


@numba.njit(cache=True)
def _lae(a, b):
    if a < b:
        a, b = b, a
    return a + np.log1p(np.exp(b - a))


@numba.njit(cache=True)
def _ctc_kernel(logy, ext, blank, log_zero):
    T = logy.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), log_zero)
    beta = np.full((T, S), log_zero)
    alpha[0, 0] = logy[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logy[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _lae(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                acc = _lae(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + logy[t, ext[s]]
    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = _lae(log_p, alpha[T - 1, S - 2])
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            acc = beta[t + 1, s] + logy[t + 1, ext[s]]
            if s + 1 < S:
                acc = _lae(acc, beta[t + 1, s + 1] + logy[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                acc = _lae(acc, beta[t + 1, s + 2] + logy[t + 1, ext[s + 2]])
            beta[t, s] = acc
    grad = np.zeros(logy.shape)
    for t in range(T):
        for s in range(S):
            grad[t, ext[s]] -= np.exp(alpha[t, s] + beta[t, s] - log_p)
    return -log_p, grad


def _nll_and_grad(log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    frames, width = log_probs.shape
    blank = width - 1
    if frames < 1:
        raise UnalignableError("empty grid")
    if any(p < 0 or p >= blank for p in target):
        raise ValueError("target contains an id outside the alphabet")
    need = min_frames(target)
    if frames < need:
        raise UnalignableError(f"target needs at least {need} frames, grid has {frames}")
    nll, grad = _ctc_kernel(np.ascontiguousarray(log_probs), _extend(target, blank), blank, nx.LOG_ZERO)
    if nll > -0.5 * nx.LOG_ZERO:
        raise UnalignableError("target has zero probability under this grid")
    return float(nll), grad


def ctc_loss(grid, target) -> float:
    """-log of the total probability of all alignments that collapse to ``target``."""
    if not isinstance(grid, FramePosteriorGrid):
        grid = FramePosteriorGrid.from_probs(grid)
    return _nll_and_grad(grid.log_probs, list(target))[0]


def ctc_nll(log_grid: nx.Tensor, targets: Sequence[Sequence[int]], seq_starts) -> nx.Tensor:
    """Per-utterance CTC losses (U,) over a log grid of concatenated utterances.

    A ``None`` target skips that utterance (loss 0, no gradient).
    """
    log_grid = nx.as_tensor(log_grid)
    starts = np.asarray(seq_starts, dtype=np.int64)
    ends = np.append(starts[1:], log_grid.shape[0])
    if len(targets) != starts.size:
        raise ValueError("one target per utterance required")
    losses = np.zeros(starts.size)
    grad = np.zeros_like(log_grid.data)
    for u, (a, b) in enumerate(zip(starts, ends)):
        if targets[u] is None:
            continue
        losses[u], grad[a:b] = _nll_and_grad(log_grid.data[a:b], list(targets[u]))
    owner = np.repeat(np.arange(starts.size), ends - starts)

    def _bw(g):
        return (grad * g[owner][:, None],)

    return nx.record_op(losses, (log_grid,), _bw)


def frame_sequence_log_prob(grid: FramePosteriorGrid, symbols: Sequence[int]) -> float:
    """Log of the plain per-frame product for a length-T symbol sequence (no alignment sum)."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.shape[0] != grid.frames:
        raise ValueError("need exactly one symbol per frame")
    return float(grid.log_probs[np.arange(grid.frames), symbols].sum())


def collapse(symbols: Sequence[int], blank: int) -> list[int]:
    out = []
    prev = None
    for s in symbols:
        s = int(s)
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def best_path(grid) -> tuple[np.ndarray, list[int]]:
    """Per-frame argmax (lowest symbol on ties), then merge repeats and drop blanks."""
    if not isinstance(grid, FramePosteriorGrid):
        grid = FramePosteriorGrid.from_probs(grid)
    if grid.frames == 0:
        return np.zeros(0, dtype=np.int64), []
    symbols = np.argmax(grid.log_probs, axis=1)
    return symbols, collapse(symbols, grid.blank)


@numba.njit(cache=True)
def _viterbi(em, ext, blank, log_zero):
    T, S = em.shape
    score = np.full((T, S), log_zero)
    back = np.zeros((T, S), dtype=np.int64)
    score[0, 0] = em[0, 0]
    if S > 1:
        score[0, 1] = em[0, 1]
    for t in range(1, T):
        for s in range(S):
            best = score[t - 1, s]
            arg = s
            if s >= 1 and score[t - 1, s - 1] > best:
                best = score[t - 1, s - 1]
                arg = s - 1
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2] and score[t - 1, s - 2] > best:
                best = score[t - 1, s - 2]
                arg = s - 2
            score[t, s] = best + em[t, s]
            back[t, s] = arg
    s = S - 1
    if S > 1 and score[T - 1, S - 2] > score[T - 1, S - 1]:
        s = S - 2
    path = np.empty(T, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        path[t] = s
        s = back[t, s]
    return path


def forced_align(grid: FramePosteriorGrid, target: Sequence[int], wildcard=None, smoothing: float = 0.0) -> np.ndarray:
    """Most probable CTC path constrained to ``target``; returns one phoneme per frame (-1 for blank).

    ``wildcard`` is an optional (T,) log-mass that may emit any label (used
    for entries that have no phoneme yet).  ``smoothing`` mixes a uniform
    distribution into each row so labels the grid cannot produce still align.
    """
    target = list(target)
    logp = grid.log_probs
    frames, width = logp.shape
    blank = width - 1
    if frames < min_frames(target):
        raise UnalignableError(f"target needs at least {min_frames(target)} frames, grid has {frames}")
    if smoothing > 0.0:
        logp = np.logaddexp(logp + np.log1p(-smoothing), np.log(smoothing / width))
    ext = _extend(target, blank)
    em = logp[:, ext]
    if wildcard is not None:
        lab = ext != blank
        em[:, lab] = np.logaddexp(em[:, lab], np.asarray(wildcard)[:, None])
    path = _viterbi(np.ascontiguousarray(em), ext, blank, nx.LOG_ZERO)
    out = ext[path]
    out[out == blank] = -1
    return out
