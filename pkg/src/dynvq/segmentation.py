"""Merge runs of identical adjacent codeword indices into segment vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx


@dataclass
class SegmentSequence:
    """Run-length view of a quantized utterance.

    ``vectors`` is an (S, D) tensor of run means; ``spans[s]`` is the
    half-open frame range ``[start, end)`` of segment ``s``.
    """

    vectors: nx.Tensor
    indices: np.ndarray
    spans: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @property
    def lengths(self) -> np.ndarray:
        return self.spans[:, 1] - self.spans[:, 0]


def run_starts(indices, seq_starts=(0,)) -> np.ndarray:
    """First row of every run; runs never cross a sequence boundary."""
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("need a non-empty 1-D index sequence")
    change = np.empty(idx.size, dtype=bool)
    change[0] = True
    change[1:] = idx[1:] != idx[:-1]
    change[np.asarray(seq_starts, dtype=np.int64)] = True
    return np.flatnonzero(change)


def combine(quantized: nx.Tensor, indices, seq_starts=(0,)) -> SegmentSequence:
    """Collapse runs of equal consecutive ``indices`` to their mean latent.

    ``quantized`` holds the straight-through latents (T, D); each member of a
    run receives 1/runlength of the segment's upstream gradient.  With
    several utterances laid end to end, pass their first rows as
    ``seq_starts`` so no run spans two of them.
    """
    quantized = nx.as_tensor(quantized)
    idx = np.asarray(indices, dtype=np.int64)
    if quantized.shape[0] != idx.shape[0]:
        raise ValueError(f"{quantized.shape[0]} latents but {idx.shape[0]} indices")
    starts = run_starts(idx, seq_starts)
    ends = np.append(starts[1:], idx.size)
    return SegmentSequence(
        vectors=nx.segment_mean(quantized, starts),
        indices=idx[starts],
        spans=np.stack([starts, ends], axis=1),
    )
