"""Growable codebook: quantization, posteriors, the threshold growth rule,
and the codeword-to-phoneme table.

Binary file layout (version 1, all little-endian)::

    magic    4 bytes  b"DVQC"
    version  uint16   1
    N        uint32   number of entries
    D        uint32   codeword dimension
    G        uint32   number of growth-log events
    N records:
        D x float64   codeword
        int32         phoneme id, -1 when unassigned
        uint8         origin (0 seed, 1 paired-learned, 2 unpaired-added)
        uint8         assignment source (0 none, 1 ground truth, 2 pseudo)
        uint32        alignment support of the assignment
    G records:
        int64         training step
        uint32        entry index
        uint8         trigger (1 low posterior, 2 manual)
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx

MAGIC = b"DVQC"
FORMAT_VERSION = 1
NO_PHONEME = -1


class Origin(enum.IntEnum):
    SEED = 0
    PAIRED = 1
    UNPAIRED = 2


class Source(enum.IntEnum):
    NONE = 0
    GROUND_TRUTH = 1
    PSEUDO = 2


class Trigger(enum.IntEnum):
    LOW_POSTERIOR = 1
    MANUAL = 2


class Decision(enum.IntEnum):
    DROP = 0
    ADD = 1
    REFINE = 2


class UnmappedPhonemeError(KeyError):
    def __init__(self, phoneme: int):
        super().__init__(f"phoneme {phoneme} has no assigned codeword")
        self.phoneme = phoneme

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class GrowthEvent:
    step: int
    index: int
    trigger: Trigger


@dataclass
class Codebook:
    entries: np.ndarray
    phoneme_of: np.ndarray
    source_of: np.ndarray
    support: np.ndarray
    origin_of: np.ndarray
    growth_log: list[GrowthEvent] = field(default_factory=list)

    @classmethod
    def from_vectors(cls, vectors, origin: Origin = Origin.SEED) -> "Codebook":
        vectors = np.array(vectors, dtype=np.float64, ndmin=2)
        n = vectors.shape[0]
        if n < 1:
            raise ValueError("a codebook needs at least one entry")
        return cls(
            entries=vectors,
            phoneme_of=np.full(n, NO_PHONEME, dtype=np.int64),
            source_of=np.zeros(n, dtype=np.int8),
            support=np.zeros(n, dtype=np.int64),
            origin_of=np.full(n, int(origin), dtype=np.int8),
        )

    @classmethod
    def seeded(cls, size: int, dim: int, rng: np.random.Generator) -> "Codebook":
        """``size`` entries drawn from a unit Gaussian."""
        return cls.from_vectors(rng.standard_normal((size, dim)))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def __len__(self) -> int:
        return self.size

    def copy(self) -> "Codebook":
        return Codebook(
            self.entries.copy(),
            self.phoneme_of.copy(),
            self.source_of.copy(),
            self.support.copy(),
            self.origin_of.copy(),
            list(self.growth_log),
        )

    def append(self, vector, origin: Origin, step: int = 0, trigger: Trigger = Trigger.MANUAL) -> int:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ValueError(f"expected a {self.dim}-vector, got shape {vector.shape}")
        self.entries = np.vstack([self.entries, vector[None, :]])
        self.phoneme_of = np.append(self.phoneme_of, NO_PHONEME)
        self.source_of = np.append(self.source_of, np.int8(Source.NONE))
        self.support = np.append(self.support, 0)
        self.origin_of = np.append(self.origin_of, np.int8(origin))
        index = self.size - 1
        self.growth_log.append(GrowthEvent(int(step), index, Trigger(trigger)))
        return index

    def assigned(self) -> np.ndarray:
        return self.phoneme_of != NO_PHONEME

    def covered_phonemes(self) -> set[int]:
        return {int(p) for p in self.phoneme_of if p != NO_PHONEME}

    # -- serialization -----------------------------------------------------

    def _record_dtype(self) -> np.dtype:
        return np.dtype(
            [("vec", "<f8", (self.dim,)), ("phoneme", "<i4"), ("origin", "u1"), ("source", "u1"), ("support", "<u4")]
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(np.array([FORMAT_VERSION], "<u2").tobytes())
        buf.write(np.array([self.size, self.dim, len(self.growth_log)], "<u4").tobytes())
        rec = np.zeros(self.size, dtype=self._record_dtype())
        rec["vec"] = self.entries
        rec["phoneme"] = self.phoneme_of
        rec["origin"] = self.origin_of
        rec["source"] = self.source_of
        rec["support"] = self.support
        buf.write(rec.tobytes())
        log = np.zeros(len(self.growth_log), dtype=_GROWTH_DTYPE)
        for i, ev in enumerate(self.growth_log):
            log[i] = (ev.step, ev.index, int(ev.trigger))
        buf.write(log.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Codebook":
        if raw[:4] != MAGIC:
            raise ValueError("not a codebook file")
        version = int(np.frombuffer(raw, "<u2", 1, 4)[0])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported codebook version {version}")
        n, d, g = (int(v) for v in np.frombuffer(raw, "<u4", 3, 6))
        book = cls.from_vectors(np.zeros((max(n, 1), d)))
        rec = np.frombuffer(raw, book._record_dtype(), n, 18)
        offset = 18 + rec.nbytes
        log = np.frombuffer(raw, _GROWTH_DTYPE, g, offset)
        if offset + log.nbytes != len(raw):
            raise ValueError("trailing bytes in codebook file")
        book.entries = rec["vec"].astype(np.float64).reshape(n, d)
        book.phoneme_of = rec["phoneme"].astype(np.int64)
        book.origin_of = rec["origin"].astype(np.int8)
        book.source_of = rec["source"].astype(np.int8)
        book.support = rec["support"].astype(np.int64)
        book.growth_log = [GrowthEvent(int(s), int(i), Trigger(int(t))) for s, i, t in log]
        return book

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_bytes(Path(path).read_bytes())


_GROWTH_DTYPE = np.dtype([("step", "<i8"), ("index", "<u4"), ("trigger", "u1")])


def _check_dim(z: np.ndarray, book: Codebook) -> None:
    if book.size == 0:
        raise ValueError("empty codebook")
    if z.shape[-1] != book.dim:
        raise ValueError(f"latent dimension {z.shape[-1]} does not match codebook dimension {book.dim}")


def nearest_many(latents, book: Codebook) -> np.ndarray:
    """Index of the nearest entry for each row; ties go to the lowest index."""
    z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    _check_dim(z, book)
    diff = z[:, None, :] - book.entries[None, :, :]
    return np.argmin(np.einsum("mnd,mnd->mn", diff, diff), axis=1)


def nearest(z, book: Codebook) -> int:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("nearest expects a single latent vector")
    return int(nearest_many(z[None, :], book)[0])


def quantize(latents: nx.Tensor, book_param: nx.Tensor, indices) -> nx.Tensor:
    """Straight-through quantization of a (T, D) latent tensor to the given entries."""
    return nx.straight_through(latents, nx.take_rows(book_param, indices))


def _logits(dist: np.ndarray, tau: float, exponent: str) -> np.ndarray:
    if exponent == "norm":
        return -dist / tau
    if exponent == "squared":
        return -(dist * dist) / tau
    raise ValueError(f"unknown exponent form {exponent!r}")


def stable_log_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax that keeps the winner's log-probability resolvable near 0.

    The winning entry's value is ``-log1p(sum of the others)``, which stays
    strictly negative long after ``1 - p`` rounds to zero.
    """
    x = np.atleast_2d(x)
    top = np.argmax(x, axis=1)
    rows = np.arange(x.shape[0])
    shifted = x - x[rows, top][:, None]
    e = np.exp(shifted)
    e[rows, top] = 0.0
    return shifted - np.log1p(e.sum(axis=1))[:, None]


@dataclass(frozen=True)
class Posterior:
    probs: np.ndarray
    log_probs: np.ndarray
    temperature: float

    @property
    def best(self) -> int:
        return int(np.argmax(self.log_probs))

    @property
    def max_prob(self) -> float:
        return float(self.probs.max())

    @property
    def max_log_prob(self) -> float:
        return float(self.log_probs.max())


def posterior_matrix(latents, book: Codebook, tau: float = 1.0, exponent: str = "norm") -> np.ndarray:
    """(T, N) log-posteriors over entries for each latent row."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    _check_dim(z, book)
    diff = z[:, None, :] - book.entries[None, :, :]
    dist = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
    return stable_log_softmax(_logits(dist, tau, exponent))


def posterior(z, book: Codebook, tau: float = 1.0, exponent: str = "norm") -> Posterior:
    """Softmax of negative (optionally squared) distances over the codebook at temperature ``tau``."""
    logp = posterior_matrix(np.asarray(z, dtype=np.float64)[None, :], book, tau, exponent)[0]
    return Posterior(np.exp(logp), logp, float(tau))


def log_posterior_tensor(latents: nx.Tensor, book_param: nx.Tensor, tau: float = 1.0, exponent: str = "norm") -> nx.Tensor:
    """Differentiable counterpart of :func:`posterior_matrix`."""
    dist = nx.pairwise_distance(latents, book_param)
    if exponent == "squared":
        dist = nx.square(dist)
    elif exponent != "norm":
        raise ValueError(f"unknown exponent form {exponent!r}")
    return nx.log_softmax(nx.mul(dist, -1.0 / tau))


@dataclass
class UpdateReport:
    added: int = 0
    refined: int = 0
    dropped: int = 0
    relabelled: int = 0
    decisions: list[Decision] = field(default_factory=list)
    max_probs: list[float] = field(default_factory=list)
    added_indices: list[int] = field(default_factory=list)
    labels: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return len(self.decisions)

    def merge(self, other: "UpdateReport") -> None:
        self.added += other.added
        self.refined += other.refined
        self.dropped += other.dropped
        self.relabelled += other.relabelled
        self.decisions.extend(other.decisions)
        self.max_probs.extend(other.max_probs)
        self.added_indices.extend(other.added_indices)


def dynamic_update(
    frames,
    frame_labels,
    book: Codebook,
    delta_low: float,
    delta_high: float,
    tau: float,
    *,
    step: int = 0,
    exponent: str = "norm",
    dup_eps: float = 1e-6,
) -> UpdateReport:
    """Grow ``book`` from unpaired frame latents, one frame at a time.

    For each frame the sharpened max posterior p decides: ``p < delta_low``
    appends the latent as a new entry; ``p > delta_high`` refines the
    frame's pseudo label; anything in between is dropped.  Later frames see
    entries added by earlier ones.

    ``frame_labels`` is a per-frame phoneme array (or None).  A refinement
    rewrites the frame's label only when the winning entry carries a
    ground-truth assignment.  The rewritten copy is returned in
    ``report.labels``; ``book`` is modified in place.
    """
    if not (0.0 <= delta_low < delta_high <= 1.0):
        raise ValueError(f"need 0 <= delta_low < delta_high <= 1, got {delta_low}, {delta_high}")
    if not tau > 0:
        raise ValueError("temperature must be positive")
    z = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    _check_dim(z, book)
    labels = None if frame_labels is None else np.array(frame_labels, dtype=np.int64)
    if labels is not None and labels.shape[0] != z.shape[0]:
        raise ValueError("one pseudo label per frame required")

    report = UpdateReport(labels=labels)
    logp = posterior_matrix(z, book, tau, exponent)
    first = 0
    for t in range(z.shape[0]):
        if t > 0 and report.decisions[-1] == Decision.ADD:
            # the codebook grew; later frames see the new entry
            logp, first = posterior_matrix(z[t:], book, tau, exponent), t
        row = logp[t - first]
        win = int(np.argmax(row))
        p = float(np.exp(row[win]))
        report.max_probs.append(p)
        if p < delta_low:
            if np.linalg.norm(book.entries[win] - z[t]) < dup_eps:
                report.dropped += 1
                report.decisions.append(Decision.DROP)
                continue
            index = book.append(z[t], Origin.UNPAIRED, step=step, trigger=Trigger.LOW_POSTERIOR)
            report.added += 1
            report.added_indices.append(index)
            report.decisions.append(Decision.ADD)
        elif p > delta_high:
            report.refined += 1
            report.decisions.append(Decision.REFINE)
            if labels is not None and book.source_of[win] == Source.GROUND_TRUTH:
                if labels[t] != book.phoneme_of[win]:
                    report.relabelled += 1
                labels[t] = book.phoneme_of[win]
        else:
            report.dropped += 1
            report.decisions.append(Decision.DROP)
    return report


def assign_phonemes(book: Codebook, alignments: Iterable[tuple[Sequence[int], Sequence[int]]], source: Source) -> np.ndarray:
    """Give entries the phoneme they co-occur with most often.

    ``alignments`` yields (entry indices, phoneme ids) frame pairs per
    utterance; phoneme -1 marks frames without a label.  Ground-truth
    evidence may overwrite pseudo assignments; nothing overwrites a
    ground-truth assignment, and pseudo evidence only fills empty entries.
    Entries without evidence stay as they are.  Returns ``book.phoneme_of``.
    """
    source = Source(source)
    if source == Source.NONE:
        raise ValueError("assignment source must be ground truth or pseudo")
    pairs_e, pairs_p = [], []
    for entries, phonemes in alignments:
        e = np.asarray(entries, dtype=np.int64)
        p = np.asarray(phonemes, dtype=np.int64)
        keep = p >= 0
        pairs_e.append(e[keep])
        pairs_p.append(p[keep])
    if not pairs_e:
        return book.phoneme_of
    e = np.concatenate(pairs_e)
    p = np.concatenate(pairs_p)
    if e.size == 0:
        return book.phoneme_of
    if e.min() < 0 or e.max() >= book.size:
        raise ValueError("alignment references an entry outside the codebook")
    counts = np.zeros((book.size, int(p.max()) + 1), dtype=np.int64)
    np.add.at(counts, (e, p), 1)
    for k in range(book.size):
        if counts[k].sum() == 0:
            continue
        current = Source(int(book.source_of[k]))
        if current == Source.GROUND_TRUTH:
            continue
        if source == Source.PSEUDO and current != Source.NONE:
            continue
        best = int(np.argmax(counts[k]))
        book.phoneme_of[k] = best
        book.source_of[k] = int(source)
        book.support[k] = int(counts[k, best])
    return book.phoneme_of


def lookup_indices(phonemes: Sequence[int], book: Codebook, on_unmapped: str = "raise") -> np.ndarray:
    """Entry index for each phoneme: the best-supported assigned entry, lowest index on ties.

    ``on_unmapped="skip"`` drops phonemes with no entry instead of raising.
    """
    out = []
    for ph in phonemes:
        cand = np.flatnonzero(book.phoneme_of == int(ph))
        if cand.size == 0:
            if on_unmapped == "skip":
                continue
            raise UnmappedPhonemeError(int(ph))
        out.append(int(cand[np.argmax(book.support[cand])]))
    return np.asarray(out, dtype=np.int64)


def lookup_phoneme_codewords(phonemes: Sequence[int], book: Codebook) -> np.ndarray:
    """Codeword vectors (L, D) for a phoneme sequence."""
    return book.entries[lookup_indices(phonemes, book)]
