"""Deterministic synthetic speech stand-in and a noisy pseudo-labeler.

Each phoneme has a prototype feature vector.  An utterance is a random
phoneme string with no immediate repeats; every phoneme emits a run of
frames equal to its prototype plus isotropic Gaussian noise.

Corpus directory layout: ``corpus.jsonl`` holds a header line and then one
record per utterance; ``truth.jsonl`` holds the hidden transcripts and
durations of every utterance for evaluation only.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc import GROUND_TRUTH, PSEUDO, LabelSequence

# 60 s / 12.5 ms hop
FRAMES_PER_MINUTE = 4800
CORPUS_FORMAT = "dynvq-corpus"
CORPUS_VERSION = 1

# independent random streams derived from the corpus seed
_STREAM_PROTOTYPES = 1
_STREAM_PAIRED = 2
_STREAM_UNPAIRED = 3
_STREAM_TEST = 4


def minutes_to_frames(minutes: float, scale: float = 1.0) -> int:
    return int(round(minutes * FRAMES_PER_MINUTE * scale))


@dataclass
class PhonemeAlphabet:
    prototypes: np.ndarray
    margin: float

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def min_distance(self) -> float:
        p = self.prototypes
        d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
        return float(d[np.triu_indices(self.size, 1)].min())


def make_alphabet(size: int, feature_dim: int, margin: float, rng: np.random.Generator) -> PhonemeAlphabet:
    """Unit-Gaussian prototypes, rejection-sampled to keep pairwise distance >= margin."""
    if size < 2:
        raise ValueError("alphabet needs at least two phonemes")
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < size:
        cand = rng.standard_normal(feature_dim)
        if all(np.linalg.norm(cand - p) >= margin for p in protos):
            protos.append(cand)
        tries += 1
        if tries > 10000 * size:
            raise ValueError("cannot place prototypes with this margin")
    return PhonemeAlphabet(np.array(protos), margin)


@dataclass
class CorpusSpec:
    n_phonemes: int = 26
    feature_dim: int = 8
    paired_frames: int = 3000
    unpaired_frames: int = 15000
    paired_coverage: tuple[int, ...] = tuple(range(15))
    unpaired_coverage: tuple[int, ...] = tuple(range(26))
    test_utterances: int = 40
    min_duration: int = 2
    max_duration: int = 6
    min_phonemes: int = 3
    max_phonemes: int = 8
    noise: float = 0.1
    margin: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.paired_coverage = tuple(int(p) for p in self.paired_coverage)
        self.unpaired_coverage = tuple(int(p) for p in self.unpaired_coverage)

    def validate(self) -> None:
        alphabet = set(range(self.n_phonemes))
        paired, unpaired = set(self.paired_coverage), set(self.unpaired_coverage)
        if not paired <= unpaired <= alphabet:
            raise ValueError("coverage must satisfy paired <= unpaired <= alphabet")
        if len(paired) < 2:
            raise ValueError("paired coverage needs at least two phonemes")
        if self.paired_frames <= 0 or self.unpaired_frames <= 0:
            raise ValueError("frame budgets must be positive")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValueError("bad duration range")
        if not 1 <= self.min_phonemes <= self.max_phonemes:
            raise ValueError("bad phonemes-per-utterance range")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paired_coverage"] = list(self.paired_coverage)
        d["unpaired_coverage"] = list(self.unpaired_coverage)
        return d


@dataclass
class Utterance:
    id: str
    frames: np.ndarray
    label: LabelSequence | None = None

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class Truth:
    phonemes: tuple[int, ...]
    durations: tuple[int, ...]


@dataclass
class Corpus:
    spec: CorpusSpec
    alphabet: PhonemeAlphabet
    paired: list[Utterance]
    unpaired: list[Utterance]
    test: list[Utterance]
    truth: dict[str, Truth] = field(repr=False)

    def frames(self, split: str) -> int:
        return sum(u.length for u in getattr(self, split))


def _phoneme_string(rng: np.random.Generator, coverage: Sequence[int], lo: int, hi: int) -> list[int]:
    n = int(rng.integers(lo, hi + 1))
    out: list[int] = []
    for _ in range(n):
        choices = [p for p in coverage if not out or p != out[-1]]
        out.append(int(choices[rng.integers(len(choices))]))
    return out


def render(
    phonemes: Sequence[int], durations: Sequence[int], alphabet: PhonemeAlphabet, noise: float, rng: np.random.Generator
) -> np.ndarray:
    """Frames for a phoneme string: each prototype repeated by its duration plus noise."""
    base = np.repeat(alphabet.prototypes[np.asarray(phonemes, dtype=np.int64)], np.asarray(durations), axis=0)
    if noise > 0:
        base = base + noise * rng.standard_normal(base.shape)
    return base


def _split(
    name: str, budget: int | None, count: int | None, coverage, spec: CorpusSpec, alphabet, rng, truth
) -> list[Utterance]:
    out, used = [], 0
    while (budget is not None and used < budget) or (count is not None and len(out) < count):
        ph = _phoneme_string(rng, coverage, spec.min_phonemes, spec.max_phonemes)
        dur = [int(d) for d in rng.integers(spec.min_duration, spec.max_duration + 1, size=len(ph))]
        uid = f"{name}-{len(out):05d}"
        frames = render(ph, dur, alphabet, spec.noise, rng)
        label = None if name == "unpaired" else LabelSequence(ph, GROUND_TRUTH)
        out.append(Utterance(uid, frames, label))
        truth[uid] = Truth(tuple(ph), tuple(dur))
        used += frames.shape[0]
    return out


def gen_corpus(spec: CorpusSpec) -> Corpus:
    """Paired, unpaired and test splits, fully determined by ``spec.seed``.

    Unpaired utterances carry no label; their transcripts live only in
    ``Corpus.truth``.  The test split covers the whole alphabet.
    """
    spec.validate()
    alphabet = make_alphabet(
        spec.n_phonemes, spec.feature_dim, spec.margin, np.random.default_rng([spec.seed, _STREAM_PROTOTYPES])
    )
    truth: dict[str, Truth] = {}
    paired = _split(
        "paired", spec.paired_frames, None, spec.paired_coverage, spec, alphabet,
        np.random.default_rng([spec.seed, _STREAM_PAIRED]), truth,
    )
    unpaired = _split(
        "unpaired", spec.unpaired_frames, None, spec.unpaired_coverage, spec, alphabet,
        np.random.default_rng([spec.seed, _STREAM_UNPAIRED]), truth,
    )
    test = _split(
        "test", None, spec.test_utterances, tuple(range(spec.n_phonemes)), spec, alphabet,
        np.random.default_rng([spec.seed, _STREAM_TEST]), truth,
    )
    return Corpus(spec, alphabet, paired, unpaired, test, truth)


# ----------------------------------------------------------------------------
# pseudo labels
# ----------------------------------------------------------------------------


def corrupt(
    phonemes: Sequence[int], error_rate: float, n_phonemes: int, rng: np.random.Generator
) -> tuple[list[int], int]:
    """Substitute, delete or insert (equal odds) at each position with total probability ``error_rate``.

    Returns the corrupted string and the number of corruption events.
    """
    if not 0.0 <= error_rate < 1.0:
        raise ValueError("error_rate must lie in [0, 1)")
    out: list[int] = []
    events = 0
    for p in phonemes:
        if rng.random() >= error_rate:
            out.append(int(p))
            continue
        events += 1
        kind = int(rng.integers(3))
        if kind == 0:
            others = [q for q in range(n_phonemes) if q != p]
            out.append(int(others[rng.integers(len(others))]))
        elif kind == 2:
            out.append(int(p))
            out.append(int(rng.integers(n_phonemes)))
    return out, events


def pseudo_label(phonemes: Sequence[int], error_rate: float, seed, n_phonemes: int) -> LabelSequence:
    """Simulated recognizer output for a hidden transcript; deterministic per seed."""
    rng = np.random.default_rng(seed)
    out, _ = corrupt(phonemes, error_rate, n_phonemes, rng)
    return LabelSequence(out, PSEUDO)


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------


def _encode_frames(frames: np.ndarray, encoding: str):
    if encoding == "base64-f64le":
        return base64.b64encode(frames.astype("<f8").tobytes()).decode("ascii")
    if encoding == "text":
        return frames.tolist()
    raise ValueError(f"unknown frame encoding {encoding!r}")


def _decode_frames(payload, shape, encoding: str) -> np.ndarray:
    if encoding == "base64-f64le":
        return np.frombuffer(base64.b64decode(payload), dtype="<f8").astype(np.float64).reshape(shape)
    if encoding == "text":
        return np.array(payload, dtype=np.float64).reshape(shape)
    raise ValueError(f"unknown frame encoding {encoding!r}")


def save_corpus(corpus: Corpus, directory, encoding: str = "base64-f64le") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "encoding": encoding,
        "spec": corpus.spec.to_dict(),
        "prototypes": _encode_frames(corpus.alphabet.prototypes, encoding),
        "prototype_shape": list(corpus.alphabet.prototypes.shape),
    }
    with open(directory / "corpus.jsonl", "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for split in ("paired", "unpaired", "test"):
            for u in getattr(corpus, split):
                rec = {
                    "id": u.id,
                    "split": split,
                    "shape": list(u.frames.shape),
                    "frames": _encode_frames(u.frames, encoding),
                }
                if u.label is not None:
                    rec["label"] = " ".join(str(p) for p in u.label.phonemes)
                fh.write(json.dumps(rec) + "\n")
    with open(directory / "truth.jsonl", "w") as fh:
        for uid, t in corpus.truth.items():
            fh.write(json.dumps({"id": uid, "phonemes": list(t.phonemes), "durations": list(t.durations)}) + "\n")


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    with open(directory / "corpus.jsonl") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError("not a corpus file")
        if header.get("version") != CORPUS_VERSION:
            raise ValueError(f"unsupported corpus version {header.get('version')}")
        enc = header["encoding"]
        spec = CorpusSpec(**header["spec"])
        alphabet = PhonemeAlphabet(_decode_frames(header["prototypes"], header["prototype_shape"], enc), spec.margin)
        splits: dict[str, list[Utterance]] = {"paired": [], "unpaired": [], "test": []}
        for line in fh:
            rec = json.loads(line)
            label = None
            if "label" in rec:
                label = LabelSequence([int(t) for t in rec["label"].split()], GROUND_TRUTH)
            splits[rec["split"]].append(Utterance(rec["id"], _decode_frames(rec["frames"], rec["shape"], enc), label))
    truth = {}
    truth_path = directory / "truth.jsonl"
    if truth_path.exists():
        with open(truth_path) as fh:
            for line in fh:
                rec = json.loads(line)
                truth[rec["id"]] = Truth(tuple(rec["phonemes"]), tuple(rec["durations"]))
    return Corpus(spec, alphabet, splits["paired"], splits["unpaired"], splits["test"], truth)
