"""Metrics and the experiment harness.

Synthesized frames rarely have the reference's length (synthesis uses a
fixed repeat factor), so utterance-level distortion is measured along a
dynamic-time-warping path, the usual practice for cepstral distortion.
PER on synthesized speech is closed-loop: the synthesized frames are
re-encoded by the trained encoder and decoded by best path.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numba
import numpy as np

from . import ctc
from .codebook import Codebook, lookup_indices, posterior_matrix
from .corpus import Corpus, gen_corpus
from .model import decode, encode

log = logging.getLogger(__name__)

METRICS_VERSION = 1
SWEEP_VERSION = 1
CSV_COLUMNS = ("arm", "paired_frames", "unpaired_frames", "per", "distortion", "codebook_size", "coverage", "wall_seconds")


def _symbols(seq) -> list[int]:
    if isinstance(seq, ctc.LabelSequence):
        return list(seq.phonemes)
    return [int(s) for s in seq]


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance with unit costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def phoneme_error_rate(ref, hyp) -> float:
    """Edit distance over reference length; may exceed 1 with insertions."""
    ref, hyp = _symbols(ref), _symbols(hyp)
    if not ref:
        raise ValueError("reference is empty")
    return edit_distance(ref, hyp) / len(ref)


def feature_distortion(x, x_hat) -> float:
    """Mean per-frame Euclidean distance between equally long frame sequences."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    if x.shape != x_hat.shape:
        raise ValueError(f"frame sequences differ in shape: {x.shape} vs {x_hat.shape}")
    if x.shape[0] == 0:
        raise ValueError("no frames")
    return float(np.linalg.norm(x - x_hat, axis=1).mean())


@numba.njit(cache=True)
def _dtw_path(cost):
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    i, j = n, m
    rows = []
    cols = []
    while i > 0 and j > 0:
        rows.append(i - 1)
        cols.append(j - 1)
        diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
        if diag <= up and diag <= left:
            i -= 1
            j -= 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
    return np.array(rows[::-1]), np.array(cols[::-1])


def dtw_distortion(x, y) -> float:
    """Mean Euclidean distance along the optimal monotone alignment of two frame sequences."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("no frames")
    cost = np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))
    rows, cols = _dtw_path(cost)
    return float(cost[rows, cols].mean())


def recognize(params: Mapping, book: Codebook, frames, n_phonemes: int) -> list[int]:
    """Best-path phoneme string for ``frames`` under the model's own recognition path."""
    z = encode(frames, params)
    grid = ctc.project_to_phonemes(posterior_matrix(z, book, 1.0), book, n_phonemes)
    return ctc.best_path(grid)[1]


@dataclass
class SynthesisScore:
    per: float
    edits: int
    ref_length: int
    distortion: float | None
    frames: np.ndarray | None
    recognized: list[int]
    skipped: list[int]


def synthesize(params: Mapping, book: Codebook, text, repeat: int, on_unmapped: str = "raise") -> np.ndarray | None:
    """Phonemes to frames: best codeword per phoneme, each held for ``repeat`` frames, then decoded."""
    ids = lookup_indices(_symbols(text), book, on_unmapped=on_unmapped)
    if ids.size == 0:
        return None
    return decode(book.entries[ids], params, repeat=repeat)


def synthesize_and_score(
    params: Mapping,
    book: Codebook,
    text,
    truth,
    repeat: int,
    n_phonemes: int,
    on_unmapped: str = "raise",
) -> SynthesisScore:
    """Synthesize ``text`` and score it against the reference frames ``truth``.

    With ``on_unmapped="skip"`` phonemes without a codeword are left out of
    the synthesis (and so count as deletions in PER); the default raises
    :class:`codebook.UnmappedPhonemeError`.
    """
    ref = _symbols(text)
    if not ref:
        raise ValueError("empty text")
    skipped = [p for p in ref if p not in book.covered_phonemes()] if on_unmapped == "skip" else []
    frames = synthesize(params, book, ref, repeat, on_unmapped)
    if frames is None:
        return SynthesisScore(1.0, len(ref), len(ref), None, None, [], skipped)
    hyp = recognize(params, book, frames, n_phonemes)
    edits = edit_distance(ref, hyp)
    return SynthesisScore(edits / len(ref), edits, len(ref), dtw_distortion(truth, frames), frames, hyp, skipped)


@dataclass
class MetricsReport:
    per: float
    distortion: float
    codebook_size: int
    coverage: float
    recognition_per: float
    utterances: int
    unsynthesizable: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.per < 0:
            raise ValueError("PER cannot be negative")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"version": METRICS_VERSION, **asdict(self)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("version") != METRICS_VERSION:
            raise ValueError(f"unsupported metrics version {d.get('version')}")
        d = {k: v for k, v in d.items() if k != "version"}
        return cls(**d)


def evaluate(params: Mapping, book: Codebook, repeat: int, corpus: Corpus, metadata: dict | None = None) -> MetricsReport:
    """Synthesis PER and distortion over the test split, plus recognition PER on real test audio.

    Utterance errors are pooled (total edits over total reference length);
    distortion is averaged over the utterances that produced any frames.
    """
    n_ph = corpus.alphabet.size
    edits = ref_len = rec_edits = 0
    dists = []
    failed = 0
    for u in corpus.test:
        ref = list(corpus.truth[u.id].phonemes)
        s = synthesize_and_score(params, book, ref, u.frames, repeat, n_ph, on_unmapped="skip")
        edits += s.edits
        ref_len += s.ref_length
        if s.distortion is None:
            failed += 1
        else:
            dists.append(s.distortion)
        rec_edits += edit_distance(ref, recognize(params, book, u.frames, n_ph))
    return MetricsReport(
        per=edits / ref_len,
        distortion=float(np.mean(dists)) if dists else float("nan"),
        codebook_size=book.size,
        coverage=len(book.covered_phonemes()) / n_ph,
        recognition_per=rec_edits / ref_len,
        utterances=len(corpus.test),
        unsynthesizable=failed,
        metadata=dict(metadata or {}),
    )


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------


@dataclass
class Arm:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)


# paired phoneme coverage grows with the paired share
RATIO_COVERAGE = {"1:10": 15, "1:5": 18, "1:2.5": 21, "1:1": 26}
RATIO_VALUES = {"1:10": 0.1, "1:5": 0.2, "1:2.5": 0.4, "1:1": 1.0}


def ratio_arms(unpaired_frames: int, n_phonemes: int = 26, seeds: Sequence[int] = (0,)) -> list[Arm]:
    """Paired:unpaired ratios with the unpaired amount fixed, each with and without the unpaired data."""
    arms = []
    for seed in seeds:
        for ratio, share in RATIO_VALUES.items():
            k = min(RATIO_COVERAGE[ratio], n_phonemes)
            common = {
                "seed": seed,
                "corpus.seed": seed,
                "corpus.paired_frames": max(1, int(round(share * unpaired_frames))),
                "corpus.unpaired_frames": unpaired_frames,
                "corpus.paired_coverage": list(range(k)),
            }
            suffix = f"-s{seed}" if len(seeds) > 1 else ""
            arms.append(Arm(f"{ratio}-paired-only{suffix}", {**common, "use_unpaired": False}))
            arms.append(Arm(f"{ratio}-semi{suffix}", {**common, "use_unpaired": True}))
    return arms


def ablation_arms() -> list[Arm]:
    return [
        Arm("fully-supervised", {"use_unpaired": False}),
        Arm("static-semi", {"use_unpaired": True, "static_codebook": True}),
        Arm("dynamic-semi", {"use_unpaired": True, "static_codebook": False}),
    ]


def builtin_arms(name: str, base) -> list[Arm]:
    if name == "ablation":
        return ablation_arms()
    if name == "ratio":
        return ratio_arms(base.corpus.unpaired_frames, base.corpus.n_phonemes)
    if name == "ratio-seeds":
        return ratio_arms(base.corpus.unpaired_frames, base.corpus.n_phonemes, seeds=(0, 1, 2))
    raise ValueError(f"unknown arm set {name!r}; choose ablation, ratio or ratio-seeds")


def run_arm(base, arm: Arm, out_dir: Path | None = None) -> dict:
    """Train and evaluate one arm; failures come back as a row with status 'failed'."""
    from .trainer import train, write_run

    t0 = time.perf_counter()
    row: dict[str, Any] = {"arm": arm.name, "overrides": arm.overrides}
    try:
        cfg = base.with_overrides(arm.overrides)
        cfg.validate()
        corpus = gen_corpus(cfg.corpus)
        state = train(cfg, corpus)
        report = evaluate(state.params, state.book, state.repeat_factor, corpus, {"arm": arm.name})
        if out_dir is not None:
            write_run(out_dir / arm.name, state, cfg, report)
        row.update(
            status="ok",
            paired_frames=corpus.frames("paired"),
            unpaired_frames=corpus.frames("unpaired") if cfg.use_unpaired else 0,
            per=report.per,
            distortion=report.distortion,
            codebook_size=report.codebook_size,
            coverage=report.coverage,
            recognition_per=report.recognition_per,
            coverage_after=state.coverage_after,
        )
    except Exception as exc:  # isolate: one bad arm must not sink the sweep
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
    row["wall_seconds"] = time.perf_counter() - t0
    return row


@dataclass
class SweepResult:
    rows: list[dict]
    base: dict

    def ok(self) -> list[dict]:
        return [r for r in self.rows if r["status"] == "ok"]

    def failed(self) -> list[dict]:
        return [r for r in self.rows if r["status"] != "ok"]

    def by_arm(self) -> dict[str, dict]:
        return {r["arm"]: r for r in self.rows}

    def to_json(self) -> str:
        doc = {"version": SWEEP_VERSION, "base": self.base, "rows": self.rows}
        return json.dumps(doc, indent=2, default=_jsonable) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.ok():
            w.writerow([_cell(r.get(c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_table(self) -> str:
        head = list(CSV_COLUMNS) + ["status"]
        body = [[_cell(r.get(c, "")) for c in CSV_COLUMNS] + [r["status"]] for r in self.rows]
        widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(self.to_json())
        (out / "results.csv").write_text(self.to_csv())
        (out / "results.txt").write_text(self.to_table())


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}" if v == v else "nan"
    return "" if v is None else str(v)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def sweep(base, arms: Sequence[Arm], out_dir=None, workers: int = 1) -> SweepResult:
    """Run every arm as an independent seeded run and collect one row each.

    ``workers > 1`` runs arms in separate processes; every arm writes into
    its own subdirectory of ``out_dir``.
    """
    names = [a.name for a in arms]
    if len(set(names)) != len(names):
        raise ValueError("arm names must be unique")
    for a in arms:
        if not isinstance(a, Arm) or not a.name:
            raise ValueError("each arm needs a name and a dict of overrides")
    out = Path(out_dir) if out_dir is not None else None
    if workers > 1 and len(arms) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_arm, [base] * len(arms), arms, [out] * len(arms)))
    else:
        rows = [run_arm(base, a, out) for a in arms]
    for r in rows:
        if r["status"] != "ok":
            log.warning("arm %s failed: %s", r["arm"], r["error"])
    return SweepResult(rows, base.to_dict())
