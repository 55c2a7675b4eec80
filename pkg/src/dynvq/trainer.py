"""Three-stage training: paired learning, codebook expansion, joint training.

Config files are plain ``key = value`` lines (``#`` starts a comment).
Values are parsed as JSON literals when possible, otherwise kept as
strings.  Keys prefixed ``corpus.`` set fields of the corpus spec.  See the
README for the full key list.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import ctc
from . import numerics as nx
from .codebook import (
    NO_PHONEME,
    Codebook,
    Origin,
    Source,
    UpdateReport,
    assign_phonemes,
    dynamic_update,
    nearest_many,
    posterior_matrix,
)
from .corpus import Corpus, CorpusSpec, Utterance, pseudo_label
from .model import BatchItem, ModelConfig, batch_objective, clean_target, encode_batch, init_params
from .segmentation import run_starts

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# random streams split from the master seed
STREAM_PARAMS = 11
STREAM_CODEBOOK = 12
STREAM_BATCHES = 13
STREAM_PSEUDO = 14

ALIGN_SMOOTHING = 1e-3


class StageOrderError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha1: float = 0.5
    alpha2: float = 1.0
    tau: float = 0.5
    delta_low: float = 0.3
    delta_high: float = 0.999
    exponent: str = "norm"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    batch_size: int = 16
    stage1_steps: int = 2000
    stage2_passes: int = 1
    stage2_grad_steps: int = 0
    stage3_steps: int = 3000
    latent_dim: int = 16
    conv_width: int = 3
    conv_channels: int = 32
    encoder_hidden: int = 32
    decoder_hidden: int = 32
    pseudo_error_rate: float = 0.1
    use_unpaired: bool = True
    static_codebook: bool = False
    log_every: int = 50
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)

    def validate(self) -> None:
        if not (0.0 < self.delta_low < self.delta_high < 1.0):
            raise ConfigError(f"need 0 < delta_low < delta_high < 1, got {self.delta_low}, {self.delta_high}")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if min(self.stage1_steps, self.stage3_steps, self.stage2_passes, self.stage2_grad_steps) < 0:
            raise ConfigError("step counts must be non-negative")
        if not 0.0 <= self.pseudo_error_rate < 1.0:
            raise ConfigError("pseudo_error_rate must lie in [0, 1)")
        if self.exponent not in ("norm", "squared"):
            raise ConfigError("exponent must be 'norm' or 'squared'")
        try:
            self.corpus.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            feature_dim, self.latent_dim, self.conv_width, self.conv_channels, self.encoder_hidden, self.decoder_hidden
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "corpus"}
        d.update({f"corpus.{k}": v for k, v in self.corpus.to_dict().items()})
        return d

    def with_overrides(self, overrides: dict[str, Any]) -> "TrainConfig":
        flat = self.to_dict()
        for key, value in overrides.items():
            if key not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = value
        return TrainConfig.from_dict(flat)

    @classmethod
    def from_dict(cls, flat: dict[str, Any]) -> "TrainConfig":
        top = {f.name: f for f in dataclasses.fields(cls) if f.name != "corpus"}
        corpus_fields = {f.name for f in dataclasses.fields(CorpusSpec)}
        kw, ckw = {}, {}
        for key, value in flat.items():
            if key.startswith("corpus."):
                name = key[len("corpus.") :]
                if name not in corpus_fields:
                    raise ConfigError(f"unknown config key {key!r}")
                ckw[name] = value
            elif key in top:
                kw[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**kw, corpus=CorpusSpec(**ckw))
        for f in dataclasses.fields(cls):
            if f.name == "corpus":
                continue
            v = getattr(cfg, f.name)
            if f.type in ("float",) and isinstance(v, int) and not isinstance(v, bool):
                setattr(cfg, f.name, float(v))
        return cfg

    def dumps(self) -> str:
        lines = ["# dynvq training config"]
        for key, value in self.to_dict().items():
            lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, overrides: dict[str, Any] | None = None) -> "TrainConfig":
        flat = parse_key_values(text)
        if overrides:
            flat.update(overrides)
        return cls().with_overrides(flat)

    @classmethod
    def load(cls, path, overrides: dict[str, Any] | None = None) -> "TrainConfig":
        return cls.loads(Path(path).read_text(), overrides)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_key_values(text: str) -> dict[str, Any]:
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    parser.read_string("[config]\n" + text)
    return {k: parse_value(v) for k, v in parser["config"].items()}


# ----------------------------------------------------------------------------
# state
# ----------------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    book: Codebook
    adam: nx.AdamState
    n_phonemes: int
    provisional: np.ndarray
    stage: int = 1
    step: int = 0
    stage_step: int = 0
    repeat_factor: int = 1
    history: list[dict] = field(default_factory=list)
    pseudo: dict[str, list[int]] = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    coverage_after: dict = field(default_factory=dict)

    def groups(self) -> np.ndarray:
        if self.stage == 1:
            return self.provisional
        return ctc.phoneme_groups(self.book, self.n_phonemes)


def init_state(cfg: TrainConfig, corpus: Corpus) -> TrainState:
    cfg.validate()
    if not corpus.paired:
        raise ValueError("no paired data")
    mcfg = cfg.model_config(corpus.alphabet.feature_dim)
    params = init_params(mcfg, np.random.default_rng([cfg.seed, STREAM_PARAMS]))
    seen = sorted({p for u in corpus.paired for p in u.label.phonemes})
    book = Codebook.seeded(len(seen), cfg.latent_dim, np.random.default_rng([cfg.seed, STREAM_CODEBOOK]))
    adam = nx.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return TrainState(params, book, adam, corpus.alphabet.size, np.array(seen, dtype=np.int64))


def _require_stage(state: TrainState, stage: int) -> None:
    if state.stage != stage:
        raise StageOrderError(f"expected stage {stage}, state is at stage {state.stage}")


def _batch_rng(cfg: TrainConfig, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, STREAM_BATCHES, stage, step])


def _optimize(state: TrainState, items: list[BatchItem], cfg: TrainConfig, alpha1: float, alpha2: float):
    groups = state.groups()
    tensors = {k: nx.parameter(v) for k, v in state.params.items()}
    book_param = nx.parameter(state.book.entries)
    with nx.Tape() as tape:
        res = batch_objective(
            tensors, book_param, state.book, items, groups, state.n_phonemes, alpha1, alpha2, cfg.exponent
        )
    res.report.check()
    grads = nx.backward(tape, res.total)
    named = dict(state.params)
    named["codebook"] = state.book.entries
    gnamed = {k: grads.get(t, np.zeros_like(t.data)) for k, t in tensors.items()}
    gnamed["codebook"] = grads.get(book_param, np.zeros_like(book_param.data))
    state.adam.ensure("codebook", state.book.entries.shape)
    new = nx.adam_step(state.adam, named, gnamed)
    state.book.entries = new.pop("codebook")
    state.params = new
    state.step += 1
    state.stage_step += 1
    return res.report


def _record(state: TrainState, report, cfg: TrainConfig, force: bool = False) -> None:
    if force or state.stage_step % max(cfg.log_every, 1) == 0 or state.stage_step == 1:
        state.history.append(
            {
                "stage": state.stage,
                "step": state.step,
                "recon": report.recon,
                "recog": report.recog,
                "dec": report.dec,
                "total": report.total,
            }
        )


def latents(state: TrainState, frames: np.ndarray) -> np.ndarray:
    return encode_batch(state.params, frames).data


def _log_grid(state: TrainState, z: np.ndarray, groups: np.ndarray) -> ctc.FramePosteriorGrid:
    return ctc.project_to_phonemes(posterior_matrix(z, state.book, 1.0, "norm"), state.book, state.n_phonemes, groups)


def _align(state: TrainState, z: np.ndarray, target: Sequence[int], groups: np.ndarray) -> np.ndarray | None:
    """Frame-level phonemes for ``target`` by forced alignment; unassigned entries act as wildcards."""
    if not target or len(target) > z.shape[0] or ctc.min_frames(target) > z.shape[0]:
        return None
    logpost = posterior_matrix(z, state.book, 1.0, "norm")
    grid = ctc.project_to_phonemes(logpost, state.book, state.n_phonemes, groups)
    wild = groups == state.n_phonemes
    wildcard = None
    if wild.any():
        wildcard = nx.group_logsumexp(logpost, np.where(wild, 0, 1), 2).data[:, 0]
    return ctc.forced_align(grid, target, wildcard=wildcard, smoothing=ALIGN_SMOOTHING)


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------


def _sample(pool: Sequence, k: int, rng: np.random.Generator) -> list:
    if k <= 0 or not pool:
        return []
    if k >= len(pool):
        order = rng.permutation(len(pool))
    else:
        order = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in order]


def stage1_paired(state: TrainState, paired: Sequence[Utterance], cfg: TrainConfig, stop_at: int | None = None) -> TrainState:
    """Reconstruction + recognition on paired data, then ground-truth codeword mapping."""
    _require_stage(state, 1)
    if not paired:
        raise ValueError("no paired data")
    mapped = {int(p) for p in state.provisional}
    while state.stage_step < cfg.stage1_steps:
        if stop_at is not None and state.stage_step >= stop_at:
            return state
        batch = _sample(paired, cfg.batch_size, _batch_rng(cfg, 1, state.stage_step))
        items = [BatchItem(u.frames, clean_target(u.label.phonemes, mapped)) for u in batch]
        report = _optimize(state, items, cfg, cfg.alpha1, 0.0)
        _record(state, report, cfg)

    pairs = []
    for u in paired:
        z = latents(state, u.frames)
        frame_ph = _align(state, z, list(u.label.phonemes), state.provisional)
        if frame_ph is not None:
            pairs.append((nearest_many(z, state.book), frame_ph))
    assign_phonemes(state.book, pairs, Source.GROUND_TRUTH)
    gt = state.book.source_of == Source.GROUND_TRUTH
    state.book.origin_of[gt & (state.book.origin_of == Origin.SEED)] = Origin.PAIRED
    state.repeat_factor = median_span(state, paired)
    state.coverage_after["stage1"] = len(state.book.covered_phonemes())
    state.stage, state.stage_step = 2, 0
    return state


def make_pseudo_labels(state: TrainState, unpaired: Sequence[Utterance], corpus: Corpus, cfg: TrainConfig) -> None:
    """Simulated recognizer output for every unpaired utterance, drawn once."""
    for i, u in enumerate(unpaired):
        truth = corpus.truth[u.id].phonemes
        lab = pseudo_label(truth, cfg.pseudo_error_rate, [cfg.seed, STREAM_PSEUDO, i], state.n_phonemes)
        state.pseudo[u.id] = list(lab.phonemes)


def _runs(frame_labels: np.ndarray) -> list[int]:
    return ctc.collapse([p for p in frame_labels if p >= 0], blank=-1)


def stage2_expand(state: TrainState, unpaired: Sequence[Utterance], cfg: TrainConfig) -> TrainState:
    """Grow the codebook from unpaired latents, then map new entries via pseudo labels."""
    _require_stage(state, 2)
    if unpaired and any(u.id not in state.pseudo for u in unpaired):
        raise StageOrderError("pseudo labels must be generated before stage 2")
    if not unpaired:
        state.stage, state.stage_step = 3, 0
        return state

    for _ in range(cfg.stage2_grad_steps):
        batch = _sample(unpaired, cfg.batch_size, _batch_rng(cfg, 2, state.stage_step))
        report = _optimize(state, [BatchItem(u.frames) for u in batch], cfg, 0.0, 0.0)
        _record(state, report, cfg)

    delta_low = 0.0 if cfg.static_codebook else cfg.delta_low
    total = UpdateReport()
    size_before = state.book.size
    for _ in range(cfg.stage2_passes):
        for u in unpaired:
            z = latents(state, u.frames)
            groups = ctc.phoneme_groups(state.book, state.n_phonemes)
            frame_ph = _align(state, z, state.pseudo[u.id], groups)
            rep = dynamic_update(
                z, frame_ph, state.book, delta_low, cfg.delta_high, cfg.tau, step=state.step, exponent=cfg.exponent
            )
            if frame_ph is not None:
                refined = _runs(rep.labels)
                if refined:
                    state.pseudo[u.id] = refined
            rep.labels = None
            total.merge(rep)

    if state.book.size > size_before:
        groups = ctc.phoneme_groups(state.book, state.n_phonemes)
        pairs = []
        for u in unpaired:
            z = latents(state, u.frames)
            frame_ph = _align(state, z, state.pseudo[u.id], groups)
            if frame_ph is not None:
                pairs.append((nearest_many(z, state.book), frame_ph))
        assign_phonemes(state.book, pairs, Source.PSEUDO)
    state.adam.ensure("codebook", state.book.entries.shape)
    state.stage2 = {
        "added": total.added,
        "refined": total.refined,
        "dropped": total.dropped,
        "relabelled": total.relabelled,
        "frames": total.frames,
    }
    state.coverage_after["stage2"] = len(state.book.covered_phonemes())
    state.stage, state.stage_step = 3, 0
    return state


def stage3_joint(
    state: TrainState,
    paired: Sequence[Utterance],
    unpaired: Sequence[Utterance],
    cfg: TrainConfig,
    stop_at: int | None = None,
    on_step: Callable[[TrainState, Any], None] | None = None,
) -> TrainState:
    """Full weighted objective on paired and pseudo-labelled unpaired data.

    With unpaired data each batch is half paired, half unpaired.  ``stop_at``
    pauses after that many stage-3 steps (for checkpointing).
    """
    _require_stage(state, 3)
    mapped = state.book.covered_phonemes()
    n_un = cfg.batch_size // 2 if unpaired else 0
    n_pa = cfg.batch_size - n_un
    while state.stage_step < cfg.stage3_steps:
        if stop_at is not None and state.stage_step >= stop_at:
            return state
        rng = _batch_rng(cfg, 3, state.stage_step)
        items = [
            BatchItem(u.frames, clean_target(u.label.phonemes, mapped), u.label.phonemes)
            for u in _sample(paired, n_pa, rng)
        ]
        for u in _sample(unpaired, n_un, rng):
            lab = state.pseudo.get(u.id, [])
            items.append(BatchItem(u.frames, clean_target(lab, mapped), lab))
        report = _optimize(state, items, cfg, cfg.alpha1, cfg.alpha2)
        _record(state, report, cfg)
        if on_step is not None:
            on_step(state, report)
    state.repeat_factor = median_span(state, paired)
    state.stage, state.stage_step = 4, 0
    return state


def overfit(utterance: Utterance, cfg: TrainConfig, steps: int = 200, n_phonemes: int = 26) -> list[float]:
    """Full weighted objective on a single labelled utterance; returns the total loss per step.

    One codebook entry per phoneme in the label, pre-assigned, so all three
    loss terms are live from the first step.
    """
    if utterance.label is None:
        raise ValueError("overfitting needs a labelled utterance")
    label = list(utterance.label.phonemes)
    phonemes = sorted(set(label))
    mcfg = cfg.model_config(utterance.frames.shape[1])
    params = init_params(mcfg, np.random.default_rng([cfg.seed, STREAM_PARAMS]))
    book = Codebook.seeded(len(phonemes), cfg.latent_dim, np.random.default_rng([cfg.seed, STREAM_CODEBOOK]))
    book.phoneme_of[:] = phonemes
    book.source_of[:] = Source.GROUND_TRUTH
    book.support[:] = 1
    state = TrainState(params, book, nx.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps), n_phonemes, book.phoneme_of.copy(), stage=3)
    item = BatchItem(utterance.frames, label, label)
    return [_optimize(state, [item], cfg, cfg.alpha1, cfg.alpha2).total for _ in range(steps)]


def median_span(state: TrainState, utterances: Sequence[Utterance]) -> int:
    """Median run length of nearest-codeword indices over ``utterances``."""
    lengths = []
    for u in utterances:
        idx = nearest_many(latents(state, u.frames), state.book)
        starts = run_starts(idx)
        lengths.extend(np.diff(np.append(starts, idx.size)).tolist())
    return max(1, int(round(float(np.median(lengths))))) if lengths else 1


def run_stages(
    state: TrainState, cfg: TrainConfig, corpus: Corpus, progress: Callable[[str], None] | None = None
) -> TrainState:
    """Carry ``state`` through whatever stages remain (resumes mid-stage)."""
    unpaired = corpus.unpaired if cfg.use_unpaired else []
    say = progress or (lambda msg: None)
    t0 = time.perf_counter()
    if state.stage == 1:
        stage1_paired(state, corpus.paired, cfg)
        say(f"stage 1 done in {time.perf_counter() - t0:.1f}s, phonemes mapped: {state.coverage_after['stage1']}")
    if state.stage == 2:
        make_pseudo_labels(state, unpaired, corpus, cfg)
        stage2_expand(state, unpaired, cfg)
        say(f"stage 2 done, codebook size {state.book.size}, {state.stage2}")
    if state.stage == 3:
        stage3_joint(state, corpus.paired, unpaired, cfg)
        say(f"stage 3 done, {time.perf_counter() - t0:.1f}s")
    return state


def train(cfg: TrainConfig, corpus: Corpus, progress: Callable[[str], None] | None = None) -> TrainState:
    """Run all three stages on ``corpus`` under ``cfg``."""
    return run_stages(init_state(cfg, corpus), cfg, corpus, progress)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    """npz container: config echo, parameters, optimizer moments, embedded codebook file."""
    meta = {
        "format": "dynvq-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "n_phonemes": state.n_phonemes,
        "stage": state.stage,
        "step": state.step,
        "stage_step": state.stage_step,
        "repeat_factor": state.repeat_factor,
        "adam_step": state.adam.step,
        "history": state.history,
        "pseudo": state.pseudo,
        "stage2": state.stage2,
        "coverage_after": state.coverage_after,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    arrays["codebook"] = np.frombuffer(state.book.to_bytes(), dtype=np.uint8)
    arrays["provisional"] = state.provisional
    for k, v in state.params.items():
        arrays[f"param/{k}"] = v
    for k in state.adam.m:
        arrays[f"adam_m/{k}"] = state.adam.m[k]
        arrays[f"adam_v/{k}"] = state.adam.v[k]
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    with np.load(path) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        if meta.get("format") != "dynvq-checkpoint":
            raise ValueError("not a checkpoint file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = TrainConfig.from_dict(meta["config"])
        params = {k[len("param/") :]: data[k].copy() for k in data.files if k.startswith("param/")}
        adam = nx.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, step=meta["adam_step"])
        for k in data.files:
            if k.startswith("adam_m/"):
                adam.m[k[len("adam_m/") :]] = data[k].copy()
            elif k.startswith("adam_v/"):
                adam.v[k[len("adam_v/") :]] = data[k].copy()
        book = Codebook.from_bytes(data["codebook"].tobytes())
        provisional = data["provisional"].copy()
    state = TrainState(
        params=params,
        book=book,
        adam=adam,
        n_phonemes=meta["n_phonemes"],
        provisional=provisional,
        stage=meta["stage"],
        step=meta["step"],
        stage_step=meta["stage_step"],
        repeat_factor=meta["repeat_factor"],
        history=meta["history"],
        pseudo={k: list(v) for k, v in meta["pseudo"].items()},
        stage2=meta["stage2"],
        coverage_after=meta["coverage_after"],
    )
    return state, cfg


def coverage(book: Codebook, n_phonemes: int) -> float:
    return len({int(p) for p in book.phoneme_of if p != NO_PHONEME}) / n_phonemes


# ----------------------------------------------------------------------------
# run directories
# ----------------------------------------------------------------------------


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(corpus.spec.to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(corpus.alphabet.prototypes).tobytes())
    for split in ("paired", "unpaired", "test"):
        for u in getattr(corpus, split):
            h.update(u.id.encode())
            h.update(np.ascontiguousarray(u.frames).tobytes())
            if u.label is not None:
                h.update(np.asarray(u.label.phonemes, dtype=np.int64).tobytes())
    return h.hexdigest()


def input_digest(cfg: TrainConfig, corpus: Corpus | None = None) -> str:
    """Content hash over the config echo and (when given) the corpus."""
    h = hashlib.sha256(cfg.dumps().encode())
    if corpus is not None:
        h.update(corpus_digest(corpus).encode())
    return h.hexdigest()


def write_run(out_dir, state: TrainState, cfg: TrainConfig, report=None, corpus: Corpus | None = None) -> Path:
    """Write checkpoint, codebook, history, config echo and input hash (plus metrics when given)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dumps())
    (out / "inputs.sha256").write_text(input_digest(cfg, corpus) + "\n")
    save_checkpoint(state, cfg, out / "checkpoint.npz")
    state.book.save(out / "codebook.dvq")
    (out / "history.json").write_text(
        json.dumps({"history": state.history, "stage2": state.stage2, "coverage_after": state.coverage_after}, indent=2)
        + "\n"
    )
    if report is not None:
        (out / "metrics.json").write_text(report.dumps())
    return out
