"""Command-line entry point: ``dynvq <subcommand> ...``.

Subcommands: gen-data, train, eval, sweep, inspect-codebook.  Every
subcommand that writes a directory stages it next to the target and moves
it into place only once all artifacts are written and re-read; on failure
nothing is left behind.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import eval as ev
from .codebook import Codebook, Origin, Source, Trigger
from .corpus import CorpusSpec, gen_corpus, load_corpus, save_corpus
from .trainer import (
    ConfigError,
    TrainConfig,
    init_state,
    load_checkpoint,
    parse_key_values,
    parse_value,
    run_stages,
    write_run,
)

log = logging.getLogger("dynvq")


class CliError(Exception):
    pass


def _overrides(pairs: Sequence[str] | None) -> dict[str, Any]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise CliError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    return out


def _need_file(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def _load_config(path: str | None, overrides: dict[str, Any]) -> TrainConfig:
    cfg_path = _need_file(path, "config file")
    try:
        cfg = TrainConfig.load(cfg_path, overrides) if cfg_path else TrainConfig().with_overrides(overrides)
        cfg.validate()
    except (ConfigError, ValueError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    return cfg


@contextlib.contextmanager
def _staged_dir(target: str) -> Iterator[Path]:
    """Yield a scratch directory that becomes ``target`` only on success."""
    dest = Path(target)
    if dest.exists() and (not dest.is_dir() or any(dest.iterdir())):
        raise CliError(f"output {dest} already exists and is not an empty directory")
    dest.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{dest.name}.", dir=dest.parent))
    try:
        yield scratch
        if dest.exists():
            dest.rmdir()
        scratch.rename(dest)
    finally:
        if scratch.exists():
            shutil.rmtree(scratch)


def _write_file_atomic(target: str, text: str) -> None:
    dest = Path(target)
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{dest.name}.", dir=dest.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, dest)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    flat: dict[str, Any] = {}
    spec_path = _need_file(args.spec, "spec file")
    if spec_path:
        flat.update(parse_key_values(spec_path.read_text()))
    flat.update(_overrides(args.set))
    flat = {k[len("corpus.") :] if k.startswith("corpus.") else k: v for k, v in flat.items()}
    try:
        spec = CorpusSpec(**flat)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid corpus spec: {exc}") from exc
    corpus = gen_corpus(spec)
    with _staged_dir(args.out) as out:
        save_corpus(corpus, out, encoding=args.encoding)
        back = load_corpus(out)
        if len(back.paired) != len(corpus.paired) or len(back.test) != len(corpus.test):
            raise CliError("corpus failed to read back")
    log.info(
        "wrote %d paired, %d unpaired, %d test utterances to %s",
        len(corpus.paired), len(corpus.unpaired), len(corpus.test), args.out,
    )


def cmd_train(args) -> None:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    corpus_dir = Path(args.corpus) if args.corpus else None
    if corpus_dir is not None and not (corpus_dir / "corpus.jsonl").is_file():
        raise CliError(f"no corpus at {corpus_dir}")
    if args.resume:
        _need_file(args.resume, "checkpoint")
        state, cfg = load_checkpoint(args.resume)
        if overrides:
            raise CliError("--set cannot be combined with --resume; the checkpoint carries its config")
    else:
        cfg = _load_config(args.config, overrides)
        state = None

    if corpus_dir is not None:
        corpus = load_corpus(corpus_dir)
        cfg.corpus = corpus.spec
        try:
            cfg.validate()
        except ConfigError as exc:
            raise CliError(f"invalid config: {exc}") from exc
    else:
        corpus = gen_corpus(cfg.corpus)

    with _staged_dir(args.out) as out:
        if state is None:
            state = init_state(cfg, corpus)
        run_stages(state, cfg, corpus, progress=log.info)
        report = ev.evaluate(state.params, state.book, state.repeat_factor, corpus, {"config_sha256": cfg.digest()})
        write_run(out, state, cfg, report, corpus)
        load_checkpoint(out / "checkpoint.npz")
        Codebook.load(out / "codebook.dvq")
        ev.MetricsReport.from_dict(json.loads((out / "metrics.json").read_text()))
    log.info("PER %.4f  distortion %.4f  codebook %d  coverage %.3f", report.per, report.distortion, report.codebook_size, report.coverage)


def cmd_eval(args) -> None:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    corpus_dir = Path(args.corpus)
    if not (corpus_dir / "corpus.jsonl").is_file():
        raise CliError(f"no corpus at {corpus_dir}")
    state, cfg = load_checkpoint(ckpt)
    if state.stage != 4:
        log.warning("checkpoint is mid-training (stage %d)", state.stage)
    corpus = load_corpus(corpus_dir)
    if not corpus.truth:
        raise CliError("corpus has no truth file; cannot score")
    report = ev.evaluate(state.params, state.book, state.repeat_factor, corpus, {"checkpoint": str(ckpt)})
    text = report.dumps()
    if args.out:
        _write_file_atomic(args.out, text)
        ev.MetricsReport.from_dict(json.loads(Path(args.out).read_text()))
    else:
        sys.stdout.write(text)


def _arms(spec: str, base: TrainConfig) -> list[ev.Arm]:
    if spec in ("ratio", "ablation", "ratio-seeds"):
        return ev.builtin_arms(spec, base)
    path = _need_file(spec, "arm file")
    try:
        doc = json.loads(path.read_text())
        arms = [ev.Arm(a["name"], dict(a.get("overrides", {}))) for a in doc]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError(f"malformed arm file: {exc}") from exc
    for a in arms:
        try:
            base.with_overrides(a.overrides).validate()
        except (ConfigError, ValueError, TypeError) as exc:
            raise CliError(f"arm {a.name!r}: {exc}") from exc
    return arms


def cmd_sweep(args) -> None:
    base = _load_config(args.config, _overrides(args.set))
    arms = _arms(args.arms, base)
    with _staged_dir(args.out) as out:
        result = ev.sweep(base, arms, out_dir=out / "arms", workers=args.workers)
        result.write(out)
        json.loads((out / "results.json").read_text())
    sys.stdout.write(result.to_table())
    if result.failed():
        log.warning("%d of %d arms failed; see results.json", len(result.failed()), len(arms))


def describe_codebook(book: Codebook) -> str:
    lines = [f"codebook: {book.size} entries, dim {book.dim}, phonemes covered {len(book.covered_phonemes())}"]
    lines.append("index  phoneme  source        origin    support  vector")
    for i in range(book.size):
        ph = int(book.phoneme_of[i])
        vec = np.array2string(book.entries[i], precision=3, suppress_small=True, max_line_width=10_000)
        lines.append(
            f"{i:5d}  {(str(ph) if ph >= 0 else '-'):>7}  {Source(book.source_of[i]).name.lower():12s}  "
            f"{Origin(book.origin_of[i]).name.lower():8s}  {int(book.support[i]):7d}  {vec}"
        )
    lines.append(f"growth log: {len(book.growth_log)} events")
    for ev_ in book.growth_log:
        lines.append(f"  step {ev_.step}: added entry {ev_.index} ({Trigger(ev_.trigger).name.lower()})")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> None:
    path = _need_file(args.path, "codebook or checkpoint")
    if path.suffix == ".npz":
        state, _ = load_checkpoint(path)
        book = state.book
    else:
        try:
            book = Codebook.load(path)
        except ValueError as exc:
            raise CliError(f"cannot read codebook: {exc}") from exc
    sys.stdout.write(describe_codebook(book))


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynvq", description="Train and evaluate the dynamic-codebook VQ synthesizer.")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--spec", help="key = value corpus spec file")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec key")
    g.add_argument("--encoding", choices=("base64-f64le", "text"), default="base64-f64le")
    g.add_argument("--out", required=True, help="corpus directory to create")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the three training stages")
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--corpus", help="corpus directory (default: generate from the config's corpus keys)")
    t.add_argument("--resume", help="continue from a checkpoint.npz")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--seed", type=int, help="master seed (same as --set seed=N)")
    t.add_argument("--out", required=True, help="run directory to create")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus's test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", help="metrics.json path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a set of arms and tabulate them")
    s.add_argument("--config", help="base training config file")
    s.add_argument("--arms", required=True, help="ratio, ratio-seeds, ablation, or a JSON file of {name, overrides}")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a base config key")
    s.add_argument("--workers", type=int, default=1, help="parallel processes")
    s.add_argument("--out", required=True, help="sweep directory to create")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("inspect-codebook", help="dump codebook entries, assignments, origins and growth log")
    c.add_argument("path", help="codebook.dvq or checkpoint.npz")
    c.set_defaults(func=cmd_inspect)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr
    )
    try:
        args.func(args)
    except CliError as exc:
        print(f"dynvq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"dynvq {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
