import csv
import io
import json
import subprocess
import sys

import pytest

from dynvq.cli import describe_codebook, run
from dynvq.codebook import Codebook

TINY_CFG = """\
# small enough for a test
stage1_steps = 20
stage3_steps = 10
batch_size = 4
latent_dim = 6
conv_channels = 6
encoder_hidden = 6
decoder_hidden = 6
corpus.paired_frames = 200
corpus.unpaired_frames = 300
corpus.test_utterances = 3
"""

TINY_SPEC = """\
paired_frames = 200
unpaired_frames = 300
test_utterances = 3
"""


@pytest.fixture
def files(tmp_path):
    (tmp_path / "t.cfg").write_text(TINY_CFG)
    (tmp_path / "spec.cfg").write_text(TINY_SPEC)
    return tmp_path


def _leftovers(directory):
    return sorted(p.name for p in directory.iterdir() if p.name.startswith("."))


def test_pipeline_contract(files, capsys):
    assert run(["-q", "gen-data", "--spec", str(files / "spec.cfg"), "--out", str(files / "corpus")]) == 0
    assert (files / "corpus" / "corpus.jsonl").is_file() and (files / "corpus" / "truth.jsonl").is_file()
    args = ["-q", "train", "--config", str(files / "t.cfg"), "--corpus", str(files / "corpus"), "--out", str(files / "run1")]
    assert run(args) == 0
    run1 = files / "run1"
    for name in ("checkpoint.npz", "metrics.json", "codebook.dvq", "config.cfg", "inputs.sha256", "history.json"):
        assert (run1 / name).is_file(), name
    metrics = json.loads((run1 / "metrics.json").read_text())
    assert metrics["version"] == 1 and metrics["per"] >= 0

    assert run(["-q", "eval", "--checkpoint", str(run1 / "checkpoint.npz"), "--corpus", str(files / "corpus")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["per"] == metrics["per"] and printed["distortion"] == metrics["distortion"]

    out = files / "m.json"
    assert run(["-q", "eval", "--checkpoint", str(run1 / "checkpoint.npz"), "--corpus", str(files / "corpus"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["per"] == metrics["per"]
    assert _leftovers(files) == []


def test_text_encoded_corpus_trains_the_same(files):
    for enc in ("base64-f64le", "text"):
        assert run(["-q", "gen-data", "--spec", str(files / "spec.cfg"), "--encoding", enc, "--out", str(files / enc)]) == 0
        assert run(["-q", "train", "--config", str(files / "t.cfg"), "--corpus", str(files / enc), "--out", str(files / f"run-{enc}")]) == 0
    a = (files / "run-base64-f64le" / "codebook.dvq").read_bytes()
    b = (files / "run-text" / "codebook.dvq").read_bytes()
    assert a == b


def test_reproduce_from_config_echo(files):
    assert run(["-q", "train", "--config", str(files / "t.cfg"), "--seed", "3", "--out", str(files / "a")]) == 0
    assert run(["-q", "train", "--config", str(files / "a" / "config.cfg"), "--out", str(files / "b")]) == 0
    for name in ("metrics.json", "codebook.dvq", "config.cfg", "inputs.sha256", "history.json"):
        assert (files / "a" / name).read_bytes() == (files / "b" / name).read_bytes(), name


def test_resume_finishes_a_checkpoint(files):
    assert run(["-q", "train", "--config", str(files / "t.cfg"), "--out", str(files / "a")]) == 0
    assert run(["-q", "train", "--resume", str(files / "a" / "checkpoint.npz"), "--out", str(files / "b")]) == 0
    assert (files / "a" / "codebook.dvq").read_bytes() == (files / "b" / "codebook.dvq").read_bytes()


def test_bad_thresholds_fail_before_any_compute(files, capsys, monkeypatch):
    import dynvq.cli as cli

    def boom(*a, **k):
        raise AssertionError("training started")

    monkeypatch.setattr(cli, "run_stages", boom)
    monkeypatch.setattr(cli, "gen_corpus", boom)
    code = run(["train", "--config", str(files / "t.cfg"), "--set", "delta_low=0.8", "--set", "delta_high=0.5", "--out", str(files / "x")])
    assert code != 0
    assert "delta_low" in capsys.readouterr().err
    assert not (files / "x").exists() and _leftovers(files) == []


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--config", "{d}/missing.cfg", "--out", "{d}/x"],
        ["train", "--config", "{d}/t.cfg", "--corpus", "{d}/nowhere", "--out", "{d}/x"],
        ["eval", "--checkpoint", "{d}/missing.npz", "--corpus", "{d}"],
        ["inspect-codebook", "{d}/missing.dvq"],
        ["gen-data", "--spec", "{d}/missing.cfg", "--out", "{d}/x"],
        ["sweep", "--config", "{d}/t.cfg", "--arms", "{d}/no-arms.json", "--out", "{d}/x"],
    ],
)
def test_missing_files_give_nonzero_exit_and_a_message(files, capsys, argv):
    code = run([a.format(d=files) for a in argv])
    err = capsys.readouterr().err
    assert code != 0 and ("not found" in err or "no corpus" in err)
    assert not (files / "x").exists()


def test_unknown_flag_and_unknown_key(files, capsys):
    assert run(["train", "--bogus", "--out", str(files / "x")]) != 0
    assert "unrecognized arguments" in capsys.readouterr().err
    assert run(["train", "--config", str(files / "t.cfg"), "--set", "nope=1", "--out", str(files / "x")]) == 2
    assert "nope" in capsys.readouterr().err
    assert run(["train", "--set", "justakey", "--out", str(files / "x")]) == 2


def test_failed_training_leaves_nothing_behind(files, capsys, monkeypatch):
    import dynvq.cli as cli

    def explode(*a, **k):
        raise ValueError("simulated failure mid-run")

    monkeypatch.setattr(cli, "write_run", explode)
    assert run(["train", "--config", str(files / "t.cfg"), "--out", str(files / "x")]) == 1
    assert "simulated failure" in capsys.readouterr().err
    assert not (files / "x").exists() and _leftovers(files) == []


def test_refuses_to_overwrite_a_populated_directory(files, capsys):
    (files / "x").mkdir()
    (files / "x" / "keep.txt").write_text("mine")
    assert run(["train", "--config", str(files / "t.cfg"), "--out", str(files / "x")]) == 2
    assert (files / "x" / "keep.txt").read_text() == "mine"


def test_ratio_sweep_has_four_ratios(files, capsys):
    assert run(["-q", "sweep", "--config", str(files / "t.cfg"), "--arms", "ratio", "--out", str(files / "sw")]) == 0
    rows = list(csv.DictReader(io.StringIO((files / "sw" / "results.csv").read_text())))
    ratios = sorted({r["arm"].split("-")[0] for r in rows})
    assert ratios == sorted(["1:10", "1:5", "1:2.5", "1:1"])
    assert len(rows) == 8
    assert "1:10-semi" in capsys.readouterr().out
    assert (files / "sw" / "results.json").is_file() and (files / "sw" / "results.txt").is_file()


def test_arm_file_with_unknown_key_is_rejected_up_front(files, capsys):
    arms = [{"name": "ok", "overrides": {"seed": 1}}, {"name": "bad", "overrides": {"nope": 1}}]
    (files / "arms.json").write_text(json.dumps(arms))
    code = run(["-q", "sweep", "--config", str(files / "t.cfg"), "--arms", str(files / "arms.json"), "--out", str(files / "sw")])
    assert code == 2 and "bad" in capsys.readouterr().err


def test_inspect_codebook(files, capsys):
    assert run(["-q", "train", "--config", str(files / "t.cfg"), "--out", str(files / "r")]) == 0
    capsys.readouterr()
    assert run(["inspect-codebook", str(files / "r" / "codebook.dvq")]) == 0
    text = capsys.readouterr().out
    book = Codebook.load(files / "r" / "codebook.dvq")
    assert text == describe_codebook(book)
    assert text.startswith(f"codebook: {book.size} entries")
    assert "growth log:" in text and "ground_truth" in text
    assert run(["inspect-codebook", str(files / "r" / "checkpoint.npz")]) == 0
    assert capsys.readouterr().out == text
    (files / "junk.dvq").write_bytes(b"nope")
    assert run(["inspect-codebook", str(files / "junk.dvq")]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dynvq", "--help"], capture_output=True, text=True, check=True)
    for sub in ("gen-data", "train", "eval", "sweep", "inspect-codebook"):
        assert sub in out.stdout
