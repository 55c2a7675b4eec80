import numpy as np
import pytest

from dynvq import ctc
from dynvq import numerics as nx
from dynvq import trainer as tr
from dynvq.codebook import Source
from dynvq.corpus import gen_corpus
from dynvq.eval import evaluate
from dynvq.model import BatchItem, batch_objective, clean_target
from dynvq.trainer import ConfigError, StageOrderError, TrainConfig

SMALL = dict(
    stage1_steps=40,
    stage3_steps=30,
    batch_size=4,
    latent_dim=6,
    conv_channels=6,
    encoder_hidden=6,
    decoder_hidden=6,
    log_every=5,
)
SMALL_CORPUS = {"corpus.paired_frames": 300, "corpus.unpaired_frames": 600, "corpus.test_utterances": 4}


def small_config(**extra):
    return TrainConfig().with_overrides({**SMALL, **SMALL_CORPUS, **extra})


# ----------------------------------------------------------------------------
# config
# ----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        {"delta_low": 0.5, "delta_high": 0.5},
        {"delta_low": 0.6, "delta_high": 0.4},
        {"delta_low": 0.0},
        {"delta_high": 1.0},
        {"tau": 0.0},
        {"alpha1": -1.0},
        {"alpha2": -0.1},
        {"batch_size": 0},
        {"pseudo_error_rate": 1.0},
        {"exponent": "cubic"},
        {"corpus.paired_frames": 0},
    ],
)
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(ConfigError):
        TrainConfig().with_overrides(bad).validate()


def test_defaults_validate():
    TrainConfig().validate()


def test_config_text_round_trip():
    cfg = small_config(seed=7, static_codebook=True)
    back = TrainConfig.loads(cfg.dumps())
    assert back == cfg and back.digest() == cfg.digest()


def test_config_file_parsing_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ntau = 2\ncorpus.seed = 3\nexponent = squared\n")
    cfg = TrainConfig.load(path, {"seed": 5})
    assert cfg.tau == 2.0 and isinstance(cfg.tau, float)
    assert cfg.corpus.seed == 3 and cfg.exponent == "squared" and cfg.seed == 5
    with pytest.raises(ConfigError):
        TrainConfig.loads("no_such_key = 1\n")
    with pytest.raises(ConfigError):
        TrainConfig.loads("corpus.no_such_key = 1\n")


def test_digest_tracks_content():
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig().digest() != TrainConfig(seed=1).digest()


# ----------------------------------------------------------------------------
# stage ordering and edge cases
# ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small():
    cfg = small_config()
    return cfg, gen_corpus(cfg.corpus)


def test_stages_must_run_in_order(small):
    cfg, corpus = small
    state = tr.init_state(cfg, corpus)
    with pytest.raises(StageOrderError):
        tr.stage2_expand(state, corpus.unpaired, cfg)
    with pytest.raises(StageOrderError):
        tr.stage3_joint(state, corpus.paired, corpus.unpaired, cfg)
    tr.stage1_paired(state, corpus.paired, cfg)
    assert state.stage == 2
    with pytest.raises(StageOrderError):
        tr.stage1_paired(state, corpus.paired, cfg)
    with pytest.raises(StageOrderError):
        tr.stage2_expand(state, corpus.unpaired, cfg)  # pseudo labels missing


def test_empty_paired_set_is_an_error(small):
    cfg, corpus = small
    state = tr.init_state(cfg, corpus)
    with pytest.raises(ValueError):
        tr.stage1_paired(state, [], cfg)


def test_empty_unpaired_set_only_moves_the_stage_marker(small):
    cfg, corpus = small
    state = tr.init_state(cfg, corpus)
    tr.stage1_paired(state, corpus.paired, cfg)
    book, params, history = state.book.to_bytes(), {k: v.copy() for k, v in state.params.items()}, list(state.history)
    tr.stage2_expand(state, [], cfg)
    assert state.stage == 3
    assert state.book.to_bytes() == book and state.history == history
    assert all(np.array_equal(params[k], state.params[k]) for k in params)


def test_stage2_never_shrinks_the_codebook_and_maps_new_entries(small):
    cfg, corpus = small
    state = tr.init_state(cfg, corpus)
    tr.stage1_paired(state, corpus.paired, cfg)
    before = state.book.size
    tr.make_pseudo_labels(state, corpus.unpaired, corpus, cfg)
    tr.stage2_expand(state, corpus.unpaired, cfg)
    assert state.book.size >= before
    assert state.stage2["added"] == state.book.size - before
    s2 = state.stage2
    assert s2["added"] + s2["refined"] + s2["dropped"] == s2["frames"] == corpus.frames("unpaired")
    new = state.book.source_of[before:]
    assert set(new.tolist()) <= {Source.NONE, Source.PSEUDO}


def test_history_is_append_only_and_stages_increase(small):
    cfg, corpus = small
    state = tr.train(cfg, corpus)
    assert state.stage == 4
    steps = [h["step"] for h in state.history]
    stages = [h["stage"] for h in state.history]
    assert steps == sorted(steps) and stages == sorted(stages)
    for h in state.history:
        assert np.isfinite(h["total"])


def test_alpha2_zero_drops_only_the_decoder_term(small):
    cfg, corpus = small
    state = tr.init_state(cfg, corpus)
    tr.stage1_paired(state, corpus.paired, cfg)
    groups = ctc.phoneme_groups(state.book, state.n_phonemes)
    mapped = state.book.covered_phonemes()
    items = [BatchItem(u.frames, clean_target(u.label.phonemes, mapped), u.label.phonemes) for u in corpus.paired[:3]]
    book = nx.Tensor(state.book.entries)

    def run(a1, a2):
        return batch_objective(state.params, book, state.book, items, groups, state.n_phonemes, a1, a2).report

    full, no_dec = run(0.5, 1.0), run(0.5, 0.0)
    assert no_dec.total == no_dec.recon + 0.5 * no_dec.recog
    assert no_dec.recon == full.recon and no_dec.recog == full.recog
    assert no_dec.total == pytest.approx(full.total - full.dec, rel=1e-12)


def test_static_codebook_adds_nothing(small):
    cfg, corpus = small
    cfg = cfg.with_overrides({"static_codebook": True})
    state = tr.init_state(cfg, corpus)
    tr.stage1_paired(state, corpus.paired, cfg)
    size = state.book.size
    tr.make_pseudo_labels(state, corpus.unpaired, corpus, cfg)
    tr.stage2_expand(state, corpus.unpaired, cfg)
    assert state.book.size == size and state.stage2["added"] == 0


def test_stage2_gradient_flag_changes_parameters(small):
    cfg, corpus = small
    cfg = cfg.with_overrides({"stage2_grad_steps": 3})
    state = tr.init_state(cfg, corpus)
    tr.stage1_paired(state, corpus.paired, cfg)
    w = state.params["enc.out_w"].copy()
    tr.make_pseudo_labels(state, corpus.unpaired, corpus, cfg)
    tr.stage2_expand(state, corpus.unpaired, cfg)
    assert not np.array_equal(w, state.params["enc.out_w"])


# ----------------------------------------------------------------------------
# checkpoints and determinism
# ----------------------------------------------------------------------------


def _through_stage2(cfg, corpus):
    state = tr.init_state(cfg, corpus)
    tr.stage1_paired(state, corpus.paired, cfg)
    tr.make_pseudo_labels(state, corpus.unpaired, corpus, cfg)
    tr.stage2_expand(state, corpus.unpaired, cfg)
    return state


def test_checkpoint_mid_stage3_resumes_bit_identically(small, tmp_path):
    cfg, corpus = small
    straight = _through_stage2(cfg, corpus)
    tr.stage3_joint(straight, corpus.paired, corpus.unpaired, cfg)

    paused = _through_stage2(cfg, corpus)
    tr.stage3_joint(paused, corpus.paired, corpus.unpaired, cfg, stop_at=13)
    assert paused.stage == 3 and paused.stage_step == 13
    tr.save_checkpoint(paused, cfg, tmp_path / "ck.npz")
    resumed, cfg2 = tr.load_checkpoint(tmp_path / "ck.npz")
    assert cfg2 == cfg
    tr.run_stages(resumed, cfg2, corpus)

    assert resumed.history == straight.history
    assert resumed.book.to_bytes() == straight.book.to_bytes()
    for k in straight.params:
        assert np.array_equal(resumed.params[k], straight.params[k])
    a = evaluate(straight.params, straight.book, straight.repeat_factor, corpus).dumps()
    b = evaluate(resumed.params, resumed.book, resumed.repeat_factor, corpus).dumps()
    assert a == b


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, meta=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        tr.load_checkpoint(path)


def test_same_seed_same_run(small):
    cfg, corpus = small
    a, b = tr.train(cfg, corpus), tr.train(cfg, corpus)
    assert a.book.to_bytes() == b.book.to_bytes() and a.history == b.history
    c = tr.train(cfg.with_overrides({"seed": 1}), corpus)
    assert c.history != a.history


def test_write_run_lays_out_the_directory(small, tmp_path):
    cfg, corpus = small
    state = tr.train(cfg, corpus)
    out = tr.write_run(tmp_path / "run", state, cfg, corpus=corpus)
    names = {p.name for p in out.iterdir()}
    assert {"config.cfg", "inputs.sha256", "checkpoint.npz", "codebook.dvq", "history.json"} <= names
    assert TrainConfig.load(out / "config.cfg") == cfg
    assert (out / "inputs.sha256").read_text().strip() == tr.input_digest(cfg, corpus)


# ----------------------------------------------------------------------------
# default-config behaviour (one shared run)
# ----------------------------------------------------------------------------


@pytest.mark.slow
def test_stage1_maps_most_paired_phonemes(default_pipeline):
    book = default_pipeline.after_stage1
    covered = book.covered_phonemes()
    assert len(covered & set(range(15))) >= 0.8 * 15
    assert all(book.source_of[i] == Source.GROUND_TRUTH for i in range(book.size) if book.phoneme_of[i] >= 0)


@pytest.mark.slow
def test_stage2_adds_entries_when_unpaired_coverage_is_wider(default_pipeline):
    assert default_pipeline.state.stage2["added"] > 0
    assert default_pipeline.state.book.size > default_pipeline.after_stage1.size


@pytest.mark.slow
def test_stage2_adds_nothing_when_coverage_matches_and_threshold_is_tiny():
    cfg = TrainConfig().with_overrides({"delta_low": 0.01, "corpus.unpaired_coverage": list(range(15))})
    corpus = gen_corpus(cfg.corpus)
    state = _through_stage2(cfg, corpus)
    assert state.stage2["added"] <= 1


def _block_means(totals, width):
    t = np.asarray(totals)
    return t[: len(t) // width * width].reshape(-1, width).mean(1)


@pytest.mark.slow
def test_stage3_loss_falls_in_500_step_blocks(default_pipeline):
    means = _block_means(default_pipeline.stage3_totals, 500)
    assert len(means) == 6
    assert (np.diff(means) <= 0).all()


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="minibatch noise: the 50-step moving average rises on roughly half the steps")
def test_stage3_loss_moving_average_never_rises(default_pipeline):
    t = np.asarray(default_pipeline.stage3_totals)
    ma = np.convolve(t, np.ones(50) / 50, "valid")
    assert (np.diff(ma) <= 0).all()


@pytest.mark.slow
def test_stage3_loss_trend_is_downward(default_pipeline):
    t = np.asarray(default_pipeline.stage3_totals)
    ma = np.convolve(t, np.ones(50) / 50, "valid")
    assert ma[-1] < 0.6 * ma[0]
