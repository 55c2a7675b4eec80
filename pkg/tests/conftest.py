import sys
from pathlib import Path
from types import SimpleNamespace

import pytest
from hypothesis import settings

from dynvq import trainer as tr
from dynvq.corpus import gen_corpus
from dynvq.trainer import TrainConfig

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, derandomize=True)
settings.load_profile("default")


@pytest.fixture(scope="session")
def default_pipeline():
    """One full default-config run, stage by stage, with every stage-3 total kept."""
    cfg = TrainConfig()
    corpus = gen_corpus(cfg.corpus)
    state = tr.init_state(cfg, corpus)
    tr.stage1_paired(state, corpus.paired, cfg)
    after_stage1 = state.book.copy()
    tr.make_pseudo_labels(state, corpus.unpaired, corpus, cfg)
    tr.stage2_expand(state, corpus.unpaired, cfg)
    totals: list[float] = []
    tr.stage3_joint(state, corpus.paired, corpus.unpaired, cfg, on_step=lambda s, r: totals.append(r.total))
    return SimpleNamespace(cfg=cfg, corpus=corpus, state=state, after_stage1=after_stage1, stage3_totals=totals)
