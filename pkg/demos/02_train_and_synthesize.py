"""
Three training stages on a reduced budget, then synthesis from text
==================================================================

Stage 1 learns from paired data only, stage 2 grows the codebook from
unpaired latents, stage 3 trains on both.  Afterwards a phoneme string is
turned into frames and read back by the model's own recognizer.

Runs in well under a minute on one core.
"""

from dynvq import trainer as tr
from dynvq.corpus import gen_corpus
from dynvq.eval import evaluate, synthesize_and_score

# a short stage 1 leaves latents loose, so stage 2 adds far more entries than the default run
cfg = tr.TrainConfig().with_overrides({"stage1_steps": 600, "stage3_steps": 600})
corpus = gen_corpus(cfg.corpus)
state = tr.init_state(cfg, corpus)

tr.stage1_paired(state, corpus.paired, cfg)
print(f"after stage 1: {state.book.size} entries, {len(state.book.covered_phonemes())} phonemes mapped")

tr.make_pseudo_labels(state, corpus.unpaired, corpus, cfg)
tr.stage2_expand(state, corpus.unpaired, cfg)
print(f"after stage 2: {state.book.size} entries, {len(state.book.covered_phonemes())} phonemes mapped")
print("  update decisions:", state.stage2)

tr.stage3_joint(state, corpus.paired, corpus.unpaired, cfg)
print(f"after stage 3: loss {state.history[0]['total']:.3f} -> {state.history[-1]['total']:.3f}")

# synthesize one test transcript; phonemes without a codeword are skipped
utt = corpus.test[0]
text = list(corpus.truth[utt.id].phonemes)
score = synthesize_and_score(
    state.params, state.book, text, utt.frames, state.repeat_factor, state.n_phonemes, on_unmapped="skip"
)
print(f"text       {text}")
print(f"recognized {score.recognized}")
print(f"PER {score.per:.3f}, distortion {score.distortion:.3f}, skipped {score.skipped}")

report = evaluate(state.params, state.book, state.repeat_factor, corpus)
print(f"test split: PER {report.per:.3f}, distortion {report.distortion:.3f}, coverage {report.coverage:.2f}")
