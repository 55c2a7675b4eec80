"""
Quantization, segmentation and codebook growth on one utterance
===============================================================

An untrained encoder maps each frame to a latent, every latent snaps to its
nearest codeword, runs of the same codeword merge into one segment, and the
update rule decides frame by frame whether to grow the codebook.
"""

import numpy as np

from dynvq.codebook import Codebook, dynamic_update, nearest_many, posterior_matrix
from dynvq.corpus import CorpusSpec, gen_corpus
from dynvq.model import ModelConfig, encode, init_params
from dynvq.numerics import Tensor
from dynvq.segmentation import combine

# a small corpus: the paired split covers phonemes 0-14, the unpaired split all 26
corpus = gen_corpus(CorpusSpec(paired_frames=300, unpaired_frames=300, test_utterances=2))
utt = corpus.paired[0]
truth = corpus.truth[utt.id]
print(f"utterance {utt.id}: {utt.length} frames, phonemes {list(truth.phonemes)}, durations {list(truth.durations)}")

# encode with a freshly initialised model
params = init_params(ModelConfig(feature_dim=8), np.random.default_rng(0))
z = encode(utt.frames, params)
print("latents:", z.shape)

# a codebook seeded from a handful of latents, so some frames sit close to an entry
book = Codebook.from_vectors(z[:: max(1, utt.length // 4)])
idx = nearest_many(z, book)
print("nearest codeword per frame:", idx.tolist())

# runs of equal indices become segments
seg = combine(Tensor(book.entries[idx]), idx)
print("segments (index, span):", list(zip(seg.indices.tolist(), seg.spans.tolist())))

# sharpened posteriors decide growth: below delta_low adds, above delta_high refines
tau = 0.5
top = np.exp(posterior_matrix(z, book, tau).max(axis=1))
print("max posterior per frame:", np.round(top, 3).tolist())
before = book.size
report = dynamic_update(z, None, book, delta_low=0.6, delta_high=0.999, tau=tau)
print(f"added {report.added}, refined {report.refined}, dropped {report.dropped}; size {before} -> {book.size}")
for event in book.growth_log:
    print(f"  new entry {event.index} ({event.trigger.name.lower()})")
