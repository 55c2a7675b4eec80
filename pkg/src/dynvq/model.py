"""Sequential autoencoder: conv + recurrent encoder, recurrent decoder, loss terms.

Utterances in a batch are laid end to end along the time axis; ``seq_starts``
marks where each one begins, and every sequence operation resets there.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ctc
from . import numerics as nx
from .codebook import Codebook, log_posterior_tensor, lookup_indices, nearest_many
from .segmentation import combine


@dataclass
class ModelConfig:
    feature_dim: int = 8
    latent_dim: int = 16
    conv_width: int = 3
    conv_channels: int = 32
    encoder_hidden: int = 32
    decoder_hidden: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    recon: float
    recog: float
    dec: float
    total: float
    alpha1: float
    alpha2: float

    def check(self, tol: float = 1e-12) -> None:
        expect = combine_losses(self.recon, self.recog, self.dec, self.alpha1, self.alpha2)
        if abs(self.total - expect) > tol:
            raise AssertionError(f"total {self.total} != weighted sum {expect}")


def combine_losses(recon, recog, dec, alpha1: float, alpha2: float):
    """recon + alpha1 * recog + alpha2 * dec; works on floats and tensors alike."""
    if isinstance(recon, nx.Tensor):
        return nx.add(nx.add(recon, nx.mul(recog, alpha1)), nx.mul(dec, alpha2))
    return recon + alpha1 * recog + alpha2 * dec


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    k, f, c = cfg.conv_width, cfg.feature_dim, cfg.conv_channels
    he, hd, d = cfg.encoder_hidden, cfg.decoder_hidden, cfg.latent_dim
    if k % 2 != 1:
        raise ValueError("conv_width must be odd")

    def dense(fan_in, shape, gain=1.0):
        return gain * rng.standard_normal(shape) / np.sqrt(fan_in)

    return {
        "enc.conv_w": dense(k * f, (k, f, c)),
        "enc.conv_b": np.zeros(c),
        "enc.rnn_wx": dense(c, (c, he)),
        "enc.rnn_wh": dense(he, (he, he), 0.5),
        "enc.rnn_b": np.zeros(he),
        "enc.out_w": dense(he, (he, d), 2.0),
        "enc.out_b": np.zeros(d),
        "dec.rnn_wx": dense(d, (d, hd)),
        "dec.rnn_wh": dense(hd, (hd, hd), 0.5),
        "dec.rnn_b": np.zeros(hd),
        "dec.out_w": dense(hd, (hd, f)),
        "dec.out_b": np.zeros(f),
    }


def _t(params: Mapping, name: str) -> nx.Tensor:
    return nx.as_tensor(params[name])


def encode_batch(params: Mapping, frames, seq_starts=(0,)) -> nx.Tensor:
    """(M, F) frames -> (M, D) latents."""
    x = nx.as_tensor(frames)
    h = nx.tanh(nx.edge_conv1d(x, _t(params, "enc.conv_w"), _t(params, "enc.conv_b"), seq_starts))
    pre = nx.add(nx.matmul(h, _t(params, "enc.rnn_wx")), _t(params, "enc.rnn_b"))
    h = nx.tanh_recurrence(pre, _t(params, "enc.rnn_wh"), seq_starts)
    return nx.add(nx.matmul(h, _t(params, "enc.out_w")), _t(params, "enc.out_b"))


def encode(frames, params: Mapping) -> np.ndarray:
    """Latents (T, D) for one utterance's frames (T, F)."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[0] < 1:
        raise ValueError("utterance has no frames")
    want = np.shape(nx.as_tensor(params["enc.conv_w"]).data)[1]
    if frames.shape[1] != want:
        raise ValueError(f"frame dimension {frames.shape[1]} does not match encoder input {want}")
    return encode_batch(params, frames).data


def even_repeats(n_inputs: int, target_length: int) -> np.ndarray:
    """Split ``target_length`` frames over ``n_inputs`` spans as evenly as possible."""
    if n_inputs < 1:
        raise ValueError("nothing to upsample")
    if target_length < n_inputs:
        raise ValueError(f"cannot stretch {n_inputs} inputs over {target_length} frames")
    base, extra = divmod(target_length, n_inputs)
    reps = np.full(n_inputs, base, dtype=np.int64)
    reps[:extra] += 1
    return reps


def decode_batch(params: Mapping, inputs, repeats, seq_starts=(0,)) -> nx.Tensor:
    """Upsample (S, D) inputs by ``repeats`` and decode to frames.

    ``seq_starts`` refers to the upsampled time axis.
    """
    up = nx.repeat_rows(inputs, repeats)
    pre = nx.add(nx.matmul(up, _t(params, "dec.rnn_wx")), _t(params, "dec.rnn_b"))
    h = nx.tanh_recurrence(pre, _t(params, "dec.rnn_wh"), seq_starts)
    return nx.add(nx.matmul(h, _t(params, "dec.out_w")), _t(params, "dec.out_b"))


def decode(vectors, params: Mapping, target_length: int | None = None, spans=None, repeat: int | None = None) -> np.ndarray:
    """Frames for one sequence of segment vectors or codewords.

    Exactly one way of upsampling applies: ``spans`` (training mode, true
    segment spans), ``repeat`` (synthesis mode, fixed factor) or
    ``target_length`` (even spread).
    """
    vectors = np.atleast_2d(np.asarray(nx.as_tensor(vectors).data))
    if vectors.shape[0] == 0:
        raise ValueError("nothing to decode")
    if spans is not None:
        spans = np.asarray(spans)
        reps = spans[:, 1] - spans[:, 0]
    elif repeat is not None:
        reps = np.full(vectors.shape[0], int(repeat), dtype=np.int64)
    elif target_length is not None:
        reps = even_repeats(vectors.shape[0], target_length)
    else:
        raise ValueError("need spans, repeat or target_length")
    if target_length is not None and int(reps.sum()) != target_length:
        raise ValueError(f"upsampling gives {int(reps.sum())} frames, expected {target_length}")
    return decode_batch(params, vectors, reps).data


def clean_target(phonemes: Sequence[int], mapped: set[int]) -> list[int]:
    """Drop phonemes the grid cannot emit, then merge the repeats that leaves behind."""
    out: list[int] = []
    for p in phonemes:
        if p in mapped and (not out or out[-1] != p):
            out.append(int(p))
    return out


@dataclass
class BatchItem:
    frames: np.ndarray
    recog_target: Sequence[int] | None = None
    dec_target: Sequence[int] | None = None


@dataclass
class BatchResult:
    total: nx.Tensor
    report: LossReport
    indices: np.ndarray
    spans: np.ndarray


def batch_objective(
    params: Mapping,
    book_param: nx.Tensor,
    book: Codebook,
    items: Sequence[BatchItem],
    groups: np.ndarray,
    n_phonemes: int,
    alpha1: float,
    alpha2: float,
    exponent: str = "norm",
) -> BatchResult:
    """Weighted reconstruction + recognition + decoder loss over a batch.

    ``groups`` maps each codebook entry to its CTC output column (phoneme,
    or ``n_phonemes`` for blank).  Recognition targets must already be
    emittable (see :func:`clean_target`); targets shorter than needed are
    skipped.  Decoder targets use each phoneme's best codeword, spread
    evenly over the utterance; unmapped phonemes are dropped.
    """
    lengths = np.array([it.frames.shape[0] for it in items], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    x = np.concatenate([it.frames for it in items], axis=0)
    xt = nx.Tensor(x)

    z = encode_batch(params, xt, starts)
    idx = nearest_many(z.data, book)
    q = nx.straight_through(z, nx.take_rows(book_param, idx))
    seg = combine(q, idx, starts)
    recon_frames = decode_batch(params, seg.vectors, seg.lengths, starts)
    recon = nx.mse(recon_frames, xt)

    zero = nx.Tensor(0.0)
    recog = zero
    targets = []
    for it, n in zip(items, lengths):
        t = it.recog_target
        targets.append(list(t) if t is not None and len(t) > 0 and ctc.min_frames(t) <= n else None)
    n_recog = sum(t is not None for t in targets)
    if alpha1 != 0.0 and n_recog:
        logpost = log_posterior_tensor(z, book_param, 1.0, exponent)
        grid = ctc.project_tensor(logpost, groups, n_phonemes)
        per_utt = ctc.ctc_nll(grid, targets, starts)
        weights = np.array([1.0 / n_recog if t is not None else 0.0 for t in targets])
        recog = nx.total(nx.mul(per_utt, weights))

    dec = zero
    if alpha2 != 0.0:
        rows, reps, dec_starts, frames = [], [], [], []
        used = 0
        for it in items:
            if it.dec_target is None:
                continue
            ids = lookup_indices(it.dec_target, book, on_unmapped="skip")
            n = it.frames.shape[0]
            if ids.size == 0 or ids.size > n:
                continue
            rows.append(ids)
            reps.append(even_repeats(ids.size, n))
            dec_starts.append(used)
            frames.append(it.frames)
            used += n
        if rows:
            synth = decode_batch(
                params, nx.take_rows(book_param, np.concatenate(rows)), np.concatenate(reps), dec_starts
            )
            dec = nx.mse(synth, nx.Tensor(np.concatenate(frames, axis=0)))

    total = combine_losses(recon, recog, dec, alpha1, alpha2)
    report = LossReport(
        float(recon.data), float(recog.data), float(dec.data), float(total.data), float(alpha1), float(alpha2)
    )
    return BatchResult(total, report, idx, seg.spans)


def losses(x, x_recon, grid, target, decoded_from_labels, alpha1: float = 0.5, alpha2: float = 1.0) -> LossReport:
    """Loss terms for one utterance from already computed pieces.

    ``grid`` is a :class:`ctc.FramePosteriorGrid`; ``decoded_from_labels``
    may be None when there is no decoder term.
    """
    x = np.asarray(x, dtype=np.float64)
    x_recon = np.asarray(x_recon, dtype=np.float64)
    if x.shape != x_recon.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_recon.shape}")
    recon = float(np.mean((x - x_recon) ** 2))
    recog = ctc.ctc_loss(grid, list(target))
    dec = 0.0
    if decoded_from_labels is not None:
        d = np.asarray(decoded_from_labels, dtype=np.float64)
        if d.shape != x.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {d.shape}")
        dec = float(np.mean((d - x) ** 2))
    total = combine_losses(recon, recog, dec, alpha1, alpha2)
    return LossReport(recon, recog, dec, total, float(alpha1), float(alpha2))
