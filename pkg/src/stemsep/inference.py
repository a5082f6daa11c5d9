"""Full-track separation: STFT, mask prediction, masking, inverse STFT.

Long inputs are processed in overlapping chunks (default 30 s with a 1 s
linear crossfade) so recurrent state and spectrogram memory stay bounded.
The training-only loss machinery plays no part here; separation is exactly
mask-times-mixture-spectrogram followed by the inverse transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp, model
from .dsp import Waveform
from .training import Checkpoint

DEFAULT_CHUNK_SECONDS = 30.0
DEFAULT_CROSSFADE_SECONDS = 1.0


@dataclass
class SeparationResult:
    stems: dict  # source name -> Waveform, same length as the input mixture
    # |sum(stems) - mixture| / |mixture|: masks need not partition unity,
    # so stem-sum equality is reported, never asserted
    mixture_consistency: float = float("nan")
    chunk_count: int = 1

    @property
    def sources(self):
        return list(self.stems)


def mask_predictor(ckpt: Checkpoint):
    """Callable mapping a mixture magnitude (T, F) to J mask arrays."""

    def predict(y_mag: np.ndarray) -> list[np.ndarray]:
        masks = model.forward(ckpt.params, ckpt.net, y_mag, stats=ckpt.stats)
        return [m.data for m in masks]

    return predict


def _separate_chunk(samples: np.ndarray, ckpt: Checkpoint, predict) -> list[np.ndarray]:
    cfg = ckpt.train_config.stft
    spec = dsp.stft(samples, cfg)
    y_mag = np.hypot(spec.real.data, spec.imag.data)
    masks = predict(y_mag)
    if len(masks) != len(ckpt.sources):
        raise ValueError(f"predictor produced {len(masks)} masks for {len(ckpt.sources)} sources")
    out = []
    for mask in masks:
        est = dsp.istft(dsp.apply_mask(mask, spec), cfg, len(samples))
        out.append(est.data)
    return out


def separate(
    ckpt: Checkpoint,
    mixture: Waveform,
    chunk_seconds: float = DEFAULT_CHUNK_SECONDS,
    crossfade_seconds: float = DEFAULT_CROSSFADE_SECONDS,
    predict=None,
) -> SeparationResult:
    """Separate a mixture into the checkpoint's named stems.

    ``predict`` may override the mask network (used by tests and oracles);
    it must map a (T, F) magnitude array to one (T, F) mask per source.
    """
    if len(mixture) == 0:
        raise ValueError("cannot separate an empty mixture")
    if mixture.sample_rate != ckpt.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: input {mixture.sample_rate} Hz, "
            f"checkpoint expects {ckpt.sample_rate} Hz")
    if predict is None:
        predict = mask_predictor(ckpt)

    sr = mixture.sample_rate
    n = len(mixture)
    chunk_len = max(int(round(chunk_seconds * sr)), ckpt.train_config.stft.fft_size)
    fade_len = min(int(round(crossfade_seconds * sr)), chunk_len // 2)

    if n <= chunk_len:
        stems = _separate_chunk(mixture.samples, ckpt, predict)
        chunk_count = 1
    else:
        step = chunk_len - fade_len
        stems = [np.zeros(n) for _ in ckpt.sources]
        weight = np.zeros(n)
        chunk_count = 0
        start = 0
        while start < n:
            stop = min(start + chunk_len, n)
            if stop - start < ckpt.train_config.stft.fft_size and start > 0:
                start = max(0, stop - ckpt.train_config.stft.fft_size)
            piece = mixture.samples[start:stop]
            outs = _separate_chunk(piece, ckpt, predict)
            m = stop - start
            w = np.ones(m)
            if start > 0:
                ramp = min(fade_len, m)
                w[:ramp] = np.minimum(w[:ramp], np.arange(ramp) / ramp)
            if stop < n:
                ramp = min(fade_len, m)
                # complements the next chunk's rising head: the pair sums to 1
                w[-ramp:] = np.minimum(w[-ramp:], (np.arange(ramp)[::-1] + 1.0) / ramp)
            for buf, est in zip(stems, outs):
                buf[start:stop] += w * est
            weight[start:stop] += w
            chunk_count += 1
            if stop == n:
                break
            start += step
        weight[weight == 0.0] = 1.0
        stems = [s / weight for s in stems]

    for j, est in enumerate(stems):
        if not np.all(np.isfinite(est)):
            raise FloatingPointError(f"non-finite output in stem {ckpt.sources[j]}")
    named = {name: Waveform(est, sr) for name, est in zip(ckpt.sources, stems)}
    total = np.sum([w.samples for w in named.values()], axis=0)
    mix_norm = float(np.linalg.norm(mixture.samples))
    consistency = float(np.linalg.norm(total - mixture.samples) / mix_norm) if mix_norm > 0 else 0.0
    return SeparationResult(stems=named, mixture_consistency=consistency, chunk_count=chunk_count)
