"""Mask-prediction network for J sources, with optional bridged wiring.

Each source has its own stack: affine encoder with tanh, one or more simple
recurrent (tanh) layers, and an affine decoder with a ReLU that yields a
nonnegative, unbounded mask. With ``bridging`` enabled the per-source
activations are replaced by their mean at exactly two points, after the
encoder and after the recurrent block, so the paths share information while
the parameter count stays identical to the unbridged wiring (averaging adds
no learnable weights, unlike concatenation).

Parameters live in a flat name -> array map, e.g. ``src2.rnn0.Wh``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

ModelParams = dict  # name -> np.ndarray, insertion order defines checkpoint layout


@dataclass(frozen=True)
class NetConfig:
    num_sources: int
    hidden_size: int
    num_bins: int
    num_recurrent_layers: int = 1
    bridging: bool = False

    def __post_init__(self):
        if self.num_sources < 2:
            raise ValueError("need at least 2 sources")
        if self.hidden_size < 1 or self.num_bins < 1 or self.num_recurrent_layers < 1:
            raise ValueError("hidden_size, num_bins and num_recurrent_layers must be >= 1")


def _layer_shapes(cfg: NetConfig):
    f, h = cfg.num_bins, cfg.hidden_size
    for j in range(cfg.num_sources):
        yield f"src{j}.enc.W", (f, h)
        yield f"src{j}.enc.b", (h,)
        for layer in range(cfg.num_recurrent_layers):
            yield f"src{j}.rnn{layer}.Wx", (h, h)
            yield f"src{j}.rnn{layer}.Wh", (h, h)
            yield f"src{j}.rnn{layer}.b", (h,)
        yield f"src{j}.dec.W", (h, f)
        yield f"src{j}.dec.b", (f,)


def init_params(cfg: NetConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform initialization, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _layer_shapes(cfg):
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def param_count(params: ModelParams) -> int:
    return sum(int(np.asarray(a).size) for a in params.values())


def _mean_tensors(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = tt.add(out, t)
    return tt.mul(out, 1.0 / len(tensors))


def _rnn_layer(x, wx, wh, b):
    """Unidirectional tanh recurrence over the frame axis of (T, H) input."""
    t_frames = x.shape[0]
    h_size = wh.shape[0]
    xp = tt.matmul(x, wx)
    h = Tensor(np.zeros(h_size))
    outputs = []
    for t in range(t_frames):
        h = tt.tanh(tt.add(tt.add(tt.take_row(xp, t), tt.matmul(h, wh)), b))
        outputs.append(h)
    return tt.stack_rows(outputs)


def forward(params: ModelParams, cfg: NetConfig, y_mag, stats=None) -> list[Tensor]:
    """Predict one nonnegative (T, F) mask per source from mixture magnitude.

    ``stats`` optionally holds per-bin (mean, std) input normalization. With
    bridging on, encoder outputs and recurrent outputs are each replaced by
    their across-source elementwise mean before the next stage.
    """
    x = tt.lift(y_mag)
    if x.ndim != 2 or x.shape[1] != cfg.num_bins:
        raise ValueError(f"expected (frames, {cfg.num_bins}) input, got {x.shape}")
    p = {k: tt.lift(v) for k, v in params.items()}
    expected = dict(_layer_shapes(cfg))
    for name, shape in expected.items():
        if name not in p:
            raise ValueError(f"missing parameter {name}")
        if p[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {p[name].shape}, expected {shape}")

    if stats is not None:
        mean, std = stats
        x = tt.mul(tt.sub(x, np.asarray(mean)), 1.0 / np.asarray(std))

    j_sources = cfg.num_sources
    encoded = [
        tt.tanh(tt.add(tt.matmul(x, p[f"src{j}.enc.W"]), p[f"src{j}.enc.b"]))
        for j in range(j_sources)
    ]
    if cfg.bridging:
        shared = _mean_tensors(encoded)
        encoded = [shared] * j_sources

    recurrent = []
    for j in range(j_sources):
        h = encoded[j]
        for layer in range(cfg.num_recurrent_layers):
            h = _rnn_layer(h, p[f"src{j}.rnn{layer}.Wx"], p[f"src{j}.rnn{layer}.Wh"],
                           p[f"src{j}.rnn{layer}.b"])
        recurrent.append(h)
    if cfg.bridging:
        shared = _mean_tensors(recurrent)
        recurrent = [shared] * j_sources

    masks = []
    for j in range(j_sources):
        logits = tt.add(tt.matmul(recurrent[j], p[f"src{j}.dec.W"]), p[f"src{j}.dec.b"])
        mask = tt.relu(logits)
        if not np.all(np.isfinite(mask.data)):
            raise FloatingPointError(f"non-finite activation in source {j} mask")
        masks.append(mask)
    return masks


def compute_norm_stats(mags: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean/std over a set of magnitude spectrograms (std floored)."""
    stacked = np.concatenate([np.asarray(m) for m in mags], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-4)
    return mean, std
