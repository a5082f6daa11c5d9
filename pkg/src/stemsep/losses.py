"""Training objectives for joint multi-source mask estimation.

Four layers build on each other:

* ``mse_loss``     -- squared magnitude-spectrogram error for one target.
* ``wsdr_loss``    -- time-domain weighted SDR, a pair of negative cosine
                      similarities mixed by the source/residual energy ratio;
                      bounded in [-1, 1], no log involved.
* ``mdl``          -- multi-domain loss: mse + alpha * wsdr, evaluated before
                      and after the inverse-STFT layer that is appended
                      during training only.
* ``combination_loss`` -- the multi-domain loss averaged over every nonempty
                      proper subset of sources, where a subset's mask is the
                      sum of its member masks and its reference is the sum of
                      the member stems. The all-sources subset is excluded.

All functions accept tape tensors or plain arrays and return scalar tensors
(differentiable when any input is on a tape).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations as _subsets

import numpy as np

from . import dsp, tensor as tt
from .dsp import ComplexSpectrogram, Waveform
from .tensor import Tensor

DEFAULT_ALPHA = 10.0  # equalizes the spectral and time-domain loss ranges


@dataclass(frozen=True)
class Combination:
    """A nonempty proper subset of source indices."""

    indices: tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValueError("combination must be nonempty")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("combination has repeated indices")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


@dataclass
class CombinationTerm:
    combination: Combination
    mse: float
    wsdr: float
    mdl: float


@dataclass
class LossReport:
    total: float
    alpha: float
    terms: list[CombinationTerm] = field(default_factory=list)
    loss_node: Tensor | None = None


def _as_wave_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Waveform):
        return Tensor(x.samples)
    return Tensor(np.asarray(x, dtype=np.float64))


def mse_loss(est_mag, ref_mag) -> Tensor:
    """Sum over frames and bins of squared magnitude differences."""
    est = tt.lift(est_mag)
    ref = tt.lift(ref_mag)
    if est.shape != ref.shape:
        raise ValueError(f"mse_loss: shape mismatch {est.shape} vs {ref.shape}")
    diff = tt.sub(est, ref)
    return tt.tsum(tt.mul(diff, diff))


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    """cos(a, b) = <a,b> / sqrt(<a,a><b,b>); caller guarantees nonzero norms."""
    num = tt.dot(a, b)
    den = tt.sqrt(tt.mul(tt.dot(a, a), tt.dot(b, b)))
    return tt.div(num, den)


def wsdr_loss(est, ref, mix) -> Tensor:
    """Weighted SDR loss, bounded in [-1, 1] and scale-invariant in est.

    rho = |ref|^2 / (|ref|^2 + |mix - ref|^2) weighs a cosine on the target
    against a cosine on the residual. The estimate is first rescaled to the
    reference's energy, which makes the residual cosine (and hence the whole
    loss) invariant under positive scaling of the estimate. Degenerate
    inputs take the documented conventions: a zero-norm cosine operand turns
    its term into 0, with rho = 0 when the reference is silent and rho = 1
    when ref equals mix.
    """
    est_t, ref_t, mix_t = _as_wave_tensor(est), _as_wave_tensor(ref), _as_wave_tensor(mix)
    for name, t in (("est", est_t), ("ref", ref_t), ("mix", mix_t)):
        if t.ndim != 1:
            raise ValueError(f"wsdr_loss: {name} must be 1-D")
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"wsdr_loss: non-finite values in {name}")
    if not (est_t.shape == ref_t.shape == mix_t.shape):
        raise ValueError("wsdr_loss: length mismatch")

    res_t = tt.sub(mix_t, ref_t)
    # np.sum matches the tape's reduction order, keeping est == ref exact
    ref_energy = float(np.sum(ref_t.data * ref_t.data))
    res_energy = float(np.sum(res_t.data * res_t.data))
    est_energy = float(np.sum(est_t.data * est_t.data))

    if ref_energy == 0.0:
        rho = 0.0
    elif res_energy == 0.0:
        rho = 1.0
    else:
        rho = ref_energy / (ref_energy + res_energy)

    if ref_energy > 0.0 and est_energy > 0.0:
        # gain-align the estimate; the tape carries the dependence on est
        scale = tt.sqrt(tt.div(ref_energy, tt.dot(est_t, est_t)))
        est_t = tt.mul(est_t, scale)

    est_res_t = tt.sub(mix_t, est_t)
    est_res_energy = float(np.sum(est_res_t.data * est_res_t.data))

    terms = []
    if rho != 0.0 and ref_energy > 0.0 and est_energy > 0.0:
        terms.append(tt.mul(tt.neg(_cosine(ref_t, est_t)), rho))
    if rho != 1.0 and res_energy > 0.0 and est_energy > 0.0 and est_res_energy > 0.0:
        terms.append(tt.mul(tt.neg(_cosine(res_t, est_res_t)), 1.0 - rho))
    if not terms:
        return Tensor(np.float64(0.0))
    out = terms[0]
    for t in terms[1:]:
        out = tt.add(out, t)
    return out


def mdl(est_mag, ref_mag, est_wave, ref_wave, mix_wave, alpha: float = DEFAULT_ALPHA) -> Tensor:
    """Multi-domain loss: spectral MSE plus alpha times the time-domain wSDR."""
    spectral = mse_loss(est_mag, ref_mag)
    if alpha == 0.0:
        return spectral
    return tt.add(spectral, tt.mul(wsdr_loss(est_wave, ref_wave, mix_wave), alpha))


def enumerate_combinations(num_sources: int) -> list[Combination]:
    """All nonempty proper subsets of {0..J-1}, by size then lexicographic.

    The full set is excluded, so the count is 2^J - 2 (14 for J = 4).
    """
    if num_sources < 2:
        raise ValueError(f"need at least 2 sources, got {num_sources}")
    out = []
    for size in range(1, num_sources):
        for idx in _subsets(range(num_sources), size):
            out.append(Combination(idx))
    return out


def _sum_tensors(tensors) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = tt.add(out, t)
    return out


def combination_loss(
    masks,
    y_spec: ComplexSpectrogram,
    refs,
    mix,
    alpha: float = DEFAULT_ALPHA,
    use_mdl: bool = True,
) -> LossReport:
    """Average multi-domain loss over all mask combinations.

    For each subset the combined mask is the sum of member masks, the
    spectral estimate is that mask applied to the mixture spectrogram, the
    time estimate is its inverse STFT, and the reference is the sum of the
    member stems (magnitude of the coherent stem sum on the spectral side).
    With ``use_mdl`` false only the spectral MSE is scored per combination.
    """
    num_sources = len(masks)
    if num_sources < 2:
        raise ValueError("combination loss needs at least 2 sources")
    if len(refs) != num_sources:
        raise ValueError(f"got {num_sources} masks but {len(refs)} references")
    cfg = y_spec.config
    mix_t = _as_wave_tensor(mix)
    out_len = mix_t.shape[0]
    ref_arrays = [_as_wave_tensor(r).data for r in refs]
    for r in ref_arrays:
        if r.shape != mix_t.data.shape:
            raise ValueError("reference/mixture length mismatch")
    masks = [tt.lift(m) for m in masks]
    for m in masks:
        if m.shape != y_spec.shape:
            raise ValueError(f"mask shape {m.shape} does not match spectrogram {y_spec.shape}")

    y_mag = dsp.magnitude(y_spec)
    y_mag_const = y_mag.data

    combos = enumerate_combinations(num_sources)
    terms = []
    nodes = []
    for combo in combos:
        members = [masks[j] for j in combo]
        mask_sum = _sum_tensors(members)
        est_mag = tt.mul(mask_sum, y_mag_const)
        ref_wave = np.sum([ref_arrays[j] for j in combo], axis=0)
        ref_mag = dsp.magnitude(dsp.stft(ref_wave, cfg)).data

        spectral = mse_loss(est_mag, ref_mag)
        if use_mdl and alpha != 0.0:
            est_spec = dsp.apply_mask(mask_sum, y_spec)
            est_wave = dsp.istft(est_spec, cfg, out_len)
            time_term = wsdr_loss(est_wave, ref_wave, mix_t)
            node = tt.add(spectral, tt.mul(time_term, alpha))
            wsdr_val = time_term.item()
        else:
            node = spectral
            wsdr_val = 0.0
        nodes.append(node)
        terms.append(CombinationTerm(combo, spectral.item(), wsdr_val, node.item()))

    total_node = tt.div(_sum_tensors(nodes), float(len(combos)))
    return LossReport(total=total_node.item(), alpha=alpha, terms=terms, loss_node=total_node)


def plain_loss(
    masks,
    y_spec: ComplexSpectrogram,
    refs,
    mix,
    alpha: float = DEFAULT_ALPHA,
    use_mdl: bool = True,
) -> Tensor:
    """Mean per-source loss without combinations: MSE, or full MDL if use_mdl."""
    num_sources = len(masks)
    if num_sources < 1:
        raise ValueError("plain loss needs at least one source")
    if len(refs) != num_sources:
        raise ValueError(f"got {num_sources} masks but {len(refs)} references")
    cfg = y_spec.config
    mix_t = _as_wave_tensor(mix)
    out_len = mix_t.shape[0]
    y_mag_const = dsp.magnitude(y_spec).data

    nodes = []
    for j in range(num_sources):
        m = tt.lift(masks[j])
        if m.shape != y_spec.shape:
            raise ValueError(f"mask shape {m.shape} does not match spectrogram {y_spec.shape}")
        ref_wave = _as_wave_tensor(refs[j]).data
        est_mag = tt.mul(m, y_mag_const)
        ref_mag = dsp.magnitude(dsp.stft(ref_wave, cfg)).data
        spectral = mse_loss(est_mag, ref_mag)
        if use_mdl and alpha != 0.0:
            est_wave = dsp.istft(dsp.apply_mask(m, y_spec), cfg, out_len)
            nodes.append(tt.add(spectral, tt.mul(wsdr_loss(est_wave, ref_wave, mix_t), alpha)))
        else:
            nodes.append(spectral)
    return tt.div(_sum_tensors(nodes), float(num_sources))
