"""BSSEval-style SDR and SAR with median-of-frames, median-of-tracks scoring.

This is a simplified zero-lag variant: SDR projects the estimate onto the
reference frame (a scalar projection), SAR projects it onto the span of all
reference frames (ridge-regularized least squares). No 512-tap distortion
filters are fitted, so conformance with museval is explicitly not claimed.
Frames are non-overlapping (hop equals frame length, default one second) and
frames with a silent reference are excluded rather than scored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dsp import Waveform

DB_CLAMP = 100.0
SILENT_ENERGY = 0.0  # a frame is silent when its reference energy is exactly 0
RIDGE = 1e-10


@dataclass
class TrackScore:
    """Per-source median-over-frames values for one track."""

    track_id: str
    sdr: dict = field(default_factory=dict)  # source -> median dB
    sar: dict = field(default_factory=dict)


@dataclass
class FrameRecord:
    track_id: str
    source: str
    metric: str
    frame_index: int
    value: float


def _to_samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


def _db_ratio(num: float, den: float) -> float:
    if num <= 0.0:
        return -DB_CLAMP
    if den <= 0.0:
        return DB_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CLAMP, DB_CLAMP))


def _frame_sdr(ref: np.ndarray, est: np.ndarray) -> float:
    """Scalar-projection SDR of one frame; caller excludes silent refs."""
    ref_energy = float(np.dot(ref, ref))
    coeff = float(np.dot(est, ref)) / ref_energy
    target = coeff * ref
    distortion = est - target
    return _db_ratio(float(np.dot(target, target)), float(np.dot(distortion, distortion)))


def _frame_sar(refs: np.ndarray, est: np.ndarray) -> float:
    """Span-projection SAR of one frame; refs is a (J, n) matrix."""
    gram = refs @ refs.T
    gram[np.diag_indices_from(gram)] += RIDGE
    coeffs = np.linalg.solve(gram, refs @ est)
    projection = coeffs @ refs
    artifacts = est - projection
    return _db_ratio(float(np.dot(projection, projection)),
                     float(np.dot(artifacts, artifacts)))


def _iter_frames(n_samples: int, frame_len: int):
    for i, start in enumerate(range(0, n_samples - frame_len + 1, frame_len)):
        yield i, start, start + frame_len


def sdr_frames(ref, est, frame_len: int) -> list[float]:
    """Per-frame SDR in dB, silent-reference frames excluded."""
    ref, est = _to_samples(ref), _to_samples(est)
    if ref.shape != est.shape:
        raise ValueError("sdr_frames: length mismatch")
    if frame_len <= 0:
        raise ValueError("frame_len must be positive")
    out = []
    for _, a, b in _iter_frames(len(ref), frame_len):
        r = ref[a:b]
        if float(np.dot(r, r)) <= SILENT_ENERGY:
            continue
        out.append(_frame_sdr(r, est[a:b]))
    return out


def sar_frames(refs, est, frame_len: int) -> list[float]:
    """Per-frame SAR in dB against the span of all references.

    Frames where every reference is silent are excluded.
    """
    ref_mat = np.stack([_to_samples(r) for r in refs])
    est = _to_samples(est)
    if ref_mat.shape[1] != est.shape[0]:
        raise ValueError("sar_frames: length mismatch")
    if frame_len <= 0:
        raise ValueError("frame_len must be positive")
    out = []
    for _, a, b in _iter_frames(est.shape[0], frame_len):
        window = ref_mat[:, a:b]
        if float(np.sum(window * window)) <= SILENT_ENERGY:
            continue
        out.append(_frame_sar(window, est[a:b]))
    return out


def aggregate(track_frames: list[list[float]]) -> float:
    """Median over frames per track, then median over tracks."""
    if not track_frames:
        raise ValueError("no tracks to aggregate")
    medians = []
    for frames in track_frames:
        if not frames:
            raise ValueError("track with no scored frames")
        medians.append(float(np.median(frames)))
    return float(np.median(medians))


def evaluate_track(
    track_id: str,
    refs: dict,
    ests: dict,
    frame_len: int,
) -> tuple[TrackScore, list[FrameRecord]]:
    """Score one track: for each source, per-frame SDR and SAR plus medians.

    For source j both metrics are scored on the frames where reference j is
    non-silent, keeping the SDR/SAR frame sets aligned.
    """
    if set(refs) != set(ests):
        missing = sorted(set(refs) ^ set(ests))
        raise ValueError(f"reference/estimate source mismatch: {missing}")
    sources = sorted(refs)
    ref_mat = np.stack([_to_samples(refs[s]) for s in sources])
    score = TrackScore(track_id)
    records = []
    for si, source in enumerate(sources):
        est = _to_samples(ests[source])
        if est.shape[0] != ref_mat.shape[1]:
            raise ValueError(f"length mismatch for {source} in {track_id}")
        sdr_vals, sar_vals = [], []
        for idx, a, b in _iter_frames(est.shape[0], frame_len):
            r = ref_mat[si, a:b]
            if float(np.dot(r, r)) <= SILENT_ENERGY:
                continue
            sdr = _frame_sdr(r, est[a:b])
            sar = _frame_sar(ref_mat[:, a:b], est[a:b])
            sdr_vals.append(sdr)
            sar_vals.append(sar)
            records.append(FrameRecord(track_id, source, "SDR", idx, sdr))
            records.append(FrameRecord(track_id, source, "SAR", idx, sar))
        if not sdr_vals:
            raise ValueError(f"all frames excluded for {source} in {track_id}")
        score.sdr[source] = float(np.median(sdr_vals))
        score.sar[source] = float(np.median(sar_vals))
    return score, records


def summarize(scores: list[TrackScore]) -> dict:
    """(source, metric) -> median over tracks of the per-track medians."""
    if not scores:
        raise ValueError("no tracks to summarize")
    sources = sorted(scores[0].sdr)
    out = {}
    for source in sources:
        out[(source, "SDR")] = float(np.median([s.sdr[source] for s in scores]))
        out[(source, "SAR")] = float(np.median([s.sar[source] for s in scores]))
    return out


def write_frame_csv(path, records: list[FrameRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["track_id", "source", "metric", "frame_index", "value"])
        for r in records:
            writer.writerow([r.track_id, r.source, r.metric, r.frame_index, repr(r.value)])


def write_summary_csv(path, summary: dict):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "metric", "value"])
        for (source, metric), value in sorted(summary.items()):
            writer.writerow([source, metric, repr(value)])
