"""Joint training of all source paths with shared scheduling.

All J mask networks train together against a single loss selected by the
variant toggles, so learning-rate drops and early stopping happen at the
same epoch for every source. The checkpoint keeps the parameters of the
epoch with the smallest validation loss (ties resolve to the earlier epoch),
regardless of where the stop fires.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp, losses, model
from .data import DatasetSplit, sample_excerpts
from .dsp import StftConfig
from .model import ModelParams, NetConfig
from .tensor import Tape, backward

CHECKPOINT_MAGIC = b"STEMSEP1\n"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss appears; carries epoch/batch context."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class VariantConfig:
    use_mdl: bool = False
    use_cl: bool = False
    use_bridging: bool = False


# ablation matrix: every on/off combination of the three training-time schemes
VARIANTS = {
    "C1": VariantConfig(),
    "C2": VariantConfig(use_mdl=True),
    "C3": VariantConfig(use_cl=True),
    "C4": VariantConfig(use_bridging=True),
    "C5": VariantConfig(use_mdl=True, use_cl=True),
    "C6": VariantConfig(use_mdl=True, use_bridging=True),
    "C7": VariantConfig(use_cl=True, use_bridging=True),
    "P": VariantConfig(use_mdl=True, use_cl=True, use_bridging=True),
}


@dataclass
class TrainConfig:
    variant: VariantConfig = field(default_factory=VariantConfig)
    alpha: float = losses.DEFAULT_ALPHA
    epochs: int = 50
    batch_size: int = 8
    samples_per_epoch: int = 24
    valid_samples: int = 16
    excerpt_seconds: float = 0.75
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    plateau_patience: int = 8
    lr_decay_factor: float = 0.3
    early_stop_patience: int = 14
    min_delta: float = 1e-6
    grad_clip: float = 0.0  # 0 disables clipping
    hidden_size: int = 48
    num_recurrent_layers: int = 1
    seed: int = 0
    stft: StftConfig = field(default_factory=lambda: StftConfig(512, 128))

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1  # 0-based index into the lists

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("epoch,train_loss,valid_loss,lr\n")
            for i, (tr, va, lr) in enumerate(zip(self.train_loss, self.valid_loss, self.lr)):
                fh.write(f"{i},{tr!r},{va!r},{lr!r}\n")


@dataclass
class Checkpoint:
    params: ModelParams
    net: NetConfig
    sample_rate: int
    sources: list
    norm_mean: np.ndarray
    norm_std: np.ndarray
    train_config: TrainConfig
    best_epoch: int = -1
    best_valid_loss: float = float("nan")

    @property
    def stats(self):
        return self.norm_mean, self.norm_std


def reduce_on_plateau(
    valid_losses,
    patience: int,
    factor: float,
    current_lr: float,
    min_delta: float = 1e-6,
) -> float:
    """New learning rate after the last epoch of ``valid_losses``.

    A drop fires when the loss has not improved on the running best by more
    than ``min_delta`` for ``patience`` consecutive epochs; an improvement or
    a drop resets the counter, the running best only moves on improvement.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best = None
    stale = 0
    fired_now = False
    for loss in valid_losses:
        if best is None or loss < best - min_delta:
            best = loss
            stale = 0
            fired_now = False
            continue
        stale += 1
        fired_now = stale % patience == 0
    return current_lr * factor if fired_now and stale > 0 else current_lr


def early_stop(valid_losses, patience: int) -> bool:
    """True when no new strict validation minimum for ``patience`` epochs."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not valid_losses:
        return False
    best = valid_losses[0]
    stale = 0
    for loss in valid_losses[1:]:
        if loss < best:  # ties keep the earlier epoch
            best = loss
            stale = 0
        else:
            stale += 1
    return stale >= patience


class AdamOptimizer:
    """Adam with decoupled-from-nothing classic L2 weight decay on gradients."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params: ModelParams, grads: dict):
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = grads[name]
            if c.weight_decay > 0.0:
                g = g + c.weight_decay * p
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            m_hat = self.m[name] / (1 - c.beta1 ** t)
            v_hat = self.v[name] / (1 - c.beta2 ** t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def _excerpt_loss(arrays_or_leaves, net_cfg, cfg: TrainConfig, stats, excerpt, sources):
    """Variant-selected loss for one excerpt; differentiable if leaves given."""
    spec = dsp.stft(excerpt.mixture, cfg.stft)
    y_mag = dsp.magnitude(spec).data
    masks = model.forward(arrays_or_leaves, net_cfg, y_mag, stats=stats)
    refs = [excerpt.stems[s] for s in sources]
    v = cfg.variant
    if v.use_cl:
        report = losses.combination_loss(
            masks, spec, refs, excerpt.mixture, alpha=cfg.alpha, use_mdl=v.use_mdl)
        return report.loss_node
    return losses.plain_loss(
        masks, spec, refs, excerpt.mixture, alpha=cfg.alpha, use_mdl=v.use_mdl)


def _check_finite(value, epoch, batch, what):
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite {what} loss ({value!r}) at epoch {epoch}, batch {batch}")


def train(cfg: TrainConfig, split: DatasetSplit) -> tuple[Checkpoint, TrainHistory]:
    """Train one joint model over all sources; deterministic per seed."""
    if not split.train or not split.valid:
        raise ValueError("train and valid splits must be nonempty")
    sources = split.train[0].sources
    sample_rate = split.train[0].mixture.sample_rate
    net_cfg = NetConfig(
        num_sources=len(sources),
        hidden_size=cfg.hidden_size,
        num_bins=cfg.stft.num_bins,
        num_recurrent_layers=cfg.num_recurrent_layers,
        bridging=cfg.variant.use_bridging,
    )
    params = model.init_params(net_cfg, cfg.seed)
    mags = [dsp.magnitude(dsp.stft(t.mixture, cfg.stft)).data for t in split.train]
    stats = model.compute_norm_stats(mags)

    excerpt_len = int(round(cfg.excerpt_seconds * sample_rate))
    num_batches = max(1, cfg.samples_per_epoch // cfg.batch_size)
    valid_excerpts = [
        ex
        for batch in sample_excerpts(
            split.valid, excerpt_len, cfg.valid_samples, seed=cfg.seed + 1, num_batches=1)
        for ex in batch
    ]

    optimizer = AdamOptimizer(cfg)
    history = TrainHistory()
    best_valid = None
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(cfg.epochs):
        epoch_losses = []
        batches = sample_excerpts(
            split.train, excerpt_len, cfg.batch_size,
            seed=cfg.seed + 1000 + epoch, num_batches=num_batches)
        for bi, batch in enumerate(batches):
            grad_sum = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            for ex in batch:
                tape = Tape()
                leaves = {k: tape.parameter(v) for k, v in params.items()}
                loss = _excerpt_loss(leaves, net_cfg, cfg, stats, ex, sources)
                _check_finite(loss.item(), epoch, bi, "train")
                batch_loss += loss.item()
                grads = backward(tape, loss)
                for k in grad_sum:
                    grad_sum[k] += grads[leaves[k].node].data
            scale = 1.0 / len(batch)
            grads = {k: g * scale for k, g in grad_sum.items()}
            if cfg.grad_clip > 0.0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.grad_clip:
                    grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
            optimizer.step(params, grads)
            epoch_losses.append(batch_loss * scale)

        valid_loss = 0.0
        for ex in valid_excerpts:
            valid_loss += _excerpt_loss(params, net_cfg, cfg, stats, ex, sources).item()
        valid_loss /= len(valid_excerpts)
        _check_finite(valid_loss, epoch, -1, "validation")

        history.train_loss.append(float(np.mean(epoch_losses)))
        history.valid_loss.append(valid_loss)
        history.lr.append(optimizer.lr)

        if best_valid is None or valid_loss < best_valid:
            best_valid = valid_loss
            history.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}

        optimizer.lr = reduce_on_plateau(
            history.valid_loss, cfg.plateau_patience, cfg.lr_decay_factor,
            optimizer.lr, cfg.min_delta)
        if early_stop(history.valid_loss, cfg.early_stop_patience):
            break

    checkpoint = Checkpoint(
        params=best_params,
        net=net_cfg,
        sample_rate=sample_rate,
        sources=list(sources),
        norm_mean=stats[0],
        norm_std=stats[1],
        train_config=cfg,
        best_epoch=history.best_epoch,
        best_valid_loss=float(best_valid),
    )
    return checkpoint, history


def validation_loss(ckpt: Checkpoint, split: DatasetSplit) -> float:
    """Loss of checkpoint params on the same deterministic validation set."""
    cfg = ckpt.train_config
    excerpt_len = int(round(cfg.excerpt_seconds * ckpt.sample_rate))
    excerpts = [
        ex
        for batch in sample_excerpts(
            split.valid, excerpt_len, cfg.valid_samples, seed=cfg.seed + 1, num_batches=1)
        for ex in batch
    ]
    total = 0.0
    for ex in excerpts:
        total += _excerpt_loss(ckpt.params, ckpt.net, cfg, ckpt.stats, ex, ckpt.sources).item()
    return total / len(excerpts)


def _config_to_json(cfg: TrainConfig) -> dict:
    blob = asdict(cfg)
    blob["variant"] = asdict(cfg.variant)
    blob["stft"] = asdict(cfg.stft)
    return blob


def _config_from_json(blob: dict) -> TrainConfig:
    blob = dict(blob)
    blob["variant"] = VariantConfig(**blob["variant"])
    blob["stft"] = StftConfig(**blob["stft"])
    return TrainConfig(**blob)


def save_checkpoint(path, ckpt: Checkpoint):
    """Structured-text header plus little-endian float32 arrays."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "net": asdict(ckpt.net),
        "sample_rate": ckpt.sample_rate,
        "sources": list(ckpt.sources),
        "norm_mean": [float(x) for x in np.asarray(ckpt.norm_mean, dtype=np.float32)],
        "norm_std": [float(x) for x in np.asarray(ckpt.norm_std, dtype=np.float32)],
        "train_config": _config_to_json(ckpt.train_config),
        "layers": [
            {"name": k, "shape": list(np.asarray(v).shape)} for k, v in ckpt.params.items()
        ],
        "best_epoch": ckpt.best_epoch,
        "best_valid_loss": ckpt.best_valid_loss,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in ckpt.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, net_config: NetConfig | None = None) -> Checkpoint:
    """Read a checkpoint; optionally guard against a mismatching NetConfig."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"corrupt header: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt header: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {header.get('format_version')}")
        net = NetConfig(**header["net"])
        if net_config is not None and net_config != net:
            raise CheckpointError(
                f"checkpoint was trained with {net}, requested {net_config}")
        params = {}
        for layer in header["layers"]:
            shape = tuple(layer["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"truncated payload for layer {layer['name']}")
            params[layer["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    return Checkpoint(
        params=params,
        net=net,
        sample_rate=header["sample_rate"],
        sources=header["sources"],
        norm_mean=np.asarray(header["norm_mean"], dtype=np.float64),
        norm_std=np.asarray(header["norm_std"], dtype=np.float64),
        train_config=_config_from_json(header["train_config"]),
        best_epoch=header["best_epoch"],
        best_valid_loss=header["best_valid_loss"],
    )
