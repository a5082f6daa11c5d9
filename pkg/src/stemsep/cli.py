"""Command-line surface: train, separate, eval and the ablation runner.

Exit codes are a stable scripting contract: 0 success, 2 usage or
configuration errors, 3 runtime failures such as diverged training. All
artifacts land under the given output directory; the seed precedence is
``--seed`` flag, then the XUMX_SEED environment variable, then the config.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data, inference, metrics, report, training
from .config import ConfigError
from .data import load_wav, save_wav
from .training import CheckpointError, TrainingDivergedError, VARIANTS

SEED_ENV_VAR = "XUMX_SEED"


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"bad {SEED_ENV_VAR} value {env!r}: {exc}") from exc
    return None


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_train(args) -> int:
    try:
        run_cfg = cfgmod.load_config(args.config)
        seed = _resolve_seed(args)
        train_cfg = cfgmod.train_config_from(run_cfg, seed=seed)
        split = cfgmod.load_dataset_split(run_cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        return _fail(2, str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        ckpt, history = training.train(train_cfg, split)
    except TrainingDivergedError as exc:
        return _fail(3, str(exc))
    training.save_checkpoint(out / "checkpoint.ckpt", ckpt)
    history.write_csv(out / "history.csv")
    report.render_history(out / "history.png", history)
    print(f"trained {len(history.train_loss)} epochs, best epoch {history.best_epoch}, "
          f"checkpoint at {out / 'checkpoint.ckpt'}")
    return 0


def _separate_one(ckpt, wav_path: Path, outdir: Path) -> None:
    mixture = load_wav(wav_path)
    result = inference.separate(ckpt, mixture)
    track_dir = outdir / wav_path.stem
    track_dir.mkdir(parents=True, exist_ok=True)
    for source, stem in result.stems.items():
        save_wav(track_dir / f"{source}.wav", stem, fmt="float32")
    print(f"{wav_path.name}: wrote {len(result.stems)} stems "
          f"(stem-sum/mixture deviation {result.mixture_consistency:.3e})")


def cmd_separate(args) -> int:
    try:
        ckpt = training.load_checkpoint(args.model)
    except (CheckpointError, FileNotFoundError) as exc:
        return _fail(2, str(exc))
    input_path = Path(args.input)
    outdir = Path(args.outdir)
    if input_path.is_dir():
        wavs = sorted(input_path.glob("*.wav"))
        if not wavs:
            return _fail(2, f"no .wav files in {input_path}")
    elif input_path.exists():
        wavs = [input_path]
    else:
        return _fail(2, f"input not found: {input_path}")
    try:
        for wav_path in wavs:
            _separate_one(ckpt, wav_path, outdir)
    except (ValueError, data.WavFormatError) as exc:
        return _fail(2, str(exc))
    except FloatingPointError as exc:
        return _fail(3, str(exc))
    return 0


def _load_track_stems(folder: Path) -> dict:
    stems = {}
    for wav_path in sorted(folder.glob("*.wav")):
        if wav_path.stem != "mixture":
            stems[wav_path.stem] = load_wav(wav_path)
    return stems


def cmd_eval(args) -> int:
    refs_root, ests_root = Path(args.refs), Path(args.ests)
    if not refs_root.is_dir():
        return _fail(2, f"refs directory not found: {refs_root}")
    if not ests_root.is_dir():
        return _fail(2, f"ests directory not found: {ests_root}")
    track_dirs = sorted(p for p in refs_root.iterdir() if p.is_dir())
    if not track_dirs:
        return _fail(2, f"no track folders under {refs_root}")
    scores, records = [], []
    for ref_dir in track_dirs:
        est_dir = ests_root / ref_dir.name
        refs = _load_track_stems(ref_dir)
        if not refs:
            return _fail(2, f"no stem wavs in {ref_dir}")
        ests = {}
        for source in refs:
            est_path = est_dir / f"{source}.wav"
            if not est_path.exists():
                return _fail(2, f"missing estimate stem: {est_path}")
            ests[source] = load_wav(est_path)
        frame_len = int(round(args.frame_seconds * next(iter(refs.values())).sample_rate))
        try:
            score, recs = metrics.evaluate_track(
                ref_dir.name, {k: w.samples for k, w in refs.items()},
                {k: w.samples for k, w in ests.items()}, frame_len)
        except ValueError as exc:
            return _fail(2, str(exc))
        scores.append(score)
        records.extend(recs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frames_path = out.with_name(out.stem + "_frames.csv")
    metrics.write_frame_csv(frames_path, records)
    metrics.write_summary_csv(out, metrics.summarize(scores))
    print(f"evaluated {len(scores)} tracks -> {out} (frames: {frames_path})")
    return 0


def _parse_variants(raw: str) -> list[str]:
    names = [v.strip() for v in raw.split(",") if v.strip()]
    if not names:
        raise ConfigError("no variants given")
    for name in names:
        if name not in VARIANTS:
            raise ConfigError(
                f"unknown variant {name!r} (choose from {', '.join(VARIANTS)})")
    return names


def cmd_ablate(args) -> int:
    try:
        names = _parse_variants(args.variants)
        run_cfg = cfgmod.load_config(args.config)
        seed = _resolve_seed(args)
        split = cfgmod.load_dataset_split(run_cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        return _fail(2, str(exc))
    if not split.test:
        return _fail(2, "ablation needs a nonempty test split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame_len = int(round(args.frame_seconds * split.test[0].mixture.sample_rate))

    results = {}
    track_values = {}
    for name in names:
        train_cfg = cfgmod.train_config_from(run_cfg, variant=VARIANTS[name], seed=seed)
        variant_dir = out / f"variant_{name}"
        variant_dir.mkdir(parents=True, exist_ok=True)
        try:
            ckpt, history = training.train(train_cfg, split)
        except TrainingDivergedError as exc:
            return _fail(3, f"variant {name}: {exc}")
        training.save_checkpoint(variant_dir / "checkpoint.ckpt", ckpt)
        history.write_csv(variant_dir / "history.csv")
        report.render_history(variant_dir / "history.png", history)

        scores = []
        for track in split.test:
            result = inference.separate(ckpt, track.mixture)
            refs = {k: w.samples for k, w in track.stems.items()}
            ests = {k: w.samples for k, w in result.stems.items()}
            score, _ = metrics.evaluate_track(track.name, refs, ests, frame_len)
            scores.append(score)
        summary = metrics.summarize(scores)
        for (source, metric), value in summary.items():
            results[(name, source, metric)] = value
        for source in scores[0].sdr:
            track_values[(name, source, "SDR")] = [s.sdr[source] for s in scores]
            track_values[(name, source, "SAR")] = [s.sar[source] for s in scores]
        print(f"variant {name}: trained {len(history.train_loss)} epochs, "
              f"avg SDR {np.mean([v for (s, m), v in summary.items() if m == 'SDR']):.2f} dB")

    report.write_results_csv(out / "results.csv", results)
    report.write_quartiles_csv(out / "quartiles.csv", report.quartile_rows(track_values))
    report.render_metric_boxplot(out / "sdr_boxplot.png", "SDR", track_values)
    report.render_metric_boxplot(out / "sar_boxplot.png", "SAR", track_values)
    print(f"ablation complete: {out / 'results.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stemsep",
        description="Train, run and evaluate spectrogram-mask source separation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_sep = sub.add_parser("separate", help="separate a wav file or directory")
    p_sep.add_argument("--model", required=True)
    p_sep.add_argument("--input", required=True)
    p_sep.add_argument("--outdir", required=True)
    p_sep.set_defaults(func=cmd_separate)

    p_eval = sub.add_parser("eval", help="score estimated stems against references")
    p_eval.add_argument("--refs", required=True)
    p_eval.add_argument("--ests", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--frame-seconds", type=float, default=1.0)
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="train and evaluate a variant matrix")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--variants", required=True,
                       help="comma-separated subset of C1..C7,P")
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.add_argument("--frame-seconds", type=float, default=1.0)
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, str(exc))


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
