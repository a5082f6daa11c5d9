"""CLI contract: exit codes, artifacts, determinism."""

import numpy as np
import pytest

from stemsep import data
from stemsep.cli import main
from stemsep.data import save_wav, synth_dataset
from stemsep.dsp import Waveform

TOY_CONFIG = """
[dataset]
kind = synth
num_tracks = 4
duration_s = 1.0
sample_rate = 8000
num_sources = 2
seed = 51
train_tracks = 2
valid_tracks = 1
test_tracks = 1

[stft]
fft_size = 128
hop_size = 32

[model]
hidden_size = 4

[train]
epochs = 2
batch_size = 2
samples_per_epoch = 4
valid_samples = 2
excerpt_seconds = 0.25
seed = 5

[variant]
name = P
"""


@pytest.fixture()
def toy_config(tmp_path):
    path = tmp_path / "toy.ini"
    path.write_text(TOY_CONFIG)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = root / "toy.ini"
    cfg.write_text(TOY_CONFIG)
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return out / "checkpoint.ckpt"


class TestTrainCommand:
    def test_valid_config_writes_artifacts(self, toy_config, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config), "--out", str(out)]) == 0
        assert (out / "checkpoint.ckpt").exists()
        assert (out / "history.csv").exists()
        assert (out / "history.png").exists()

    def test_missing_dataset_path_names_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[dataset]\nkind = musdb\n")
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "dataset.root" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[train]\nlearning_rate_typo = 3\n")
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "learning_rate_typo" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_3_with_epoch_context(self, tmp_path, capsys):
        cfg = tmp_path / "diverge.ini"
        cfg.write_text(TOY_CONFIG.replace("[variant]", "lr = 1e200\n\n[variant]"))
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 3
        assert "epoch" in capsys.readouterr().err

    def test_seed_flag_overrides_config(self, toy_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(toy_config), "--out", str(out1),
                     "--seed", "99"]) == 0
        assert main(["train", "--config", str(toy_config), "--out", str(out2),
                     "--seed", "99"]) == 0
        assert (out1 / "checkpoint.ckpt").read_bytes() == (out2 / "checkpoint.ckpt").read_bytes()

    def test_env_seed_override(self, toy_config, tmp_path, monkeypatch):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        monkeypatch.setenv("XUMX_SEED", "123")
        assert main(["train", "--config", str(toy_config), "--out", str(out1)]) == 0
        monkeypatch.delenv("XUMX_SEED")
        assert main(["train", "--config", str(toy_config), "--out", str(out2),
                     "--seed", "123"]) == 0
        assert (out1 / "checkpoint.ckpt").read_bytes() == (out2 / "checkpoint.ckpt").read_bytes()


class TestSeparateCommand:
    def test_single_wav_produces_stems(self, trained, tmp_path):
        mix = Waveform(0.1 * np.random.default_rng(0).standard_normal(8000), 8000)
        wav = tmp_path / "song.wav"
        save_wav(wav, mix)
        outdir = tmp_path / "stems"
        assert main(["separate", "--model", str(trained), "--input", str(wav),
                     "--outdir", str(outdir)]) == 0
        written = sorted(p.name for p in (outdir / "song").glob("*.wav"))
        assert written == ["bass.wav", "drums.wav"]

    def test_directory_input_gets_per_track_subdirs(self, trained, tmp_path):
        indir = tmp_path / "in"
        indir.mkdir()
        for name in ("t1", "t2"):
            save_wav(indir / f"{name}.wav",
                     Waveform(0.1 * np.random.default_rng(1).standard_normal(4000), 8000))
        outdir = tmp_path / "out"
        assert main(["separate", "--model", str(trained), "--input", str(indir),
                     "--outdir", str(outdir)]) == 0
        assert (outdir / "t1" / "bass.wav").exists()
        assert (outdir / "t2" / "drums.wav").exists()

    def test_sample_rate_mismatch_exits_2(self, trained, tmp_path, capsys):
        wav = tmp_path / "hi.wav"
        save_wav(wav, Waveform(np.zeros(1000), 44100))
        rc = main(["separate", "--model", str(trained), "--input", str(wav),
                   "--outdir", str(tmp_path / "o")])
        assert rc == 2
        assert "sample-rate" in capsys.readouterr().err

    def test_missing_model_exits_2(self, tmp_path):
        rc = main(["separate", "--model", str(tmp_path / "none.ckpt"),
                   "--input", str(tmp_path), "--outdir", str(tmp_path / "o")])
        assert rc == 2


class TestEvalCommand:
    def _write_tracks(self, root, tracks, perturb=0.0):
        for track in tracks:
            folder = root / track.name
            folder.mkdir(parents=True)
            rng = np.random.default_rng(7)
            for source, wave in track.stems.items():
                samples = wave.samples
                if perturb:
                    samples = samples + perturb * rng.standard_normal(len(samples))
                save_wav(folder / f"{source}.wav", Waveform(samples, wave.sample_rate))

    def test_identical_estimates_hit_clamp(self, tmp_path):
        tracks = synth_dataset(num_tracks=2, duration_s=1.0, num_sources=2, seed=61)
        refs, ests = tmp_path / "refs", tmp_path / "ests"
        self._write_tracks(refs, tracks)
        self._write_tracks(ests, tracks)
        out = tmp_path / "summary.csv"
        assert main(["eval", "--refs", str(refs), "--ests", str(ests), "--out", str(out),
                     "--frame-seconds", "0.25"]) == 0
        lines = out.read_text().strip().splitlines()
        sdr_lines = [l for l in lines if ",SDR," in l]
        assert sdr_lines and all(l.endswith("100.0") for l in sdr_lines)
        assert out.with_name("summary_frames.csv").exists()

    def test_missing_estimate_stem_named(self, tmp_path, capsys):
        tracks = synth_dataset(num_tracks=1, duration_s=0.5, num_sources=2, seed=62)
        refs, ests = tmp_path / "refs", tmp_path / "ests"
        self._write_tracks(refs, tracks)
        self._write_tracks(ests, tracks)
        victim = next((ests / tracks[0].name).glob("drums.wav"))
        victim.unlink()
        rc = main(["eval", "--refs", str(refs), "--ests", str(ests),
                   "--out", str(tmp_path / "s.csv")])
        assert rc == 2
        assert "drums.wav" in capsys.readouterr().err

    def test_summary_matches_hand_computed_medians(self, tmp_path):
        # two-track fixture with known per-track medians
        from stemsep import metrics as met

        tracks = synth_dataset(num_tracks=2, duration_s=1.0, num_sources=2, seed=63)
        refs, ests = tmp_path / "refs", tmp_path / "ests"
        self._write_tracks(refs, tracks)
        self._write_tracks(ests, tracks, perturb=0.01)
        out = tmp_path / "summary.csv"
        assert main(["eval", "--refs", str(refs), "--ests", str(ests), "--out", str(out),
                     "--frame-seconds", "0.25"]) == 0

        expected = {}
        for source in tracks[0].stems:
            per_track = []
            for track in tracks:
                ref = data.load_wav(refs / track.name / f"{source}.wav")
                est = data.load_wav(ests / track.name / f"{source}.wav")
                vals = met.sdr_frames(ref.samples, est.samples, 2000)
                per_track.append(float(np.median(vals)))
            expected[source] = float(np.median(per_track))
        got = {}
        for line in out.read_text().strip().splitlines()[1:]:
            source, metric, value = line.split(",")
            if metric == "SDR":
                got[source] = float(value)
        for source, value in expected.items():
            assert got[source] == pytest.approx(value, abs=1e-9)


class TestAblateCommand:
    def test_two_variants_produce_combined_table(self, toy_config, tmp_path):
        out = tmp_path / "abl"
        assert main(["ablate", "--config", str(toy_config), "--variants", "C1,P",
                     "--out", str(out), "--frame-seconds", "0.25"]) == 0
        assert (out / "variant_C1" / "checkpoint.ckpt").exists()
        assert (out / "variant_P" / "checkpoint.ckpt").exists()
        lines = (out / "results.csv").read_text().strip().splitlines()
        # header + |variants| * J sources * 2 metrics
        assert len(lines) == 1 + 2 * 2 * 2
        assert (out / "quartiles.csv").exists()
        assert (out / "sdr_boxplot.png").exists()
        assert (out / "sar_boxplot.png").exists()

    def test_unknown_variant_exits_2(self, toy_config, tmp_path, capsys):
        rc = main(["ablate", "--config", str(toy_config), "--variants", "C1,Q9",
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "Q9" in capsys.readouterr().err

    def test_byte_identical_reruns(self, toy_config, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            assert main(["ablate", "--config", str(toy_config), "--variants", "C1,P",
                         "--out", str(out), "--seed", "7",
                         "--frame-seconds", "0.25"]) == 0
        assert (out1 / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()
        assert (out1 / "quartiles.csv").read_bytes() == (out2 / "quartiles.csv").read_bytes()


class TestUsage:
    def test_no_command_exits_2(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_unknown_flag_exits_2(self, capsys):
        assert main(["train", "--config", "x", "--out", "y", "--bogus"]) == 2
        capsys.readouterr()
