"""Loss functions: values against brute-force oracles, bounds, gradients."""

import math

import numpy as np
import pytest

from stemsep import dsp, losses, tensor as tt
from stemsep.dsp import ComplexSpectrogram, StftConfig
from stemsep.losses import (
    Combination,
    combination_loss,
    enumerate_combinations,
    mdl,
    mse_loss,
    plain_loss,
    wsdr_loss,
)

SMALL_CFG = StftConfig(32, 8)


class TestMse:
    def test_identical_is_zero(self):
        a = np.random.default_rng(0).random((3, 4))
        assert mse_loss(a, a).item() == 0.0

    def test_ones_vs_zeros_2x3(self):
        assert mse_loss(np.ones((2, 3)), np.zeros((2, 3))).item() == 6.0

    def test_matches_double_loop(self):
        rng = np.random.default_rng(1)
        est, ref = rng.random((5, 7)), rng.random((5, 7))
        expected = 0.0
        for t in range(5):
            for f in range(7):
                expected += (est[t, f] - ref[t, f]) ** 2
        assert mse_loss(est, ref).item() == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            mse_loss(np.ones((2, 3)), np.ones((3, 2)))

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            assert mse_loss(rng.standard_normal((3, 3)), rng.standard_normal((3, 3))).item() >= 0.0


class TestWsdr:
    def test_perfect_estimate_is_exactly_minus_one(self):
        rng = np.random.default_rng(3)
        ref = rng.standard_normal(64)
        mix = ref + rng.standard_normal(64)
        assert wsdr_loss(ref, ref, mix).item() == -1.0

    def test_rho_direct_substitution(self):
        # |ref|^2 = 1, |mix - ref|^2 = 3 -> rho = 0.25
        ref = np.zeros(4)
        ref[0] = 1.0
        res = np.zeros(4)
        res[1] = math.sqrt(3.0)
        mix = ref + res
        est = np.array([0.5, 0.1, -0.2, 0.3])
        val = wsdr_loss(est, ref, mix).item()
        rho = 0.25
        est_hat = est * math.sqrt(np.dot(ref, ref) / np.dot(est, est))
        cos1 = np.dot(ref, est_hat) / math.sqrt(np.dot(ref, ref) * np.dot(est_hat, est_hat))
        d = mix - est_hat
        cos2 = np.dot(res, d) / math.sqrt(np.dot(res, res) * np.dot(d, d))
        assert val == pytest.approx(-rho * cos1 - (1 - rho) * cos2, abs=1e-14)

    def test_est_equals_mix_orthogonal_case(self):
        # hand evaluation: ref orthogonal to the residual and est = mix;
        # the gain-aligned estimate is mix / 2 since |mix| = 2 |ref|
        ref = np.array([1.0, 0.0, 0.0, 0.0])
        res = np.array([0.0, math.sqrt(3.0), 0.0, 0.0])
        mix = ref + res
        val = wsdr_loss(mix, ref, mix).item()
        est_hat = mix / 2.0
        cos1 = np.dot(ref, est_hat)  # |ref| = |est_hat| = 1
        d = mix - est_hat
        cos2 = np.dot(res, d) / math.sqrt(np.dot(res, res) * np.dot(d, d))
        assert val == pytest.approx(-0.25 * cos1 - 0.75 * cos2, abs=1e-14)

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = rng.integers(2, 40)
            est, ref, mix = (rng.standard_normal(n) for _ in range(3))
            v = wsdr_loss(est, ref, mix).item()
            assert -1.0 <= v <= 1.0

    def test_scale_invariance_in_est(self):
        rng = np.random.default_rng(5)
        est, ref, mix = (rng.standard_normal(32) for _ in range(3))
        base = wsdr_loss(est, ref, mix).item()
        for c in (1e-6, 0.5, 3.0, 1e6):
            assert abs(wsdr_loss(c * est, ref, mix).item() - base) < 1e-12

    def test_silent_reference_convention(self):
        rng = np.random.default_rng(6)
        mix = rng.standard_normal(16)
        est = rng.standard_normal(16)
        # rho = 0, first term dropped: only the residual cosine remains
        v = wsdr_loss(est, np.zeros(16), mix).item()
        cos2 = np.dot(mix, mix - est) / (
            np.linalg.norm(mix) * np.linalg.norm(mix - est))
        assert v == pytest.approx(-cos2, abs=1e-12)

    def test_ref_equals_mix_convention(self):
        rng = np.random.default_rng(7)
        ref = rng.standard_normal(16)
        est = rng.standard_normal(16)
        v = wsdr_loss(est, ref, ref.copy()).item()
        cos1 = np.dot(ref, est) / (np.linalg.norm(ref) * np.linalg.norm(est))
        assert v == pytest.approx(-cos1, abs=1e-12)

    def test_zero_estimate_gives_zero_terms(self):
        rng = np.random.default_rng(8)
        ref = rng.standard_normal(16)
        mix = ref + rng.standard_normal(16)
        assert wsdr_loss(np.zeros(16), ref, mix).item() == 0.0

    def test_nonfinite_rejected(self):
        bad = np.array([1.0, np.nan])
        with pytest.raises(ValueError, match="non-finite"):
            wsdr_loss(bad, np.ones(2), np.ones(2))


class TestMdl:
    def _instance(self, seed):
        rng = np.random.default_rng(seed)
        est_mag, ref_mag = rng.random((3, 4)), rng.random((3, 4))
        est_w, ref_w, mix_w = (rng.standard_normal(32) for _ in range(3))
        return est_mag, ref_mag, est_w, ref_w, mix_w

    def test_alpha_zero_reduces_to_mse(self):
        args = self._instance(9)
        assert mdl(*args, alpha=0.0).item() == mse_loss(args[0], args[1]).item()

    def test_perfect_estimate_is_minus_alpha(self):
        rng = np.random.default_rng(10)
        ref_mag = rng.random((3, 4))
        ref_w = rng.standard_normal(32)
        mix_w = ref_w + rng.standard_normal(32)
        for alpha in (1.0, 10.0):
            v = mdl(ref_mag, ref_mag, ref_w, ref_w, mix_w, alpha=alpha).item()
            assert v == -alpha

    def test_default_alpha_is_ten(self):
        assert losses.DEFAULT_ALPHA == 10.0

    def test_lower_bound(self):
        rng = np.random.default_rng(11)
        for alpha in (0.5, 10.0):
            for _ in range(50):
                args = self._instance(rng.integers(1 << 30))
                assert mdl(*args, alpha=alpha).item() >= -alpha


class TestEnumerate:
    def test_four_sources_gives_fourteen(self):
        combos = enumerate_combinations(4)
        assert len(combos) == 14

    def test_two_sources(self):
        combos = enumerate_combinations(2)
        assert [c.indices for c in combos] == [(0,), (1,)]

    def test_three_sources(self):
        assert len(enumerate_combinations(3)) == 6

    def test_counts_are_2_pow_j_minus_2(self):
        for j in range(2, 9):
            assert len(enumerate_combinations(j)) == 2 ** j - 2

    def test_order_by_size_then_lex(self):
        combos = [c.indices for c in enumerate_combinations(3)]
        assert combos == [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2)]

    def test_full_set_excluded(self):
        for j in (2, 3, 4):
            assert all(len(c) < j for c in enumerate_combinations(j))

    def test_too_few_sources(self):
        with pytest.raises(ValueError):
            enumerate_combinations(1)

    def test_invalid_combination(self):
        with pytest.raises(ValueError):
            Combination(())
        with pytest.raises(ValueError):
            Combination((1, 1))


def _exact_two_source_setup(cfg=StftConfig(128, 32, center=False), sr=8000):
    """Two on-grid sinusoids in disjoint spectral bands with exact binary masks."""
    n = cfg.fft_size
    length = n + 7 * cfg.hop_size
    t = np.arange(length)
    x1 = 0.7 * np.sin(2 * np.pi * 8 * t / n)
    x2 = 0.4 * np.sin(2 * np.pi * 40 * t / n)
    mix = x1 + x2
    spec = dsp.stft(mix, cfg)
    n_frames, n_bins = spec.shape
    m1 = np.zeros((n_frames, n_bins))
    m1[:, :25] = 1.0
    m2 = 1.0 - m1
    return cfg, mix, [x1, x2], [m1, m2], spec


class TestCombinationLoss:
    def test_complementary_exact_masks_reach_minus_alpha(self):
        cfg, mix, refs, masks, spec = _exact_two_source_setup()
        report = combination_loss(masks, spec, refs, mix, alpha=10.0)
        assert report.total == pytest.approx(-10.0, abs=1e-9)
        assert len(report.terms) == 2

    def test_four_sources_report_has_fourteen_terms(self):
        rng = np.random.default_rng(12)
        cfg = SMALL_CFG
        mix = rng.standard_normal(96)
        refs = [rng.standard_normal(96) for _ in range(4)]
        spec = dsp.stft(mix, cfg)
        masks = [rng.random(spec.shape) for _ in range(4)]
        report = combination_loss(masks, spec, refs, mix, alpha=10.0)
        assert len(report.terms) == 14

    def test_total_is_mean_of_term_mdls(self):
        rng = np.random.default_rng(13)
        cfg = SMALL_CFG
        mix = rng.standard_normal(80)
        refs = [rng.standard_normal(80) for _ in range(3)]
        spec = dsp.stft(mix, cfg)
        masks = [rng.random(spec.shape) for _ in range(3)]
        report = combination_loss(masks, spec, refs, mix, alpha=2.5)
        assert report.total == pytest.approx(
            np.mean([t.mdl for t in report.terms]), abs=1e-12)

    def test_matches_independent_materialization(self):
        # oracle: materialize every subset by hand with plain numpy and the
        # istft primitive, no shared enumeration or loss code
        rng = np.random.default_rng(14)
        cfg = SMALL_CFG
        alpha = 3.0
        mix = rng.standard_normal(96)
        refs = [rng.standard_normal(96) for _ in range(3)]
        spec = dsp.stft(mix, cfg)
        masks = [rng.random(spec.shape) for _ in range(3)]

        report = combination_loss(masks, spec, refs, mix, alpha=alpha)

        y_mag = np.hypot(spec.real.data, spec.imag.data)
        subsets = [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2)]
        vals = []
        for sub in subsets:
            m = sum(masks[j] for j in sub)
            ref_w = sum(refs[j] for j in sub)
            ref_spec = dsp.stft(ref_w, cfg)
            ref_mag = np.hypot(ref_spec.real.data, ref_spec.imag.data)
            spectral = np.sum((m * y_mag - ref_mag) ** 2)
            est_spec = ComplexSpectrogram(m * spec.real.data, m * spec.imag.data, cfg)
            est_w = dsp.istft(est_spec, cfg, len(mix)).data
            est_w = est_w * np.sqrt(np.dot(ref_w, ref_w) / np.dot(est_w, est_w))
            res = mix - ref_w
            rho = np.dot(ref_w, ref_w) / (np.dot(ref_w, ref_w) + np.dot(res, res))
            c1 = np.dot(ref_w, est_w) / np.sqrt(np.dot(ref_w, ref_w) * np.dot(est_w, est_w))
            d = mix - est_w
            c2 = np.dot(res, d) / np.sqrt(np.dot(res, res) * np.dot(d, d))
            vals.append(spectral + alpha * (-rho * c1 - (1 - rho) * c2))
        assert report.total == pytest.approx(np.mean(vals), rel=1e-10)
        for term, v in zip(report.terms, vals):
            assert term.mdl == pytest.approx(v, rel=1e-9)

    def test_mse_only_mode(self):
        rng = np.random.default_rng(15)
        cfg = SMALL_CFG
        mix = rng.standard_normal(64)
        refs = [rng.standard_normal(64) for _ in range(2)]
        spec = dsp.stft(mix, cfg)
        masks = [rng.random(spec.shape) for _ in range(2)]
        report = combination_loss(masks, spec, refs, mix, alpha=10.0, use_mdl=False)
        y_mag = np.hypot(spec.real.data, spec.imag.data)
        for term, j in zip(report.terms, (0, 1)):
            ref_spec = dsp.stft(refs[j], cfg)
            ref_mag = np.hypot(ref_spec.real.data, ref_spec.imag.data)
            assert term.mdl == pytest.approx(np.sum((masks[j] * y_mag - ref_mag) ** 2))
            assert term.wsdr == 0.0

    def test_single_source_rejected(self):
        cfg = SMALL_CFG
        spec = dsp.stft(np.random.default_rng(0).standard_normal(64), cfg)
        with pytest.raises(ValueError):
            combination_loss([np.ones(spec.shape)], spec, [np.zeros(64)], np.zeros(64))


class TestPlainLoss:
    def test_equals_singleton_restriction_of_combination_loss(self):
        rng = np.random.default_rng(16)
        cfg = SMALL_CFG
        mix = rng.standard_normal(96)
        refs = [rng.standard_normal(96) for _ in range(3)]
        spec = dsp.stft(mix, cfg)
        masks = [rng.random(spec.shape) for _ in range(3)]
        report = combination_loss(masks, spec, refs, mix, alpha=4.0)
        singles = [t.mdl for t in report.terms if len(t.combination) == 1]
        v = plain_loss(masks, spec, refs, mix, alpha=4.0).item()
        assert v == pytest.approx(np.mean(singles), rel=1e-12)

    def test_perfect_masks_mse_only_is_zero(self):
        cfg, mix, refs, masks, spec = _exact_two_source_setup()
        v = plain_loss(masks, spec, refs, mix, alpha=10.0, use_mdl=False).item()
        assert v == pytest.approx(0.0, abs=1e-18)

    def test_four_source_mean_oracle(self):
        rng = np.random.default_rng(17)
        cfg = SMALL_CFG
        mix = rng.standard_normal(96)
        refs = [rng.standard_normal(96) for _ in range(4)]
        spec = dsp.stft(mix, cfg)
        masks = [rng.random(spec.shape) for _ in range(4)]
        y_mag = np.hypot(spec.real.data, spec.imag.data)
        per_source = []
        for j in range(4):
            ref_spec = dsp.stft(refs[j], cfg)
            ref_mag = np.hypot(ref_spec.real.data, ref_spec.imag.data)
            spectral = np.sum((masks[j] * y_mag - ref_mag) ** 2)
            est_spec = ComplexSpectrogram(
                masks[j] * spec.real.data, masks[j] * spec.imag.data, cfg)
            est_w = dsp.istft(est_spec, cfg, 96).data
            per_source.append(spectral + 5.0 * wsdr_loss(est_w, refs[j], mix).item())
        v = plain_loss(masks, spec, refs, mix, alpha=5.0).item()
        assert v == pytest.approx(np.mean(per_source), rel=1e-10)


class TestLossGradients:
    def test_all_losses_pass_grad_check_wrt_masks(self):
        rng = np.random.default_rng(18)
        cfg = SMALL_CFG
        mix = rng.standard_normal(64)
        refs = [rng.standard_normal(64) for _ in range(2)]
        spec = dsp.stft(mix, cfg)
        shape = spec.shape

        def f_comb(ps):
            return combination_loss(ps, spec, refs, mix, alpha=2.0).loss_node

        def f_plain(ps):
            return plain_loss(ps, spec, refs, mix, alpha=2.0)

        def f_mse(ps):
            return mse_loss(tt.mul(ps[0], np.hypot(spec.real.data, spec.imag.data)),
                            np.abs(np.random.default_rng(0).random(shape)))

        m0 = [rng.random(shape) + 0.05 for _ in range(2)]
        assert tt.grad_check(f_comb, m0, 1e-5) < 1e-4
        assert tt.grad_check(f_plain, m0, 1e-5) < 1e-4
        assert tt.grad_check(f_mse, [m0[0]], 1e-5) < 1e-4

    def test_mdl_through_istft_layer(self):
        rng = np.random.default_rng(19)
        cfg = SMALL_CFG
        mix = rng.standard_normal(256)
        ref = rng.standard_normal(256)
        spec = dsp.stft(mix, cfg)
        ref_mag = np.hypot(*(s.data for s in (dsp.stft(ref, cfg).real, dsp.stft(ref, cfg).imag)))

        def f(ps):
            (m,) = ps
            est_mag = tt.mul(m, np.hypot(spec.real.data, spec.imag.data))
            est_wave = dsp.istft(dsp.apply_mask(m, spec), cfg, 256)
            return mdl(est_mag, ref_mag, est_wave, ref, mix, alpha=10.0)

        assert tt.grad_check(f, [rng.random(spec.shape) + 0.05], 1e-5) < 1e-4
