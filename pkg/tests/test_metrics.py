"""Losses and metrics: SI-SNR unit cases and invariances, intelligibility
measures against the independent oracle, corpus reports."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcse import nn
from mcse.metrics import (
    LossWeights,
    MetricReport,
    enhancement_loss,
    estoi,
    evaluate_corpus,
    si_snr,
    si_snr_graph,
    stoi,
    total_loss,
)
from mcse.roomsim import speech_shaped_source

from stoi_oracle import estoi_oracle, stoi_oracle


def orthogonal_pair(rng, n=4000, ratio=0.1):
    """Zero-mean ref plus orthogonal noise with ||n||^2 = ratio*||ref||^2."""
    ref = rng.standard_normal(n)
    ref -= ref.mean()
    noise = rng.standard_normal(n)
    noise -= noise.mean()
    noise -= (noise @ ref) / (ref @ ref) * ref
    noise *= np.sqrt(ratio * (ref @ ref) / (noise @ noise))
    return ref + noise, ref


class TestSiSnr:
    def test_hand_case_unit_vectors(self):
        # bare projection formula: target [1,0], residual [0,1] -> 0 dB
        assert si_snr([1.0, 1.0], [1.0, 0.0], zero_mean=False) == pytest.approx(0.0, abs=1e-12)

    def test_collinear_hits_positive_clamp(self, rng):
        ref = rng.standard_normal(1000)
        assert si_snr(3.7 * ref, ref) == 60.0

    def test_constructed_orthogonal_noise_gives_10db(self, rng):
        est, ref = orthogonal_pair(rng, ratio=0.1)
        assert si_snr(est, ref) == pytest.approx(10.0, abs=0.01)

    @pytest.mark.parametrize("gain", [-2.0, 0.5, 3.7])
    def test_scale_invariance(self, rng, gain):
        est, ref = orthogonal_pair(rng, ratio=0.3)
        assert si_snr(gain * est, ref) == pytest.approx(si_snr(est, ref), abs=1e-9)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError, match="all-zero"):
            si_snr(np.ones(10), np.zeros(10))

    def test_zero_estimate_hits_negative_clamp(self, rng):
        ref = rng.standard_normal(100)
        assert si_snr(np.zeros(100), ref) == -60.0

    def test_unclamped_metric_mode(self, rng):
        ref = rng.standard_normal(100)
        assert si_snr(2.0 * ref, ref, clamp_db=None) == np.inf

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError, match="length mismatch"):
            si_snr(np.ones(5), np.ones(6))

    def test_graph_matches_numpy(self, rng):
        est, ref = orthogonal_pair(rng, ratio=0.2)
        g = si_snr_graph(nn.constant(est), ref).item()
        assert g == pytest.approx(si_snr(est, ref), abs=1e-9)

    def test_loss_gradient_passes_fd(self, rng):
        from conftest import fd_gradient

        est0, ref = orthogonal_pair(rng, n=120, ratio=0.5)

        def f(x):
            with nn.no_grad():
                return enhancement_loss(nn.constant(x), ref).item()

        t = nn.Tensor(est0.copy(), requires_grad=True)
        enhancement_loss(t, ref).backward()
        fd = fd_gradient(f, est0)
        assert np.abs(fd - t.grad).max() < 1e-6

    def test_mean_removal_default_differs_from_bare(self):
        # the documented toggle: with means removed this case degenerates
        bare = si_snr([1.0, 1.0], [1.0, 0.0], zero_mean=False)
        removed = si_snr([1.0, 1.0], [1.0, 0.0], zero_mean=True)
        assert bare == pytest.approx(0.0, abs=1e-12)
        assert removed == -60.0


class TestTotalLoss:
    def test_alpha_only_reduces_to_enhancement(self):
        w = LossWeights(1.0, 0.0)
        assert total_loss(-8.0, 123.0, w) == -8.0

    def test_hand_arithmetic(self):
        assert total_loss(-8.0, 2.5, LossWeights(1.0, 1.0)) == pytest.approx(-5.5)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 3), st.floats(0, 3))
    def test_linearity(self, le, la, a, b):
        w = LossWeights(a, b)
        assert total_loss(le, la, w) == pytest.approx(a * le + b * la, rel=1e-12, abs=1e-9)

    def test_graph_gradient_splits_linearly(self):
        le = nn.Parameter(np.array(-4.0))
        la = nn.Parameter(np.array(2.0))
        total_loss(le, la, LossWeights(1.5, 0.5)).backward()
        assert le.grad == pytest.approx(1.5)
        assert la.grad == pytest.approx(0.5)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            LossWeights(-1.0, 0.0)


@pytest.fixture(scope="module")
def speech_signals():
    rng = np.random.default_rng(7)
    return [speech_shaped_source(rng, 24000) for _ in range(10)]


class TestIntelligibility:
    def test_identity_is_one(self, speech_signals):
        x = speech_signals[0]
        assert stoi(x, x) == pytest.approx(1.0, abs=1e-8)
        assert estoi(x, x) == pytest.approx(1.0, abs=1e-8)

    def test_independent_noise_scores_low(self):
        vals = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            ref = speech_shaped_source(rng, 16000)
            noise = rng.standard_normal(16000) * 0.05
            vals.append(stoi(noise, ref))
        assert np.mean(vals) <= 0.2

    def test_matches_oracle(self, speech_signals):
        rng = np.random.default_rng(3)
        stoi_diffs, estoi_diffs = [], []
        for x in speech_signals:
            degraded = x + rng.standard_normal(len(x)) * 0.02
            stoi_diffs.append(abs(stoi(degraded, x) - stoi_oracle(degraded, x)))
            estoi_diffs.append(abs(estoi(degraded, x) - estoi_oracle(degraded, x)))
        assert np.mean(stoi_diffs) <= 1e-3
        assert np.mean(estoi_diffs) <= 1e-3

    def test_common_gain_invariance(self, speech_signals):
        x = speech_signals[1]
        rng = np.random.default_rng(11)
        y = x + rng.standard_normal(len(x)) * 0.02
        assert stoi(3.0 * y, 3.0 * x) == pytest.approx(stoi(y, x), abs=1e-10)
        assert estoi(3.0 * y, 3.0 * x) == pytest.approx(estoi(y, x), abs=1e-10)

    def test_too_short_rejected(self, rng):
        with pytest.raises(ValueError, match="(too short|at least)"):
            stoi(rng.standard_normal(2000), rng.standard_normal(2000))

    def test_all_silent_rejected(self):
        x = np.zeros(24000)
        with pytest.raises(ValueError):
            stoi(x, x)

    def test_unsupported_rate_rejected(self, rng):
        x = rng.standard_normal(24000)
        with pytest.raises(ValueError, match="sample rate"):
            stoi(x, x, sample_rate=44100)

    def test_degradation_ordering(self, speech_signals):
        """More noise should not raise intelligibility (sanity, not a
        guaranteed property; checked on a fixed draw)."""
        x = speech_signals[2]
        rng = np.random.default_rng(5)
        n = rng.standard_normal(len(x))
        mild = stoi(x + 0.01 * n, x)
        heavy = stoi(x + 0.2 * n, x)
        assert heavy < mild


class _IdentityModel:
    def enhance(self, mixture):
        return np.asarray(mixture)[0].astype(np.float64)


class TestEvaluateCorpus:
    def test_perfect_model_hits_clamp_and_unity(self, speech_signals):
        examples = [(f"utt{i}", x[None, :], x) for i, x in enumerate(speech_signals[:3])]
        report = evaluate_corpus(_IdentityModel(), examples)
        assert all(r["si_snr"] == 60.0 for r in report.rows)
        assert all(abs(r["stoi"] - 1.0) < 1e-8 for r in report.rows)
        assert report.mean("si_snr") == 60.0

    def test_noisy_baseline_column_present(self, speech_signals):
        x = speech_signals[0]
        noisy = x + np.random.default_rng(0).standard_normal(len(x)) * 0.02
        report = evaluate_corpus(_IdentityModel(), [("u0", noisy[None, :], x)])
        row = report.rows[0]
        assert row["noisy_si_snr"] == row["si_snr"]  # identity model passes ch1
        assert row["noisy_stoi"] is not None

    def test_failures_logged_and_excluded(self, speech_signals):
        x = speech_signals[0]
        examples = [("ok", x[None, :], x), ("bad", x[None, :], np.zeros_like(x))]
        report = evaluate_corpus(_IdentityModel(), examples)
        assert report.failures == 1
        assert len(report.rows) == 1

    def test_csv_layout(self, tmp_path, speech_signals):
        x = speech_signals[0]
        report = evaluate_corpus(_IdentityModel(), [("u0", x[None, :], x)])
        out = tmp_path / "report.csv"
        report.write_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("utt_id,si_snr,stoi,estoi,noisy_si_snr")
        assert lines[-1].startswith("mean,")
        assert len(lines) == 3

    def test_deterministic(self, speech_signals):
        x = speech_signals[0]
        examples = [("u0", x[None, :], x)]
        a = evaluate_corpus(_IdentityModel(), examples).rows[0]
        b = evaluate_corpus(_IdentityModel(), examples).rows[0]
        assert a == b

    def test_pesq_merge(self, speech_signals):
        x = speech_signals[0]
        report = evaluate_corpus(_IdentityModel(), [("u0", x[None, :], x)],
                                 pesq_scores={"u0": 3.21})
        assert report.rows[0]["pesq"] == 3.21

    def test_table_format(self, speech_signals):
        x = speech_signals[0]
        report = evaluate_corpus(_IdentityModel(), [("u0", x[None, :], x)])
        table = report.format_table()
        assert "noisy" in table and "enhanced" in table
