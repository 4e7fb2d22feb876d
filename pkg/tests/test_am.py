"""Acoustic-model branch: classifier shapes, proxy targets, pre-training
overfit sanity, the auxiliary loss, and checkpointing."""

import numpy as np
import pytest

from mcse import nn
from mcse.am import (
    TdnnAcousticModel,
    TdnnConfig,
    am_loss,
    am_loss_graph,
    load_am,
    lps_of_wave,
    make_proxy_targets,
    pretrain_am,
    save_am,
    train_codebook,
)
from mcse.dsp import FrameParams
from mcse.roomsim import speech_shaped_source, stationary_noise


def tiny_am_config(bins=17, classes=8):
    return TdnnConfig(input_dim=bins, num_blocks=2, io_dim=12, mid_dim=6,
                      num_classes=classes)


class TestTdnnForward:
    def test_logits_shape(self, tiny_frame, rng):
        model = TdnnAcousticModel(tiny_am_config(), rng=np.random.default_rng(0))
        feats = rng.standard_normal((17, 25)).astype(np.float32)
        logits = model(nn.constant(feats))
        assert logits.shape == (8, 25)

    def test_paper_scale_head_width(self, rng):
        """Nine 1536->512->1536 blocks onto 3920 classes."""
        model = TdnnAcousticModel(TdnnConfig(), rng=np.random.default_rng(0))
        assert model.cfg.num_blocks == 9
        model.eval()
        model.load_state_dict({k: v for k, v in model.state_dict().items()})  # no-op
        feats = rng.standard_normal((257, 4)).astype(np.float32)
        with nn.no_grad():
            logits = model(nn.constant(feats))
        assert logits.shape == (3920, 4)

    def test_constant_input_constant_logits(self, rng):
        cfg = tiny_am_config()
        model = TdnnAcousticModel(cfg, rng=np.random.default_rng(1))
        model.eval()
        feats = np.full((17, 30), 0.7, dtype=np.float32)
        with nn.no_grad():
            logits = model(nn.constant(feats)).data
        span = 2 * cfg.num_blocks  # edge-replication context region
        interior = logits[:, span : 30 - span]
        assert np.abs(interior - interior[:, :1]).max() < 1e-5

    def test_input_dim_checked(self, rng):
        model = TdnnAcousticModel(tiny_am_config(), rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="expects 17 bins"):
            model(nn.constant(rng.standard_normal((16, 5)).astype(np.float32)))

    def test_short_utterance_warns_but_runs(self, rng, caplog):
        model = TdnnAcousticModel(tiny_am_config(), rng=np.random.default_rng(0))
        feats = rng.standard_normal((17, 2)).astype(np.float32)
        model.eval()
        with nn.no_grad(), caplog.at_level("WARNING"):
            logits = model(nn.constant(feats))
        assert logits.shape == (8, 2)
        assert any("context" in r.message for r in caplog.records)

    def test_uneven_context_rejected(self):
        with pytest.raises(ValueError, match="evenly spaced"):
            TdnnConfig(input_dim=17, context=(-2, 0, 1))


class TestProxyTargets:
    def test_frame_at_centroid(self):
        codebook = np.array([[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]])
        feats = np.array([[5.0], [5.0]])  # one frame equal to centroid 1
        assert make_proxy_targets(feats, codebook)[0] == 1

    def test_nearest_of_two(self):
        codebook = np.array([[0.0], [10.0]])
        assert make_proxy_targets(np.array([[4.0]]), codebook)[0] == 0
        assert make_proxy_targets(np.array([[6.0]]), codebook)[0] == 1

    def test_tie_goes_to_lowest_index(self):
        codebook = np.array([[0.0], [10.0]])
        assert make_proxy_targets(np.array([[5.0]]), codebook)[0] == 0

    def test_matches_bruteforce_scan(self, rng):
        codebook = rng.standard_normal((12, 6))
        feats = rng.standard_normal((6, 40))
        labels = make_proxy_targets(feats, codebook)
        for t in range(40):
            dists = [np.sum((feats[:, t] - c) ** 2) for c in codebook]
            assert labels[t] == int(np.argmin(dists))

    def test_empty_codebook_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            make_proxy_targets(np.zeros((3, 4)), np.zeros((0, 3)))

    def test_codebook_training_partitions_data(self, rng):
        frames = np.concatenate([
            rng.standard_normal((40, 3)) + 10,
            rng.standard_normal((40, 3)) - 10,
        ])
        codebook = train_codebook(frames, 2, seed=0)
        labels = make_proxy_targets(frames.T, codebook)
        assert len(np.unique(labels[:40])) == 1
        assert len(np.unique(labels[40:])) == 1
        assert labels[0] != labels[40]


@pytest.fixture(scope="module")
def pretrained():
    """Desk-style pre-training on a small synthetic clean corpus."""
    frame = FrameParams(win_len=64, hop=32, fft_len=64)
    rng = np.random.default_rng(0)
    waves = [speech_shaped_source(rng, 4000) for _ in range(12)]
    cfg = TdnnConfig(input_dim=frame.bins, num_blocks=2, io_dim=32, mid_dim=16,
                     num_classes=8)
    model, codebook, history = pretrain_am(waves, frame, cfg, seed=0, max_epochs=40,
                                           lr=3e-3, target_accuracy=0.95, patience=10)
    return model, codebook, history, waves, frame


class TestPretrain:
    def test_reaches_training_accuracy(self, pretrained):
        _, _, history, _, _ = pretrained
        assert history[-1]["accuracy"] >= 0.90

    def test_all_parameters_frozen(self, pretrained):
        model, _, _, _, _ = pretrained
        assert all(not p.requires_grad for p in model.parameters())

    def test_clean_loss_below_noisy_loss(self, pretrained, rng):
        model, codebook, _, waves, frame = pretrained
        clean_losses, noisy_losses = [], []
        for w in waves:
            labels = make_proxy_targets(lps_of_wave(w, frame), codebook)
            clean_losses.append(am_loss(w, labels, model, frame))
            noisy = w + stationary_noise(rng, len(w)) * 10.0
            noisy_losses.append(am_loss(noisy, labels, model, frame))
        assert np.mean(clean_losses) < np.mean(noisy_losses)

    def test_am_loss_matches_training_loss_on_clean(self, pretrained):
        model, codebook, _, waves, frame = pretrained
        labels = make_proxy_targets(lps_of_wave(waves[0], frame), codebook)
        val = am_loss(waves[0], labels, model, frame)
        logits = model(nn.constant(lps_of_wave(waves[0], frame).astype(np.float32)))
        ref = nn.cross_entropy(logits, labels).item()
        assert abs(val - ref) < 1e-6


class TestAmLoss:
    def test_uniform_logits_give_log_k(self, rng):
        cfg = tiny_am_config(bins=17, classes=8)
        frame = FrameParams(win_len=32, hop=16, fft_len=32)
        model = TdnnAcousticModel(cfg, rng=np.random.default_rng(0))
        for p in model.parameters():
            p.data = np.zeros_like(p.data)
        model.freeze()
        model.eval()
        wave = rng.standard_normal(400)
        T = frame.num_frames(400)
        labels = rng.integers(0, 8, size=T)
        val = am_loss(wave, labels, model, frame)
        assert abs(val - np.log(8)) < 1e-6

    def test_frame_count_mismatch_rejected(self, rng):
        cfg = tiny_am_config()
        frame = FrameParams(win_len=32, hop=16, fft_len=32)
        model = TdnnAcousticModel(cfg, rng=np.random.default_rng(0))
        model.eval()
        with pytest.raises(ValueError, match="targets"):
            am_loss(rng.standard_normal(400), np.zeros(3, dtype=int), model, frame)

    def test_gradient_reaches_waveform_only(self, rng):
        cfg = tiny_am_config()
        frame = FrameParams(win_len=32, hop=16, fft_len=32)
        model = TdnnAcousticModel(cfg, rng=np.random.default_rng(0), dtype=np.float64)
        model.freeze()
        model.eval()
        wave = nn.Tensor(rng.standard_normal(400), requires_grad=True)
        labels = rng.integers(0, 8, size=frame.num_frames(400))
        am_loss_graph(wave, labels, model, frame).backward()
        assert wave.grad is not None and np.any(wave.grad != 0)
        assert all(p.grad is None for p in model.parameters())

    def test_waveform_gradient_passes_fd(self, rng):
        from conftest import fd_gradient

        cfg = tiny_am_config()
        frame = FrameParams(win_len=32, hop=16, fft_len=32)
        model = TdnnAcousticModel(cfg, rng=np.random.default_rng(0), dtype=np.float64)
        model.freeze()
        model.eval()
        x0 = rng.standard_normal(120)
        labels = rng.integers(0, 8, size=frame.num_frames(120))

        def f(x):
            with nn.no_grad():
                return am_loss_graph(nn.constant(x), labels, model, frame).item()

        t = nn.Tensor(x0.copy(), requires_grad=True)
        am_loss_graph(t, labels, model, frame).backward()
        fd = fd_gradient(f, x0)
        denom = np.maximum(np.abs(fd) + np.abs(t.grad), 1e-3)
        assert (np.abs(fd - t.grad) / denom).max() < 1e-4


class TestAmCheckpoint:
    def test_save_load_roundtrip(self, pretrained, tmp_path):
        model, codebook, _, waves, frame = pretrained
        path = tmp_path / "am.bin"
        save_am(path, model, codebook)
        loaded, cb2 = load_am(path)
        assert np.array_equal(cb2, codebook)
        for (n1, p1), (n2, p2) in zip(model.named_parameters(),
                                      loaded.named_parameters()):
            assert n1 == n2
            assert np.array_equal(p1.data, p2.data)
        assert all(not p.requires_grad for p in loaded.parameters())
        feats = lps_of_wave(waves[0], frame).astype(np.float32)
        with nn.no_grad():
            a = model(nn.constant(feats)).data
            b = loaded(nn.constant(feats)).data
        assert np.array_equal(a, b)
