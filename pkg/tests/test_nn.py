"""Engine tests: every op's backward against central differences, layer
behaviour, Adam, and the checkpoint archive."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcse import nn
from mcse.nn.tensor import StaleGraphError

from conftest import fd_gradient


def check_op(op, *shapes, h=1e-6, tol=1e-7, seed=0, **kwargs):
    """FD-check d(sum(op(x...) * probe))/dx for every input tensor."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    probe = None

    def run(arrs, need_probe_shape=False):
        ts = [nn.Tensor(a, requires_grad=True) for a in arrs]
        out = op(*ts, **kwargs)
        nonlocal probe
        if probe is None:
            probe = np.random.default_rng(99).standard_normal(out.shape)
        return nn.tsum(out * nn.constant(probe)), ts

    loss, tensors = run(arrays)
    loss.backward()
    for i, arr in enumerate(arrays):
        def f(x):
            arrs = list(arrays)
            arrs[i] = x
            val, _ = run(arrs)
            return val.item()

        fd = fd_gradient(f, arr, h)
        err = np.abs(fd - tensors[i].grad).max()
        assert err < tol, f"input {i}: max abs grad error {err}"


class TestElementwiseGrads:
    def test_add(self):
        check_op(nn.add, (3, 4), (3, 4))

    def test_add_broadcast(self):
        check_op(nn.add, (3, 4), (1, 4))
        check_op(nn.add, (2, 3, 4), (4,))

    def test_mul(self):
        check_op(nn.mul, (3, 4), (3, 4))
        check_op(nn.mul, (5, 1), (5, 6))

    def test_power(self):
        check_op(lambda x: nn.power(x * x + 2.0, 0.5), (3, 4))

    def test_square_sqrt(self):
        check_op(lambda x: nn.sqrt(nn.square(x) + 1.0), (6,))

    def test_exp_log(self):
        check_op(lambda x: nn.log(nn.exp(x) + 1.0), (4, 3))

    def test_sigmoid(self):
        check_op(nn.sigmoid, (5, 5))

    def test_tanh(self):
        check_op(nn.tanh, (5, 5))

    def test_relu(self):
        # inputs bounded away from the kink
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 4))
        x[np.abs(x) < 0.05] = 0.1
        t = nn.Tensor(x, requires_grad=True)
        probe = rng.standard_normal((4, 4))
        nn.tsum(nn.relu(t) * nn.constant(probe)).backward()
        fd = fd_gradient(lambda a: float((np.maximum(a, 0) * probe).sum()), x)
        assert np.abs(fd - t.grad).max() < 1e-7

    def test_maximum_minimum_tensor(self):
        check_op(nn.maximum, (4, 4), (4, 4), seed=5)
        check_op(nn.minimum, (4, 4), (4, 4), seed=5)

    def test_clip(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(20) * 2
        x[np.abs(np.abs(x) - 1.0) < 0.05] += 0.2  # keep away from clip edges
        t = nn.Tensor(x, requires_grad=True)
        nn.tsum(nn.clip(t, -1.0, 1.0)).backward()
        assert np.array_equal(t.grad, ((x >= -1) & (x <= 1)).astype(float))


class TestShapeOpGrads:
    def test_sum_axes(self):
        check_op(lambda x: nn.tsum(x, axis=0, keepdims=True), (3, 4))
        check_op(lambda x: nn.tsum(x, axis=(0, 2)), (2, 3, 4))

    def test_mean(self):
        check_op(lambda x: nn.tmean(x, axis=1), (3, 4))

    def test_cumsum(self):
        check_op(lambda x: nn.cumsum(x, axis=1), (3, 5))

    def test_reshape_transpose(self):
        check_op(lambda x: nn.transpose(nn.reshape(x, (4, 3)), (1, 0)), (3, 4))

    def test_getitem(self):
        check_op(lambda x: x[1:3, ::2], (4, 6))

    def test_concat(self):
        check_op(lambda a, b: nn.concat([a, b], axis=1), (3, 2), (3, 4))

    def test_pads(self):
        check_op(lambda x: nn.pad2d(x, ((1, 2), (3, 0))), (2, 3, 4))
        check_op(lambda x: nn.pad1d(x, 2, 1), (3, 5))
        check_op(lambda x: nn.pad_edge1d(x, 2, 3), (3, 5))

    def test_matmul(self):
        check_op(nn.matmul, (3, 4), (4, 5))

    def test_unfold_overlap(self):
        check_op(lambda x: nn.unfold_frames(x, 6, 3), (21,))
        check_op(lambda f: nn.overlap_add(f, 3, 24), (6, 6))

    def test_cross_entropy(self):
        labels = np.array([0, 2, 1, 2])
        check_op(lambda x: nn.cross_entropy(x, labels), (3, 4), tol=1e-6)


class TestConvGrads:
    def test_conv2d_plain(self):
        check_op(nn.conv2d, (2, 6, 7), (3, 2, 3, 3))

    def test_conv2d_strided_dilated_padded(self):
        check_op(nn.conv2d, (2, 9, 11), (4, 2, 3, 3), stride=(2, 1), dilation=(2, 2),
                 pad=((0, 0), (4, 0)))

    def test_conv2d_bias(self):
        check_op(nn.conv2d, (2, 5, 5), (3, 2, 2, 2), (3,))

    def test_depthwise(self):
        check_op(nn.depthwise_conv1d, (4, 12), (4, 3), dilation=2)


def test_conv2d_matches_naive_loops(rng):
    """Direct six-nested-loop convolution oracle on a small instance."""
    x = rng.standard_normal((4, 6, 6))
    w = rng.standard_normal((3, 4, 2, 3))
    sh, sw, dh, dw = 2, 1, 1, 2
    out = nn.conv2d(nn.constant(x), nn.constant(w), stride=(sh, sw), dilation=(dh, dw)).data
    Ho = (6 - dh * (2 - 1) - 1) // sh + 1
    Wo = (6 - dw * (3 - 1) - 1) // sw + 1
    ref = np.zeros((3, Ho, Wo))
    for o in range(3):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(4):
                    for a in range(2):
                        for b in range(3):
                            acc += w[o, c, a, b] * x[c, i * sh + a * dh, j * sw + b * dw]
                ref[o, i, j] = acc
    assert out.shape == ref.shape
    assert np.abs(out - ref).max() < 1e-12


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((1, 5, 7))
    w = np.ones((1, 1, 1, 1))
    out = nn.conv2d(nn.constant(x), nn.constant(w)).data
    assert np.array_equal(out, x)


def test_conv2d_published_shape(rng):
    """5 panels x 257 x T with a 5x3 kernel, stride (2,1), causal width pad."""
    x = rng.standard_normal((5, 257, 20)).astype(np.float32)
    w = rng.standard_normal((8, 5, 5, 3)).astype(np.float32)
    out = nn.conv2d(nn.constant(x), nn.constant(w), stride=(2, 1), pad=((0, 0), (2, 0)))
    assert out.shape == (8, 127, 20)


def test_conv2d_kernel_too_large():
    x = nn.constant(np.zeros((1, 4, 4)))
    w = nn.constant(np.zeros((1, 1, 6, 2)))
    with pytest.raises(ValueError, match="does not fit"):
        nn.conv2d(x, w)


def test_conv2d_translation_equivariance(rng):
    """Stride-1 convolution commutes with time shift on the interior."""
    x = rng.standard_normal((2, 5, 30))
    w = rng.standard_normal((3, 2, 3, 3))
    shifted = np.roll(x, 4, axis=2)
    a = nn.conv2d(nn.constant(x), nn.constant(w)).data
    b = nn.conv2d(nn.constant(shifted), nn.constant(w)).data
    assert np.allclose(a[:, :, 5:20], b[:, :, 9:24], atol=1e-12)


class TestBackwardContract:
    def test_linear_map_grad_is_input(self, rng):
        x = rng.standard_normal((4, 5))
        w = nn.Parameter(rng.standard_normal((4, 5)))
        nn.tsum(w * nn.constant(x)).backward()
        assert np.allclose(w.grad, x)

    def test_stale_graph_error(self):
        w = nn.Parameter(np.ones(3))
        loss = nn.tsum(nn.square(w))
        loss.backward()
        with pytest.raises(StaleGraphError):
            loss.backward()

    def test_zero_seed_gives_zero_grads(self, rng):
        w = nn.Parameter(rng.standard_normal(5))
        loss = nn.tsum(nn.sigmoid(w))
        loss.backward(seed=0.0)
        assert np.array_equal(w.grad, np.zeros(5))

    def test_grad_accumulates_until_zeroed(self):
        w = nn.Parameter(np.ones(3))
        nn.tsum(w * 2.0).backward()
        nn.tsum(w * 2.0).backward()
        assert np.allclose(w.grad, 4.0)
        w.zero_grad()
        assert w.grad is None

    def test_non_scalar_root_rejected(self):
        w = nn.Parameter(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            (w * 2.0).backward()

    def test_no_grad_builds_no_graph(self):
        w = nn.Parameter(np.ones(3))
        with nn.no_grad():
            out = nn.tsum(nn.square(w))
        assert out._backward_fn is None

    def test_determinism_bit_identical(self, rng):
        x = rng.standard_normal((3, 20)).astype(np.float32)
        conv = nn.Conv1d(3, 4, kernel=3, pad=(2, 0), rng=np.random.default_rng(0))

        def once():
            conv.zero_grad()
            out = nn.tsum(nn.square(conv(nn.constant(x))))
            out.backward()
            return out.item(), conv.weight.grad.copy()

        v1, g1 = once()
        v2, g2 = once()
        assert v1 == v2
        assert np.array_equal(g1, g2)


class TestBatchNorm:
    def test_passthrough_on_normalized_input(self, rng):
        x = rng.standard_normal((3, 40, 40))
        x = (x - x.mean(axis=(1, 2), keepdims=True)) / x.std(axis=(1, 2), keepdims=True)
        bn = nn.BatchNorm(3, dtype=np.float64)
        out = bn(nn.constant(x)).data
        assert np.abs(out - x).max() < 1e-4

    def test_constant_panel_returns_beta(self):
        bn = nn.BatchNorm(2, dtype=np.float64)
        bn.beta.data = np.array([1.5, -0.5])
        out = bn(nn.constant(np.full((2, 4, 4), 7.0))).data
        assert np.allclose(out[0], 1.5) and np.allclose(out[1], -0.5)

    def test_training_moments(self, rng):
        x = rng.standard_normal((4, 30, 30)) * 3 + 1
        bn = nn.BatchNorm(4, dtype=np.float64)
        out = bn(nn.constant(x)).data
        assert np.abs(out.mean(axis=(1, 2))).max() < 1e-6
        assert np.abs(out.var(axis=(1, 2)) - 1).max() < 1e-4

    def test_eval_uses_running_stats(self, rng):
        bn = nn.BatchNorm(2, momentum=1.0, dtype=np.float64)
        x = rng.standard_normal((2, 10, 10))
        bn(nn.constant(x))  # loads running stats with batch stats
        bn.eval()
        y = rng.standard_normal((2, 10, 10))
        out = bn(nn.constant(y)).data
        mu = x.mean(axis=(1, 2), keepdims=True)
        var = x.var(axis=(1, 2), keepdims=True)
        assert np.allclose(out, (y - mu) / np.sqrt(var + 1e-5), atol=1e-10)

    def test_needs_two_elements(self):
        bn = nn.BatchNorm(2)
        with pytest.raises(ValueError, match=">= 2 elements"):
            bn(nn.constant(np.ones((2, 1))))

    def test_gradients(self, rng):
        x = rng.standard_normal((2, 4, 4))
        bn = nn.BatchNorm(2, dtype=np.float64)
        probe = rng.standard_normal((2, 4, 4))

        def f(arr):
            return float((bn(nn.constant(arr)).data * probe).sum())

        t = nn.Tensor(x, requires_grad=True)
        nn.tsum(bn(t) * nn.constant(probe)).backward()
        fd = fd_gradient(f, x)
        assert np.abs(fd - t.grad).max() < 1e-6


class TestCumulativeLayerNorm:
    def test_frame_zero_uses_own_stats(self, rng):
        x = rng.standard_normal((6, 10))
        cln = nn.CumulativeLayerNorm(6, dtype=np.float64)
        out = cln(nn.constant(x)).data
        col = x[:, 0]
        expected = (col - col.mean()) / np.sqrt(max(col.var(), 0) + 1e-8)
        assert np.allclose(out[:, 0], expected, atol=1e-10)

    def test_converges_to_global_layernorm(self, rng):
        x = rng.standard_normal((8, 1200))
        cln = nn.CumulativeLayerNorm(8, dtype=np.float64)
        out = cln(nn.constant(x)).data
        g = (x[:, 1000] - x[:, : 1001].mean()) / np.sqrt(x[:, : 1001].var() + 1e-8)
        # cumulative statistics at t=1000 vs the full-prefix layer norm
        assert np.abs(out[:, 1000] - g).max() < 1e-2

    def test_causality_bit_exact(self, rng):
        x = rng.standard_normal((4, 30))
        cln = nn.CumulativeLayerNorm(4, dtype=np.float64)
        base = cln(nn.constant(x)).data
        x2 = x.copy()
        x2[:, 20:] += rng.standard_normal((4, 10)) * 5
        out = cln(nn.constant(x2)).data
        assert np.array_equal(base[:, :20], out[:, :20])

    def test_gradients(self, rng):
        x = rng.standard_normal((3, 7))
        cln = nn.CumulativeLayerNorm(3, dtype=np.float64)
        probe = rng.standard_normal((3, 7))
        t = nn.Tensor(x, requires_grad=True)
        nn.tsum(cln(t) * nn.constant(probe)).backward()
        fd = fd_gradient(lambda a: float((cln(nn.constant(a)).data * probe).sum()), x)
        assert np.abs(fd - t.grad).max() < 1e-6


class TestPReLU:
    def test_matches_definition(self, rng):
        x = rng.standard_normal((3, 10))
        act = nn.PReLU(init=0.2, dtype=np.float64)
        out = act(nn.constant(x)).data
        assert np.allclose(out, np.where(x > 0, x, 0.2 * x))

    def test_slope_gradient(self, rng):
        x = rng.standard_normal((3, 10))
        act = nn.PReLU(init=0.25, dtype=np.float64)
        nn.tsum(act(nn.constant(x))).backward()
        assert np.allclose(act.slope.grad, x[x < 0].sum())


class TestAdam:
    def test_zero_grad_no_change(self):
        p = nn.Parameter(np.array([1.0, 2.0]))
        opt = nn.Adam([p], weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_first_step_hand_value(self):
        """Bias correction makes the first step lr * sign(g)."""
        p = nn.Parameter(np.array([1.0]))
        opt = nn.Adam([p], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        p.grad = np.array([0.5])
        opt.step()
        assert abs(p.data[0] - (1.0 - 1e-3)) < 1e-9

    def test_quadratic_convergence(self):
        p = nn.Parameter(np.array([0.0]))
        opt = nn.Adam([p], lr=1e-3, weight_decay=0.0)
        for _ in range(20000):
            p.grad = 2.0 * (p.data - 3.0)
            opt.step()
            if abs(p.data[0] - 3.0) <= 1e-2:
                break
        assert abs(p.data[0] - 3.0) <= 1e-2

    def test_nonfinite_gradient_skipped(self, caplog):
        p = nn.Parameter(np.array([1.0]))
        opt = nn.Adam([p], weight_decay=0.0)
        p.grad = np.array([np.nan])
        opt.step()
        assert np.array_equal(p.data, [1.0])
        assert opt.skipped_updates == 1

    def test_coupled_decay_changes_params_without_grad_signal(self):
        p = nn.Parameter(np.array([2.0]))
        opt = nn.Adam([p], lr=1e-3, weight_decay=1e-2)
        p.grad = np.array([0.0])
        opt.step()
        assert p.data[0] < 2.0  # decay pulled toward zero


class TestCheckpoint:
    def test_archive_roundtrip_bit_exact(self, tmp_path, rng):
        tensors = {
            "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "b.bias": rng.standard_normal(7),
            "count": np.array([5], dtype=np.int64),
        }
        path = tmp_path / "ckpt.bin"
        nn.save_archive(tensors, path)
        loaded = nn.load_archive(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert loaded[k].dtype == tensors[k].dtype
            assert np.array_equal(loaded[k], tensors[k])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"nope" + b"\x00" * 16)
        with pytest.raises(ValueError, match="not a tensor archive"):
            nn.load_archive(path)

    def test_module_state_roundtrip(self, tmp_path):
        conv = nn.Conv2d(2, 3, (3, 3), rng=np.random.default_rng(1))
        state = conv.state_dict()
        nn.save_archive(state, tmp_path / "m.bin")
        conv2 = nn.Conv2d(2, 3, (3, 3), rng=np.random.default_rng(2))
        conv2.load_state_dict(nn.load_archive(tmp_path / "m.bin"))
        assert np.array_equal(conv.weight.data, conv2.weight.data)
        assert np.array_equal(conv.bias.data, conv2.bias.data)

    def test_strict_load_rejects_mismatch(self):
        conv = nn.Conv2d(2, 3, (3, 3), rng=np.random.default_rng(1))
        with pytest.raises(ValueError, match="state dict mismatch"):
            conv.load_state_dict({"weight": conv.weight.data})


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(5, 20))
def test_conv1d_pointwise_equals_matmul(o, c, t):
    rng = np.random.default_rng(o * 100 + c * 10 + t)
    conv = nn.Conv1d(c, o, kernel=1, rng=rng, dtype=np.float64)
    x = rng.standard_normal((c, t))
    out = conv(nn.constant(x)).data
    w = conv.weight.data.reshape(o, c)
    assert np.allclose(out, w @ x + conv.bias.data[:, None], atol=1e-12)
