import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cuetrack import numerics as nx
from cuetrack.numerics import Tensor


def naive_matmul(x, W):
    out = np.zeros((x.shape[0], W.shape[1]))
    for i in range(x.shape[0]):
        for j in range(W.shape[1]):
            acc = 0.0
            for k in range(x.shape[1]):
                acc += x[i, k] * W[k, j]
            out[i, j] = acc
    return out


def naive_attention(Q, K, V, mask=None, bias=None):
    m, n = Q.shape[0], K.shape[0]
    d = Q.shape[1]
    out = np.zeros((m, V.shape[1]))
    scores = np.zeros((m, n))
    for i in range(m):
        logits = []
        for j in range(n):
            if mask is not None and not mask[i, j]:
                logits.append(None)
                continue
            s = sum(Q[i, t] * K[j, t] for t in range(d))
            if bias is not None:
                s += bias[i, j]
            logits.append(s / math.sqrt(d))
        top = max(v for v in logits if v is not None)
        w = [0.0 if v is None else math.exp(v - top) for v in logits]
        z = sum(w)
        for j in range(n):
            scores[i, j] = w[j] / z
            out[i] += scores[i, j] * V[j]
    return out, scores


class TestLinear:
    def test_identity(self):
        y = nx.linear(Tensor([1.0, 0.0]), Tensor(np.eye(2)))
        np.testing.assert_array_equal(y.data, [1.0, 0.0])

    def test_permutation(self):
        y = nx.linear(Tensor([2.0, 3.0]), Tensor([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(y.data, [3.0, 2.0])

    def test_against_triple_loop(self, rng):
        x, W, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
        y = nx.linear(Tensor(x), Tensor(W), Tensor(b))
        assert np.max(np.abs(y.data - (naive_matmul(x, W) + b))) < 1e-12

    def test_shape_error_names_shapes(self):
        with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            nx.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_saturation(self):
        out = nx.softmax(Tensor([1000.0, 0.0])).data
        assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12

    def test_closed_form(self):
        out = nx.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_nan_raises(self):
        with pytest.raises(nx.NumericError):
            nx.softmax(Tensor([0.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        a = nx.softmax(Tensor(x)).data
        b = nx.softmax(Tensor(x + c)).data
        assert np.all(a > 0)
        assert np.max(np.abs(a.sum(axis=-1) - 1.0)) < 1e-12
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestLayerNorm:
    EPS = 1e-5

    def test_constant_row(self):
        np.testing.assert_array_equal(nx.layer_norm(Tensor([3.0, 3.0, 3.0])).data, [0.0, 0.0, 0.0])

    def test_unit_row_up_to_epsilon(self):
        # epsilon sits inside the square root, so an already-normalised row shrinks by sqrt(1 + eps)
        out = nx.layer_norm(Tensor([1.0, -1.0])).data
        np.testing.assert_allclose(out, np.array([1.0, -1.0]) / math.sqrt(1.0 + self.EPS), atol=1e-15)
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)

    def test_statistics(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 16))
        out = nx.layer_norm(Tensor(x)).data
        var = x.var(axis=-1)
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-10
        assert np.max(np.abs(out.var(axis=-1) - var / (var + self.EPS))) < 1e-10

    def test_affine(self, rng):
        x, g, b = rng.normal(size=(2, 4)), rng.normal(size=4), rng.normal(size=4)
        base = nx.layer_norm(Tensor(x)).data
        np.testing.assert_allclose(nx.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, base * g + b, atol=1e-14)


class TestMLP:
    def test_single_identity_layer(self, rng):
        x = rng.normal(size=(3, 4))
        out = nx.mlp(Tensor(x), [(Tensor(np.eye(4)), Tensor(np.zeros(4)), None)])
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weights(self, rng):
        net = nx.MLP([4, 6, 2], rng)
        for p in net.parameters():
            p.data[...] = 0.0
        np.testing.assert_array_equal(net(Tensor(rng.normal(size=(3, 4)))).data, np.zeros((3, 2)))

    def test_relu_between_layers_only(self, rng):
        W1, W2 = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
        x = rng.normal(size=(4, 3))
        out = nx.mlp(Tensor(x), [(Tensor(W1), None, nx.relu), (Tensor(W2), None, None)])
        np.testing.assert_allclose(out.data, np.maximum(x @ W1, 0) @ W2, atol=1e-13)


class TestAttention:
    def test_single_key(self, rng):
        V = rng.normal(size=(1, 4))
        out, scores = nx.attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(V))
        np.testing.assert_allclose(out.data, np.repeat(V, 3, axis=0), atol=1e-15)
        np.testing.assert_array_equal(scores.data, np.ones((3, 1)))

    def test_bias_dominance(self, rng):
        bias = np.zeros((2, 4))
        bias[:, 2] = 1e6
        _, scores = nx.attention(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 3))),
                                 Tensor(rng.normal(size=(4, 3))), bias=Tensor(bias))
        np.testing.assert_allclose(scores.data, np.eye(4)[[2, 2]], atol=1e-12)

    @pytest.mark.parametrize("masked", [False, True])
    def test_against_loops(self, rng, masked):
        Q, K, V, B = (rng.normal(size=s) for s in [(3, 3), (3, 3), (3, 3), (3, 3)])
        mask = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 1]], dtype=bool) if masked else None
        out, scores = nx.attention(Tensor(Q), Tensor(K), Tensor(V), mask, Tensor(B))
        ref_out, ref_scores = naive_attention(Q, K, V, mask, B)
        assert np.max(np.abs(out.data - ref_out)) < 1e-12
        assert np.max(np.abs(scores.data - ref_scores)) < 1e-12

    def test_mask_equals_subproblem(self, rng):
        Q, K, V = rng.normal(size=(1, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        keep = np.array([True, False, True, True, False])
        full, _ = nx.attention(Tensor(Q), Tensor(K), Tensor(V), keep[None, :])
        sub, _ = nx.attention(Tensor(Q), Tensor(K[keep]), Tensor(V[keep]))
        np.testing.assert_allclose(full.data, sub.data, atol=1e-15)

    def test_fully_masked_row(self, rng):
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(nx.ContractError):
            nx.attention(Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 2))),
                         Tensor(rng.normal(size=(2, 2))), mask)


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        nx.backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        nx.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        nx.backward((x * x).sum())
        nx.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(nx.ContractError):
            nx.backward(x * 2.0)

    def test_every_reachable_parameter_gets_grad(self, rng):
        net = nx.MLP([3, 4, 2], rng)
        nx.backward(net(Tensor(rng.normal(size=(5, 3)))).sum())
        for p in net.parameters():
            assert p.grad is not None and p.grad.shape == p.shape

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with nx.no_grad():
            y = x * 3.0
        assert not y.requires_grad


class TestSinusoidal:
    def test_zero(self):
        out = nx.sinusoidal_encoding(np.zeros((1, 2)), bands=3)
        assert out.shape == (1, 12)
        np.testing.assert_array_equal(out.reshape(2, 3, 2)[..., 0], 0.0)
        np.testing.assert_array_equal(out.reshape(2, 3, 2)[..., 1], 1.0)

    def test_ppf_row_width(self):
        assert nx.sinusoidal_encoding(np.zeros((5, 4)), bands=8).shape == (5, 64)

    def test_pi_at_unit_frequency(self):
        s, c = nx.sinusoidal_encoding(np.array([math.pi]), bands=4)[:2]
        assert abs(s) < 1e-12 and abs(c + 1.0) < 1e-12

    def test_frequencies(self):
        v = 0.7
        out = nx.sinusoidal_encoding(np.array([v]), bands=4).reshape(4, 2)
        w = 1.0 / 10000 ** (np.arange(4) / 4)
        np.testing.assert_allclose(out[:, 0], np.sin(v * w), atol=1e-15)
        np.testing.assert_allclose(out[:, 1], np.cos(v * w), atol=1e-15)


class TestOptimiser:
    def test_zero_grad_no_decay_is_identity(self):
        p = nx.Parameter(np.array([0.3, -1.2]))
        nx.adamw_step([p], [np.zeros(2)], 0.1, {}, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [0.3, -1.2])

    def test_first_step(self):
        p = nx.Parameter(np.array([1.0]))
        nx.adamw_step([p], [np.array([1.0])], 0.1, {}, weight_decay=0.0)
        # bias-corrected moments give m_hat = 1, v_hat = 1
        assert abs(p.data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15

    def test_decoupled_decay(self):
        p = nx.Parameter(np.array([2.0]))
        nx.adamw_step([p], [np.zeros(1)], 0.1, {}, weight_decay=0.5)
        assert abs(p.data[0] - 2.0 * (1 - 0.05)) < 1e-15

    def test_quadratic_bowl(self):
        target = np.array([1.5, -0.5, 3.0])
        p = nx.Parameter(np.zeros(3))
        opt = nx.AdamW([p], lr=0.05, weight_decay=0.0)
        for step in range(500):
            p.grad = 2.0 * (p.data - target)
            opt.step(nx.cosine_power_lr(step, 500, 0.05, 0.8))
        assert np.max(np.abs(p.data - target)) < 1e-3

    def test_deterministic(self, rng):
        def run():
            p = nx.Parameter(np.linspace(-1, 1, 4))
            opt = nx.AdamW([p], lr=0.01)
            for i in range(20):
                p.grad = np.sin(p.data * (i + 1))
                opt.step()
            return p.data.copy()

        assert run().tobytes() == run().tobytes()

    def test_state_roundtrip(self):
        p = nx.Parameter(np.ones(2))
        p.name = "w"
        opt = nx.AdamW([p])
        p.grad = np.array([0.5, -0.5])
        opt.step()
        other = nx.AdamW([p])
        other.load_state_arrays(opt.state_arrays())
        assert other.state["step"] == 1
        np.testing.assert_array_equal(other.state["m"][0], opt.state["m"][0])


class TestSchedule:
    def test_start(self):
        assert nx.cosine_power_lr(0, 100) == 2e-4

    def test_end(self):
        assert nx.cosine_power_lr(100, 100) == 0.0

    def test_midpoint(self):
        assert abs(nx.cosine_power_lr(50, 100) - 2e-4 * 0.5 ** 0.8) < 1e-18

    def test_clamp_and_monotone(self):
        lrs = [nx.cosine_power_lr(s, 40) for s in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] == 0.0


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        arrays = {"a.W": rng.normal(size=(2, 3)), "b": np.arange(4.0)}
        nx.save_checkpoint(tmp_path / "c.npz", arrays, {"d_model": 8})
        header, back = nx.load_checkpoint(tmp_path / "c.npz")
        assert header["d_model"] == 8 and header["format_version"] == 1
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_module_state_dict_names_unique(self, rng):
        class Two(nx.Module):
            def __init__(self):
                self.a = nx.MLP([2, 3], rng)
                self.b = [nx.LayerNorm(3), nx.LayerNorm(3)]
                self.shared = self.a.layers[0].W

        names = [n for n, _ in Two().named_parameters()]
        assert len(names) == len(set(names)) == 6
        assert "b.1.gain" in names


class TestGradientCheck:
    def test_detects_corruption(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        fn = lambda: (nx.exp(x) * x).sum()  # noqa: E731
        assert nx.gradient_check(fn, [x]) < 1e-8
        assert nx.gradient_check(fn, [x], corrupt=1e-2) > 1e-4

    @pytest.mark.parametrize("op", ["exp", "log", "sigmoid", "relu", "power", "div", "smooth_l1", "clip"])
    def test_elementwise(self, rng, op):
        x = Tensor(rng.uniform(0.3, 2.0, size=(4,)) * rng.choice([-1, 1], size=4) if op in ("relu", "smooth_l1", "clip")
                   else rng.uniform(0.3, 2.0, size=(4,)), requires_grad=True)
        y = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
        fns = {
            "exp": lambda: nx.exp(x).sum(),
            "log": lambda: nx.log(x).sum(),
            "sigmoid": lambda: nx.sigmoid(x).sum(),
            "relu": lambda: (nx.relu(x) * y).sum(),
            "power": lambda: nx.power(x, 1.7).sum(),
            "div": lambda: (x / y).sum(),
            "smooth_l1": lambda: nx.smooth_l1(x * 1.3).sum(),
            "clip": lambda: (nx.clip(x, -1.0, 1.0) * y).sum(),
        }
        assert nx.gradient_check(fns[op], [x, y]) < 1e-6

    def test_structural_ops(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        w = rng.normal(size=(3, 4))

        def fn():
            s = nx.stack([a, b], axis=0)
            c = nx.concat([a, b], axis=0).reshape(3, 4)
            t = nx.take(a, np.array([1, 0, 1]))
            return (c * w).sum() + s.swapaxes(0, 1).mean() + t.sum() + nx.where(a.data > 0, a, b).sum()

        assert nx.gradient_check(fn, [a, b]) < 1e-8
