import numpy as np
import pytest

from protonc import nn
from protonc.nn import BatchNormState, Backbone, batchnorm2d, conv2d, maxpool2d, relu
from protonc.tensor import ContractError, ShapeError, Tensor, finite_difference_check
from protonc import tensor as T


def conv_six_loop_oracle(x, w, b, stride, padding):
    """Direct cross-correlation: loops over batch, channels, and space."""
    bs, cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((bs, cout, hout, wout))
    for n in range(bs):
        for o in range(cout):
            for i in range(hout):
                for j in range(wout):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x_padded_at(xp, n, c, i * stride + di, j * stride + dj) * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


def x_padded_at(xp, n, c, i, j):
    return xp[n, c, i, j]


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_diagonal_kernel_sums_corners(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        assert out.data.reshape(()) == 5.0

    def test_matches_six_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        for stride, padding in ((1, 0), (1, 1), (2, 1)):
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
            oracle = conv_six_loop_oracle(x, w, b, stride, padding)
            assert np.abs(out.data - oracle).max() <= 1e-12

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError, match="channel"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_kernel_larger_than_input_raises(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros(1)))

    @pytest.mark.parametrize("wrt", ["input", "weight", "bias"])
    def test_gradients(self, wrt, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal(2)
        mix = Tensor(rng.standard_normal((1, 2, 3, 3)))

        def run(xt, wt, bt):
            return T.sum_(T.multiply(conv2d(xt, wt, bt, stride=2, padding=1), mix))

        if wrt == "input":
            err = finite_difference_check(lambda t: run(t, Tensor(w), Tensor(b)), Tensor(x))
        elif wrt == "weight":
            err = finite_difference_check(lambda t: run(Tensor(x), t, Tensor(b)), Tensor(w))
        else:
            err = finite_difference_check(lambda t: run(Tensor(x), Tensor(w), t), Tensor(b))
        assert err <= 1e-5


class TestBatchNorm:
    def test_zero_variance_channel_maps_to_zero(self):
        state = BatchNormState(2)
        x = np.zeros((3, 2, 2, 2))
        x[:, 0] = 7.0  # constant channel
        out = batchnorm2d(Tensor(x), state, training=True)
        assert np.abs(out.data[:, 0]).max() == 0.0

    def test_training_statistics_match_affine(self, rng):
        state = BatchNormState(3)
        state.gamma.data = np.array([1.0, 2.0, 0.5])
        state.beta.data = np.array([0.0, -1.0, 3.0])
        x = rng.standard_normal((4, 3, 6, 6)) * 3.0 + 1.0
        out = batchnorm2d(Tensor(x), state, training=True).data
        for c in range(3):
            vals = out[:, c]
            assert abs(vals.mean() - state.beta.data[c]) <= 1e-6
            assert abs(vals.std() - state.gamma.data[c]) <= 1e-4

    def test_matches_two_pass_oracle(self, rng):
        state = BatchNormState(2)
        state.gamma.data = rng.standard_normal(2)
        state.beta.data = rng.standard_normal(2)
        x = rng.standard_normal((3, 2, 4, 4))
        out = batchnorm2d(Tensor(x), state, training=True).data
        for c in range(2):
            mu = x[:, c].mean()
            var = ((x[:, c] - mu) ** 2).mean()
            expect = (x[:, c] - mu) / np.sqrt(var + state.eps) * state.gamma.data[c] + state.beta.data[c]
            assert np.abs(out[:, c] - expect).max() <= 1e-10

    def test_eval_uses_running_stats(self, rng):
        state = BatchNormState(1)
        state.running_mean = np.array([2.0])
        state.running_var = np.array([4.0])
        x = rng.standard_normal((2, 1, 3, 3))
        out = batchnorm2d(Tensor(x), state, training=False).data
        expect = (x - 2.0) / np.sqrt(4.0 + state.eps)
        assert np.abs(out - expect).max() <= 1e-12

    def test_running_stats_updated_only_in_training(self, rng):
        state = BatchNormState(2)
        x = Tensor(rng.standard_normal((4, 2, 3, 3)))
        before = state.running_mean.copy()
        batchnorm2d(x, state, training=False)
        assert np.array_equal(state.running_mean, before)
        batchnorm2d(x, state, training=True)
        assert not np.array_equal(state.running_mean, before)

    def test_degenerate_batch_raises(self):
        with pytest.raises(ContractError):
            batchnorm2d(Tensor(np.zeros((1, 2, 1, 1))), BatchNormState(2), training=True)

    def test_gradient_through_batch_statistics(self, rng):
        state = BatchNormState(2)
        mix = Tensor(rng.standard_normal((2, 2, 3, 3)))

        def f(t):
            return T.sum_(T.multiply(batchnorm2d(t, state, training=True), mix))

        err = finite_difference_check(f, Tensor(rng.standard_normal((2, 2, 3, 3))))
        assert err <= 1e-5

    def test_gradient_wrt_gamma_beta(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 3, 3)))
        mix = Tensor(rng.standard_normal((2, 2, 3, 3)))
        state = BatchNormState(2)

        def f_gamma(t):
            state.gamma = t
            return T.sum_(T.multiply(batchnorm2d(x, state, training=True), mix))

        assert finite_difference_check(f_gamma, Tensor(np.ones(2))) <= 1e-5


class TestReluMaxpool:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_maxpool_values(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = maxpool2d(Tensor(x), 2)
        assert out.data.reshape(()) == 4.0

    def test_maxpool_indivisible_raises(self):
        with pytest.raises(ShapeError):
            maxpool2d(Tensor(np.zeros((1, 1, 3, 4))), 2)

    def test_maxpool_gradient_routes_to_argmax(self):
        x = np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 1, 2, 2)
        t = Tensor(x, requires_grad=True)
        T.sum_(maxpool2d(t, 2)).backward()
        assert np.array_equal(t.grad.reshape(2, 2), [[0.0, 0.0], [1.0, 0.0]])

    def test_maxpool_tie_routes_to_first_rowmajor(self):
        x = np.full((1, 1, 2, 2), 5.0)
        t = Tensor(x, requires_grad=True)
        T.sum_(maxpool2d(t, 2)).backward()
        assert np.array_equal(t.grad.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_gradient_matches_fd(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        mix = Tensor(rng.standard_normal((1, 2, 2, 2)))
        err = finite_difference_check(
            lambda t: T.sum_(T.multiply(maxpool2d(t, 2), mix)), Tensor(x)
        )
        assert err <= 1e-5

    def test_relu_gradient_matches_fd(self, rng):
        x = rng.standard_normal(12)
        x[np.abs(x) < 1e-3] += 0.1  # stay clear of the kink
        mix = Tensor(rng.standard_normal(12))
        err = finite_difference_check(lambda t: T.sum_(T.multiply(relu(t), mix)), Tensor(x))
        assert err <= 1e-5


class TestBackbones:
    def test_convnet4_shape_at_28(self, rng):
        b = Backbone("convnet4", (1, 28, 28), seed=0)
        out = b.embed(Tensor(rng.standard_normal((3, 1, 28, 28))), training=True)
        assert out.shape == (3, 64)
        assert b.embedding_dim == 64

    def test_convnet4_spatial_reduction_16(self, rng):
        b = Backbone("convnet4", (1, 16, 16), seed=0)
        out = b.embed(Tensor(rng.standard_normal((2, 1, 16, 16))))
        assert out.shape == (2, 64)

    def test_mlp_identity_initialization(self, rng):
        b = Backbone("mlp", (1, 2, 3), mlp_widths=(6,), seed=0)
        b._linears[0].weight.data = np.eye(6)
        b._linears[0].bias.data = np.zeros(6)
        x = rng.standard_normal((4, 1, 2, 3))
        out = b.embed(Tensor(x))
        assert np.array_equal(out.data, x.reshape(4, 6))

    def test_embed_deterministic_for_fixed_seed(self, rng):
        x = rng.standard_normal((2, 1, 16, 16))
        outs = []
        for _ in range(2):
            b = Backbone("convnet4", (1, 16, 16), seed=9)
            outs.append(b.embed(Tensor(x), training=False).data)
        assert np.array_equal(outs[0], outs[1])

    def test_resnet18_embedding_dim(self, rng):
        b = Backbone("resnet18", (1, 28, 28), seed=0)
        out = b.embed(Tensor(rng.standard_normal((2, 1, 28, 28))))
        assert out.shape == (2, 512)

    def test_input_spec_mismatch_raises(self):
        b = Backbone("mlp", (1, 1, 4), mlp_widths=(3,), seed=0)
        with pytest.raises(ShapeError):
            b.embed(Tensor(np.zeros((2, 1, 1, 5))))

    def test_eval_embed_is_pure(self, rng):
        b = Backbone("convnet4", (1, 16, 16), seed=3)
        x = Tensor(rng.standard_normal((2, 1, 16, 16)))
        first = b.embed(x, training=False).data
        second = b.embed(x, training=False).data
        assert np.array_equal(first, second)


class TestParameterCounts:
    def test_convnet4_count(self):
        assert nn.count_parameters(Backbone("convnet4", (1, 28, 28), seed=0)) == 111936

    def test_resnet18_count(self):
        assert nn.count_parameters(Backbone("resnet18", (1, 28, 28), seed=0)) == 11173632

    def test_single_linear_count(self):
        b = Backbone("mlp", (1, 1, 7), mlp_widths=(5,), seed=0)
        assert nn.count_parameters(b) == 7 * 5 + 5


class TestInit:
    def test_same_seed_same_parameters(self):
        a = Backbone("convnet4", (1, 16, 16), seed=4)
        b = Backbone("convnet4", (1, 16, 16), seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_different_seeds_differ(self):
        a = Backbone("mlp", (1, 1, 8), mlp_widths=(16,), seed=1)
        b = Backbone("mlp", (1, 1, 8), mlp_widths=(16,), seed=2)
        assert not np.array_equal(a.parameters()[0].data, b.parameters()[0].data)

    def test_conv_weight_variance(self):
        b = Backbone("convnet4", (1, 28, 28), seed=5)
        w = b._blocks[1][0].weight.data  # 64x64x3x3, fan_in 576
        target = 2.0 / (576 * 3)
        assert abs(w.var() / target - 1.0) <= 0.2

    def test_reinit_resets_running_stats(self, rng):
        b = Backbone("convnet4", (1, 16, 16), seed=0)
        b.embed(Tensor(rng.standard_normal((2, 1, 16, 16))), training=True)
        nn.init_parameters(b, 0)
        for _, bn in b._blocks:
            assert np.array_equal(bn.running_mean, np.zeros(64))
            assert np.array_equal(bn.running_var, np.ones(64))


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        b = Backbone("convnet4", (1, 16, 16), seed=7)
        b.embed(Tensor(rng.standard_normal((2, 1, 16, 16))), training=True)  # move running stats
        path = tmp_path / "model.pckp"
        nn.save_checkpoint(b, path)
        loaded = nn.load_checkpoint(path)
        assert loaded.arch == "convnet4"
        assert loaded.input_spec == (1, 16, 16)
        for a, c in zip(b.state_arrays(), loaded.state_arrays()):
            assert np.array_equal(a, c)

    def test_mlp_round_trip_keeps_widths(self, tmp_path):
        b = Backbone("mlp", (1, 1, 6), mlp_widths=(12, 4), seed=1)
        nn.save_checkpoint(b, tmp_path / "m.pckp")
        loaded = nn.load_checkpoint(tmp_path / "m.pckp")
        assert loaded.mlp_widths == (12, 4)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 1, 6)))
        assert np.array_equal(b.embed(x).data, loaded.embed(x).data)

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "junk.pckp"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ContractError, match="magic"):
            nn.load_checkpoint(path)


class TestBackboneGradients:
    def test_resnet18_stem_bias_gradient(self, rng):
        # exercises residual shortcut fan-out and channel replication
        b = Backbone("resnet18", (1, 16, 16), seed=1)
        x = Tensor(rng.standard_normal((1, 1, 16, 16)))
        stem = b._stem

        def f(t):
            stem.bias = t
            return T.sum_(b.embed(x, training=True))

        assert finite_difference_check(f, Tensor(np.zeros(64))) <= 1e-5

    def test_convnet4_bias_gradient(self, rng):
        b = Backbone("convnet4", (1, 16, 16), seed=2)
        x = Tensor(rng.standard_normal((1, 1, 16, 16)))
        conv1 = b._blocks[0][0]

        def f(t):
            conv1.bias = t
            return T.sum_(b.embed(x, training=True))

        assert finite_difference_check(f, Tensor(np.zeros(64))) <= 1e-5

    def test_mlp_input_gradient(self, rng):
        b = Backbone("mlp", (1, 1, 8), mlp_widths=(10, 6), seed=2)
        mix = Tensor(rng.standard_normal((2, 6)))

        def f(t):
            return T.sum_(T.multiply(b.embed(t), mix))

        err = finite_difference_check(f, Tensor(rng.standard_normal((2, 1, 1, 8))))
        assert err <= 1e-5
