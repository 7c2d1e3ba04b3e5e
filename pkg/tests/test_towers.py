import numpy as np
import pytest

from phn import tensor as T
from phn.errors import ConfigError, DimensionError
from phn.gradcheck import finite_difference_check
from phn.towers import (
    CrossTower,
    FfnTower,
    FieldInteractionTower,
    cross_layer,
    ffn_layer,
    ffn_widths,
    field_interaction_layer,
)


def P(a):
    return T.parameter(np.asarray(a, dtype=np.float64))


def cross_oracle(x0, xi, W, w, b, skip):
    """Row-by-row evaluation of x0*(W xi + b) + x0*(xi.w) + skip."""
    out = np.empty_like(x0)
    for r in range(x0.shape[0]):
        out[r] = x0[r] * (W @ xi[r] + b) + x0[r] * float(xi[r] @ w[:, 0]) + skip[r]
    return out


class TestCrossLayer:
    def test_zero_params_identity(self):
        x0, xi = np.array([[1.0, 2.0]]), np.array([[3.0, -4.0]])
        out = cross_layer(x0, xi, P(np.zeros((2, 2))), P(np.zeros((2, 1))), P(np.zeros(2)))
        np.testing.assert_array_equal(out.data, xi)

    def test_zero_xi(self):
        x0 = np.array([[1.5, -2.0]])
        b = np.array([0.5, 3.0])
        out = cross_layer(x0, np.zeros((1, 2)), P(np.eye(2)), P(np.ones((2, 1))), P(b))
        np.testing.assert_array_equal(out.data, x0 * b)

    def test_hand_value(self):
        out = cross_layer(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), P(np.eye(2)), P(np.zeros((2, 1))),
                          P(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[6.0, 12.0]])

    def test_vector_term(self):
        # x0 * (xi . w) with w = [1, 1]: [1*7, 2*7]
        out = cross_layer(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), P(np.zeros((2, 2))), P(np.ones((2, 1))),
                          P(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[7.0 + 3.0, 14.0 + 4.0]])

    @pytest.mark.parametrize("mode", ["base", "rl", "prl"])
    def test_matches_oracle(self, mode):
        rng = np.random.default_rng(1)
        x0, xi = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        W, w, b, p = rng.normal(size=(4, 4)), rng.normal(size=(4, 1)), rng.normal(size=4), rng.normal(size=4)
        out = cross_layer(x0, xi, P(W), P(w), P(b), mode, P(p) if mode == "prl" else None)
        skip = p * xi if mode == "prl" else xi
        np.testing.assert_allclose(out.data, cross_oracle(x0, xi, W, w, b, skip), rtol=1e-13, atol=1e-13)

    def test_rl_equals_base(self):
        rng = np.random.default_rng(2)
        args = (rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), P(rng.normal(size=(3, 3))),
                P(rng.normal(size=(3, 1))), P(rng.normal(size=3)))
        assert cross_layer(*args, "base").data.tobytes() == cross_layer(*args, "rl").data.tobytes()

    def test_prl_ones_equals_rl_bitwise(self):
        rng = np.random.default_rng(3)
        args = (rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), P(rng.normal(size=(3, 3))),
                P(rng.normal(size=(3, 1))), P(rng.normal(size=3)))
        a = cross_layer(*args, "prl", P(np.ones(3))).data
        b = cross_layer(*args, "rl").data
        assert a.tobytes() == b.tobytes()

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            cross_layer(np.zeros((1, 2)), np.zeros((1, 3)), P(np.zeros((3, 3))), P(np.zeros((3, 1))), P(np.zeros(3)))
        with pytest.raises(ConfigError):
            cross_layer(np.zeros((1, 2)), np.zeros((1, 2)), P(np.zeros((2, 2))), P(np.zeros((2, 1))),
                        P(np.zeros(2)), "prl")
        with pytest.raises(ConfigError):
            cross_layer(np.zeros((1, 2)), np.zeros((1, 2)), P(np.zeros((2, 2))), P(np.zeros((2, 1))),
                        P(np.zeros(2)), "xx")


class TestFieldLayer:
    def test_zero_kernel_unit_u(self):
        H = np.random.default_rng(0).normal(size=(2, 3, 2))
        out = field_interaction_layer(H, H * 2, P(np.zeros((3, 3))), P(np.ones((3, 1))))
        np.testing.assert_array_equal(out.data, H)

    def test_all_zero(self):
        H = np.random.default_rng(0).normal(size=(2, 3, 2))
        out = field_interaction_layer(H, H, P(np.zeros((3, 3))), P(np.zeros((3, 1))))
        np.testing.assert_array_equal(out.data, 0)

    def test_hand_value(self):
        H = np.array([[[2.0], [3.0]]])
        out = field_interaction_layer(H, H, P([[0.0, 1.0], [1.0, 0.0]]), P(np.zeros((2, 1))))
        np.testing.assert_array_equal(out.data, [[[6.0], [6.0]]])

    @pytest.mark.parametrize("mode", ["base", "rl", "prl"])
    def test_matches_oracle(self, mode):
        rng = np.random.default_rng(4)
        F, d = 3, 2
        H, E0 = rng.normal(size=(2, F, d)), rng.normal(size=(2, F, d))
        K, u, p = rng.normal(size=(F, F)), rng.normal(size=(F, 1)), rng.normal(size=(F, d))
        out = field_interaction_layer(H, E0, P(K), P(u), mode, P(p) if mode == "prl" else None)
        expected = np.empty_like(H)
        for b in range(2):
            for i in range(F):
                cross = sum(K[i, j] * E0[b, j] for j in range(F))
                expected[b, i] = H[b, i] * cross + u[i, 0] * H[b, i]
                expected[b, i] += {"base": 0.0, "rl": H[b, i], "prl": p[i] * H[b, i]}[mode]
        np.testing.assert_allclose(out.data, expected, rtol=1e-13, atol=1e-13)

    def test_prl_ones_equals_rl_bitwise(self):
        rng = np.random.default_rng(5)
        H, E0 = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 2))
        K, u = P(rng.normal(size=(3, 3))), P(rng.normal(size=(3, 1)))
        a = field_interaction_layer(H, E0, K, u, "prl", P(np.ones((3, 2)))).data
        b = field_interaction_layer(H, E0, K, u, "rl").data
        assert a.tobytes() == b.tobytes()

    def test_shape_error(self):
        with pytest.raises(DimensionError):
            field_interaction_layer(np.zeros((1, 3, 2)), np.zeros((1, 3, 2)), P(np.zeros((2, 2))), P(np.zeros((3, 1))))


class TestFfnLayer:
    def test_identity_positive(self):
        x = np.array([[0.5, 2.0, 3.0]])
        out = ffn_layer(x, P(np.eye(3)), P(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_negative_branch(self):
        out = ffn_layer(np.array([[4.0]]), P([[0.0]]), P([-1.0]), slope=0.2)
        np.testing.assert_allclose(out.data, [[-0.2]], rtol=1e-15)

    def test_skip_needs_square(self):
        with pytest.raises(ConfigError):
            ffn_layer(np.ones((1, 2)), P(np.ones((2, 3))), P(np.zeros(3)), mode="rl")

    def test_prl_ones_equals_rl(self):
        rng = np.random.default_rng(6)
        x, Wt, b = rng.normal(size=(3, 4)), P(rng.normal(size=(4, 4))), P(rng.normal(size=4))
        a = ffn_layer(x, Wt, b, 0.01, "prl", P(np.ones(4))).data
        assert a.tobytes() == ffn_layer(x, Wt, b, 0.01, "rl").data.tobytes()

    def test_two_layer_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 3))
        W1, b1, W2, b2 = P(rng.normal(size=(3, 4))), P(rng.normal(size=4)), P(rng.normal(size=(4, 2))), P(rng.normal(size=2))
        probe = rng.normal(size=(5, 2))

        def f():
            return T.sum(T.mul(ffn_layer(ffn_layer(x, W1, b1), W2, b2), probe))

        assert finite_difference_check(f, [W1, b1, W2, b2]) < 1e-6


class TestTowers:
    def test_widths(self):
        assert ffn_widths(32, 8, 1) == [32, 8]
        assert ffn_widths(32, 8, 3) == [32, 32, 32, 8]
        with pytest.raises(ConfigError):
            ffn_widths(32, 8, 0)

    @pytest.mark.parametrize("depth", [1, 2, 3, 5])
    def test_zero_cross_tower_is_identity(self, depth):
        tower = CrossTower(6, depth, "base", np.random.default_rng(0))
        for p in tower.parameters():
            p.data[:] = 0
        E = np.random.default_rng(1).normal(size=(4, 3, 2))
        assert tower(T.Tensor(E)).data.tobytes() == E.reshape(4, 6).tobytes()

    def test_single_layer_reduces_to_op(self):
        rng = np.random.default_rng(2)
        tower = CrossTower(4, 1, "prl", rng)
        E = rng.normal(size=(3, 2, 2))
        x0 = E.reshape(3, 4)
        L = tower.layers[0]
        expected = cross_layer(x0, x0, L["W"], L["w"], L["b"], "prl", L["p"]).data
        np.testing.assert_array_equal(tower(T.Tensor(E)).data, expected)

    def test_three_layers_unrolled(self):
        rng = np.random.default_rng(3)
        tower = CrossTower(4, 3, "base", rng)
        for L in tower.layers:
            L["b"].data[:] = rng.normal(size=4)
        E = rng.normal(size=(2, 2, 2))
        x0 = E.reshape(2, 4)
        x = x0
        for L in tower.layers:
            x = cross_oracle(x0, x, L["W"].data, L["w"].data, L["b"].data, x)
        np.testing.assert_allclose(tower(T.Tensor(E)).data, x, rtol=1e-12, atol=1e-12)

    def test_field_tower_shape(self):
        tower = FieldInteractionTower(3, 4, 2, "rl", np.random.default_rng(0))
        out = tower(T.Tensor(np.ones((5, 3, 4))))
        assert out.shape == (5, 12) and tower.output_dim == 12

    def test_ffn_tower_shape_and_skips(self):
        tower = FfnTower(ffn_widths(8, 2, 3), "prl", 0.01, np.random.default_rng(0))
        assert [("p" in L) for L in tower.layers] == [True, True, False]
        out = tower(T.Tensor(np.ones((5, 4, 2))))
        assert out.shape == (5, 2)

    @pytest.mark.parametrize("kind", ["cross", "field", "ffn"])
    def test_prl_ones_matches_rl_tower(self, kind):
        def make(mode):
            rng = np.random.default_rng(11)
            if kind == "cross":
                return CrossTower(6, 3, mode, rng)
            if kind == "field":
                return FieldInteractionTower(3, 2, 3, mode, rng)
            return FfnTower([6, 6, 6, 2], mode, 0.01, rng)

        E = T.Tensor(np.random.default_rng(12).normal(size=(4, 3, 2)))
        assert make("prl")(E).data.tobytes() == make("rl")(E).data.tobytes()

    @pytest.mark.parametrize("kind", ["cross", "field", "ffn"])
    @pytest.mark.parametrize("depth", [1, 2, 3])
    @pytest.mark.parametrize("F,d", [(2, 2), (4, 2), (2, 4), (4, 4)])
    def test_gradients(self, kind, depth, F, d):
        rng = np.random.default_rng(depth * 100 + F * 10 + d)
        mode = ("base", "rl", "prl")[depth - 1]
        if kind == "cross":
            tower = CrossTower(F * d, depth, mode, rng)
        elif kind == "field":
            tower = FieldInteractionTower(F, d, depth, mode, rng)
        else:
            tower = FfnTower(ffn_widths(F * d, d, depth), mode, 0.01, rng)
        for p in tower.parameters():
            p.data += rng.normal(scale=0.1, size=p.shape)
        E = T.parameter(rng.normal(size=(3, F, d)))
        if kind == "ffn":
            # central differences are meaningless across the LeakyReLU kink
            while min(np.abs(a).min() for a in tower.preactivations(E)) < 1e-2:
                E.data = rng.normal(size=(3, F, d))
        probe = rng.normal(size=(3, tower.output_dim))
        err = finite_difference_check(lambda: T.sum(T.mul(tower(E), probe)), [E] + tower.parameters(),
                                      max_coords=40)
        assert err < 1e-4
