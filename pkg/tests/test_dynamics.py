import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magix.dynamics import (
    MlpDynamics,
    eval_system,
    get_system,
    hamiltonian,
    hamiltonian_energy,
    mlp_forward,
    mlp_grads,
    mlp_init,
)

from oracles import finite_difference_grads, min_preactivation


def test_fitzhugh_nagumo_at_initial_state():
    out = eval_system(get_system("fn"), np.array([-1.0, 1.0]))
    np.testing.assert_allclose(out, [1.0, 1.0 / 3.0], rtol=1e-14)


def test_lotka_volterra_log_pushforward():
    sys = get_system("lv")
    out = eval_system(sys, np.log([5.0, 0.2]))
    assert out[0] == pytest.approx(1.5 - 0.2, rel=1e-14)
    assert out[1] == pytest.approx(5.0 - 3.0, rel=1e-14)
    np.testing.assert_allclose(sys.x0, np.log([5.0, 0.2]))


def test_hes1_log_pushforward_matches_raw_equations():
    sys = get_system("hes1")
    x = np.array([1.438575, 2.037488, 17.90385])
    a, b, c, d, e, f, g = 0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3
    raw = np.array([
        -a * x[0] * x[2] + b * x[1] - c * x[0],
        -d * x[1] + e / (1 + x[0] ** 2),
        -a * x[0] * x[2] + f / (1 + x[0] ** 2) - g * x[2],
    ])
    np.testing.assert_allclose(eval_system(sys, np.log(x)), raw / x, rtol=1e-13)


def test_hamiltonian_conserves_energy_pointwise():
    rng = np.random.default_rng(1)
    sys = hamiltonian(10)
    for _ in range(20):
        x = rng.standard_normal(10)
        dx = eval_system(sys, x)
        p, q = x[:5], x[5:]
        assert p @ dx[:5] + 2 * q @ dx[5:] == pytest.approx(0.0, abs=1e-12)
    assert hamiltonian_energy(np.r_[np.ones(5), np.zeros(5)]) == 2.5


def test_eval_system_checks_dimension():
    with pytest.raises(ValueError):
        eval_system(get_system("fn"), np.zeros(3))
    with pytest.raises(ValueError):
        get_system("nope")
    with pytest.raises(ValueError):
        hamiltonian(5)


def test_hamiltonian_initial_state_seeded():
    a = get_system("hamiltonian:20", seed=4).x0
    b = get_system("hamiltonian:20", seed=4).x0
    assert a.shape == (20,)
    np.testing.assert_array_equal(a, b)


class TestMlp:
    def test_parameter_count(self):
        assert mlp_init([2, 512, 2], 0).n_params == 2 * 512 + 512 + 512 * 2 + 2 == 2562

    def test_seeded_init(self):
        a, b, c = mlp_init([2, 8, 2], 1), mlp_init([2, 8, 2], 1), mlp_init([2, 8, 2], 2)
        np.testing.assert_array_equal(a.theta, b.theta)
        assert not np.array_equal(a.theta, c.theta)
        assert np.all(a.biases[0] == 0)

    def test_zero_network(self):
        m = MlpDynamics((3, 16, 3), np.zeros(3 * 16 + 16 + 16 * 3 + 3))
        np.testing.assert_array_equal(mlp_forward(m, np.array([1.0, -2.0, 3.0])), 0.0)

    def test_hand_constructed_relu(self):
        # hidden = relu(x), out = hidden
        theta = np.concatenate([np.eye(2).ravel(), np.zeros(2), np.eye(2).ravel(), np.zeros(2)])
        m = MlpDynamics((2, 2, 2), theta)
        np.testing.assert_array_equal(mlp_forward(m, np.array([1.5, -0.5])), [1.5, 0.0])

    def test_against_naive_evaluation(self):
        rng = np.random.default_rng(0)
        m = mlp_init([3, 7, 5, 3], 3)
        m.theta[:] = rng.standard_normal(m.n_params)
        x = rng.standard_normal(3)
        # independent re-evaluation from the flat vector
        pos, h = 0, x.copy()
        widths = [3, 7, 5, 3]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            W = m.theta[pos:pos + a * b].reshape(a, b)
            pos += a * b
            bias = m.theta[pos:pos + b]
            pos += b
            h = sum(h[k] * W[k] for k in range(a)) + bias
            if i < 2:
                h = np.array([max(v, 0.0) for v in h])
        np.testing.assert_allclose(mlp_forward(m, x), h, rtol=1e-12)

    def test_batch_matches_rows(self):
        m = mlp_init([2, 9, 2], 5)
        X = np.random.default_rng(2).standard_normal((6, 2))
        out = mlp_forward(m, X)
        for i in range(6):
            np.testing.assert_allclose(out[i], mlp_forward(m, X[i]), rtol=1e-14)

    def test_zero_upstream(self):
        m = mlp_init([2, 9, 2], 5)
        gx, gt = mlp_grads(m, np.ones(2), np.zeros(2))
        assert not gx.any() and not gt.any()

    def test_linear_adjoint(self):
        rng = np.random.default_rng(4)
        m = MlpDynamics((3, 3), rng.standard_normal(12))
        v = rng.standard_normal(3)
        gx, _ = mlp_grads(m, rng.standard_normal(3), v)
        # forward computes x @ W, so the adjoint is W @ v
        np.testing.assert_array_equal(gx, m.weights[0] @ v)

    def test_positive_homogeneity_without_bias(self):
        m = mlp_init([2, 16, 16, 2], 8)
        x = np.array([0.3, -1.2])
        np.testing.assert_allclose(mlp_forward(m, 2.5 * x), 2.5 * mlp_forward(m, x), rtol=1e-12)

    def test_normalization_round_trip(self):
        m = mlp_init([2, 8, 2], 0)
        m.theta[:] = np.random.default_rng(0).standard_normal(m.n_params)
        base = m.copy()
        m.set_normalization([1.0, -2.0], [2.0, 0.5], [3.0, 4.0])
        x = np.array([0.4, 0.1])
        expected = mlp_forward(base, (x - [1.0, -2.0]) / [2.0, 0.5]) * [3.0, 4.0]
        np.testing.assert_allclose(mlp_forward(m, x), expected, rtol=1e-14)

    def test_rejects_wrong_shapes(self):
        with pytest.raises(ValueError):
            MlpDynamics((2, 4, 3), np.zeros(4 * 2 + 4 + 12 + 3))
        with pytest.raises(ValueError):
            MlpDynamics((2, 4, 2), np.zeros(5))


def test_grads_match_finite_differences():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 100:
        D = int(rng.integers(1, 4))
        widths = [D] + list(rng.integers(2, 6, size=rng.integers(1, 3))) + [D]
        m = mlp_init(widths, int(rng.integers(1 << 30)))
        m.theta[:] = rng.standard_normal(m.n_params)
        if rng.random() < 0.5:
            m.set_normalization(rng.standard_normal(D), rng.uniform(0.5, 2, D), rng.uniform(0.5, 2, D))
        x = rng.standard_normal(D)
        if min_preactivation(m, x) < 1e-4:
            continue
        v = rng.standard_normal(D)
        gx, gt = mlp_grads(m, x, v)
        fx, ft = finite_difference_grads(m, x, v)
        np.testing.assert_allclose(gx, fx, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(gt, ft, rtol=1e-5, atol=1e-8)
        checked += 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_batched_grads_sum_rows(seed):
    rng = np.random.default_rng(seed)
    m = mlp_init([2, 6, 2], seed)
    X = rng.standard_normal((4, 2))
    V = rng.standard_normal((4, 2))
    gx, gt = mlp_grads(m, X, V)
    rows = [mlp_grads(m, X[i], V[i]) for i in range(4)]
    np.testing.assert_allclose(gx, np.array([r[0] for r in rows]), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gt, sum(r[1] for r in rows), rtol=1e-10, atol=1e-12)
