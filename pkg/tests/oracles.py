"""Independent oracles shared by the unit and acceptance tests."""
import numpy as np
from scipy import stats

from magix.dynamics import mlp_forward, mlp_init
from magix.gp import GpHyper, build_component_model
from magix.inference import MagixState, ObservationSet, log_posterior
from magix.kernels import MaternParams, joint_covariance


def toy(seed, D=2, n=5, hidden=4, obs_every=2):
    rng = np.random.default_rng(seed)
    grid = np.linspace(0, 0.2 * (n - 1), n)
    models = [
        build_component_model(
            GpHyper(MaternParams(rng.uniform(0.5, 2), rng.uniform(0.3, 1.5)),
                    mean_c=rng.normal(), sigma2=rng.uniform(0.01, 0.1)),
            grid)
        for _ in range(D)
    ]
    tau, y = [], []
    for d in range(D):
        idx = np.arange(d % obs_every, n, obs_every)
        tau.append(grid[idx])
        y.append(rng.normal(size=idx.size))
    obs = ObservationSet(tau, y)
    mlp = mlp_init((D, hidden, D), int(rng.integers(1000)))
    mlp.theta[:] = rng.normal(size=mlp.n_params)
    state = MagixState(rng.normal(size=(n, D)), mlp, rng.uniform(0.01, 0.2, D))
    return state, models, obs


def dense_oracle(state, models, obs, tempered=True):
    """Assemble the objective from dense MVN log densities in x coordinates."""
    n = models[0].n
    x = np.column_stack([m.hyper.mean_c + m.L_C @ state.u[:, d] for d, m in enumerate(models)])
    f = mlp_forward(state.mlp, x)
    total = 0.0
    for d, mdl in enumerate(models):
        p, c = mdl.hyper.matern, mdl.hyper.mean_c
        J = joint_covariance(p, mdl.grid)
        C = J[:n, :n] + mdl.jitter_C * np.eye(n)
        cross = J[n:, :n]
        m = np.linalg.solve(C, cross.T).T
        K = J[n:, n:] - m @ cross.T
        K = 0.5 * (K + K.T) + mdl.jitter_K * np.eye(n)
        total += stats.multivariate_normal(np.full(n, c), C).logpdf(x[:, d])
        sel = np.searchsorted(mdl.grid, obs.tau[d])
        nd = obs.tau[d].size
        like = stats.multivariate_normal(x[sel, d], state.sigma2[d] * np.eye(nd)).logpdf(obs.y[d])
        total += (n / nd if tempered else 1.0) * like
        total += stats.multivariate_normal(m @ (x[:, d] - c), K).logpdf(f[:, d])
    return total


def relu_margin(state, models):
    x = np.column_stack([m.to_x(state.u[:, d]) for d, m in enumerate(models)])
    mlp = state.mlp
    z = ((x - mlp.in_shift) / mlp.in_scale) @ mlp.weights[0] + mlp.biases[0]
    return np.min(np.abs(z))


def fd_gradients(state, models, obs, cfg, h=1e-6):
    def value(s):
        return log_posterior(s, models, obs, cfg)

    gu = np.empty_like(state.u)
    for idx in np.ndindex(state.u.shape):
        up, down = state.copy(), state.copy()
        up.u[idx] += h
        down.u[idx] -= h
        gu[idx] = (value(up) - value(down)) / (2 * h)
    gt = np.empty_like(state.mlp.theta)
    for j in range(gt.size):
        up, down = state.copy(), state.copy()
        up.mlp.theta[j] += h
        down.mlp.theta[j] -= h
        gt[j] = (value(up) - value(down)) / (2 * h)
    return gu, gt


def finite_difference_grads(m, x, v, h=1e-6):
    gx = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        gx[i] = v @ (mlp_forward(m, x + e) - mlp_forward(m, x - e)) / (2 * h)
    gt = np.empty_like(m.theta)
    for j in range(m.theta.size):
        old = m.theta[j]
        m.theta[j] = old + h
        up = mlp_forward(m, x)
        m.theta[j] = old - h
        down = mlp_forward(m, x)
        m.theta[j] = old
        gt[j] = v @ (up - down) / (2 * h)
    return gx, gt


def min_preactivation(m, x):
    h = (x - m.in_shift) / m.in_scale
    smallest = np.inf
    for w, b in zip(m.weights[:-1], m.biases[:-1]):
        z = h @ w + b
        smallest = min(smallest, np.min(np.abs(z)))
        h = np.maximum(z, 0)
    return smallest
