import numpy as np
import pytest

from hybrid_da import net as nn
from hybrid_da.assim import (
    CovarianceError, CovSpec, CycleArchive, CyclingError, MinimizerConfig, ObsConfig, conjugate_gradient,
    generate_truth, incremental_minimize, make_observations, nn4dvar_cost, nn4dvar_grad, run_cycles,
    sc4dvar_cost, sc4dvar_grad, window_obs,
)
from hybrid_da.dyn import HybridModel, ModelConfig, initial_truth

CFG = ModelConfig(N=12, J=4, steps_per_window=5)
OBS = ObsConfig(times=(0, 2, 5), sites=tuple(range(0, 12, 2)), sigma=0.5)


def hybrid(seed=0):
    norm = nn.NormStats(np.full(1, 2.0), np.full(1, 4.0), np.zeros(1), np.full(1, 0.5))
    net = nn.init_params([5, 6, 1], seed, norm)
    return HybridModel(CFG, net, 0)


def problem(seed=0):
    rng = np.random.default_rng(seed)
    x_true = 8.0 + 3.0 * rng.standard_normal(CFG.N)
    traj = HybridModel(CFG).integrate(x_true)
    values = traj[np.asarray(OBS.times)[:, None], OBS.site_table()] + 0.5 * rng.standard_normal((3, 6))
    xb = x_true + 0.5 * rng.standard_normal(CFG.N)
    return x_true, xb, window_obs(values, OBS)


def test_observation_sampling():
    truth = np.arange(21 * 3, dtype=float).reshape(21, 3)
    oc = ObsConfig(times=(0, 5), sites=(0, 2), sigma=1e-300)
    y = make_observations(truth, oc, steps_per_window=10, seed=0)
    assert y.shape == (2, 2, 2)
    assert np.allclose(y[1], truth[[[10], [15]], [0, 2]])
    with pytest.raises(ValueError):
        make_observations(truth, ObsConfig(times=(11,), sites=(0,)), 10)
    with pytest.raises(ValueError):
        ObsConfig(sigma=0.0)


def test_observation_noise_statistics():
    truth = np.zeros((2001, 4))
    y = make_observations(truth, ObsConfig(times=(0,), sites=(0, 1, 2, 3), sigma=0.7), 1, seed=1)
    assert abs(y.std() - 0.7) < 0.02 and abs(y.mean()) < 0.02


def test_covariance():
    cov = CovSpec(12, 0.4, 1.0, p=0.1)
    assert np.allclose(cov.B, cov.B.T) and np.allclose(np.diag(cov.B), 0.16)
    assert np.allclose(cov.B_sqrt @ cov.B_sqrt, cov.B, atol=1e-12)
    assert np.allclose(cov.B_inv @ cov.B, np.eye(12), atol=1e-9)
    assert np.allclose(CovSpec(12, 0.4).B, 0.16 * np.eye(12))
    with pytest.raises(CovarianceError):
        CovSpec(36, 1.0, 30.0)
    with pytest.raises(CovarianceError):
        CovSpec(12, 0.0)


def test_conjugate_gradient_solves_spd():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((8, 8))
    H = A @ A.T + 8 * np.eye(8)
    b = rng.standard_normal(8)
    d, trace, ok = conjugate_gradient(lambda v: H @ v, b, 1e-12, 50)
    assert ok and np.allclose(H @ d, b, atol=1e-10)
    assert all(a >= b - 1e-12 for a, b in zip(trace, trace[1:]))
    assert np.isclose(trace[-1], 0.5 * d @ H @ d - b @ d)


def _fd(f, x, v, eps=1e-6):
    return (f(x + eps * v) - f(x - eps * v)) / (2 * eps)


@pytest.mark.parametrize("seed", range(3))
def test_sc_gradient(seed):
    rng = np.random.default_rng(seed + 10)
    _, xb, obs = problem(seed)
    cov = CovSpec(CFG.N, 0.5, 1.0)
    for model, p in ((HybridModel(CFG), None), (hybrid(seed), None)):
        x0 = xb + 0.3 * rng.standard_normal(CFG.N)
        v = rng.standard_normal(CFG.N)
        g = sc4dvar_grad(x0, xb, obs, cov, model, 0.1, p)
        fd = _fd(lambda x: sc4dvar_cost(x, xb, obs, cov, model, 0.1, p), x0, v)
        assert abs(g @ v - fd) / abs(fd) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_nn4dvar_gradient(seed):
    rng = np.random.default_rng(seed + 20)
    _, xb, obs = problem(seed)
    cov = CovSpec(CFG.N, 0.5, 1.0, p=0.3)
    model = hybrid(seed)
    pb = model.flat_params()
    x0 = xb + 0.3 * rng.standard_normal(CFG.N)
    p = pb + 0.1 * rng.standard_normal(pb.size)
    gx, gp = nn4dvar_grad(p, x0, xb, pb, obs, cov, model, 0.2)
    vx, vp = rng.standard_normal(CFG.N), rng.standard_normal(pb.size)
    fdx = _fd(lambda x: nn4dvar_cost(p, x, xb, pb, obs, cov, model, 0.2), x0, vx)
    fdp = _fd(lambda q: nn4dvar_cost(q, x0, xb, pb, obs, cov, model, 0.2), p, vp)
    assert abs(gx @ vx - fdx) / abs(fdx) < 1e-6
    assert abs(gp @ vp - fdp) / abs(fdp) < 1e-6


def test_minimizer_matches_closed_form_for_linear_problem():
    # observations only at the initial time make the problem quadratic
    rng = np.random.default_rng(5)
    oc = ObsConfig(times=(0,), sites=(0, 3, 4, 9), sigma=0.4)
    xb = 8 + rng.standard_normal(CFG.N)
    y = rng.standard_normal((1, 4)) + xb[[0, 3, 4, 9]]
    cov = CovSpec(CFG.N, 0.6, 1.2)
    res = incremental_minimize(HybridModel(CFG), xb, window_obs(y, oc), cov, MinimizerConfig(1, 100, 1e-12))
    H = np.eye(CFG.N)[[0, 3, 4, 9]]
    K = cov.B @ H.T @ np.linalg.inv(H @ cov.B @ H.T + 0.16 * np.eye(4))
    assert np.allclose(res.x0, xb + K @ (y[0] - H @ xb), atol=1e-9)


def test_minimizer_reduces_cost_and_gradient():
    x_true, xb, obs = problem(3)
    cov = CovSpec(CFG.N, 0.5, 1.0, p=0.2)
    model = hybrid(3)
    res = incremental_minimize(model, xb, obs, cov, MinimizerConfig(4, 80, 1e-10), 0.0, model.flat_params(), True)
    assert res.outer_costs[-1] < res.outer_costs[0]
    assert all(b <= a + 1e-9 for a, b in zip(res.outer_costs[1:], res.outer_costs[2:]))
    gx, gp = nn4dvar_grad(res.p, res.x0, xb, model.flat_params(), obs, cov, model)
    g0x, g0p = nn4dvar_grad(model.flat_params(), xb, xb, model.flat_params(), obs, cov, model)
    assert np.linalg.norm(np.concatenate([gx, gp])) < 1e-3 * np.linalg.norm(np.concatenate([g0x, g0p]))
    # inner quadratic traces are non-increasing
    for trace in res.inner_costs:
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_fixed_net_keeps_parameters():
    _, xb, obs = problem(4)
    model = hybrid(4)
    res = incremental_minimize(model, xb, obs, CovSpec(CFG.N, 0.5, 1.0), MinimizerConfig(), 0.0,
                               model.flat_params(), False)
    assert np.array_equal(res.p, model.flat_params())


def _cycles(mode, n=6, model=None):
    s0 = initial_truth(CFG, seed=0, spinup_steps=200)
    truth = generate_truth(CFG, n, s0)
    obs = make_observations(truth.slow, OBS, CFG.steps_per_window, seed=1)
    model = hybrid() if model is None else model
    xb0 = truth.slow[0] + 0.3
    return truth, run_cycles(mode, model, obs, OBS, CovSpec(CFG.N, 0.5, 1.0, p=0.05), MinimizerConfig(2, 30),
                             xb0, meta={"tag": mode})


def test_truth_generation_shape():
    s0 = initial_truth(CFG, seed=0, spinup_steps=100)
    run = generate_truth(CFG, 3, s0)
    assert run.slow.shape == (16, CFG.N) and run.final_state.shape == s0.shape
    assert np.array_equal(run.slow[0], s0[: CFG.N])


@pytest.mark.parametrize("mode", ["sc", "sc+fixed-net", "nn4dvar"])
def test_cycling_records(mode, tmp_path):
    truth, arc = _cycles(mode)
    assert arc.n_windows == 6 and arc.analyses.shape == (6, CFG.N)
    assert np.allclose(arc.increments, arc.analyses - arc.backgrounds)
    assert np.isclose(arc.window_time(2), 2 * CFG.window_length)
    model = hybrid() if mode != "sc" else HybridModel(CFG)
    p_last = arc.params[-1] if arc.params.shape[1] else None
    fc = model.integrate(arc.analyses[-1], p_last, arc.window_time(5))[-1]
    assert np.allclose(arc.next_background, fc)
    if mode == "sc":
        assert arc.params.shape == (7, 0) and np.all(arc.forcings == 0)
    elif mode == "sc+fixed-net":
        assert np.all(arc.params == arc.params[0])
    else:
        assert arc.params.shape == (7, hybrid().n_params) and not np.array_equal(arc.params[0], arc.params[-1])
    arc.save(tmp_path / "a.hda")
    back = CycleArchive.load(tmp_path / "a.hda")
    assert back.mode == mode and back.meta["tag"] == mode
    assert np.array_equal(back.analyses, arc.analyses) and np.array_equal(back.params, arc.params)
    assert np.array_equal(back.inner_iterations, arc.inner_iterations)
    err = np.sqrt(np.mean((arc.analyses - truth.slow[::CFG.steps_per_window][:6]) ** 2, axis=1))
    assert np.all(np.isfinite(err))
    if mode == "sc":
        assert err[-1] < 0.3


def test_cycling_is_deterministic():
    _, a = _cycles("nn4dvar", n=3)
    _, b = _cycles("nn4dvar", n=3)
    assert np.array_equal(a.analyses, b.analyses) and np.array_equal(a.params, b.params)


def test_cycling_errors():
    with pytest.raises(ValueError):
        _cycles("sc+fixed-net", model=HybridModel(CFG))
    with pytest.raises(ValueError):
        _cycles("weak")
    # a wildly wrong network forcing makes the model blow up
    net = hybrid().net
    bad = net.with_flat(net.flat())
    bad.biases[-1][:] = 1e300
    with pytest.raises(CyclingError) as err, np.errstate(all="ignore"):
        _cycles("sc+fixed-net", model=HybridModel(CFG, bad, 0))
    assert err.value.window == 0
