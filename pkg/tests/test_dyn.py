import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_da import net as nn
from hybrid_da.dyn import (
    BlowUpError, HybridModel, ModelConfig, adj_step, forecast_tendency, forecast_tendency_ad, forecast_tendency_tl,
    initial_truth, integrate, leading_lyapunov, rk4_step, tlm_step, truth_tendency,
)

CFG = ModelConfig(N=12, J=4, steps_per_window=5)


def hybrid(halfwidth=1, seed=0, cfg=CFG):
    rng = np.random.default_rng(seed)
    d = 2 * halfwidth + 1
    norm = nn.NormStats(np.full(d, 2.0), np.full(d, 4.0), np.zeros(1), np.full(1, 0.5))
    net = nn.init_params([d + 4, 6, 1], seed, norm)
    net = net.with_flat(net.flat() + 0.1 * rng.standard_normal(net.size))
    return HybridModel(cfg, net, halfwidth)


def state(seed=0, n=CFG.N):
    return 8.0 + 3.0 * np.random.default_rng(seed).standard_normal(n)


def test_fixed_point_and_energy():
    x = np.full(CFG.N, CFG.F)
    assert np.allclose(forecast_tendency(x, CFG), 0.0)
    y = state(1)
    adv = forecast_tendency(y, CFG) + y - CFG.F
    assert abs(np.dot(y, adv)) < 1e-10 * np.dot(y, y)


def test_truth_decouples_without_coupling():
    cfg = ModelConfig(N=12, J=4, h=0.0)
    s = np.concatenate([state(2), np.random.default_rng(3).standard_normal(48)])
    assert np.allclose(truth_tendency(s, cfg)[:12], forecast_tendency(s[:12], cfg))


def test_truth_tendency_reference():
    cfg = ModelConfig(N=4, J=2)
    s = np.arange(1.0, 13.0)
    x, y = s[:4], s[4:]
    k = cfg.h * cfg.c / cfg.b
    dx = [(x[(i + 1) % 4] - x[i - 2]) * x[i - 1] - x[i] + cfg.F - k * (y[2 * i] + y[2 * i + 1]) for i in range(4)]
    dy = [-cfg.c * cfg.b * y[(j + 1) % 8] * (y[(j + 2) % 8] - y[j - 1]) - cfg.c * y[j] + k * x[j // 2]
          for j in range(8)]
    assert np.allclose(truth_tendency(s, cfg), dx + dy)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(N=3)
    with pytest.raises(ValueError):
        ModelConfig(dt=0.0)
    with pytest.raises(ValueError):
        forecast_tendency(np.zeros(5), CFG)


def test_rk4_exact_on_linear_decay():
    x = rk4_step(lambda s: -s, np.array([1.0]), 0.1)
    assert np.isclose(x[0], 1 - 0.1 + 0.01 / 2 - 0.001 / 6 + 0.0001 / 24, rtol=1e-14)


def test_blowup_detected():
    with pytest.raises(BlowUpError), np.errstate(over="ignore", invalid="ignore"):
        integrate(lambda s: s * s, np.array([10.0]), 100, 0.5)


@pytest.mark.parametrize("seed", range(3))
def test_tendency_and_step_duality(seed):
    rng = np.random.default_rng(seed)
    x, v, u = state(seed), rng.standard_normal(CFG.N), rng.standard_normal(CFG.N)
    assert abs(np.dot(forecast_tendency_tl(x, v), u) - np.dot(v, forecast_tendency_ad(x, u))) < 1e-12 * 100
    lhs = np.dot(tlm_step(x, v, CFG), u)
    assert abs(lhs - np.dot(v, adj_step(x, u, CFG))) <= 1e-12 * max(1.0, abs(lhs))


def test_step_tlm_finite_differences():
    rng = np.random.default_rng(4)
    x, v = state(4), rng.standard_normal(CFG.N)
    f = lambda z: rk4_step(lambda s: forecast_tendency(s, CFG), z, CFG.dt)
    eps = 1e-6
    fd = (f(x + eps * v) - f(x - eps * v)) / (2 * eps)
    assert np.max(np.abs(tlm_step(x, v, CFG) - fd)) / np.max(np.abs(fd)) < 1e-6


def test_plain_hybrid_is_forecast_model():
    m = HybridModel(CFG)
    x = state(5)
    traj = m.integrate(x)
    ref = integrate(lambda s: forecast_tendency(s, CFG), x, CFG.steps_per_window, CFG.dt)
    assert traj.shape == (CFG.steps_per_window + 1, CFG.N) and np.array_equal(traj[-1], ref)
    assert m.n_params == 0 and m.flat_params().size == 0


def test_hybrid_forcing_accumulates_over_window():
    m = hybrid()
    x = state(6)
    w = m.forcing(None, x, 0.3)
    traj = m.integrate(x, None, 0.3)
    plain = HybridModel(CFG).integrate(x)
    # the first step differs from the plain model only by the added forcing
    assert np.allclose(traj[1] - plain[1], w / CFG.steps_per_window, atol=1e-14)


def test_column_inputs_layout():
    m = hybrid(halfwidth=1)
    x = np.arange(CFG.N, dtype=float)
    z = m.column_inputs(x, m.t_cycle / 4)
    assert z.shape == (CFG.N, 7)
    assert np.array_equal(z[0, :3], [CFG.N - 1, 0, 1])
    assert np.allclose(z[3, 3:5], [np.sin(2 * np.pi * 3 / CFG.N), np.cos(2 * np.pi * 3 / CFG.N)])
    assert np.allclose(z[:, 5:], [1.0, 0.0], atol=1e-15)
    with pytest.raises(nn.DimensionError):
        HybridModel(CFG, nn.init_params([6, 3, 1]), halfwidth=1)


@pytest.mark.parametrize("halfwidth", [0, 1, 2])
def test_hybrid_tlm_adjoint_duality(halfwidth):
    rng = np.random.default_rng(halfwidth)
    m = hybrid(halfwidth, seed=halfwidth)
    x = state(halfwidth)
    p = m.flat_params()
    traj = m.integrate(x, p, 0.1)
    lin = m.linearize(traj, p, 0.1)
    dx, dp = rng.standard_normal(CFG.N), rng.standard_normal(m.n_params)
    cot = rng.standard_normal(traj.shape)
    lhs = np.sum(lin.tlm(dx, dp) * cot)
    gx, gp = lin.adjoint(cot)
    rhs = np.dot(gx, dx) + np.dot(gp, dp)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_hybrid_tlm_finite_differences():
    rng = np.random.default_rng(9)
    m = hybrid(1, seed=9)
    x, p = state(9), m.flat_params()
    dx, dp = rng.standard_normal(CFG.N), rng.standard_normal(m.n_params)
    tl = m.tlm(m.integrate(x, p, 0.2), p, 0.2, dx, dp)
    eps = 1e-6
    fd = (m.integrate(x + eps * dx, p + eps * dp, 0.2) - m.integrate(x - eps * dx, p - eps * dp, 0.2)) / (2 * eps)
    assert np.max(np.abs(tl - fd)) / np.max(np.abs(fd)) < 1e-6


def test_forecast_matches_repeated_windows():
    m = hybrid(0)
    x = state(11)
    fc = m.forecast(x, None, 0.0, 3)
    y = x
    for k in range(3):
        y = m.integrate(y, None, k * CFG.window_length)[-1]
    assert fc.shape == (4, CFG.N) and np.allclose(fc[-1], y, atol=0)


def test_truth_is_chaotic():
    cfg = ModelConfig()
    s = initial_truth(cfg, seed=0, spinup_steps=500)
    assert s.shape == (cfg.N * (1 + cfg.J),) and np.all(np.isfinite(s))
    assert leading_lyapunov(cfg, s, n_steps=2000) > 0.1


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), halfwidth=st.integers(0, 2))
def test_duality_property(seed, halfwidth):
    rng = np.random.default_rng(seed)
    m = hybrid(halfwidth, seed=seed % 97)
    x = 8.0 + 3.0 * rng.standard_normal(CFG.N)
    t = rng.uniform(0, 1)
    p = m.flat_params()
    traj = m.integrate(x, p, t)
    dx, dp, cot = rng.standard_normal(CFG.N), rng.standard_normal(m.n_params), rng.standard_normal(traj.shape)
    lhs = np.sum(m.tlm(traj, p, t, dx, dp) * cot)
    gx, gp = m.adjoint(traj, p, t, cot)
    assert abs(lhs - (gx @ dx + gp @ dp)) <= 1e-12 * max(1.0, abs(lhs))
