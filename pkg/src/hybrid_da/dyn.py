"""Lorenz-96 dynamics: two-scale truth, one-scale forecast model and the
hybrid model whose per-window forcing comes from a column network.

State layout for the two-scale system is ``[x_0..x_{N-1}, y_0..y_{NJ-1}]``
with fast variable ``y[i*J + j]`` attached to slow site ``i``; the fast
variables form a single ring of length N*J.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net as nn


class BlowUpError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    N: int = 36
    J: int = 10
    F: float = 10.0
    h: float = 1.0
    c: float = 10.0
    b: float = 10.0
    dt: float = 0.005
    steps_per_window: int = 10

    def __post_init__(self):
        if self.N < 4:
            raise ValueError(f"need at least 4 slow sites, got {self.N}")
        if self.J < 1:
            raise ValueError("need at least one fast variable per site")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps_per_window < 1:
            raise ValueError("steps_per_window must be >= 1")

    @property
    def window_length(self) -> float:
        return self.dt * self.steps_per_window


def _check_len(state: np.ndarray, n: int, what: str):
    if state.shape[-1] != n:
        raise ValueError(f"{what} has length {state.shape[-1]}, expected {n}")


def _l96_advection(x: np.ndarray) -> np.ndarray:
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1)


def truth_tendency(state: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Two-scale Lorenz-96 tendency."""
    state = np.asarray(state, dtype=float)
    N, J = cfg.N, cfg.J
    _check_len(state, N + N * J, "two-scale state")
    x, y = state[..., :N], state[..., N:]
    coupling = cfg.h * cfg.c / cfg.b
    ysum = y.reshape(*y.shape[:-1], N, J).sum(axis=-1)
    dx = _l96_advection(x) - x + cfg.F - coupling * ysum
    dy = (-cfg.c * cfg.b * np.roll(y, -1, axis=-1) * (np.roll(y, -2, axis=-1) - np.roll(y, 1, axis=-1))
          - cfg.c * y + coupling * np.repeat(x, J, axis=-1))
    return np.concatenate([dx, dy], axis=-1)


def forecast_tendency(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """One-scale Lorenz-96 tendency (no coupling to fast variables)."""
    x = np.asarray(x, dtype=float)
    _check_len(x, cfg.N, "forecast state")
    return _l96_advection(x) - x + cfg.F


def forecast_tendency_tl(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`forecast_tendency` at ``x`` applied to ``v``."""
    return ((np.roll(v, -1) - np.roll(v, 2)) * np.roll(x, 1)
            + (np.roll(x, -1) - np.roll(x, 2)) * np.roll(v, 1) - v)


def forecast_tendency_ad(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Transpose of :func:`forecast_tendency_tl`."""
    return (np.roll(u * np.roll(x, 1), 1) - np.roll(u * np.roll(x, 1), -2)
            + np.roll(u * (np.roll(x, -1) - np.roll(x, 2)), -1) - u)


def rk4_step(tendency, state: np.ndarray, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = tendency(state)
    k2 = tendency(state + 0.5 * dt * k1)
    k3 = tendency(state + 0.5 * dt * k2)
    k4 = tendency(state + dt * k3)
    return state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(tendency, state: np.ndarray, k_steps: int, dt: float, keep: bool = False):
    """Advance ``k_steps`` RK4 steps; with ``keep`` return all states."""
    state = np.asarray(state, dtype=float)
    traj = [state] if keep else None
    for k in range(k_steps):
        state = rk4_step(tendency, state, dt)
        if not np.all(np.isfinite(state)):
            raise BlowUpError(f"non-finite state after step {k + 1}", k + 1)
        if keep:
            traj.append(state)
    return np.array(traj) if keep else state


def _rk4_stages(x: np.ndarray, cfg: ModelConfig) -> list[np.ndarray]:
    dt = cfg.dt
    k1 = forecast_tendency(x, cfg)
    x2 = x + 0.5 * dt * k1
    k2 = forecast_tendency(x2, cfg)
    x3 = x + 0.5 * dt * k2
    k3 = forecast_tendency(x3, cfg)
    return [x, x2, x3, x + dt * k3]


class _StepJacobian:
    """Tangent-linear and adjoint of one RK4 step of the forecast model,
    with the stage-dependent coefficients precomputed."""

    def __init__(self, x: np.ndarray, cfg: ModelConfig):
        n = cfg.N
        idx = np.arange(n)
        self.ip1, self.im1 = (idx + 1) % n, (idx - 1) % n
        self.ip2, self.im2 = (idx + 2) % n, (idx - 2) % n
        stages = _rk4_stages(x, cfg)
        # tendency Jacobian at stage s: v -> (v[i+1] - v[i-2]) a_s + b_s v[i-1] - v
        self.a = [s[self.im1] for s in stages]
        self.b = [s[self.ip1] - s[self.im2] for s in stages]
        self.dt = cfg.dt

    def _tl(self, s: int, v: np.ndarray) -> np.ndarray:
        return (v[self.ip1] - v[self.im2]) * self.a[s] + self.b[s] * v[self.im1] - v

    def _ad(self, s: int, u: np.ndarray) -> np.ndarray:
        ua, ub = u * self.a[s], u * self.b[s]
        return ua[self.im1] - ua[self.ip2] + ub[self.ip1] - u

    def tlm(self, dx: np.ndarray) -> np.ndarray:
        dt = self.dt
        d1 = self._tl(0, dx)
        d2 = self._tl(1, dx + 0.5 * dt * d1)
        d3 = self._tl(2, dx + 0.5 * dt * d2)
        d4 = self._tl(3, dx + dt * d3)
        return dx + dt / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4)

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        dt = self.dt
        a4 = self._ad(3, dt / 6.0 * u)
        a3 = self._ad(2, dt / 3.0 * u + dt * a4)
        a2 = self._ad(1, dt / 3.0 * u + 0.5 * dt * a3)
        a1 = self._ad(0, dt / 6.0 * u + 0.5 * dt * a2)
        return u + a1 + a2 + a3 + a4


def tlm_step(x: np.ndarray, dx: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Tangent-linear of one forecast-model RK4 step about ``x``."""
    _check_len(dx, cfg.N, "tangent")
    return _StepJacobian(np.asarray(x, dtype=float), cfg).tlm(np.asarray(dx, dtype=float))


def adj_step(x: np.ndarray, u: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Adjoint of :func:`tlm_step` about ``x``."""
    _check_len(u, cfg.N, "cotangent")
    return _StepJacobian(np.asarray(x, dtype=float), cfg).adjoint(np.asarray(u, dtype=float))


def initial_truth(cfg: ModelConfig, seed: int = 0, spinup_steps: int = 2000) -> np.ndarray:
    rng = np.random.default_rng(seed)
    state = np.concatenate([cfg.F + rng.normal(0.0, 1.0, cfg.N), rng.normal(0.0, 0.1, cfg.N * cfg.J)])
    return integrate(lambda s: truth_tendency(s, cfg), state, spinup_steps, cfg.dt)


def leading_lyapunov(cfg: ModelConfig, state: np.ndarray, n_steps: int = 10_000,
                     renorm_every: int = 10, eps: float = 1e-8, seed: int = 0) -> float:
    """Leading Lyapunov exponent of the two-scale truth (per model time unit)."""
    rng = np.random.default_rng(seed)
    f = lambda s: truth_tendency(s, cfg)
    pert = rng.normal(size=state.shape)
    pert *= eps / np.linalg.norm(pert)
    a, b = state.copy(), state + pert
    total = 0.0
    for k in range(1, n_steps + 1):
        a = rk4_step(f, a, cfg.dt)
        b = rk4_step(f, b, cfg.dt)
        if k % renorm_every == 0:
            d = np.linalg.norm(b - a)
            total += np.log(d / eps)
            b = a + (b - a) * (eps / d)
    return total / (n_steps * cfg.dt)


# ---------------------------------------------------------------------------
# hybrid model
# ---------------------------------------------------------------------------


class HybridModel:
    """One-scale Lorenz-96 plus a constant per-window forcing ``w``.

    ``w = G(p, x0)`` is computed once per window by applying the column
    network at every site to ``[x_{i-h..i+h}, sin/cos(2 pi i / N),
    sin/cos(2 pi t / t_cycle)]``. Each RK4 step is followed by the addition
    of ``forcing_scale * w``; with the default scale 1/steps_per_window the
    additions accumulate to ``w`` over a window. Without a network the model
    is the plain forecast model and the parameter vector is empty.
    """

    n_extra = 4

    def __init__(self, cfg: ModelConfig, net: nn.NetParams | None = None, halfwidth: int = 0,
                 t_cycle: float | None = None, forcing_scale: float | None = None,
                 mode: str = "prediction"):
        if mode not in ("prediction", "post-processing"):
            raise ValueError(f"unknown mode {mode!r}")
        self.cfg = cfg
        self.net = net
        self.halfwidth = halfwidth
        self.t_cycle = 2.0 * cfg.window_length if t_cycle is None else t_cycle
        self.forcing_scale = 1.0 / cfg.steps_per_window if forcing_scale is None else forcing_scale
        if self.forcing_scale <= 0:
            raise ValueError("forcing_scale must be positive")
        self.mode = mode
        if net is not None:
            expected = 2 * halfwidth + 1 + self.n_extra
            if net.dims[0] != expected or net.dims[-1] != 1:
                raise nn.DimensionError(f"column network must map {expected} inputs to 1 output, "
                                        f"got dims {net.dims}")
        offsets = np.arange(-halfwidth, halfwidth + 1)
        self._stencil = (np.arange(cfg.N)[:, None] + offsets[None, :]) % cfg.N
        angle = 2.0 * np.pi * np.arange(cfg.N) / cfg.N
        self._site_predictors = np.stack([np.sin(angle), np.cos(angle)], axis=1)

    @property
    def n_params(self) -> int:
        return 0 if self.net is None else self.net.size

    @property
    def n_state_channels(self) -> int:
        return 2 * self.halfwidth + 1

    def with_net(self, net: nn.NetParams | None) -> "HybridModel":
        return HybridModel(self.cfg, net, self.halfwidth, self.t_cycle, self.forcing_scale, self.mode)

    def flat_params(self) -> np.ndarray:
        return np.zeros(0) if self.net is None else self.net.flat()

    def _params(self, p) -> nn.NetParams:
        if self.net is None:
            raise ValueError("model has no network")
        return self.net if p is None else self.net.with_flat(p)

    def column_inputs(self, x: np.ndarray, t: float) -> np.ndarray:
        """Per-site predictor matrix, shape (N, 2*halfwidth + 5)."""
        x = np.asarray(x, dtype=float)
        _check_len(x, self.cfg.N, "state")
        phase = 2.0 * np.pi * t / self.t_cycle
        time_pred = np.broadcast_to([np.sin(phase), np.cos(phase)], (self.cfg.N, 2))
        return np.concatenate([x[self._stencil], self._site_predictors, time_pred], axis=1)

    def forcing(self, p, x0: np.ndarray, t: float = 0.0) -> np.ndarray:
        if self.net is None:
            return np.zeros(self.cfg.N)
        return nn.predict(self._params(p), self.column_inputs(x0, t))[:, 0]

    def forcing_jvp(self, p, x0, t, dx0=None, dp=None) -> np.ndarray:
        if self.net is None:
            return np.zeros(self.cfg.N)
        dz = None
        if dx0 is not None:
            dz = np.zeros((self.cfg.N, self.net.dims[0]))
            dz[:, : self.n_state_channels] = np.asarray(dx0)[self._stencil]
        return nn.predict_jvp(self._params(p), self.column_inputs(x0, t), dz, dp)[:, 0]

    def forcing_vjp(self, p, x0, t, cot_w: np.ndarray):
        """Returns (gradient w.r.t. flat params, gradient w.r.t. x0)."""
        if self.net is None:
            return np.zeros(0), np.zeros(self.cfg.N)
        gp, gz = nn.predict_vjp(self._params(p), self.column_inputs(x0, t), np.asarray(cot_w)[:, None])
        gx = np.zeros(self.cfg.N)
        np.add.at(gx, self._stencil, gz[:, : self.n_state_channels])
        return gp, gx

    def step(self, x: np.ndarray) -> np.ndarray:
        return rk4_step(lambda s: forecast_tendency(s, self.cfg), x, self.cfg.dt)

    def integrate(self, x0: np.ndarray, p=None, t: float = 0.0, k_steps: int | None = None) -> np.ndarray:
        """Hybrid trajectory over one window, shape (k_steps + 1, N)."""
        k_steps = self.cfg.steps_per_window if k_steps is None else k_steps
        x0 = np.asarray(x0, dtype=float)
        _check_len(x0, self.cfg.N, "initial state")
        w = self.forcing(p, x0, t) * self.forcing_scale
        traj = np.empty((k_steps + 1, self.cfg.N))
        traj[0] = x0
        x = x0
        for k in range(k_steps):
            x = self.step(x)
            if self.net is not None:
                x = x + w
            if not np.all(np.isfinite(x)):
                raise BlowUpError(f"non-finite hybrid state after step {k + 1}", k + 1)
            traj[k + 1] = x
        return traj

    def forecast(self, x0: np.ndarray, p, t0: float, n_windows: int) -> np.ndarray:
        """Multi-window forecast with the forcing recomputed at each window
        start; returns the states at window boundaries, shape (n_windows+1, N)."""
        out = [np.asarray(x0, dtype=float)]
        x, t = out[0], t0
        for _ in range(n_windows):
            x = self.integrate(x, p, t)[-1]
            t += self.cfg.window_length
            out.append(x)
        return np.array(out)

    def linearize(self, traj: np.ndarray, p, t: float) -> "HybridLinearization":
        return HybridLinearization(self, traj, p, t)

    def tlm(self, traj: np.ndarray, p, t: float, dx0=None, dp=None) -> np.ndarray:
        """Tangent-linear trajectory for perturbations of x0 and p."""
        return self.linearize(traj, p, t).tlm(dx0, dp)

    def adjoint(self, traj: np.ndarray, p, t: float, cot: np.ndarray):
        """Transpose of :meth:`tlm`: cotangents per trajectory state -> (g_x0, g_p)."""
        return self.linearize(traj, p, t).adjoint(cot)


class HybridLinearization:
    """Tangent-linear and adjoint of a hybrid window trajectory.

    Built once per Gauss-Newton outer loop; the step Jacobians are reused by
    every inner iteration.
    """

    def __init__(self, model: HybridModel, traj: np.ndarray, p, t: float):
        self.model, self.traj, self.p, self.t = model, traj, p, t
        self.steps = [_StepJacobian(x, model.cfg) for x in traj[:-1]]

    def tlm(self, dx0=None, dp=None) -> np.ndarray:
        m = self.model
        N = m.cfg.N
        dx = np.zeros(N) if dx0 is None else np.asarray(dx0, dtype=float)
        _check_len(dx, N, "state tangent")
        if m.net is None:
            dw = None
        else:
            dw = m.forcing_jvp(self.p, self.traj[0], self.t, dx, dp) * m.forcing_scale
        out = np.empty((len(self.steps) + 1, N))
        out[0] = dx
        for k, jac in enumerate(self.steps):
            dx = jac.tlm(dx)
            if dw is not None:
                dx = dx + dw
            out[k + 1] = dx
        return out

    def adjoint(self, cot: np.ndarray):
        m = self.model
        if cot.shape != self.traj.shape:
            raise ValueError(f"cotangent shape {cot.shape} != trajectory shape {self.traj.shape}")
        K = len(self.steps)
        lam = cot[K].copy()
        gw = np.zeros(m.cfg.N)
        for k in range(K - 1, -1, -1):
            gw += lam
            lam = self.steps[k].adjoint(lam) + cot[k]
        if m.net is None:
            return lam, np.zeros(0)
        gp, gx = m.forcing_vjp(self.p, self.traj[0], self.t, gw * m.forcing_scale)
        return lam + gx, gp
