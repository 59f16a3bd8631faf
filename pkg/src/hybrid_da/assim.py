"""Strong-constraint and NN 4D-Var with incremental Gauss-Newton minimization,
observation simulation, and the cycling driver.

Models are duck-typed: anything with ``integrate(x0, p, t)``,
``adjoint(traj, p, t, cot)`` and ``linearize(traj, p, t)`` returning an
object with ``tlm(dx0, dp)`` and ``adjoint(cot)`` works, which is what
:class:`hybrid_da.dyn.HybridModel` provides.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dyn import BlowUpError, HybridModel, ModelConfig, rk4_step, truth_tendency
from .fileio import read_container, write_container

log = logging.getLogger(__name__)

MODES = ("sc", "sc+fixed-net", "nn4dvar")


class CovarianceError(ValueError):
    pass


class CyclingError(RuntimeError):
    def __init__(self, message: str, window: int):
        super().__init__(f"window {window}: {message}")
        self.window = window


@dataclass(frozen=True)
class ObsConfig:
    """Observed sites at each observation step of a window.

    ``sites`` is either one list used at every time or one list per time
    (all the same length).
    """

    times: tuple[int, ...] = (0, 2, 4, 6, 8)
    sites: tuple = tuple(range(0, 36, 2))
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("observation error std must be positive")
        if len(self.times) == 0:
            raise ValueError("need at least one observation time")

    def site_table(self) -> np.ndarray:
        sites = np.asarray(self.sites, dtype=int)
        if sites.ndim == 1:
            sites = np.broadcast_to(sites, (len(self.times), sites.size))
        if sites.shape[0] != len(self.times):
            raise ValueError(f"{sites.shape[0]} site lists for {len(self.times)} observation times")
        return np.array(sites)

    def validate(self, N: int, steps_per_window: int):
        if min(self.times) < 0 or max(self.times) > steps_per_window:
            raise ValueError(f"observation times must lie in [0, {steps_per_window}]")
        table = self.site_table()
        if table.min() < 0 or table.max() >= N:
            raise ValueError(f"observed site index out of range for {N} sites")


@dataclass
class WindowObs:
    times: np.ndarray        # (n_times,) step indices in the window
    sites: np.ndarray        # (n_times, n_obs)
    values: np.ndarray       # (n_times, n_obs)
    sigma: float

    @property
    def count(self) -> int:
        return self.values.size


@dataclass
class CovSpec:
    """Background covariances: B (Gaussian-correlated or diagonal) and P = p^2 I."""

    N: int
    sigma_b: float
    length_scale: float | None = None
    p: float = 5e-4

    def __post_init__(self):
        if self.sigma_b <= 0 or self.p <= 0:
            raise CovarianceError("sigma_b and p must be positive")
        if self.length_scale is None or self.length_scale == 0:
            corr = np.eye(self.N)
        else:
            idx = np.arange(self.N)
            d = np.abs(idx[:, None] - idx[None, :])
            d = np.minimum(d, self.N - d)
            corr = np.exp(-0.5 * (d / self.length_scale) ** 2)
        B = self.sigma_b**2 * corr
        evals, evecs = np.linalg.eigh(B)
        if evals.min() <= 1e-12 * evals.max():
            raise CovarianceError(f"B is not positive definite (min eigenvalue {evals.min():.3e})")
        self.B = B
        self.B_sqrt = (evecs * np.sqrt(evals)) @ evecs.T
        self.B_inv = (evecs / evals) @ evecs.T


@dataclass(frozen=True)
class MinimizerConfig:
    n_outer: int = 3
    max_inner: int = 50
    inner_tol: float = 1e-6

    def __post_init__(self):
        if self.n_outer < 1 or self.max_inner < 1:
            raise ValueError("need at least one outer and one inner iteration")


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


def make_observations(truth: np.ndarray, obs_cfg: ObsConfig, steps_per_window: int, seed: int = 0):
    """Sample the slow truth (shape (n_windows * steps + 1, N)) per window.

    Returns an array (n_windows, n_times, n_obs) of noisy observations.
    """
    table = obs_cfg.site_table()
    obs_cfg.validate(truth.shape[1], steps_per_window)
    n_windows = (truth.shape[0] - 1) // steps_per_window
    rng = np.random.default_rng(seed)
    starts = np.arange(n_windows) * steps_per_window
    step_idx = starts[:, None] + np.asarray(obs_cfg.times)[None, :]
    clean = truth[step_idx[:, :, None], table[None, :, :]]
    return clean + obs_cfg.sigma * rng.standard_normal(clean.shape)


def window_obs(values: np.ndarray, obs_cfg: ObsConfig) -> WindowObs:
    return WindowObs(np.asarray(obs_cfg.times), obs_cfg.site_table(), values, obs_cfg.sigma)


# ---------------------------------------------------------------------------
# cost functions
# ---------------------------------------------------------------------------


def _obs_term(traj: np.ndarray, obs: WindowObs):
    resid = obs.values - traj[obs.times[:, None], obs.sites]
    cost = 0.5 * np.sum(resid**2) / obs.sigma**2
    cot = np.zeros_like(traj)
    np.add.at(cot, (obs.times[:, None], obs.sites), -resid / obs.sigma**2)
    return cost, cot


def sc4dvar_cost(x0, xb, obs: WindowObs, cov: CovSpec, model, t: float = 0.0, p=None) -> float:
    """Strong-constraint cost; a hybrid ``model`` is run with fixed ``p``."""
    dx = np.asarray(x0) - xb
    traj = model.integrate(x0, p, t)
    return float(0.5 * dx @ cov.B_inv @ dx + _obs_term(traj, obs)[0])


def sc4dvar_grad(x0, xb, obs: WindowObs, cov: CovSpec, model, t: float = 0.0, p=None) -> np.ndarray:
    traj = model.integrate(x0, p, t)
    _, cot = _obs_term(traj, obs)
    gx, _ = model.adjoint(traj, p, t, cot)
    return cov.B_inv @ (np.asarray(x0) - xb) + gx


def nn4dvar_cost(p, x0, xb, pb, obs: WindowObs, cov: CovSpec, model, t: float = 0.0) -> float:
    """Joint cost in state and network parameters with P = p^2 I."""
    dp = np.asarray(p) - pb
    return sc4dvar_cost(x0, xb, obs, cov, model, t, p) + float(0.5 * dp @ dp / cov.p**2)


def nn4dvar_grad(p, x0, xb, pb, obs: WindowObs, cov: CovSpec, model, t: float = 0.0):
    """Gradient (d/dx0, d/dp) of :func:`nn4dvar_cost` by the adjoint."""
    traj = model.integrate(x0, p, t)
    _, cot = _obs_term(traj, obs)
    gx, gp = model.adjoint(traj, p, t, cot)
    return cov.B_inv @ (np.asarray(x0) - xb) + gx, (np.asarray(p) - pb) / cov.p**2 + gp


# ---------------------------------------------------------------------------
# incremental minimization
# ---------------------------------------------------------------------------


@dataclass
class MinimizeResult:
    x0: np.ndarray
    p: np.ndarray | None
    inner_costs: list[list[float]] = field(default_factory=list)
    outer_costs: list[float] = field(default_factory=list)
    inner_iterations: list[int] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)


def conjugate_gradient(matvec, b: np.ndarray, tol: float, max_iter: int, const: float = 0.0):
    """CG for H d = b from d = 0, returning the quadratic
    q(d) = const + d.H.d/2 - b.d after every iteration."""
    d = np.zeros_like(b)
    r = b.copy()
    s = r.copy()
    rr = r @ r
    bnorm = np.sqrt(rr)
    trace = [const]
    if bnorm == 0.0:
        return d, trace, True
    converged = False
    for _ in range(max_iter):
        Hs = matvec(s)
        curv = s @ Hs
        if curv <= 0:
            break
        alpha = rr / curv
        d += alpha * s
        r -= alpha * Hs
        rr_new = r @ r
        trace.append(const - 0.5 * (b @ d + r @ d))
        if np.sqrt(rr_new) <= tol * bnorm:
            converged = True
            break
        s = r + (rr_new / rr) * s
        rr = rr_new
    return d, trace, converged


def incremental_minimize(model, xb, obs: WindowObs, cov: CovSpec, cfg: MinimizerConfig, t: float = 0.0,
                         pb=None, control_params: bool = False, x_first=None, p_first=None) -> MinimizeResult:
    """Gauss-Newton outer loops with CG inner loops in the preconditioned
    control variable x0 = xb + B^{1/2} chi_x, p = pb + p chi_p.

    With ``control_params`` false the network parameters stay at ``pb``
    (strong-constraint 4D-Var with the hybrid model).
    """
    xb = np.asarray(xb, dtype=float)
    N = xb.size
    pb = np.zeros(0) if pb is None else np.asarray(pb, dtype=float)
    np_ctrl = pb.size if control_params else 0
    sigma = obs.sigma
    x0 = xb.copy() if x_first is None else np.asarray(x_first, dtype=float).copy()
    p = pb.copy() if p_first is None else np.asarray(p_first, dtype=float).copy()
    chi = np.concatenate([np.linalg.solve(cov.B_sqrt, x0 - xb), (p - pb)[:np_ctrl] / cov.p])
    p_arg = p if pb.size else None
    result = MinimizeResult(x0, p_arg)

    def nonlinear_cost(x, pp):
        traj = model.integrate(x, pp, t)
        dx = x - xb
        c = 0.5 * dx @ cov.B_inv @ dx + _obs_term(traj, obs)[0]
        if np_ctrl:
            c += 0.5 * np.sum((pp - pb) ** 2) / cov.p**2
        return float(c), traj

    cost, traj = nonlinear_cost(x0, p_arg)
    result.outer_costs.append(cost)
    for _ in range(cfg.n_outer):
        d = (obs.values - traj[obs.times[:, None], obs.sites]).ravel() / sigma
        lin = model.linearize(traj, p_arg, t)

        def A(v):
            dx0 = cov.B_sqrt @ v[:N]
            dp = cov.p * v[N:] if np_ctrl else None
            dtraj = lin.tlm(dx0, dp)
            return dtraj[obs.times[:, None], obs.sites].ravel() / sigma

        def AT(r):
            cot = np.zeros_like(traj)
            np.add.at(cot, (obs.times[:, None], obs.sites), r.reshape(obs.values.shape) / sigma)
            gx, gp = lin.adjoint(cot)
            parts = [cov.B_sqrt.T @ gx]
            if np_ctrl:
                parts.append(cov.p * gp)
            return np.concatenate(parts)

        b = -chi + AT(d)
        const = 0.5 * chi @ chi + 0.5 * d @ d
        delta, trace, ok = conjugate_gradient(lambda v: v + AT(A(v)), b, cfg.inner_tol, cfg.max_inner, const)
        chi = chi + delta
        x0 = xb + cov.B_sqrt @ chi[:N]
        if np_ctrl:
            p = pb + cov.p * chi[N:]
            p_arg = p
        cost, traj = nonlinear_cost(x0, p_arg)
        result.inner_costs.append(trace)
        result.inner_iterations.append(len(trace) - 1)
        result.converged.append(ok)
        result.outer_costs.append(cost)
    result.x0 = x0
    result.p = p_arg
    return result


# ---------------------------------------------------------------------------
# truth generation and cycling
# ---------------------------------------------------------------------------


@dataclass
class TruthRun:
    slow: np.ndarray           # (n_windows * steps + 1, N) slow variables at every step
    final_state: np.ndarray    # full two-scale state at the end
    cfg: ModelConfig


def generate_truth(cfg: ModelConfig, n_windows: int, initial_state: np.ndarray) -> TruthRun:
    f = lambda s: truth_tendency(s, cfg)
    n_steps = n_windows * cfg.steps_per_window
    slow = np.empty((n_steps + 1, cfg.N))
    state = np.asarray(initial_state, dtype=float)
    slow[0] = state[: cfg.N]
    for k in range(n_steps):
        state = rk4_step(f, state, cfg.dt)
        if not np.all(np.isfinite(state)):
            raise BlowUpError(f"truth blew up at step {k + 1}", k + 1)
        slow[k + 1] = state[: cfg.N]
    return TruthRun(slow, state, cfg)


@dataclass
class CycleArchive:
    """Per-window records of one cycling experiment."""

    mode: str
    t0: float
    window_length: float
    backgrounds: np.ndarray
    analyses: np.ndarray
    forcings: np.ndarray
    observations: np.ndarray
    params: np.ndarray                 # (n_windows + 1, n_p): p^b of window 0, then p^a of each window
    inner_iterations: np.ndarray
    outer_costs: np.ndarray
    next_background: np.ndarray        # forecast from the last analysis, background of the following window
    meta: dict = field(default_factory=dict)

    @property
    def n_windows(self) -> int:
        return self.backgrounds.shape[0]

    @property
    def increments(self) -> np.ndarray:
        return self.analyses - self.backgrounds

    def window_time(self, k: int) -> float:
        return self.t0 + k * self.window_length

    def save(self, path) -> None:
        meta = dict(self.meta, mode=self.mode, t0=self.t0, window_length=self.window_length)
        write_container(path, meta, {
            "backgrounds": self.backgrounds, "analyses": self.analyses, "forcings": self.forcings,
            "observations": self.observations, "params": self.params,
            "inner_iterations": self.inner_iterations, "outer_costs": self.outer_costs,
            "next_background": self.next_background,
        })

    @classmethod
    def load(cls, path) -> "CycleArchive":
        meta, arrays = read_container(path)
        meta = dict(meta)
        mode, t0, wl = meta.pop("mode"), meta.pop("t0"), meta.pop("window_length")
        return cls(mode, t0, wl, meta=meta, **arrays)


def run_cycles(mode: str, model: HybridModel, observations: np.ndarray, obs_cfg: ObsConfig, cov: CovSpec,
               minimizer: MinimizerConfig, xb0: np.ndarray, pb0=None, t0: float = 0.0,
               p_schedule=None, meta: dict | None = None) -> CycleArchive:
    """Sequential cycling over ``observations`` (n_windows, n_times, n_obs).

    ``mode`` is "sc" (plain forecast model), "sc+fixed-net" (hybrid model,
    parameters held at ``pb0``) or "nn4dvar" (parameters in the control
    vector, persisted from one window to the next). ``p_schedule`` maps a
    window index to the parameter std for that window (default: constant
    ``cov.p``).
    """
    if mode not in MODES:
        raise ValueError(f"unknown cycling mode {mode!r}")
    if mode == "sc":
        model = model.with_net(None)
        pb = np.zeros(0)
    else:
        if model.net is None:
            raise ValueError(f"mode {mode} needs a network")
        pb = model.flat_params() if pb0 is None else np.asarray(pb0, dtype=float).copy()
    n_windows = observations.shape[0]
    N = model.cfg.N
    wl = model.cfg.window_length
    backgrounds = np.empty((n_windows, N))
    analyses = np.empty((n_windows, N))
    forcings = np.empty((n_windows, N))
    params = np.empty((n_windows + 1, pb.size))
    params[0] = pb
    inner = np.zeros((n_windows, minimizer.n_outer), dtype=int)
    outer = np.zeros((n_windows, minimizer.n_outer + 1))
    xb = np.asarray(xb0, dtype=float).copy()
    p_arg = pb if pb.size else None
    for k in range(n_windows):
        t = t0 + k * wl
        window_cov = cov
        if p_schedule is not None and mode == "nn4dvar":
            window_cov = CovSpec(cov.N, cov.sigma_b, cov.length_scale, float(p_schedule(k)))
        try:
            res = incremental_minimize(model, xb, window_obs(observations[k], obs_cfg), window_cov, minimizer,
                                       t, pb=p_arg, control_params=(mode == "nn4dvar"))
            xa = res.x0
            pa = res.p
            w = model.forcing(pa, xa, t)
            x_next = model.integrate(xa, pa, t)[-1]
        except (BlowUpError, FloatingPointError) as exc:
            raise CyclingError(str(exc), k) from exc
        if not np.all(np.isfinite(xa)):
            raise CyclingError("non-finite analysis", k)
        backgrounds[k], analyses[k], forcings[k] = xb, xa, w
        inner[k] = res.inner_iterations
        outer[k] = res.outer_costs
        if pb.size:
            params[k + 1] = pa
            p_arg = pa
        xb = x_next
    return CycleArchive(mode, t0, wl, backgrounds, analyses, forcings, observations, params,
                        inner, outer, xb, dict(meta or {}))
