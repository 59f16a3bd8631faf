"""Experiment orchestration shared by the command line and the tests.

The twin experiment has two periods. The training period (windows
``[0, train_windows)``) is cycled with the plain forecast model and its
increments feed the offline datasets. The evaluation period (the following
``eval_windows``) starts from the background left by the training run and
is cycled by every experiment being compared.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import diag
from . import net as nn
from .assim import CycleArchive, generate_truth, make_observations, run_cycles
from .config import ExperimentConfig
from .dyn import HybridModel, initial_truth
from .fileio import read_container, write_container
from .sphere import RingGrid

log = logging.getLogger(__name__)

EVAL_EXPERIMENTS = ("sc", "sc+fixed-net", "nn4dvar-pretrained", "nn4dvar-scratch")
VARIABLES = ("x",)


def build_model(cfg: ExperimentConfig, net: nn.NetParams | None = None, halfwidth: int | None = None) -> HybridModel:
    mc = cfg.model_config()
    hw = cfg.model.halfwidth if halfwidth is None else halfwidth
    return HybridModel(mc, net, hw, cfg.model.t_cycle_windows * mc.window_length, cfg.model.forcing_scale,
                       cfg.dataset.mode)


def provenance(cfg: ExperimentConfig, **extra) -> dict:
    seeds = {name: cfg.seed(name) for name in ("truth", "observations", "background", "network", "training",
                                                "scratch")}
    return {"config": cfg.to_dict(), "seeds": seeds, **extra}


def ring_weights(cfg: ExperimentConfig) -> np.ndarray:
    return RingGrid(cfg.model.N).cell_weights.ravel()


# ---------------------------------------------------------------------------
# nature run
# ---------------------------------------------------------------------------


@dataclass
class TruthArchive:
    slow: np.ndarray  # (n_windows * steps + 1, N)
    final_state: np.ndarray
    observations: np.ndarray  # (n_windows, n_times, n_obs)
    steps_per_window: int
    meta: dict = field(default_factory=dict)

    @property
    def n_windows(self) -> int:
        return self.observations.shape[0]

    @property
    def window_states(self) -> np.ndarray:
        return self.slow[:: self.steps_per_window]

    def save(self, path) -> None:
        write_container(path, dict(self.meta, steps_per_window=self.steps_per_window),
                        {"slow": self.slow, "final_state": self.final_state, "observations": self.observations})

    @classmethod
    def load(cls, path) -> "TruthArchive":
        meta, arrays = read_container(path)
        meta = dict(meta)
        spw = meta.pop("steps_per_window")
        return cls(arrays["slow"], arrays["final_state"], arrays["observations"], spw, meta)


def gen_truth(cfg: ExperimentConfig) -> TruthArchive:
    mc = cfg.model_config()
    oc = cfg.obs_config()
    n_windows = cfg.truth.train_windows + cfg.truth.eval_windows
    state0 = initial_truth(mc, cfg.seed("truth"), cfg.truth.spinup_steps)
    run = generate_truth(mc, n_windows, state0)
    obs = make_observations(run.slow, oc, mc.steps_per_window, cfg.seed("observations"))
    return TruthArchive(run.slow, run.final_state, obs, mc.steps_per_window, provenance(cfg, kind="truth"))


# ---------------------------------------------------------------------------
# cycling
# ---------------------------------------------------------------------------


def run_training_period(cfg: ExperimentConfig, truth: TruthArchive) -> CycleArchive:
    """Plain strong-constraint cycling over the training period."""
    n = cfg.truth.train_windows
    rng = np.random.default_rng(cfg.seed("background"))
    xb0 = truth.window_states[0] + cfg.covariance.sigma_init * rng.standard_normal(cfg.model.N)
    return run_cycles("sc", build_model(cfg), truth.observations[:n], cfg.obs_config(), cfg.cov_spec(),
                      cfg.minimizer_config(), xb0, meta=provenance(cfg, kind="cycles", period="train",
                                                                    experiment="sc"))


def eval_slice(cfg: ExperimentConfig, n_windows: int | None = None) -> slice:
    start = cfg.truth.train_windows
    n = cfg.truth.eval_windows if n_windows is None else n_windows
    return slice(start, start + n)


def run_evaluation_period(cfg: ExperimentConfig, truth: TruthArchive, train_archive: CycleArchive, mode: str,
                          net: nn.NetParams | None = None, p: float | None = None, name: str | None = None,
                          n_windows: int | None = None) -> CycleArchive:
    """Cycle the evaluation period in ``mode`` starting from the training run's last background."""
    sl = eval_slice(cfg, n_windows)
    obs = truth.observations[sl]
    t0 = sl.start * cfg.model_config().window_length
    model = build_model(cfg, net, None if net is None else _halfwidth_of(net))
    return run_cycles(mode, model, obs, cfg.obs_config(), cfg.cov_spec(p), cfg.minimizer_config(),
                      train_archive.next_background, t0=t0,
                      meta=provenance(cfg, kind="cycles", period="eval", experiment=name or mode,
                                      p=cfg.covariance.p if p is None else p))


def _halfwidth_of(net: nn.NetParams) -> int:
    return (net.dims[0] - 5) // 2


def scratch_params(cfg: ExperimentConfig, train_archive: CycleArchive) -> nn.NetParams:
    """Randomly initialized network for online training from scratch.

    Inputs are standardized with the training-period analysis climatology;
    outputs are scaled by ``scratch_out_std`` around zero.
    """
    x = train_archive.analyses
    norm = nn.NormStats(np.full(2 * cfg.model.halfwidth + 1, x.mean()), np.full(2 * cfg.model.halfwidth + 1, x.std()),
                        np.zeros(1), np.full(1, cfg.network.scratch_out_std))
    return nn.init_params(cfg.layer_dims(), cfg.seed("scratch"), norm)


def run_online(cfg: ExperimentConfig, truth: TruthArchive, train_archive: CycleArchive, init: str,
               pretrained: nn.NetParams | None = None, n_windows: int | None = None) -> CycleArchive:
    if init == "pretrained":
        if pretrained is None:
            raise ValueError("pretrained initialization needs a trained network")
        net, p = pretrained, cfg.covariance.p
    elif init == "scratch":
        net = scratch_params(cfg, train_archive)
        p = cfg.covariance.p if cfg.online.p_scratch is None else cfg.online.p_scratch
    else:
        raise ValueError(f"unknown initialization {init!r}")
    return run_evaluation_period(cfg, truth, train_archive, "nn4dvar", net, p, f"nn4dvar-{init}", n_windows)


# ---------------------------------------------------------------------------
# offline datasets and training
# ---------------------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig, train_archive: CycleArchive, mode: str | None = None,
                  halfwidth: int | None = None) -> tuple[ds.IncrementPairs, ds.SplitSpec]:
    mode = cfg.dataset.mode if mode is None else mode
    pairs = ds.make_pairs(train_archive, mode, build_model(cfg, halfwidth=halfwidth))
    pairs.meta.update(archive=ds.archive_digest(train_archive))
    spec = ds.default_split(pairs, cfg.dataset.train_fraction, cfg.dataset.windows_per_day)
    return pairs, spec


@dataclass
class OfflineResult:
    net: nn.NetParams
    history: nn.TrainHistory
    scores: dict[str, float]


def train_offline(cfg: ExperimentConfig, pairs: ds.IncrementPairs, spec: ds.SplitSpec,
                  train_days: np.ndarray | None = None, truncation: int | None = None,
                  seed_shift: int = 0) -> OfflineResult:
    """Train a column network on the training split and score all splits.

    With ``truncation`` the inputs and targets used for training are low-
    passed to that ring wavenumber; scores are always against the full
    resolution targets, feeding the network truncated inputs.
    """
    w = ring_weights(cfg)
    train_pairs = pairs if truncation is None else pairs.truncated(truncation)
    splits = ds.split_pairs(train_pairs, spec, cfg.dataset.windows_per_day, train_days)
    stats = ds.fit_norm_stats(splits["train"])
    init = nn.init_params([pairs.inputs.shape[-1], *cfg.network.hidden, pairs.targets.shape[-1]],
                          cfg.seed("network") + seed_shift, stats)
    net, history = nn.fit(init, ds.normalized_arrays(splits["train"], stats, w),
                          ds.normalized_arrays(splits["valid"], stats, w), cfg.train_config(seed_shift))
    full = ds.split_pairs(pairs, spec, cfg.dataset.windows_per_day, train_days)
    scores = {}
    for name, split in full.items():
        feed = split if truncation is None else split.truncated(truncation)
        scores[name] = ds.relative_wmse_of(ds.predict_pairs(net, feed), split.targets, w)
    return OfflineResult(net, history, scores)


def offline_table(cfg: ExperimentConfig, results: dict[str, OfflineResult], pairs_by_mode: dict) -> str:
    """Test-split relative wMSE: rows zero/prediction/post-processing, columns variables."""
    w = ring_weights(cfg)
    lines = ["predictor," + ",".join(VARIABLES)]
    any_mode = next(iter(pairs_by_mode))
    pairs, spec = pairs_by_mode[any_mode]
    zero_test = ds.split_pairs(pairs, spec, cfg.dataset.windows_per_day)["test"]
    lines.append("zero," + ",".join(repr(ds.relative_wmse(None, zero_test, w, v)) for v in range(len(VARIABLES))))
    for mode in ds.PAIR_MODES:
        if mode in results:
            lines.append(f"{mode}," + ",".join(repr(results[mode].scores["test"]) for _ in VARIABLES))
    return "\n".join(lines) + "\n"


def offline_diagnostics(cfg: ExperimentConfig, net: nn.NetParams, pairs: ds.IncrementPairs,
                        spec: ds.SplitSpec) -> dict:
    """Temporal scores, bias/variance split and spectra on the test split."""
    test = ds.split_pairs(pairs, spec, cfg.dataset.windows_per_day)["test"]
    w = ring_weights(cfg)
    pred = ds.predict_pairs(net, test)
    ts = diag.temporal_scores(pred, test.targets, w, test.windows)
    bv = diag.bias_variance_decomposition(pred[..., 0], test.targets[..., 0], w)
    spectra = diag.error_spectra(np.moveaxis(pred, 1, -1), np.moveaxis(test.targets, 1, -1), RingGrid(cfg.model.N),
                                 inputs=np.moveaxis(test.inputs[..., : test.n_state], 1, -1)[:, :1])
    return {
        "mode": pairs.mode,
        "temporal": {"windows": ts.windows.tolist(),
                     "relative_wmse": [diag._missing(v) for v in ts.relative_wmse[:, 0]],
                     "correlation": [diag._missing(v) for v in ts.correlation[:, 0]]},
        "bias_variance": {"bias_share": diag._missing(bv.bias_share),
                          "variance_ratio": diag._missing(bv.variance_ratio),
                          "degenerate_prediction": bv.degenerate_prediction},
        "spectra": spectra.to_json(),
    }


# ---------------------------------------------------------------------------
# evaluation of cycling experiments
# ---------------------------------------------------------------------------


def analysis_rmse(archive: CycleArchive, truth: TruthArchive, start_window: int) -> np.ndarray:
    """Per-window analysis RMSE against the nature run."""
    ref = truth.window_states[start_window:start_window + archive.n_windows]
    return np.sqrt(np.mean((archive.analyses - ref) ** 2, axis=1))


def final_part(values: np.ndarray, fraction: float) -> np.ndarray:
    n = values.shape[0]
    return values[n - max(1, int(round(fraction * n))):]


def compare_analyses(cfg: ExperimentConfig, archives: dict[str, CycleArchive], truth: TruthArchive) -> dict:
    """Time-mean analysis RMSE over the final part of the evaluation period,
    with paired significance of every pair of experiments."""
    start = cfg.truth.train_windows
    frac = cfg.diagnostics.final_fraction
    series = {name: final_part(analysis_rmse(a, truth, start), frac) for name, a in archives.items()}
    sig_cfg = cfg.significance_config()
    pairs = {}
    names = sorted(series)
    for a in names:
        for b in names:
            if a < b and series[a].size == series[b].size and series[a].size >= 2:
                res = diag.significance(series[a] - series[b], sig_cfg)
                pairs[f"{a} - {b}"] = {"mean": res.mean, "half_width": res.half_width,
                                       "pvalue": diag._missing(res.pvalue),
                                       "significant": res.significant}
    return {"mean_rmse": {k: float(v.mean()) for k, v in sorted(series.items())},
            "n_windows": {k: int(v.size) for k, v in sorted(series.items())}, "paired": pairs}


def forecast_scores(cfg: ExperimentConfig, archives: dict[str, CycleArchive], truth: TruthArchive,
                    nets: dict[str, nn.NetParams | None]) -> dict[str, dict[str, diag.ForecastScores]]:
    """Forecast RMSE by lead against truth and against own analyses."""
    start = cfg.truth.train_windows
    out = {"truth": {}, "own-analysis": {}}
    for name, archive in archives.items():
        net = nets.get(name)
        model = build_model(cfg, net, None if net is None else _halfwidth_of(net))
        truth_windows = truth.window_states[start:start + archive.n_windows]
        for verify in out:
            out[verify][name] = diag.forecast_rmse(archive, model, cfg.diagnostics.leads, verify,
                                                   truth_windows, name, cfg.diagnostics.case_stride)
    return out


def forecast_report(scores: dict[str, dict[str, diag.ForecastScores]], reference: str) -> dict:
    report = {}
    for verify, by_exp in scores.items():
        report[verify] = {}
        for name, fs in sorted(by_exp.items()):
            entry = {"leads": fs.leads.tolist(), "rmse": fs.rmse[:, 0].tolist()}
            if reference in by_exp:
                entry["change_pct"] = diag.normalized_change(fs, by_exp[reference])[:, 0].tolist()
            report[verify][name] = entry
    return report


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SizePoint:
    fraction: float
    strategy: str


def size_sweep_runner(cfg: ExperimentConfig, pairs: ds.IncrementPairs, spec: ds.SplitSpec):
    def run(point: SizePoint) -> dict:
        days = ds.select_training_days(spec.days_with("train"), point.fraction, point.strategy)
        res = train_offline(cfg, pairs, spec, train_days=days)
        return {"fraction": point.fraction, "strategy": point.strategy, "train_days": int(days.size),
                "best_epoch": res.history.best_epoch, **{f"{k}_relative_wmse": v for k, v in res.scores.items()}}
    return run


def resolution_sweep_runner(cfg: ExperimentConfig, train_archive: CycleArchive):
    """Train at each ring truncation and return the relative error spectrum
    of test predictions against full-resolution targets."""
    hw = cfg.sweep.resolution_halfwidth
    pairs, spec = build_dataset(cfg, train_archive, halfwidth=hw)
    rcfg = cfg.replace("model", halfwidth=hw)
    test = ds.split_pairs(pairs, spec, cfg.dataset.windows_per_day)["test"]

    def run(K: int) -> dict:
        res = train_offline(rcfg, pairs, spec, truncation=K)
        pred = ds.predict_pairs(res.net, test.truncated(K))
        rep = diag.error_spectra(np.moveaxis(pred, 1, -1), np.moveaxis(test.targets, 1, -1), RingGrid(cfg.model.N))
        return {"truncation": K, "test_relative_wmse": res.scores["test"],
                "relative_error_spectrum": [diag._missing(v) for v in rep.relative_error[0]]}
    return run


def p_sweep_runner(cfg: ExperimentConfig, truth: TruthArchive, train_archive: CycleArchive, net: nn.NetParams):
    start = cfg.truth.train_windows
    n = min(cfg.sweep.p_windows, cfg.truth.eval_windows)

    def run(p: float) -> dict:
        arc = run_evaluation_period(cfg, truth, train_archive, "nn4dvar", net, p, f"nn4dvar-p{p}", n)
        rmse = final_part(analysis_rmse(arc, truth, start), cfg.diagnostics.final_fraction)
        return {"p": p, "final_mean_rmse": float(rmse.mean()),
                "param_change": float(np.linalg.norm(arc.params[-1] - arc.params[0]))}
    return run


def sweep_report(result: diag.SweepResult) -> dict:
    return {"kind": result.kind,
            "points": [{"point": _point_json(p), "report": r, "error": e}
                       for p, r, e in zip(result.points, result.reports, result.errors)]}


def _point_json(p):
    if isinstance(p, SizePoint):
        return {"fraction": p.fraction, "strategy": p.strategy}
    return p


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def truncation_ladder_ok(spectrum, K: int, low_max: float = 1.0, high_min: float = 0.9) -> bool:
    """Relative error below ``low_max`` at wavenumbers <= K and at least
    ``high_min`` above K (missing entries ignored)."""
    vals = np.array([np.nan if v is None else v for v in spectrum], dtype=float)
    k = np.arange(vals.size)
    low, high = vals[(k <= K) & np.isfinite(vals)], vals[(k > K) & np.isfinite(vals)]
    return bool(np.all(low < low_max) and np.all(high >= high_min))

