"""Evaluation: temporal scores, spectra, forecast RMSE, significance and
scorecards, plus a generic sweep harness.

Missing values are NaN inside arrays and ``None`` (JSON null, empty CSV
cell) once serialized.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .sphere import GaussGrid, GridField, RingGrid, power_spectrum, ring_power, sh_analysis

log = logging.getLogger(__name__)

SWEEP_KINDS = ("dataset-size", "resolution", "p-value")
SCORECARD_COLUMNS = ("experiment", "reference", "variable", "lead", "rmse_change_pct", "significant", "pvalue")


class MismatchError(ValueError):
    pass


def _missing(x):
    """Map NaN/inf to None for serialization."""
    if x is None:
        return None
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return x if math.isfinite(x) else None


def _weights(weights, n_sites: int) -> np.ndarray:
    w = np.ones(n_sites) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.size != n_sites:
        raise ValueError(f"{w.size} weights for {n_sites} sites")
    return w


# ---------------------------------------------------------------------------
# temporal scores and bias/variance
# ---------------------------------------------------------------------------


@dataclass
class TemporalScores:
    windows: np.ndarray
    relative_wmse: np.ndarray  # (n_windows, nvar)
    correlation: np.ndarray  # (n_windows, nvar), NaN where undefined


def temporal_scores(predictions: np.ndarray, targets: np.ndarray, weights=None, windows=None) -> TemporalScores:
    """Per-window relative wMSE and Pearson correlation over sites.

    ``predictions`` and ``targets`` have shape (n_windows, n_sites, nvar).
    """
    pred = np.asarray(predictions, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    if pred.shape != tgt.shape or pred.ndim != 3:
        raise ValueError("predictions and targets must share shape (windows, sites, vars)")
    if pred.shape[1] < 2:
        raise ValueError("correlation needs at least two sites")
    w = _weights(weights, pred.shape[1])[None, :, None]
    err = np.sum(w * (pred - tgt) ** 2, axis=1)
    ref = np.sum(w * tgt**2, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(ref > 0, err / np.where(ref > 0, ref, 1.0), np.nan)
        pc = pred - pred.mean(axis=1, keepdims=True)
        tc = tgt - tgt.mean(axis=1, keepdims=True)
        den = np.sqrt(np.sum(pc**2, axis=1) * np.sum(tc**2, axis=1))
        corr = np.where(den > 0, np.sum(pc * tc, axis=1) / np.where(den > 0, den, 1.0), np.nan)
    win = np.arange(pred.shape[0]) if windows is None else np.asarray(windows)
    return TemporalScores(win, rel, corr)


@dataclass
class BiasVariance:
    bias_share: float
    variance_ratio: float  # target spatial variance / prediction spatial variance; NaN if degenerate
    degenerate_prediction: bool


def bias_variance_decomposition(predictions: np.ndarray, targets: np.ndarray, weights=None) -> BiasVariance:
    """Split the wMSE into the squared difference of spatial means and the rest.

    Arrays have shape (n_windows, n_sites); spatial statistics are weighted
    per window and then averaged over windows.
    """
    pred = np.asarray(predictions, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    if pred.shape != tgt.shape:
        raise ValueError("predictions and targets differ in shape")
    pred, tgt = np.atleast_2d(pred), np.atleast_2d(tgt)
    w = _weights(weights, pred.shape[-1])
    w = w / w.sum()
    mp, mt = pred @ w, tgt @ w
    vp = ((pred - mp[:, None]) ** 2) @ w
    vt = ((tgt - mt[:, None]) ** 2) @ w
    if np.mean(vt) == 0:
        raise ZeroDivisionError("targets have zero spatial variance")
    wmse = np.mean(((pred - tgt) ** 2) @ w)
    share = float(np.mean((mp - mt) ** 2) / wmse) if wmse > 0 else 0.0
    degenerate = bool(np.mean(vp) == 0)
    ratio = float("nan") if degenerate else float(np.mean(vt) / np.mean(vp))
    return BiasVariance(share, ratio, degenerate)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


@dataclass
class SpectraReport:
    degrees: np.ndarray
    spectra: dict[str, np.ndarray]  # quantity -> (nvar, n_degrees)
    relative_error: np.ndarray  # (nvar, n_degrees), NaN where target power vanishes

    def to_json(self) -> dict:
        return {"degrees": self.degrees.tolist(),
                "spectra": {k: [[_missing(v) for v in row] for row in arr] for k, arr in sorted(self.spectra.items())},
                "relative_error": [[_missing(v) for v in row] for row in self.relative_error]}


def _mean_spectra(values: np.ndarray, backend, T: int | None) -> np.ndarray:
    """Average power spectra of samples; values (n, nvar, *grid)."""
    if isinstance(backend, RingGrid):
        # values (n, nvar, N)
        return ring_power(values).mean(axis=0)
    if not isinstance(backend, GaussGrid):
        raise TypeError(f"unsupported spectral backend {backend!r}")
    T = backend.nlat - 1 if T is None else T
    out = np.zeros((values.shape[1], T + 1))
    for sample in values:
        spec = sh_analysis(GridField(backend, sample), T)
        out += np.stack([power_spectrum(spec, v) for v in range(spec.nvar)])
    return out / values.shape[0]


def error_spectra(predictions: np.ndarray, targets: np.ndarray, backend, inputs: np.ndarray | None = None,
                  T: int | None = None, rel_floor: float = 1e-14) -> SpectraReport:
    """Averaged spectra of inputs, targets, predictions and errors.

    Ring backend: arrays (n, nvar, N). Sphere backend: (n, nvar, nlat, nlon).
    The relative error spectrum divides the error by the target spectrum per
    degree and is missing where the target power is at most ``rel_floor``
    times its total.
    """
    pred = np.asarray(predictions, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    if pred.shape != tgt.shape:
        raise ValueError("predictions and targets differ in shape")
    spectra = {"target": _mean_spectra(tgt, backend, T), "prediction": _mean_spectra(pred, backend, T),
               "error": _mean_spectra(pred - tgt, backend, T)}
    if inputs is not None:
        spectra["input"] = _mean_spectra(np.asarray(inputs, dtype=float), backend, T)
    tp = spectra["target"]
    ok = tp > rel_floor * np.maximum(tp.sum(axis=-1, keepdims=True), np.finfo(float).tiny)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(ok, spectra["error"] / np.where(ok, tp, 1.0), np.nan)
    return SpectraReport(np.arange(tp.shape[-1]), spectra, rel)


# ---------------------------------------------------------------------------
# forecast verification
# ---------------------------------------------------------------------------


@dataclass
class ForecastScores:
    """Forecast errors by lead (in windows) and variable.

    ``sq_err`` holds per-case mean squared errors (n_cases, n_leads, nvar);
    ``cases`` are the launch window indices.
    """

    experiment: str
    verify_against: str
    leads: np.ndarray
    variables: tuple[str, ...]
    cases: np.ndarray
    sq_err: np.ndarray

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(self.sq_err.mean(axis=0))

    @property
    def case_rmse(self) -> np.ndarray:
        return np.sqrt(self.sq_err)


def forecast_errors(forecasts: np.ndarray, verification: np.ndarray, leads, experiment: str = "experiment",
                    verify_against: str = "truth", cases=None, variables=("x",), weights=None) -> ForecastScores:
    """Score precomputed forecasts.

    ``forecasts`` has shape (n_cases, n_leads, n_sites) and ``verification``
    the matching verifying states. Single-variable state vectors are scored
    as variable ``variables[0]``.
    """
    f = np.asarray(forecasts, dtype=float)
    v = np.asarray(verification, dtype=float)
    if f.shape != v.shape:
        raise MismatchError(f"forecasts {f.shape} and verification {v.shape} differ")
    w = _weights(weights, f.shape[-1])
    sq = (((f - v) ** 2) @ (w / w.sum()))[..., None]
    cases = np.arange(f.shape[0]) if cases is None else np.asarray(cases)
    return ForecastScores(experiment, verify_against, np.asarray(leads), tuple(variables), cases, sq)


def forecast_rmse(archive, model, leads, verify_against: str, truth_windows: np.ndarray | None = None,
                  experiment: str | None = None, case_stride: int = 1, first_case: int = 0) -> ForecastScores:
    """Forecasts from every analysis in an archive, scored per lead.

    The experiment's model (hybrid where the archive has parameters) is run
    from each analysis with the forcing recomputed every window. Verification
    is the nature run at window starts (``truth_windows``) or the archive's
    own analyses.
    """
    leads = np.asarray(sorted(set(int(x) for x in leads)))
    if leads.size == 0 or leads[0] < 1:
        raise ValueError("leads must be positive window counts")
    if verify_against == "truth":
        if truth_windows is None:
            raise ValueError("truth verification needs the nature run")
        ref = np.asarray(truth_windows)
    elif verify_against == "own-analysis":
        ref = archive.analyses
    else:
        raise ValueError(f"unknown verification {verify_against!r}")
    n = archive.n_windows
    if ref.shape[0] < n:
        raise MismatchError("verification shorter than the archive")
    max_lead = int(leads[-1])
    cases = np.arange(first_case, n - max_lead, case_stride)
    use_net = archive.params.shape[1] > 0
    hybrid = model if use_net else model.with_net(None)
    fc = np.empty((cases.size, leads.size, archive.analyses.shape[1]))
    for c, k in enumerate(cases):
        p = archive.params[k + 1] if use_net else None
        states = hybrid.forecast(archive.analyses[k], p, archive.window_time(k), max_lead)
        fc[c] = states[leads]
    ver = np.stack([ref[cases + lead] for lead in leads], axis=1)
    return forecast_errors(fc, ver, leads, experiment or archive.mode, verify_against, cases)


def normalized_change(exp: ForecastScores, ref: ForecastScores) -> np.ndarray:
    """Percentage change of RMSE relative to the reference, (n_leads, nvar)."""
    _check_paired(exp, ref)
    return 100.0 * (exp.rmse - ref.rmse) / ref.rmse


def _check_paired(a: ForecastScores, b: ForecastScores):
    if not (np.array_equal(a.cases, b.cases) and np.array_equal(a.leads, b.leads) and a.variables == b.variables):
        raise MismatchError(f"experiments {a.experiment!r} and {b.experiment!r} have different cases or leads")


# ---------------------------------------------------------------------------
# significance and scorecards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignificanceConfig:
    level: float = 0.95
    inflation: float = 1.25
    n_tests: int = 1

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("confidence level must be in (0, 1)")
        if self.inflation < 1.0:
            raise ValueError("inflation must be >= 1")
        if self.n_tests < 1:
            raise ValueError("n_tests must be >= 1")

    @property
    def alpha(self) -> float:
        return 1.0 - self.level

    @property
    def corrected_alpha(self) -> float:
        return sidak_alpha(self.alpha, self.n_tests)


def sidak_alpha(alpha: float, n_tests: int) -> float:
    return -math.expm1(math.log1p(-alpha) / n_tests)


@dataclass
class SignificanceResult:
    mean: float
    half_width: float
    alpha: float
    pvalue: float | None
    significant: bool | None
    n: int


def significance(differences, cfg: SignificanceConfig = SignificanceConfig()) -> SignificanceResult:
    """Two-sided paired t-test with an inflated confidence interval.

    The verdict is significant when the inflated interval
    mean +/- inflation * t_{1-a'/2} * s / sqrt(n) excludes zero, with a' the
    Sidak-corrected level. The reported p-value is that of t / inflation.
    """
    d = np.asarray(differences, dtype=float).ravel()
    alpha = cfg.corrected_alpha
    n = d.size
    if n < 2:
        raise ValueError("significance needs at least two paired samples")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return SignificanceResult(0.0, 0.0, alpha, 1.0, False, n)
        return SignificanceResult(mean, 0.0, alpha, None, None, n)
    se = sd / math.sqrt(n)
    tcrit = stats.t.ppf(1.0 - alpha / 2.0, n - 1)
    half = cfg.inflation * tcrit * se
    tstat = mean / se / cfg.inflation
    pvalue = float(2.0 * stats.t.sf(abs(tstat), n - 1))
    return SignificanceResult(mean, float(half), alpha, pvalue, bool(abs(mean) > half), n)


@dataclass
class ScorecardRow:
    experiment: str
    reference: str
    variable: str
    lead: int
    rmse_change_pct: float
    significant: bool | None
    pvalue: float | None


@dataclass
class Scorecard:
    rows: list[ScorecardRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SCORECARD_COLUMNS)
        for r in self.rows:
            change = _missing(r.rmse_change_pct)
            writer.writerow([r.experiment, r.reference, r.variable, r.lead,
                             "" if change is None else repr(change),
                             "" if r.significant is None else str(bool(r.significant)).lower(),
                             "" if r.pvalue is None else repr(float(r.pvalue))])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [{c: _missing(getattr(r, c)) if c not in ("experiment", "reference", "variable") else getattr(r, c)
                 for c in SCORECARD_COLUMNS} for r in self.rows]
        return json.dumps({"columns": list(SCORECARD_COLUMNS), "rows": rows}, sort_keys=True, indent=1)

    def significant_cells(self) -> list[ScorecardRow]:
        return [r for r in self.rows if r.significant]


def scorecard(experiments: dict[str, ForecastScores], reference: str,
              cfg: SignificanceConfig = SignificanceConfig()) -> Scorecard:
    """Normalized RMSE change of each experiment against ``reference``.

    The paired samples of each (variable, lead) cell are per-case RMSE
    differences. Rows are ordered by experiment id, variable and lead.
    """
    if reference not in experiments:
        raise KeyError(f"reference {reference!r} not among experiments")
    ref = experiments[reference]
    card = Scorecard()
    for name in sorted(experiments):
        exp = experiments[name]
        change = normalized_change(exp, ref)
        diff = exp.case_rmse - ref.case_rmse
        for v, var in enumerate(exp.variables):
            for j, lead in enumerate(exp.leads):
                try:
                    sig = significance(diff[:, j, v], cfg)
                    flag, pval = sig.significant, sig.pvalue
                except ValueError:
                    flag, pval = None, None
                card.rows.append(ScorecardRow(name, reference, var, int(lead), float(change[j, v]), flag, pval))
    return card


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    kind: str
    points: list
    reports: list  # one entry per point: report object or None on failure
    errors: list  # one entry per point: error message or None

    @property
    def n_failed(self) -> int:
        return sum(e is not None for e in self.errors)


def _run_point(run_point, point):
    try:
        return run_point(point), None
    except Exception as exc:  # noqa: BLE001  (a failing member must not stop the sweep)
        log.warning("sweep point %r failed: %s", point, exc)
        return None, f"{type(exc).__name__}: {exc}"


def sweep(kind: str, grid, run_point, jobs: int = 1) -> SweepResult:
    """Run ``run_point`` at every grid point and collect the reports.

    Failures are recorded per point and do not abort the sweep. With
    ``jobs > 1`` points run in worker processes (``run_point`` must then be
    picklable); results keep grid order either way.
    """
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}")
    points = list(grid)
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_point, [run_point] * len(points), points))
    else:
        results = [_run_point(run_point, p) for p in points]
    return SweepResult(kind, points, [r for r, _ in results], [e for _, e in results])
