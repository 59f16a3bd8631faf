"""Offline datasets built from cycling archives.

Pairs are stored window-major: ``inputs`` has shape (n_pairs, n_sites,
n_in) and ``targets`` (n_pairs, n_sites, n_out). The first
``n_state`` input channels are physical state values; the remaining ones
are extra predictors (site and time sines/cosines) that are never
normalized.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import net as nn
from .assim import CycleArchive
from .dyn import HybridModel
from .fileio import read_container, write_container
from .sphere import ring_truncate_values

PAIR_MODES = ("prediction", "post-processing")
WINDOWS_PER_DAY = 2
PATTERN = (("discard", 4), ("valid", 8), ("discard", 4), ("test", 8))
LABELS = ("train", "valid", "test", "discard")
SIZE_STRATEGIES = ("old-and-new", "old", "new")


class EmptyArchiveError(ValueError):
    pass


class InsufficientDaysError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


@dataclass
class IncrementPairs:
    mode: str
    inputs: np.ndarray
    targets: np.ndarray
    windows: np.ndarray
    n_state: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in PAIR_MODES:
            raise ValueError(f"unknown pairing mode {self.mode!r}")
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.windows = np.asarray(self.windows, dtype=np.int64)
        if self.inputs.ndim != 3 or self.targets.ndim != 3:
            raise ValueError("inputs and targets must be (pairs, sites, channels)")
        if self.inputs.shape[:2] != self.targets.shape[:2] or self.windows.shape != (self.inputs.shape[0],):
            raise ValueError("inputs, targets and windows disagree on pair or site count")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("pairs contain non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_sites(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "IncrementPairs":
        index = np.asarray(index)
        return IncrementPairs(self.mode, self.inputs[index], self.targets[index], self.windows[index],
                              self.n_state, dict(self.meta))

    def days(self, windows_per_day: int = WINDOWS_PER_DAY) -> np.ndarray:
        return self.windows // windows_per_day

    def truncated(self, K: int) -> "IncrementPairs":
        """Project state inputs and targets onto ring wavenumbers <= K."""
        inputs = self.inputs.copy()
        state = np.moveaxis(inputs[:, :, : self.n_state], 1, -1)
        inputs[:, :, : self.n_state] = np.moveaxis(ring_truncate_values(state, K), -1, 1)
        targets = np.moveaxis(ring_truncate_values(np.moveaxis(self.targets, 1, -1), K), -1, 1)
        meta = dict(self.meta, truncation=int(K))
        return IncrementPairs(self.mode, inputs, targets, self.windows, self.n_state, meta)


def make_pairs(archive: CycleArchive, mode: str, model: HybridModel) -> IncrementPairs:
    """Predictor/target pairs from an archive.

    prediction: x^a(t) -> x^a(t+1) - x^b(t+1); post-processing:
    x^b(t) -> x^a(t) - x^b(t). Predictors follow ``model.column_inputs`` at
    the time of the input window; the pair is labelled by its target window.
    """
    if mode not in PAIR_MODES:
        raise ValueError(f"unknown pairing mode {mode!r}")
    n = archive.n_windows
    if n == 0 or (mode == "prediction" and n < 2):
        raise EmptyArchiveError(f"archive with {n} windows yields no {mode} pairs")
    inc = archive.increments
    if mode == "prediction":
        src, src_idx, tgt_idx = archive.analyses[:-1], np.arange(n - 1), np.arange(1, n)
    else:
        src, src_idx, tgt_idx = archive.backgrounds, np.arange(n), np.arange(n)
    inputs = np.stack([model.column_inputs(x, archive.window_time(k)) for x, k in zip(src, src_idx)])
    targets = inc[tgt_idx][:, :, None]
    return IncrementPairs(mode, inputs, targets, tgt_idx, model.n_state_channels,
                          {"source_mode": archive.mode})


# ---------------------------------------------------------------------------
# partition and size strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    n_days: int
    train_days: int
    labels: tuple[str, ...]

    def days_with(self, label: str) -> np.ndarray:
        return np.array([d for d, lab in enumerate(self.labels) if lab == label], dtype=np.int64)

    def count(self, label: str) -> int:
        return sum(1 for lab in self.labels if lab == label)

    @property
    def n_batches(self) -> int:
        """Number of validation segments (each paired with a test segment when complete)."""
        runs = 0
        prev = None
        for lab in self.labels:
            if lab == "valid" and prev != "valid":
                runs += 1
            prev = lab
        return runs

    def label_of(self, days: np.ndarray) -> np.ndarray:
        return np.asarray(self.labels, dtype=object)[np.asarray(days)]


def partition(n_days: int, train_days: int) -> SplitSpec:
    """Leading training block, then the discard/valid/discard/test pattern.

    The pattern repeats until the data ends; a trailing partial pattern is
    filled in order and cut off.
    """
    if train_days < 1 or n_days <= train_days:
        raise InsufficientDaysError(f"need more than {train_days} days, got {n_days}")
    labels = ["train"] * train_days
    while len(labels) < n_days:
        for lab, length in PATTERN:
            labels += [lab] * length
    return SplitSpec(n_days, train_days, tuple(labels[:n_days]))


def select_training_days(train_days: np.ndarray, fraction: float, strategy: str) -> np.ndarray:
    """Subset of the training days used by the dataset-size strategies."""
    if strategy not in SIZE_STRATEGIES:
        raise ValueError(f"unknown size strategy {strategy!r}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    days = np.asarray(train_days)
    k = max(1, int(round(fraction * days.size)))
    if strategy == "old":
        return days[:k]
    if strategy == "new":
        return days[days.size - k:]
    pos = np.floor(np.arange(k) * days.size / k).astype(int)
    return days[pos]


def split_pairs(pairs: IncrementPairs, spec: SplitSpec, windows_per_day: int = WINDOWS_PER_DAY,
                train_subset: np.ndarray | None = None) -> dict[str, IncrementPairs]:
    days = pairs.days(windows_per_day)
    if days.size and days.max() >= spec.n_days:
        raise InsufficientDaysError(f"pairs reach day {days.max()} but the split covers {spec.n_days}")
    labels = spec.label_of(days)
    out = {lab: pairs.subset(np.flatnonzero(labels == lab)) for lab in ("train", "valid", "test")}
    if train_subset is not None:
        keep = np.isin(out["train"].days(windows_per_day), train_subset)
        out["train"] = out["train"].subset(np.flatnonzero(keep))
    return out


def default_split(pairs: IncrementPairs, train_fraction: float = 0.8,
                  windows_per_day: int = WINDOWS_PER_DAY) -> SplitSpec:
    """Partition covering the days spanned by ``pairs``."""
    n_days = int(pairs.days(windows_per_day).max()) + 1
    return partition(n_days, max(1, int(round(train_fraction * n_days))))


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------


def fit_norm_stats(train: IncrementPairs) -> nn.NormStats:
    if len(train) == 0:
        raise ValueError("empty training split")
    x = train.inputs[:, :, : train.n_state].reshape(-1, train.n_state)
    y = train.targets.reshape(-1, train.targets.shape[-1])
    in_std, out_std = x.std(axis=0), y.std(axis=0)
    if np.any(in_std == 0) or np.any(out_std == 0):
        raise ZeroVarianceError("a training channel has zero variance")
    return nn.NormStats(x.mean(axis=0), in_std, y.mean(axis=0), out_std)


def normalized_arrays(pairs: IncrementPairs, stats: nn.NormStats, weights: np.ndarray):
    """Flattened (z_in, z_out, per-sample weight) for :func:`net.fit`."""
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.size != pairs.n_sites:
        raise ValueError(f"{weights.size} weights for {pairs.n_sites} sites")
    z_in = nn.normalize(pairs.inputs, stats).reshape(-1, pairs.inputs.shape[-1])
    z_out = ((pairs.targets - stats.out_mean) / stats.out_std).reshape(-1, pairs.targets.shape[-1])
    return z_in, z_out, np.tile(weights, len(pairs))


def wmse_loss(params: nn.NetParams, pairs: IncrementPairs, weights: np.ndarray) -> float:
    """sum_t sum_i w_i ||z^o - net(z^i)||^2 in normalized space."""
    z_in, z_out, w = normalized_arrays(pairs, params.norm, weights)
    resid = z_out - nn.forward(params, z_in)
    return float(np.sum(w * np.sum(resid**2, axis=-1)))


def wmse_loss_grad(params: nn.NetParams, pairs: IncrementPairs, weights: np.ndarray) -> np.ndarray:
    z_in, z_out, w = normalized_arrays(pairs, params.norm, weights)
    resid = z_out - nn.forward(params, z_in)
    gp, _ = nn.vjp(params, z_in, -2.0 * w[:, None] * resid)
    return gp


def predict_pairs(params: nn.NetParams, pairs: IncrementPairs) -> np.ndarray:
    flat = pairs.inputs.reshape(-1, pairs.inputs.shape[-1])
    return nn.predict(params, flat).reshape(pairs.targets.shape)


def relative_wmse_of(predictions: np.ndarray, targets: np.ndarray, weights: np.ndarray, var_subset=None) -> float:
    """sum w ||pred - target||^2 / sum w ||target||^2 over pairs and sites."""
    w = np.asarray(weights, dtype=float).ravel()[None, :, None]
    sel = slice(None) if var_subset is None else list(np.atleast_1d(var_subset))
    err = np.sum(w * (predictions - targets)[..., sel] ** 2)
    ref = np.sum(w * targets[..., sel] ** 2)
    if ref == 0:
        raise ZeroDivisionError("targets have zero weighted energy")
    return float(err / ref)


def relative_wmse(params: nn.NetParams | None, pairs: IncrementPairs, weights: np.ndarray, var_subset=None) -> float:
    """Relative wMSE in physical units; ``params=None`` is the zero predictor."""
    pred = np.zeros_like(pairs.targets) if params is None else predict_pairs(params, pairs)
    return relative_wmse_of(pred, pairs.targets, weights, var_subset)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_pairs(path, pairs: IncrementPairs, spec: SplitSpec | None = None,
               windows_per_day: int = WINDOWS_PER_DAY, provenance: dict | None = None) -> None:
    meta = {"mode": pairs.mode, "n_state": pairs.n_state, "windows_per_day": windows_per_day,
            "pairs_meta": pairs.meta, "provenance": dict(provenance or {})}
    arrays = {"inputs": pairs.inputs, "targets": pairs.targets, "windows": pairs.windows}
    if spec is not None:
        meta["split"] = {"n_days": spec.n_days, "train_days": spec.train_days}
        codes = {lab: i for i, lab in enumerate(LABELS)}
        arrays["split_labels"] = np.array([codes[lab] for lab in spec.labels[: int(pairs.days(windows_per_day).max()) + 1]]
                                          if len(pairs) else [], dtype=np.int64)
    write_container(path, meta, arrays)


def load_pairs(path) -> tuple[IncrementPairs, SplitSpec | None, dict]:
    meta, arrays = read_container(path)
    pairs = IncrementPairs(meta["mode"], arrays["inputs"], arrays["targets"], arrays["windows"],
                           int(meta["n_state"]), meta.get("pairs_meta", {}))
    spec = None
    if "split" in meta:
        spec = partition(meta["split"]["n_days"], meta["split"]["train_days"])
    return pairs, spec, meta


def archive_digest(archive: CycleArchive) -> str:
    h = hashlib.sha256()
    for arr in (archive.backgrounds, archive.analyses):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]
