"""Command-line entry point: ``hybrid-da <subcommand> --config FILE``.

Outputs go to ``--out``, else the config's ``[output] dir``, else
``$HDA_DATA_DIR``, else ``./hda_output``. Later stages read the files
written by earlier ones from the same directory.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import diag
from . import net as nn
from . import pipeline as pl
from .assim import CycleArchive, CyclingError
from .config import ConfigError, ExperimentConfig, load_config
from .dyn import BlowUpError
from .fileio import MalformedFileError

log = logging.getLogger("hybrid_da")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

FILES = {
    "truth": "truth.hda",
    "train": "cycles_train_sc.hda",
    "dataset": "dataset_{mode}.hda",
    "net": "net_{mode}.fnn",
    "offline_csv": "offline_scores.csv",
    "offline_json": "offline_report.json",
    "eval": "cycles_eval_{name}.hda",
    "evaluation": "evaluation.json",
    "scorecard_csv": "scorecard_{verify}.csv",
    "scorecard_json": "scorecard_{verify}.json",
    "sweep": "sweep_{kind}.json",
    "spectra": "spectra.json",
}


class Context:
    def __init__(self, cfg: ExperimentConfig, out: Path, jobs: int):
        self.cfg = cfg
        self.out = out
        self.jobs = jobs
        out.mkdir(parents=True, exist_ok=True)

    def path(self, key: str, **fmt) -> Path:
        return self.out / FILES[key].format(**fmt)

    def require(self, key: str, hint: str, **fmt) -> Path:
        path = self.path(key, **fmt)
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `{hint}` first")
        return path

    def truth(self) -> pl.TruthArchive:
        return pl.TruthArchive.load(self.require("truth", "gen-truth"))

    def train_archive(self) -> CycleArchive:
        return CycleArchive.load(self.require("train", "run-da --mode sc"))

    def net(self, mode: str | None = None) -> nn.NetParams:
        mode = self.cfg.dataset.mode if mode is None else mode
        if mode == self.cfg.dataset.mode and self.cfg.online.pretrained:
            return nn.load_params(self.cfg.online.pretrained)
        return nn.load_params(self.require("net", f"train-offline --mode {mode}", mode=_slug(mode)))

    def eval_archives(self) -> dict[str, CycleArchive]:
        found = {}
        for name in pl.EVAL_EXPERIMENTS:
            path = self.path("eval", name=_slug(name))
            if path.exists():
                found[name] = CycleArchive.load(path)
        if not found:
            raise FileNotFoundError(f"no evaluation archives in {self.out}; run run-da/run-online first")
        return found


def _slug(name: str) -> str:
    return name.replace("+", "_").replace("-", "_")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_truth(ctx: Context, args) -> None:
    truth = pl.gen_truth(ctx.cfg)
    truth.save(ctx.path("truth"))
    log.info("nature run: %d windows -> %s", truth.n_windows, ctx.path("truth"))


def cmd_run_da(ctx: Context, args) -> None:
    truth = ctx.truth()
    if args.mode == "sc" and args.period == "train":
        archive = pl.run_training_period(ctx.cfg, truth)
        archive.save(ctx.path("train"))
        log.info("training-period cycling -> %s", ctx.path("train"))
        return
    if args.mode == "nn4dvar":
        raise ConfigError("use run-online for nn4dvar cycling")
    if args.period == "train":
        raise ConfigError(f"mode {args.mode} runs on the evaluation period only")
    train = ctx.train_archive()
    net = ctx.net() if args.mode == "sc+fixed-net" else None
    archive = pl.run_evaluation_period(ctx.cfg, truth, train, args.mode, net, name=args.mode)
    archive.save(ctx.path("eval", name=_slug(args.mode)))
    log.info("%s evaluation cycling -> %s", args.mode, ctx.path("eval", name=_slug(args.mode)))


def _modes(arg: str | None, cfg: ExperimentConfig) -> list[str]:
    if arg == "all":
        return list(ds.PAIR_MODES)
    return [cfg.dataset.mode if arg is None else arg]


def cmd_build_dataset(ctx: Context, args) -> None:
    train = ctx.train_archive()
    for mode in _modes(args.mode, ctx.cfg):
        pairs, spec = pl.build_dataset(ctx.cfg, train, mode)
        path = ctx.path("dataset", mode=_slug(mode))
        ds.save_pairs(path, pairs, spec, ctx.cfg.dataset.windows_per_day, pl.provenance(ctx.cfg, kind="dataset"))
        log.info("%s pairs: %d -> %s", mode, len(pairs), path)


def _load_dataset(ctx: Context, mode: str):
    pairs, spec, _ = ds.load_pairs(ctx.require("dataset", f"build-dataset --mode {mode}", mode=_slug(mode)))
    if spec is None:
        spec = ds.default_split(pairs, ctx.cfg.dataset.train_fraction, ctx.cfg.dataset.windows_per_day)
    return pairs, spec


def cmd_train_offline(ctx: Context, args) -> None:
    for mode in _modes(args.mode, ctx.cfg):
        pairs, spec = _load_dataset(ctx, mode)
        res = pl.train_offline(ctx.cfg, pairs, spec)
        nn.save_params(ctx.path("net", mode=_slug(mode)), res.net)
        log.info("%s: best epoch %d, test relative wMSE %.4f", mode, res.history.best_epoch, res.scores["test"])


def cmd_eval_offline(ctx: Context, args) -> None:
    results, datasets, report = {}, {}, {}
    for mode in ds.PAIR_MODES:
        path = ctx.path("dataset", mode=_slug(mode))
        net_path = ctx.path("net", mode=_slug(mode))
        if not (path.exists() and net_path.exists()):
            continue
        pairs, spec = _load_dataset(ctx, mode)
        net = nn.load_params(net_path)
        w = pl.ring_weights(ctx.cfg)
        splits = ds.split_pairs(pairs, spec, ctx.cfg.dataset.windows_per_day)
        scores = {k: ds.relative_wmse(net, v, w) for k, v in splits.items()}
        results[mode] = pl.OfflineResult(net, nn.TrainHistory(), scores)
        datasets[mode] = (pairs, spec)
        report[mode] = dict(pl.offline_diagnostics(ctx.cfg, net, pairs, spec), scores=scores)
    if not results:
        raise FileNotFoundError("no trained networks found; run build-dataset and train-offline first")
    ctx.path("offline_csv").write_text(pl.offline_table(ctx.cfg, results, datasets))
    pl.write_json(ctx.path("offline_json"), report)
    sys.stdout.write(ctx.path("offline_csv").read_text())


def cmd_run_online(ctx: Context, args) -> None:
    truth = ctx.truth()
    train = ctx.train_archive()
    pretrained = ctx.net() if args.init == "pretrained" else None
    n = args.windows if args.windows is not None else None
    archive = pl.run_online(ctx.cfg, truth, train, args.init, pretrained, n)
    name = f"nn4dvar-{args.init}"
    archive.save(ctx.path("eval", name=_slug(name)))
    log.info("%s -> %s", name, ctx.path("eval", name=_slug(name)))


def _nets_for(ctx: Context, archives: dict[str, CycleArchive]) -> dict:
    nets = {}
    for name, arc in archives.items():
        if arc.params.shape[1]:
            template = ctx.net() if name != "nn4dvar-scratch" else pl.scratch_params(ctx.cfg, ctx.train_archive())
            nets[name] = template
    return nets


def cmd_evaluate(ctx: Context, args) -> None:
    truth = ctx.truth()
    archives = ctx.eval_archives()
    analyses = pl.compare_analyses(ctx.cfg, archives, truth)
    scores = pl.forecast_scores(ctx.cfg, archives, truth, _nets_for(ctx, archives))
    reference = args.reference if args.reference in archives else sorted(archives)[0]
    payload = {"analysis": analyses, "forecast": pl.forecast_report(scores, reference), "reference": reference}
    pl.write_json(ctx.path("evaluation"), payload)
    for name, value in analyses["mean_rmse"].items():
        print(f"{name}: final-period analysis RMSE {value:.5f}")


def cmd_scorecard(ctx: Context, args) -> None:
    truth = ctx.truth()
    archives = ctx.eval_archives()
    if args.reference not in archives:
        raise ConfigError(f"reference {args.reference!r} has no evaluation archive")
    scores = pl.forecast_scores(ctx.cfg, archives, truth, _nets_for(ctx, archives))
    for verify, by_exp in scores.items():
        card = diag.scorecard(by_exp, args.reference, ctx.cfg.significance_config())
        slug = _slug(verify)
        ctx.path("scorecard_csv", verify=slug).write_text(card.to_csv())
        ctx.path("scorecard_json", verify=slug).write_text(card.to_json() + "\n")
        log.info("scorecard against %s: %d significant cells", verify, len(card.significant_cells()))


def cmd_sweep(ctx: Context, args) -> None:
    cfg = ctx.cfg
    sw = cfg.sweep
    if args.kind == "dataset-size":
        pairs, spec = _load_dataset(ctx, cfg.dataset.mode)
        runner = pl.size_sweep_runner(cfg, pairs, spec)
        grid = [pl.SizePoint(f, sw.strategy) for f in sw.sizes]
    elif args.kind == "resolution":
        runner = pl.resolution_sweep_runner(cfg, ctx.train_archive())
        grid = list(sw.truncations)
    else:
        runner = pl.p_sweep_runner(cfg, ctx.truth(), ctx.train_archive(), ctx.net())
        grid = list(sw.p_values)
    # closures are not picklable, so worker processes are only used by library callers
    result = diag.sweep(args.kind, grid, runner, jobs=1)
    pl.write_json(ctx.path("sweep", kind=_slug(args.kind)), pl.sweep_report(result))
    log.info("%s sweep: %d points, %d failed", args.kind, len(grid), result.n_failed)


def cmd_spectra(ctx: Context, args) -> None:
    report = {}
    for mode in ds.PAIR_MODES:
        if ctx.path("net", mode=_slug(mode)).exists() and ctx.path("dataset", mode=_slug(mode)).exists():
            pairs, spec = _load_dataset(ctx, mode)
            report[mode] = pl.offline_diagnostics(ctx.cfg, ctx.net(mode), pairs, spec)["spectra"]
    if not report:
        raise FileNotFoundError("no trained networks found; run train-offline first")
    pl.write_json(ctx.path("spectra"), report)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment TOML file")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps")
    common.add_argument("--seed", type=int, default=None, help="override the base seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hybrid-da", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-truth", parents=[common], help="nature run and observations")
    p = sub.add_parser("run-da", parents=[common], help="variational cycling")
    p.add_argument("--mode", choices=("sc", "sc+fixed-net", "nn4dvar"), default="sc")
    p.add_argument("--period", choices=("train", "eval"), default=None)
    p = sub.add_parser("build-dataset", parents=[common], help="increment pairs from the training cycles")
    p.add_argument("--mode", choices=(*ds.PAIR_MODES, "all"), default=None)
    p = sub.add_parser("train-offline", parents=[common], help="offline network training")
    p.add_argument("--mode", choices=(*ds.PAIR_MODES, "all"), default=None)
    sub.add_parser("eval-offline", parents=[common], help="offline scores table")
    p = sub.add_parser("run-online", parents=[common], help="NN 4D-Var cycling")
    p.add_argument("--init", choices=("pretrained", "scratch"), default="pretrained")
    p.add_argument("--windows", type=int, default=None, help="number of evaluation windows")
    p = sub.add_parser("evaluate", parents=[common], help="analysis and forecast verification")
    p.add_argument("--reference", default="sc")
    p = sub.add_parser("scorecard", parents=[common], help="significance-tested scorecards")
    p.add_argument("--reference", default="sc")
    p = sub.add_parser("sweep", parents=[common], help="sensitivity sweeps")
    p.add_argument("--kind", choices=diag.SWEEP_KINDS, required=True)
    sub.add_parser("spectra", parents=[common], help="power spectra of offline predictions")
    return parser


COMMANDS = {
    "gen-truth": cmd_gen_truth, "run-da": cmd_run_da, "build-dataset": cmd_build_dataset,
    "train-offline": cmd_train_offline, "eval-offline": cmd_eval_offline, "run-online": cmd_run_online,
    "evaluate": cmd_evaluate, "scorecard": cmd_scorecard, "sweep": cmd_sweep, "spectra": cmd_spectra,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "period", "unset") is None:
        args.period = "train" if args.mode == "sc" else "eval"
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        ctx = Context(cfg, cfg.output_dir(args.out), args.jobs)
        COMMANDS[args.command](ctx, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CyclingError, BlowUpError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, MalformedFileError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
