"""Command-line front end: synthetic data, training, evaluation and the
three-regime comparison, all driven by one INI config and a master seed.

Seeds for the individual components are derived from the master seed by the
fixed offsets in ``SEED_OFFSETS``.  All training regimes share one seed, so
within a fold they start from the same initial weights and see patches in
the same order.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import base64
import configparser
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import persist
from .detector import DetectorConfig, ModelParameters, param_shapes
from .evaluation import EvalConfig, MetricsReport, compare_methods, evaluate_fold, significance_marker
from .lossmath import ClassPrior, PriorProvenance
from .synthcells import RNG_ALGORITHM, SynthConfig, build_dataset, load_dataset, save_dataset
from .training import DEFAULT_PRIOR_GRID, Regime, TrainConfig, TrainHistory, best_candidate, grid_search, train

log = logging.getLogger("pudet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SEED_OFFSETS = {"synth": 0, "train": 1}
CHECKPOINT_VERSION = 1
CONFIG_ECHO_NAME = "experiment.ini"
METRICS_HEADER = ("fold", "regime", "prior", "tp", "fp", "fn", "recall", "precision")
HISTORY_HEADER = ("epoch", "loss", "loc", "cls", "clamp_rate", "validation_recall", "skipped_batches")

REGIME_FLAGS = {"pn": Regime.PN_BASELINE, "biased-pu": Regime.BIASED_PU, "pu": Regime.PROPOSED_PU}

# TrainConfig fields stored in the [train.<regime>] sections; the seed comes
# from the master seed and the detector has its own section
_TRAIN_KEYS = ("prior", "learning_rate", "epochs", "batch_images", "tau_pos", "adam_beta1",
               "adam_beta2", "adam_epsilon", "patch_size", "patch_overlap", "track_validation")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = SynthConfig()
    detector: DetectorConfig = DetectorConfig()
    train: dict = field(default_factory=lambda: {r: TrainConfig(regime=r) for r in Regime})
    eval: EvalConfig = EvalConfig()
    prior_grid: tuple[float, ...] = DEFAULT_PRIOR_GRID
    n_images: int = 60
    n_folds: int = 5
    output_dir: str = "runs"
    master_seed: int = 0

    def __post_init__(self):
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")
        if any(not 0.0 < p < 1.0 for p in self.prior_grid):
            raise ConfigError("prior_grid entries must lie in (0, 1)")
        if set(self.train) != set(Regime):
            raise ConfigError("need one training section per regime")
        # component seeds are always derived, never free-standing
        object.__setattr__(self, "synth", replace(self.synth, seed=self.master_seed + SEED_OFFSETS["synth"]))
        object.__setattr__(self, "train", {
            r: replace(self.train[r], regime=r, detector=self.detector,
                       seed=self.master_seed + SEED_OFFSETS["train"])
            for r in Regime})

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, master_seed=seed)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse_like(default, text: str):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.split(","))
    return text.strip()


def _read_section(parser: configparser.ConfigParser, name: str, default, skip=("seed",)):
    """Overlay a section on a dataclass default; unknown keys are errors."""
    if not parser.has_section(name):
        return default
    known = {f.name for f in fields(default)} - set(skip)
    values = {}
    for key, text in parser.items(name):
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            values[key] = _parse_like(getattr(default, key), text)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    return replace(default, **values)


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {
        "master_seed": _fmt(cfg.master_seed), "n_images": _fmt(cfg.n_images),
        "n_folds": _fmt(cfg.n_folds), "output_dir": cfg.output_dir,
        "prior_grid": _fmt(tuple(cfg.prior_grid)),
    }
    parser["synth"] = {f.name: _fmt(getattr(cfg.synth, f.name)) for f in fields(cfg.synth) if f.name != "seed"}
    parser["detector"] = {f.name: _fmt(getattr(cfg.detector, f.name)) for f in fields(cfg.detector)}
    for regime in Regime:
        tc = cfg.train[regime]
        section = {k: _fmt(getattr(tc, k)) for k in _TRAIN_KEYS if k != "prior"}
        section["prior"] = _fmt(tc.prior.value)
        parser[f"train.{regime.value}"] = section
    parser["eval"] = {f.name: _fmt(getattr(cfg.eval, f.name)) for f in fields(cfg.eval)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    allowed = {"experiment", "synth", "detector", "eval", "train"} | {f"train.{r.value}" for r in Regime}
    for name in parser.sections():
        if name not in allowed:
            raise ConfigError(f"unknown section [{name}]")
    try:
        exp = dict(parser.items("experiment")) if parser.has_section("experiment") else {}
        unknown = set(exp) - {"master_seed", "n_images", "n_folds", "output_dir", "prior_grid"}
        if unknown:
            raise ConfigError(f"[experiment] unknown keys {sorted(unknown)}")
        synth = _read_section(parser, "synth", SynthConfig())
        detector = _read_section(parser, "detector", DetectorConfig(), skip=())
        eval_cfg = _read_section(parser, "eval", EvalConfig(), skip=())
        trains = {}
        for regime in Regime:
            base = TrainConfig(regime=regime)
            for name in ("train", f"train.{regime.value}"):
                if parser.has_section(name):
                    items = dict(parser.items(name))
                    unknown = set(items) - set(_TRAIN_KEYS)
                    if unknown:
                        raise ConfigError(f"[{name}] unknown keys {sorted(unknown)}")
                    values = {k: _parse_like(getattr(base, k), v) for k, v in items.items() if k != "prior"}
                    if "prior" in items:
                        values["prior"] = ClassPrior(float(items["prior"]), PriorProvenance.USER_SET)
                    base = replace(base, **values)
            trains[regime] = base
        grid = exp.get("prior_grid")
        return ExperimentConfig(
            synth=synth, detector=detector, train=trains, eval=eval_cfg,
            prior_grid=tuple(float(v) for v in grid.split(",")) if grid else DEFAULT_PRIOR_GRID,
            n_images=int(exp.get("n_images", 60)), n_folds=int(exp.get("n_folds", 5)),
            output_dir=exp.get("output_dir", "runs"), master_seed=int(exp.get("master_seed", 0)),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParameters
    detector: DetectorConfig
    regime: Regime
    prior: ClassPrior | None
    seed: int


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """JSON document; each parameter array is little-endian float64, base64-encoded."""
    arrays = []
    for name, arr in ckpt.params.as_dict().items():
        arrays.append({"name": name, "shape": list(arr.shape),
                       "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")})
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "hyperparameters": {"feature_dim": ckpt.params.feature_dim, "hidden_dim": ckpt.params.hidden_dim,
                            "window": ckpt.detector.window, "stride": ckpt.detector.stride,
                            "anchor_size": ckpt.detector.anchor_size},
        "dtype": "float64",
        "byte_order": "little",
        "arrays": arrays,
        "regime": ckpt.regime.value,
        "prior": None if ckpt.prior is None else {"value": ckpt.prior.value,
                                                  "provenance": ckpt.prior.provenance.value},
        "seed": ckpt.seed,
        "rng": RNG_ALGORITHM,
    }
    return (json.dumps(doc, indent=1) + "\n").encode("ascii")


def parse_checkpoint(data: bytes) -> Checkpoint:
    try:
        doc = json.loads(data)
        if doc["format_version"] != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {doc['format_version']}")
        if doc["dtype"] != "float64" or doc["byte_order"] != "little":
            raise DataError("checkpoint arrays must be little-endian float64")
        hp = doc["hyperparameters"]
        detector = DetectorConfig(window=hp["window"], stride=hp["stride"],
                                  anchor_size=hp["anchor_size"], hidden_dim=hp["hidden_dim"])
        if hp["feature_dim"] != detector.feature_dim:
            raise DataError(f"feature_dim {hp['feature_dim']} does not match window {detector.window}")
        expected = param_shapes(hp["hidden_dim"], hp["feature_dim"])
        arrays = {}
        for entry in doc["arrays"]:
            shape = tuple(entry["shape"])
            if expected.get(entry["name"]) != shape:
                raise DataError(f"array {entry['name']!r} has unexpected shape {shape}")
            raw = base64.b64decode(entry["data"], validate=True)
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if set(arrays) != set(expected):
            raise DataError("checkpoint is missing parameter arrays")
        prior = doc["prior"]
        return Checkpoint(ModelParameters(**arrays), detector, Regime(doc["regime"]),
                          None if prior is None else ClassPrior(prior["value"], PriorProvenance(prior["provenance"])),
                          int(doc["seed"]))
    except DataError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    persist.atomic_write_bytes(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data)


# --- text outputs -------------------------------------------------------------

def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def history_csv(history: TrainHistory) -> str:
    rows = [(i, r.loss.total, r.loss.loc, r.loss.cls, float(r.clamp_rate), r.validation_recall, r.skipped_batches)
            for i, r in enumerate(history.epochs)]
    return _csv(rows, HISTORY_HEADER)


def metrics_row(fold: int, regime: Regime | str, prior: float | None, ev) -> tuple:
    return (fold, Regime(regime).value, prior, ev.tp, ev.fp, ev.fn, ev.recall, ev.precision)


def report_text(rows: Sequence[tuple], report: MetricsReport, reference: str) -> str:
    """Per-fold table, mean/std rows and paired t-test rows as three CSV blocks."""
    parts = ["# per-fold results\n", _csv(rows, METRICS_HEADER), "\n# aggregate over folds (sample std)\n"]
    agg = []
    for regime in report.per_fold:
        agg.append(("mean", regime, report.mean_recall[regime], report.mean_precision[regime]))
    for regime in report.per_fold:
        agg.append(("std", regime, report.std_recall[regime], report.std_precision[regime]))
    parts.append(_csv(agg, ("statistic", "regime", "recall", "precision")))
    parts.append(f"\n# paired two-sided t-test against {reference} (* p<0.05, ** p<0.01)\n")
    tests = [(ref, other, metric, t.statistic, t.p_value, significance_marker(t.p_value), t.degenerate)
             for (ref, other, metric), t in report.paired_t_p_values.items()]
    parts.append(_csv(tests, ("reference", "competitor", "metric", "t", "p_value", "marker", "degenerate")))
    return "".join(parts)


def curves_csv(runs) -> str:
    rows = []
    for run in runs:
        for i, r in enumerate(run.history.epochs):
            rows.append((run.regime, run.fold, run.prior, i, r.loss.total, r.loss.loc, r.loss.cls,
                         float(r.clamp_rate), r.validation_recall))
    return _csv(rows, ("regime", "fold", "prior", "epoch", "loss", "loc", "cls", "clamp_rate", "validation_recall"))


# --- commands -----------------------------------------------------------------

def _open_dataset(path: str):
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc


def _check_fold(ds, fold: int) -> None:
    if not 0 <= fold < ds.n_folds:
        raise ConfigError(f"fold {fold} out of range; dataset has {ds.n_folds} folds")


def _train_config(cfg: ExperimentConfig, regime: Regime, args) -> TrainConfig:
    tc = cfg.train[regime]
    if args.prior is not None:
        tc = replace(tc, prior=ClassPrior(args.prior, PriorProvenance.USER_SET))
    return tc


def cmd_synth(cfg: ExperimentConfig, args) -> None:
    out = Path(args.out or cfg.output_dir)
    ds = build_dataset(cfg.synth, cfg.n_images, cfg.n_folds, cfg.detector, cfg.train[Regime.PROPOSED_PU].tau_pos)
    save_dataset(ds, out)
    persist.atomic_write_text(out / CONFIG_ECHO_NAME, serialize_config(cfg))
    log.info("wrote %d images to %s", cfg.n_images, out)


def cmd_train(cfg: ExperimentConfig, args) -> None:
    ds = _open_dataset(args.dataset)
    _check_fold(ds, args.fold)
    regime = REGIME_FLAGS[args.regime]
    tc = _train_config(cfg, regime, args)
    params, history = train(ds.fold(args.fold), tc, cfg.eval)
    out = Path(args.out or cfg.output_dir)
    save_checkpoint(out / "checkpoint.json",
                    Checkpoint(params, cfg.detector, regime, tc.prior if regime.is_pu else None, tc.seed))
    persist.atomic_write_text(out / "history.csv", history_csv(history))


def cmd_gridsearch(cfg: ExperimentConfig, args) -> None:
    ds = _open_dataset(args.dataset)
    _check_fold(ds, args.fold)
    regime = REGIME_FLAGS[args.regime]
    if not regime.is_pu:
        raise ConfigError("gridsearch needs a PU regime (--regime pu or biased-pu)")
    tc = cfg.train[regime]
    grid = (args.prior,) if args.prior is not None else cfg.prior_grid
    results = grid_search(grid, ds.fold(args.fold), tc, cfg.eval)
    best = best_candidate(results)
    out = Path(args.out or cfg.output_dir)
    rows = [(r.prior, r.validation_recall, r is best) for r in results]
    save_checkpoint(out / "checkpoint.json", Checkpoint(
        best.params, cfg.detector, regime, ClassPrior(best.prior, PriorProvenance.GRID_SELECTED), tc.seed))
    persist.atomic_write_text(out / "history.csv", history_csv(best.history))
    persist.atomic_write_text(out / "gridsearch.csv", _csv(rows, ("prior", "validation_recall", "selected")))


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    ds = _open_dataset(args.dataset)
    _check_fold(ds, args.fold)
    size = ds.config.image_size
    if ckpt.detector.window > min(size, cfg.eval.patch_size) or ckpt.detector.anchor_size > ckpt.detector.window:
        raise DataError(f"checkpoint geometry (window {ckpt.detector.window}, anchor {ckpt.detector.anchor_size}) "
                        f"does not fit images of size {size} with patch size {cfg.eval.patch_size}")
    fold = ds.fold(args.fold)
    ev = evaluate_fold(ckpt.params, fold.test_images, fold.test_boxes, cfg.eval, ckpt.detector)
    prior = ckpt.prior.value if ckpt.prior is not None else None
    out = Path(args.out or cfg.output_dir)
    persist.atomic_write_text(out / "metrics.csv", _csv([metrics_row(args.fold, ckpt.regime, prior, ev)],
                                                        METRICS_HEADER))


def cmd_compare(cfg: ExperimentConfig, args) -> None:
    ds = _open_dataset(args.dataset)
    configs = {r.value: cfg.train[r] for r in Regime}
    reference = Regime.PROPOSED_PU.value
    comparison = compare_methods(ds, configs, cfg.eval, cfg.prior_grid, jobs=args.jobs, reference=reference)
    rows = [metrics_row(run.fold, run.regime, run.prior, run.evaluation) for run in comparison.runs]
    out = Path(args.out or cfg.output_dir)
    for run in comparison.runs:
        prior = None if run.prior is None else ClassPrior(
            run.prior, PriorProvenance.GRID_SELECTED if run.grid_recalls else PriorProvenance.USER_SET)
        save_checkpoint(out / "checkpoints" / f"{run.regime}_fold{run.fold}.json",
                        Checkpoint(run.params, cfg.detector, Regime(run.regime), prior, cfg.train[Regime(run.regime)].seed))
    grid_rows = [(run.regime, run.fold, p, r, p == run.prior)
                 for run in comparison.runs for p, r in run.grid_recalls.items()]
    persist.atomic_write_text(out / "gridsearch.csv",
                              _csv(grid_rows, ("regime", "fold", "prior", "validation_recall", "selected")))
    persist.atomic_write_text(out / "metrics.csv", _csv(rows, METRICS_HEADER))
    persist.atomic_write_text(out / "curves.csv", curves_csv(comparison.runs))
    persist.atomic_write_text(out / "report.txt", report_text(rows, comparison.report, reference))
    persist.atomic_write_text(out / CONFIG_ECHO_NAME, serialize_config(cfg))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "gridsearch": cmd_gridsearch}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--out", help="output directory (default: output_dir from the config)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--epochs", type=int, help="epochs for every regime, overrides the config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pudet", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    for name in ("train", "gridsearch"):
        p = sub.add_parser(name, parents=[common], help=f"{name} on one fold")
        p.add_argument("dataset")
        p.add_argument("--fold", type=int, default=0)
        p.add_argument("--regime", choices=sorted(REGIME_FLAGS), default="pu")
        p.add_argument("--prior", type=float, help="class prior (gridsearch: a single candidate)")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a fold's test split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--fold", type=int, default=0)
    p = sub.add_parser("compare", parents=[common], help="all regimes on all folds")
    p.add_argument("dataset")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, train={r: replace(t, epochs=args.epochs) for r, t in cfg.train.items()})
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out) if args.out else None
    existed = out is not None and out.exists()
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if getattr(args, "prior", None) is not None and not 0.0 < args.prior < 1.0:
            raise ConfigError("--prior must lie in (0, 1)")
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"pudet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"pudet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"pudet: numeric failure: {exc}", file=sys.stderr)
        # outputs are written only after all computation, but drop a directory we created
        if out is not None and not existed and out.exists():
            shutil.rmtree(out, ignore_errors=True)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"pudet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"pudet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
