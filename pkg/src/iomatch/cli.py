"""Batch front-end: ``run``, ``report`` and ``gradcheck``.

Configuration files are flat ``key = value`` lists (no section header needed;
``#`` starts a comment). Every key is optional and unknown keys are rejected::

    modes = iomatch, fixmatch, supervised
    seeds = 0, 1, 2
    tau_p = 0.95
    class_sep = 3.0

The output directory resolves as ``--out``, then ``$IOMATCH_OUT``, then the
``out`` key, then ``./runs``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import AugmentSpec, FeatureFileError, load_feature_csv, make_gaussian_mixture_task
from .gradcheck import run_gradcheck
from .networks import ConfigError, NetworkDims, save_checkpoint
from .trainer import MODES, TrainConfig, TrainingAborted, select_best_checkpoint, train_run

logger = logging.getLogger(__name__)

OUT_ENV = "IOMATCH_OUT"
SECTION = "iomatch"
CSV_COLUMNS = ("epoch", "l_s", "l_mb", "l_ui", "l_op", "l_overall", "closed_acc", "open_ba",
               "util_rate", "n_selected_inliers", "n_selected_open")
SUMMARY_METRICS = ("closed_acc", "open_ba", "util_rate")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_GRADCHECK = 0, 1, 2, 3


@dataclass(frozen=True)
class DataSource:
    k_seen: int = 4
    k_unseen: int = 4
    input_dim: int = 16
    n_per_class: int = 500
    n_labeled: int = 4
    class_sep: float = 3.0
    labeled_csv: str = ""
    unlabeled_csv: str = ""
    test_csv: str = ""

    @property
    def from_files(self) -> bool:
        return bool(self.labeled_csv or self.unlabeled_csv or self.test_csv)

    def validate(self) -> None:
        if self.from_files and not (self.labeled_csv and self.unlabeled_csv and self.test_csv):
            raise ConfigError("labeled_csv, unlabeled_csv and test_csv must be given together")
        if not self.from_files:
            if self.k_seen < 2:
                raise ConfigError(f"k_seen must be >= 2, got {self.k_seen}")
            if self.class_sep <= 0:
                raise ConfigError(f"class_sep must be > 0, got {self.class_sep}")

    def build(self, seed: int):
        if self.from_files:
            return load_feature_csv(self.labeled_csv, self.unlabeled_csv, self.test_csv)
        return make_gaussian_mixture_task(seed, self.k_seen, self.k_unseen, self.input_dim,
                                          self.n_per_class, self.n_labeled, self.class_sep)


@dataclass(frozen=True)
class ExperimentSpec:
    train: TrainConfig
    data: DataSource
    seeds: tuple[int, ...]
    modes: tuple[str, ...]
    out: str

    def as_dict(self) -> dict:
        train = asdict(self.train)
        train.pop("mode")
        train.pop("seed")
        return {"train": train, "data": asdict(self.data), "seeds": list(self.seeds),
                "modes": list(self.modes), "out": self.out}


_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)
               if f.name not in ("mode", "seed", "augment", "dims")}
_AUG_KEYS = {f.name: f.type for f in fields(AugmentSpec)}
_DIM_KEYS = {f.name: f.type for f in fields(NetworkDims)}
_DATA_KEYS = {f.name: f.type for f in fields(DataSource)}
_LIST_KEYS = ("seeds", "modes", "out")
KNOWN_KEYS = tuple(sorted({*_TRAIN_KEYS, *_AUG_KEYS, *_DIM_KEYS, *_DATA_KEYS, *_LIST_KEYS}))


def _convert(key: str, raw: str, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        if kind == "str":
            return raw.strip()
        if key == "hidden":
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def _int_list(key: str, raw: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    if not values:
        raise ConfigError(f"{key}: list must be nonempty")
    return values


def parse_seeds(raw: str) -> tuple[int, ...]:
    return _int_list("seeds", raw)


def parse_config_text(text: str) -> ExperimentSpec:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if parser.sections() != [SECTION]:
        raise ConfigError("section headers are not allowed")
    items = dict(parser.items(SECTION))
    unknown = sorted(set(items) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}; known keys: {', '.join(KNOWN_KEYS)}")

    def pick(table):
        return {k: _convert(k, items[k], t) for k, t in table.items() if k in items}

    aug = AugmentSpec(**pick(_AUG_KEYS))
    dims = NetworkDims(**pick(_DIM_KEYS))
    data = DataSource(**pick(_DATA_KEYS))
    train = TrainConfig(augment=aug, dims=dims, **pick(_TRAIN_KEYS))
    seeds = _int_list("seeds", items["seeds"]) if "seeds" in items else (0, 1, 2)
    modes = tuple(m.strip() for m in items.get("modes", ",".join(MODES)).split(",") if m.strip())
    if not modes:
        raise ConfigError("modes: list must be nonempty")
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"modes: {m!r} is not one of {MODES}")
    if len(set(modes)) != len(modes):
        raise ConfigError("modes: duplicate entries")
    train.validate()
    data.validate()
    return ExperimentSpec(train, data, seeds, modes, items.get("out", "").strip())


def parse_config(path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)


def resolve_out(spec: ExperimentSpec, cli_out: str | None = None) -> Path:
    return Path(cli_out or os.environ.get(OUT_ENV) or spec.out or "runs")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def record_row(record) -> list[str]:
    losses = record.losses
    return [_fmt(record.epoch), *(_fmt(losses.get(k, 0.0)) for k in CSV_COLUMNS[1:6]),
            _fmt(record.closed_acc), _fmt(record.open_ba), _fmt(record.util_rate),
            _fmt(record.n_selected_inliers), _fmt(record.n_selected_open)]


def _stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    mean = float(finite.mean()) if finite.size else None
    std = float(finite.std()) if finite.size else None  # population std
    return {"mean": mean, "std": std, "values": [float(v) if math.isfinite(v) else None
                                                 for v in arr]}


def run_experiment(spec: ExperimentSpec, out_dir) -> int:
    """Train every (mode, seed) pair, writing CSVs, checkpoints and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict[str, list[float]]] = {}
    status = EXIT_OK
    for mode in spec.modes:
        for seed in spec.seeds:
            stem = f"{mode}_seed{seed}"
            marker = out / f"{stem}.FAILED"
            marker.unlink(missing_ok=True)
            dataset = spec.data.build(seed)
            config = spec.train.with_(mode=mode, seed=seed)
            csv_path = out / f"{stem}.csv"
            with csv_path.open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(CSV_COLUMNS)

                def on_epoch(record):
                    writer.writerow(record_row(record))
                    fh.flush()

                try:
                    state = train_run(dataset, config, on_epoch=on_epoch)
                except TrainingAborted as exc:
                    marker.write_text(f"{exc}\n")
                    logger.error("%s aborted: %s", stem, exc)
                    status = EXIT_ABORT
                    continue
            params, best_epoch, best_acc = select_best_checkpoint(state)
            best = state.history[best_epoch]
            save_checkpoint(params, out / f"{stem}.ckpt.json",
                            meta={"mode": mode, "seed": seed, "epoch": best_epoch,
                                  "closed_acc": best_acc})
            agg = results.setdefault(mode, {m: [] for m in SUMMARY_METRICS})
            agg["closed_acc"].append(best.closed_acc)
            agg["open_ba"].append(best.open_ba)
            agg["util_rate"].append(state.history[-1].util_rate)

    summary = {
        "config": spec.as_dict(),
        "modes": {mode: {m: _stats(v) for m, v in results[mode].items()}
                  for mode in spec.modes if mode in results},
        "failed": sorted(f.stem for f in out.glob("*.FAILED")),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return status


def format_report(summary: dict) -> str:
    modes = summary.get("modes", {})
    best = {}
    for metric in SUMMARY_METRICS:
        means = {m: agg[metric]["mean"] for m, agg in modes.items()
                 if agg[metric]["mean"] is not None}
        if len(means) > 1:
            best[metric] = max(means, key=means.get)

    header = f"{'mode':<12}" + "".join(f"{m:>20}" for m in SUMMARY_METRICS)
    lines = [header, "-" * len(header)]
    for mode, agg in modes.items():
        cells = []
        for metric in SUMMARY_METRICS:
            s = agg[metric]
            text = "n/a" if s["mean"] is None else f"{s['mean']:.4f}±{s['std']:.4f}"
            cells.append(f"{text + ('*' if best.get(metric) == mode else ' '):>20}")
        lines.append(f"{mode:<12}" + "".join(cells))
    if best:
        lines.append("* best mean per metric")
    if summary.get("failed"):
        lines.append("failed runs: " + ", ".join(summary["failed"]))
    return "\n".join(lines)


def emit_report(out_dir) -> str:
    path = Path(out_dir) / "summary.json"
    try:
        summary = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no summary.json in {out_dir}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"unreadable {path}: {exc}") from None
    text = format_report(summary)
    print(text)
    return text


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iomatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train the configured modes over a seed list")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seeds", help="comma-separated, overrides the config")
    report = sub.add_parser("report", help="print the summary table of a finished run")
    report.add_argument("--out")
    sub.add_parser("gradcheck", help="finite-difference check of every loss")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            results = run_gradcheck()
            for r in results:
                print(f"{'ok  ' if r.passed else 'FAIL'} {r.loss:<24} K={r.num_classes} "
                      f"seed={r.seed} max_rel_err={r.max_rel_error:.2e}")
            return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK
        if args.command == "report":
            out = args.out or os.environ.get(OUT_ENV) or "runs"
            emit_report(out)
            return EXIT_OK
        spec = parse_config(args.config)
        if args.seeds:
            spec = ExperimentSpec(spec.train, spec.data, parse_seeds(args.seeds), spec.modes,
                                  spec.out)
        out = resolve_out(spec, args.out)
        print(json.dumps(spec.as_dict(), indent=2, sort_keys=True))
        status = run_experiment(spec, out)
        emit_report(out)
        return status
    except (ConfigError, FeatureFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
