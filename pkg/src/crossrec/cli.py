"""Command-line entry point and experiment orchestration.

Subcommands: ``prep``, ``split``, ``train``, ``evaluate``, ``run``, ``sweep``
and ``report``.  Configuration files are JSON objects with flat dotted keys
(``"train.k": 16``); command-line flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data
from .data import ProtocolSpec
from .eval import CSV_HEADER, EvalReport, evaluate, rows_to_csv
from .neucdcf import KINDS, TrainConfig, load_checkpoint, save_checkpoint, train

_log = logging.getLogger("crossrec")

SEED_ENV = "CROSSREC_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    source: str | None = None
    target: str | None = None
    dataset: str | None = None
    gamma_min: float = 1.0
    gamma_max: float = 5.0
    min_ratings: int = 10
    model: str = "neucdcf"
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs"
    repeats: int = 5
    seed: int = 0

    def validate(self, require_paths=True):
        if self.model not in KINDS:
            raise ConfigError(f"model must be one of {KINDS}, got {self.model!r}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.min_ratings < 1:
            raise ConfigError(f"min_ratings must be >= 1, got {self.min_ratings}")
        if not 0 < self.gamma_min <= self.gamma_max:
            raise ConfigError("need 0 < gamma_min <= gamma_max")
        if require_paths:
            paths = [self.dataset] if self.dataset else [self.source, self.target]
            if any(p is None for p in paths):
                raise ConfigError("need either 'dataset' or both 'source' and 'target'")
            for p in paths:
                if not Path(p).exists():
                    raise ConfigError(f"input file {p} does not exist")

    def to_flat(self):
        flat = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "protocol":
                flat["protocol.kind"] = value.kind
                flat["protocol.K"] = value.K
            elif f.name == "train":
                for tf in fields(TrainConfig):
                    if tf.name != "seed":
                        flat[f"train.{tf.name}"] = getattr(value, tf.name)
            else:
                flat[f.name] = value
        return flat

    def config_hash(self):
        """Hash of everything that influences results (the output directory excluded)."""
        flat = {k: v for k, v in self.to_flat().items() if k != "out"}
        return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:12]


def valid_keys():
    return sorted(ExperimentConfig().to_flat())


_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key, value):
    if value is None:
        return None
    if key in ("gamma_min", "gamma_max", "protocol.K"):
        return float(value)
    if key in ("min_ratings", "repeats", "seed"):
        return int(value)
    if key.startswith("train."):
        name = key.split(".", 1)[1]
        typ = str(_TRAIN_TYPES[name])
        if typ.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{key} must be an integer, got {value}")
            return int(value)
        if typ.startswith("float"):
            return float(value)
        if typ == "bool":
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes")
            return bool(value)
    return value


def parse_config(path=None, flags=None, env=None):
    """Merge defaults, a JSON config file and flag overrides into a validated config.

    Args:
        path: optional JSON file of flat dotted keys.
        flags: mapping of dotted keys to override values; ``None`` values are ignored.
        env: environment mapping used for the fallback seed (defaults to ``os.environ``).
    """
    env = os.environ if env is None else env
    merged = {}
    if path is not None:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(doc)
    if "seed" not in merged and env.get(SEED_ENV):
        merged["seed"] = env[SEED_ENV]
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})

    keys = set(valid_keys())
    unknown = sorted(set(merged) - keys)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {sorted(keys)}")

    values = {k: _coerce(k, v) for k, v in merged.items()}
    top = {k: v for k, v in values.items() if "." not in k}
    tcfg = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("train.")}
    pcfg = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("protocol.")}
    seed = top.get("seed", 0)
    if "patience" not in tcfg and "epochs" in tcfg:
        # an unset patience follows a short epoch budget down
        tcfg["patience"] = min(TrainConfig.patience, max(tcfg["epochs"], 1))
    try:
        train_cfg = TrainConfig(**tcfg, seed=seed)
        protocol = ProtocolSpec(seed=seed, **pcfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(**top, train=train_cfg, protocol=protocol)
    cfg.validate(require_paths=False)
    return cfg


# -- pipeline ------------------------------------------------------------------


def load_inputs(cfg):
    if cfg.dataset:
        return data.load_dataset(cfg.dataset)
    src = data.load_ratings(cfg.source, cfg.gamma_min, cfg.gamma_max)
    tgt = data.load_ratings(cfg.target, cfg.gamma_min, cfg.gamma_max)
    return data.align_domains(src, tgt, cfg.min_ratings)


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")


def trainlog_csv(log, config_hash, seed):
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash} seed={seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("epoch", "loss", "val_mae"))
    for epoch, loss, val in log.rows():
        writer.writerow((epoch, repr(loss), repr(val)))
    return buf.getvalue()


SUMMARY_HEADER = (
    "config_hash", "base_seed", "model", "protocol", "K", "k", "alpha", "repeats",
    "n_eval", "cold_users", "val_mae", "mae_mean", "mae_std", "rmse_mean", "rmse_std",
)


def summary_row(cfg, report):
    return (
        cfg.config_hash(), cfg.seed, cfg.model, cfg.protocol.kind, cfg.protocol.K, cfg.train.k,
        cfg.train.alpha, len(report.seeds), sum(report.count), max(report.cold_users, default=0),
        report.val_mae_mean, report.mae_mean, report.mae_std, report.rmse_mean, report.rmse_std,
    )


def run_experiment(cfg, base=None):
    """Train and evaluate ``cfg.repeats`` protocol instances with seeds ``seed..seed+repeats-1``.

    Returns:
        (aggregated EvalReport, list of (seed, error message) for failed runs)
    """
    if base is None:
        cfg.validate()
        base = load_inputs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    flat = cfg.to_flat()
    _write(out / "config.json", json.dumps({"config_hash": chash, **flat}, indent=2, sort_keys=True) + "\n")

    total = EvalReport(protocol=replace(cfg.protocol, seed=cfg.seed), model=cfg.model)
    failures = []
    for seed in range(cfg.seed, cfg.seed + cfg.repeats):
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(exist_ok=True)
        spec = replace(cfg.protocol, seed=seed)
        try:
            ds = data.apply_protocol(base, spec)
            data.save_manifest(ds, run_dir / "split.json")
            tcfg = replace(cfg.train, seed=seed)
            model, log = train(cfg.model, ds, tcfg)
            save_checkpoint(model, run_dir / "checkpoint.npz", config={"config_hash": chash, **tcfg.to_dict()})
            _write(run_dir / "trainlog.csv", trainlog_csv(log, chash, seed))
            report = evaluate(model, ds, spec, seed=seed, val_mae=log.best_val_mae)
            doc = {"config_hash": chash, "seed": seed, **report.to_dict()}
            _write(run_dir / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
            total.extend(report)
        except Exception as exc:  # keep the other seeds' results
            _log.error("run with seed %d failed: %s", seed, exc)
            failures.append((seed, str(exc)))

    _write(out / "runs.csv", rows_to_csv(
        [row + (chash,) for row in total.csv_rows()], header=CSV_HEADER + ("config_hash",)
    ))
    _write(out / "summary.csv", rows_to_csv([summary_row(cfg, total)], header=SUMMARY_HEADER))
    return total, failures


def sweep(cfg, alphas=None, ks=None, base=None):
    """Run one experiment per (alpha, k) pair; flag the row with the best validation MAE."""
    if base is None:
        cfg.validate()
        base = load_inputs(cfg)
    alphas = alphas or [cfg.train.alpha]
    ks = ks or [cfg.train.k]
    rows, failures = [], []
    for k in ks:
        for alpha in alphas:
            sub = replace(cfg, train=replace(cfg.train, alpha=alpha, k=k), out=str(Path(cfg.out) / f"k{k}_alpha{alpha}"))
            report, fails = run_experiment(sub, base)
            failures.extend(fails)
            rows.append(summary_row(sub, report))
    vals = [r[SUMMARY_HEADER.index("val_mae")] for r in rows]
    best = int(np.nanargmin(vals)) if not all(np.isnan(vals)) else -1
    rows = [r + (int(i == best),) for i, r in enumerate(rows)]
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    _write(Path(cfg.out) / "sweep.csv", rows_to_csv(rows, header=SUMMARY_HEADER + ("best",)))
    return rows, failures


def report_table(paths):
    """Aggregate ``runs.csv`` files into ``model x (protocol, K)`` cells of ``mean +/- std``."""
    cells = {}
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (row["model"], row["protocol"], float(row["K"]))
                cells.setdefault(key, []).append(float(row["mae"]))
    models = sorted({k[0] for k in cells}, key=lambda m: KINDS.index(m) if m in KINDS else len(KINDS))
    columns = sorted({(k[1], k[2]) for k in cells}, key=lambda c: (data.PROTOCOL_KINDS.index(c[0]), c[1]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model"] + [f"{p} K={K:g}" for p, K in columns])
    for m in models:
        line = [m]
        for p, K in columns:
            xs = [x for x in cells.get((m, p, K), []) if not np.isnan(x)]
            line.append(f"{np.mean(xs):.4f} ± {np.std(xs):.4f}" if xs else "")
        writer.writerow(line)
    return buf.getvalue()


# -- argument parsing ----------------------------------------------------------

FLAG_KEYS = {
    "source": "source",
    "target": "target",
    "dataset": "dataset",
    "model": "model",
    "protocol": "protocol.kind",
    "K_percent": "protocol.K",
    "k": "train.k",
    "alpha": "train.alpha",
    "lr": "train.lr",
    "batch": "train.batch_size",
    "dropout": "train.dropout",
    "epochs": "train.epochs",
    "seed": "seed",
    "repeats": "repeats",
    "out": "out",
    "gamma_min": "gamma_min",
    "gamma_max": "gamma_max",
    "min_ratings": "min_ratings",
}


def _experiment_flags(p):
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--source", help="source-domain ratings file (user<TAB>item<TAB>rating)")
    p.add_argument("--target", help="target-domain ratings file")
    p.add_argument("--dataset", help="aligned dataset written by 'prep' (instead of --source/--target)")
    p.add_argument("--model", choices=KINDS)
    p.add_argument("--protocol", choices=data.PROTOCOL_KINDS)
    p.add_argument("--K", dest="K_percent", type=float, help="protocol percentage")
    p.add_argument("--k", type=int, help="embedding dimension")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help=f"base seed (falls back to ${SEED_ENV})")
    p.add_argument("--repeats", type=int)
    p.add_argument("--out")
    p.add_argument("--gamma-min", dest="gamma_min", type=float)
    p.add_argument("--gamma-max", dest="gamma_max", type=float)
    p.add_argument("--min-ratings", dest="min_ratings", type=int)


def _grid(text, typ):
    return [typ(x) for x in text.split(",") if x.strip()] if text else None


def build_parser():
    parser = argparse.ArgumentParser(prog="crossrec", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="align source/target rating files and write a dataset manifest")
    _experiment_flags(p)

    p = sub.add_parser("split", help="build one protocol instance and write its manifest")
    _experiment_flags(p)

    p = sub.add_parser("train", help="train one model on a protocol manifest")
    _experiment_flags(p)
    p.add_argument("--split", required=True, help="protocol manifest written by 'split'")

    p = sub.add_parser("evaluate", help="score a checkpoint on a protocol manifest")
    _experiment_flags(p)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("run", help="repeated-seed experiment: split, train, evaluate, summarize")
    _experiment_flags(p)

    p = sub.add_parser("sweep", help="run experiments over alpha/k grids")
    _experiment_flags(p)
    p.add_argument("--alpha-grid", help="comma-separated alpha values")
    p.add_argument("--k-grid", help="comma-separated embedding sizes")

    p = sub.add_parser("report", help="aggregate runs.csv files into a results table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="write the table here instead of stdout")
    return parser


def _config_from_args(args):
    flags = {FLAG_KEYS[name]: getattr(args, name) for name in FLAG_KEYS if hasattr(args, name)}
    return parse_config(args.config, flags)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, data.DataError, data.AlignmentError, data.ProtocolError) as exc:
        _log.error("%s", exc)
        return 2


def _dispatch(args):
    if args.command == "report":
        table = report_table(args.runs)
        if args.out:
            _write(args.out, table)
        else:
            sys.stdout.write(table)
        return 0

    cfg = _config_from_args(args)
    out = Path(cfg.out)

    if args.command == "prep":
        if not (cfg.source and cfg.target):
            raise ConfigError("prep needs --source and --target")
        cfg.validate()
        ds = load_inputs(replace(cfg, dataset=None))
        out.mkdir(parents=True, exist_ok=True)
        data.save_dataset(ds, out / "dataset.json")
        _log.info("aligned %d users, %d source items, %d target items, %d ratings", ds.m, ds.n_s, ds.n_t, len(ds))
        return 0

    cfg.validate()
    base = load_inputs(cfg)

    if args.command == "split":
        ds = data.apply_protocol(base, cfg.protocol)
        out.mkdir(parents=True, exist_ok=True)
        data.save_manifest(ds, out / "split.json")
        _log.info("labels: %s", ds.label_counts())
        return 0

    if args.command == "train":
        ds = data.load_manifest(base, args.split)
        model, log = train(cfg.model, ds, cfg.train)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "checkpoint.npz", config={"config_hash": cfg.config_hash(), **cfg.train.to_dict()})
        _write(out / "trainlog.csv", trainlog_csv(log, cfg.config_hash(), cfg.seed))
        _log.info("best epoch %d, validation MAE %.4f (%s)", log.best_epoch, log.best_val_mae, log.stop_reason)
        return 0

    if args.command == "evaluate":
        ds = data.load_manifest(base, args.split)
        model, _ = load_checkpoint(args.checkpoint)
        report = evaluate(model, ds)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"config_hash": cfg.config_hash(), "seed": report.seeds[0], **report.to_dict()}
        _write(out / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        _log.info("MAE %.4f RMSE %.4f over %d pairs", report.mae_mean, report.rmse_mean, sum(report.count))
        return 0

    if args.command == "run":
        report, failures = run_experiment(cfg, base)
        _log.info("MAE %.4f ± %.4f over %d seeds", report.mae_mean, report.mae_std, len(report.seeds))
        return 1 if failures else 0

    if args.command == "sweep":
        _, failures = sweep(cfg, _grid(args.alpha_grid, float), _grid(args.k_grid, int), base)
        return 1 if failures else 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
