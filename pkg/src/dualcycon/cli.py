"""Command-line entry points: ``synth``, ``preprocess``, ``train``, ``eval``
and ``predict``.

Run settings live in a flat ``key = value`` file; ``--set key=value`` flags
override it.  Every run echoes the resolved settings next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

import argparse
import csv
import dataclasses
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import training as T
from .errors import (BadMagic, ConfigError, DimMismatch, DuplicateId, MalformedRow,
                     MissingCheckpoint,
                     NonFiniteSample, PDError, TruncatedPayload)
from .engine import load_checkpoint
from .model import ModelConfig, make_batch
from .preprocess import PreprocessConfig, preprocess_measurement
from .signal_io import (FEATURE_MAGIC, load_manifest, read_features, read_measurement,
                        write_features)
from .synth import SynthConfig, gen_dataset

log = logging.getLogger("dualcycon")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# OSError covers MissingFile and MissingCheckpoint
IO_ERRORS = (OSError, MalformedRow, DuplicateId, BadMagic, TruncatedPayload,
             NonFiniteSample, DimMismatch)

MODEL_KEYS = ("channels", "kernel", "stride", "joint_channels", "se_ratio",
              "attention", "domains", "block_order")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


# -- run configuration ------------------------------------------------------

def _defaults():
    vals = {}
    for f in dataclasses.fields(PreprocessConfig):
        vals[f.name] = f.default
    for f in dataclasses.fields(T.TrainConfig):
        vals[f.name] = f.default
    model = ModelConfig()
    for k in MODEL_KEYS:
        vals[k] = getattr(model, k)
    vals["workers"] = 1
    return vals


def _parse(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved settings for preprocessing, model and training."""

    def __init__(self, values=None):
        self.values = _defaults()
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in self.values:
            raise ConfigError(f"unknown config key: {key}")
        default = self.values[key]
        self.values[key] = _parse(key, value, default) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_sources(cls, path=None, overrides=()):
        cfg = cls()
        if path:
            for key, value in read_config_file(path):
                cfg.set(key, value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    def _pick(self, cls):
        names = {f.name for f in dataclasses.fields(cls)}
        try:
            return cls(**{k: v for k, v in self.values.items() if k in names})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def preprocess(self) -> PreprocessConfig:
        return self._pick(PreprocessConfig)

    def train(self) -> "T.TrainConfig":
        return self._pick(T.TrainConfig)

    def model(self, n_peaks=None, w_t=None, f_bins=None) -> ModelConfig:
        pc = self.preprocess()
        kw = {k: self.values[k] for k in MODEL_KEYS}
        try:
            return ModelConfig(n_peaks=n_peaks or pc.n_peaks, w_t=w_t or pc.w_t,
                               f_bins=f_bins or pc.f_bins, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values.items())

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def read_config_file(path):
    """``(key, value)`` pairs of a flat config file; ``#`` starts a comment."""
    pairs = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value.strip()))
    return pairs


# -- helpers ----------------------------------------------------------------

def load_feature_dir(path):
    """Feature files of a directory (sorted by name) or a single file."""
    path = os.fspath(path)
    files = sorted(glob.glob(os.path.join(path, "*.pdcf"))) if os.path.isdir(path) else [path]
    if not files:
        raise FileNotFoundError(f"no .pdcf feature files in {path}")
    feats = [read_features(f) for f in files]
    shapes = {(f.td_pos.shape, f.fd_pos.shape) for f in feats}
    if len(shapes) > 1:
        raise DimMismatch(f"feature files disagree in shape: {sorted(shapes)}")
    return feats


def expand_checkpoints(paths):
    out = []
    for p in paths:
        if os.path.isdir(p):
            out.extend(sorted(glob.glob(os.path.join(p, "fold*.pdck"))))
        else:
            out.append(p)
    return out


def _geometry(feats):
    n_p, w_t = feats[0].td_pos.shape
    return dict(n_peaks=n_p, w_t=w_t, f_bins=feats[0].fd_pos.shape[1])


def _preprocess_one(job):
    entry, pc, out_dir = job
    row = {"id": entry.id, "label": entry.label, "status": "ok",
           "n_real_pos": "", "n_real_neg": "", "error": ""}
    try:
        feats = preprocess_measurement(read_measurement(entry.path, entry), pc)
        write_features(os.path.join(out_dir, entry.id + ".pdcf"), feats)
        row.update(n_real_pos=feats.n_real_pos, n_real_neg=feats.n_real_neg)
    except (PDError, OSError, ValueError) as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def _is_feature_file(path):
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == FEATURE_MAGIC
    except OSError:
        return False


# -- commands ---------------------------------------------------------------

def cmd_synth(args):
    cfg = SynthConfig(n_samples=args.n_samples, noise_std=args.noise_std, seed=args.seed)
    manifest = gen_dataset(args.n, args.pd_fraction, cfg, args.out, seed=args.seed)
    with open(os.path.join(args.out, "synth_config.txt"), "w") as fh:
        settings = dict(cfg.to_dict(), n=args.n, pd_fraction=args.pd_fraction)
        fh.write("".join(f"{k} = {_format(v)}\n" for k, v in settings.items()))
    log.info("wrote %d records (%d PD) to %s", len(manifest), manifest.counts[1], args.out)
    return EXIT_OK


def cmd_preprocess(args):
    cfg = RunConfig.from_sources(args.config, args.set)
    pc = cfg.preprocess()
    manifest = load_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    cfg.write(os.path.join(args.out, "config.txt"))
    jobs = [(e, pc, args.out) for e in manifest]
    workers = args.workers or cfg["workers"]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_preprocess_one, jobs))
    else:
        rows = []
        for i, job in enumerate(jobs, start=1):
            rows.append(_preprocess_one(job))
            log.info("[%d/%d] %s %s", i, len(jobs), job[0].id, rows[-1]["status"])
    with open(os.path.join(args.out, "preprocess_log.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["id"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        log.error("%s: %s", r["id"], r["error"])
    log.info("preprocessed %d/%d measurements", len(rows) - len(failed), len(rows))
    return EXIT_IO if failed else EXIT_OK


def cmd_train(args):
    cfg = RunConfig.from_sources(args.config, args.set)
    feats = load_feature_dir(args.features)
    model_cfg = cfg.model(**_geometry(feats))
    train_cfg = cfg.train()
    os.makedirs(args.out, exist_ok=True)
    cfg.write(os.path.join(args.out, "config.txt"))
    results = T.cross_validate(feats, train_cfg, model_cfg, args.out,
                               workers=args.workers or cfg["workers"],
                               meta={"preprocess": cfg.preprocess().to_dict()})
    summary = [{"fold": r.fold, "best_val_mcc": r.best_val_mcc, "best_epoch": r.best_epoch,
                "checkpoint": r.checkpoint_path} for r in results]
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    for s in summary:
        log.info("fold %d: best val MCC %.4f at epoch %d", s["fold"], s["best_val_mcc"],
                 s["best_epoch"])
    return EXIT_OK


def export_vectors(path, models, feats, batch_size=64):
    """Per-measurement feature vectors of every model as a long-format CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "model", "vector", "values"])
        for m_i, model in enumerate(models):
            for lo in range(0, len(feats), batch_size):
                chunk = feats[lo:lo + batch_size]
                out = model(make_batch(chunk), training=False)
                for name, arr in out.vectors.items():
                    for f, row in zip(chunk, arr):
                        w.writerow([f.id, f.label, m_i, name, " ".join(repr(float(v)) for v in row)])


def cmd_eval(args):
    paths = expand_checkpoints(args.checkpoints)
    feats = load_feature_dir(args.features)
    models = [T.model_from_checkpoint(p) for p in paths]
    report, p_final = T.evaluate(models, feats, args.threshold, args.batch_size)
    report["config"] = {"checkpoints": [os.fspath(p) for p in paths],
                        "features": os.fspath(args.features), "threshold": args.threshold,
                        "batch_size": args.batch_size}
    report["predictions"] = [{"id": f.id, "label": f.label, "p_final": float(p)}
                             for f, p in zip(feats, p_final)]
    out_dir = os.path.dirname(os.path.abspath(args.report))
    os.makedirs(out_dir, exist_ok=True)
    T.write_report(args.report, report)
    if args.export_vectors:
        export_vectors(args.export_vectors, models, feats, args.batch_size)
    log.info("MCC %.4f over %d measurements with %d models", report["overall"]["mcc"],
             len(feats), len(models))
    return EXIT_OK


def cmd_predict(args):
    paths = expand_checkpoints(args.checkpoints)
    if not paths:
        raise MissingCheckpoint("no checkpoints given")
    models = [T.model_from_checkpoint(p) for p in paths]
    if _is_feature_file(args.measurement):
        feats = read_features(args.measurement)
    else:
        ckpt_meta = load_checkpoint(paths[0]).meta
        if "preprocess" in ckpt_meta and not (args.config or args.set):
            pc = PreprocessConfig(**ckpt_meta["preprocess"])
        else:
            pc = RunConfig.from_sources(args.config, args.set).preprocess()
        feats = preprocess_measurement(read_measurement(args.measurement), pc)
    heads = None
    for model in models:
        _, h = T.predict_features(model, [feats], return_heads=True)
        heads = h[0] if heads is None else heads + h[0]
    heads = heads / len(models)
    names = models[0].cfg.heads
    for name, p in zip(names, heads):
        print(f"p_{name} {p:.6f}")
    p_final = float(np.mean(heads))
    print(f"p_final {p_final:.6f}")
    print(f"prediction {int(p_final >= args.threshold)}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="dualcycon", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--pd-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=80_000)
    p.add_argument("--noise-std", type=float, default=0.005)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="raw records to feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0, help="processes (default: config)")
    with_config(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="stratified k-fold training")
    p.add_argument("--features", required=True, help="directory of .pdcf files")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0, help="parallel folds (default: config)")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fold-averaged evaluation")
    p.add_argument("--checkpoints", nargs="+", required=True, help="files or directories")
    p.add_argument("--features", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--export-vectors", help="CSV of per-measurement feature vectors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one measurement")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--measurement", required=True, help="raw record or .pdcf file")
    p.add_argument("--threshold", type=float, default=0.5)
    with_config(p)
    p.set_defaults(func=cmd_predict)
    return ap


def exit_code(exc):
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    if isinstance(exc, IO_ERRORS):
        return EXIT_IO
    return EXIT_CONFIG


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (PDError, OSError, ValueError, TypeError, FloatingPointError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
