"""``flowlab`` command line.

Every command reads an optional ``--config`` file of ``key = value`` lines,
applies ``--key value`` overrides, writes its artifacts under ``--out-dir``
and records them in ``manifest.json``. Exit codes: 0 success, 2 bad
configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .. import datagen
from ..attacks import AttackConfig, SUITE_COLUMNS
from ..datagen import load_dataset, save_dataset
from ..flowcore import load_model, save_model
from ..flowcore.model import NumericalError
from ..oracle import CounterexampleParams
from ..training import (DetectionThreshold, ObjectiveSpec, calibrate_threshold, evaluate,
                        per_example_nll, threshold_to_dict, train, write_metrics_csv)
from . import runners
from .config import ConfigError, build_config, parse_overrides, read_config_file

log = logging.getLogger("flowlab")

COMMANDS = ("gen-data", "train", "eval", "attack", "interpolate", "histogram", "verify", "sweep")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, schema, columns, rows):
    """CSV with a ``# schema=<name> version=1`` line before the header row."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema} version=1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


class Outputs:
    def __init__(self, out_dir, command, seed, params):
        self.dir = out_dir
        self.command = command
        self.seed = seed
        self.params = params
        self.files = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.dir, name)

    def finish(self):
        arts = []
        for name in self.files:
            with open(os.path.join(self.dir, name), "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            arts.append({"file": name, "sha256": digest, "seed": self.seed})
        write_json(os.path.join(self.dir, "manifest.json"),
                   {"command": self.command, "seed": self.seed, "config": self.params,
                    "artifacts": arts})


def _load_threshold(path):
    with open(path) as fh:
        d = json.load(fh)
    return DetectionThreshold(float(d["T"]), float(d["quantile"]), d.get("calibration_set", ""))


def _data_split(cfg):
    ds = load_dataset(cfg["data"])
    split = cfg.get("split", "test")
    if split == "all" or ds.train_idx is None:
        return ds, ds
    return ds, (ds.test if split == "test" else ds.train)


def _threshold(cfg, model, ds):
    if cfg.get("threshold"):
        return _load_threshold(cfg["threshold"])
    calib = ds.train if ds.train_idx is not None else ds
    return calibrate_threshold(model, calib.x, cfg.get("quantile", 0.99), "train")


def cmd_gen_data(cfg, out):
    p = cfg.params
    kind = p["generator"]
    if kind == "blobs":
        ds = datagen.make_blobs(int(p["n_classes"]), int(p["dim"]), p["separation"], p["sigma"],
                                int(p["n"]), cfg.seed)
    elif kind == "annuli":
        params = CounterexampleParams(p["lam1"], p["lam2"], p["delta_r"], int(p["dim"]))
        ds = datagen.make_annuli_dataset(params, int(p["n"]), cfg.seed)
    elif kind == "glyph":
        spec = runners._glyph_spec(p, p["blur_sigma"])
        ds = datagen.make_glyph_bg(spec, int(p["n"]), cfg.seed)
    else:
        raise ConfigError(f"unknown generator {kind!r}")
    if int(p["pad"]) > 0:
        x, corr = datagen.pad_noise(ds.x, int(p["pad"]), p["pad_scale"], cfg.seed + 1)
        meta = {**ds.meta, "pad": int(p["pad"]), "pad_scale": p["pad_scale"],
                "pad_log_density_correction": corr}
        ds = datagen.Dataset(x, ds.y, ds.n_classes, meta)
    ds.meta["seed"] = cfg.seed
    ds.split(p["test_fraction"], cfg.seed + 2)
    name = os.path.basename(p["output"])
    save_dataset(ds, out.path(name), meta_path=out.path(name + ".meta.json"))
    print(f"wrote {len(ds)} samples (D={ds.dim}, C={ds.n_classes}) to {out.dir}/{name}")


def cmd_train(cfg, out):
    p = cfg.params
    ds = load_dataset(p["data"])
    tr = ds.train if ds.train_idx is not None else ds
    te = ds.test if ds.train_idx is not None else None
    model = runners.model_from_params(p, ds.dim, ds.n_classes, cfg.seed)
    objective = ObjectiveSpec(p["objective"], p["weight"])
    model, hist = train(model, tr.x, tr.y, objective, runners.train_config_from_params(p, cfg.seed),
                        None if te is None else te.x, None if te is None else te.y)
    save_model(model, out.path("model.json"))
    write_metrics_csv(hist, out.path("metrics.csv"))
    thr = calibrate_threshold(model, tr.x, p["quantile"], "train")
    write_json(out.path("threshold.json"), threshold_to_dict(thr))
    last = hist[-1]
    print(f"trained {len(hist) - 1} epochs: loss={last['loss']:.6g} acc={last['accuracy']:.4f} "
          f"bits/dim={last['bits_per_dim']:.4f} T={thr.T:.6g}")


def cmd_eval(cfg, out):
    model = load_model(cfg["model"])
    ds, part = _data_split(cfg)
    thr = _threshold(cfg, model, ds)
    m = evaluate(model, part.x, part.y)
    m["detected_fraction"] = float((per_example_nll(model, part.x) > thr.T).mean())
    m["threshold"] = thr.T
    cols = ["n", "accuracy", "joint_nll", "generative_term", "discriminative_term",
            "bits_per_dim", "threshold", "detected_fraction"]
    m["n"] = len(part)
    write_csv(out.path("eval.csv"), "eval", cols, [m])
    print(" ".join(f"{c}={_fmt(m[c])}" for c in cols))


def cmd_attack(cfg, out):
    p = cfg.params
    model = load_model(p["model"])
    ds, part = _data_split(cfg)
    thr = _threshold(cfg, model, ds)
    attacks = p["attacks"] if isinstance(p["attacks"], list) else [p["attacks"]]
    flags = p["detect_aware"] if isinstance(p["detect_aware"], list) else [p["detect_aware"]]
    configs = [AttackConfig(attack=a, detect_aware=bool(f), budget=p["budget"],
                            n_samples=int(p["n_samples"]), max_queries=int(p["max_queries"]),
                            max_iter=int(p["max_iter"]), binary_steps=int(p["binary_steps"]),
                            kappa=p["kappa"], seed=cfg.seed)
               for a in attacks for f in flags]
    meta = {"dataset": os.path.basename(p["data"]), "model": os.path.basename(p["model"]),
            "threshold": thr.T}
    rows = runners.run_attack_eval(model, part.x, part.y, thr, configs, meta)
    write_csv(out.path("attacks.csv"), "attack_table", SUITE_COLUMNS + list(meta), rows)
    for r in rows:
        print(" ".join(f"{c}={_fmt(r[c])}" for c in SUITE_COLUMNS))


def cmd_interpolate(cfg, out):
    p = cfg.params
    model = load_model(p["model"])
    ds, part = _data_split(cfg)
    thr = _threshold(cfg, model, ds)
    rows, summary = runners.run_interpolation(model, part.x, part.y, thr, int(p["n_pairs"]),
                                              int(p["n_alphas"]), cfg.seed)
    write_csv(out.path("interpolation.csv"), "interpolation",
              ["alpha", "mean_nll", "mean_p_start", "mean_p_end", "frac_detected"], rows)
    write_json(out.path("interpolation_summary.json"), summary)
    print(f"fraction_in_distribution={summary['fraction_in_distribution']!r} "
          f"endpoint_mean_nll={summary['endpoint_mean_nll']!r} mid_mean_nll={summary['mid_mean_nll']!r}")


def cmd_histogram(cfg, out):
    model = load_model(cfg["model"])
    _, part = _data_split(cfg)
    rows, summary = runners.run_wrongclass_histogram(model, part.x, part.y)
    write_csv(out.path("histogram.csv"), "wrongclass_histogram",
              ["index", "y_true", "wrong_class", "nll_true", "nll_wrong"], rows)
    write_json(out.path("histogram_summary.json"), summary)
    print(f"median_gap={summary['median_gap']!r} nll_true_iqr={summary['nll_true_iqr']!r} "
          f"overlap={summary['overlap']}")


def cmd_verify(cfg, out):
    p = cfg.params
    text, rows, _ = runners.run_verify(p["eps"], p["delta"], p["delta_r"], int(p["n_samples"]),
                                       cfg.seed, int(p["mc_samples"]))
    with open(out.path("verify_report.txt"), "w") as fh:
        fh.write(text)
    write_csv(out.path("verify_conditions.csv"), "verify_conditions",
              ["condition", "structural", "empirical_rate", "pass"], rows)
    sys.stdout.write(text)


def cmd_sweep(cfg, out):
    rows = runners.run_entropy_sweep(cfg.params, cfg.seed)
    cols = ["blur_sigma", "accuracy", "bits_per_dim", "interpolation_fraction", "status"]
    write_csv(out.path("sweep.csv"), "entropy_sweep", cols, rows)
    for r in rows:
        print(" ".join(f"{c}={_fmt(r[c])}" for c in cols))


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "attack": cmd_attack, "interpolate": cmd_interpolate, "histogram": cmd_histogram,
            "verify": cmd_verify, "sweep": cmd_sweep}


def make_parser():
    parser = argparse.ArgumentParser(
        prog="flowlab", description="Flow classifiers, detection-aware attacks and the "
        "annulus counter-example.",
        epilog="Any config key can be overridden with --key value.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="file of 'key = value' lines")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = make_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = build_config(args.command, file_values, parse_overrides(rest), args.seed,
                           args.out_dir)
        out = Outputs(cfg.out_dir, cfg.command, cfg.seed, cfg.params)
        HANDLERS[cfg.command](cfg, out)
        out.finish()
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"flowlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, OverflowError) as exc:
        print(f"flowlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
