"""Experiment configuration: flat ``key = value`` files plus ``--key value`` overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


_GLYPH = {"width": 8, "height": 8, "glyphs": ["hbar", "vbar", "cross", "square"],
          "intensity": 0.35, "glyph_noise": 0.01, "amplitude": 0.55, "blur_sigma": 0.0,
          "offset": 0.05, "contrast_min": 0.05}

_MODEL = {"n_steps": 4, "hidden": [32], "mixing": "lu", "prior": "gmm", "prior_spread": 1.0,
          "scale_clamp": 2.0, "smooth_eps": 0.1, "split_anchor": 5.0, "robust_weight": 0.5}

_TRAIN = {"objective": "reweighted", "weight": 1.0, "epochs": 30, "batch_size": 128, "lr": 1e-3,
          "decay_factor": 0.1, "decay_every": 60, "clip_norm": 100.0, "quantile": 0.99}

DEFAULTS = {
    "gen-data": {"generator": "blobs", "n": 4000, "test_fraction": 0.25, "n_classes": 2,
                 "dim": 2, "separation": 16.0, "sigma": 1.0, "lam1": 0.02, "lam2": 0.02,
                 "delta_r": 0.3, "pad": 0, "pad_scale": 1.0, "output": "dataset.txt", **_GLYPH},
    "train": {"data": None, **_MODEL, **_TRAIN},
    "eval": {"model": None, "data": None, "split": "test", "threshold": None},
    "attack": {"model": None, "data": None, "split": "test", "threshold": None,
               "attacks": ["boundary", "gradient"], "detect_aware": [False, True],
               "budget": 1.5, "n_samples": 50, "max_queries": 2000, "max_iter": 200,
               "binary_steps": 6, "kappa": 0.0, "quantile": 0.99},
    "interpolate": {"model": None, "data": None, "split": "test", "threshold": None,
                    "n_pairs": 100, "n_alphas": 100, "quantile": 0.99},
    "histogram": {"model": None, "data": None, "split": "test"},
    "verify": {"eps": 0.1, "delta": 0.01, "delta_r": 0.3, "n_samples": 100000,
               "mc_samples": 1000000},
    "sweep": {"blur_sigmas": [5.0, 1.0, 0.0], "n": 4000, "test_fraction": 0.25,
              "n_pairs": 100, "n_alphas": 21, **_GLYPH, **_MODEL, **_TRAIN,
              "epochs": 15, "hidden": [64]},
}

PATH_KEYS = ("data", "model", "threshold")
REQUIRED = {"train": ("data",), "eval": ("model", "data"), "attack": ("model", "data"),
            "interpolate": ("model", "data"), "histogram": ("model", "data")}


def parse_value(text):
    """JSON when it parses (numbers, lists, booleans), else the raw string."""
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        return text


def read_config_file(path):
    values = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = parse_value(val)
    return values


def parse_overrides(tokens):
    """``['--epochs', '5', '--hidden', '[16,16]']`` -> ``{'epochs': 5, 'hidden': [16, 16]}``."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            val = tokens[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for --{key}")
        out[key.replace("-", "_")] = parse_value(val)
    return out


@dataclass
class ExperimentConfig:
    command: str
    seed: int = 0
    out_dir: str = "out"
    params: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]

    def get(self, key, default=None):
        return self.params.get(key, default)


def build_config(command, file_values=None, overrides=None, seed=None, out_dir=None):
    """Merge defaults, file values and overrides; validate keys and paths."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    params = dict(DEFAULTS[command])
    merged = {**(file_values or {}), **(overrides or {})}
    file_seed = merged.pop("seed", None)
    file_out = merged.pop("out_dir", None)
    unknown = sorted(set(merged) - set(params))
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    params.update(merged)
    for key in REQUIRED.get(command, ()):
        if params.get(key) in (None, ""):
            raise ConfigError(f"{command} needs '{key}'")
    for key in PATH_KEYS:
        p = params.get(key)
        if p not in (None, "") and not os.path.exists(p):
            raise ConfigError(f"{key} path does not exist: {p}")
    if command == "interpolate" and int(params["n_alphas"]) < 2:
        raise ConfigError("n_alphas must be >= 2")
    if command == "sweep" and not params["blur_sigmas"]:
        raise ConfigError("blur_sigmas must be non-empty")
    if "split" in params and params["split"] not in ("train", "test", "all"):
        raise ConfigError("split must be train, test or all")
    seed = seed if seed is not None else (file_seed if file_seed is not None else 0)
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {seed!r}") from None
    out_dir = out_dir or file_out or "out"
    return ExperimentConfig(command, seed, str(out_dir), params)
