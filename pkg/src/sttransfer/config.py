"""Run configuration: a flat set of typed keys read from a text file, the
environment and the command line, in that order of increasing precedence.

File format: one ``key = value`` per line; ``#`` starts a comment; blank
lines are ignored. Environment variables are the upper-case key with an
``STTRANSFER_`` prefix (``STTRANSFER_EPOCHS=4``). Unknown keys are errors.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path


class ConfigKeyError(ValueError):
    """Unknown key or unparsable value in a run configuration."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str


KEYS: dict[str, Key] = {
    "seed": Key(int, 0, "root random seed"),
    "precision": Key(str, "float32", "float32 (training) or float64"),
    "domain": Key(str, "townA", "built-in domain for gen-data"),
    "task": Key(str, "collision", "collision or steering"),
    "n": Key(int, 200, "number of sequences to generate"),
    "collision_ratio": Key(float, 0.5, "fraction of collision sequences"),
    "steps": Key(int, 15, "frames per sequence"),
    "frame_height": Key(int, 24, "frame height in pixels"),
    "frame_width": Key(int, 32, "frame width in pixels"),
    "epochs": Key(int, 10, "training epochs"),
    "batch_size": Key(int, 32, "minibatch size"),
    "learning_rate": Key(float, 1e-3, "optimizer step size"),
    "optimizer": Key(str, "adam", "adam or sgd"),
    "salient_ratio": Key(float, 0.10, "fraction of sequences that get salient maps"),
    "transfer_cnn": Key(_bool, True, "copy CNN/inception weights into Phase 2"),
    "transfer_lstm": Key(_bool, True, "copy LSTM/head weights and the harvested hidden state"),
    "transfer_hidden": Key(_bool, True, "start Phase 2 from the harvested hidden state"),
    "data_aug": Key(_bool, True, "use attached salient maps as extra channels in Phase 2"),
    "n_pairs": Key(int, 500, "frame pairs for similarity"),
    "workers": Key(int, 1, "worker processes for multi-seed experiments"),
}

# variables read elsewhere (kernel selection, build switches), never config keys
RESERVED_ENV = {"STTRANSFER_KERNELS", "STTRANSFER_NO_EXT"}
ENV_PREFIX = "STTRANSFER_"


def _parse(key: str, raw: str, origin: str):
    if key not in KEYS:
        raise ConfigKeyError(f"{origin}: unknown key {key!r}")
    try:
        return KEYS[key].type(raw.strip())
    except ValueError as exc:
        raise ConfigKeyError(f"{origin}: bad value for {key!r}: {exc}") from exc


def read_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = _parse(key, value, f"{path}:{lineno}")
    return out


def read_env(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or name in RESERVED_ENV:
            continue
        out[name[len(ENV_PREFIX):].lower()] = _parse(name[len(ENV_PREFIX):].lower(), value, f"${name}")
    return out


def resolve(file=None, cli: dict | None = None, environ=None) -> dict:
    """Defaults < file < environment < command line (``None`` CLI values are ignored)."""
    cfg = {k: v.default for k, v in KEYS.items()}
    if file is not None:
        cfg.update(read_file(file))
    cfg.update(read_env(environ))
    for k, v in (cli or {}).items():
        if v is None:
            continue
        if k not in KEYS:
            raise ConfigKeyError(f"command line: unknown key {k!r}")
        cfg[k] = v
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["precision"] not in ("float32", "float64"):
        raise ConfigKeyError("precision must be float32 or float64")
    if cfg["task"] not in ("collision", "steering"):
        raise ConfigKeyError("task must be collision or steering")
    if cfg["optimizer"] not in ("adam", "sgd"):
        raise ConfigKeyError("optimizer must be adam or sgd")
    for k in ("n", "steps", "frame_height", "frame_width", "batch_size", "n_pairs", "workers"):
        if cfg[k] < 1:
            raise ConfigKeyError(f"{k} must be >= 1")
    if cfg["epochs"] < 0:
        raise ConfigKeyError("epochs must be >= 0")
    if not 0 <= cfg["collision_ratio"] <= 1 or not 0 <= cfg["salient_ratio"] <= 1:
        raise ConfigKeyError("ratios must lie in [0, 1]")
    if not cfg["learning_rate"] > 0:
        raise ConfigKeyError("learning_rate must be positive")
