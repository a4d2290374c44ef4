"""Command-line entry point: ``sttransfer <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command that writes an output also writes ``<output>.manifest.json``
recording the seed, configuration and library versions; the manifest is the
only output that carries a timestamp.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__, kernels
from . import config as C
from . import tensor as T


class UsageError(Exception):
    pass


def write_manifest(output, command: str, cfg: dict, extra: dict | None = None) -> Path:
    path = Path(str(output) + ".manifest.json")
    manifest = {
        "command": command,
        "seed": cfg.get("seed"),
        "config": cfg,
        "versions": {
            "sttransfer": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "kernels": kernels.BACKEND,
        },
        "created_unix": int(time.time()),
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _cfg(args, **cli) -> dict:
    cfg = C.resolve(args.config, cli)
    T.set_precision(cfg["precision"])
    return cfg


def _load_data(path):
    from .synthdata import load_dataset

    ds = load_dataset(path)
    if not ds.sequences:
        raise ValueError(f"{path}: dataset is empty")
    return ds


def _train_cfg(cfg: dict, **over):
    from .transfer import TrainConfig

    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                       optimizer=cfg["optimizer"], seed=cfg["seed"], salient_subset_ratio=cfg["salient_ratio"], **over)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset, generate_steering_dataset, get_domain, save_dataset

    cfg = _cfg(args, domain=args.domain, n=args.n, seed=args.seed, collision_ratio=args.collision_ratio,
               steps=args.steps, task=args.task, frame_height=args.height, frame_width=args.width)
    spec = get_domain(cfg["domain"], cfg["frame_height"], cfg["frame_width"])
    if cfg["task"] == "collision":
        seqs = generate_dataset(spec, cfg["n"], cfg["collision_ratio"], cfg["steps"], cfg["seed"])
    else:
        seqs = generate_steering_dataset(spec, cfg["n"], cfg["steps"], cfg["seed"])
    save_dataset(args.out, seqs, meta={"domain": spec.domain_id, "task": cfg["task"], "seed": cfg["seed"]})
    write_manifest(args.out, "gen-data", cfg)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


def _net_config(cfg: dict, seqs):
    from .network import NetworkConfig

    t, c, h, w = seqs[0].frames.shape
    head = "classification" if seqs[0].label is not None else "regression"
    return NetworkConfig(input_channels=c, frame_height=h, frame_width=w, sequence_length=t, head=head)


def _history_out(path, history) -> None:
    Path(str(path) + ".history.json").write_text(json.dumps(history.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_train_phase1(args) -> int:
    from .network import save_checkpoint
    from .transfer import harvest_bundle, save_bundle, train_phase1

    cfg = _cfg(args, epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
               learning_rate=args.learning_rate, precision=args.precision)
    ds = _load_data(args.data)
    net = _net_config(cfg, ds.sequences)
    params, h0, history = train_phase1(ds.sequences, net, _train_cfg(cfg))
    save_checkpoint(args.out, params, h0, {"phase": 1, "train_config": _train_cfg(cfg).to_dict()})
    _history_out(args.out, history)
    if args.bundle_out:
        save_bundle(args.bundle_out, harvest_bundle(params, ds.sequences))
    write_manifest(args.out, "train-phase1", cfg, {"config_digest": net.digest(), "data": str(args.data)})
    last = history.records[-1] if history.records else None
    print(f"trained {len(history)} epochs; final train {history.metric}: "
          f"{last.train_metric:.4f}" if last else "trained 0 epochs")
    return 0


def cmd_gen_salient(args) -> int:
    from .network import load_checkpoint
    from .salient import generate_salient_subset
    from .synthdata import save_dataset

    cfg = _cfg(args, salient_ratio=args.ratio, seed=args.seed, precision=args.precision)
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    maps = generate_salient_subset(ckpt.params, ds.sequences, cfg["salient_ratio"], cfg["seed"], ckpt.hidden)
    save_dataset(args.out, ds.sequences, {**ds.maps, **maps}, meta=ds.meta)
    write_manifest(args.out, "gen-salient", cfg, {"model_checksum": ckpt.params.checksum()})
    print(f"generated maps for {len(maps)} of {len(ds.sequences)} sequences -> {args.out}")
    return 0


def cmd_train_phase2(args) -> int:
    from .network import save_checkpoint
    from .transfer import AblationFlags, init_phase2, load_bundle, phase2_config, train_phase2

    cfg = _cfg(args, epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
               learning_rate=args.learning_rate, precision=args.precision,
               transfer_cnn=False if args.no_cnn_transfer else None,
               transfer_lstm=False if args.no_lstm_transfer else None,
               transfer_hidden=False if args.no_hidden_transfer else None,
               data_aug=False if args.no_data_aug else None)
    bundle = load_bundle(args.bundle)
    ds = _load_data(args.data)
    flags = AblationFlags(
        transfer_cnn=cfg["transfer_cnn"],
        transfer_lstm_weights=cfg["transfer_lstm"],
        # hidden states travel with the LSTM: turning LSTM transfer off drops both
        transfer_hidden=cfg["transfer_hidden"] and cfg["transfer_lstm"],
    )
    augmented = cfg["data_aug"] and bool(ds.maps)
    params, h0 = init_phase2(bundle, phase2_config(bundle.source_config, augmented), cfg["seed"], flags)
    _, history = train_phase2(params, h0, ds.sequences, ds.maps if augmented else None, _train_cfg(cfg))
    save_checkpoint(args.out, params, h0, {"phase": 2, "flags": asdict(flags), "augmented": augmented})
    _history_out(args.out, history)
    write_manifest(args.out, "train-phase2", cfg, {"config_digest": params.config.digest(), "flags": asdict(flags)})
    last = history.records[-1] if history.records else None
    print(f"trained {len(history)} epochs ({'6' if augmented else '3'}-channel input); "
          + (f"final train {history.metric}: {last.train_metric:.4f}" if last else "no epochs run"))
    return 0


def cmd_eval(args) -> int:
    from .network import load_checkpoint
    from .transfer import evaluate

    cfg = _cfg(args, precision=args.precision)
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    kind = "classification" if ds.sequences[0].label is not None else "regression"
    if kind != ckpt.params.config.head:
        raise UsageError(f"dataset is labelled for {kind} but the checkpoint has a {ckpt.params.config.head} head")
    m = evaluate(ckpt.params, ckpt.hidden, ds.sequences, ds.maps or None)
    if m.kind == "accuracy":
        (tn, fp), (fn, tp) = m.confusion
        print(f"accuracy {m.value:.6f} on {m.n} sequences")
        print(f"confusion (rows true, cols predicted): safe->safe {tn}  safe->collision {fp}  "
              f"collision->safe {fn}  collision->collision {tp}")
    else:
        print(f"mean absolute error {m.value:.4f} deg on {m.n} sequences")
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")
        write_manifest(args.json_out, "eval", cfg, {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    return 0


def cmd_similarity(args) -> int:
    from .network import load_checkpoint
    from .similarity import SimilarityReport, compare_datasets

    cfg = _cfg(args, n_pairs=args.n_pairs, seed=args.seed, precision=args.precision)
    ckpt = load_checkpoint(args.checkpoint)
    a, b = _load_data(args.a), _load_data(args.b)
    report = SimilarityReport(model_checksum=ckpt.params.checksum())
    report.pairs.append(compare_datasets(ckpt.params, a.sequences, b.sequences, cfg["n_pairs"], cfg["seed"]))
    print(report.to_table())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json() + "\n")
        write_manifest(args.json_out, "similarity", cfg)
    return 0


def _setup_overrides(pairs: list[str]) -> dict:
    from .experiments import ExperimentSetup

    types = {f.name: f.type for f in fields(ExperimentSetup)}
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (p.strip() for p in item.split("=", 1))
        if k not in types:
            raise UsageError(f"unknown experiment setting {k!r}")
        kind = {"int": int, "float": float, "str": str}.get(str(types[k]), str)
        try:
            out[k] = kind(v)
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {v!r}") from exc
    return out


def cmd_experiment(args) -> int:
    from .experiments import ExperimentSetup, run_experiment

    cfg = _cfg(args, seed=args.seed, workers=args.workers)
    setup = ExperimentSetup(root_seed=cfg["seed"], workers=cfg["workers"], **_setup_overrides(args.set or []))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(args.name, setup)
    (out / f"{args.name}.txt").write_text(result.table + "\n")
    (out / f"{args.name}.json").write_text(result.to_json() + "\n")
    write_manifest(out / args.name, "experiment", cfg, {"setup": asdict(setup), "setup_digest": setup.digest()})
    print(result.table)
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .experiments import EXPERIMENTS

    p = argparse.ArgumentParser(prog="sttransfer", description="Two-phase spatio-temporal transfer learning toolkit.")
    p.add_argument("--config", help="key = value run-configuration file")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--domain")
    g.add_argument("--task", choices=("collision", "steering"))
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--collision-ratio", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--out", "-o", required=True)
    g.set_defaults(func=cmd_gen_data)

    def training(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", "-o", required=True)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--learning-rate", type=float)
        sp.add_argument("--precision", choices=("float32", "float64"))

    t1 = sub.add_parser("train-phase1", help="train from scratch on the source domain")
    training(t1)
    t1.add_argument("--bundle-out", help="also harvest a transfer bundle from the training data")
    t1.set_defaults(func=cmd_train_phase1)

    gs = sub.add_parser("gen-salient", help="attach saliency/Grad-CAM/edge maps to a random subset")
    gs.add_argument("--checkpoint", required=True)
    gs.add_argument("--data", required=True)
    gs.add_argument("--ratio", type=float)
    gs.add_argument("--seed", type=int)
    gs.add_argument("--precision", choices=("float32", "float64"))
    gs.add_argument("--out", "-o", required=True)
    gs.set_defaults(func=cmd_gen_salient)

    t2 = sub.add_parser("train-phase2", help="train on the target domain from a transfer bundle")
    training(t2)
    t2.add_argument("--bundle", required=True)
    t2.add_argument("--no-cnn-transfer", action="store_true")
    t2.add_argument("--no-lstm-transfer", action="store_true", help="drop LSTM weights and hidden-state transfer")
    t2.add_argument("--no-hidden-transfer", action="store_true")
    t2.add_argument("--no-data-aug", action="store_true", help="ignore attached salient maps")
    t2.set_defaults(func=cmd_train_phase2)

    ev = sub.add_parser("eval", help="accuracy or steering MAE of a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--precision", choices=("float32", "float64"))
    ev.add_argument("--json-out")
    ev.set_defaults(func=cmd_eval)

    si = sub.add_parser("similarity", help="cosine/FID/SSIM between two datasets")
    si.add_argument("--checkpoint", required=True)
    si.add_argument("--a", required=True)
    si.add_argument("--b", required=True)
    si.add_argument("--n-pairs", type=int)
    si.add_argument("--seed", type=int)
    si.add_argument("--precision", choices=("float32", "float64"))
    si.add_argument("--json-out")
    si.set_defaults(func=cmd_similarity)

    ex = sub.add_parser("experiment", help="run a multi-seed study end to end")
    ex.add_argument("name", choices=EXPERIMENTS)
    ex.add_argument("--out-dir", required=True)
    ex.add_argument("--seed", type=int)
    ex.add_argument("--workers", type=int)
    ex.add_argument("--set", action="append", metavar="KEY=VALUE", help="override an experiment setting")
    ex.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        return args.func(args)
    except (UsageError, C.ConfigKeyError) as exc:
        print(f"sttransfer: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        print(f"sttransfer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
