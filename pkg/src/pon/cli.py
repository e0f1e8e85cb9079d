"""Command-line entry point: ``pon gen-data | train | eval | gradcheck | compare``.

Run configuration is a JSON document with sections ``data``, ``model``,
``train``, ``eval`` and a top-level ``method``.  Omitted fields take
defaults, unknown keys are rejected, and command-line flags override the
file.  Exit codes: 0 success, 1 validation error, 2 runtime or divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint, data, experiment, gradcheck, metrics, nn
from .errors import ConfigError, DataFormatError, InvalidInputError, TrainingDivergenceError, UndefinedMetricError

log = logging.getLogger("pon")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

VALIDATION_ERRORS = (ConfigError, DataFormatError, InvalidInputError, UndefinedMetricError)


def default_config() -> dict:
    train = asdict(nn.TrainConfig())
    del train["method"]
    return {
        "method": "pon",
        "data": {**asdict(data.SyntheticConfig()), "csv": None},
        "model": {"hidden": [64, 32], "proj_dim": 16},
        "train": train,
        "eval": {
            "folds": 5,
            "repeats": 5,
            "holdout": True,
            "primary_threshold": 3,
            "secondary_threshold": 2,
            "rows": list(experiment.TABLE1_ROWS),
        },
    }


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def resolve_config(path: str | None, flags: dict | None = None) -> dict:
    """Defaults <- config file <- flags (dotted keys, ``None`` values skipped)."""
    cfg = default_config()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = _merge(cfg, doc)
    for dotted, value in (flags or {}).items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = cfg
        for p in parents:
            node = node[p]
        node[leaf] = value
    build(cfg)  # validate eagerly
    return cfg


def build(cfg: dict):
    """Typed objects from a resolved config."""
    data_cfg = {k: v for k, v in cfg["data"].items() if k != "csv"}
    synth = data.SyntheticConfig(**data_cfg)
    train = nn.TrainConfig(method=cfg["method"], **cfg["train"])
    ev = cfg["eval"]
    if ev["folds"] < 2 or ev["repeats"] < 1:
        raise ConfigError("eval.folds must be >= 2 and eval.repeats >= 1")
    for row in ev["rows"]:
        if row not in experiment.ROWS:
            raise ConfigError(f"unknown comparison row {row!r}")
    return synth, train


def load_dataset(cfg: dict) -> data.Dataset:
    if cfg["data"]["csv"]:
        return data.load_csv(cfg["data"]["csv"])
    synth, _ = build(cfg)
    return data.generate(synth)[0]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _split(cfg: dict, dataset: data.Dataset):
    ev = cfg["eval"]
    if not ev["holdout"]:
        return dataset, None
    train_ids, val_ids = data.kfold_split(dataset, ev["folds"], cfg["train"]["seed"])[0]
    return dataset.select_ids(train_ids), dataset.select_ids(val_ids)


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, {"data.seed": args.seed})
    synth, _ = build(cfg)
    out = Path(args.out)
    dataset, _ = data.generate(synth)
    data.save_csv(dataset, out)
    data.write_provenance(synth, out.with_suffix(".json"))
    print(f"wrote {len(dataset)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = checkpoint.load_state(args.resume)
        cfg = state["extra"]["run_config"]
        if args.epochs is not None:
            cfg["train"]["epochs"] = args.epochs
        trainer = checkpoint.trainer_from_state(state)
        trainer.config.epochs = cfg["train"]["epochs"]
        history_mode = "a"
    else:
        cfg = resolve_config(
            args.config,
            {"method": args.method, "train.seed": args.seed, "train.epochs": args.epochs, "data.csv": args.data},
        )
        trainer = None
        history_mode = "w"
    if args.data and args.resume:
        cfg["data"]["csv"] = args.data
    _, train_cfg = build(cfg)
    dataset = load_dataset(cfg)
    train_ds, val_ds = _split(cfg, dataset)
    if trainer is None:
        model_cfg = nn.ModelConfig(
            input_dim=dataset.features.shape[1],
            num_classes=dataset.num_classes,
            hidden=tuple(cfg["model"]["hidden"]),
            proj_dim=cfg["model"]["proj_dim"],
            head=train_cfg.head,
        )
        trainer = nn.Trainer.create(train_ds, train_cfg, model_cfg)
    _write_json(out / "config.json", cfg)

    remaining = max(0, cfg["train"]["epochs"] - trainer.epoch)
    with (out / "history.jsonl").open(history_mode) as hist:

        def on_epoch(record):
            hist.write(json.dumps(record, sort_keys=True) + "\n")
            hist.flush()

        trainer.fit(train_ds, epochs=remaining, val=val_ds, on_epoch=on_epoch)
    checkpoint.save_checkpoint(out / "checkpoint.json", trainer, {"run_config": cfg})
    last = trainer.history[-1]["loss_total"] if trainer.history else float("nan")
    print(f"trained to epoch {trainer.epoch}; final loss {last:.6f}; checkpoint {out / 'checkpoint.json'}")
    return EXIT_OK


def evaluate_checkpoint(trainer: nn.Trainer, dataset: data.Dataset, primary: int = 3, secondary: int = 2) -> dict:
    k = trainer.model.config.num_classes
    if dataset.num_classes != k:
        raise ConfigError(f"checkpoint has K={k} but dataset has K={dataset.num_classes}")
    d = trainer.model.config.input_dim
    if dataset.features.shape[1] != d:
        raise ConfigError(f"checkpoint expects {d} features but dataset has {dataset.features.shape[1]}")
    labels, probs = trainer.model.predict(dataset.features)
    return metrics.evaluate(dataset.labels, labels, probs, k, primary, secondary).to_dict()


def cmd_eval(args) -> int:
    state = checkpoint.load_state(args.checkpoint)
    trainer = checkpoint.trainer_from_state(state)
    run_cfg = state.get("extra", {}).get("run_config") or default_config()
    k = trainer.model.config.num_classes
    dataset = data.load_csv(args.data, num_classes=k)
    primary = args.primary if args.primary is not None else run_cfg["eval"]["primary_threshold"]
    secondary = args.secondary if args.secondary is not None else run_cfg["eval"]["secondary_threshold"]
    report = evaluate_checkpoint(trainer, dataset, primary, secondary)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_all(seed=args.seed or 0)
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, comp in report["components"].items():
        status = "PASS" if comp["passed"] else "FAIL"
        print(f"{status} {name}: {comp['configs']} configs, max rel err {comp['max_rel_error']:.3e}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_INVALID


def cmd_compare(args) -> int:
    flags = {
        "train.seed": args.seed,
        "train.epochs": args.epochs,
        "eval.folds": args.folds,
        "eval.repeats": args.repeats,
        "eval.rows": args.methods.split(",") if args.methods else None,
        "data.csv": args.data,
    }
    cfg = resolve_config(args.config, flags)
    _, base = build(cfg)
    dataset = load_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    ev = cfg["eval"]
    result = experiment.compare(
        dataset,
        ev["rows"],
        base,
        folds=ev["folds"],
        repeats=ev["repeats"],
        seed=cfg["train"]["seed"],
        model_kwargs={"hidden": tuple(cfg["model"]["hidden"]), "proj_dim": cfg["model"]["proj_dim"]},
        primary_threshold=ev["primary_threshold"],
        secondary_threshold=ev["secondary_threshold"],
    )
    _write_json(out / "results.json", result)
    table = experiment.format_table(result)
    (out / "table.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic ordinal dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="CSV path; provenance JSON is written beside it")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=nn.METHODS)
    p.add_argument("--epochs", type=int, help="total epochs (also when resuming)")
    p.add_argument("--data", help="dataset CSV instead of generating one")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--primary", type=int, help="first class counted positive for the primary task")
    p.add_argument("--secondary", type=int, help="first class counted positive for the secondary task")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="cross-validated method / ablation comparison")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", help="comma-separated rows, e.g. ce,pon or ce,PP,PP+PE,PP+PE+pfl,mcl-only,full")
    p.add_argument("--epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--data")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
