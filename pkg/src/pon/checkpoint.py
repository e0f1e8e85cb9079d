"""JSON checkpoint container.

Arrays are stored as flat lists of Python floats; ``repr`` of a float
round-trips exactly, so save -> load is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .contrastive import MemoryBank
from .errors import ConfigError
from .nn import Adam, Model, ModelConfig, TrainConfig, Trainer

FORMAT = "pon-checkpoint"
VERSION = 1


def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.dtype.str, "shape": list(obj.shape), "data": obj.ravel().tolist()}
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["data"], dtype=np.dtype(obj["__ndarray__"])).reshape(obj["shape"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def trainer_state(trainer: Trainer, extra: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "epoch": trainer.epoch,
        "model_config": asdict(trainer.model.config),
        "train_config": asdict(trainer.config),
        "params": dict(trainer.model.params),
        "adam": trainer.optimizer.state_dict(),
        "bank": None if trainer.bank is None else trainer.bank.state_dict(),
        "rng_state": trainer.rng.bit_generator.state,
        "extra": extra or {},
    }


def save_checkpoint(path, trainer: Trainer, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(_encode(trainer_state(trainer, extra))))


def load_state(path) -> dict:
    try:
        state = _decode(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    if state.get("format") != FORMAT or state.get("version") != VERSION:
        raise ConfigError(f"{path} is not a version-{VERSION} {FORMAT} file")
    return state


def trainer_from_state(state: dict) -> Trainer:
    mc = state["model_config"]
    model = Model(ModelConfig(**{**mc, "hidden": tuple(mc["hidden"])}), state["params"])
    rng = np.random.default_rng()
    rng.bit_generator.state = state["rng_state"]
    bank = None if state["bank"] is None else MemoryBank.from_state(state["bank"])
    return Trainer(
        model=model,
        optimizer=Adam.from_state(state["adam"]),
        bank=bank,
        rng=rng,
        config=TrainConfig(**state["train_config"]),
        epoch=int(state["epoch"]),
    )


def load_checkpoint(path) -> Trainer:
    return trainer_from_state(load_state(path))
