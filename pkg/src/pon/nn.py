"""Desk-scale Poisson ordinal network with hand-written reverse mode.

Architecture: an MLP encoder ``f`` (ReLU), a classifier head ``h`` and a
two-layer projector ``g``.  With the Poisson head the classifier emits one
scalar ``z`` and the rate is ``softplus(z)``; the softmax head emits ``K``
logits and the ordinal head ``K - 1`` threshold logits.

The training objective is the batch mean of ``L_cls + L_mcl``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import core_math, losses
from .contrastive import MemoryBank, batch_mcl
from .errors import ConfigError, InvalidInputError, TrainingDivergenceError

log = logging.getLogger(__name__)

METHODS = ("pon", "ce", "focal", "emd", "ordinal", "softlabel")
HEADS = ("poisson", "softmax", "ordinal")


@dataclass
class ModelConfig:
    input_dim: int
    num_classes: int = 5
    hidden: tuple[int, ...] = (64, 32)
    proj_dim: int = 16
    head: str = "poisson"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < 1 or self.proj_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ConfigError("layer widths must be positive and the encoder needs at least one layer")

    @property
    def head_width(self) -> int:
        return {"poisson": 1, "softmax": self.num_classes, "ordinal": self.num_classes - 1}[self.head]


@dataclass
class TrainConfig:
    """Optimisation and objective settings.

    Toggles left as ``None`` take the method's default: ``pon`` enables all
    four components, baselines enable none (``mcl`` may still be switched on
    for any method).
    """

    method: str = "pon"
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-4
    temperature: float = 0.1
    gamma: float = 2.0
    q: int = 20
    seed: int = 0
    poisson_head: bool | None = None
    poisson_encoding: bool | None = None
    pfl: bool | None = None
    mcl: bool | None = None
    soft_sigma: float = 1.0
    weight_mode: str = "clamp"
    mcl_log: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method != "pon":
            for name in ("poisson_head", "poisson_encoding", "pfl"):
                if getattr(self, name):
                    raise ConfigError(f"toggle {name!r} only applies to method 'pon'")
        if self.epochs < 0 or self.batch_size < 1 or self.q < 1:
            raise ConfigError("epochs must be >= 0, batch_size and q >= 1")
        if not (self.lr > 0 and self.temperature > 0 and self.gamma >= 0 and self.soft_sigma > 0):
            raise ConfigError("lr, temperature and soft_sigma must be > 0 and gamma >= 0")
        if self.weight_mode not in losses.WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {losses.WEIGHT_MODES}")

    def toggle(self, name: str) -> bool:
        value = getattr(self, name)
        if value is None:
            return self.method == "pon"
        return bool(value)

    @property
    def head(self) -> str:
        if self.method == "ordinal":
            return "ordinal"
        if self.method == "pon" and self.toggle("poisson_head"):
            return "poisson"
        return "softmax"

    def resolved(self) -> "TrainConfig":
        out = TrainConfig(**asdict(self))
        for name in ("poisson_head", "poisson_encoding", "pfl", "mcl"):
            setattr(out, name, self.toggle(name))
        return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class Forward:
    inputs: list  # input to each encoder layer
    pre: list  # encoder pre-activations
    features: np.ndarray  # encoder output f(x)
    logits: np.ndarray  # classifier output, (B, head_width)
    rate: np.ndarray | None  # (B,) Poisson head only
    pred: np.ndarray | None  # (B, K); None for the ordinal head
    proj_hidden_pre: np.ndarray
    proj_hidden: np.ndarray
    proj_raw: np.ndarray  # g(f(x)) before normalisation
    proj: np.ndarray  # unit-normalised projection


class Model:
    """Parameters are kept in an ordered dict of float64 arrays."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        params: dict[str, np.ndarray] = {}
        widths = (config.input_dim, *config.hidden)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"enc.W{i}"] = glorot(rng, a, b)
            params[f"enc.b{i}"] = np.zeros(b)
        feat = widths[-1]
        params["cls.W"] = glorot(rng, feat, config.head_width)
        params["cls.b"] = np.zeros(config.head_width)
        params["proj.W0"] = glorot(rng, feat, feat)
        params["proj.b0"] = np.zeros(feat)
        params["proj.W1"] = glorot(rng, feat, config.proj_dim)
        params["proj.b1"] = np.zeros(config.proj_dim)
        return cls(config, params)

    @property
    def num_layers(self) -> int:
        return len(self.config.hidden)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x) -> Forward:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.config.input_dim:
            raise InvalidInputError(f"expected {self.config.input_dim} features, got {x.shape[1]}")
        p = self.params
        inputs, pre = [], []
        h = x
        for i in range(self.num_layers):
            inputs.append(h)
            a = h @ p[f"enc.W{i}"] + p[f"enc.b{i}"]
            pre.append(a)
            h = np.maximum(a, 0.0)
        logits = h @ p["cls.W"] + p["cls.b"]
        rate = pred = None
        if self.config.head == "poisson":
            rate = np.asarray(core_math.softplus(logits[:, 0]))
            pred = core_math.poisson_probs(rate, self.config.num_classes)
        elif self.config.head == "softmax":
            pred = core_math.normalize_scores(logits)
        ph_pre = h @ p["proj.W0"] + p["proj.b0"]
        ph = np.maximum(ph_pre, 0.0)
        raw = ph @ p["proj.W1"] + p["proj.b1"]
        norm = np.sqrt(np.sum(raw * raw, axis=1, keepdims=True))
        proj = raw / np.where(norm > 0, norm, 1.0)
        return Forward(inputs, pre, h, logits, rate, pred, ph_pre, ph, raw, proj)

    def predict(self, x) -> tuple[np.ndarray, np.ndarray | None]:
        """Predicted labels and class distributions (``None`` for the ordinal head)."""
        fw = self.forward(x)
        if self.config.head == "ordinal":
            return losses.ordinal_decode(fw.logits), None
        return np.argmax(fw.pred, axis=1), fw.pred

    def backward(self, fw: Forward, d_logits: np.ndarray, d_proj_raw: np.ndarray | None) -> dict[str, np.ndarray]:
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["cls.W"] = fw.features.T @ d_logits
        grads["cls.b"] = d_logits.sum(axis=0)
        d_feat = d_logits @ p["cls.W"].T
        if d_proj_raw is not None:
            grads["proj.W1"] = fw.proj_hidden.T @ d_proj_raw
            grads["proj.b1"] = d_proj_raw.sum(axis=0)
            d_ph = (d_proj_raw @ p["proj.W1"].T) * (fw.proj_hidden_pre > 0)
            grads["proj.W0"] = fw.features.T @ d_ph
            grads["proj.b0"] = d_ph.sum(axis=0)
            d_feat = d_feat + d_ph @ p["proj.W0"].T
        d_h = d_feat
        for i in reversed(range(self.num_layers)):
            d_a = d_h * (fw.pre[i] > 0)
            grads[f"enc.W{i}"] = fw.inputs[i].T @ d_a
            grads[f"enc.b{i}"] = d_a.sum(axis=0)
            if i:
                d_h = d_a @ p[f"enc.W{i}"].T
        return grads


@dataclass
class ObjectiveResult:
    total: float
    grads: dict[str, np.ndarray]
    loss_cls: np.ndarray  # per sample
    loss_mcl: np.ndarray  # per sample
    forward: Forward


def classification_loss(fw: Forward, labels: np.ndarray, config: TrainConfig, num_classes: int) -> losses.LossValue:
    """Per-sample classification loss with ``grad_scores`` w.r.t. the head's scores."""
    m = config.method
    if m == "ordinal":
        return losses.ordinal_bce(fw.logits, labels)
    if m == "ce":
        return losses.cross_entropy(labels, fw.pred)
    if m == "focal":
        return losses.focal_loss(labels, fw.pred, config.gamma)
    if m == "emd":
        return losses.squared_emd(core_math.one_hot_encode(labels, num_classes), fw.pred)
    if m == "softlabel":
        return losses.kl_loss(core_math.soft_label_encode(labels, num_classes, config.soft_sigma), fw.pred)
    if config.toggle("poisson_encoding"):
        target = core_math.poisson_encode(labels, num_classes, config.temperature)
    else:
        target = core_math.one_hot_encode(labels, num_classes)
    if config.toggle("pfl"):
        return losses.poisson_focal_loss(target, fw.pred, labels, config.gamma, weight_mode=config.weight_mode)
    return losses.kl_loss(target, fw.pred)


def backward(model: Model, x, labels, ids, bank: MemoryBank | None, config: TrainConfig) -> ObjectiveResult:
    """Mean over the batch of ``L_cls + L_mcl`` and its exact gradients.

    ``bank`` is read-only here; the caller writes the batch's projections
    after this returns.
    """
    labels = np.asarray(labels, dtype=np.int64)
    fw = model.forward(x)
    batch = labels.shape[0]
    if batch == 0:
        raise InvalidInputError("empty batch")
    k = model.config.num_classes
    cls = classification_loss(fw, labels, config, k)
    loss_cls = np.atleast_1d(cls.value)
    d_scores = cls.grad_scores / batch
    if model.config.head == "poisson":
        d_rate = losses.rate_gradient(d_scores, fw.rate)
        d_logits = (np.atleast_1d(d_rate) * np.atleast_1d(core_math.softplus_grad(fw.logits[:, 0])))[:, None]
    else:
        d_logits = d_scores

    loss_mcl = np.zeros(batch)
    d_proj = None
    if config.toggle("mcl"):
        d_proj = np.zeros_like(fw.proj_raw)
        if bank is not None and len(bank):
            ok = np.sum(fw.proj_raw * fw.proj_raw, axis=1) > 0
            if np.any(ok):
                rows = np.flatnonzero(ok)
                vals, grads, _ = batch_mcl(
                    bank, fw.proj_raw[rows], labels[rows], np.asarray(ids)[rows], config.q, config.mcl_log
                )
                loss_mcl[rows] = vals
                d_proj[rows] = grads / batch
    grads = model.backward(fw, d_logits, d_proj)
    total = float(np.mean(loss_cls + loss_mcl))
    return ObjectiveResult(total, grads, loss_cls, loss_mcl, fw)


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise InvalidInputError(f"gradient shape mismatch for {k}")
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls.__new__(cls)
        opt.lr, opt.beta1, opt.beta2, opt.eps = state["lr"], state["beta1"], state["beta2"], state["eps"]
        opt.t = int(state["t"])
        opt.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        opt.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
        return opt


class WeightedSampler:
    """Class-balanced index stream: pick a class uniformly, then a member uniformly."""

    def __init__(self, labels, num_classes: int):
        labels = np.asarray(labels, dtype=np.int64)
        counts = np.bincount(labels, minlength=num_classes)
        if len(counts) > num_classes or np.any(counts == 0):
            missing = [c for c in range(num_classes) if c >= len(counts) or counts[c] == 0]
            raise ConfigError(f"weighted sampler needs every class present; missing {missing}")
        self.num_classes = num_classes
        self.counts = counts
        self.members = np.argsort(labels, kind="stable")
        self.offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        cls = rng.integers(self.num_classes, size=n)
        pos = np.floor(rng.random(n) * self.counts[cls]).astype(np.int64)
        return self.members[self.offsets[cls] + pos]


def weighted_sampler(labels, num_classes: int, rng: np.random.Generator, n: int) -> np.ndarray:
    return WeightedSampler(labels, num_classes).draw(n, rng)


EpochCallback = Callable[[dict], None]


@dataclass
class Trainer:
    """Mutable training state: model, optimiser, memory bank, RNG and history."""

    model: Model
    optimizer: Adam
    bank: MemoryBank | None
    rng: np.random.Generator
    config: TrainConfig
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, dataset, config: TrainConfig, model_config: ModelConfig | None = None) -> "Trainer":
        rng = np.random.default_rng(config.seed)
        if model_config is None:
            model_config = ModelConfig(input_dim=dataset.features.shape[1], num_classes=dataset.num_classes, head=config.head)
        elif model_config.head != config.head:
            raise ConfigError(f"model head {model_config.head!r} does not match method head {config.head!r}")
        model = Model.init(model_config, rng)
        bank = None
        if config.toggle("mcl"):
            bank = MemoryBank(len(dataset), model_config.proj_dim, model_config.num_classes)
        return cls(model, Adam(model.params, lr=config.lr), bank, rng, config)

    def run_epoch(self, dataset, val=None) -> dict:
        cfg = self.config
        k = self.model.config.num_classes
        sampler = WeightedSampler(dataset.labels, k)
        order = sampler.draw(len(dataset), self.rng)
        sum_cls = sum_mcl = 0.0
        correct = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x, y, ids = dataset.features[idx], dataset.labels[idx], dataset.ids[idx]
            res = backward(self.model, x, y, ids, self.bank, cfg)
            if not np.isfinite(res.total):
                raise TrainingDivergenceError(f"non-finite loss at epoch {self.epoch + 1}, batch {b}", batch_index=b, epoch=self.epoch + 1)
            self.optimizer.step(self.model.params, res.grads)
            bad = [name for name, v in self.model.params.items() if not np.all(np.isfinite(v))]
            if bad:
                raise TrainingDivergenceError(
                    f"non-finite parameters {bad} after epoch {self.epoch + 1}, batch {b}", batch_index=b, epoch=self.epoch + 1
                )
            if self.bank is not None:
                fw = res.forward
                keep = np.any(fw.proj_raw != 0, axis=1)
                self.bank.update_batch(ids[keep], fw.proj[keep], y[keep])
            sum_cls += float(res.loss_cls.sum())
            sum_mcl += float(res.loss_mcl.sum())
            if self.model.config.head == "ordinal":
                pred = losses.ordinal_decode(res.forward.logits)
            else:
                pred = np.argmax(res.forward.pred, axis=1)
            correct += int(np.sum(pred == y))
        n = len(order)
        self.epoch += 1
        record = {
            "epoch": self.epoch,
            "loss_total": (sum_cls + sum_mcl) / n,
            "loss_pfl": sum_cls / n,
            "loss_mcl": sum_mcl / n,
            "train_acc": correct / n,
            "val": None if val is None else validation_metrics(self.model, val),
        }
        self.history.append(record)
        return record

    def fit(self, dataset, epochs: int | None = None, val=None, on_epoch: EpochCallback | None = None) -> list:
        epochs = self.config.epochs if epochs is None else epochs
        for _ in range(epochs):
            record = self.run_epoch(dataset, val)
            log.debug("epoch %d loss %.6f", record["epoch"], record["loss_total"])
            if on_epoch is not None:
                on_epoch(record)
        return self.history


def validation_metrics(model: Model, dataset) -> dict:
    from . import metrics

    labels_pred, probs = model.predict(dataset.features)
    k = model.config.num_classes
    cm = metrics.confusion_matrix(dataset.labels, labels_pred, k)
    out = {
        "acc": metrics.accuracy(cm),
        "qwk": metrics.qwk(dataset.labels, labels_pred, k),
        "macro_f1": metrics.macro_f1(cm, warn=False),
        "macro_auc": None,
    }
    if probs is not None:
        try:
            out["macro_auc"] = metrics.macro_auc(dataset.labels, probs, warn=False)
        except Exception:  # undefined on degenerate validation sets
            out["macro_auc"] = None
    return out


def train(dataset, config: TrainConfig, model_config: ModelConfig | None = None, val=None, on_epoch: EpochCallback | None = None) -> Trainer:
    """Train from scratch; returns the trainer holding params, history and bank."""
    trainer = Trainer.create(dataset, config, model_config)
    trainer.fit(dataset, val=val, on_epoch=on_epoch)
    return trainer


def train_config_fields() -> set[str]:
    return {f.name for f in fields(TrainConfig)}
