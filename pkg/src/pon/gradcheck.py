"""Central finite-difference checks of every analytic gradient.

Relative error is ``|a - n| / max(|a|, |n|, FLOOR)``; the floor keeps
entries whose true gradient vanishes from dividing rounding noise by zero.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import core_math, losses
from .contrastive import MemoryBank, mcl_loss
from .nn import Model, ModelConfig, TrainConfig, backward

STEP = 1e-6
TOLERANCE = 1e-4
FLOOR = 1e-6


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def central_difference(fn, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` (perturbed in place, then restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


@dataclass
class ComponentResult:
    name: str
    configs: int = 0
    max_rel_error: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.configs > 0

    def record(self, err: float, detail: str) -> None:
        self.configs += 1
        self.max_rel_error = max(self.max_rel_error, err)
        if not err < TOLERANCE:
            self.failures.append(f"{detail}: rel err {err:.3e}")


def _rate_check(result: ComponentResult, loss_fn, rng, n: int, gammas=(0.0, 1.0, 2.0)) -> None:
    for i in range(n):
        k = int(rng.choice([3, 5, 8]))
        y = int(rng.integers(k))
        lam = float(rng.uniform(0.1, 10.0))
        gamma = float(gammas[i % len(gammas)])
        t = float(rng.choice([0.1, 0.5, 1.0]))
        target = core_math.poisson_encode(y, k, t)

        def value(r):
            return loss_fn(target, core_math.poisson_probs(r, k), y, gamma, None).value

        analytic = loss_fn(target, core_math.poisson_probs(lam, k), y, gamma, lam).gradient_wrt_rate
        numeric = (value(lam + STEP) - value(lam - STEP)) / (2 * STEP)
        result.record(relative_error(analytic, numeric), f"K={k} y={y} rate={lam:.4f} gamma={gamma} t={t}")


def check_poisson_focal(n: int = 24, seed: int = 0) -> ComponentResult:
    res = ComponentResult("poisson_focal_loss")
    _rate_check(res, lambda P, Q, y, g, r: losses.poisson_focal_loss(P, Q, y, g, rate=r), np.random.default_rng(seed), n)
    return res


def check_cross_entropy(n: int = 20, seed: int = 1) -> ComponentResult:
    res = ComponentResult("cross_entropy")
    _rate_check(res, lambda P, Q, y, g, r: losses.cross_entropy(y, Q, rate=r), np.random.default_rng(seed), n)
    return res


def check_focal(n: int = 21, seed: int = 2) -> ComponentResult:
    res = ComponentResult("focal_loss")
    _rate_check(res, lambda P, Q, y, g, r: losses.focal_loss(y, Q, g, rate=r), np.random.default_rng(seed), n)
    return res


def check_emd(n: int = 20, seed: int = 3) -> ComponentResult:
    res = ComponentResult("squared_emd")
    _rate_check(res, lambda P, Q, y, g, r: losses.squared_emd(core_math.one_hot_encode(y, len(Q)), Q, rate=r), np.random.default_rng(seed), n)
    return res


def check_mcl(n: int = 21, seed: int = 4, dim: int = 8) -> ComponentResult:
    res = ComponentResult("mcl_loss")
    rng = np.random.default_rng(seed)
    qs = (1, 5, 20)
    for i in range(n):
        q = qs[i % len(qs)]
        bank = MemoryBank(40, dim, 3)
        bank.update_batch(range(40), rng.standard_normal((40, dim)), rng.integers(3, size=40))
        query = rng.standard_normal(dim)
        label = int(rng.integers(3))
        neighbors = [(e.vector, e.label) for e in bank.query_nearest(query, q)]
        for log_variant in (False, True):
            analytic = mcl_loss(query, label, neighbors, log_variant).grad_query
            numeric = central_difference(lambda: mcl_loss(query, label, neighbors, log_variant).value, query)
            res.record(relative_error(analytic, numeric), f"q={q} log={log_variant}")
    return res


MODEL_VARIANTS = [
    dict(method="pon", poisson_head=a, poisson_encoding=b, pfl=c, mcl=d)
    for a, b, c, d in itertools.product([True, False], repeat=4)
] + [dict(method=m, mcl=d) for m in ("ce", "focal", "emd", "ordinal", "softlabel") for d in (False, True)]


def check_model(seed: int = 5, variants=None) -> ComponentResult:
    """Whole-network gradients on a tiny net: 2 inputs, 4 hidden, K=3, d_p=2, batch of 2."""
    res = ComponentResult("model")
    rng = np.random.default_rng(seed)
    for spec in variants or MODEL_VARIANTS:
        cfg = TrainConfig(q=3, **spec)
        model = Model.init(ModelConfig(input_dim=2, num_classes=3, hidden=(4,), proj_dim=2, head=cfg.head), rng)
        for name in model.params:
            if ".b" in name:
                model.params[name] = 0.1 * rng.standard_normal(model.params[name].shape)
        x = rng.standard_normal((2, 2))
        y = np.array([1, 2])
        ids = np.array([0, 1])
        bank = MemoryBank(8, 2, 3)
        bank.update_batch(range(8), rng.standard_normal((8, 2)), rng.integers(3, size=8))
        analytic = backward(model, x, y, ids, bank, cfg).grads
        worst = 0.0
        for name, p in model.params.items():
            numeric = central_difference(lambda: backward(model, x, y, ids, bank, cfg).total, p)
            worst = max(worst, relative_error(analytic[name], numeric))
        res.record(worst, " ".join(f"{k}={v}" for k, v in spec.items()))
    return res


SUITES = {
    "poisson_focal_loss": check_poisson_focal,
    "cross_entropy": check_cross_entropy,
    "focal_loss": check_focal,
    "squared_emd": check_emd,
    "mcl_loss": check_mcl,
    "model": check_model,
}


def run_all(seed: int = 0) -> dict:
    """Run every suite; ``report["passed"]`` is the overall verdict."""
    start = time.perf_counter()
    components = {}
    for i, (name, fn) in enumerate(SUITES.items()):
        r = fn(seed=seed + i)
        components[name] = {
            "configs": r.configs,
            "max_rel_error": r.max_rel_error,
            "passed": r.passed,
            "failures": r.failures[:10],
        }
    return {
        "passed": all(c["passed"] for c in components.values()),
        "tolerance": TOLERANCE,
        "step": STEP,
        "components": components,
        "failed": [k for k, c in components.items() if not c["passed"]],
        "seconds": time.perf_counter() - start,
    }
