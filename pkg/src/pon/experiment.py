"""Cross-validated comparison of methods and ablation rows.

Each (row, repeat, fold) run is independent and single-threaded, so the
harness may farm runs out to worker processes without changing results.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import data, metrics, nn

log = logging.getLogger(__name__)

# Ablation rows named after the component toggles: Poisson-based prediction
# (PP), Poisson encoding (PE), Poisson focal loss and memory-bank contrast.
ROWS: dict[str, dict] = {
    "ce": dict(method="ce"),
    "focal": dict(method="focal"),
    "emd": dict(method="emd"),
    "ordinal": dict(method="ordinal"),
    "softlabel": dict(method="softlabel"),
    "pon": dict(method="pon"),
    "baseline": dict(method="pon", poisson_head=False, poisson_encoding=False, pfl=False, mcl=False),
    "PP": dict(method="pon", poisson_head=True, poisson_encoding=False, pfl=False, mcl=False),
    "PP+PE": dict(method="pon", poisson_head=True, poisson_encoding=True, pfl=False, mcl=False),
    "PP+PE+pfl": dict(method="pon", poisson_head=True, poisson_encoding=True, pfl=True, mcl=False),
    "mcl-only": dict(method="pon", poisson_head=False, poisson_encoding=False, pfl=False, mcl=True),
    "full": dict(method="pon", poisson_head=True, poisson_encoding=True, pfl=True, mcl=True),
}

TABLE1_ROWS = ["ce", "focal", "emd", "ordinal", "softlabel", "pon"]
ABLATION_ROWS = ["ce", "PP", "PP+PE", "PP+PE+pfl", "mcl-only", "full"]

SCALAR_KEYS = ("acc", "macro_auc", "qwk", "macro_f1")
OP_KEYS = ("sen_at_spec80", "spec_at_sen80", "sen_at_spec90", "spec_at_sen90")


def row_config(name: str, base: nn.TrainConfig) -> nn.TrainConfig:
    if name not in ROWS:
        raise KeyError(f"unknown comparison row {name!r}; known rows: {sorted(ROWS)}")
    fields = asdict(base)
    for toggle in ("poisson_head", "poisson_encoding", "pfl", "mcl"):
        fields[toggle] = None
    fields.update(ROWS[name])
    return nn.TrainConfig(**fields)


@dataclass
class Job:
    row: str
    repeat: int
    fold: int
    config: nn.TrainConfig
    model_kwargs: dict
    train: data.Dataset
    val: data.Dataset
    primary_threshold: int
    secondary_threshold: int


def flatten_report(report: metrics.EvalReport) -> dict:
    out = {k: getattr(report, k) for k in SCALAR_KEYS}
    for task in ("primary", "secondary"):
        section = getattr(report, task) or {}
        for k in OP_KEYS:
            out[f"{task}.{k}"] = section.get(k)
    return out


def run_job(job: Job) -> dict:
    model_config = nn.ModelConfig(
        input_dim=job.train.features.shape[1], num_classes=job.train.num_classes, head=job.config.head, **job.model_kwargs
    )
    trainer = nn.train(job.train, job.config, model_config)
    labels, probs = trainer.model.predict(job.val.features)
    report = metrics.evaluate(
        job.val.labels, labels, probs, job.train.num_classes, job.primary_threshold, job.secondary_threshold
    )
    return flatten_report(report)


def _safe_run(job: Job):
    try:
        return run_job(job), None
    except Exception as exc:  # a failed run marks its row, the harness continues
        return None, f"{type(exc).__name__}: {exc}"


def worker_count() -> int:
    env = os.environ.get("PON_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def compare(
    dataset: data.Dataset,
    rows: list[str],
    base: nn.TrainConfig,
    folds: int = 5,
    repeats: int = 5,
    seed: int = 0,
    model_kwargs: dict | None = None,
    primary_threshold: int = 3,
    secondary_threshold: int = 2,
    workers: int | None = None,
) -> dict:
    """Mean and standard deviation over repeats of the fold-averaged metrics."""
    model_kwargs = model_kwargs or {}
    jobs = []
    for r in range(repeats):
        split_seed = seed + r
        for f, (tr, va) in enumerate(data.kfold_split(dataset, folds, split_seed)):
            train_ds, val_ds = dataset.select_ids(tr), dataset.select_ids(va)
            for name in rows:
                cfg = row_config(name, base)
                cfg.seed = split_seed * 1000 + f
                jobs.append(Job(name, r, f, cfg, model_kwargs, train_ds, val_ds, primary_threshold, secondary_threshold))

    workers = min(workers or worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_safe_run, jobs))
    else:
        outcomes = [_safe_run(j) for j in jobs]

    table = []
    for name in rows:
        runs = [(j, o) for j, o in zip(jobs, outcomes) if j.row == name]
        errors = [err for _, (_, err) in runs if err]
        entry = {"name": name, "config": asdict(row_config(name, base).resolved()), "status": "ok", "metrics": {}}
        if errors:
            entry["status"] = "failed"
            entry["errors"] = errors[:5]
            table.append(entry)
            continue
        keys = list(runs[0][1][0])
        for key in keys:
            per_repeat = []
            for r in range(repeats):
                vals = [res[key] for j, (res, _) in runs if j.repeat == r]
                per_repeat.append(None if any(v is None for v in vals) else float(np.mean(vals)))
            if any(v is None for v in per_repeat):
                entry["metrics"][key] = None
                continue
            arr = np.array(per_repeat)
            entry["metrics"][key] = {
                "mean": float(arr.mean()),
                "sd": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                "per_repeat": per_repeat,
            }
        table.append(entry)
    return {"folds": folds, "repeats": repeats, "seed": seed, "rows": table}


def _cell(stat, percent: bool) -> str:
    if stat is None:
        return "-"
    scale = 100.0 if percent else 1.0
    return f"{stat['mean'] * scale:.2f}±{stat['sd'] * scale:.2f}"


def format_table(result: dict) -> str:
    """Aligned text: Acc/AUC/F1 and operating points in percent, QWK raw."""
    columns = [
        ("Acc", "acc", True),
        ("AUC", "macro_auc", True),
        ("QWK", "qwk", False),
        ("F1", "macro_f1", True),
        ("P:Spec@Sen80", "primary.spec_at_sen80", True),
        ("P:Sen@Spec80", "primary.sen_at_spec80", True),
        ("S:Spec@Sen80", "secondary.spec_at_sen80", True),
        ("S:Sen@Spec80", "secondary.sen_at_spec80", True),
    ]
    header = ["Method"] + [c[0] for c in columns]
    lines = []
    for row in result["rows"]:
        if row["status"] != "ok":
            lines.append([row["name"]] + ["failed"] * len(columns))
        else:
            lines.append([row["name"]] + [_cell(row["metrics"].get(key), pct) for _, key, pct in columns])
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *map(fmt, lines)]) + "\n"
