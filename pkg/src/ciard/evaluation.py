"""Metrics and reporting: clean accuracy, per-attack robust accuracy,
weighted robustness (mean of clean and robust), black-box transfer
evaluation and CSV/markdown tables."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import attacks, data, nnkit
from .errors import ConfigError

EVAL_ATTACKS = ("fgsm", "pgd_sat", "pgd_trades", "cw", "square")

CSV_COLUMNS = "model,attack,clean,robust,w_robust,n_samples"


@dataclass
class MetricsRecord:
    model_id: str
    attack_id: str
    clean_acc: float
    robust_acc: float
    w_robust: float
    n_samples: int


def accuracy(model: nnkit.ModelHandle, dataset: data.Dataset, batch_size: int = 256) -> float:
    """Percent of samples whose argmax logit matches the label."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if dataset.num_classes != model.spec.num_classes:
        raise ConfigError("dataset classes do not match model head")
    correct = 0
    for x, y in data.batches(dataset, batch_size):
        correct += int((nnkit.forward(model, x).argmax(axis=1) == y).sum())
    return 100.0 * correct / len(dataset)


def eval_attack_config(name: str, base: attacks.AttackConfig | None = None) -> attacks.AttackConfig:
    """Evaluation-protocol defaults per attack name."""
    cfg = base if base is not None else attacks.AttackConfig()
    if name == "fgsm":
        return replace(cfg, iters=1, step=max(cfg.epsilon, 1e-12), objective=attacks.Objective.CE_LABEL, rand_init=False)
    if name == "pgd_sat":
        return replace(cfg, iters=20, objective=attacks.Objective.CE_LABEL)
    if name == "pgd_trades":
        return replace(cfg, iters=20, objective=attacks.Objective.KL_SELF)
    if name == "cw":
        return replace(cfg, iters=30, objective=attacks.Objective.CW_MARGIN)
    if name == "square":
        return cfg
    raise ConfigError(f"unknown attack {name!r}")


def _craft(name: str, model: nnkit.ModelHandle, x, y, cfg: attacks.AttackConfig):
    if name == "square":
        return attacks.square_attack(lambda b: nnkit.forward(model, b), x, y, cfg)
    return attacks.pgd(model, x, y, eval_attack_config(name, cfg))


def robust_accuracy(
    model: nnkit.ModelHandle,
    dataset: data.Dataset,
    attack_name: str,
    cfg: attacks.AttackConfig | None = None,
    surrogate: nnkit.ModelHandle | None = None,
    batch_size: int = 256,
) -> float:
    """Accuracy on adversarial examples. Crafted on ``surrogate`` when
    given (transfer setting), on ``model`` itself otherwise."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    cfg = cfg if cfg is not None else attacks.AttackConfig()
    crafted_on = surrogate if surrogate is not None else model
    correct = 0
    for bi, (x, y) in enumerate(data.batches(dataset, batch_size)):
        adv = _craft(attack_name, crafted_on, x, y, replace(cfg, seed=cfg.seed + bi))
        correct += int((nnkit.forward(model, adv.x_adv).argmax(axis=1) == y).sum())
    return 100.0 * correct / len(dataset)


def weighted_robustness(clean: float, robust: float) -> float:
    """Mean of clean and robust accuracy, two decimals."""
    if not (0 <= clean <= 100 and 0 <= robust <= 100):
        raise ConfigError("accuracies must lie in [0, 100]")
    return round((clean + robust) / 2.0, 2)


def evaluate_model(
    model: nnkit.ModelHandle,
    dataset: data.Dataset,
    attack_names,
    cfg: attacks.AttackConfig | None = None,
    model_id: str = "model",
    batch_size: int = 256,
) -> list[MetricsRecord]:
    clean = accuracy(model, dataset, batch_size)
    records = []
    for name in attack_names:
        robust = robust_accuracy(model, dataset, name, cfg, batch_size=batch_size)
        records.append(
            MetricsRecord(
                model_id=model_id,
                attack_id=name,
                clean_acc=clean,
                robust_acc=robust,
                w_robust=weighted_robustness(clean, robust),
                n_samples=len(dataset),
            )
        )
    return records


def transfer_eval(
    surrogate: nnkit.ModelHandle,
    target: nnkit.ModelHandle,
    dataset: data.Dataset,
    attack_name: str,
    cfg: attacks.AttackConfig | None = None,
    batch_size: int = 256,
) -> MetricsRecord:
    """Black-box transfer: craft on the surrogate, measure on the target."""
    clean = accuracy(target, dataset, batch_size)
    robust = robust_accuracy(target, dataset, attack_name, cfg, surrogate=surrogate, batch_size=batch_size)
    return MetricsRecord(
        model_id="transfer",
        attack_id=attack_name,
        clean_acc=clean,
        robust_acc=robust,
        w_robust=weighted_robustness(clean, robust),
        n_samples=len(dataset),
    )


def _sorted(records: list[MetricsRecord]) -> list[MetricsRecord]:
    return sorted(records, key=lambda r: (r.attack_id, r.model_id))


def records_csv(records: list[MetricsRecord]) -> str:
    lines = [CSV_COLUMNS]
    for r in _sorted(records):
        w = weighted_robustness(r.clean_acc, r.robust_acc)
        lines.append(f"{r.model_id},{r.attack_id},{r.clean_acc:.2f},{r.robust_acc:.2f},{w:.2f},{r.n_samples}")
    return "\n".join(lines) + "\n"


def parse_records_csv(text: str) -> list[MetricsRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CSV_COLUMNS:
        raise ConfigError("bad metrics CSV header")
    records = []
    for ln in lines[1:]:
        model_id, attack_id, clean, robust, w, n = ln.split(",")
        clean_f, robust_f = float(clean), float(robust)
        if abs(float(w) - (clean_f + robust_f) / 2.0) > 0.01:
            raise ConfigError(f"w_robust violates the mean identity in row {ln!r}")
        records.append(MetricsRecord(model_id, attack_id, clean_f, robust_f, float(w), int(n)))
    return records


def report(records: list[MetricsRecord]) -> str:
    """Aligned markdown table; W-Robust recomputed from Clean/Robust."""
    if not records:
        raise ConfigError("no records to report")
    rows = [("Attack", "Defense", "Clean", "Robust", "W-Robust")]
    for r in _sorted(records):
        w = weighted_robustness(r.clean_acc, r.robust_acc)
        rows.append((r.attack_id, r.model_id, f"{r.clean_acc:.2f}", f"{r.robust_acc:.2f}", f"{w:.2f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    out = []
    for j, row in enumerate(rows):
        out.append("| " + " | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) + " |")
        if j == 0:
            out.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(out) + "\n"
