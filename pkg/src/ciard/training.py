"""Teacher pretraining and the cyclic dual-teacher distillation loop.

The student minimizes a triple objective (clean transfer, robust
transfer, minus the contrastive push term) with per-batch adaptive
weights; the robust teacher is frozen for the first ``freeze_epochs``
epochs and then retrained per batch on the student's adversarial
examples at a low learning rate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks, data, losses, nnkit
from .errors import ConfigError, NumericError, TrainingError

LOG_COLUMNS = "epoch,l_nat,l_adv,l_push,l_student,l_teacher,w_nat,lr,teacher_updated"


@dataclass
class TrainConfig:
    epochs: int = 300
    freeze_epochs: int = 50
    batch_size: int = 64
    lr0: float = 0.1
    lr_min: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 2e-4
    teacher_lr: float = 1e-5
    teacher_momentum: float = 0.0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    train_attack: attacks.AttackConfig = field(
        default_factory=lambda: attacks.AttackConfig(iters=10, step=2 / 255, epsilon=8 / 255)
    )
    enable_push: bool = True
    enable_itt: bool = True
    normalizer_mode: str = "first_batch"  # or "epoch_mean"
    augment: data.AugmentConfig | None = None
    trades_beta: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.freeze_epochs >= self.epochs:
            raise ConfigError("freeze_epochs must be < epochs")
        if self.enable_itt and self.teacher_lr <= 0:
            raise ConfigError("teacher_lr must be > 0 when ITT is on")
        if self.normalizer_mode not in ("first_batch", "epoch_mean"):
            raise ConfigError(f"unknown normalizer_mode {self.normalizer_mode!r}")


@dataclass
class EpochLog:
    epoch: int
    l_nat: float
    l_adv: float
    l_push: float
    l_student: float
    l_adv_teacher: float
    w_nat: float
    w_adv: float
    lr: float
    teacher_updated: bool
    wall_time: float = 0.0
    t_nat_digest: str = ""
    t_adv_digest: str = ""


def write_epoch_logs(logs: list[EpochLog], path) -> None:
    lines = [LOG_COLUMNS]
    for lg in logs:
        lines.append(
            f"{lg.epoch},{lg.l_nat:.6f},{lg.l_adv:.6f},{lg.l_push:.6f},"
            f"{lg.l_student:.6f},{lg.l_adv_teacher:.6f},{lg.w_nat:.6f},"
            f"{lg.lr:.8f},{int(lg.teacher_updated)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    return nnkit.cosine_lr(epoch, total=cfg.epochs, hold=cfg.freeze_epochs, lr0=cfg.lr0, lr_min=cfg.lr_min)


def _check_finite(value: float, epoch: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)


def pretrain_clean_teacher(spec: nnkit.ModelSpec, dataset: data.Dataset, cfg: TrainConfig) -> nnkit.ModelHandle:
    """Plain cross-entropy SGD training."""
    model = nnkit.ModelHandle.create(spec, seed=cfg.seed)
    opt = nnkit.OptState(lr=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = _epoch_lr(cfg, epoch - 1)
        for bi, (x, y) in enumerate(data.batches(dataset, cfg.batch_size, shuffle=True, seed=cfg.seed + epoch)):
            if cfg.augment:
                x = data.augment(x, cfg.augment, epoch, bi)
            try:
                value, grads, _ = nnkit.gradients(model, x, lambda lg: losses.cross_entropy_grad(lg, y))
            except NumericError as e:
                raise TrainingError(f"diverged at epoch {epoch}: {e}", epoch=epoch) from e
            _check_finite(value, epoch)
            nnkit.sgd_step(model, grads, opt)
    return model


def pretrain_robust_teacher(
    spec: nnkit.ModelSpec, dataset: data.Dataset, cfg: TrainConfig, mode: str = "sat"
) -> nnkit.ModelHandle:
    """Adversarial pretraining: SAT (CE on attacked inputs) or TRADES
    (clean CE plus beta * KL between attacked and clean predictions)."""
    if mode not in ("sat", "trades"):
        raise ConfigError(f"unknown robust pretraining mode {mode!r}")
    model = nnkit.ModelHandle.create(spec, seed=cfg.seed)
    opt = nnkit.OptState(lr=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    atk = cfg.train_attack
    if mode == "trades":
        atk = replace(atk, objective=attacks.Objective.KL_SELF)
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = _epoch_lr(cfg, epoch - 1)
        for bi, (x, y) in enumerate(data.batches(dataset, cfg.batch_size, shuffle=True, seed=cfg.seed + epoch)):
            if cfg.augment:
                x = data.augment(x, cfg.augment, epoch, bi)
            try:
                adv = attacks.pgd(model, x, y, replace(atk, seed=hash((cfg.seed, epoch, bi)) & 0x7FFFFFFF))
            except NumericError as e:
                raise TrainingError(f"diverged at epoch {epoch}: {e}", epoch=epoch) from e
            if mode == "sat":
                value, grads, _ = nnkit.gradients(model, adv.x_adv, lambda lg: losses.cross_entropy_grad(lg, y))
            else:
                logits_c, cache_c = nnkit.forward_cache(model, x)
                logits_a, cache_a = nnkit.forward_cache(model, adv.x_adv)
                ce, d_ce = losses.cross_entropy_grad(logits_c, y)
                kl, d_s, d_t = losses.softened_kl_grads(logits_a, logits_c, tau=1.0, scale_by_tau2=False)
                value = ce + cfg.trades_beta * kl
                g_c, _ = nnkit.backward(model, cache_c, d_ce + cfg.trades_beta * d_t)
                g_a, _ = nnkit.backward(model, cache_a, cfg.trades_beta * d_s)
                grads = {k: g_c[k] + g_a[k] for k in g_c}
            _check_finite(value, epoch)
            nnkit.sgd_step(model, grads, opt)
    return model


def ciard_train(
    student_spec: nnkit.ModelSpec,
    t_nat: nnkit.ModelHandle,
    t_adv: nnkit.ModelHandle,
    dataset: data.Dataset,
    cfg: TrainConfig,
) -> tuple[nnkit.ModelHandle, list[EpochLog]]:
    """Cyclic dual-teacher distillation; returns the student and per-epoch logs."""
    student = nnkit.ModelHandle.create(student_spec, seed=cfg.seed)
    t_nat = t_nat.copy()
    t_nat.frozen = True
    t_adv = t_adv.copy()
    opt = nnkit.OptState(lr=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    t_opt = nnkit.OptState(lr=cfg.teacher_lr, momentum=cfg.teacher_momentum, weight_decay=cfg.weight_decay)
    weights = cfg.weights
    logs: list[EpochLog] = []
    first_batch = True
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = _epoch_lr(cfg, epoch - 1)
        teacher_updates = epoch > cfg.freeze_epochs and cfg.enable_itt
        t_adv.frozen = not teacher_updates
        sums = np.zeros(5)
        n_batches = 0
        for bi, (x, y) in enumerate(data.batches(dataset, cfg.batch_size, shuffle=True, seed=cfg.seed + epoch)):
            if cfg.augment:
                x = data.augment(x, cfg.augment, epoch, bi)
            atk = replace(cfg.train_attack, seed=hash((cfg.seed, epoch, bi)) & 0x7FFFFFFF)
            teacher_for_attack = t_nat if atk.objective is attacks.Objective.KL_JOINT else None
            try:
                adv = attacks.pgd(student, x, y, atk, teacher=teacher_for_attack)
            except NumericError as e:
                raise TrainingError(f"diverged at epoch {epoch}: {e}", epoch=epoch) from e
            x_adv = adv.x_adv

            s_clean, cache_c = nnkit.forward_cache(student, x)
            s_adv, cache_a = nnkit.forward_cache(student, x_adv)
            t_nat_clean = nnkit.forward(t_nat, x)
            t_nat_adv = nnkit.forward(t_nat, x_adv)
            t_adv_logits, t_cache = nnkit.forward_cache(t_adv, x_adv)

            w_eff = weights if cfg.enable_push else replace(weights, lambda_push=0.0)
            comps, d_clean, d_advl = losses.student_total_loss_grads(
                s_clean, t_nat_clean, s_adv, t_adv_logits, t_nat_adv, y, w_eff
            )
            _check_finite(comps.l_student, epoch)

            if first_batch and cfg.normalizer_mode == "first_batch":
                weights = losses.capture_normalizers(weights, comps.l_nat, comps.l_adv)
                first_batch = False
            if weights.l_nat_init is not None:
                weights = losses.adaptive_weight_update(weights, comps.l_nat, comps.l_adv)

            g_c, _ = nnkit.backward(student, cache_c, d_clean)
            g_a, _ = nnkit.backward(student, cache_a, d_advl)
            nnkit.sgd_step(student, {k: g_c[k] + g_a[k] for k in g_c}, opt)

            l_teacher, d_teacher = losses.cross_entropy_grad(t_adv_logits, y)
            comps.l_adv_teacher = l_teacher
            if teacher_updates:
                tg, _ = nnkit.backward(t_adv, t_cache, d_teacher)
                nnkit.sgd_step(t_adv, tg, t_opt)

            sums += (comps.l_nat, comps.l_adv, comps.l_push, comps.l_student, l_teacher)
            n_batches += 1
        means = sums / max(n_batches, 1)
        if epoch == 1 and cfg.normalizer_mode == "epoch_mean":
            weights = losses.capture_normalizers(weights, means[0], means[1])
        logs.append(
            EpochLog(
                epoch=epoch,
                l_nat=means[0],
                l_adv=means[1],
                l_push=means[2],
                l_student=means[3],
                l_adv_teacher=means[4],
                w_nat=weights.w_nat,
                w_adv=weights.w_adv,
                lr=opt.lr,
                teacher_updated=teacher_updates,
                wall_time=time.perf_counter() - t0,
                t_nat_digest=nnkit.param_digest(t_nat),
                t_adv_digest=nnkit.param_digest(t_adv),
            )
        )
    return student, logs
