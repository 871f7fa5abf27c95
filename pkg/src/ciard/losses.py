"""Scalar objectives: cross-entropy, temperature-softened KL, the
contrastive push loss, the adaptive two-teacher weight update and the
combined student / teacher objectives.

Each loss also exposes an analytic gradient w.r.t. its logit arguments so
the training loop and the attacks can backprop without an autograd tape.
KL argument order is student distribution first, teacher second.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import LabelError, ParameterError, ShapeError

Array = np.ndarray


@dataclass(frozen=True)
class LossWeights:
    """Weights of the triple-objective student loss.

    w_adv is derived as 1 - w_nat so the pair always sums to one.
    tau_push is the push-loss temperature; tau_kd the distillation
    temperature of the two KL transfer terms.
    """

    w_nat: float = 0.5
    lambda_push: float = 1.0
    eta: float = 0.025
    tau_push: float = 4.0
    tau_kd: float = 1.0
    scale_by_tau2: bool = True
    clamp_push: bool = False
    l_nat_init: float | None = None
    l_adv_init: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.w_nat <= 1.0:
            raise ParameterError("w_nat must lie in [0, 1]")
        if self.lambda_push < 0:
            raise ParameterError("lambda_push must be >= 0")
        if self.tau_push <= 0 or self.tau_kd <= 0:
            raise ParameterError("temperatures must be > 0")

    @property
    def w_adv(self) -> float:
        return 1.0 - self.w_nat


@dataclass
class LossComponents:
    l_nat: float
    l_adv: float
    l_push: float
    l_student: float
    l_adv_teacher: float = float("nan")


def _check_labels(logits: Array, labels: Array) -> Array:
    labels = np.asarray(labels)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("labels/logits batch mismatch")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError("label out of range")
    return labels


def softmax(logits: Array, tau: float = 1.0) -> Array:
    z = logits / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: Array, tau: float = 1.0) -> Array:
    z = logits / tau
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Array, labels: Array) -> float:
    """Batch-mean negative log-likelihood of the true class."""
    labels = _check_labels(logits, labels)
    lsm = log_softmax(logits)
    return float(-lsm[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits: Array, labels: Array) -> tuple[float, Array]:
    labels = _check_labels(logits, labels)
    p = softmax(logits)
    lsm = log_softmax(logits)
    value = float(-lsm[np.arange(len(labels)), labels].mean())
    d = p.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return value, d / len(labels)


def _kl_rows(s_logits: Array, t_logits: Array, tau: float) -> Array:
    """Per-sample KL(softmax(s/tau) || softmax(t/tau))."""
    ps = softmax(s_logits, tau)
    ls = log_softmax(s_logits, tau)
    lt = log_softmax(t_logits, tau)
    return np.maximum((ps * (ls - lt)).sum(axis=1), 0.0)


def softened_kl(s_logits: Array, t_logits: Array, tau: float = 1.0, scale_by_tau2: bool = True) -> float:
    """Batch-mean softened KL, optionally scaled by tau^2."""
    if s_logits.shape != t_logits.shape:
        raise ShapeError("logit shapes differ")
    if tau <= 0:
        raise ParameterError("tau must be > 0")
    v = float(_kl_rows(s_logits, t_logits, tau).mean())
    return v * tau * tau if scale_by_tau2 else v


def softened_kl_grads(
    s_logits: Array, t_logits: Array, tau: float = 1.0, scale_by_tau2: bool = True
) -> tuple[float, Array, Array]:
    """Value plus gradients w.r.t. the student and teacher logits."""
    if s_logits.shape != t_logits.shape:
        raise ShapeError("logit shapes differ")
    if tau <= 0:
        raise ParameterError("tau must be > 0")
    B = s_logits.shape[0]
    ps = softmax(s_logits, tau)
    pt = softmax(t_logits, tau)
    ls = log_softmax(s_logits, tau)
    lt = log_softmax(t_logits, tau)
    rows = (ps * (ls - lt)).sum(axis=1, keepdims=True)
    ds = ps * ((ls - lt) - rows) / tau
    dt = (pt - ps) / tau
    scale = (tau * tau if scale_by_tau2 else 1.0) / B
    value = float(rows.mean()) * (tau * tau if scale_by_tau2 else 1.0)
    return value, ds * scale, dt * scale


def push_error_set(t_logits: Array, labels: Array) -> Array:
    """Indices where the (clean) teacher's argmax misses the label."""
    labels = _check_labels(t_logits, labels)
    return np.nonzero(t_logits.argmax(axis=1) != labels)[0]


def push_loss(t_logits: Array, s_logits: Array, labels: Array, tau: float = 4.0) -> float:
    """Mean softened KL(student || teacher) over the teacher's error set.

    Zero when the teacher classifies every sample correctly. No tau^2
    scaling.
    """
    if t_logits.shape != s_logits.shape:
        raise ShapeError("logit shapes differ")
    J = push_error_set(t_logits, labels)
    if J.size == 0:
        return 0.0
    return float(_kl_rows(s_logits[J], t_logits[J], tau).mean())


def push_loss_grads(t_logits: Array, s_logits: Array, labels: Array, tau: float = 4.0) -> tuple[float, Array]:
    """Push-loss value and its gradient w.r.t. the student logits."""
    if t_logits.shape != s_logits.shape:
        raise ShapeError("logit shapes differ")
    J = push_error_set(t_logits, labels)
    ds_full = np.zeros_like(s_logits)
    if J.size == 0:
        return 0.0, ds_full
    value, ds, _ = softened_kl_grads(s_logits[J], t_logits[J], tau, scale_by_tau2=False)
    ds_full[J] = ds
    return value, ds_full


def adaptive_weight_update(w: LossWeights, l_nat: float, l_adv: float) -> LossWeights:
    """Move w_nat toward the normalized-loss share of the clean term."""
    if w.l_nat_init is None or w.l_adv_init is None:
        raise ParameterError("initial-loss normalizers not set")
    ln = l_nat / w.l_nat_init if w.l_nat_init > 0 else 0.0
    la = l_adv / w.l_adv_init if w.l_adv_init > 0 else 0.0
    total = ln + la
    if total == 0.0:
        return w
    target = ln / total
    w_nat = w.w_nat - w.eta * (w.w_nat - target)
    w_nat = min(1.0, max(0.0, w_nat))
    return replace(w, w_nat=w_nat)


def capture_normalizers(w: LossWeights, l_nat: float, l_adv: float) -> LossWeights:
    return replace(w, l_nat_init=max(l_nat, 1e-12), l_adv_init=max(l_adv, 1e-12))


def teacher_loss(t_adv_logits: Array, labels: Array) -> float:
    """Cross-entropy of the robust teacher on the adversarial batch."""
    return cross_entropy(t_adv_logits, labels)


def student_total_loss(
    s_clean: Array,
    t_nat_clean: Array,
    s_adv: Array,
    t_adv_adv: Array,
    t_nat_adv: Array,
    labels: Array,
    w: LossWeights,
) -> LossComponents:
    """Triple-objective student loss: clean transfer + robust transfer
    minus the contrastive push term."""
    comps, _, _ = student_total_loss_grads(s_clean, t_nat_clean, s_adv, t_adv_adv, t_nat_adv, labels, w)
    return comps


def student_total_loss_grads(
    s_clean: Array,
    t_nat_clean: Array,
    s_adv: Array,
    t_adv_adv: Array,
    t_nat_adv: Array,
    labels: Array,
    w: LossWeights,
) -> tuple[LossComponents, Array, Array]:
    """Loss components plus gradients w.r.t. s_clean and s_adv logits."""
    for t in (t_nat_clean, t_adv_adv, t_nat_adv):
        if t.shape != s_clean.shape:
            raise ShapeError("all logits must share one shape")
    l_nat, d_nat, _ = softened_kl_grads(s_clean, t_nat_clean, w.tau_kd, w.scale_by_tau2)
    l_adv, d_adv, _ = softened_kl_grads(s_adv, t_adv_adv, w.tau_kd, w.scale_by_tau2)
    l_push, d_push = push_loss_grads(t_nat_adv, s_adv, labels, w.tau_push)
    lam = w.lambda_push
    if w.clamp_push and l_push > 0 and lam * l_push > max(l_nat, l_adv):
        # rescale so the subtracted term cannot dominate the transfer terms
        lam = max(l_nat, l_adv) / l_push
    l_student = w.w_adv * l_adv + w.w_nat * l_nat - lam * l_push
    d_clean = w.w_nat * d_nat
    d_advl = w.w_adv * d_adv - lam * d_push
    comps = LossComponents(l_nat=l_nat, l_adv=l_adv, l_push=l_push, l_student=l_student)
    return comps, d_clean, d_advl
