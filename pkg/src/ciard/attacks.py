"""Inner-maximization and evaluation attacks.

White-box: FGSM, PGD with selectable objective (label CE, self-KL, joint
student/clean-teacher KL, CW-infinity margin). Black-box: Square Attack
random search over +-epsilon patches. All attacks return perturbed
batches confined to the L-infinity ball around the reference batch,
intersected with the [0, 1] pixel range, and track the best-objective
iterate seen.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses, nnkit
from .errors import ConfigError, ParameterError

Array = np.ndarray


class Objective(enum.Enum):
    CE_LABEL = "ce_label"
    KL_SELF = "kl_self"
    KL_JOINT = "kl_joint"
    CW_MARGIN = "cw_margin"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step: float = 2 / 255
    iters: int = 10
    objective: Objective = Objective.CE_LABEL
    rand_init: bool = True
    kappa: float = 0.0
    query_budget: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterError("epsilon must be >= 0")
        if self.iters > 0 and self.step <= 0:
            raise ParameterError("step must be > 0 when iterating")
        if self.query_budget < 0:
            raise ParameterError("query_budget must be >= 0")


@dataclass
class AdvBatch:
    x_adv: Array
    x_ref: Array
    achieved_objective: Array
    queries_used: int = 0
    accept_trace: list | None = None


def project(x_adv: Array, x_ref: Array, epsilon: float) -> Array:
    """Clamp into the epsilon-ball around x_ref intersected with [0, 1]."""
    lo = np.maximum(x_ref - epsilon, 0.0)
    hi = np.minimum(x_ref + epsilon, 1.0)
    return np.clip(x_adv, lo, hi)


def _per_sample_objective(
    model: nnkit.ModelHandle,
    x: Array,
    y: Array,
    cfg: AttackConfig,
    teacher: nnkit.ModelHandle | None,
    ref_logits: Array | None,
) -> tuple[Array, Array]:
    """Per-sample objective values and gradient w.r.t. x."""
    logits, cache = nnkit.forward_cache(model, x)
    B = len(x)
    if cfg.objective is Objective.CE_LABEL:
        vals = -losses.log_softmax(logits)[np.arange(B), y]
        d = losses.softmax(logits)
        d[np.arange(B), y] -= 1.0
        _, dx = nnkit.backward(model, cache, d.astype(logits.dtype))
        return vals, dx
    if cfg.objective is Objective.KL_SELF:
        assert ref_logits is not None
        vals = losses._kl_rows(logits, ref_logits, 1.0)
        ps = losses.softmax(logits)
        rows = vals[:, None]
        ds = ps * ((losses.log_softmax(logits) - losses.log_softmax(ref_logits)) - rows)
        _, dx = nnkit.backward(model, cache, ds.astype(logits.dtype))
        return vals, dx
    if cfg.objective is Objective.KL_JOINT:
        if teacher is None:
            raise ConfigError("KL_JOINT objective needs a clean teacher")
        t_logits, t_cache = nnkit.forward_cache(teacher, x)
        vals = losses._kl_rows(logits, t_logits, 1.0)
        ps = losses.softmax(logits)
        pt = losses.softmax(t_logits)
        rows = vals[:, None]
        ds = ps * ((losses.log_softmax(logits) - losses.log_softmax(t_logits)) - rows)
        dt = pt - ps
        _, dx_s = nnkit.backward(model, cache, ds.astype(logits.dtype))
        _, dx_t = nnkit.backward(teacher, t_cache, dt.astype(t_logits.dtype))
        return vals, dx_s + dx_t
    if cfg.objective is Objective.CW_MARGIN:
        other = logits.copy()
        other[np.arange(B), y] = -np.inf
        best_other = other.max(axis=1)
        margin = best_other - logits[np.arange(B), y]
        vals = np.maximum(margin, -cfg.kappa)
        active = margin > -cfg.kappa
        d = np.zeros_like(logits)
        j = other.argmax(axis=1)
        d[np.arange(B), j] = np.where(active, 1.0, 0.0)
        d[np.arange(B), y] = np.where(active, -1.0, 0.0)
        _, dx = nnkit.backward(model, cache, d.astype(logits.dtype))
        return vals, dx
    raise ConfigError(f"unsupported objective {cfg.objective}")


def pgd(
    model: nnkit.ModelHandle,
    x: Array,
    y: Array,
    cfg: AttackConfig,
    teacher: nnkit.ModelHandle | None = None,
) -> AdvBatch:
    """Projected signed-gradient ascent; returns the best iterate seen
    (including the possibly randomized start point)."""
    if cfg.iters < 1:
        raise ConfigError("pgd needs iters >= 1")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)
    ref_logits = None
    if cfg.objective is Objective.KL_SELF:
        ref_logits = nnkit.forward(model, x)
    if cfg.rand_init and cfg.epsilon > 0:
        x_adv = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32)
        x_adv = project(x_adv, x, cfg.epsilon)
    else:
        x_adv = x.copy()

    best_vals, _ = _per_sample_objective(model, x_adv, y, cfg, teacher, ref_logits)
    best_x = x_adv.copy()
    for _ in range(cfg.iters):
        _, dx = _per_sample_objective(model, x_adv, y, cfg, teacher, ref_logits)
        x_adv = project(x_adv + cfg.step * np.sign(dx), x, cfg.epsilon)
        vals, _ = _per_sample_objective(model, x_adv, y, cfg, teacher, ref_logits)
        improved = vals >= best_vals
        best_vals = np.where(improved, vals, best_vals)
        idx = np.nonzero(improved)[0]
        best_x[idx] = x_adv[idx]
    return AdvBatch(x_adv=best_x, x_ref=x, achieved_objective=best_vals)


def fgsm(model: nnkit.ModelHandle, x: Array, y: Array, epsilon: float) -> AdvBatch:
    """Single signed-gradient step on the label CE; the one-iteration,
    no-random-start special case of pgd."""
    step = epsilon if epsilon > 0 else 1.0
    cfg = AttackConfig(epsilon=epsilon, step=step, iters=1, objective=Objective.CE_LABEL, rand_init=False)
    return pgd(model, x, y, cfg)


def cw_linf(model: nnkit.ModelHandle, x: Array, y: Array, cfg: AttackConfig | None = None) -> AdvBatch:
    """PGD ascent on the CW margin (runner-up logit minus true logit,
    floored at -kappa)."""
    if cfg is None:
        cfg = AttackConfig(iters=30, objective=Objective.CW_MARGIN)
    elif cfg.objective is not Objective.CW_MARGIN:
        cfg = replace(cfg, objective=Objective.CW_MARGIN)
    return pgd(model, x, y, cfg)


def _square_p_schedule(frac: float, p_init: float = 0.8) -> float:
    """Piecewise halving of the perturbed-area fraction over the budget."""
    p = p_init
    for threshold in (0.02, 0.1, 0.2, 0.4, 0.6, 0.8):
        if frac > threshold:
            p /= 2.0
    return p


def _margin(logits: Array, y: int) -> float:
    other = np.delete(logits, y)
    return float(logits[y] - other.max())


def square_attack(oracle, x: Array, y: Array, cfg: AttackConfig) -> AdvBatch:
    """Gradient-free random search over square-shaped +-epsilon patches.

    ``oracle(batch) -> logits`` is the only model access. Per sample:
    query the clean point; if already misclassified stop; otherwise start
    from a vertical-stripe perturbation and propose one random square per
    iteration, accepting only strict improvements of the margin loss.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    eps = cfg.epsilon
    x_adv = x.copy()
    vals = np.zeros(len(x))
    queries_max = 0
    traces: list = []
    if cfg.query_budget == 0:
        return AdvBatch(x_adv=x_adv, x_ref=x, achieved_objective=vals, queries_used=0, accept_trace=[[] for _ in x])
    for i in range(len(x)):
        rng = np.random.default_rng((cfg.seed, i))
        xi = x[i]
        img = xi if xi.ndim == 3 else xi.reshape(1, 1, -1)
        C, H, W = img.shape
        queries = 0
        trace: list[float] = []

        def q(cand_img):
            nonlocal queries
            queries += 1
            flat = cand_img.reshape(xi.shape)
            return _margin(oracle(flat[None])[0], int(y[i]))

        loss = q(img)
        trace.append(loss)
        best = img.copy()
        if loss >= 0 and cfg.query_budget >= 1 and eps > 0:
            # vertical-stripe init
            stripes = rng.choice([-eps, eps], size=(C, 1, W)).astype(np.float32)
            cand = np.clip(np.clip(img + stripes, img - eps, img + eps), 0.0, 1.0)
            if queries < cfg.query_budget:
                cand_loss = q(cand)
                if cand_loss < loss:
                    loss, best = cand_loss, cand
                    trace.append(loss)
            while loss >= 0 and queries < cfg.query_budget:
                p = _square_p_schedule(queries / cfg.query_budget)
                h = max(1, min(min(H, W), round((p * H * W) ** 0.5)))
                r = int(rng.integers(0, H - h + 1))
                c = int(rng.integers(0, W - h + 1))
                cand = best.copy()
                delta = rng.choice([-eps, eps], size=(C, 1, 1)).astype(np.float32)
                cand[:, r : r + h, c : c + h] = img[:, r : r + h, c : c + h] + delta
                cand = np.clip(np.clip(cand, img - eps, img + eps), 0.0, 1.0)
                cand_loss = q(cand)
                if cand_loss < loss:
                    loss, best = cand_loss, cand
                    trace.append(loss)
        x_adv[i] = best.reshape(xi.shape)
        vals[i] = -loss  # attacks maximize; margin loss is minimized
        queries_max = max(queries_max, queries)
        traces.append(trace)
    return AdvBatch(
        x_adv=x_adv, x_ref=x, achieved_objective=vals, queries_used=queries_max, accept_trace=traces
    )
