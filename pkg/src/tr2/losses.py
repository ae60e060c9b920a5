"""Entity and relation losses, the total objective, and AdamW."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .guidance import LossTerm


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # None picks 1.0 for SgDet and 0.0 otherwise
    entity_weight: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")
        if not 0 <= self.focal_alpha <= 1:
            raise ValueError("focal_alpha must lie in [0, 1]")

    def lam(self, task: str) -> float:
        if self.entity_weight is not None:
            return self.entity_weight
        return 1.0 if task.lower() == "sgdet" else 0.0


def entity_loss(logits: Tensor, classes: np.ndarray) -> LossTerm:
    """Mean softmax cross-entropy over detections."""
    classes = np.asarray(classes, dtype=np.int64)
    if logits.shape[0] == 0:
        msg = "no detections; entity loss set to 0"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return LossTerm(Tensor(0.0), 0, msg)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(classes)), classes] = 1.0
    nll = ag.mul(ag.log_softmax(logits), onehot)
    return LossTerm(ag.scale(ag.sum(nll), -1.0 / len(classes)), len(classes))


def relation_loss(logits: Tensor, targets: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Focal-form multi-label BCE, averaged over every (pair-frame, predicate) term.

    term = -alpha_t * (1 - p_t)**gamma * ln(p_t), with p_t the probability of the
    observed label and ln clamped at 1e-12.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"relation_loss: logits {list(logits.shape)} vs targets {list(targets.shape)}")
    p = ag.sigmoid(logits)
    # p_t = y*p + (1-y)*(1-p) = (2y-1)*p + (1-y)
    p_t = ag.add_const(ag.mul(p, 2.0 * targets - 1.0), 1.0 - targets)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    mod = ag.power(ag.add_const(ag.scale(p_t, -1.0), 1.0), gamma)
    terms = ag.mul(ag.mul(mod, ag.log(p_t, 1e-12)), -alpha_t)
    return ag.mean(terms)


@dataclass
class LossBreakdown:
    obj: float
    rel: float
    guidance: float
    total: float
    lam: float


GUIDANCE_MODES = ("none", "eq2", "eq4", "binary")


def total_loss(l_obj: Tensor, l_rel: Tensor, l_guidance: Tensor | None, lam: float,
               guidance: str = "eq2") -> tuple[Tensor, LossBreakdown]:
    """lam * L_obj + L_rel + L_guidance.

    ``guidance="none"`` drops the guidance term; the other modes only name
    which guidance loss was passed in.
    """
    if guidance not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {guidance!r}")
    terms = {"L_obj": l_obj, "L_rel": l_rel}
    if guidance != "none" and l_guidance is not None:
        terms["L_guidance"] = l_guidance
    for name, t in terms.items():
        if not np.isfinite(t.data).all():
            raise ValueError(f"{name} is not finite")
    total = l_rel
    if lam != 0.0:
        total = ag.add(ag.scale(l_obj, lam), total)
    g = terms.get("L_guidance")
    if g is not None:
        total = ag.add(total, g)
    gval = float(g.data) if g is not None else 0.0
    return total, LossBreakdown(float(l_obj.data), float(l_rel.data), gval, float(total.data), lam)


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
                   cfg: OptimConfig) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p -= cfg.lr * update + cfg.lr * cfg.weight_decay * p
