"""Loss, optimizer, schedule, and the finite-difference gradient oracle."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .autodiff import Var
from .errors import ConfigError, ShapeError, TrainingFault
from .model import ModelConfig, lm_forward, param_count, trainable

__all__ = [
    "OptState",
    "GradCheckReport",
    "cross_entropy_masked",
    "model_loss",
    "backward",
    "lr_at",
    "clip_gradients",
    "adamw_step",
    "grad_check",
    "train_loop",
]


@dataclass
class OptState:
    base_lr: float = 3e-3
    final_lr: float = 3e-5
    warmup_steps: int = 100
    total_steps: int = 1000
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.step < 0 or self.total_steps < 1:
            raise ConfigError("step must be >= 0 and total_steps >= 1")


def lr_at(opt: OptState, step: int) -> float:
    """Linear warmup to base_lr, then cosine decay to final_lr."""
    if opt.warmup_steps > 0 and step <= opt.warmup_steps:
        return opt.base_lr * step / opt.warmup_steps
    span = max(opt.total_steps - opt.warmup_steps, 1)
    frac = min((step - opt.warmup_steps) / span, 1.0)
    return opt.final_lr + 0.5 * (opt.base_lr - opt.final_lr) * (
        1.0 + np.cos(np.pi * frac))


def cross_entropy_masked(logits: Var, targets: np.ndarray,
                         mask: Optional[np.ndarray] = None) -> Var:
    """Mean cross-entropy over masked positions (all positions if mask=None).

    Numerically stable log-softmax; the per-position max is detached, which
    leaves the gradient exact.
    """
    targets = np.asarray(targets)
    B, T, V = logits.shape
    if targets.shape != (B, T):
        raise ShapeError(f"targets must be {(B, T)}, got {targets.shape}")
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ShapeError("cross_entropy_masked: empty mask")
    zmax = logits.data.max(axis=-1, keepdims=True)       # detached
    z = logits - Var(zmax)
    lse = z.exp().sum(axis=-1, keepdims=True).log()
    logp = z - lse
    onehot = np.zeros((B, T, V))
    bi, ti = np.nonzero(mask)
    onehot[bi, ti, targets[bi, ti]] = 1.0
    return -1.0 / n * (logp * onehot).sum()


def model_loss(cfg: ModelConfig, params: Dict[str, Var], tokens: np.ndarray,
               targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Var:
    return cross_entropy_masked(lm_forward(cfg, params, tokens), targets, mask)


def backward(cfg: ModelConfig, params: Dict[str, Var], tokens: np.ndarray,
             targets: np.ndarray, mask: Optional[np.ndarray] = None
             ) -> Tuple[float, Dict[str, np.ndarray]]:
    """Reverse-mode gradients of the mean masked cross-entropy.

    Returns (loss, grads); grads covers exactly the trainable parameters,
    with zeros for parameters the graph never touched.
    """
    for p in params.values():
        p.zero_grad()
    loss = model_loss(cfg, params, tokens, targets, mask)
    loss.backward()
    grads: Dict[str, np.ndarray] = {}
    for name, p in trainable(params).items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f"non-finite gradient in {name!r}")
        grads[name] = g
    return float(loss.data), grads


def clip_gradients(grads: Dict[str, np.ndarray], clip_norm: float
                   ) -> Tuple[Dict[str, np.ndarray], float]:
    """Global-norm clipping; returns (clipped grads, pre-clip norm)."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if clip_norm > 0 and total > clip_norm:
        scale = clip_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def adamw_step(opt: OptState, params: Dict[str, Var],
               grads: Dict[str, np.ndarray]) -> float:
    """One decoupled-weight-decay Adam update, in place.  Returns the lr used."""
    opt.step += 1
    lr = lr_at(opt, opt.step)
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in trainable(params).items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.data = p.data - lr * (update + opt.weight_decay * p.data)
        if not np.all(np.isfinite(p.data)):
            raise TrainingFault(f"non-finite parameter after update: {name!r}")
    return lr


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float
    per_param: Dict[str, float]
    passed: bool

    def worst(self, k: int = 5):
        return sorted(self.per_param.items(), key=lambda kv: -kv[1])[:k]


def grad_check(cfg: ModelConfig, params: Dict[str, Var], tokens: np.ndarray,
               targets: np.ndarray, mask: Optional[np.ndarray] = None,
               tolerance: float = 1e-5, fd_eps: float = 1e-6,
               max_params: int = 5000) -> GradCheckReport:
    """Central finite differences on every trainable entry vs backward()."""
    n = param_count(params)
    if n > max_params:
        raise ConfigError(f"grad_check guard: {n} parameters > {max_params}")
    _, grads = backward(cfg, params, tokens, targets, mask)
    per_param: Dict[str, float] = {}
    for name, p in trainable(params).items():
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + fd_eps
            lp = float(model_loss(cfg, params, tokens, targets, mask).data)
            flat[j] = orig - fd_eps
            lm = float(model_loss(cfg, params, tokens, targets, mask).data)
            flat[j] = orig
            fd_flat[j] = (lp - lm) / (2.0 * fd_eps)
        denom = max(float(np.abs(fd).max()), float(np.abs(grads[name]).max()), 1e-8)
        per_param[name] = float(np.abs(grads[name] - fd).max()) / denom
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(tolerance=tolerance, max_rel_error=worst,
                           per_param=per_param, passed=worst <= tolerance)


def train_loop(cfg: ModelConfig, params: Dict[str, Var], opt: OptState,
               batches: Iterable[Tuple[np.ndarray, np.ndarray, np.ndarray]],
               metrics_writer=None):
    """Drive adamw over an iterable of (tokens, targets, mask) batches.

    metrics_writer, if given, is called with a dict per step (the CSV layer
    in the CLI owns formatting).  Returns the last loss.
    """
    last_loss = float("nan")
    for tokens, targets, mask in batches:
        t0 = time.perf_counter()
        loss, grads = backward(cfg, params, tokens, targets, mask)
        grads, gnorm = clip_gradients(grads, opt.clip_norm)
        lr = adamw_step(opt, params, grads)
        dt = time.perf_counter() - t0
        last_loss = loss
        if metrics_writer is not None:
            metrics_writer({
                "step": opt.step,
                "lr": lr,
                "loss": loss,
                "grad_norm": gnorm,
                "tokens_per_sec": tokens.size / max(dt, 1e-9),
            })
    return last_loss
