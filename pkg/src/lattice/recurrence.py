"""Exact per-token orthogonal state recurrence.

The memory is an m-slot matrix S (slot-major, shape (m, d)).  Each step
performs one online gradient-descent update of a compression objective on
the column-normalized state, writes only the component of the driver vector
orthogonal to each slot, and retracts the result back to the slot's previous
norm.  Squared losses use the 1/2 convention so the closed-form gradients
are free of stray factors of two.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateStateError, ShapeError

EPS = 1e-6

__all__ = [
    "EPS",
    "Mode",
    "StateMatrix",
    "TokenTriple",
    "StepTrace",
    "init_state",
    "project_orthogonal",
    "compression_loss",
    "osr_gradient",
    "normalize_update",
    "lattice_step",
    "lattice_scan",
    "soft_threshold",
    "ista_step",
    "dec_update_linearized",
]


class Mode(enum.Enum):
    DEC = "dec"
    SIM = "sim"
    ENC = "enc"


@dataclass
class StateMatrix:
    """m memory slots, each a d-dimensional row of `slots`."""

    slots: np.ndarray  # (m, d)

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.float64)
        if self.slots.ndim != 2 or 0 in self.slots.shape:
            raise ShapeError(f"state must be (m, d) with m,d >= 1, got {self.slots.shape}")

    @property
    def m(self) -> int:
        return self.slots.shape[0]

    @property
    def d(self) -> int:
        return self.slots.shape[1]

    def slot_norms(self) -> np.ndarray:
        return np.linalg.norm(self.slots, axis=1)

    def copy(self) -> "StateMatrix":
        return StateMatrix(self.slots.copy())


@dataclass
class TokenTriple:
    """Per-token projections plus the step-size and forget gates."""

    k: np.ndarray  # (m,)
    v: np.ndarray  # (d,)
    q: np.ndarray  # (m,)
    gamma: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.k.ndim != 1 or self.v.ndim != 1 or self.q.ndim != 1:
            raise ShapeError("token projections must be 1-d")
        if self.k.shape != self.q.shape:
            raise ShapeError(f"k and q must share length, got {self.k.shape} vs {self.q.shape}")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.mu <= 1.0):
            raise ValueError(f"gates must lie in [0, 1], got gamma={self.gamma}, mu={self.mu}")


@dataclass
class StepTrace:
    """All intermediates of one update, for diagnostics and tests.

    `delta` is the raw (pre-retraction) step -gamma * grad; its rows are
    orthogonal to the corresponding slots of the previous state.
    """

    e: Optional[np.ndarray]  # reconstruction error; (d,) for Dec, (m,) for Enc, None for Sim
    h: np.ndarray            # update driver, (d,)
    h_hat: np.ndarray        # S_{t-1} h, (m,)
    k_hat: np.ndarray        # gamma * beta * writing-intensity / slot norm, (m,)
    delta: np.ndarray        # (m, d)
    beta: np.ndarray         # (m,)
    loss: float = field(default=np.nan)


def init_state(m: int, d: int, seed: int = 0) -> StateMatrix:
    """Seeded isotropic-Gaussian slots, normalized to unit norm."""
    rng = np.random.default_rng(seed)
    slots = rng.standard_normal((m, d))
    slots /= np.linalg.norm(slots, axis=1, keepdims=True)
    return StateMatrix(slots)


def _checked_norms(S: StateMatrix) -> np.ndarray:
    norms = S.slot_norms()
    if np.any(norms <= EPS):
        raise DegenerateStateError(f"slot norm <= {EPS}: min {norms.min():.3e}")
    return norms


def _check_token(S: StateMatrix, t: TokenTriple):
    if t.k.shape[0] != S.m:
        raise ShapeError(f"k length {t.k.shape[0]} != slot count {S.m}")
    if t.v.shape[0] != S.d:
        raise ShapeError(f"v length {t.v.shape[0]} != slot dim {S.d}")


def project_orthogonal(h: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Component of h orthogonal to s: h - s (s.h)/||s||^2.

    Computed as a dot product plus axpy; the rank-one projector is never
    materialized.
    """
    h = np.asarray(h, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if h.shape != s.shape or h.ndim != 1:
        raise ShapeError(f"project_orthogonal: shapes {h.shape} vs {s.shape}")
    ss = float(s @ s)
    if ss <= EPS * EPS:
        raise DegenerateStateError("cannot project against a (near-)zero vector")
    return h - s * (float(s @ h) / ss)


def _driver_and_intensity(S: StateMatrix, t: TokenTriple, mode: Mode, norms: np.ndarray):
    """Returns (e, h, c): reconstruction error, update driver, writing intensity."""
    phi = S.slots / norms[:, None]
    if mode is Mode.DEC:
        e = t.k @ phi - t.v          # (d,)
        return e, e, t.k
    if mode is Mode.SIM:
        return None, -t.v, t.k
    if mode is Mode.ENC:
        e = phi @ t.v - t.k          # (m,)
        return e, t.v, e
    raise ValueError(f"unknown mode {mode!r}")


def compression_loss(S: StateMatrix, t: TokenTriple, mode: Mode) -> float:
    """Objective minimized by the inner-loop update.

    Dec: 1/2 ||phi(S) k - v||^2, Sim: -<phi(S) k, v>, Enc: 1/2 ||phi(S)^T v - k||^2.
    """
    _check_token(S, t)
    norms = _checked_norms(S)
    e, _, _ = _driver_and_intensity(S, t, mode, norms)
    if mode is Mode.SIM:
        phi = S.slots / norms[:, None]
        return -float((t.k @ phi) @ t.v)
    return 0.5 * float(e @ e)


def osr_gradient(S: StateMatrix, t: TokenTriple, mode: Mode):
    """Closed-form gradient of compression_loss w.r.t. the slots.

    Per slot i: grad_i = (c_i / ||s_i||) * P(s_i) h, where P(s_i) projects
    onto the orthogonal complement of s_i and (h, c) is (e, k) for Dec,
    (-v, k) for Sim, (e's per-slot entries, v) swapped for Enc.

    Returns (grad, trace) with grad of shape (m, d).
    """
    _check_token(S, t)
    norms = _checked_norms(S)
    e, h, c = _driver_and_intensity(S, t, mode, norms)
    sq = norms * norms
    sh = S.slots @ h                         # (m,)  raw slot/driver overlaps
    c_hat = c / norms
    # h - s_i (s_i.h)/||s_i||^2, done for all slots at once
    perp = h[None, :] - S.slots * (sh / sq)[:, None]
    grad = c_hat[:, None] * perp
    trace = StepTrace(
        e=e,
        h=h,
        h_hat=sh,
        k_hat=np.full(S.m, np.nan),
        delta=-t.gamma * grad,
        beta=np.ones(S.m),
    )
    return grad, trace


def normalize_update(S_prev: StateMatrix, delta: np.ndarray, mu: float):
    """Retraction: s_i <- beta_i (mu s_i + delta_i) with the previous norm kept.

    beta_i = ||s_i|| / sqrt(mu^2 ||s_i||^2 + ||delta_i||^2); for unit slots
    and mu = 1 this is the familiar (1 + ||delta||^2)^{-1/2}.  Caller must
    ensure delta_i is orthogonal to s_i for the Pythagorean identity to hold.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != S_prev.slots.shape:
        raise ShapeError(f"delta shape {delta.shape} != state shape {S_prev.slots.shape}")
    norms = _checked_norms(S_prev)
    denom_sq = mu * mu * norms * norms + np.einsum("id,id->i", delta, delta)
    if np.any(denom_sq <= EPS * EPS):
        raise DegenerateStateError("mu and delta both vanish; updated slot would be zero")
    beta = norms / np.sqrt(denom_sq)
    new = beta[:, None] * (mu * S_prev.slots + delta)
    return StateMatrix(new), beta


def lattice_step(S: StateMatrix, t: TokenTriple, mode: Mode):
    """One full update: gradient step, retraction, read-out from the new state.

    Returns (S_new, y, trace).
    """
    grad, trace = osr_gradient(S, t, mode)
    delta = -t.gamma * grad
    S_new, beta = normalize_update(S, delta, t.mu)
    trace.beta = beta
    norms = S.slot_norms()
    _, _, c = _driver_and_intensity(S, t, mode, norms)
    trace.k_hat = t.gamma * beta * c / norms
    trace.loss = compression_loss(S, t, mode)
    y = t.q @ S_new.slots
    return S_new, y, trace


def lattice_scan(S0: StateMatrix, tokens: Sequence[TokenTriple], mode: Mode,
                 collect_traces: bool = False):
    """Left fold of lattice_step; outputs are read from post-update states.

    Returns (S_final, outputs (T, d), traces or None).
    """
    if len(tokens) == 0:
        raise ShapeError("lattice_scan needs a nonempty token sequence")
    S = S0
    outputs = np.empty((len(tokens), S0.d))
    traces = [] if collect_traces else None
    for i, tok in enumerate(tokens):
        S, y, tr = lattice_step(S, tok, mode)
        outputs[i] = y
        if collect_traces:
            traces.append(tr)
    return S, outputs, traces


def soft_threshold(x, tau: float):
    """Shrinkage operator sign(x) max(|x| - tau, 0); tau must be >= 0."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def ista_step(S: StateMatrix, t: TokenTriple, lam: float) -> StateMatrix:
    """Proximal gradient step for the l1-regularized Dec objective.

    Plain gradient step followed by element-wise shrinkage with threshold
    gamma * lam.  No sphere retraction: renormalizing would undo the
    sparsity the shrinkage just introduced.
    """
    grad, _ = osr_gradient(S, t, Mode.DEC)
    return StateMatrix(soft_threshold(S.slots - t.gamma * grad, t.gamma * lam))


def dec_update_linearized(S: StateMatrix, t: TokenTriple) -> StateMatrix:
    """Dec-mode gradient step with the normalization stripped out (test switch).

    With phi replaced by the identity and no retraction, the update collapses
    to the classical delta rule S - gamma (S^T k - v) k^T.
    """
    _check_token(S, t)
    e = t.k @ S.slots - t.v
    return StateMatrix(S.slots - t.gamma * np.outer(t.k, e))
