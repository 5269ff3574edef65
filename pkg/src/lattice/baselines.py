"""Reference recurrences for the comparison family, plus naive softmax attention.

All scans share the slot-major convention of `recurrence`: the state is an
(m, d) matrix, a write adds k_i * v to slot i (the outer product outer(k, v)),
and the read-out is y = q @ S taken from the post-update state.  Each scan is
a pure left fold, sequential in time.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError
from .recurrence import EPS, StateMatrix, TokenTriple

__all__ = [
    "BaselineKind",
    "GateVector",
    "la_scan",
    "mamba2_scan",
    "gla_scan",
    "deltanet_scan",
    "gated_deltanet_scan",
    "rwkv7_scan",
    "ttt_scan",
    "ttt_step",
    "softmax_attention_ref",
]


class BaselineKind(enum.Enum):
    LA = "la"
    MAMBA2 = "mamba2"
    GLA = "gla"
    DELTANET = "deltanet"
    GATED_DELTANET = "gated-deltanet"
    RWKV7 = "rwkv7"
    TTT = "ttt"
    SOFTMAX_REF = "softmax"


@dataclass
class GateVector:
    """Per-slot decay for the diagonally gated rows; TTT's pre-normalization z."""

    mu_vec: Optional[np.ndarray] = None  # (m,), entries in [0, 1]
    z: Optional[np.ndarray] = None       # (d,)

    def __post_init__(self):
        if self.mu_vec is not None:
            self.mu_vec = np.asarray(self.mu_vec, dtype=np.float64)
            if self.mu_vec.ndim != 1:
                raise ShapeError("mu_vec must be 1-d")
            if np.any(self.mu_vec < 0.0) or np.any(self.mu_vec > 1.0):
                raise ValueError("mu_vec entries must lie in [0, 1]")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=np.float64)


def _check(S: StateMatrix, t: TokenTriple):
    if t.k.shape[0] != S.m or t.v.shape[0] != S.d:
        raise ShapeError(
            f"token dims (k={t.k.shape[0]}, v={t.v.shape[0]}) vs state ({S.m}, {S.d})")


def _fold(S0, tokens, step):
    if len(tokens) == 0:
        raise ShapeError("scan needs a nonempty token sequence")
    S = S0.slots.copy()
    outputs = np.empty((len(tokens), S0.d))
    for i, tok in enumerate(tokens):
        _check(S0, tok)
        S = step(S, tok, i)
        outputs[i] = tok.q @ S
    return StateMatrix(S), outputs


def la_scan(S0: StateMatrix, tokens: Sequence[TokenTriple]):
    """Plain linear attention: accumulate outer products, no decay."""
    return _fold(S0, tokens, lambda S, t, i: S + np.outer(t.k, t.v))


def mamba2_scan(S0: StateMatrix, tokens: Sequence[TokenTriple]):
    """Scalar-gated linear recurrence: S <- mu S + outer(k, v)."""
    return _fold(S0, tokens, lambda S, t, i: t.mu * S + np.outer(t.k, t.v))


def gla_scan(S0: StateMatrix, tokens: Sequence[TokenTriple],
             mu_vecs: Optional[np.ndarray] = None):
    """Per-slot diagonally gated recurrence.

    mu_vecs, if given, is (T, m) with entries in [0, 1]; otherwise each
    token's scalar mu is broadcast across slots (reducing to mamba2_scan).
    """
    mu_vecs = _validate_mu_vecs(mu_vecs, len(tokens), S0.m)

    def step(S, t, i):
        mu = mu_vecs[i] if mu_vecs is not None else t.mu
        return (mu[:, None] if mu_vecs is not None else mu) * S + np.outer(t.k, t.v)

    return _fold(S0, tokens, step)


def _validate_mu_vecs(mu_vecs, T, m):
    if mu_vecs is None:
        return None
    mu_vecs = np.asarray(mu_vecs, dtype=np.float64)
    if mu_vecs.shape != (T, m):
        raise ShapeError(f"mu_vecs must be ({T}, {m}), got {mu_vecs.shape}")
    if np.any(mu_vecs < 0.0) or np.any(mu_vecs > 1.0):
        raise ValueError("mu_vecs entries must lie in [0, 1]")
    return mu_vecs


def deltanet_scan(S0: StateMatrix, tokens: Sequence[TokenTriple]):
    """Delta rule: S <- S - gamma * outer(k, k@S - v)."""
    return _fold(S0, tokens,
                 lambda S, t, i: S - t.gamma * np.outer(t.k, t.k @ S - t.v))


def gated_deltanet_scan(S0: StateMatrix, tokens: Sequence[TokenTriple]):
    """Delta rule applied after a scalar decay of the state."""

    def step(S, t, i):
        Sd = t.mu * S
        return Sd - t.gamma * np.outer(t.k, t.k @ Sd - t.v)

    return _fold(S0, tokens, step)


def rwkv7_scan(S0: StateMatrix, tokens: Sequence[TokenTriple],
               mu_vecs: Optional[np.ndarray] = None):
    """Per-slot decay plus a delta-rule correction taken at the undecayed state."""
    mu_vecs = _validate_mu_vecs(mu_vecs, len(tokens), S0.m)

    def step(S, t, i):
        mu = mu_vecs[i][:, None] if mu_vecs is not None else t.mu
        return mu * S - t.gamma * np.outer(t.k, t.k @ S - t.v)

    return _fold(S0, tokens, step)


def ttt_step(S: np.ndarray, t: TokenTriple) -> np.ndarray:
    """One update of the output-normalized reconstruction rule.

    z = k @ S, yhat = z / sqrt(||z||^2 + eps^2), e = yhat - v; the write-back
    keeps only the component of e orthogonal to z, scaled by the same guarded
    norm.  The smooth guard keeps both the update and its derivatives defined
    at z = 0, so a zero initial state is legal.
    """
    z = t.k @ S
    zn = np.sqrt(z @ z + EPS * EPS)
    yhat = z / zn
    e = yhat - t.v
    e_perp = e - z * (float(z @ e) / (zn * zn))
    return S - t.gamma * np.outer(t.k, e_perp / zn)


def ttt_scan(S0: StateMatrix, tokens: Sequence[TokenTriple]):
    return _fold(S0, tokens, lambda S, t, i: ttt_step(S, t))


def softmax_attention_ref(keys: np.ndarray, values: np.ndarray, queries: np.ndarray):
    """Naive causal softmax attention, O(T^2), for oracle comparisons.

    keys/queries: (T, m), values: (T, d).  y_t attends over positions <= t.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    T = keys.shape[0]
    if values.shape[0] != T or queries.shape != keys.shape:
        raise ShapeError("softmax_attention_ref: causal lengths must agree")
    out = np.empty((T, values.shape[1]))
    for t in range(T):
        logits = keys[: t + 1] @ queries[t]
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        out[t] = w @ values[: t + 1]
    return out
