"""Chunk-wise parallel approximations of the orthogonal state recurrence.

Both forms freeze the gradient (state normalization, reconstruction error,
slot overlaps) at each chunk's starting state so the intra-chunk work becomes
matrix multiplications:

* the full form unrolls the linearized recurrence into per-slot segmented
  cumulative-decay products (the Omega tensor) and evaluates states and
  read-outs at the chunk level in closed form;
* the rank-one form keeps the running state in the decay term, folding the
  frozen part into a rank-one gate so the chunk reduces to a gated
  linear-attention primitive.

At chunk size 1 both reproduce the sequential scan exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateStateError, NumericalConsistencyError, ShapeError
from .recurrence import EPS, Mode, StateMatrix, TokenTriple

__all__ = [
    "ChunkWorkspace",
    "build_omega",
    "beta_chunk",
    "gla_intra_chunk",
    "scan_chunkwise_full",
    "scan_chunkwise_rank1",
    "tokens_to_arrays",
]

PER_TOKEN = "per-token"
PER_CHUNK = "per-chunk"


@dataclass
class ChunkWorkspace:
    """Chunk-level intermediates, kept around for tests and diagnostics."""

    C: int
    K: np.ndarray          # (C, m)
    V: np.ndarray          # (C, d)
    Q: np.ndarray          # (C, m)
    H: np.ndarray          # (C, d) update drivers
    Htilde: np.ndarray     # (C, m) frozen-state overlaps, scaled by 1/||s||
    Khat: np.ndarray       # (C, m) gamma * beta * intensity / ||s||
    gamma: np.ndarray      # (C,)
    mu: np.ndarray         # (C,)
    Ds: np.ndarray         # (C, m) squared raw-update norms
    beta: np.ndarray       # (C, m)
    a: Optional[np.ndarray] = None      # (C, m) cumulative decay products
    Omega: Optional[np.ndarray] = None  # (C, C, m)
    f: Optional[np.ndarray] = None      # (m,)
    F: Optional[np.ndarray] = None      # (C, m)
    P: Optional[np.ndarray] = None      # (C, C)
    G_gate: Optional[np.ndarray] = None # (C, m)


def tokens_to_arrays(tokens: Sequence[TokenTriple]):
    """Stack a token sequence into (K, V, Q, gamma, mu) arrays."""
    K = np.stack([t.k for t in tokens])
    V = np.stack([t.v for t in tokens])
    Q = np.stack([t.q for t in tokens])
    gam = np.array([t.gamma for t in tokens])
    mu = np.array([t.mu for t in tokens])
    return K, V, Q, gam, mu


def _pad_to_multiple(K, V, Q, gam, mu, C: int):
    """Right-pad with no-op tokens (gamma=0, mu=1, zero projections)."""
    T = K.shape[0]
    pad = (-T) % C
    if pad == 0:
        return K, V, Q, gam, mu, T
    zk = np.zeros((pad, K.shape[1]))
    zv = np.zeros((pad, V.shape[1]))
    return (
        np.concatenate([K, zk]),
        np.concatenate([V, zv]),
        np.concatenate([Q, zk]),
        np.concatenate([gam, np.zeros(pad)]),
        np.concatenate([mu, np.ones(pad)]),
        T,
    )


def build_omega(decays: np.ndarray):
    """Running per-slot decay products and their segmented quotients.

    decays: (C, m) of per-step beta*mu factors in (0, 1].  Returns
    (a, Omega) with a[tau] = prod_{j<=tau} decays[j] and
    Omega[j, i, n] = a[j, n] / a[i, n] for i <= j, 0 above the diagonal.
    """
    decays = np.asarray(decays, dtype=np.float64)
    if decays.ndim != 2:
        raise ShapeError(f"decays must be (C, m), got {decays.shape}")
    if np.any(decays <= 0.0) or np.any(decays > 1.0):
        raise DegenerateStateError("decay factors must lie in (0, 1]")
    C = decays.shape[0]
    a = np.cumprod(decays, axis=0)
    omega = a[:, None, :] / a[None, :, :]
    omega *= np.tril(np.ones((C, C)))[:, :, None]
    return a, omega


def _frozen_chunk_quantities(S: StateMatrix, K, V, mode: Mode):
    """Drivers and scaled intensities evaluated at the chunk-start state."""
    norms = S.slot_norms()
    if np.any(norms <= EPS):
        raise DegenerateStateError(f"slot norm <= {EPS} at chunk start")
    phi = S.slots / norms[:, None]
    if mode is Mode.DEC:
        H = K @ phi - V
        Cint = K
    elif mode is Mode.SIM:
        H = -V
        Cint = K
    elif mode is Mode.ENC:
        H = V.copy()
        Cint = V @ phi.T - K     # per-slot encoding errors
    else:
        raise ValueError(f"unknown mode {mode!r}")
    Htilde = (H @ phi.T) / norms[None, :]
    Chat = Cint / norms[None, :]
    return norms, H, Htilde, Chat


def beta_chunk(S_chunk_start: StateMatrix, H, Htilde, Chat, gamma):
    """Per-step squared update norms and retraction factors for a whole chunk.

    D_S[tau, i] = gamma^2 (Chat^2 ||h||^2 - ||s_i||^2 (Htilde*Chat)^2) is the
    matrix-multiplication identity for ||delta_{i,tau}||^2; the subtraction
    can go a hair negative from rounding, so it is clamped at 0 (anything
    beyond -1e-9 relative is a real inconsistency and raises).

    Returns (Ds, beta) each of shape (C, m).
    """
    H = np.asarray(H, dtype=np.float64)
    Htilde = np.asarray(Htilde, dtype=np.float64)
    Chat = np.asarray(Chat, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    norms = S_chunk_start.slot_norms()
    if Htilde.shape != Chat.shape or Htilde.shape[0] != H.shape[0]:
        raise ShapeError("beta_chunk: inconsistent chunk shapes")
    h_sq = np.einsum("td,td->t", H, H)                 # diag[H H^T]
    term1 = Chat**2 * h_sq[:, None]
    term2 = (norms[None, :] ** 2) * (Htilde * Chat) ** 2
    raw = term1 - term2
    scale = np.maximum(term1, 1.0)
    if np.any(raw < -1e-9 * scale):
        raise NumericalConsistencyError("negative squared update norm beyond tolerance")
    Ds = gamma[:, None] ** 2 * np.clip(raw, 0.0, None)
    mu_placeholder = 1.0  # beta with mu folded in is applied by the callers
    del mu_placeholder
    return Ds


def _beta_from_ds(norms, Ds, mu):
    """beta = ||s|| / sqrt(mu^2 ||s||^2 + D_S), norm-preserving convention."""
    return norms[None, :] / np.sqrt((mu[:, None] ** 2) * (norms[None, :] ** 2) + Ds)


def gla_intra_chunk(Q, K, V, G, S0: StateMatrix):
    """Token-gated linear-attention chunk, evaluated in parallel.

    Equivalent to the loop  S_tau = G_tau (broadcast per slot) * S_{tau-1}
    + outer(K_tau, V_tau),  y_tau = Q_tau @ S_tau,  implemented with one
    cumulative product and a causal-masked C x C matmul.

    Gates may be signed (the orthogonal-write decay legitimately flips sign
    when the slot/driver overlap is strongly negative) but a near-zero gate
    makes the cumulative-quotient reweighting ill-conditioned and raises.

    Returns (S_C, Y).
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    C, m = Q.shape
    if K.shape != (C, m) or G.shape != (C, m) or V.shape[0] != C or S0.m != m:
        raise ShapeError("gla_intra_chunk: inconsistent shapes")
    if np.any(np.abs(G) < 1e-12):
        raise DegenerateStateError("near-zero gate; chunked reweighting is ill-conditioned")
    cum = np.cumprod(G, axis=0)                       # (C, m)
    Qg = Q * cum
    Kg = K / cum
    mask = np.tril(np.ones((C, C)))                   # inclusive: own token contributes
    attn = (Qg @ Kg.T) * mask
    Y = Qg @ S0.slots + attn @ V
    S_C = cum[-1][:, None] * S0.slots + (K * (cum[-1][None, :] / cum)).T @ V
    return StateMatrix(S_C), Y


def _chunk_full(S: StateMatrix, K, V, Q, gam, mu, mode: Mode, normalization: str):
    norms, H, Htilde, Chat = _frozen_chunk_quantities(S, K, V, mode)
    Ds = beta_chunk(S, H, Htilde, Chat, gam)
    if normalization == PER_TOKEN:
        beta = _beta_from_ds(norms, Ds, mu)
    else:
        beta = np.ones_like(Ds)
    Khat = gam[:, None] * beta * Chat
    a, omega = build_omega(np.clip(mu[:, None] * beta, None, 1.0))
    HK = Htilde * Khat
    F = np.einsum("jim,im->jm", omega, HK)
    f = F[-1]
    P = np.einsum("im,jm,ijm->ij", Q, Khat, omega)
    Y = (Q * (a + F)) @ S.slots - P @ H
    S_new = (a[-1] + f)[:, None] * S.slots - (omega[-1] * Khat).T @ H
    if normalization == PER_CHUNK:
        new_norms = np.linalg.norm(S_new, axis=1)
        if np.any(new_norms <= EPS):
            raise DegenerateStateError("slot collapsed during per-chunk update")
        S_new *= (norms / new_norms)[:, None]
    ws = ChunkWorkspace(C=K.shape[0], K=K, V=V, Q=Q, H=H, Htilde=Htilde, Khat=Khat,
                        gamma=gam, mu=mu, Ds=Ds, beta=beta, a=a, Omega=omega,
                        f=f, F=F, P=P)
    return StateMatrix(S_new), Y, ws


def _chunk_rank1(S: StateMatrix, K, V, Q, gam, mu, mode: Mode, normalization: str):
    norms, H, Htilde, Chat = _frozen_chunk_quantities(S, K, V, mode)
    Ds = beta_chunk(S, H, Htilde, Chat, gam)
    if normalization == PER_TOKEN:
        beta = _beta_from_ds(norms, Ds, mu)
    else:
        beta = np.ones_like(Ds)
    G = beta * (mu[:, None] + gam[:, None] * Htilde * Chat)
    Ktilde = -beta * gam[:, None] * Chat
    S_new, Y = gla_intra_chunk(Q, Ktilde, H, G, S)
    if normalization == PER_CHUNK:
        slots = S_new.slots
        new_norms = np.linalg.norm(slots, axis=1)
        if np.any(new_norms <= EPS):
            raise DegenerateStateError("slot collapsed during per-chunk update")
        S_new = StateMatrix(slots * (norms / new_norms)[:, None])
    ws = ChunkWorkspace(C=K.shape[0], K=K, V=V, Q=Q, H=H, Htilde=Htilde,
                        Khat=-Ktilde, gamma=gam, mu=mu, Ds=Ds, beta=beta, G_gate=G)
    return S_new, Y, ws


def _scan(S0, tokens, mode, C, normalization, kernel, pad):
    if C < 1:
        raise ShapeError(f"chunk size must be >= 1, got {C}")
    if normalization not in (PER_TOKEN, PER_CHUNK):
        raise ValueError(f"unknown normalization {normalization!r}")
    K, V, Q, gam, mu = tokens_to_arrays(tokens)
    T = K.shape[0]
    if T % C != 0:
        if not pad:
            raise ShapeError(f"sequence length {T} not divisible by chunk size {C}")
        K, V, Q, gam, mu, T = _pad_to_multiple(K, V, Q, gam, mu, C)
    S = S0
    outputs = np.empty((K.shape[0], V.shape[1]))
    for b in range(0, K.shape[0], C):
        sl = slice(b, b + C)
        S, Y, _ = kernel(S, K[sl], V[sl], Q[sl], gam[sl], mu[sl], mode, normalization)
        outputs[sl] = Y
    return S, outputs[:T]


def scan_chunkwise_full(S0: StateMatrix, tokens: Sequence[TokenTriple], mode: Mode,
                        C: int, normalization: str = PER_TOKEN, pad: bool = True):
    """Chunk-level closed-form scan (Omega-tensor form)."""
    return _scan(S0, tokens, mode, C, normalization, _chunk_full, pad)


def scan_chunkwise_rank1(S0: StateMatrix, tokens: Sequence[TokenTriple], mode: Mode,
                         C: int, normalization: str = PER_TOKEN, pad: bool = True):
    """Rank-one-gate scan via the gated-linear-attention intra-chunk primitive."""
    return _scan(S0, tokens, mode, C, normalization, _chunk_rank1, pad)
