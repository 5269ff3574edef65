"""Minimal trainable network around the recurrences.

Block layout: scale-only pre-norm -> shared q/k projection -> two depthwise
causal convolutions (width 4) -> SiLU -> per-head recurrent scan with
input-dependent sigmoid gates -> GeLU post-gate -> output projection ->
residual.  Everything is built from autodiff Vars so one backward() call
differentiates through the full nonlinear scan.

Scans here are batched re-implementations of `recurrence`, `chunkwise` and
`baselines` on the tape; the numpy modules stay the ground truth and the test
suite pins forward equivalence between the two.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .autodiff import Var, concat, einsum
from .errors import ConfigError, ShapeError
from .recurrence import EPS, Mode

__all__ = [
    "SCAN_KINDS",
    "MODEL_KINDS",
    "LATTICE_KINDS",
    "PER_SLOT_GATE_KINDS",
    "ModelConfig",
    "init_params",
    "trainable",
    "param_count",
    "block_forward",
    "lm_forward",
]

SCAN_KINDS = ("sequential", "chunk-full", "chunk-rank1")
LATTICE_KINDS = ("lattice-dec", "lattice-sim", "lattice-enc")
BASELINE_KINDS = ("la", "mamba2", "gla", "deltanet", "gated-deltanet", "rwkv7", "ttt")
MODEL_KINDS = LATTICE_KINDS + BASELINE_KINDS
PER_SLOT_GATE_KINDS = ("gla", "rwkv7")
_GAMMA_KINDS = LATTICE_KINDS + ("deltanet", "gated-deltanet", "rwkv7", "ttt")
_MU_KINDS = LATTICE_KINDS + ("mamba2", "gla", "gated-deltanet", "rwkv7")

_MODE_OF = {"lattice-dec": Mode.DEC, "lattice-sim": Mode.SIM, "lattice-enc": Mode.ENC}


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int
    n_blocks: int
    n_heads: int
    m: int
    d_head: int
    kind: str = "lattice-dec"
    scan_kind: str = "sequential"
    chunk_size: int = 1
    conv_width: int = 4
    normalization: str = "per-token"
    shared_qk: bool = True
    tied_head: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.scan_kind not in SCAN_KINDS:
            raise ConfigError(f"unknown scan kind {self.scan_kind!r}")
        if self.kind not in LATTICE_KINDS and self.scan_kind != "sequential":
            raise ConfigError(f"{self.kind} supports only the sequential scan")
        if min(self.vocab_size, self.d_model, self.n_heads, self.m,
               self.d_head, self.conv_width) < 1 or self.n_blocks < 0:
            raise ConfigError("all model dimensions must be positive")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.normalization not in ("per-token", "per-chunk"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")

    @property
    def mode(self) -> Optional[Mode]:
        return _MODE_OF.get(self.kind)

    @property
    def uses_gamma(self) -> bool:
        return self.kind in _GAMMA_KINDS

    @property
    def uses_mu(self) -> bool:
        return self.kind in _MU_KINDS

    @property
    def per_slot_mu(self) -> bool:
        return self.kind in PER_SLOT_GATE_KINDS


def _gauss(rng, shape, sigma):
    return rng.standard_normal(shape) * sigma


def init_params(cfg: ModelConfig) -> Dict[str, Var]:
    """Gaussian init: sigma 0.02 for the embedding, 1/sqrt(fan_in) elsewhere.

    Recurrent initial states are non-trainable buffers: seeded unit-norm
    rows for the lattice kinds (the sphere constraint needs a nonzero
    start), zeros for the linear baselines.
    """
    rng = np.random.default_rng(cfg.seed)
    p: Dict[str, Var] = {}

    def par(name, shape, sigma=None):
        sigma = sigma if sigma is not None else 1.0 / np.sqrt(shape[0])
        p[name] = Var(_gauss(rng, shape, sigma), requires_grad=True)

    p["embed"] = Var(_gauss(rng, (cfg.vocab_size, cfg.d_model), 0.02), requires_grad=True)
    H, m, dh, D = cfg.n_heads, cfg.m, cfg.d_head, cfg.d_model
    for i in range(cfg.n_blocks):
        b = f"blocks.{i}."
        p[b + "norm_scale"] = Var(np.ones(D), requires_grad=True)
        if cfg.shared_qk:
            par(b + "w_qk", (D, H * m))
        else:
            par(b + "w_q", (D, H * m))
            par(b + "w_k", (D, H * m))
        # small taps: wide conv weights push the SiLU into saturation at
        # init and can trap training on a no-recall plateau
        p[b + "conv_q"] = Var(_gauss(rng, (cfg.conv_width, H * m), 0.1), requires_grad=True)
        p[b + "conv_k"] = Var(_gauss(rng, (cfg.conv_width, H * m), 0.1), requires_grad=True)
        par(b + "w_v", (D, H * dh))
        if cfg.uses_gamma:
            par(b + "w_gamma", (D, H))
            p[b + "b_gamma"] = Var(np.zeros(H), requires_grad=True)
        if cfg.uses_mu:
            n_mu = H * m if cfg.per_slot_mu else H
            par(b + "w_mu", (D, n_mu))
            p[b + "b_mu"] = Var(np.full(n_mu, 3.0), requires_grad=True)
        par(b + "w_gate", (D, H * dh))
        par(b + "w_out", (H * dh, D))
        if cfg.kind in LATTICE_KINDS or cfg.kind == "ttt":
            # nonzero start: the sphere constraint (and TTT's output
            # normalization) behave badly around an all-zero state
            s0 = rng.standard_normal((H, m, dh))
            s0 /= np.linalg.norm(s0, axis=2, keepdims=True)
        else:
            s0 = np.zeros((H, m, dh))
        p[b + "s0"] = Var(s0, requires_grad=False)
    p["final_norm_scale"] = Var(np.ones(D), requires_grad=True)
    if not cfg.tied_head:
        par("head", (D, cfg.vocab_size))
    p["head_bias"] = Var(np.zeros(cfg.vocab_size), requires_grad=True)
    return p


def trainable(params: Dict[str, Var]) -> Dict[str, Var]:
    return {k: v for k, v in params.items() if v.requires_grad}


def param_count(params: Dict[str, Var]) -> int:
    return sum(v.data.size for v in trainable(params).values())


def rms_norm(x: Var, scale: Var, eps: float = 1e-8) -> Var:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + eps).sqrt() * scale


def causal_depthwise_conv(x: Var, w: Var) -> Var:
    """Depthwise causal conv over time: y_t = sum_j w[j] x_{t - (W-1) + j}.

    x: (B, T, C), w: (W, C); left zero-padding so y_0 sees only x_0.
    """
    B, T, C = x.shape
    W = w.shape[0]
    out = None
    for j in range(W):
        s = W - 1 - j
        if s == 0:
            shifted = x
        elif s >= T:
            continue
        else:
            pad = Var(np.zeros((B, s, C)))
            shifted = concat([pad, x[:, : T - s, :]], axis=1)
        term = shifted * w[j]
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# batched scans on the tape; state is (B, m, d) throughout
# ---------------------------------------------------------------------------


def _slot_norms(S: Var) -> Var:
    return (S * S).sum(axis=-1) ** 0.5


def _lattice_driver(cfg_mode: Mode, S: Var, phi: Var, k: Var, v: Var):
    """(h, c): update driver (B, d) and writing intensity (B, m)."""
    if cfg_mode is Mode.DEC:
        h = einsum("bm,bmd->bd", k, phi) - v
        return h, k
    if cfg_mode is Mode.SIM:
        return -1.0 * v, k
    h = v
    c = einsum("bd,bmd->bm", v, phi) - k
    return h, c


def _lattice_step_ad(mode: Mode, S: Var, k: Var, v: Var, gamma: Var, mu: Var):
    """One batched orthogonal-write update; gamma/mu are (B, 1)."""
    norms = _slot_norms(S)                       # (B, m)
    phi = S / norms.reshape(norms.shape[0], -1, 1)
    h, c = _lattice_driver(mode, S, phi, k, v)
    sh = einsum("bmd,bd->bm", S, h)
    ratio = sh / (norms * norms)
    perp = h.reshape(h.shape[0], 1, -1) - S * ratio.reshape(ratio.shape[0], -1, 1)
    delta = (-1.0 * gamma * c / norms).reshape(norms.shape[0], -1, 1) * perp
    dsq = (delta * delta).sum(axis=-1)
    beta = norms / (mu * mu * norms * norms + dsq).sqrt()
    S_new = beta.reshape(beta.shape[0], -1, 1) * (
        mu.reshape(mu.shape[0], -1, 1) * S + delta)
    return S_new


def lattice_step_fused(mode: Mode, S: Var, k: Var, v: Var,
                       gamma: Var, mu: Var) -> Var:
    """One orthogonal-write update as a single tape node.

    Identical to composing elementary ops (the composed form is
    _lattice_step_ad, kept for cross-checking) but with a hand-derived
    batched adjoint, which keeps the tape short enough for long scans.
    Shapes: S (B, m, d), k (B, m), v (B, d), gamma/mu (B, 1).
    """
    Sd, kd, vd = S.data, k.data, v.data
    g = gamma.data.reshape(-1, 1)
    muv = mu.data.reshape(-1, 1)
    n = np.linalg.norm(Sd, axis=2)                       # (B, m)
    phi = Sd / n[:, :, None]
    if mode is Mode.DEC:
        h = np.einsum("bm,bmd->bd", kd, phi) - vd
        c = kd
    elif mode is Mode.SIM:
        h = -vd
        c = kd
    else:
        h = vd
        c = np.einsum("bd,bmd->bm", vd, phi) - kd
    sh = np.einsum("bmd,bd->bm", Sd, h)
    r = sh / (n * n)
    p = h[:, None, :] - r[:, :, None] * Sd               # (B, m, d)
    w = g * c / n                                        # (B, m)
    delta = -w[:, :, None] * p
    qsq = np.einsum("bmd,bmd->bm", delta, delta)
    D = muv * muv * n * n + qsq
    beta = n / np.sqrt(D)
    u = muv[:, :, None] * Sd + delta
    out_data = beta[:, :, None] * u

    def backward(gbar):
        gbar = np.asarray(gbar)
        beta_b = np.einsum("bmd,bmd->bm", gbar, u)       # dL/dbeta
        u_b = beta[:, :, None] * gbar
        S_b = muv[:, :, None] * u_b
        mu_b = np.einsum("bmd,bmd->bm", u_b, Sd)
        delta_b = u_b.copy()
        q_b = beta_b * (-0.5) * n / D**1.5
        delta_b += 2.0 * q_b[:, :, None] * delta
        w_b = -np.einsum("bmd,bmd->bm", delta_b, p)
        p_b = -w[:, :, None] * delta_b
        g_b = w_b * c / n
        c_b = w_b * g / n
        n_b = -w_b * g * c / (n * n)
        h_b = p_b.sum(axis=1)                            # (B, d)
        r_b = -np.einsum("bmd,bmd->bm", p_b, Sd)
        S_b += -r[:, :, None] * p_b
        sh_b = r_b / (n * n)
        n_b += -2.0 * r_b * sh / n**3
        S_b += sh_b[:, :, None] * h[:, None, :]
        h_b += np.einsum("bm,bmd->bd", sh_b, Sd)
        n_b += beta_b * (1.0 - muv * muv * n * n / D) / np.sqrt(D)
        phi_b = np.zeros_like(Sd)
        if mode is Mode.DEC:
            k_b = np.einsum("bd,bmd->bm", h_b, phi) + c_b
            phi_b += kd[:, :, None] * h_b[:, None, :]
            v_b = -h_b
        elif mode is Mode.SIM:
            k_b = c_b
            v_b = -h_b
        else:
            k_b = -c_b
            phi_b += c_b[:, :, None] * vd[:, None, :]
            v_b = h_b + np.einsum("bm,bmd->bd", c_b, phi)
        S_b += phi_b / n[:, :, None]
        n_b += -np.einsum("bmd,bmd->bm", phi_b, phi) / n
        # mu_b also gains the beta dependence on mu
        mu_b += beta_b * (-muv * n**3 / D**1.5)
        S_b += n_b[:, :, None] * phi
        S._accum(S_b)
        k._accum(k_b)
        v._accum(v_b)
        gamma._accum(g_b.sum(axis=1, keepdims=True))
        mu._accum(mu_b.sum(axis=1, keepdims=True))

    return S._make(out_data, (S, k, v, gamma, mu), backward)


def _scan_sequential_lattice(mode, S, K, V, Q, gamma, mu):
    B, T, _ = K.shape
    ys = []
    for t in range(T):
        S = lattice_step_fused(mode, S, K[:, t], V[:, t],
                               gamma[:, t : t + 1], mu[:, t : t + 1])
        ys.append(einsum("bm,bmd->bd", Q[:, t], S))
    return stack_time(ys)


def stack_time(ys):
    from .autodiff import stack

    return stack(ys, axis=1)


def _cumprod_time(xs: Var) -> Var:
    """Cumulative product along axis 1 of a (B, C, m) Var."""
    C = xs.shape[1]
    acc = xs[:, 0]
    outs = [acc]
    for t in range(1, C):
        acc = acc * xs[:, t]
        outs.append(acc)
    return stack_time(outs)


def _frozen_chunk_ad(mode: Mode, S: Var, K: Var, V: Var, gamma: Var, mu: Var):
    """Frozen-at-chunk-start quantities; K/V are (B, C, .), gamma/mu (B, C)."""
    B = K.shape[0]
    norms = _slot_norms(S)                                  # (B, m)
    phi = S / norms.reshape(B, -1, 1)
    if mode is Mode.DEC:
        H = einsum("bcm,bmd->bcd", K, phi) - V
        Cint = K
    elif mode is Mode.SIM:
        H = -1.0 * V
        Cint = K
    else:
        H = V
        Cint = einsum("bcd,bmd->bcm", V, phi) - K
    Htilde = einsum("bcd,bmd->bcm", H, phi) / norms.reshape(B, 1, -1)
    Chat = Cint / norms.reshape(B, 1, -1)
    h_sq = (H * H).sum(axis=-1)                             # (B, C)
    nsq = (norms * norms).reshape(B, 1, -1)
    raw = Chat * Chat * h_sq.reshape(B, -1, 1) - nsq * (Htilde * Chat) ** 2
    Ds = (gamma * gamma).reshape(B, -1, 1) * raw.relu_floor(0.0)
    beta = norms.reshape(B, 1, -1) / (
        (mu * mu).reshape(B, -1, 1) * nsq + Ds).sqrt()
    return norms, H, Htilde, Chat, beta


def _chunk_full_ad(mode, S, K, V, Q, gamma, mu, unit_beta=False):
    B, C, _ = K.shape
    norms, H, Htilde, Chat, beta = _frozen_chunk_ad(mode, S, K, V, gamma, mu)
    if unit_beta:
        beta = Var(np.ones(beta.shape))
    Khat = gamma.reshape(B, -1, 1) * beta * Chat
    a = _cumprod_time(mu.reshape(B, -1, 1) * beta)          # (B, C, m)
    tril = np.tril(np.ones((C, C)))[None, :, :, None]
    omega = (a.reshape(B, C, 1, -1) / a.reshape(B, 1, C, -1)) * tril
    F = einsum("bjim,bim->bjm", omega, Htilde * Khat)
    P = einsum("bim,bjm,bijm->bij", Q, Khat, omega)
    Y = einsum("bcm,bmd->bcd", Q * (a + F), S) - einsum("bij,bjd->bid", P, H)
    decay_last = a[:, -1] + F[:, -1]
    S_new = decay_last.reshape(B, -1, 1) * S - einsum(
        "bcm,bcd->bmd", omega[:, -1] * Khat, H)
    return S_new, Y


def _chunk_rank1_ad(mode, S, K, V, Q, gamma, mu, unit_beta=False):
    B, C, _ = K.shape
    norms, H, Htilde, Chat, beta = _frozen_chunk_ad(mode, S, K, V, gamma, mu)
    if unit_beta:
        beta = Var(np.ones(beta.shape))
    G = beta * (mu.reshape(B, -1, 1) + gamma.reshape(B, -1, 1) * Htilde * Chat)
    Ktilde = -1.0 * beta * gamma.reshape(B, -1, 1) * Chat
    cum = _cumprod_time(G)
    Qg = Q * cum
    Kg = Ktilde / cum
    tril = np.tril(np.ones((C, C)))[None, :, :]
    attn = einsum("bim,bjm->bij", Qg, Kg) * tril
    Y = einsum("bcm,bmd->bcd", Qg, S) + einsum("bij,bjd->bid", attn, H)
    last = cum[:, -1]
    S_new = last.reshape(B, -1, 1) * S + einsum(
        "bcm,bcd->bmd", Ktilde * (last.reshape(B, 1, -1) / cum), H)
    return S_new, Y


def _scan_chunked_lattice(cfg: ModelConfig, S, K, V, Q, gamma, mu):
    B, T, _ = K.shape
    C = cfg.chunk_size
    if T % C != 0:
        raise ShapeError(f"sequence length {T} not divisible by chunk size {C}")
    kernel = _chunk_full_ad if cfg.scan_kind == "chunk-full" else _chunk_rank1_ad
    chunks = []
    per_chunk = cfg.normalization == "per-chunk"
    B = K.shape[0]
    for b in range(0, T, C):
        sl = slice(b, b + C)
        if per_chunk:
            # retraction off inside the chunk; slot norms restored at the end
            prev_norms = _slot_norms(S)
            S, Y = kernel(cfg.mode, S, K[:, sl], V[:, sl], Q[:, sl],
                          gamma[:, sl], mu[:, sl], unit_beta=True)
            S = S * (prev_norms / _slot_norms(S)).reshape(B, -1, 1)
        else:
            S, Y = kernel(cfg.mode, S, K[:, sl], V[:, sl], Q[:, sl],
                          gamma[:, sl], mu[:, sl])
        chunks.append(Y)
    return concat(chunks, axis=1)


def _scan_baseline(kind: str, S, K, V, Q, gamma, mu, mu_vec):
    B, T, _ = K.shape
    ys = []
    for t in range(T):
        k, v = K[:, t], V[:, t]
        if kind == "la":
            S = S + einsum("bm,bd->bmd", k, v)
        elif kind == "mamba2":
            S = mu[:, t].reshape(B, 1, 1) * S + einsum("bm,bd->bmd", k, v)
        elif kind == "gla":
            S = mu_vec[:, t].reshape(B, -1, 1) * S + einsum("bm,bd->bmd", k, v)
        elif kind == "deltanet":
            e = einsum("bm,bmd->bd", k, S) - v
            S = S - gamma[:, t].reshape(B, 1, 1) * einsum("bm,bd->bmd", k, e)
        elif kind == "gated-deltanet":
            Sd = mu[:, t].reshape(B, 1, 1) * S
            e = einsum("bm,bmd->bd", k, Sd) - v
            S = Sd - gamma[:, t].reshape(B, 1, 1) * einsum("bm,bd->bmd", k, e)
        elif kind == "rwkv7":
            e = einsum("bm,bmd->bd", k, S) - v
            S = mu_vec[:, t].reshape(B, -1, 1) * S - gamma[:, t].reshape(
                B, 1, 1) * einsum("bm,bd->bmd", k, e)
        elif kind == "ttt":
            z = einsum("bm,bmd->bd", k, S)
            zn = ((z * z).sum(axis=-1, keepdims=True) + EPS * EPS).sqrt()
            yhat = z / zn
            e = yhat - v
            ze = (z * e).sum(axis=-1, keepdims=True)
            e_perp = e - z * (ze / (zn * zn))
            S = S - gamma[:, t].reshape(B, 1, 1) * einsum(
                "bm,bd->bmd", k, e_perp / zn)
        else:
            raise ConfigError(f"unknown scan kind {kind!r}")
        ys.append(einsum("bm,bmd->bd", Q[:, t], S))
    return stack_time(ys)


def block_forward(cfg: ModelConfig, params: Dict[str, Var], idx: int, x: Var) -> Var:
    """One mixing block; x is (B, T, d_model), returns same shape."""
    b = f"blocks.{idx}."
    B, T, D = x.shape
    H, m, dh = cfg.n_heads, cfg.m, cfg.d_head
    xn = rms_norm(x, params[b + "norm_scale"])
    if cfg.shared_qk:
        qk_in = xn @ params[b + "w_qk"]
        q_in = k_in = qk_in
    else:
        q_in = xn @ params[b + "w_q"]
        k_in = xn @ params[b + "w_k"]
    q = causal_depthwise_conv(q_in, params[b + "conv_q"]).silu()
    k = causal_depthwise_conv(k_in, params[b + "conv_k"]).silu()
    v = xn @ params[b + "w_v"]

    q = q.reshape(B, T, H, m)
    k = k.reshape(B, T, H, m)
    v = v.reshape(B, T, H, dh)
    gamma = (xn @ params[b + "w_gamma"] + params[b + "b_gamma"]).sigmoid() \
        if cfg.uses_gamma else Var(np.ones((B, T, H)))
    mu_vec = None
    if cfg.uses_mu:
        mu_raw = (xn @ params[b + "w_mu"] + params[b + "b_mu"]).sigmoid()
        if cfg.per_slot_mu:
            mu_vec = mu_raw.reshape(B, T, H, m)
            mu = Var(np.ones((B, T, H)))
        else:
            mu = mu_raw
    else:
        mu = Var(np.ones((B, T, H)))

    s0 = params[b + "s0"]
    head_outs = []
    for h in range(H):
        S = Var(np.broadcast_to(s0.data[h], (B, m, dh)).copy())
        Kh, Vh, Qh = k[:, :, h], v[:, :, h], q[:, :, h]
        gm, mm = gamma[:, :, h], mu[:, :, h]
        if cfg.kind in LATTICE_KINDS:
            if cfg.scan_kind == "sequential":
                yh = _scan_sequential_lattice(cfg.mode, S, Kh, Vh, Qh, gm, mm)
            else:
                yh = _scan_chunked_lattice(cfg, S, Kh, Vh, Qh, gm, mm)
        else:
            mv = mu_vec[:, :, h] if mu_vec is not None else None
            yh = _scan_baseline(cfg.kind, S, Kh, Vh, Qh, gm, mm, mv)
        head_outs.append(yh)
    y = head_outs[0] if H == 1 else concat(head_outs, axis=2)
    gate = (xn @ params[b + "w_gate"]).gelu()
    y = (y.reshape(B, T, H * dh) * gate) @ params[b + "w_out"]
    return x + y


def lm_forward(cfg: ModelConfig, params: Dict[str, Var], token_ids: np.ndarray) -> Var:
    """token_ids: (B, T) integer array; returns logits Var (B, T, vocab)."""
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ShapeError(f"token_ids must be (B, T), got {token_ids.shape}")
    if token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size:
        raise ConfigError("token id out of range")
    x = params["embed"].take_rows(token_ids)
    for i in range(cfg.n_blocks):
        x = block_forward(cfg, params, i, x)
    x = rms_norm(x, params["final_norm_scale"])
    head = params["embed"].T if cfg.tied_head else params["head"]
    return x @ head + params["head_bias"]
