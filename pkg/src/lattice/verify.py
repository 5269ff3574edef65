"""Invariant suites: every derivation the kernels rely on, checked numerically.

Each suite returns CheckResult rows; the CLI prints them and the acceptance
tests re-run them with the pinned sizes and thresholds.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .baselines import deltanet_scan, ttt_step
from .chunkwise import (PER_CHUNK, PER_TOKEN, _frozen_chunk_quantities,
                        beta_chunk, scan_chunkwise_full, scan_chunkwise_rank1)
from .errors import ConfigError
from .recurrence import (EPS, Mode, StateMatrix, TokenTriple, compression_loss,
                         dec_update_linearized, init_state, lattice_scan,
                         lattice_step, osr_gradient)

__all__ = ["CheckResult", "SUITES", "run_suites"] + [
    "suite_orthogonality", "suite_norms", "suite_gradients",
    "suite_chunk_equivalence", "suite_beta_chunk", "suite_delta_rule",
    "suite_baseline_consistency", "suite_backward", "suite_normalization",
]


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.value <= self.threshold


def _random_token(rng, m, d, gamma_range=(0.05, 1.0), mu_range=(0.9, 1.0)):
    return TokenTriple(k=rng.standard_normal(m), v=rng.standard_normal(d),
                       q=rng.standard_normal(m),
                       gamma=float(rng.uniform(*gamma_range)),
                       mu=float(rng.uniform(*mu_range)))


def _random_tokens(rng, T, m, d, **kw):
    return [_random_token(rng, m, d, **kw) for _ in range(T)]


def suite_orthogonality(n_draws: int = 1000, seed: int = 0) -> List[CheckResult]:
    """Raw update rows are orthogonal to the slots they modify."""
    rng = np.random.default_rng(seed)
    rows = []
    for mode in Mode:
        worst = 0.0
        for _ in range(n_draws):
            m, d = int(rng.integers(2, 17)), int(rng.integers(2, 17))
            S = init_state(m, d, seed=int(rng.integers(2**31)))
            t = _random_token(rng, m, d)
            _, tr = osr_gradient(S, t, mode)
            dn = np.linalg.norm(tr.delta, axis=1)
            sn = S.slot_norms()
            dots = np.abs(np.einsum("id,id->i", tr.delta, S.slots))
            scale = np.maximum(dn * sn, 1e-300)
            worst = max(worst, float((dots / scale).max()))
        rows.append(CheckResult("orthogonality", f"mode={mode.value}", worst, 1e-9))
    return rows


def suite_norms(steps: int = 10000, seed: int = 0) -> List[CheckResult]:
    """Slot norms stay on the unit sphere through long scans."""
    rng = np.random.default_rng(seed)
    rows = []
    m, d = 8, 16
    for mu in (1.0, 0.99):
        S = init_state(m, d, seed=1)
        for _ in range(steps):
            t = TokenTriple(k=rng.standard_normal(m), v=rng.standard_normal(d),
                            q=rng.standard_normal(m), gamma=0.5, mu=mu)
            S, _, _ = lattice_step(S, t, Mode.DEC)
        drift = float(np.abs(S.slot_norms() - 1.0).max())
        rows.append(CheckResult("norms", f"mu={mu}", drift, 1e-6))
    return rows


def _fd_state_gradient(loss_fn: Callable[[np.ndarray], float],
                       S: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(S)
    it = np.nditer(S, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = S[idx]
        S[idx] = orig + eps
        lp = loss_fn(S)
        S[idx] = orig - eps
        lm = loss_fn(S)
        S[idx] = orig
        g[idx] = (lp - lm) / (2 * eps)
    return g


def suite_gradients(n_instances: int = 100, seed: int = 0) -> List[CheckResult]:
    """Closed-form compression gradients vs central finite differences."""
    rng = np.random.default_rng(seed)
    rows = []
    for mode in Mode:
        worst = 0.0
        for _ in range(n_instances):
            m, d = int(rng.integers(2, 17)), int(rng.integers(2, 17))
            S = StateMatrix(rng.standard_normal((m, d)) + 0.0)
            t = _random_token(rng, m, d)
            grad, _ = osr_gradient(S, t, mode)
            fd = _fd_state_gradient(
                lambda s: compression_loss(StateMatrix(s), t, mode), S.slots)
            denom = max(np.abs(fd).max(), np.abs(grad).max(), 1e-8)
            worst = max(worst, float(np.abs(grad - fd).max() / denom))
        rows.append(CheckResult("gradients", f"mode={mode.value}", worst, 1e-6))
    return rows


def suite_chunk_equivalence(n_seqs: int = 100, T: int = 32,
                            seed: int = 0) -> List[CheckResult]:
    """Both chunk scans at C=1 equal the sequential scan exactly."""
    rng = np.random.default_rng(seed)
    rows = []
    for mode in Mode:
        for scan, label in ((scan_chunkwise_full, "full"),
                            (scan_chunkwise_rank1, "rank1")):
            worst = 0.0
            for _ in range(n_seqs):
                m, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
                S0 = init_state(m, d, seed=int(rng.integers(2**31)))
                toks = _random_tokens(rng, T, m, d)
                Ss, Ys, _ = lattice_scan(S0, toks, mode)
                Sc, Yc = scan(S0, toks, mode, C=1)
                scale = max(np.abs(Ys).max(), np.abs(Ss.slots).max(), 1e-12)
                worst = max(worst,
                            float(np.abs(Yc - Ys).max() / scale),
                            float(np.abs(Sc.slots - Ss.slots).max() / scale))
            rows.append(CheckResult("chunk-equivalence",
                                    f"mode={mode.value} {label} C=1", worst, 1e-10))
    return rows


def suite_beta_chunk(n_chunks: int = 100, seed: int = 0) -> List[CheckResult]:
    """Chunk-level squared update norms match materialized per-step deltas."""
    rng = np.random.default_rng(seed)
    rows = []
    for mode in Mode:
        worst = 0.0
        for _ in range(n_chunks):
            m, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            C = int(rng.integers(2, 17))
            S0 = init_state(m, d, seed=int(rng.integers(2**31)))
            K = rng.standard_normal((C, m))
            V = rng.standard_normal((C, d))
            gam = rng.uniform(0.05, 1.0, C)
            norms, H, Htilde, Chat = _frozen_chunk_quantities(S0, K, V, mode)
            Ds = beta_chunk(S0, H, Htilde, Chat, gam)
            for tau in range(C):
                for i in range(m):
                    s = S0.slots[i]
                    perp = H[tau] - s * (s @ H[tau]) / (s @ s)
                    delta = -gam[tau] * Chat[tau, i] * perp
                    ref = float(delta @ delta)
                    worst = max(worst, abs(ref - Ds[tau, i]) / max(ref, 1.0))
        rows.append(CheckResult("beta-chunk", f"mode={mode.value}", worst, 1e-9))
    return rows


def suite_delta_rule(n_steps: int = 100, seed: int = 0) -> List[CheckResult]:
    """Normalization off + identity feature map reduces Dec to the delta rule."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    m = d = 6
    S = StateMatrix(rng.standard_normal((m, d)))
    for _ in range(n_steps):
        t = _random_token(rng, m, d)
        lin = dec_update_linearized(S, t).slots
        ref, _ = deltanet_scan(S, [t])
        worst = max(worst, float(np.abs(lin - ref.slots).max()))
        S = StateMatrix(lin)
    return [CheckResult("delta-rule", "dec-linearized vs deltanet", worst, 1e-10)]


# -- Table-row objective consistency ----------------------------------------


def _baseline_rows():
    """(name, objective L(S), decay D(S), gradient-eval-at) per update rule.

    Each rule must satisfy S_new = D(S) - gamma * dL/dS evaluated at `at(S)`.
    The per-slot-decay row (diag gating) is exercised separately with a
    random decay vector.
    """
    return [
        ("la",
         lambda S, t: -float((t.k @ S) @ t.v),
         lambda S, t: S, lambda S, t: S, 1.0),
        ("mamba2",
         lambda S, t: -float((t.k @ S) @ t.v),
         lambda S, t: t.mu * S, lambda S, t: S, 1.0),
        ("deltanet",
         lambda S, t: 0.5 * float(((t.k @ S - t.v) ** 2).sum()),
         lambda S, t: S, lambda S, t: S, None),
        ("gated-deltanet",
         lambda S, t: 0.5 * float(((t.k @ S - t.v) ** 2).sum()),
         lambda S, t: t.mu * S, lambda S, t: t.mu * S, None),
        ("rwkv7",
         lambda S, t: 0.5 * float(((t.k @ S - t.v) ** 2).sum()),
         lambda S, t: t.mu * S, lambda S, t: S, None),
        ("ttt",
         lambda S, t: 0.5 * float(((_guard_norm(t.k @ S) - t.v) ** 2).sum()),
         lambda S, t: S, lambda S, t: S, None),
    ]


def _guard_norm(z):
    return z / np.sqrt(z @ z + EPS * EPS)


def _baseline_update(name, S, t):
    from . import baselines as bl

    one = [t]
    state = StateMatrix(S.copy())
    fn = {"la": bl.la_scan, "mamba2": bl.mamba2_scan, "deltanet": bl.deltanet_scan,
          "gated-deltanet": bl.gated_deltanet_scan, "rwkv7": bl.rwkv7_scan,
          "ttt": bl.ttt_scan}[name]
    out, _ = fn(state, one)
    return out.slots


def suite_baseline_consistency(n_instances: int = 20,
                               seed: int = 0) -> List[CheckResult]:
    """Every update rule = its decay term - gamma * FD gradient of its objective."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, loss, decay, at, fixed_gamma in _baseline_rows():
        worst = 0.0
        for _ in range(n_instances):
            m, d = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            S = rng.standard_normal((m, d))
            t = _random_token(rng, m, d)
            gamma = fixed_gamma if fixed_gamma is not None else t.gamma
            S_eval = at(S, t)
            fd = _fd_state_gradient(lambda s: loss(s, t), S_eval.copy())
            predicted = decay(S, t) - gamma * fd
            actual = _baseline_update(name, S, t)
            denom = max(np.abs(actual).max(), 1.0)
            worst = max(worst, float(np.abs(predicted - actual).max() / denom))
        rows.append(CheckResult("baseline-consistency", name, worst, 1e-6))
    # diagonally gated rows, with a random per-slot decay vector
    from . import baselines as bl

    for name, grad_at_decayed in (("gla", None), ("rwkv7", False)):
        worst = 0.0
        for _ in range(n_instances):
            m, d = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            S = rng.standard_normal((m, d))
            t = _random_token(rng, m, d)
            mu_vec = rng.uniform(0.8, 1.0, m)
            if name == "gla":
                loss = lambda s: -float((t.k @ s) @ t.v)
                gamma = 1.0
            else:
                loss = lambda s: 0.5 * float(((t.k @ s - t.v) ** 2).sum())
                gamma = t.gamma
            fd = _fd_state_gradient(loss, S.copy())
            predicted = mu_vec[:, None] * S - gamma * fd
            fn = bl.gla_scan if name == "gla" else bl.rwkv7_scan
            out, _ = fn(StateMatrix(S.copy()), [t], mu_vecs=mu_vec[None, :])
            worst = max(worst, float(np.abs(predicted - out.slots).max()
                                     / max(np.abs(out.slots).max(), 1.0)))
        rows.append(CheckResult("baseline-consistency", f"{name} per-slot",
                                worst, 1e-6))
    # the lattice rows of the same table reduce to the gradient suite
    for r in suite_gradients(n_instances=max(n_instances // 2, 5), seed=seed + 1):
        rows.append(CheckResult("baseline-consistency",
                                f"lattice {r.name}", r.value, 1e-6))
    return rows


def suite_backward(tolerance: float = 1e-5, seed: int = 0,
                   full: bool = False) -> List[CheckResult]:
    """End-to-end model gradients vs finite differences on tiny configs."""
    from .model import ModelConfig, init_params
    from .training import grad_check

    rng = np.random.default_rng(seed)
    B, T, V = 2, 6, 11
    tokens = rng.integers(0, V, (B, T))
    targets = rng.integers(0, V, (B, T))
    mask = rng.random((B, T)) < 0.6
    mask[0, 0] = True
    combos = [("lattice-dec", "sequential", 1),
              ("lattice-dec", "chunk-full", 2),
              ("lattice-dec", "chunk-rank1", 2),
              ("la", "sequential", 1),
              ("deltanet", "sequential", 1),
              ("ttt", "sequential", 1)]
    if full:
        combos += [("lattice-sim", "sequential", 1),
                   ("lattice-enc", "sequential", 1),
                   ("mamba2", "sequential", 1), ("gla", "sequential", 1),
                   ("gated-deltanet", "sequential", 1),
                   ("rwkv7", "sequential", 1)]
    rows = []
    for kind, sk, C in combos:
        cfg = ModelConfig(vocab_size=V, d_model=8, n_blocks=2, n_heads=2,
                          m=4, d_head=4, kind=kind, scan_kind=sk,
                          chunk_size=C, seed=3)
        params = init_params(cfg)
        rep = grad_check(cfg, params, tokens, targets, mask,
                         tolerance=tolerance)
        rows.append(CheckResult("backward", f"{kind} {sk} C={C}",
                                rep.max_rel_error, tolerance))
    return rows


def suite_normalization(n_seqs: int = 20, T: int = 32, C: int = 16,
                        seed: int = 0) -> List[CheckResult]:
    """Per-token retraction tracks the sequential oracle at least as closely
    as the per-chunk variant (mean output deviation at C=16)."""
    rng = np.random.default_rng(seed)
    dev = {PER_TOKEN: 0.0, PER_CHUNK: 0.0}
    for _ in range(n_seqs):
        m, d = 8, 8
        S0 = init_state(m, d, seed=int(rng.integers(2**31)))
        toks = _random_tokens(rng, T, m, d, gamma_range=(0.05, 0.5))
        _, Ys, _ = lattice_scan(S0, toks, Mode.DEC)
        for norm in (PER_TOKEN, PER_CHUNK):
            _, Yc = scan_chunkwise_full(S0, toks, Mode.DEC, C=C,
                                        normalization=norm)
            dev[norm] += float(np.abs(Yc - Ys).mean()) / n_seqs
    margin = dev[PER_TOKEN] - dev[PER_CHUNK]
    return [CheckResult("normalization",
                        f"per-token {dev[PER_TOKEN]:.4f} vs per-chunk "
                        f"{dev[PER_CHUNK]:.4f}", margin, 0.0)]


SUITES: Dict[str, Callable[..., List[CheckResult]]] = {
    "orthogonality": suite_orthogonality,
    "norms": suite_norms,
    "gradients": suite_gradients,
    "chunk-equivalence": suite_chunk_equivalence,
    "beta-chunk": suite_beta_chunk,
    "delta-rule": suite_delta_rule,
    "baseline-consistency": suite_baseline_consistency,
    "backward": suite_backward,
    "normalization": suite_normalization,
}


def run_suites(filter_name: Optional[str] = None) -> List[CheckResult]:
    if filter_name is not None:
        if filter_name not in SUITES:
            raise ConfigError(f"unknown suite {filter_name!r}; "
                              f"choose from {sorted(SUITES)}")
        return SUITES[filter_name]()
    rows: List[CheckResult] = []
    for fn in SUITES.values():
        rows.extend(fn())
    return rows
