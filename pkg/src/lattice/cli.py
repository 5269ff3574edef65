"""Command-line surface: verify / mqar gen|train|eval / trace / bench.

Config files are JSON with a required "version": 1; unknown keys are
rejected.  Precedence: --set flags > file values > built-in defaults.
Exit codes: 0 ok, 1 verification or eval failure, 2 config error, 3 I/O.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import load_into, save_checkpoint
from .errors import ConfigError, LatticeError
from .model import (MODEL_KINDS, SCAN_KINDS, ModelConfig, init_params,
                    lm_forward)
from .recurrence import Mode, TokenTriple, init_state, lattice_scan
from .tasks import MqarConfig, dataset_arrays, load_dataset, mqar_accuracy, \
    mqar_generate, save_dataset
from .training import OptState, train_loop
from .verify import run_suites

__all__ = ["RunConfig", "main"]


@dataclass
class RunConfig:
    """Flat run configuration shared by all subcommands."""

    version: int = 1
    seed: int = 0
    # model
    kind: str = "lattice-dec"
    scan_kind: str = "sequential"
    chunk_size: int = 1
    normalization: str = "per-token"
    vocab_size: int = 64
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    m: int = 32
    d_head: int = 32
    # task
    seq_len: int = 64
    num_kv_pairs: int = 4
    num_samples: int = 5000
    # optimizer
    base_lr: float = 3e-3
    final_lr: float = 3e-5
    warmup_steps: int = 100
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    epochs: int = 20
    batch_size: int = 64
    # paths
    dataset_path: str = "mqar.bin"
    checkpoint_path: str = "model.latc"
    metrics_path: str = "metrics.csv"
    out_path: str = ""

    def __post_init__(self):
        if self.version != 1:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}")
        if self.scan_kind not in SCAN_KINDS:
            raise ConfigError(f"unknown scan_kind {self.scan_kind!r}")
        for name in ("epochs", "batch_size", "seq_len", "num_kv_pairs",
                     "num_samples", "vocab_size"):
            if getattr(self, name) < 1 and name != "epochs":
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=self.vocab_size, d_model=self.d_model,
                           n_blocks=self.n_blocks, n_heads=self.n_heads,
                           m=self.m, d_head=self.d_head, kind=self.kind,
                           scan_kind=self.scan_kind, chunk_size=self.chunk_size,
                           normalization=self.normalization, seed=self.seed)

    def mqar_config(self) -> MqarConfig:
        return MqarConfig(vocab_size=self.vocab_size, seq_len=self.seq_len,
                          num_kv_pairs=self.num_kv_pairs,
                          num_samples=self.num_samples, seed=self.seed)


def _coerce(value: str, target_type):
    if target_type is bool:
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    try:
        return target_type(value)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {target_type.__name__}") from exc


def load_run_config(path: Optional[str], overrides: List[str]) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    data: Dict = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        if "version" not in raw:
            raise ConfigError(f"{path}: missing required \"version\" field")
        data.update(raw)
    env_seed = os.environ.get("LATTICE_SEED")
    if env_seed is not None and "seed" not in data:
        data["seed"] = _coerce(env_seed, int)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in known:
            raise ConfigError(f"--set: unknown key {key!r}")
        data[key] = _coerce(value, types[key])
    return RunConfig(**data)


def _atomic_write_text(path: str, text: str):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- subcommands -------------------------------------------------------------


def cmd_verify(args) -> int:
    rows = run_suites(args.filter)
    width = max(len(f"{r.suite}: {r.name}") for r in rows)
    failures = 0
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        failures += not r.passed
        print(f"{status}  {r.suite + ': ' + r.name:<{width}}  "
              f"{r.value:.3e} (threshold {r.threshold:.0e})")
    print(f"{len(rows) - failures}/{len(rows)} checks passed")
    return 1 if failures else 0


def _batches(tokens, dense, mask, batch_size, rng):
    order = rng.permutation(tokens.shape[0])
    for b in range(0, len(order), batch_size):
        idx = order[b : b + batch_size]
        yield tokens[idx], dense[idx], mask[idx]


def cmd_mqar(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    if args.action == "gen":
        samples = mqar_generate(cfg.mqar_config())
        save_dataset(cfg.dataset_path, cfg.mqar_config(), samples)
        print(f"wrote {len(samples)} samples to {cfg.dataset_path}")
        return 0

    dcfg, samples = load_dataset(cfg.dataset_path)
    if dcfg.vocab_size != cfg.vocab_size or dcfg.seq_len != cfg.seq_len:
        raise ConfigError("dataset dimensions disagree with the run config")
    tokens, mask, dense = dataset_arrays(samples)
    mcfg = cfg.model_config()
    params = init_params(mcfg)

    if args.action == "train":
        n_batches = -(-len(samples) // cfg.batch_size)
        total = max(cfg.epochs * n_batches, 1)
        opt = OptState(base_lr=cfg.base_lr, final_lr=cfg.final_lr,
                       warmup_steps=min(cfg.warmup_steps, total // 10 or 1),
                       total_steps=total, weight_decay=cfg.weight_decay,
                       clip_norm=cfg.clip_norm)
        rng = np.random.default_rng(cfg.seed)
        with open(cfg.metrics_path, "w", newline="") as mf:
            writer = csv.DictWriter(mf, fieldnames=[
                "step", "lr", "loss", "grad_norm", "tokens_per_sec"])
            writer.writeheader()

            def emit(row):
                writer.writerow(row)
                mf.flush()

            for epoch in range(cfg.epochs):
                loss = train_loop(mcfg, params, opt,
                                  _batches(tokens, dense, mask,
                                           cfg.batch_size, rng), emit)
                print(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.4f}")
        save_checkpoint(cfg.checkpoint_path, params)
        print(f"saved checkpoint to {cfg.checkpoint_path}")
        return 0

    if args.action == "eval":
        load_into(params, cfg.checkpoint_path)
        logits = np.empty((len(samples), cfg.seq_len, cfg.vocab_size))
        for b in range(0, len(samples), cfg.batch_size):
            sl = slice(b, b + cfg.batch_size)
            logits[sl] = lm_forward(mcfg, params, tokens[sl]).data
        acc = mqar_accuracy(logits, samples)
        result = {"model": cfg.kind, "accuracy": acc,
                  "config": asdict(cfg)}
        text = json.dumps(result, indent=2)
        if cfg.out_path:
            _atomic_write_text(cfg.out_path, text)
        print(text)
        return 0
    raise ConfigError(f"unknown mqar action {args.action!r}")


def cmd_trace(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    if cfg.scan_kind != "sequential":
        raise ConfigError("trace is per-token; use scan_kind=sequential")
    if cfg.kind not in ("lattice-dec", "lattice-sim", "lattice-enc"):
        raise ConfigError("trace covers the orthogonal-write kinds only")
    mode = {"lattice-dec": Mode.DEC, "lattice-sim": Mode.SIM,
            "lattice-enc": Mode.ENC}[cfg.kind]
    rng = np.random.default_rng(cfg.seed)
    S = init_state(cfg.m, cfg.d_head, seed=cfg.seed)
    toks = [TokenTriple(k=rng.standard_normal(cfg.m),
                        v=rng.standard_normal(cfg.d_head),
                        q=rng.standard_normal(cfg.m),
                        gamma=0.5, mu=1.0) for _ in range(cfg.seq_len)]
    lines = []
    St = S
    from .recurrence import lattice_step

    for step, tok in enumerate(toks):
        S_new, _, tr = lattice_step(St, tok, mode)
        dots = np.abs(np.einsum("id,id->i", tr.delta, St.slots))
        scale = np.maximum(np.linalg.norm(tr.delta, axis=1)
                           * St.slot_norms(), 1e-300)
        lines.append(json.dumps({
            "step": step,
            "slot_norm_min": float(S_new.slot_norms().min()),
            "slot_norm_max": float(S_new.slot_norms().max()),
            "orthogonality": float((dots / scale).max()),
            "beta_min": float(tr.beta.min()),
            "beta_max": float(tr.beta.max()),
            "loss": tr.loss,
        }))
        St = S_new
    _atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(lines)} trace lines to {args.out}")
    return 0


def _parse_grid(spec: str) -> Dict[str, List[int]]:
    grid = {"T": [1024], "d": [64], "m": [64], "C": [16]}
    if not spec:
        return grid
    for part in spec.split(";"):
        if "=" not in part:
            raise ConfigError(f"bad grid entry {part!r}; expected key=v1,v2")
        key, vals = part.split("=", 1)
        if key not in grid:
            raise ConfigError(f"unknown grid key {key!r}; choose from T,d,m,C")
        grid[key] = [_coerce(v, int) for v in vals.split(",")]
    return grid


def cmd_bench(args) -> int:
    from .chunkwise import scan_chunkwise_full, scan_chunkwise_rank1

    grid = _parse_grid(args.grid)
    rng = np.random.default_rng(0)
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["scan", "T", "d", "m", "C", "tokens_per_sec"])
    for T in grid["T"]:
        for d in grid["d"]:
            for m in grid["m"]:
                S0 = init_state(m, d, seed=1)
                toks = [TokenTriple(k=rng.standard_normal(m),
                                    v=rng.standard_normal(d),
                                    q=rng.standard_normal(m),
                                    gamma=0.3, mu=1.0) for _ in range(T)]
                runs = [("sequential", None,
                         lambda: lattice_scan(S0, toks, Mode.DEC))]
                for C in grid["C"]:
                    runs.append((f"chunk-full", C, lambda C=C:
                                 scan_chunkwise_full(S0, toks, Mode.DEC, C=C)))
                    runs.append((f"chunk-rank1", C, lambda C=C:
                                 scan_chunkwise_rank1(S0, toks, Mode.DEC, C=C)))
                for name, C, fn in runs:
                    best = float("inf")
                    for _ in range(3):
                        t0 = time.perf_counter()
                        fn()
                        best = min(best, time.perf_counter() - t0)
                    writer.writerow([name, T, d, m, C if C else 1,
                                     f"{T / best:.1f}"])
    text = out.getvalue()
    if args.out:
        _atomic_write_text(args.out, text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lattice",
                                description="Orthogonal state recurrence toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--filter", default=None, help="run a single suite by name")
    v.set_defaults(fn=cmd_verify)

    mq = sub.add_parser("mqar", help="associative-recall data/train/eval")
    mq.add_argument("action", choices=["gen", "train", "eval"])
    mq.add_argument("--config", default=None, help="JSON run config")
    mq.add_argument("--set", action="append", metavar="KEY=VALUE")
    mq.set_defaults(fn=cmd_mqar)

    tr = sub.add_parser("trace", help="per-step diagnostics of one scan")
    tr.add_argument("--config", default=None)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE")
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=cmd_trace)

    b = sub.add_parser("bench", help="kernel micro-benchmarks")
    b.add_argument("--grid", default="", help="e.g. T=1024,4096;d=64;m=64;C=16")
    b.add_argument("--out", default=None)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, IOError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except LatticeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
