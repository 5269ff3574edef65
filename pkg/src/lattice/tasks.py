"""Multi-query associative recall: generation, serialization, scoring.

Layout of one length-L sample:

    k1 v1 k2 v2 ... kN vN | ...tail...

The tail contains the N query pairs (key, placeholder) at random
non-overlapping adjacent positions; remaining tail positions hold filler
tokens.  The vocabulary is partitioned so the model can tell the segments
apart: id 0 is the answer placeholder, then equal thirds of the remaining
ids for keys, values, and filler.  Loss and accuracy are computed only at
the placeholder positions, whose targets are the queried keys' values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = [
    "PLACEHOLDER_ID",
    "MqarConfig",
    "MqarSample",
    "vocab_segments",
    "mqar_generate",
    "mqar_accuracy",
    "save_dataset",
    "load_dataset",
    "recover_targets",
]

PLACEHOLDER_ID = 0
MAGIC = b"MQAR"
FORMAT_VERSION = 1


@dataclass
class MqarConfig:
    vocab_size: int
    seq_len: int
    num_kv_pairs: int
    num_samples: int
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4")
        if self.num_kv_pairs < 1 or self.num_samples < 1:
            raise ConfigError("num_kv_pairs and num_samples must be >= 1")
        segs = vocab_segments(self.vocab_size)
        if self.num_kv_pairs > len(segs[0]):
            raise ConfigError(
                f"{self.num_kv_pairs} distinct keys need a key segment of at "
                f"least that size (have {len(segs[0])})")
        if self.seq_len < 4 * self.num_kv_pairs:
            raise ConfigError(
                f"seq_len {self.seq_len} too short: need >= {4 * self.num_kv_pairs} "
                "for the bindings plus the query pairs")


def vocab_segments(vocab_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(keys, values, filler) id ranges; id 0 stays the placeholder."""
    usable = vocab_size - 1
    third = usable // 3
    if third < 1:
        raise ConfigError("vocab too small to partition")
    keys = np.arange(1, 1 + third)
    values = np.arange(1 + third, 1 + 2 * third)
    filler = np.arange(1 + 2 * third, vocab_size)
    return keys, values, filler


@dataclass
class MqarSample:
    tokens: np.ndarray       # (L,) int64
    target_mask: np.ndarray  # (L,) bool
    targets: np.ndarray      # ids at masked positions, in position order


def _generate_one(cfg: MqarConfig, rng: np.random.Generator) -> MqarSample:
    keys_seg, vals_seg, fill_seg = vocab_segments(cfg.vocab_size)
    N, L = cfg.num_kv_pairs, cfg.seq_len
    keys = rng.choice(keys_seg, size=N, replace=False)
    values = rng.choice(vals_seg, size=N, replace=True)

    tokens = np.empty(L, dtype=np.int64)
    tokens[0 : 2 * N : 2] = keys
    tokens[1 : 2 * N : 2] = values

    tail_len = L - 2 * N
    tail = rng.choice(fill_seg, size=tail_len, replace=True)
    # N non-overlapping adjacent pairs, uniform over valid placements:
    # choose N starts from tail_len - N and re-spread by index
    raw = np.sort(rng.choice(tail_len - N, size=N, replace=False))
    starts = raw + np.arange(N)
    order = rng.permutation(N)
    mask = np.zeros(L, dtype=bool)
    for pos, which in zip(starts, order):
        tail[pos] = keys[which]
        tail[pos + 1] = PLACEHOLDER_ID
        mask[2 * N + pos + 1] = True
    tokens[2 * N :] = tail
    targets = np.array([values[which] for pos, which in
                        sorted(zip(starts, order))], dtype=np.int64)
    return MqarSample(tokens=tokens, target_mask=mask, targets=targets)


def mqar_generate(cfg: MqarConfig) -> List[MqarSample]:
    """Deterministic dataset; sample i uses seed cfg.seed + i."""
    return [_generate_one(cfg, np.random.default_rng(cfg.seed + i))
            for i in range(cfg.num_samples)]


def dataset_arrays(samples: List[MqarSample]):
    """Stack a dataset into (tokens (N,L), mask (N,L), dense_targets (N,L)).

    dense_targets holds the answer id at masked positions and 0 elsewhere.
    """
    tokens = np.stack([s.tokens for s in samples])
    mask = np.stack([s.target_mask for s in samples])
    dense = np.zeros_like(tokens)
    for i, s in enumerate(samples):
        dense[i, s.target_mask] = s.targets
    return tokens, mask, dense


def mqar_accuracy(logits: np.ndarray, samples: List[MqarSample]) -> float:
    """Exact-match rate of argmax(logits) at masked positions.

    np.argmax breaks ties toward the lowest id, which pins evaluation
    determinism.
    """
    logits = np.asarray(logits)
    if logits.ndim != 3 or logits.shape[0] != len(samples):
        raise ShapeError(f"logits must be (N, L, V), got {logits.shape}")
    hits = 0
    total = 0
    for i, s in enumerate(samples):
        pred = np.argmax(logits[i][s.target_mask], axis=-1)
        hits += int((pred == s.targets).sum())
        total += s.targets.size
    return hits / total


def recover_targets(tokens: np.ndarray, mask: np.ndarray,
                    num_kv_pairs: int) -> np.ndarray:
    """Rebuild answer ids from the binding section (each sample is a lookup)."""
    N = num_kv_pairs
    binding = dict(zip(tokens[0 : 2 * N : 2].tolist(),
                       tokens[1 : 2 * N : 2].tolist()))
    out = []
    for pos in np.nonzero(mask)[0]:
        query_key = int(tokens[pos - 1])
        if query_key not in binding:
            raise ShapeError(f"masked position {pos} not preceded by a known key")
        out.append(binding[query_key])
    return np.array(out, dtype=np.int64)


# -- binary file format ------------------------------------------------------
# MAGIC | u32 version | u32 vocab, seq_len, num_kv_pairs, num_samples, seed |
# tokens as u32 row-major | per-sample bit-packed masks, padded to bytes


def save_dataset(path: str, cfg: MqarConfig, samples: List[MqarSample]):
    import os
    import tempfile

    tokens, mask, _ = dataset_arrays(samples)
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<6I", FORMAT_VERSION, cfg.vocab_size, cfg.seq_len,
                           cfg.num_kv_pairs, cfg.num_samples, cfg.seed)
    payload += tokens.astype("<u4").tobytes()
    payload += np.packbits(mask, axis=1).tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(payload))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path: str) -> Tuple[MqarConfig, List[MqarSample]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ConfigError(f"{path}: not a recall dataset (bad magic)")
    version, vocab, L, nkv, n, seed = struct.unpack_from("<6I", blob, 4)
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported dataset version {version}")
    cfg = MqarConfig(vocab_size=vocab, seq_len=L, num_kv_pairs=nkv,
                     num_samples=n, seed=seed)
    off = 4 + 6 * 4
    tok_bytes = n * L * 4
    tokens = np.frombuffer(blob, dtype="<u4", count=n * L, offset=off
                           ).reshape(n, L).astype(np.int64)
    off += tok_bytes
    row_bytes = (L + 7) // 8
    packed = np.frombuffer(blob, dtype=np.uint8, count=n * row_bytes, offset=off
                           ).reshape(n, row_bytes)
    mask = np.unpackbits(packed, axis=1)[:, :L].astype(bool)
    samples = []
    for i in range(n):
        targets = recover_targets(tokens[i], mask[i], nkv)
        samples.append(MqarSample(tokens=tokens[i], target_mask=mask[i],
                                  targets=targets))
    return cfg, samples
