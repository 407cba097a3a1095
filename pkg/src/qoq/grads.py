"""Per-sample gradient extraction, normalization, OPORP sketching and the gradient cache.

Cache file layout (little-endian, no padding)::

    b"QOQGRD1"            magic
    u32 version           currently 1
    u32 K                 sketch dimension
    u64 count             number of records
    u64 oporp_seed
    32 bytes              policy hash (see ``policy.params_hash``)
    u8 mask               low 7 bits: layer-group code; bit 7: sketches renormalized
    u64 n_skipped         followed by n_skipped x (u64 traj_id, u32 step_idx)
    records               count x (u64 traj_id, u32 step_idx, K x f32)

Records are sorted by (traj_id, step_idx).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import Dataset
from .policy import MASK_CODES, PolicyParams, check_mask, params_hash, per_sample_grads

CACHE_MAGIC = b"QOQGRD1"
CACHE_VERSION = 1
ZERO_NORM = 1e-12
_HEADER = struct.Struct("<7sIIQQ32sB")
_KEY = struct.Struct("<QI")
_MASK_NAMES = {v: k for k, v in MASK_CODES.items()}
_RENORM_BIT = 0x80


class DegenerateGradientError(ValueError):
    pass


class CacheError(ValueError):
    pass


def normalize(g: np.ndarray) -> np.ndarray:
    """Scale ``g`` to unit L2 norm; near-zero gradients are rejected."""
    g = np.asarray(g, dtype=np.float64)
    norm = np.linalg.norm(g)
    if not norm > ZERO_NORM:
        raise DegenerateGradientError(f"gradient norm {norm:.3g} <= {ZERO_NORM}")
    return g / norm


def normalize_rows(G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``normalize``; returns (normalized rows, mask of rows that were kept)."""
    norms = np.linalg.norm(G, axis=1)
    ok = norms > ZERO_NORM
    out = np.zeros_like(G)
    out[ok] = G[ok] / norms[ok, None]
    return out, ok


@dataclass(frozen=True)
class OporpConfig:
    """One-permutation one-random-projection sketch from D to K dimensions.

    The input is zero-padded to a multiple of K, permuted, multiplied by random signs
    and summed in K contiguous bins. All sketches built from one config share the same
    permutation and signs, so inner products between them are unbiased estimates of
    the inner products of the unsketched vectors.
    """

    input_dim: int
    sketch_dim: int
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.sketch_dim <= self.input_dim:
            raise ValueError(f"need 1 <= K <= D, got K={self.sketch_dim}, D={self.input_dim}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def padded_dim(self) -> int:
        k = self.sketch_dim
        return -(-self.input_dim // k) * k

    @cached_property
    def _projection(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, self.input_dim, self.sketch_dim])
        perm = rng.permutation(self.padded_dim)
        signs = rng.choice(np.array([-1.0, 1.0]), size=self.padded_dim)
        return perm, signs

    def sketch(self, u: np.ndarray) -> np.ndarray:
        """Sketch one vector (D,) or a batch (B, D)."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.input_dim:
            raise ValueError(f"expected last dimension {self.input_dim}, got {u.shape[-1]}")
        perm, signs = self._projection
        pad = self.padded_dim - self.input_dim
        if pad:
            u = np.concatenate([u, np.zeros(u.shape[:-1] + (pad,))], axis=-1)
        mixed = u[..., perm] * signs
        return mixed.reshape(u.shape[:-1] + (self.sketch_dim, -1)).sum(axis=-1)


def oporp_sketch(u: np.ndarray, cfg: OporpConfig) -> np.ndarray:
    return cfg.sketch(u)


@dataclass(frozen=True)
class GradSketch:
    traj_id: int
    step_idx: int
    values: np.ndarray
    normalized: bool


@dataclass(eq=False)
class GradCache:
    sketch_dim: int
    oporp_seed: int
    policy_hash: bytes
    mask: str
    renormalized: bool
    keys: np.ndarray  # (N, 2) int64: traj_id, step_idx
    values: np.ndarray  # (N, K) float32
    skipped: list[tuple[int, int]] = field(default_factory=list)
    version: int = CACHE_VERSION

    def __post_init__(self):
        check_mask(self.mask)
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1, self.sketch_dim)
        if len(self.keys) != len(self.values):
            raise CacheError("record count mismatch between keys and values")
        if len(self.policy_hash) != 32:
            raise CacheError("policy hash must be 32 bytes")
        keyset = set(map(tuple, self.keys.tolist()))
        if len(keyset) != len(self.keys):
            raise CacheError("duplicate (traj_id, step_idx) records")
        if keyset & set(map(tuple, self.skipped)):
            raise CacheError("a step is both recorded and skipped")

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self) -> Iterator[GradSketch]:
        for (tid, sidx), vals in zip(self.keys, self.values):
            yield GradSketch(int(tid), int(sidx), vals, True)

    @property
    def traj_ids(self) -> list[int]:
        """Trajectories with at least one record or skipped step, ascending."""
        ids = set(self.keys[:, 0].tolist()) | {t for t, _ in self.skipped}
        return sorted(ids)

    def sorted(self) -> "GradCache":
        order = np.lexsort((self.keys[:, 1], self.keys[:, 0]))
        return GradCache(
            self.sketch_dim, self.oporp_seed, self.policy_hash, self.mask, self.renormalized,
            self.keys[order], self.values[order], sorted(self.skipped), self.version,
        )

    def to_bytes(self) -> bytes:
        code = MASK_CODES[self.mask] | (_RENORM_BIT if self.renormalized else 0)
        parts = [
            _HEADER.pack(CACHE_MAGIC, self.version, self.sketch_dim, len(self), self.oporp_seed,
                         self.policy_hash, code),
            struct.pack("<Q", len(self.skipped)),
        ]
        parts += [_KEY.pack(t, s) for t, s in self.skipped]
        rec = np.zeros(len(self), dtype=[("t", "<u8"), ("s", "<u4"), ("v", "<f4", (self.sketch_dim,))])
        rec["t"], rec["s"], rec["v"] = self.keys[:, 0], self.keys[:, 1], self.values
        parts.append(rec.tobytes())
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GradCache":
        if len(raw) < _HEADER.size or raw[:7] != CACHE_MAGIC:
            raise CacheError("not a gradient cache (bad magic)")
        magic, version, k, count, seed, phash, code = _HEADER.unpack_from(raw, 0)
        if version != CACHE_VERSION:
            raise CacheError(f"unsupported cache version {version}")
        off = _HEADER.size
        (n_skip,) = struct.unpack_from("<Q", raw, off)
        off += 8
        skipped = [_KEY.unpack_from(raw, off + i * _KEY.size) for i in range(n_skip)]
        off += n_skip * _KEY.size
        dtype = np.dtype([("t", "<u8"), ("s", "<u4"), ("v", "<f4", (k,))])
        if len(raw) - off != count * dtype.itemsize:
            raise CacheError(f"cache body has {len(raw) - off} bytes, expected {count * dtype.itemsize}")
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        keys = np.stack([rec["t"].astype(np.int64), rec["s"].astype(np.int64)], axis=1)
        mask = _MASK_NAMES.get(code & ~_RENORM_BIT)
        if mask is None:
            raise CacheError(f"unknown mask code {code}")
        return cls(k, seed, phash, mask, bool(code & _RENORM_BIT), keys, rec["v"].copy(),
                   [(int(t), int(s)) for t, s in skipped], version)

    @classmethod
    def load(cls, path: str | Path) -> "GradCache":
        return cls.from_bytes(Path(path).read_bytes())


def build_grad_cache(
    policy: PolicyParams,
    ds: Dataset,
    mask: str,
    cfg: OporpConfig | None,
    renormalize_after_sketch: bool = True,
    chunk: int = 512,
) -> GradCache:
    """Normalized (optionally sketched) log-likelihood gradients of every step in ``ds``.

    ``cfg=None`` stores the unsketched normalized gradients (K = D, seed 0).
    Steps whose gradient (or sketch) norm is below ``ZERO_NORM`` go to the skip list.
    """
    check_mask(mask)
    if (ds.d_s, ds.d_a) != (policy.d_s, policy.d_a):
        raise CacheError(f"dataset dims ({ds.d_s},{ds.d_a}) do not match policy ({policy.d_s},{policy.d_a})")
    dim = policy.arch.group_size(mask)
    if cfg is not None and cfg.input_dim != dim:
        raise CacheError(f"sketch input_dim {cfg.input_dim} != masked parameter count {dim}")
    states, actions, keys = ds.canonical_pairs()
    k = dim if cfg is None else cfg.sketch_dim
    values = np.zeros((len(states), k), dtype=np.float32)
    kept = np.zeros(len(states), dtype=bool)
    for start in range(0, len(states), chunk):
        sl = slice(start, start + chunk)
        g, ok = normalize_rows(per_sample_grads(policy, states[sl], actions[sl], mask))
        if cfg is not None:
            g = cfg.sketch(g)
            if renormalize_after_sketch:
                g, ok_sk = normalize_rows(g)
                ok &= ok_sk
        values[sl] = g.astype(np.float32)
        kept[sl] = ok
    skipped = [(int(t), int(s)) for t, s in keys[~kept]]
    return GradCache(
        k, 0 if cfg is None else cfg.seed, params_hash(policy), mask,
        cfg is not None and renormalize_after_sketch, keys[kept], values[kept], skipped,
    )
