"""Cross-image self-attention operators.

Three ways of letting one image's denoising trajectory see another's:

* extended attention:  append the other image's keys/values wholesale,
* person-path stitch:  append garment keys plus mask-gated garment values,
* garment-path stitch: score against both key sets but keep only the
                       garment's own value rows (truncated attention map).

All operators act on a single head's pre-split (n, d) tensors; splitting and
merging heads is the caller's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, InvalidTarget


@dataclass(frozen=True, eq=False)
class AttentionTensors:
    """One head's query/key/value matrices, each (tokens, dim)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        k = np.asarray(self.k, dtype=float)
        v = np.asarray(self.v, dtype=float)
        for name, t in (("q", q), ("k", k), ("v", v)):
            if t.ndim != 2:
                raise DimMismatch(f"{name} must be 2-D, got shape {t.shape}")
            if not np.all(np.isfinite(t)):
                raise DimMismatch(f"{name} contains non-finite values")
        if not (q.shape == k.shape == v.shape):
            raise DimMismatch(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
        if q.shape[0] < 1 or q.shape[1] < 1:
            raise DimMismatch("token count and head dim must be >= 1")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def tokens(self) -> int:
        return self.q.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[1]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def scaled_attention_map(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Softmax(q keys^T / sqrt(d)): the row-stochastic attention map."""
    d = q.shape[1]
    if keys.shape[1] != d:
        raise DimMismatch(f"key dim {keys.shape[1]} != query dim {d}")
    return softmax_rows(q @ keys.T / np.sqrt(d))


def extended_attention(
    garment: AttentionTensors,
    person_kv: tuple[np.ndarray, np.ndarray],
) -> np.ndarray:
    """Self-attention of the garment tokens over [own ++ person] keys/values.

    With an empty injected set this is exactly standard self-attention.
    """
    kp = np.asarray(person_kv[0], dtype=float)
    vp = np.asarray(person_kv[1], dtype=float)
    if kp.size == 0:
        kp = kp.reshape(0, garment.dim)
    if vp.size == 0:
        vp = vp.reshape(0, garment.dim)
    if kp.ndim != 2 or kp.shape[1] != garment.dim:
        raise DimMismatch(f"injected K {kp.shape} does not match head dim {garment.dim}")
    if kp.shape != vp.shape:
        raise DimMismatch(f"injected K {kp.shape} and V {vp.shape} differ")
    keys = np.vstack([garment.k, kp])
    vals = np.vstack([garment.v, vp])
    return scaled_attention_map(garment.q, keys) @ vals


def cbs_person_path(
    person: AttentionTensors,
    garment: AttentionTensors,
    mask: np.ndarray,
) -> np.ndarray:
    """Stitching on the composited-person path.

    Person queries attend over [person ++ garment] keys; garment values are
    row-scaled by the token mask first, suppressing the garment image's
    background tokens while still letting them absorb probability mass.
    """
    if person.dim != garment.dim:
        raise DimMismatch(f"head dims differ: {person.dim} vs {garment.dim}")
    m = np.asarray(mask, dtype=float).ravel()
    if m.shape[0] != garment.tokens:
        raise DimMismatch(
            f"token mask length {m.shape[0]} != garment token count {garment.tokens}"
        )
    if np.any(m < 0) or np.any(m > 1):
        raise DimMismatch("token mask values must lie in [0, 1]")
    keys = np.vstack([person.k, garment.k])
    vals = np.vstack([person.v, garment.v * m[:, None]])
    return scaled_attention_map(person.q, keys) @ vals


def cbs_garment_path(garment: AttentionTensors, person_keys: np.ndarray) -> np.ndarray:
    """Stitching on the garment path.

    The full (n, 2n) map scores garment queries against [own ++ person]
    keys, but only the first n columns (the garment's own) multiply the
    garment values; the person-side columns are dropped without
    renormalizing, so each output row is an attenuated self-attention row.
    """
    kp = np.asarray(person_keys, dtype=float)
    n = garment.tokens
    if kp.shape != (n, garment.dim):
        raise DimMismatch(
            f"person keys must be ({n}, {garment.dim}) to match the garment "
            f"tokens at this resolution, got {kp.shape}"
        )
    amap = scaled_attention_map(garment.q, np.vstack([garment.k, kp]))
    return amap[:, :n] @ garment.v


def _pool_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic matrix averaging fractional source spans.

    Row i averages the source interval [i*src/dst, (i+1)*src/dst); exact
    block mean when dst divides src.
    """
    w = np.zeros((dst, src))
    span = src / dst
    for i in range(dst):
        lo = i * span
        hi = (i + 1) * span
        j0 = int(np.floor(lo))
        j1 = min(int(np.ceil(hi)), src)
        for j in range(j0, j1):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / span


def downsample_token_mask(mask_image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-average a binary (H, W) mask to the token grid, flattened row-major.

    Values stay in [0, 1]; partial coverage yields soft gating weights.
    """
    m = np.asarray(mask_image, dtype=float)
    if m.ndim != 2:
        raise InvalidTarget(f"mask must be 2-D, got shape {m.shape}")
    h_src, w_src = m.shape
    h, w = target
    if h < 1 or w < 1 or h > h_src or w > w_src:
        raise InvalidTarget(f"target {target} invalid for {m.shape} mask")
    pooled = _pool_weights(h_src, h) @ m @ _pool_weights(w_src, w).T
    return np.clip(pooled, 0.0, 1.0).ravel()
