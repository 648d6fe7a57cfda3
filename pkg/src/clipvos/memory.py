"""Memory bank and the memory matching module.

Matching is non-local: every query position scores every stored memory
position with negative squared L2 similarity, the scores are softmax-
normalized over the memory axis (optionally after top-k filtering), and
values are retrieved as the affinity-weighted sum. Keys are object-agnostic,
so one affinity serves all objects of a frame.

The bank has two tiers: permanent entries survive for the whole sequence,
temporary entries exist only while progressive matching processes one clip.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class MemoryBank:
    """Per-frame (key, per-object value) stores, permanent and temporary tiers.

    Keys are [HW, C_k], values [K, HW, C_v]; every entry must share one
    spatial size and channel widths. Single-writer: the clip loop owns it.
    """

    def __init__(self):
        self._keys = {"permanent": [], "temporary": []}
        self._values = {"permanent": [], "temporary": []}

    @property
    def num_permanent(self) -> int:
        return len(self._keys["permanent"])

    @property
    def num_temporary(self) -> int:
        return len(self._keys["temporary"])

    @property
    def num_frames(self) -> int:
        """T: stored frames across both tiers."""
        return self.num_permanent + self.num_temporary

    def append(self, key: Tensor, values: Tensor, tier: str = "permanent") -> None:
        if tier not in ("permanent", "temporary"):
            raise ValueError(f"unknown tier {tier!r}")
        if key.ndim != 2:
            raise ShapeError(f"bank append: key must be [HW, C_k], got {key.shape}")
        if values.ndim != 3 or values.shape[1] != key.shape[0]:
            raise ShapeError(f"bank append: values must be [K, HW, C_v] matching key "
                             f"{key.shape}, got {values.shape}")
        for tier_keys, tier_vals in ((self._keys["permanent"], self._values["permanent"]),
                                     (self._keys["temporary"], self._values["temporary"])):
            if tier_keys:
                if tier_keys[0].shape != key.shape:
                    raise ShapeError(f"bank append: key shape {key.shape} does not match "
                                     f"stored {tier_keys[0].shape}")
                if tier_vals[0].shape != values.shape:
                    raise ShapeError(f"bank append: value shape {values.shape} does not match "
                                     f"stored {tier_vals[0].shape}")
        self._keys[tier].append(key)
        self._values[tier].append(values)

    def clear_temporary(self) -> None:
        self._keys["temporary"] = []
        self._values["temporary"] = []

    def stacked_keys(self) -> Tensor:
        """All stored keys, permanent then temporary: [T*HW, C_k]."""
        ks = self._keys["permanent"] + self._keys["temporary"]
        if not ks:
            raise ShapeError("memory bank empty")
        if len(ks) == 1:
            return ks[0]
        return T.concat(ks, axis=0)

    def stacked_values(self) -> Tensor:
        """All stored values, permanent then temporary: [K, T*HW, C_v]."""
        vs = self._values["permanent"] + self._values["temporary"]
        if not vs:
            raise ShapeError("memory bank empty")
        if len(vs) == 1:
            return vs[0]
        return T.concat(vs, axis=1)

    def permanent_snapshot(self):
        """Copies of permanent arrays, for invariant checks."""
        return ([k.data.copy() for k in self._keys["permanent"]],
                [v.data.copy() for v in self._values["permanent"]])


def similarity(kq: Tensor, km: Tensor) -> Tensor:
    """Negative squared L2 distance between query and memory keys.

    sim(i, j) = -||kq_i - km_j||^2, computed as 2 q.m - |q|^2 - |m|^2.
    """
    kq = kq if isinstance(kq, Tensor) else Tensor(kq)
    km = km if isinstance(km, Tensor) else Tensor(km)
    if kq.ndim != 2 or km.ndim != 2 or kq.shape[1] != km.shape[1]:
        raise ShapeError(f"similarity: channel mismatch, {kq.shape} vs {km.shape}")
    cross = T.matmul(kq, T.permute(km, (1, 0)))
    qsq = T.reduce_sum(T.mul(kq, kq), axis=1, keepdims=True)        # [n, 1]
    msq = T.reduce_sum(T.mul(km, km), axis=1, keepdims=True)        # [m, 1]
    return T.sub(T.sub(T.mul(cross, 2.0), qsq), T.permute(msq, (1, 0)))


def top_k_mask(sim: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask keeping each row's k largest entries.

    Ties at the k-th value keep the lower memory index (stable order).
    """
    n, m = sim.shape
    if k >= m:
        return np.ones((n, m), dtype=bool)
    # stable sort on the negated scores: descending value, ascending index on ties
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, m), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def affinity(sim: Tensor, top_k: int | None = None) -> Tensor:
    """Row-stochastic affinity from similarity scores.

    Softmax normalizes over the memory axis only. With `top_k`, each row's
    softmax runs over its k best entries and the rest are exactly zero;
    `top_k >= m` is bitwise identical to the unfiltered softmax.
    """
    sim = sim if isinstance(sim, Tensor) else Tensor(sim)
    if sim.ndim != 2:
        raise ShapeError(f"affinity: expected [n, m] similarities, got {sim.shape}")
    if sim.shape[1] < 1:
        raise ShapeError("affinity: memory axis is empty")
    mask = None
    if top_k is not None:
        if top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {top_k}")
        mask = top_k_mask(sim.data, top_k)
    return T.masked_softmax(sim, mask, axis=1)


def read(kq: Tensor, km: Tensor, vm: Tensor, top_k: int | None = None) -> Tensor:
    """Retrieve memory values for every query position (affinity-weighted sum).

    `vm` is [m, C_v] for one object or [K, m, C_v] for K objects; all objects
    share the affinity computed from the keys.
    """
    km = km if isinstance(km, Tensor) else Tensor(km)
    vm = vm if isinstance(vm, Tensor) else Tensor(vm)
    if km.shape[0] == 0:
        raise ShapeError("memory bank empty")
    if vm.ndim not in (2, 3) or vm.shape[-2] != km.shape[0]:
        raise ShapeError(f"read: values {vm.shape} do not match memory keys {km.shape}")
    aff = affinity(similarity(kq, km), top_k=top_k)
    return T.matmul(aff, vm)  # [K, m, C_v] broadcasts over the leading axis


def soft_aggregate(probs: Tensor, eps: float = 1e-7) -> Tensor:
    """Merge per-object foreground probabilities into a (K+1)-way distribution.

    Channel 0 is background with p0 = prod_k (1 - p_k); every channel is then
    odds-normalized: out_c = (p_c / (1 - p_c)) / sum_j (p_j / (1 - p_j)).
    Probabilities are clamped to [eps, 1-eps] first, so saturated inputs stay
    finite. Works on [K, ...]: the object axis is first, the rest is pixelwise.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    if probs.ndim < 2:
        raise ShapeError(f"soft_aggregate: expected [K, ...spatial], got {probs.shape}")
    k = probs.shape[0]
    p = T.clip(probs, eps, 1.0 - eps)
    background = None
    for i in range(k):
        onemp = T.sub(1.0, p[i])
        background = onemp if background is None else T.mul(background, onemp)
    background = T.clip(background, eps, 1.0 - eps)
    full = T.concat([T.reshape(background, (1,) + background.shape), p], axis=0)
    odds = T.div(full, T.sub(1.0, full))
    return T.div(odds, T.reduce_sum(odds, axis=0, keepdims=True))
