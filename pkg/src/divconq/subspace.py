"""Subspace masks over the embedding dimensions.

Masks are stored raw (learnable ones may go negative) and truncated with
ReLU at every use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedder import normalize_rows

FIXED = "fixed"
LEARNABLE = "learnable"


@dataclass
class MaskSet:
    masks: np.ndarray          # (K, d) raw values
    mode: str = FIXED
    depth: int = 0

    def __post_init__(self):
        self.masks = np.array(self.masks, dtype=np.float64, ndmin=2)
        if self.mode not in (FIXED, LEARNABLE):
            raise ValueError(f"unknown mask mode {self.mode!r}")

    @property
    def k(self) -> int:
        return self.masks.shape[0]

    @property
    def dim(self) -> int:
        return self.masks.shape[1]

    @property
    def learnable(self) -> bool:
        return self.mode == LEARNABLE

    def truncated(self) -> np.ndarray:
        return np.maximum(self.masks, 0.0)

    def copy(self) -> "MaskSet":
        return MaskSet(self.masks.copy(), self.mode, self.depth)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "depth": self.depth,
                "shape": list(self.masks.shape),
                "masks": self.masks.ravel().tolist()}

    @classmethod
    def from_dict(cls, data) -> "MaskSet":
        arr = np.array(data["masks"], dtype=np.float64).reshape(data["shape"])
        return cls(arr, data["mode"], int(data["depth"]))


def init_root_mask(d: int, mode: str = FIXED) -> MaskSet:
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    return MaskSet(np.ones((1, d)), mode, 0)


def init_fixed_orthogonal(d: int, k: int, depth: int = 0) -> MaskSet:
    """Binary masks with disjoint contiguous supports of size d/k."""
    if k < 1 or d % k:
        raise ValueError(f"number of masks {k} must divide dimension {d}")
    width = d // k
    masks = np.zeros((k, d))
    for i in range(k):
        masks[i, i * width:(i + 1) * width] = 1.0
    return MaskSet(masks, FIXED, depth)


def split_mask(parent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    parent = np.asarray(parent, dtype=np.float64)
    return parent.copy(), parent.copy()


def split_masks(maskset: MaskSet) -> MaskSet:
    """Double the mask set for the next division depth.

    Learnable masks: child 2i and 2i+1 both start as a copy of parent i.
    Fixed masks: re-initialised as fixed orthogonal masks at the new K so the
    supports stay disjoint.
    """
    new_k = 2 * maskset.k
    if maskset.mode == FIXED:
        return init_fixed_orthogonal(maskset.dim, new_k, maskset.depth + 1)
    children = np.repeat(maskset.masks, 2, axis=0)
    return MaskSet(children, LEARNABLE, maskset.depth + 1)


def apply_mask(E, mask, normalize: bool = True):
    """Re-weight embedding rows by the ReLU-truncated mask, then (by default)
    scale each row to unit length."""
    E = np.asarray(E, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if E.shape[-1] != mask.shape[-1]:
        raise ValueError(f"mask length {mask.shape[-1]} != "
                         f"embedding dim {E.shape[-1]}")
    Z = E * np.maximum(mask, 0.0)
    return normalize_rows(Z)[0] if normalize else Z


def conquer(maskset: MaskSet) -> np.ndarray:
    """Single mask for the final embedding: sum of truncated masks."""
    if maskset.k == 0:
        raise ValueError("cannot conquer an empty mask set")
    return maskset.truncated().sum(axis=0)


def save_masks_csv(maskset: MaskSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("mask," + ",".join(f"dim_{j}" for j in range(maskset.dim))
                 + "\n")
        for i, row in enumerate(maskset.truncated()):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
