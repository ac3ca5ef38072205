"""Sinusoidal position encodings: absolute, cross-lingual, and fused.

The absolute encoding evaluates interleaved sin/cos of pos / 10000^(2i/d)
over slots 0..T-1. The cross-lingual variant evaluates the same table at
each token's reordered slot, i.e. a row permutation of the absolute
table. The fused (input-level) encoding is tanh(PE_abs U + PE_xl V)
with trainable U, V.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .btg import Permutation
from .numkit import ShapeError, tanh_backward, tanh_elem


class ConfigError(ValueError):
    """Invalid model or encoding configuration."""


def sinusoidal(positions, d_model: int) -> np.ndarray:
    """Encoding matrix for arbitrary (real-valued) position values.

    Column 2i holds sin(pos / 10000^(2i/d_model)), column 2i+1 the cosine
    at the same frequency. ``d_model`` must be even.
    """
    if d_model < 2 or d_model % 2 != 0:
        raise ConfigError(f"d_model must be even and >= 2, got {d_model}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 1:
        raise ShapeError(f"positions must be one-dimensional, got {pos.shape}")
    inv_freq = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    angles = pos[:, None] * inv_freq[None, :]
    pe = np.empty((len(pos), d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def absolute_pe(T: int, d_model: int) -> np.ndarray:
    """Absolute encoding over integer slots 0..T-1."""
    if T < 1:
        raise ConfigError(f"sequence length must be >= 1, got {T}")
    return sinusoidal(np.arange(T, dtype=np.float64), d_model)


def xl_pe(perm: Permutation, d_model: int) -> np.ndarray:
    """Cross-lingual encoding: token i gets the absolute-PE row of its
    reordered slot. Identity permutations reproduce absolute_pe bit-exactly."""
    base = absolute_pe(len(perm), d_model)
    return base[np.asarray(perm.slots, dtype=np.intp)]


@dataclass
class FusionParams:
    """Trainable projections U, V fusing absolute and cross-lingual PEs.

    ``mode`` selects full d x d matrices or per-dimension diagonal vectors;
    the parameter-count delta reported for InXL/Combination models is
    exactly ``size``.
    """

    U: np.ndarray
    V: np.ndarray
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in ("full", "diag"):
            raise ConfigError(f"fusion mode must be 'full' or 'diag', got {self.mode!r}")
        expected_ndim = 2 if self.mode == "full" else 1
        for name, m in (("U", self.U), ("V", self.V)):
            m = np.asarray(m, dtype=np.float64)
            if m.ndim != expected_ndim:
                raise ShapeError(
                    f"{name} must be {expected_ndim}-D in {self.mode} mode, "
                    f"got shape {m.shape}"
                )
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.U.size + self.V.size

    @classmethod
    def zeros(cls, d_model: int, mode: str = "full") -> "FusionParams":
        shape = (d_model, d_model) if mode == "full" else (d_model,)
        return cls(np.zeros(shape), np.zeros(shape), mode)

    @classmethod
    def init(cls, d_model: int, rng: np.random.Generator, mode: str = "full") -> "FusionParams":
        bound = 1.0 / np.sqrt(d_model)
        shape = (d_model, d_model) if mode == "full" else (d_model,)
        return cls(
            rng.uniform(-bound, bound, size=shape),
            rng.uniform(-bound, bound, size=shape),
            mode,
        )


def _project(pe: np.ndarray, w: np.ndarray) -> np.ndarray:
    return pe @ w if w.ndim == 2 else pe * w


def fuse_inxl(
    pe_abs: np.ndarray, pe_xl: np.ndarray, params: FusionParams
) -> np.ndarray:
    """Inputting-level fusion tanh(PE_abs U + PE_xl V)."""
    if pe_abs.shape != pe_xl.shape:
        raise ShapeError(
            f"PE shape mismatch: abs {pe_abs.shape} vs xl {pe_xl.shape}"
        )
    return tanh_elem(_project(pe_abs, params.U) + _project(pe_xl, params.V))


def fuse_inxl_backward(
    d_out: np.ndarray,
    pe_abs: np.ndarray,
    pe_xl: np.ndarray,
    params: FusionParams,
    fused: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. U and V given d loss / d fused."""
    d_pre = tanh_backward(d_out, fused)
    if params.mode == "full":
        return pe_abs.T @ d_pre, pe_xl.T @ d_pre
    return np.sum(pe_abs * d_pre, axis=0), np.sum(pe_xl * d_pre, axis=0)


def add_pe(x: np.ndarray, pe: np.ndarray) -> np.ndarray:
    """Position-aware sum Z = X + PE."""
    if x.shape != pe.shape:
        raise ShapeError(f"input shape {x.shape} does not match PE shape {pe.shape}")
    return x + pe


def inject_noise(perm: Permutation, ratio: float, seed: int) -> Permutation:
    """Corrupt a permutation by round(ratio * T / 2) random transpositions.

    Each swap exchanges the reordered slots of two distinct tokens chosen
    uniformly, so the result is still a bijection. ``ratio`` is the
    fraction of positions touched when all swap pairs are distinct.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio must be within [0, 1], got {ratio}")
    T = len(perm)
    n_swaps = int(ratio * T / 2.0 + 0.5)
    if n_swaps == 0 or T < 2:
        return perm
    rng = random.Random(seed)
    slots = list(perm.slots)
    for _ in range(n_swaps):
        i, j = rng.sample(range(T), 2)
        slots[i], slots[j] = slots[j], slots[i]
    return Permutation.from_slots(slots)


def pe_rows_to_csv(pe: np.ndarray, slots, out) -> None:
    """Write a PE matrix as token_index,slot,dim,value rows."""
    out.write("token_index,slot,dim,value\n")
    for i, row in enumerate(pe):
        for dim, value in enumerate(row):
            out.write(f"{i},{slots[i]},{dim},{float(value)!r}\n")
