"""Dense float64 matrix kernel with paired forward/backward ops.

Everything downstream (position encodings, attention, the training loop)
is built from the handful of operations here. Each forward op has an
explicit backward companion instead of a taped autograd so that a failing
gradient check points at one function. All arrays are 64-bit; the
finite-difference checker below is the correctness oracle for every
backward pass in the repository.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

REL_ERR_EPS = 1e-10


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(ValueError):
    """Raised when a checked computation produces a non-finite value."""


def as_matrix(a) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def require_finite(a: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise EvaluationError(f"{what} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Summation order is the fixed row-major order of the underlying BLAS,
    so repeated calls on identical inputs are bit-identical.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return require_finite(a @ b, "matmul output")


def matmul_backward(d_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of ``sum(d_out * (a @ b))`` w.r.t. ``a`` and ``b``."""
    return d_out @ b.T, a.T @ d_out


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the per-row max for stability.

    Rows containing -inf entries get exact zeros there; each row must keep
    at least one finite entry.
    """
    a = np.asarray(a, dtype=np.float64)
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(d_out: np.ndarray, softmax_out: np.ndarray) -> np.ndarray:
    """Backward of softmax_rows given its own output."""
    dot = np.sum(d_out * softmax_out, axis=-1, keepdims=True)
    return softmax_out * (d_out - dot)


def tanh_elem(a: np.ndarray) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(np.asarray(a, dtype=np.float64))


def tanh_backward(d_out: np.ndarray, tanh_out: np.ndarray) -> np.ndarray:
    return d_out * (1.0 - tanh_out * tanh_out)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_EPS)


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference check over a named parameter set."""

    max_relative_error: float
    per_parameter: list[tuple[str, float]] = field(default_factory=list)

    def worst(self) -> tuple[str, float]:
        return max(self.per_parameter, key=lambda kv: kv[1])


def finite_diff_check(
    f: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_entries_per_param: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f(params)`` must return ``(loss, grads)`` where ``grads`` maps each
    parameter name to an array of ``d loss / d param``. Every entry is
    perturbed by ``+-h`` unless ``max_entries_per_param`` caps the count,
    in which case entries are probed at a fixed stride (still
    deterministic).
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    loss, grads = f(params)
    if not np.isfinite(loss):
        raise EvaluationError("loss is non-finite at the evaluation point")

    per_parameter: list[tuple[str, float]] = []
    for name, p in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != p.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {analytic.shape}, "
                f"parameter has {p.shape}"
            )
        flat = p.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            stride = max(1, n // max_entries_per_param)
            indices = range(0, n, stride)
        else:
            indices = range(n)
        worst = 0.0
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + h
            loss_plus, _ = f(params)
            flat[idx] = orig - h
            loss_minus, _ = f(params)
            flat[idx] = orig
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise EvaluationError(
                    f"loss is non-finite while perturbing {name}[{idx}]"
                )
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[idx]), numeric))
        per_parameter.append((name, worst))

    max_err = max((e for _, e in per_parameter), default=0.0)
    return GradCheckReport(max_relative_error=max_err, per_parameter=per_parameter)
