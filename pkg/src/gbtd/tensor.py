"""Dense tensor algebra: unfolding, mode-n products, concatenation and norms.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in C (row-major)
order. Modes are 0-based in this API, like numpy axes: ``mode=0`` is the
first axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateReferenceError

__all__ = [
    "Activation",
    "IDENTITY",
    "RELU",
    "as_tensor",
    "unfold",
    "fold",
    "mode_n_product",
    "generalized_mode_n_product",
    "concat_mode",
    "split_mode",
    "frobenius_norm",
    "relative_error",
]


def as_tensor(x, *, name="tensor") -> np.ndarray:
    """Validate ``x`` and return it as a C-contiguous float64 array.

    Raises ``ValueError`` for zero-order input, empty extents or
    non-finite entries.
    """
    t = np.asarray(x, dtype=np.float64)
    if t.ndim < 1:
        raise ValueError(f"{name} must have at least one mode")
    t = np.ascontiguousarray(t)
    if any(d < 1 for d in t.shape):
        raise ValueError(f"{name} has an empty extent: shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return t


def _check_mode(t, mode):
    if not 0 <= mode < t.ndim:
        raise ValueError(f"mode {mode} out of range for a tensor of order {t.ndim}")


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization.

    Row ``i`` holds every entry whose ``mode``-th index is ``i``; the
    remaining axes are enumerated in row-major order.
    """
    t = np.asarray(t, dtype=np.float64)
    _check_mode(t, mode)
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def fold(m, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given ``shape``."""
    shape = tuple(int(d) for d in shape)
    if not 0 <= mode < len(shape):
        raise ValueError(f"mode {mode} out of range for a tensor of order {len(shape)}")
    rest = shape[:mode] + shape[mode + 1 :]
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (shape[mode], int(np.prod(rest, dtype=np.int64))):
        raise ValueError(f"matrix of shape {m.shape} cannot fold into {shape} along mode {mode}")
    return np.ascontiguousarray(np.moveaxis(m.reshape((shape[mode],) + rest), 0, mode))


def mode_n_product(t, a, mode: int, *, fixed_order: bool = False) -> np.ndarray:
    """Contract axis ``mode`` of ``t`` with the columns of ``a``.

    ``result[..., i, ...] = sum_j a[i, j] * t[..., j, ...]``, so the extent
    ``t.shape[mode]`` is replaced by ``a.shape[0]``.

    With ``fixed_order=True`` the sum over ``j`` is accumulated in index
    order instead of by BLAS, so every output slice depends only on its own
    row of ``a``: the product with ``a[rows]`` is bitwise equal to the
    same slice of the full product.
    """
    t = np.asarray(t, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_mode(t, mode)
    if a.ndim != 2 or a.shape[1] != t.shape[mode]:
        raise ValueError(
            f"factor of shape {a.shape} does not match extent {t.shape[mode]} of mode {mode}"
        )
    if not fixed_order:
        out = np.tensordot(a, t, axes=(1, mode))
        return np.ascontiguousarray(np.moveaxis(out, 0, mode))
    tm = np.moveaxis(t, mode, 0)
    out = np.zeros((a.shape[0],) + tm.shape[1:])
    col = (slice(None),) + (None,) * (tm.ndim - 1)
    for j in range(a.shape[1]):
        out += a[:, j][col] * tm[j]
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


@dataclass(frozen=True)
class Activation:
    """An elementwise map applied inside a generalized mode product."""

    kind: str
    fn: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "relu", "custom"):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom activation needs a function")

    @classmethod
    def custom(cls, fn):
        return cls("custom", fn)

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return x
        if self.kind == "relu":
            return np.maximum(x, 0.0)
        out = np.asarray(self.fn(x), dtype=np.float64)
        if out.shape != np.shape(x):
            raise ValueError("custom activation must preserve shape")
        return out


IDENTITY = Activation("identity")
RELU = Activation("relu")


def generalized_mode_n_product(t, a, mode: int, act: Activation = IDENTITY) -> np.ndarray:
    """``act`` applied elementwise to ``mode_n_product(t, a, mode)``."""
    return act(mode_n_product(t, a, mode))


def concat_mode(ts: Sequence[np.ndarray], mode: int) -> np.ndarray:
    """Concatenate tensors along ``mode``; all other extents must agree."""
    if len(ts) == 0:
        raise ValueError("nothing to concatenate")
    ts = [np.asarray(t, dtype=np.float64) for t in ts]
    first = ts[0]
    _check_mode(first, mode)
    for k, t in enumerate(ts[1:], start=1):
        if t.ndim != first.ndim or any(
            t.shape[n] != first.shape[n] for n in range(first.ndim) if n != mode
        ):
            raise ValueError(
                f"tensor {k} has shape {t.shape}, incompatible with {first.shape} off mode {mode}"
            )
    if len(ts) == 1:
        return first
    return np.concatenate(ts, axis=mode)


def split_mode(t, sizes: Sequence[int], mode: int) -> list[np.ndarray]:
    """Slice ``t`` along ``mode`` into consecutive blocks of the given extents."""
    t = np.asarray(t, dtype=np.float64)
    _check_mode(t, mode)
    if sum(sizes) != t.shape[mode]:
        raise ValueError(f"block sizes {list(sizes)} do not sum to extent {t.shape[mode]}")
    bounds = np.cumsum([0, *sizes])
    index = [slice(None)] * t.ndim
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index[mode] = slice(int(lo), int(hi))
        out.append(np.ascontiguousarray(t[tuple(index)]))
    return out


def frobenius_norm(t) -> float:
    return float(np.linalg.norm(np.asarray(t, dtype=np.float64).ravel()))


def relative_error(a, b) -> float:
    """``||a - b||_F / ||b||_F``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    nb = frobenius_norm(b)
    if nb == 0.0:
        raise DegenerateReferenceError("reference tensor has zero norm")
    return frobenius_norm(a - b) / nb
