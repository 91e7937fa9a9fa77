"""Factored convolutions: a BTD-factored kernel run as three convolution stages.

Feature maps are ``(width, height, channels)`` arrays and kernels are
``(kernel width, kernel height, input channels, output channels)``. The
convolution is a zero-padded cross-correlation:

    V[x, y, c] = sum_{a, b, m} U[x*s1 + a - p1, y*s2 + b - p2, m] * K[a, b, m, c]

With stride 1 and the default padding ``((k1-1)/2, (k2-1)/2)`` the kernel
centre sits on the output pixel and the map size is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import backend as _backend
from .decomp import AlsConfig, BlockTermDecomp, TuckerTerm, btd_als, reconstruct
from .tensor import IDENTITY, Activation, as_tensor

__all__ = [
    "ConvKernel",
    "FactoredConvUnit",
    "direct_conv2d",
    "grouped_conv2d",
    "grouped_conv2d_reference",
    "pointwise_conv",
    "factored_forward",
    "fuse_affine",
    "compress_kernel",
]


def _pair(v):
    if np.isscalar(v):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


@dataclass
class ConvKernel:
    tensor: np.ndarray
    stride: tuple = (1, 1)
    padding: tuple | None = None

    def __post_init__(self):
        self.tensor = as_tensor(self.tensor, name="kernel")
        if self.tensor.ndim != 4:
            raise ValueError(f"kernel must be 4th order, got shape {self.tensor.shape}")
        d1, d2 = self.tensor.shape[:2]
        if d1 % 2 == 0 or d2 % 2 == 0:
            raise ValueError(f"kernel spatial extents must be odd, got {d1}x{d2}")
        self.stride = _pair(self.stride)
        if min(self.stride) < 1:
            raise ValueError("stride must be positive")
        self.padding = self.half_width if self.padding is None else _pair(self.padding)
        if min(self.padding) < 0:
            raise ValueError("padding must be non-negative")

    @property
    def half_width(self) -> tuple:
        d1, d2 = self.tensor.shape[:2]
        return ((d1 - 1) // 2, (d2 - 1) // 2)

    @property
    def in_channels(self) -> int:
        return self.tensor.shape[2]

    @property
    def out_channels(self) -> int:
        return self.tensor.shape[3]


def _as_map(x, name="input"):
    x = as_tensor(x, name=name)
    if x.ndim != 3:
        raise ValueError(f"{name} must be a (width, height, channels) map, got shape {x.shape}")
    return x


def direct_conv2d(inp, kernel, bias=None, *, backend=None) -> np.ndarray:
    """Dense 2-D convolution of a ``(w, h, d3)`` map with a :class:`ConvKernel`."""
    if not isinstance(kernel, ConvKernel):
        kernel = ConvKernel(kernel)
    inp = _as_map(inp)
    if inp.shape[2] != kernel.in_channels:
        raise ValueError(
            f"input has {inp.shape[2]} channels, kernel expects {kernel.in_channels}"
        )
    impl = _backend.get(backend)
    out = impl.grouped_conv2d(
        inp, kernel.tensor[None], kernel.stride, kernel.padding, _backend.threads()
    )
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (kernel.out_channels,):
            raise ValueError(f"bias must have {kernel.out_channels} entries")
        out = out + bias
    return out


def _stack_cores(cores):
    cores = [np.asarray(c, dtype=np.float64) for c in cores]
    if not cores:
        raise ValueError("need at least one group kernel")
    shape = cores[0].shape
    if len(shape) != 4:
        raise ValueError(f"group kernels must be 4th order, got shape {shape}")
    for r, c in enumerate(cores):
        if c.shape != shape:
            raise ValueError(f"group kernel {r} has shape {c.shape}, expected {shape}")
    return np.ascontiguousarray(np.stack(cores))


def grouped_conv2d(inp, cores: Sequence[np.ndarray], stride=1, padding=None, *, backend=None):
    """Grouped convolution: ``R`` contiguous channel groups, one kernel each.

    Group ``r`` convolves input channels ``r*p:(r+1)*p`` with ``cores[r]``
    (shape ``(k1, k2, p, q)``) into output channels ``r*q:(r+1)*q``.
    """
    stacked = _stack_cores(cores)
    R, k1, k2, p, _ = stacked.shape
    inp = _as_map(inp)
    if inp.shape[2] != R * p:
        raise ValueError(f"input has {inp.shape[2]} channels, expected {R} groups of {p}")
    if k1 % 2 == 0 or k2 % 2 == 0:
        raise ValueError(f"group kernel spatial extents must be odd, got {k1}x{k2}")
    padding = ((k1 - 1) // 2, (k2 - 1) // 2) if padding is None else _pair(padding)
    impl = _backend.get(backend)
    return impl.grouped_conv2d(inp, stacked, _pair(stride), padding, _backend.threads())


def grouped_conv2d_reference(inp, cores, stride=1, padding=None, *, backend=None):
    """Grouped convolution as ``R`` independent dense convolutions on channel slices."""
    stacked = _stack_cores(cores)
    p = stacked.shape[3]
    inp = _as_map(inp)
    if inp.shape[2] != stacked.shape[0] * p:
        raise ValueError(f"input has {inp.shape[2]} channels, expected {stacked.shape[0]} groups of {p}")
    outs = [
        direct_conv2d(
            inp[:, :, r * p : (r + 1) * p], ConvKernel(core, stride, padding), backend=backend
        )
        for r, core in enumerate(stacked)
    ]
    return np.concatenate(outs, axis=2)


def pointwise_conv(inp, weight) -> np.ndarray:
    """1x1 convolution; ``weight`` is ``(in_channels, out_channels)``."""
    return np.tensordot(inp, weight, axes=(2, 0))


@dataclass
class FactoredConvUnit:
    """Pointwise, grouped spatial and pointwise stages realizing one kernel.

    ``a3[r]`` is ``(d3, p)``, ``cores[r]`` is ``(k1, k2, p, q)`` and ``a4[r]``
    is ``(d4, q)``. ``act1`` follows the first pointwise stage and ``act2``
    the grouped stage; nothing is applied after the last stage.
    """

    a3: list
    cores: list
    a4: list
    act1: Activation = IDENTITY
    act2: Activation = IDENTITY

    def __post_init__(self):
        if not (len(self.a3) == len(self.cores) == len(self.a4)) or not self.a3:
            raise ValueError("a3, cores and a4 must be non-empty lists of equal length")
        core_shape = np.shape(self.cores[0])
        for r in range(self.R):
            a3, core, a4 = self.a3[r], self.cores[r], self.a4[r]
            if np.shape(core) != core_shape:
                raise ValueError(f"core {r} has shape {np.shape(core)}, expected {core_shape}")
            if np.shape(a3) != (np.shape(self.a3[0])[0], core_shape[2]):
                raise ValueError(f"a3[{r}] has shape {np.shape(a3)}, incompatible with core {core_shape}")
            if np.shape(a4) != (np.shape(self.a4[0])[0], core_shape[3]):
                raise ValueError(f"a4[{r}] has shape {np.shape(a4)}, incompatible with core {core_shape}")

    @property
    def R(self) -> int:
        return len(self.cores)

    @property
    def in_channels(self) -> int:
        return np.shape(self.a3[0])[0]

    @property
    def out_channels(self) -> int:
        return np.shape(self.a4[0])[0]

    @property
    def ranks(self) -> tuple:
        """``(p, q)``: per-term widths of the grouped stage."""
        return tuple(np.shape(self.cores[0])[2:])

    def to_btd(self) -> BlockTermDecomp:
        k1, k2, _, _ = np.shape(self.cores[0])
        terms = [
            TuckerTerm(core, [None, None, a3, a4])
            for a3, core, a4 in zip(self.a3, self.cores, self.a4)
        ]
        return BlockTermDecomp(terms, (k1, k2, self.in_channels, self.out_channels))

    @classmethod
    def from_btd(cls, d: BlockTermDecomp, act1=IDENTITY, act2=IDENTITY):
        if len(d.target_shape) != 4 or d.ranks[0] is not None or d.ranks[1] is not None:
            raise ValueError(
                "a factored convolution needs a 4th-order decomposition with modes 3 and 4 "
                f"factorized only; got rank signature {d.ranks}"
            )
        if None in d.ranks[2:]:
            raise ValueError("modes 3 and 4 must both be factorized")
        return cls(
            [t.factors[2] for t in d.terms],
            [t.core for t in d.terms],
            [t.factors[3] for t in d.terms],
            act1,
            act2,
        )

    def composed_kernel(self) -> ConvKernel:
        """The dense kernel ``sum_r core_r x3 a3_r x4 a4_r``."""
        return ConvKernel(reconstruct(self.to_btd()))

    def size(self) -> int:
        return sum(np.size(a) for a in (*self.a3, *self.cores, *self.a4))


def _shared_stages(inp, a3, cores, act1, act2, backend):
    t1 = act1(pointwise_conv(inp, np.hstack(a3)))
    return act2(grouped_conv2d(t1, cores, backend=backend))


def factored_forward(inp, u: FactoredConvUnit, *, backend=None) -> np.ndarray:
    """Run ``inp`` through the three-stage realization of ``u`` (stride 1, same size)."""
    inp = _as_map(inp)
    if inp.shape[2] != u.in_channels:
        raise ValueError(f"input has {inp.shape[2]} channels, unit expects {u.in_channels}")
    t2 = _shared_stages(inp, u.a3, u.cores, u.act1, u.act2, backend)
    return pointwise_conv(t2, np.hstack(u.a4).T)


def fuse_affine(k: ConvKernel, scale, shift):
    """Fold a per-output-channel ``scale * conv + shift`` into kernel and bias."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    d4 = k.out_channels
    if scale.shape != (d4,) or shift.shape != (d4,):
        raise ValueError(f"scale and shift must each have {d4} entries")
    return ConvKernel(k.tensor * scale, k.stride, k.padding), shift.copy()


def compress_kernel(k: ConvKernel, R: int, d3s: int, d4s: int, cfg: AlsConfig = AlsConfig()):
    """Fit a rank-(., ., d3s, d4s) BTD with ``R`` terms to a kernel.

    Returns the :class:`FactoredConvUnit` (identity activations) and the
    final relative reconstruction error.
    """
    if not isinstance(k, ConvKernel):
        k = ConvKernel(k)
    _, _, d3, d4 = k.tensor.shape
    if d3s > d3 or d4s > d4:
        raise ValueError(f"ranks ({d3s}, {d4s}) exceed channel extents ({d3}, {d4})")
    d, trace = btd_als(k.tensor, R, (None, None, d3s, d4s), cfg)
    return FactoredConvUnit.from_btd(d), trace[-1]
