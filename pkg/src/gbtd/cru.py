"""Collective factorization of several kernels with shared leading factors.

``L`` kernels of identical shape are stacked along the output-channel mode
and fitted by one BTD. The first pointwise stage and the grouped spatial
stage are then shared by every unit, while each unit keeps its own row
block of the last pointwise factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .convmap import ConvKernel, FactoredConvUnit, _as_map, _shared_stages, pointwise_conv
from .decomp import AlsConfig, BlockTermDecomp, TuckerTerm, btd_als
from .tensor import IDENTITY, Activation, concat_mode, mode_n_product

__all__ = [
    "ExtraPointwise",
    "CollectiveGroup",
    "ParamCounts",
    "collective_compress",
    "collective_from_btd",
    "shared_forward",
    "unit_forward",
    "forward_all",
    "unit_kernel",
    "shared_param_count",
    "collective_param_formula",
]


@dataclass
class ExtraPointwise:
    """Per-unit 1x1 layer between the grouped stage and the last pointwise stage."""

    weight: np.ndarray  # (R*q, R*q), input channels first
    act: Activation = IDENTITY


@dataclass
class CollectiveGroup:
    a3: list
    cores: list
    per_unit_a4: list  # per_unit_a4[l][r] is (d4, q)
    act1: Activation = IDENTITY
    act2: Activation = IDENTITY
    extra_pointwise: Optional[list] = None
    window: int = 0
    _units: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.per_unit_a4:
            raise ValueError("a collective group needs at least one unit")
        # validates shapes of the shared stage and of every unit's block
        for l in range(self.L):
            self.unit(l)
        if self.extra_pointwise is not None:
            if len(self.extra_pointwise) != self.L:
                raise ValueError(f"{len(self.extra_pointwise)} extra layers for {self.L} units")
            width = self.R * self.ranks[1]
            for l, extra in enumerate(self.extra_pointwise):
                if np.shape(extra.weight) != (width, width):
                    raise ValueError(
                        f"extra layer {l} has shape {np.shape(extra.weight)}, expected {(width, width)}"
                    )

    @property
    def L(self) -> int:
        return len(self.per_unit_a4)

    @property
    def R(self) -> int:
        return len(self.cores)

    @property
    def ranks(self) -> tuple:
        return tuple(np.shape(self.cores[0])[2:])

    def unit(self, l: int) -> FactoredConvUnit:
        """Unit ``l`` as a factored convolution; shared arrays are not copied.

        The extra pointwise layer, if any, is not part of the returned unit.
        """
        if not 0 <= l < self.L:
            raise IndexError(f"unit {l} out of range for a group of {self.L}")
        if l not in self._units:
            self._units[l] = FactoredConvUnit(
                self.a3, self.cores, self.per_unit_a4[l], self.act1, self.act2
            )
        return self._units[l]

    def joint_a4(self, r: int) -> np.ndarray:
        """Term ``r``'s last factor for the stacked kernel: unit blocks stacked by rows."""
        return np.vstack([blocks[r] for blocks in self.per_unit_a4])

    def to_btd(self) -> BlockTermDecomp:
        """Decomposition of the stacked kernel of all units."""
        k1, k2, _, _ = np.shape(self.cores[0])
        d3 = np.shape(self.a3[0])[0]
        terms = [
            TuckerTerm(self.cores[r], [None, None, self.a3[r], self.joint_a4(r)])
            for r in range(self.R)
        ]
        d4 = np.shape(self.per_unit_a4[0][0])[0]
        return BlockTermDecomp(terms, (k1, k2, d3, self.L * d4))


def collective_compress(
    kernels: Sequence, R: int, d3s: int, d4s: int, cfg: AlsConfig = AlsConfig(), window: int = 0
):
    """Jointly factor ``L`` same-shape kernels, sharing the leading factors.

    Returns the :class:`CollectiveGroup` and the relative reconstruction
    error of the stacked kernel.
    """
    kernels = [k if isinstance(k, ConvKernel) else ConvKernel(k) for k in kernels]
    if not kernels:
        raise ValueError("need at least one kernel")
    shape = kernels[0].tensor.shape
    for l, k in enumerate(kernels):
        if k.tensor.shape != shape:
            raise ValueError(f"kernel {l} has shape {k.tensor.shape}, expected {shape}")
    d4 = shape[3]
    if d3s > shape[2] or d4s > d4:
        raise ValueError(f"ranks ({d3s}, {d4s}) exceed channel extents {shape[2:]}")
    stacked = concat_mode([k.tensor for k in kernels], 3)
    d, trace = btd_als(stacked, R, (None, None, d3s, d4s), cfg)
    return collective_from_btd(d, len(kernels), window), trace[-1]


def collective_from_btd(d: BlockTermDecomp, L: int, window: int = 0) -> CollectiveGroup:
    """Split a decomposition of ``L`` stacked kernels into a :class:`CollectiveGroup`."""
    if len(d.target_shape) != 4 or d.ranks[:2] != (None, None) or None in d.ranks[2:]:
        raise ValueError(f"need rank signature (., ., p, q), got {d.ranks}")
    if L < 1 or d.target_shape[3] % L:
        raise ValueError(f"{d.target_shape[3]} output channels do not split into {L} units")
    d4 = d.target_shape[3] // L
    per_unit = [[t.factors[3][l * d4 : (l + 1) * d4].copy() for t in d.terms] for l in range(L)]
    return CollectiveGroup(
        [t.factors[2] for t in d.terms], [t.core for t in d.terms], per_unit, window=window
    )


def shared_forward(g: CollectiveGroup, inp, *, backend=None) -> np.ndarray:
    """Output of the shared pointwise and grouped stages."""
    inp = _as_map(inp)
    d3 = np.shape(g.a3[0])[0]
    if inp.shape[2] != d3:
        raise ValueError(f"input has {inp.shape[2]} channels, group expects {d3}")
    return _shared_stages(inp, g.a3, g.cores, g.act1, g.act2, backend)


def _unit_head(g, l, t2):
    if g.extra_pointwise is not None:
        extra = g.extra_pointwise[l]
        t2 = extra.act(pointwise_conv(t2, extra.weight))
    return pointwise_conv(t2, np.hstack(g.per_unit_a4[l]).T)


def unit_forward(g: CollectiveGroup, l: int, inp, *, backend=None) -> np.ndarray:
    """Forward pass of unit ``l`` (0-based)."""
    if not 0 <= l < g.L:
        raise IndexError(f"unit {l} out of range for a group of {g.L}")
    return _unit_head(g, l, shared_forward(g, inp, backend=backend))


def forward_all(g: CollectiveGroup, inp, *, backend=None) -> list:
    """Every unit's output on the same input; the shared stages run once."""
    t2 = shared_forward(g, inp, backend=backend)
    return [_unit_head(g, l, t2) for l in range(g.L)]


def unit_kernel(g: CollectiveGroup, l: int) -> ConvKernel:
    """Dense kernel equivalent to unit ``l``; every activation must be the identity.

    Without an extra layer this is slice ``l`` of the stacked reconstruction.
    """
    acts = [g.act1, g.act2] + ([g.extra_pointwise[l].act] if g.extra_pointwise else [])
    if not all(a.is_identity for a in acts):
        raise ValueError("a unit with nonlinear activations has no equivalent kernel")
    if g.extra_pointwise is None:
        return g.unit(l).composed_kernel()
    # grouped stage as one dense (k1, k2, d3, R*q) kernel, then the two 1x1 maps
    first = np.concatenate(
        [mode_n_product(c, a, 2) for a, c in zip(g.a3, g.cores)], axis=3
    )
    head = g.extra_pointwise[l].weight @ np.hstack(g.per_unit_a4[l]).T
    return ConvKernel(np.tensordot(first, head, axes=(3, 0)))


class ParamCounts(NamedTuple):
    shared: int
    independent: int
    ratio: float


def shared_param_count(g: CollectiveGroup) -> ParamCounts:
    """Stored reals with sharing versus ``L`` independent factorizations."""
    shared_stage = sum(np.size(a) for a in g.a3) + sum(np.size(c) for c in g.cores)
    per_unit = [sum(np.size(a) for a in blocks) for blocks in g.per_unit_a4]
    extra = 0 if g.extra_pointwise is None else sum(np.size(e.weight) for e in g.extra_pointwise)
    shared = shared_stage + sum(per_unit) + extra
    independent = g.L * shared_stage + sum(per_unit) + extra
    return ParamCounts(shared, independent, shared / independent)


def collective_param_formula(L, R, d1, d2, d3, d4, d3s, d4s, extra=False) -> ParamCounts:
    """:func:`shared_param_count` from the dimensions alone."""
    shared_stage = R * (d1 * d2 * d3s * d4s + d3 * d3s)
    per_unit = R * d4 * d4s + (R * d4s) ** 2 * bool(extra)
    shared = shared_stage + L * per_unit
    independent = L * (shared_stage + per_unit)
    return ParamCounts(shared, independent, shared / independent)
