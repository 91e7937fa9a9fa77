"""Residual network descriptors and exact parameter / FLOP accounting.

A network is a list of stages. Residual stages repeat a bottleneck block
``repeat`` times; the first unit of a stage takes the previous stage's
width and, when the width or resolution changes, a projection shortcut
(1x1 conv plus normalization). A layer's stride applies only in the first
unit, and spatial layers use "same" padding so the output side is
``ceil(side / stride)``.

Collective (CRU) stages share the weights of their first two layers: the
first unit of the stage keeps its own, and the remaining units are split
into consecutive windows of at most ``sharing_window`` units that each
store those weights once. Normalization parameters are never shared.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

from .errors import NotationError

__all__ = [
    "Layer",
    "StageSpec",
    "ArchSpec",
    "CountConvention",
    "Notation",
    "BUILTIN_NAMES",
    "builtin",
    "resnext_config",
    "resnext_spec",
    "param_count",
    "flop_count",
    "model_size_mb",
    "stage_breakdown",
    "sharing_windows",
    "shared_stage_params",
    "without_sharing",
    "parse_notation",
    "to_json",
    "from_json",
    "load_spec",
]

LAYER_KINDS = ("pointwise", "spatial", "grouped", "pool", "fc")
SIZE_TO_STAGE = {112: "conv1", 56: "conv2", 28: "conv3", 14: "conv4", 7: "conv5"}


@dataclass(frozen=True)
class Layer:
    kind: str
    out_channels: int = 0
    groups: int = 1
    k: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.k < 1 or self.stride < 1 or self.groups < 1:
            raise ValueError(f"kernel size, stride and groups must be positive: {self}")
        if self.kind != "pool" and self.out_channels < 1:
            raise ValueError(f"{self.kind} layer needs a positive channel count")
        if self.out_channels % self.groups:
            raise ValueError(
                f"{self.out_channels} channels cannot split into {self.groups} groups"
            )
        if self.kind == "pointwise" and self.k != 1:
            raise ValueError("pointwise layers have k=1")


@dataclass(frozen=True)
class StageSpec:
    name: str
    output: int
    layers: tuple
    repeat: int = 1
    sharing_window: int = 0
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError(f"stage {self.name} has no layers")
        if self.repeat < 1 or self.sharing_window < 0:
            raise ValueError(f"stage {self.name}: repeat must be >= 1 and sharing_window >= 0")
        if sum(l.stride > 1 for l in self.layers) > 1:
            raise ValueError(f"stage {self.name} downsamples more than once")
        if self.sharing_window and len(self.layers) < 3:
            raise ValueError(f"stage {self.name}: a sharing stage needs at least three layers")

    @property
    def block(self) -> tuple:
        return self.layers

    @property
    def cru(self) -> bool:
        return self.sharing_window > 0

    @property
    def extra_pointwise(self) -> bool:
        return self.cru and len(self.layers) == 4

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels or 0


@dataclass(frozen=True)
class ArchSpec:
    name: str
    stages: tuple
    classes: int = 1000
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.classes < 1:
            raise ValueError("classifier needs at least one class")

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(f"{self.name} has no stage {name!r}")

    @property
    def depth(self) -> int:
        """Weighted layers on the main path, classifier included."""
        return 1 + sum(
            s.repeat * sum(l.kind != "pool" for l in s.layers) for s in self.stages
        )


@dataclass(frozen=True)
class CountConvention:
    """What the counters include.

    ``flops="fma"`` counts one per multiply-accumulate, ``"madd2"`` counts
    the multiply and the add separately.
    """

    norm_affine: bool = True
    projection_shortcuts: bool = True
    conv_bias: bool = False
    fc_bias: bool = True
    flops: str = "fma"
    input_size: int = 224

    def __post_init__(self):
        if self.flops not in ("fma", "madd2"):
            raise ValueError(f"unknown FLOP convention {self.flops!r}; use 'fma' or 'madd2'")

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT = CountConvention()


def _stem():
    return (
        StageSpec("conv1", 112, (Layer("spatial", 64, k=7, stride=2),), residual=False),
        StageSpec("pool", 56, (Layer("pool", k=3, stride=2),), residual=False),
    )


def _bottleneck(width, groups, out, stride, extra=False):
    layers = [
        Layer("pointwise", width),
        Layer("grouped" if groups > 1 else "spatial", width, groups, 3, stride),
    ]
    if extra:
        layers.append(Layer("pointwise", width))
    layers.append(Layer("pointwise", out))
    return tuple(layers)


def _net(name, stages, classes=1000):
    """``stages``: (width, groups, repeat, sharing_window, extra) for conv2..conv5."""
    out = list(_stem())
    for i, (width, groups, repeat, window, extra) in enumerate(stages):
        stride = 1 if i == 0 else 2
        out.append(
            StageSpec(
                f"conv{i + 2}",
                56 >> i,
                _bottleneck(width, groups, 256 << i, stride, extra),
                repeat,
                window,
            )
        )
    return ArchSpec(name, tuple(out), classes)


# Transcribed column by column: (bottleneck width, groups, units, window, extra 1x1)
_TABLE = {
    "ResNet-50": [(64, 1, 3, 0, 0), (128, 1, 4, 0, 0), (256, 1, 6, 0, 0), (512, 1, 3, 0, 0)],
    "ResNeXt-50 (32x4d)": [
        (128, 32, 3, 0, 0), (256, 32, 4, 0, 0), (512, 32, 6, 0, 0), (1024, 32, 3, 0, 0)
    ],
    "ResNeXt-50 (Nx1d)": [
        (136, 136, 3, 0, 0), (272, 272, 4, 0, 0), (544, 544, 6, 0, 0), (1088, 1088, 3, 0, 0)
    ],
    "CRU-Net-56 (32x4d @x14)": [
        (128, 32, 3, 0, 0), (256, 32, 4, 0, 0), (640, 640, 6, 6, 1), (1024, 32, 3, 0, 0)
    ],
    "CRU-Net-116 (32x4d @x28x14)": [
        (128, 32, 3, 0, 0), (352, 352, 6, 6, 1), (704, 704, 18, 6, 1), (1024, 32, 3, 0, 0)
    ],
    "ResNet-101": [(64, 1, 3, 0, 0), (128, 1, 4, 0, 0), (256, 1, 23, 0, 0), (512, 1, 3, 0, 0)],
    "ResNeXt-101 (32x4d)": [
        (128, 32, 3, 0, 0), (256, 32, 4, 0, 0), (512, 32, 23, 0, 0), (1024, 32, 3, 0, 0)
    ],
    "ResNeXt-101 (64x4d)": [
        (256, 64, 3, 0, 0), (512, 64, 4, 0, 0), (1024, 64, 23, 0, 0), (2048, 64, 3, 0, 0)
    ],
}
BUILTIN_NAMES = tuple(_TABLE)


def _norm_name(name: str) -> str:
    return re.sub(r"[^0-9a-z]", "", name.lower().replace("×", "x"))


def builtin(name: str) -> ArchSpec:
    """One of the tabulated networks.

    Names are matched ignoring case, punctuation and spaces, and any
    unambiguous prefix works (``"CRU-Net-56"``, ``"resnext50nx1d"``).
    """
    key = _norm_name(name)
    exact = [n for n in BUILTIN_NAMES if _norm_name(n) == key]
    hits = exact or [n for n in BUILTIN_NAMES if key and _norm_name(n).startswith(key)]
    if len(hits) == 1:
        return _net(hits[0], _TABLE[hits[0]])
    known = ", ".join(BUILTIN_NAMES)
    if hits:
        raise KeyError(f"ambiguous architecture {name!r}: matches {', '.join(hits)}")
    raise KeyError(f"unknown architecture {name!r}; known: {known}")


class BtdConfig(NamedTuple):
    R: int
    d3: int
    d4: int
    d3s: int
    d4s: int


def resnext_config(cardinality: int, bottleneck_width: int, shortcut_width: int) -> BtdConfig:
    """BTD rank signature of an aggregated bottleneck block.

    ``bottleneck_width`` is the channel count of the grouped 3x3 layer.
    """
    if min(cardinality, bottleneck_width, shortcut_width) < 1:
        raise ValueError("cardinality and widths must be positive")
    if bottleneck_width % cardinality:
        raise ValueError(
            f"cardinality {cardinality} does not divide bottleneck width {bottleneck_width}"
        )
    d = bottleneck_width // cardinality
    return BtdConfig(cardinality, shortcut_width, shortcut_width, d, d)


def resnext_spec(notation: str, depth=(3, 4, 6, 3), name: Optional[str] = None) -> ArchSpec:
    """Build a ResNeXt-style spec from ``"RxDd"`` notation via :func:`resnext_config`.

    The per-path width doubles at every stage. A literal ``N`` for ``R``
    gives one group per channel with ``N = 136 * D * 2**stage``.
    CRU markers in the notation are rejected; use :func:`builtin`.
    """
    n = parse_notation(notation)
    if n.cru_stages:
        raise ValueError("resnext_spec builds plain aggregated networks only")
    stages = []
    for i, repeat in enumerate(depth):
        if n.R is None:
            width = 136 * n.d * (1 << i)
            R = width
        else:
            R = n.R
            width = R * n.d * (1 << i)
        cfg = resnext_config(R, width, 256 << i)
        stages.append((cfg.R * cfg.d3s, cfg.R, repeat, 0, 0))
    return _net(name or f"ResNeXt ({notation})", stages)


# --- counting -------------------------------------------------------------


def sharing_windows(repeat: int, window: int) -> list:
    """Units grouped by shared storage: ``[[0], [1..], ...]``.

    With ``window == 0`` every unit is its own group.
    """
    if window <= 0:
        return [[u] for u in range(repeat)]
    rest = list(range(1, repeat))
    return [[0]] + [rest[i : i + window] for i in range(0, len(rest), window)]


def _stores_shared(unit: int, window: int) -> bool:
    """Whether ``unit`` stores the shared layers of its window."""
    return window <= 0 or unit == 0 or (unit - 1) % window == 0


def _walk(spec: ArchSpec, conv: CountConvention):
    """Yield ``(stage, params, macs)`` per stage."""
    side = conv.input_size
    cin = spec.input_channels
    for s in spec.stages:
        p = m = 0
        stage_in = cin
        for u in range(s.repeat):
            c = stage_in if u == 0 else s.out_channels or stage_in
            unit_in_side = side
            for li, layer in enumerate(s.layers):
                stride = layer.stride if u == 0 else 1
                side_out = -(-side // stride)
                if layer.kind == "pool":
                    side = side_out
                    continue
                if layer.kind == "fc":
                    raise ValueError("fc layers belong to the classifier, not to a stage")
                weights = layer.k * layer.k * (c // layer.groups) * layer.out_channels
                if c % layer.groups:
                    raise ValueError(
                        f"{s.name}: {c} input channels cannot split into {layer.groups} groups"
                    )
                shared = s.sharing_window > 0 and li < 2
                if not shared or _stores_shared(u, s.sharing_window):
                    p += weights
                p += 2 * layer.out_channels * conv.norm_affine
                p += layer.out_channels * conv.conv_bias
                m += side_out * side_out * weights
                c = layer.out_channels
                side = side_out
            if s.residual and u == 0 and conv.projection_shortcuts:
                if c != stage_in or side != unit_in_side:
                    p += stage_in * c + 2 * c * conv.norm_affine + c * conv.conv_bias
                    m += side * side * stage_in * c
        if s.out_channels:
            cin = s.out_channels
        yield s, p, m
    # classifier after global average pooling
    fc = cin * spec.classes
    yield None, fc + spec.classes * conv.fc_bias, fc


def _factor(conv):
    return 2 if conv.flops == "madd2" else 1


def param_count(spec: ArchSpec, convention: CountConvention = DEFAULT) -> int:
    return sum(p for _, p, _ in _walk(spec, convention))


def flop_count(spec: ArchSpec, convention: CountConvention = DEFAULT, input_size=None) -> int:
    """Convolution and classifier FLOPs for one image; pooling and normalization are free."""
    if input_size is not None:
        convention = replace(convention, input_size=int(input_size))
    return _factor(convention) * sum(m for _, _, m in _walk(spec, convention))


def model_size_mb(spec: ArchSpec, convention: CountConvention = DEFAULT) -> int:
    """float32 storage in MiB, rounded to the nearest integer."""
    return round(param_count(spec, convention) * 4 / 2**20)


def stage_breakdown(spec: ArchSpec, convention: CountConvention = DEFAULT) -> list:
    f = _factor(convention)
    return [
        {"stage": s.name if s else "classifier", "params": p, "flops": f * m}
        for s, p, m in _walk(spec, convention)
    ]


def shared_stage_params(stage: StageSpec, in_channels: int) -> int:
    """Weights of the two shared layers in one non-first unit of ``stage``."""
    c = stage.out_channels
    first, second = stage.layers[0], stage.layers[1]
    return c * first.out_channels + second.k**2 * (first.out_channels // second.groups) * second.out_channels


def without_sharing(spec: ArchSpec) -> ArchSpec:
    stages = tuple(replace(s, sharing_window=0) for s in spec.stages)
    return replace(spec, name=f"{spec.name} (unshared)", stages=stages)


# --- notation -------------------------------------------------------------


@dataclass(frozen=True)
class Notation:
    R: Optional[int]  # None for the per-channel rule "N"
    d: int
    cru_stages: tuple = field(default=())


_LABELS = {"num": "a number", "x": "'x'", "d": "'d'", "n": "'N'", "at": "'@'", "end": "end of text"}
_TOKEN = re.compile(r"\s*(?:(?P<num>\d+)|(?P<x>[x×X])|(?P<d>d)|(?P<n>N)|(?P<at>@))")


def parse_notation(text: str) -> Notation:
    """Parse ``"RxDd"`` with optional ``"@xS..."`` stage markers.

    ``"32x4d @x28x14"`` gives ``R=32``, ``d=4`` and CRU at conv3 and conv4;
    ``"Nx1d"`` gives ``R=None``.
    """
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            col = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise NotationError(f"unexpected character {text[col]!r}", col)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    i = 0

    def expect(*kinds):
        nonlocal i
        kind, val, at = tokens[i]
        if kind not in kinds:
            what = "end of text" if kind == "end" else repr(val)
            wanted = " or ".join(_LABELS[k] for k in kinds)
            raise NotationError(f"expected {wanted}, found {what}", at)
        i += 1
        return val, at

    val, at = expect("num", "n")
    R = None if val == "N" else int(val)
    if R == 0:
        raise NotationError("R must be positive", at)
    expect("x")
    val, at = expect("num")
    d = int(val)
    if d == 0:
        raise NotationError("rank must be positive", at)
    expect("d")
    stages = []
    if tokens[i][0] == "at":
        i += 1
        expect("x")
        while True:
            val, at = expect("num")
            size = int(val)
            if size not in SIZE_TO_STAGE or size == 112:
                raise NotationError(f"no residual stage has output size {size}", at)
            name = SIZE_TO_STAGE[size]
            if name in stages:
                raise NotationError(f"stage size {size} repeated", at)
            stages.append(name)
            if tokens[i][0] != "x":
                break
            i += 1
    expect("end")
    return Notation(R, d, tuple(sorted(stages)))


# --- JSON -----------------------------------------------------------------


def to_json(spec: ArchSpec) -> dict:
    return {
        "name": spec.name,
        "input_channels": spec.input_channels,
        "stages": [
            {
                "name": s.name,
                "output": s.output,
                "repeat": s.repeat,
                "sharing_window": s.sharing_window,
                "residual": s.residual,
                "layers": [
                    {
                        "kind": l.kind,
                        "out_channels": l.out_channels,
                        "groups": l.groups,
                        "k": l.k,
                        "stride": l.stride,
                    }
                    for l in s.layers
                ],
            }
            for s in spec.stages
        ],
        "classifier": {"classes": spec.classes},
    }


def from_json(obj: dict) -> ArchSpec:
    """Inverse of :func:`to_json`. ``residual`` defaults to "more than one layer"."""
    try:
        stages = []
        for s in obj["stages"]:
            layers = tuple(
                Layer(
                    l["kind"],
                    int(l.get("out_channels", 0)),
                    int(l.get("groups", 1)),
                    int(l.get("k", 1)),
                    int(l.get("stride", 1)),
                )
                for l in s["layers"]
            )
            stages.append(
                StageSpec(
                    s["name"],
                    int(s["output"]),
                    layers,
                    int(s.get("repeat", 1)),
                    int(s.get("sharing_window", 0)),
                    bool(s.get("residual", len(layers) > 1)),
                )
            )
        return ArchSpec(
            obj["name"],
            tuple(stages),
            int(obj.get("classifier", {}).get("classes", 1000)),
            int(obj.get("input_channels", 3)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed architecture JSON: missing or bad field {exc}") from exc


def load_spec(name_or_path: str) -> ArchSpec:
    """A builtin by name, or a spec from a JSON file path."""
    path = Path(name_or_path)
    if path.suffix == ".json" or path.is_file():
        try:
            obj = json.loads(path.read_text())
        except OSError as exc:
            raise ValueError(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not valid JSON: {exc}") from exc
        return from_json(obj)
    return builtin(name_or_path)
