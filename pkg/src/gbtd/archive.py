"""Save and load decompositions, factored units and collective groups.

Every archive is a directory (or a ``.zip`` of the same members) holding
``meta.json`` plus one GBT1 file per array. File names use 1-based term
and mode numbers: ``core_1.gbt``, ``factor_1_3.gbt``. A collective group
stores its shared cores and ``A3`` factors the same way, and each unit's
``A4`` blocks as ``unit_l_factor_r_4.gbt`` listed in ``units.json``.
"""

from __future__ import annotations

import numpy as np

from .convmap import FactoredConvUnit
from .cru import CollectiveGroup, ExtraPointwise
from .decomp import BlockTermDecomp, TuckerTerm
from .errors import ArchiveError
from .fileio import (
    canonical_json,
    encode_gbt,
    load_gbt_member,
    load_json_member,
    read_members,
    write_members,
)
from .tensor import IDENTITY, RELU, Activation

__all__ = ["save_decomposition", "save_unit", "save_group", "load_archive", "load_meta"]

FORMAT = 1
_ACTS = {"identity": IDENTITY, "relu": RELU}


def _act_name(act: Activation) -> str:
    if act.kind not in _ACTS:
        raise ValueError("custom activations cannot be archived")
    return act.kind


def _act(name, where):
    if name not in _ACTS:
        raise ArchiveError(f"{where}: unknown activation {name!r}")
    return _ACTS[name]


def _btd_members(d: BlockTermDecomp, skip_modes=()):
    members = {}
    for r, t in enumerate(d.terms, start=1):
        members[f"core_{r}.gbt"] = encode_gbt(t.core)
        for n, a in enumerate(t.factors, start=1):
            if a is not None and n - 1 not in skip_modes:
                members[f"factor_{r}_{n}.gbt"] = encode_gbt(a)
    return members


def _meta(kind, d: BlockTermDecomp, trace, **extra):
    meta = {
        "format": FORMAT,
        "kind": kind,
        "R": d.R,
        "ranks": list(d.ranks),
        "target_shape": list(d.target_shape),
        "error_trace": [float(e) for e in (trace or [])],
    }
    meta.update(extra)
    return meta


def save_decomposition(path, d: BlockTermDecomp, trace=None) -> None:
    members = _btd_members(d)
    members["meta.json"] = canonical_json(_meta("btd", d, trace))
    write_members(path, members)


def save_unit(path, u: FactoredConvUnit, trace=None) -> None:
    d = u.to_btd()
    members = _btd_members(d)
    acts = {"act1": _act_name(u.act1), "act2": _act_name(u.act2)}
    members["meta.json"] = canonical_json(_meta("factored_conv_unit", d, trace, activations=acts))
    write_members(path, members)


def save_group(path, g: CollectiveGroup, trace=None) -> None:
    d = g.to_btd()
    members = _btd_members(d, skip_modes=(3,))
    units = []
    for l in range(g.L):
        entry = {"unit": l + 1, "a4": []}
        for r, block in enumerate(g.per_unit_a4[l], start=1):
            name = f"unit_{l + 1}_factor_{r}_4.gbt"
            members[name] = encode_gbt(block)
            entry["a4"].append(name)
        if g.extra_pointwise is not None:
            extra = g.extra_pointwise[l]
            name = f"unit_{l + 1}_extra.gbt"
            members[name] = encode_gbt(extra.weight)
            entry["extra"] = name
            entry["extra_act"] = _act_name(extra.act)
        units.append(entry)
    members["units.json"] = canonical_json({"L": g.L, "window": g.window, "units": units})
    acts = {"act1": _act_name(g.act1), "act2": _act_name(g.act2)}
    members["meta.json"] = canonical_json(_meta("collective_group", d, trace, activations=acts))
    write_members(path, members)


def load_meta(path) -> dict:
    return load_json_member(read_members(path), "meta.json", path)


def _load_btd(members, meta, where, skip_modes=()):
    try:
        R = int(meta["R"])
        ranks = meta["ranks"]
        shape = tuple(int(s) for s in meta["target_shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{where}: meta.json lacks a valid R, ranks or target_shape") from exc
    if R < 1 or len(ranks) != len(shape):
        raise ArchiveError(f"{where}: inconsistent R={R}, ranks={ranks}, shape={list(shape)}")
    terms = []
    for r in range(1, R + 1):
        core = load_gbt_member(members, f"core_{r}.gbt", where)
        factors = []
        for n, rank in enumerate(ranks, start=1):
            if rank is None or n - 1 in skip_modes:
                factors.append(None)
            else:
                factors.append(load_gbt_member(members, f"factor_{r}_{n}.gbt", where))
        terms.append((core, factors))
    return terms, ranks, shape


def _wrap(where, build):
    try:
        return build()
    except ArchiveError:
        raise
    except (ValueError, IndexError) as exc:
        raise ArchiveError(f"{where}: {exc}") from exc


def load_archive(path):
    """Load any archive written by this module.

    Returns ``(obj, meta)`` where ``obj`` is a :class:`BlockTermDecomp`,
    :class:`FactoredConvUnit` or :class:`CollectiveGroup`.
    """
    members = read_members(path)
    meta = load_json_member(members, "meta.json", path)
    kind = meta.get("kind", "btd")
    if kind == "btd":
        terms, _, shape = _load_btd(members, meta, path)
        d = _wrap(path, lambda: BlockTermDecomp([TuckerTerm(c, f) for c, f in terms], shape))
        _check_ranks(d, meta, path)
        return d, meta
    acts = meta.get("activations", {})
    act1 = _act(acts.get("act1", "identity"), path)
    act2 = _act(acts.get("act2", "identity"), path)
    if kind == "factored_conv_unit":
        terms, _, shape = _load_btd(members, meta, path)
        d = _wrap(path, lambda: BlockTermDecomp([TuckerTerm(c, f) for c, f in terms], shape))
        _check_ranks(d, meta, path)
        return _wrap(path, lambda: FactoredConvUnit.from_btd(d, act1, act2)), meta
    if kind == "collective_group":
        return _load_group(members, meta, path, act1, act2), meta
    raise ArchiveError(f"{path}: unknown archive kind {kind!r}")


def _check_ranks(d, meta, where):
    if list(d.ranks) != list(meta["ranks"]):
        raise ArchiveError(f"{where}: stored arrays have ranks {list(d.ranks)}, meta says {meta['ranks']}")


def _load_group(members, meta, where, act1, act2):
    terms, ranks, shape = _load_btd(members, meta, where, skip_modes=(3,))
    if len(shape) != 4 or ranks[0] is not None or ranks[1] is not None or None in ranks[2:]:
        raise ArchiveError(f"{where}: a collective group needs rank signature (., ., p, q)")
    units = load_json_member(members, "units.json", where)
    try:
        L = int(units["L"])
        entries = units["units"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{where}: units.json lacks L or units") from exc
    if L < 1 or len(entries) != L or shape[3] % L:
        raise ArchiveError(f"{where}: units.json lists {len(entries)} units for L={L}")
    R = len(terms)
    per_unit, extras = [], []
    for e in entries:
        names = e.get("a4", [])
        if len(names) != R:
            raise ArchiveError(f"{where}: unit {e.get('unit')} has {len(names)} A4 blocks, expected {R}")
        per_unit.append([load_gbt_member(members, n, where) for n in names])
        if "extra" in e:
            w = load_gbt_member(members, e["extra"], where)
            extras.append(ExtraPointwise(w, _act(e.get("extra_act", "identity"), where)))
    if extras and len(extras) != L:
        raise ArchiveError(f"{where}: only some units have an extra pointwise layer")
    for blocks in per_unit:
        for b in blocks:
            if b.shape != (shape[3] // L, ranks[3]):
                raise ArchiveError(
                    f"{where}: A4 block of shape {b.shape}, expected {(shape[3] // L, ranks[3])}"
                )
    return _wrap(
        where,
        lambda: CollectiveGroup(
            [f[2] for _, f in terms],
            [np.asarray(c) for c, _ in terms],
            per_unit,
            act1,
            act2,
            extras or None,
            int(units.get("window", 0)),
        ),
    )
