"""Layer pruning, teacher-weight transplant, block recombination and
cross-layer CondConv inheritance.

Layer references ``(block_id, index)`` use each layer's original position
(``LayerSpec.index``), so plans stay meaningful after earlier pruning.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffkit import ConfigError
from .profiler import block_of
from .unet import (
    EXPERT0_BIAS,
    BlockSpec,
    CondConvSpec,
    UNetModel,
    UNetSpec,
    build_unet,
    fresh_value,
    validate_spec,
)

STEM = ("embed", "conv_in", "conv_out")
TEACHER, STUDENT, FRESH = "teacher", "student", "fresh"


class PlanError(ValueError):
    """A prune or combination plan does not fit the model it targets."""


class BoundaryError(ValueError):
    """Two blocks from different sources disagree at their shared interface."""


# ------------------------------------------------------------------ prune


@dataclass(frozen=True)
class PrunePlan:
    removals: tuple[tuple[str, int], ...] = ()

    @classmethod
    def of(cls, *pairs) -> PrunePlan:
        return cls(tuple((str(b), int(i)) for b, i in pairs))


def default_prune_plan(spec: UNetSpec) -> PrunePlan:
    """Drop every layer but the first from the shallowest down and up blocks."""
    D = len(spec.down_blocks)
    out = []
    for bid in ("dn0", f"up{D - 1}"):
        out += [(bid, l.index) for l in spec.block(bid).layers[1:]]
    return PrunePlan(tuple(out))


def check_plan(spec: UNetSpec, plan: PrunePlan) -> None:
    bad = []
    seen = set()
    for entry in plan.removals:
        bid, idx = entry
        if entry in seen:
            bad.append(f"{bid}.{idx} (duplicate)")
            continue
        seen.add(entry)
        try:
            block = spec.block(bid)
        except (KeyError, ValueError):
            bad.append(f"{bid}.{idx} (no such block)")
            continue
        if idx not in [l.index for l in block.layers]:
            bad.append(f"{bid}.{idx} (no layer {idx}; block has {[l.index for l in block.layers]})")
    if bad:
        raise PlanError("invalid prune plan entries: " + ", ".join(bad))


def prune_layers(spec: UNetSpec, plan: PrunePlan) -> UNetSpec:
    """Remove the listed layers; the first surviving layer of a block takes
    over the block's input channel count."""
    check_plan(spec, plan)
    drop: dict[str, set[int]] = {}
    for bid, idx in plan.removals:
        drop.setdefault(bid, set()).add(idx)
    out = spec
    for bid, idxs in drop.items():
        block = spec.block(bid)
        if bid == "mid" and len(idxs) == len(block.layers):
            raise PlanError("pruning would empty the mid block")
        if bid.startswith("up") and len(idxs) == len(block.layers):
            raise PlanError(f"pruning would empty {bid}; its skip tensor needs a consumer")
        keep = [l for l in block.layers if l.index not in idxs]
        if keep:
            cin = block.layers[0].resnet.in_channels
            first = keep[0]
            keep[0] = replace(first, resnet=replace(first.resnet, in_channels=cin))
        elif block.layers[0].resnet.in_channels != block.layers[-1].resnet.out_channels:
            raise PlanError(f"pruning would empty {bid}, which changes channel count")
        out = out.with_block(bid, replace(block, layers=tuple(keep)))
    validate_spec(out)
    return out


# -------------------------------------------------------------- transplant


def _layer_pos(block: BlockSpec) -> dict[int, int]:
    return {l.index: j for j, l in enumerate(block.layers)}


def _translate(name: str, src_spec: UNetSpec, dst_spec: UNetSpec, mapping: dict | None = None) -> str | None:
    """Name of the parameter in ``dst_spec``'s model playing the role of ``name``."""
    parts = name.split(".")
    if parts[0] not in ("down", "up", "mid"):
        return name
    bid = block_of(name)
    if "layers" not in parts:
        return name
    li = parts.index("layers")
    pos = int(parts[li + 1])
    index = src_spec.block(bid).layers[pos].index
    if mapping is not None:
        index = mapping.get((bid, index), index)
    try:
        dst_pos = _layer_pos(dst_spec.block(bid)).get(index)
    except KeyError:
        return None
    if dst_pos is None:
        return None
    parts[li + 1] = str(dst_pos)
    return ".".join(parts)


@dataclass
class TransplantReport:
    copied: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)


def transplant_weights(
    pruned_spec: UNetSpec, teacher: UNetModel, mapping: dict | None = None, seed: int = 0
) -> tuple[UNetModel, TransplantReport]:
    """Build a model for ``pruned_spec`` carrying the teacher's weights.

    ``mapping`` sends ``(block, layer index)`` of the student to a teacher
    layer index (identity by default). Parameters with no shape-compatible
    teacher counterpart keep their seeded fresh initialization.
    """
    student = build_unet(pruned_spec, seed)
    tparams = dict(teacher.named_parameters())
    report = TransplantReport()
    for name, p in student.named_parameters():
        src = _translate(name, pruned_spec, teacher.spec, mapping)
        tp = tparams.get(src) if src is not None else None
        if tp is not None and tp.shape == p.shape:
            p.data[...] = tp.data
            report.copied.append(name)
        else:
            report.fresh.append(name)
    student.provenance = {n: (FRESH if n in set(report.fresh) else TEACHER) for n, _ in student.named_parameters()}
    return student, report


# -------------------------------------------------------------- recombine


@dataclass(frozen=True)
class CombinationPlan:
    assignments: dict[str, str]
    freeze_teacher_part: bool = True

    def source(self, block: str) -> str:
        return self.assignments.get(block, TEACHER)


def m_plan(name: str, n_blocks: int = 4) -> CombinationPlan:
    """Table-style plans M1..M6 (M1-M3 frozen, M4-M6 trainable teacher part).

    M1: student dn0 + up{D-1}; M2: student dn0,dn1 + up{D-2},up{D-1};
    M3: student dn0..dn{D-2} + up1..up{D-1}. The mid block and stem stay
    with the teacher.
    """
    table = {"M1": 1, "M2": 2, "M3": 3, "M4": 1, "M5": 2, "M6": 3}
    if name not in table:
        raise PlanError(f"unknown plan {name!r}; choose one of {sorted(table)}")
    depth = table[name]
    if depth >= n_blocks:
        raise PlanError(f"{name} needs more than {n_blocks} blocks per path")
    student = [f"dn{i}" for i in range(depth)] + [f"up{n_blocks - 1 - i}" for i in range(depth)]
    ids = [f"dn{i}" for i in range(n_blocks)] + ["mid"] + [f"up{i}" for i in range(n_blocks)] + list(STEM)
    return CombinationPlan({b: STUDENT if b in student else TEACHER for b in ids}, name in ("M1", "M2", "M3"))


def all_teacher_plan(spec: UNetSpec, freeze: bool = True) -> CombinationPlan:
    return CombinationPlan({b: TEACHER for b in spec.block_ids() + list(STEM)}, freeze)


def _interfaces(spec: UNetSpec) -> dict[str, tuple[int, int]]:
    """(input channels excluding skip, output channels) per block."""
    out = {}
    c = spec.base_channels
    for i, b in enumerate(spec.down_blocks):
        o = b.layers[-1].resnet.out_channels if b.layers else c
        out[f"dn{i}"] = (c, o)
        c = o
    out["mid"] = (c, spec.mid_block.layers[-1].resnet.out_channels)
    c = out["mid"][1]
    D = len(spec.up_blocks)
    for k, b in enumerate(spec.up_blocks):
        o = b.layers[-1].resnet.out_channels
        skip = out[f"dn{D - 1 - k}"][1]
        out[f"up{k}"] = (b.layers[0].resnet.in_channels - skip, o)
        c = o
    return out


def combined_spec(teacher_spec: UNetSpec, student_spec: UNetSpec, plan: CombinationPlan) -> UNetSpec:
    ids = teacher_spec.block_ids()
    if ids != student_spec.block_ids():
        raise BoundaryError("teacher and student have different block layouts")
    unknown = set(plan.assignments) - set(ids) - set(STEM)
    bad_src = {b: s for b, s in plan.assignments.items() if s not in (TEACHER, STUDENT)}
    if unknown or bad_src:
        raise PlanError(f"unknown blocks {sorted(unknown)} / sources {bad_src}")
    specs = {TEACHER: teacher_spec, STUDENT: student_spec}
    inter = {s: _interfaces(sp) for s, sp in specs.items()}
    for a, b in zip(ids, ids[1:]):
        out_a = inter[plan.source(a)][a][1]
        in_b = inter[plan.source(b)][b][0]
        if out_a != in_b:
            raise BoundaryError(f"{a} ({plan.source(a)}) emits {out_a} channels, {b} ({plan.source(b)}) expects {in_b}")
    D = len(teacher_spec.down_blocks)
    for k in range(D):
        d, u = f"dn{D - 1 - k}", f"up{k}"
        su = specs[plan.source(u)]
        skip = inter[plan.source(d)][d][1]
        need = su.block(u).layers[0].resnet.in_channels - inter[plan.source(u)][u][0]
        if skip != need:
            raise BoundaryError(f"skip {d} ({plan.source(d)}) carries {skip} channels, {u} ({plan.source(u)}) expects {need}")
    spec = teacher_spec
    for b in ids:
        spec = spec.with_block(b, specs[plan.source(b)].block(b))
    validate_spec(spec)
    return spec


def recombine(teacher: UNetModel, student: UNetModel, plan: CombinationPlan, overrides: dict | None = None):
    """Assemble a model whose blocks are deep copies from the plan's sources.

    Returns ``(combined, freeze_mask)``; ``freeze_mask[name]`` is True for
    teacher-sourced parameters when ``plan.freeze_teacher_part``.
    """
    spec = combined_spec(teacher.spec, student.spec, plan)
    combined = build_unet(spec, 0)
    sources = {TEACHER: dict(teacher.named_parameters()), STUDENT: dict(student.named_parameters())}
    freeze = {}
    provenance = {}
    for name, p in combined.named_parameters():
        src = plan.source(block_of(name))
        sp = sources[src][name]
        if sp.shape != p.shape:
            raise BoundaryError(f"{name}: {src} shape {sp.shape} vs combined {p.shape}")
        p.data[...] = sp.data
        freeze[name] = src == TEACHER and plan.freeze_teacher_part
        provenance[name] = src
    if overrides:
        for name, v in overrides.items():
            if name not in freeze:
                raise PlanError(f"freeze override for unknown parameter {name}")
            freeze[name] = bool(v)
    combined.provenance = provenance
    return combined, freeze


def origin_audit(provenance: dict[str, str]) -> dict[str, str]:
    """Recover block -> source from a parameter provenance map."""
    seen: dict[str, set[str]] = {}
    for name, src in provenance.items():
        seen.setdefault(block_of(name), set()).add(src)
    return {b: (s.pop() if len(s) == 1 else "mixed") for b, s in seen.items()}


# ----------------------------------------------------------- condconv


def _conv_kernels(model: UNetModel, block_id: str) -> list[dict[str, np.ndarray]]:
    """Per layer: {'conv1': kernel, 'conv2': kernel} for plain or CondConv units."""
    out = []
    for layer in model.block_module(block_id).layers:
        d = {}
        for which in ("conv1", "conv2"):
            conv = getattr(layer.resnet, which)
            d[which] = conv.experts.data[0] if hasattr(conv, "experts") else conv.weight.data
        out.append(d)
    return out


def inherit_condconv(
    teacher: UNetModel, block_id: str, n_experts: int, seed: int = 0, base: UNetModel | None = None
) -> UNetModel:
    """Turn every 3x3 ResNet conv of ``block_id`` into a CondConv unit.

    Expert 0 is the base model's kernel at the same position (the teacher's
    when ``base`` is None). Expert e >= 1 of layer i copies, round-robin,
    the teacher's same-conv kernels of the other layers of this block taken
    cyclically from i+1 and filtered to matching shapes; without a match
    it is a fresh seeded draw at gain 0.1. Routing starts at zero weights
    with expert 0's bias at +5.
    """
    if n_experts < 1:
        raise ConfigError("n_experts must be >= 1")
    base = teacher if base is None else base
    bspec = base.spec.block(block_id)
    if any(l.resnet.condconv is not None for l in bspec.layers):
        raise ConfigError(f"{block_id} already has CondConv units")
    new_block = replace(
        bspec,
        layers=tuple(replace(l, resnet=replace(l.resnet, condconv=CondConvSpec(n_experts))) for l in bspec.layers),
    )
    spec = base.spec.with_block(block_id, new_block)
    model = build_unet(spec, seed)
    old = dict(base.named_parameters())
    for name, p in model.named_parameters():
        if name in old and old[name].shape == p.shape:
            p.data[...] = old[name].data
    tkernels = _conv_kernels(teacher, block_id)
    tindex = [l.index for l in teacher.spec.block(block_id).layers]
    L = len(tkernels)
    prefix = model.block_prefix(block_id)
    for j, layer in enumerate(model.block_module(block_id).layers):
        own = bspec.layers[j].index
        home = tindex.index(own) if own in tindex else j % max(L, 1)
        for which in ("conv1", "conv2"):
            unit = getattr(layer.resnet, which)
            plain = old[f"{prefix}layers.{j}.resnet.{which}.weight"]
            unit.experts.data[0] = plain.data
            unit.bias.data[...] = old[f"{prefix}layers.{j}.resnet.{which}.bias"].data
            donors = [
                tkernels[(home + s) % L][which]
                for s in range(1, L)
                if tkernels[(home + s) % L][which].shape == plain.shape
            ]
            for e in range(1, n_experts):
                if donors:
                    unit.experts.data[e] = donors[(e - 1) % len(donors)]
                else:
                    name = f"{prefix}layers.{j}.resnet.{which}.experts.{e}"
                    unit.experts.data[e] = fresh_value(seed, name, plain.shape, gain=0.1)
            unit.route_w.data[...] = 0.0
            unit.route_b.data[...] = 0.0
            if n_experts > 1:
                unit.route_b.data[0] = EXPERT0_BIAS
    prov = getattr(base, "provenance", None)
    if prov is not None:
        model.provenance = {n: prov.get(n, prov.get(_plain_name(n), FRESH)) for n, _ in model.named_parameters()}
    return model


def _plain_name(name: str) -> str:
    for suffix in ("experts", "route_w", "route_b"):
        if name.endswith(suffix):
            return name[: -len(suffix)] + "weight"
    return name
