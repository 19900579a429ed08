"""Instruction set, program container and static program validation.

Four instruction classes exist: matrix, vector, transfer and scalar.  Every
operand is an immediate; registers only appear in scalar instructions.
Vector/matrix data is int8 except for the 32-bit accumulators produced by
``MVM`` and consumed by ``VADD.w`` / ``VSCALE``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import ClassVar

import numpy as np

CLASSES = ("matrix", "vector", "transfer", "scalar")

WIDTH_BYTES = {"b": 1, "w": 4}


class Instruction:
    """Base for all instruction variants.

    Subclasses declare ``klass`` (one of ``CLASSES``) and ``kinds``, the
    operand kind of each dataclass field in assembly order.  Kinds drive
    assembly formatting and validation: ``addr``, ``len``, ``group``,
    ``core``, ``tag``, ``reg``, ``imm``, ``label``, ``stride``, ``mult``,
    ``shift``.
    """

    klass: ClassVar[str]
    kinds: ClassVar[tuple[str, ...]] = ()

    @property
    def mnemonic(self) -> str:
        width = getattr(self, "width", None)
        name = type(self).__name__
        return f"{name}.{width}" if width else name

    def operands(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "width")


# -- matrix -------------------------------------------------------------------


@dataclass(frozen=True)
class MVM(Instruction):
    group: int
    src: int
    dst: int
    klass: ClassVar[str] = "matrix"
    kinds: ClassVar[tuple] = ("group", "addr", "addr")


# -- vector -------------------------------------------------------------------


@dataclass(frozen=True)
class VADD(Instruction):
    dst: int
    src1: int
    src2: int
    len: int
    width: str = "w"
    klass: ClassVar[str] = "vector"
    kinds: ClassVar[tuple] = ("addr", "addr", "addr", "len")


@dataclass(frozen=True)
class VMAX(Instruction):
    dst: int
    src1: int
    src2: int
    len: int
    width: str = "b"
    klass: ClassVar[str] = "vector"
    kinds: ClassVar[tuple] = ("addr", "addr", "addr", "len")


@dataclass(frozen=True)
class VRELU(Instruction):
    dst: int
    src: int
    len: int
    klass: ClassVar[str] = "vector"
    kinds: ClassVar[tuple] = ("addr", "addr", "len")


@dataclass(frozen=True)
class VCOPY(Instruction):
    dst: int
    src: int
    len: int
    src_stride: int = 1
    klass: ClassVar[str] = "vector"
    kinds: ClassVar[tuple] = ("addr", "addr", "len", "stride")


@dataclass(frozen=True)
class VSCALE(Instruction):
    dst: int
    src: int
    len: int
    multiplier: int
    shift: int
    klass: ClassVar[str] = "vector"
    kinds: ClassVar[tuple] = ("addr", "addr", "len", "mult", "shift")


# -- transfer -----------------------------------------------------------------


@dataclass(frozen=True)
class SEND(Instruction):
    dst_core: int
    src: int
    len: int
    tag: int
    klass: ClassVar[str] = "transfer"
    kinds: ClassVar[tuple] = ("core", "addr", "len", "tag")


@dataclass(frozen=True)
class RECV(Instruction):
    src_core: int
    dst: int
    len: int
    tag: int
    klass: ClassVar[str] = "transfer"
    kinds: ClassVar[tuple] = ("core", "addr", "len", "tag")


@dataclass(frozen=True)
class LOAD(Instruction):
    dst: int
    gaddr: int
    len: int
    klass: ClassVar[str] = "transfer"
    kinds: ClassVar[tuple] = ("addr", "imm", "len")


@dataclass(frozen=True)
class STORE(Instruction):
    gaddr: int
    src: int
    len: int
    klass: ClassVar[str] = "transfer"
    kinds: ClassVar[tuple] = ("imm", "addr", "len")


# -- scalar -------------------------------------------------------------------


@dataclass(frozen=True)
class LI(Instruction):
    rd: int
    imm: int
    klass: ClassVar[str] = "scalar"
    kinds: ClassVar[tuple] = ("reg", "imm")


@dataclass(frozen=True)
class SADD(Instruction):
    rd: int
    ra: int
    rb: int
    klass: ClassVar[str] = "scalar"
    kinds: ClassVar[tuple] = ("reg", "reg", "reg")


@dataclass(frozen=True)
class SSUB(SADD):
    pass


@dataclass(frozen=True)
class SMUL(SADD):
    pass


@dataclass(frozen=True)
class BNE(Instruction):
    ra: int
    rb: int
    target: int
    klass: ClassVar[str] = "scalar"
    kinds: ClassVar[tuple] = ("reg", "reg", "label")


@dataclass(frozen=True)
class JMP(Instruction):
    target: int
    klass: ClassVar[str] = "scalar"
    kinds: ClassVar[tuple] = ("label",)


@dataclass(frozen=True)
class NOP(Instruction):
    klass: ClassVar[str] = "scalar"


@dataclass(frozen=True)
class HALT(Instruction):
    klass: ClassVar[str] = "scalar"


OPCODES: dict[str, type[Instruction]] = {
    cls.__name__: cls
    for cls in (
        MVM, VADD, VMAX, VRELU, VCOPY, VSCALE,
        SEND, RECV, LOAD, STORE,
        LI, SADD, SSUB, SMUL, BNE, JMP, NOP, HALT,
    )
}  # fmt: skip


@dataclass(frozen=True)
class GroupMember:
    xbar: int
    out_offset: int
    out_len: int


@dataclass(frozen=True)
class GroupEntry:
    group_id: int
    input_len: int
    members: tuple[GroupMember, ...]

    @property
    def out_bytes(self) -> int:
        return max(m.out_offset + 4 * m.out_len for m in self.members)


@dataclass
class CoreProgram:
    instructions: list[Instruction] = field(default_factory=list)
    groups: dict[int, GroupEntry] = field(default_factory=dict)
    weights: dict[int, np.ndarray] = field(default_factory=dict)
    # xbar_id -> seed for images declared with `.weights seed=`; others are file-backed
    weight_seeds: dict[int, int] = field(default_factory=dict)
    layers: list[int | None] = field(default_factory=list)

    def append(self, inst: Instruction, layer: int | None = None) -> None:
        self.instructions.append(inst)
        self.layers.append(layer)

    def __eq__(self, other):
        if not isinstance(other, CoreProgram):
            return NotImplemented
        return (
            self.instructions == other.instructions
            and self.groups == other.groups
            and self.layers == other.layers
            and self.weight_seeds == other.weight_seeds
            and self.weights.keys() == other.weights.keys()
            and all(np.array_equal(self.weights[k], other.weights[k]) for k in self.weights)
        )


@dataclass
class Program:
    cores: dict[int, CoreProgram] = field(default_factory=dict)
    # (global address, length) of the terminal result, when known
    output: tuple[int, int] | None = None

    def core(self, core_id: int) -> CoreProgram:
        if core_id not in self.cores:
            self.cores[core_id] = CoreProgram()
        return self.cores[core_id]


# -- static analysis ------------------------------------------------------------


def footprint(inst: Instruction, groups: dict[int, GroupEntry]):
    """Local-memory byte intervals ``(reads, writes)`` touched by ``inst``.

    Intervals are half-open ``(lo, hi)`` pairs.  Strided VCOPY reports its
    whole covering span as read.
    """
    op = type(inst)
    if op is MVM:
        g = groups[inst.group]
        reads = [(inst.src, inst.src + g.input_len)]
        writes = [
            (inst.dst + m.out_offset, inst.dst + m.out_offset + 4 * m.out_len) for m in g.members
        ]
        return reads, writes
    if op is VADD or op is VMAX:
        n = inst.len * WIDTH_BYTES[inst.width]
        return [(inst.src1, inst.src1 + n), (inst.src2, inst.src2 + n)], [(inst.dst, inst.dst + n)]
    if op is VRELU:
        return [(inst.src, inst.src + inst.len)], [(inst.dst, inst.dst + inst.len)]
    if op is VCOPY:
        span = (inst.len - 1) * inst.src_stride + 1
        return [(inst.src, inst.src + span)], [(inst.dst, inst.dst + inst.len)]
    if op is VSCALE:
        return [(inst.src, inst.src + 4 * inst.len)], [(inst.dst, inst.dst + inst.len)]
    if op is SEND or op is STORE:
        return [(inst.src, inst.src + inst.len)], []
    if op is RECV or op is LOAD:
        return [], [(inst.dst, inst.dst + inst.len)]
    return [], []


def register_footprint(inst: Instruction):
    """Scalar register indices ``(reads, writes)``."""
    op = type(inst)
    if op is LI:
        return (), (inst.rd,)
    if op in (SADD, SSUB, SMUL):
        return (inst.ra, inst.rb), (inst.rd,)
    if op is BNE:
        return (inst.ra, inst.rb), ()
    return (), ()


def validate_program(p: Program, cfg) -> list[str]:
    """Return a human-readable message per violated program invariant."""
    problems: list[str] = []
    mem = cfg.local_mem_bytes
    sends: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)
    recvs: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)

    for cid in sorted(p.cores):
        cp = p.cores[cid]
        where = f"core {cid}"
        if not 0 <= cid < cfg.num_cores:
            problems.append(f"{where}: core id outside the {cfg.mesh_width}x{cfg.mesh_height} mesh")
        if not cp.instructions or type(cp.instructions[-1]) is not HALT:
            problems.append(f"{where}: instruction list does not end with HALT")
        problems.extend(_check_groups(cp, cfg, where))
        for xbar, img in cp.weights.items():
            if not 0 <= xbar < cfg.xbars_per_core:
                problems.append(f"{where}: weight image for xbar {xbar} out of range")
            elif img.shape != (cfg.xbar_rows, cfg.xbar_cols):
                problems.append(f"{where}: weight image for xbar {xbar} has shape {img.shape}")

        n = len(cp.instructions)
        for i, inst in enumerate(cp.instructions):
            at = f"{where} inst {i} ({inst.mnemonic})"
            op = type(inst)
            for f, kind in zip(fields(inst), inst.kinds):
                v = getattr(inst, f.name)
                if kind in ("addr", "tag", "stride", "mult") and v < 0:
                    problems.append(f"{at}: negative {f.name}")
                elif kind == "len" and v < 1:
                    problems.append(f"{at}: len must be >= 1")
                elif kind == "reg" and not 0 <= v < cfg.num_scalar_regs:
                    problems.append(f"{at}: register r{v} out of range")
                elif kind == "label" and not 0 <= v < n:
                    problems.append(f"{at}: branch target {v} out of range")
                elif kind == "core" and not 0 <= v < cfg.num_cores:
                    problems.append(f"{at}: core {v} outside the mesh")
                elif kind == "shift" and not 0 <= v <= 31:
                    problems.append(f"{at}: shift must be in [0, 31]")
            if op in (LOAD, STORE) and inst.gaddr < 0:
                problems.append(f"{at}: negative global address")
            if op is MVM and inst.group not in cp.groups:
                problems.append(f"{at}: group {inst.group} not in the group table")
                continue
            if op in (VADD, VMAX) and inst.width not in WIDTH_BYTES:
                problems.append(f"{at}: unknown element width {inst.width!r}")
                continue
            reads, writes = footprint(inst, cp.groups)
            for lo, hi in reads + writes:
                if lo < 0 or hi > mem:
                    problems.append(
                        f"{at}: local range [{lo}, {hi}) outside local memory of {mem} bytes"
                    )
            if op is SEND:
                if inst.dst_core == cid:
                    problems.append(f"{at}: SEND to self")
                sends[(cid, inst.dst_core)].append((inst.tag, inst.len))
            elif op is RECV:
                if inst.src_core == cid:
                    problems.append(f"{at}: RECV from self")
                recvs[(inst.src_core, cid)].append((inst.tag, inst.len))

    for pair in sorted(set(sends) | set(recvs)):
        s, r = sends.get(pair, []), recvs.get(pair, [])
        a, b = pair
        stags = {t for t, _ in s}
        rtags = {t for t, _ in r}
        for t in sorted(stags - rtags):
            problems.append(f"unmatched SEND {a}->{b} tag {t}")
        for t in sorted(rtags - stags):
            problems.append(f"unmatched RECV {a}->{b} tag {t}")
        if len(stags) != len(s) or len(rtags) != len(r):
            problems.append(f"duplicate transfer tag on {a}->{b}")
        common = stags & rtags
        s_order = [x for x in s if x[0] in common]
        r_order = [x for x in r if x[0] in common]
        if [t for t, _ in s_order] != [t for t, _ in r_order]:
            problems.append(f"transfer order differs between SEND and RECV on {a}->{b}")
        slen, rlen = dict(s), dict(r)
        for t in sorted(common):
            if slen[t] != rlen[t]:
                problems.append(f"length mismatch on {a}->{b} tag {t}: {slen[t]} vs {rlen[t]}")
    return problems


def _check_groups(cp: CoreProgram, cfg, where: str) -> list[str]:
    problems = []
    for gid, g in sorted(cp.groups.items()):
        at = f"{where} group {gid}"
        if g.group_id != gid:
            problems.append(f"{at}: id mismatch")
        if not g.members:
            problems.append(f"{at}: no members")
            continue
        if not 1 <= g.input_len <= cfg.xbar_rows:
            problems.append(f"{at}: input_len {g.input_len} not in [1, {cfg.xbar_rows}]")
        xbars = [m.xbar for m in g.members]
        if len(set(xbars)) != len(xbars):
            problems.append(f"{at}: duplicate crossbar")
        spans = []
        for m in g.members:
            if not 0 <= m.xbar < cfg.xbars_per_core:
                problems.append(f"{at}: xbar {m.xbar} >= xbars_per_core")
            if not 1 <= m.out_len <= cfg.xbar_cols:
                problems.append(f"{at}: out_len {m.out_len} not in [1, {cfg.xbar_cols}]")
            if m.out_offset < 0:
                problems.append(f"{at}: negative out_offset")
            spans.append((m.out_offset, m.out_offset + 4 * m.out_len))
        spans.sort()
        for (_, hi), (lo, _) in zip(spans, spans[1:]):
            if lo < hi:
                problems.append(f"{at}: member output ranges overlap")
                break
        if any(m.xbar not in cp.weights for m in g.members):
            problems.append(f"{at}: member crossbar has no weight image")
    return problems
