"""Textual assembly for programs.

Line-oriented; ``#`` starts a comment.  Besides ``.core``, ``.group`` and
``.weights`` two bookkeeping directives are understood: ``.layer N`` (or
``.layer -``) tags the following instructions with a network layer, and
``.output gaddr=A len=N`` records where the terminal result is stored.
See ``docs/assembly.md`` for the grammar.
"""

from __future__ import annotations

import os
import re
import shlex
from dataclasses import fields

import numpy as np

from .isa import OPCODES, GroupEntry, GroupMember, Instruction, Program
from .nn import generate_weights


class AsmError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


_LABEL_DEF = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.*)$")
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(lineno, f"expected integer, got {tok!r}") from None


def _keyvals(tokens: list[str], lineno: int) -> list[tuple[str, str]]:
    out = []
    for tok in tokens:
        if "=" not in tok:
            raise AsmError(lineno, f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out.append((k, v))
    return out


def parse_asm(text: str, xbar_shape: tuple[int, int] | None = None, base_dir=None) -> Program:
    """Parse assembly source into a Program.

    ``xbar_shape`` (rows, cols) is needed only when ``.weights`` directives
    appear; file-backed images are resolved relative to ``base_dir``.
    """
    prog = Program()
    core = None
    cid = None
    layer = None
    pending: list[tuple[int, str, list[str]]] = []  # (lineno, mnemonic, operand tokens)
    labels: dict[str, int] = {}

    def finish_core():
        if core is None:
            return
        for lineno, mnem, toks in pending:
            core.instructions.append(_build(mnem, toks, labels, lineno))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("."):
            parts = shlex.split(line)
            head, rest = parts[0], parts[1:]
            if head == ".core":
                finish_core()
                if len(rest) != 1:
                    raise AsmError(lineno, ".core takes one integer")
                cid = _int(rest[0], lineno)
                if cid in prog.cores:
                    raise AsmError(lineno, f"duplicate .core {cid}")
                core = prog.core(cid)
                pending, labels, layer = [], {}, None
            elif head == ".output":
                kv = dict(_keyvals(rest, lineno))
                if set(kv) != {"gaddr", "len"}:
                    raise AsmError(lineno, ".output needs gaddr= and len=")
                prog.output = (_int(kv["gaddr"], lineno), _int(kv["len"], lineno))
            elif core is None:
                raise AsmError(lineno, f"{head} outside a .core block")
            elif head == ".layer":
                if len(rest) != 1:
                    raise AsmError(lineno, ".layer takes one argument")
                layer = None if rest[0] == "-" else _int(rest[0], lineno)
            elif head == ".group":
                _parse_group(core, rest, lineno)
            elif head == ".weights":
                _parse_weights(core, rest, lineno, xbar_shape, base_dir)
            else:
                raise AsmError(lineno, f"unknown directive {head}")
            continue
        if core is None:
            raise AsmError(lineno, "instruction outside a .core block")
        m = _LABEL_DEF.match(line)
        if m and m.group(1).upper() not in OPCODES:
            name, line = m.group(1), m.group(2).strip()
            if name in labels:
                raise AsmError(lineno, f"duplicate label {name}")
            labels[name] = len(pending)
            if not line:
                raise AsmError(lineno, "label must precede an instruction")
        mnem, _, ops = line.partition(" ")
        toks = [t.strip() for t in ops.split(",")] if ops.strip() else []
        if any(not t for t in toks):
            raise AsmError(lineno, "empty operand")
        pending.append((lineno, mnem, toks))
        core.layers.append(layer)
    finish_core()
    if not prog.cores:
        raise AsmError(0, "no .core block")
    return prog


def _parse_group(core, rest: list[str], lineno: int) -> None:
    if not rest:
        raise AsmError(lineno, ".group needs an id")
    gid = _int(rest[0], lineno)
    kv = _keyvals(rest[1:], lineno)
    if not kv or kv[0][0] != "in" or (len(kv) - 1) % 3 or len(kv) < 4:
        raise AsmError(lineno, ".group syntax: .group ID in=N (xbar=X off=O out=L)+")
    members = []
    for i in range(1, len(kv), 3):
        keys = [k for k, _ in kv[i : i + 3]]
        if keys != ["xbar", "off", "out"]:
            raise AsmError(lineno, f"bad member fields {keys}")
        members.append(GroupMember(*(_int(v, lineno) for _, v in kv[i : i + 3])))
    if gid in core.groups:
        raise AsmError(lineno, f"duplicate group id {gid}")
    core.groups[gid] = GroupEntry(gid, _int(kv[0][1], lineno), tuple(members))


def _parse_weights(core, rest, lineno, xbar_shape, base_dir) -> None:
    kv = dict(_keyvals(rest, lineno))
    if "xbar" not in kv or len(kv) != 2 or not ({"file", "seed"} & kv.keys()):
        raise AsmError(lineno, ".weights syntax: .weights xbar=N (file=PATH | seed=S)")
    if xbar_shape is None:
        raise AsmError(lineno, "crossbar geometry needed to load weights")
    rows, cols = xbar_shape
    xbar = _int(kv["xbar"], lineno)
    if xbar in core.weights:
        raise AsmError(lineno, f"duplicate weights for xbar {xbar}")
    if "seed" in kv:
        seed = _int(kv["seed"], lineno)
        core.weights[xbar] = generate_weights(seed, rows, cols)
        core.weight_seeds[xbar] = seed
        return
    path = os.path.join(base_dir or ".", kv["file"])
    try:
        data = np.fromfile(path, dtype=np.int8)
    except OSError as exc:
        raise AsmError(lineno, f"cannot read {path}: {exc}") from None
    if data.size != rows * cols:
        raise AsmError(lineno, f"{path}: expected {rows * cols} bytes, found {data.size}")
    core.weights[xbar] = data.reshape(rows, cols)


def _build(mnem: str, toks: list[str], labels: dict[str, int], lineno: int) -> Instruction:
    name, _, width = mnem.upper().partition(".")
    cls = OPCODES.get(name)
    if cls is None:
        raise AsmError(lineno, f"unknown mnemonic {mnem}")
    kw = {}
    if width:
        if "width" not in {f.name for f in fields(cls)} or width.lower() not in ("b", "w"):
            raise AsmError(lineno, f"bad width suffix on {mnem}")
        kw["width"] = width.lower()
    names = [f.name for f in fields(cls) if f.name != "width"]
    required = len(cls.kinds)
    if len(toks) != required:
        raise AsmError(lineno, f"{mnem} takes {required} operands, got {len(toks)}")
    for fname, kind, tok in zip(names, cls.kinds, toks):
        if kind == "group":
            if not tok.lower().startswith("g"):
                raise AsmError(lineno, f"expected group operand g<N>, got {tok!r}")
            kw[fname] = _int(tok[1:], lineno)
        elif kind == "reg":
            if not tok.lower().startswith("r"):
                raise AsmError(lineno, f"expected register operand r<N>, got {tok!r}")
            kw[fname] = _int(tok[1:], lineno)
        elif kind == "label":
            if not _IDENT.match(tok):
                raise AsmError(lineno, f"bad label {tok!r}")
            if tok not in labels:
                raise AsmError(lineno, f"undefined label {tok}")
            kw[fname] = labels[tok]
        else:
            kw[fname] = _int(tok, lineno)
    return cls(**kw)


def _fmt(kind: str, value: int) -> str:
    if kind == "group":
        return f"g{value}"
    if kind == "reg":
        return f"r{value}"
    if kind == "label":
        return f"L{value}"
    if kind == "addr":
        return hex(value)
    return str(value)


def weight_filename(core_id: int, xbar: int) -> str:
    return f"weights/c{core_id}_x{xbar}.bin"


def emit_asm(p: Program) -> str:
    """Canonical assembly text for ``p``."""
    out = []
    if p.output is not None:
        out.append(f".output gaddr={hex(p.output[0])} len={p.output[1]}")
    for cid in sorted(p.cores):
        cp = p.cores[cid]
        out.append(f".core {cid}")
        for gid in sorted(cp.groups):
            g = cp.groups[gid]
            mems = " ".join(f"xbar={m.xbar} off={m.out_offset} out={m.out_len}" for m in g.members)
            out.append(f".group {gid} in={g.input_len} {mems}")
        for xbar in sorted(cp.weights):
            if xbar in cp.weight_seeds:
                out.append(f".weights xbar={xbar} seed={cp.weight_seeds[xbar]}")
            else:
                out.append(f'.weights xbar={xbar} file="{weight_filename(cid, xbar)}"')
        targets = {
            inst.target for inst in cp.instructions if "label" in type(inst).kinds
        }
        layer = None
        layers = cp.layers if len(cp.layers) == len(cp.instructions) else [None] * len(
            cp.instructions
        )
        for i, (inst, tag) in enumerate(zip(cp.instructions, layers)):
            if tag != layer:
                out.append(f".layer {'-' if tag is None else tag}")
                layer = tag
            ops = ", ".join(_fmt(k, v) for k, v in zip(inst.kinds, inst.operands()))
            prefix = f"L{i}: " if i in targets else ""
            out.append(f"{prefix}{inst.mnemonic} {ops}".rstrip())
    return "\n".join(out) + "\n"


def write_program(p: Program, out_dir, name: str = "program.asm") -> str:
    """Write assembly plus file-backed weight images below ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "weights"), exist_ok=True)
    for cid, cp in p.cores.items():
        for xbar, img in cp.weights.items():
            if xbar not in cp.weight_seeds:
                np.ascontiguousarray(img, dtype=np.int8).tofile(
                    os.path.join(out_dir, weight_filename(cid, xbar))
                )
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(emit_asm(p))
    return path


def load_program(path, xbar_shape=None) -> Program:
    with open(path) as fh:
        return parse_asm(fh.read(), xbar_shape, base_dir=os.path.dirname(os.path.abspath(path)))
