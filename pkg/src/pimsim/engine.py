"""Cycle-level, functionally exact execution of a Program.

Each core fetches in order into a re-order buffer, dispatches oldest-first
up to ``dispatch_width`` instructions per cycle and commits in order.  An
instruction dispatches once it has no byte-interval data hazard (RAW, WAW,
WAR) against any older unfinished entry and its unit is free:

* vector, scalar and transfer units run one instruction at a time, and
  transfers leave the unit in program order;
* the matrix unit runs any number of MVMs concurrently as long as their
  groups differ (an MVM on a busy group is a structure hazard).

Time advances from event to event, but every timestamp is an integer cycle
and every state change happens exactly at the cycle a per-cycle stepper
would produce, so results match naive cycle-by-cycle simulation.

Memory effects are applied at dispatch (SEND/RECV at rendezvous).  The
hazard rules guarantee nothing else touches those bytes until completion.
"""

from __future__ import annotations

import heapq
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from . import isa
from .isa import (
    BNE, HALT, JMP, LI, LOAD, MVM, NOP, RECV, SADD, SEND, SMUL, SSUB, STORE,
    VADD, VCOPY, VMAX, VRELU, VSCALE,
)  # fmt: skip
from .nn import requantize
from .noc import Mesh, link_hops, transfer_cycles

WAITING, EXECUTING, DONE = 0, 1, 2
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
_WRAP = 1 << 64


class SimulationError(RuntimeError):
    """Address fault or arithmetic overflow inside a running program."""


class DeadlockError(RuntimeError):
    """No further event can occur while some core has not halted."""

    def __init__(self, cycle: int, dump: dict):
        self.cycle = cycle
        self.dump = dump
        blocked = [f"core {c}" for c, d in dump["cores"].items() if not d["halted"]]
        super().__init__(f"deadlock at cycle {cycle}: {', '.join(blocked)} cannot make progress")


@dataclass
class SimResult:
    total_cycles: int
    num_cores: int
    halt_cycles: dict[int, int]
    busy_cycles: dict[int, dict[str, int]]
    gmem: bytes
    # (core, index, class, mnemonic, issue, complete, layer) per executed instruction
    records: list[tuple]
    tallies: dict[str, int]
    inst_counts: dict[str, int]
    links: list | None = None
    output: tuple[int, int] | None = None

    def output_bytes(self) -> bytes:
        gaddr, n = self.output
        return self.gmem[gaddr : gaddr + n]


class _Static:
    """Per-instruction facts computed once per program."""

    __slots__ = ("inst", "klass", "reads", "writes", "rreads", "rwrites", "group", "layer")

    def __init__(self, inst, groups, layer):
        self.inst = inst
        self.klass = inst.klass
        self.reads, self.writes = isa.footprint(inst, groups)
        self.rreads, self.rwrites = isa.register_footprint(inst)
        self.group = inst.group if type(inst) is MVM else None
        self.layer = layer


class _Entry:
    __slots__ = ("s", "idx", "status", "issue", "complete", "target")

    def __init__(self, s: _Static, idx: int):
        self.s = s
        self.idx = idx
        self.status = WAITING
        self.issue = None
        self.complete = None
        self.target = None


class _Core:
    def __init__(self, cid, cp: isa.CoreProgram, cfg):
        self.cid = cid
        self.cp = cp
        layers = cp.layers if len(cp.layers) == len(cp.instructions) else [None] * len(
            cp.instructions
        )
        self.static = [_Static(i, cp.groups, l) for i, l in zip(cp.instructions, layers)]
        self.mem = np.zeros(cfg.local_mem_bytes, dtype=np.uint8)
        self.regs = [0] * cfg.num_scalar_regs
        self.weights = {x: w.astype(np.int64) for x, w in cp.weights.items()}
        self.pc = 0
        self.rob: list[_Entry] = []
        self.fetch_stopped = False
        self.branch: _Entry | None = None
        self.halted_at: int | None = None
        self.unit = {"vector": None, "scalar": None, "transfer": None}
        self.active_groups: set[int] = set()
        self.executed: list[_Entry] = []


def _overlap(a, b) -> bool:
    for lo, hi in a:
        for lo2, hi2 in b:
            if lo < hi2 and lo2 < hi:
                return True
    return False


def _regs_overlap(a, b) -> bool:
    return any(r in b for r in a)


class Engine:
    def __init__(self, program: isa.Program, cfg, gmem_init: bytes = b"", trace: bool = False):
        self.cfg = cfg
        self.t = cfg.timing
        self.program = program
        self.trace = trace
        self.mesh = Mesh.from_config(cfg, record=trace)
        self.cores = {cid: _Core(cid, cp, cfg) for cid, cp in sorted(program.cores.items())}
        need = len(gmem_init)
        for cp in program.cores.values():
            for inst in cp.instructions:
                if type(inst) in (LOAD, STORE):
                    need = max(need, inst.gaddr + inst.len)
        if program.output is not None:
            need = max(need, sum(program.output))
        self.gmem = np.zeros(need, dtype=np.uint8)
        self.gmem[: len(gmem_init)] = np.frombuffer(bytes(gmem_init), dtype=np.uint8)
        self.events: list[tuple[int, int]] = []
        self.now = 0
        # (src, dst, tag) -> FIFO of dispatched, unmatched SEND / RECV entries
        self.sends = defaultdict(deque)
        self.recvs = defaultdict(deque)
        self.requests: list[tuple] = []
        self.tallies = dict.fromkeys(
            ("xbar_activations", "adc_samples", "vec_elems", "noc_byte_hops", "mem_bytes",
             "scalar_insts"),
            0,
        )  # fmt: skip

    # -- main loop ------------------------------------------------------------------

    def run(self) -> SimResult:
        for cid in self.cores:
            heapq.heappush(self.events, (0, cid))
        while self.events:
            now = self.events[0][0]
            if now - self.now > self.cfg.watchdog_cycles:
                raise DeadlockError(self.now, self._dump())
            self.now = now
            woken = set()
            while self.events and self.events[0][0] == now:
                woken.add(heapq.heappop(self.events)[1])
            for cid in sorted(woken):
                self._step(self.cores[cid])
            if self.requests:
                self._arbitrate()
        if any(c.halted_at is None for c in self.cores.values()):
            raise DeadlockError(self.now, self._dump())
        return self._result()

    def _wake(self, when: int, cid: int) -> None:
        heapq.heappush(self.events, (when, cid))

    def _step(self, core: _Core) -> None:
        now = self.now
        if core.halted_at is not None:
            return
        for e in core.rob:
            if e.status == EXECUTING and e.complete is not None and e.complete <= now:
                e.status = DONE
                k = e.s.klass
                if e.s.group is not None:
                    core.active_groups.discard(e.s.group)
                elif core.unit.get(k) is e:
                    core.unit[k] = None
                if core.branch is e:
                    core.branch = None
                    core.pc = e.target
        while core.rob and core.rob[0].status == DONE:
            e = core.rob.pop(0)
            if type(e.s.inst) is HALT:
                core.halted_at = now
                core.rob.clear()
                return
        n = len(core.static)
        while (
            len(core.rob) < self.cfg.rob_size
            and not core.fetch_stopped
            and core.branch is None
            and core.pc < n
        ):
            e = _Entry(core.static[core.pc], core.pc)
            core.rob.append(e)
            core.pc += 1
            op = type(e.s.inst)
            if op is HALT:
                core.fetch_stopped = True
            elif op is BNE or op is JMP:
                core.branch = e
        self._dispatch(core)

    def _dispatch(self, core: _Core) -> None:
        budget = self.cfg.dispatch_width
        older: list[_Entry] = []
        for e in core.rob:
            if e.status == DONE:
                continue
            if e.status == WAITING:
                if budget == 0:
                    self._wake(self.now + 1, core.cid)
                    break
                if self._eligible(core, e, older):
                    self._issue(core, e)
                    budget -= 1
            older.append(e)

    def _eligible(self, core: _Core, e: _Entry, older: list[_Entry]) -> bool:
        s = e.s
        k = s.klass
        if s.group is not None:
            if s.group in core.active_groups:
                return False
        elif core.unit[k] is not None:
            return False
        for o in older:
            os_ = o.s
            if k == "transfer" and os_.klass == "transfer" and o.status == WAITING:
                return False
            if s.group is not None and os_.group == s.group:
                return False
            if _overlap(s.reads, os_.writes) or _overlap(s.writes, os_.writes):
                return False
            if _overlap(s.writes, os_.reads):
                return False
            if (s.rreads or s.rwrites) and (os_.rreads or os_.rwrites):
                if (
                    _regs_overlap(s.rreads, os_.rwrites)
                    or _regs_overlap(s.rwrites, os_.rwrites)
                    or _regs_overlap(s.rwrites, os_.rreads)
                ):
                    return False
        return True

    # -- execution ------------------------------------------------------------------

    def _issue(self, core: _Core, e: _Entry) -> None:
        now = self.now
        e.status = EXECUTING
        e.issue = now
        core.executed.append(e)
        s = e.s
        inst = s.inst
        op = type(inst)
        if s.group is not None:
            core.active_groups.add(s.group)
        else:
            core.unit[s.klass] = e
        if s.klass == "transfer":
            self._transfer_dispatched(core, e)
            return
        if op is MVM:
            latency = self._exec_mvm(core, inst)
        elif s.klass == "vector":
            latency = self._exec_vector(core, inst)
        else:
            latency = self._exec_scalar(core, e)
        e.complete = now + latency
        self._wake(e.complete, core.cid)

    def _check(self, core: _Core, lo: int, hi: int) -> None:
        if lo < 0 or hi > self.cfg.local_mem_bytes:
            raise SimulationError(f"core {core.cid}: address fault at [{lo}, {hi})")

    def _exec_mvm(self, core: _Core, inst) -> int:
        g = core.cp.groups[inst.group]
        self._check(core, inst.src, inst.src + g.input_len)
        x = core.mem[inst.src : inst.src + g.input_len].view(np.int8).astype(np.int64)
        t = self.t
        latency = 0
        for m in g.members:
            w = core.weights[m.xbar]
            y = x @ w[: g.input_len, : m.out_len]
            if y.size and (y.min() < INT32_MIN or y.max() > INT32_MAX):
                raise SimulationError(f"core {core.cid}: int32 overflow in MVM g{inst.group}")
            lo = inst.dst + m.out_offset
            self._check(core, lo, lo + 4 * m.out_len)
            core.mem[lo : lo + 4 * m.out_len] = y.astype("<i4").view(np.uint8)
            cyc = t.mvm_setup_cycles + -(-m.out_len // self.cfg.adcs_per_xbar) * t.adc_cycles_per_sample
            latency = max(latency, cyc)
            self.tallies["xbar_activations"] += 1
            self.tallies["adc_samples"] += m.out_len
        return latency

    def _view(self, core, addr, n, width):
        nbytes = n * width
        self._check(core, addr, addr + nbytes)
        raw = core.mem[addr : addr + nbytes]
        return raw.view("<i4") if width == 4 else raw.view(np.int8)

    def _store(self, core, addr, values, width):
        data = np.ascontiguousarray(values.astype("<i4" if width == 4 else np.int8))
        core.mem[addr : addr + data.nbytes] = data.view(np.uint8)

    def _exec_vector(self, core: _Core, inst) -> int:
        op = type(inst)
        n = inst.len
        if op is VADD or op is VMAX:
            w = isa.WIDTH_BYTES[inst.width]
            a = self._view(core, inst.src1, n, w).astype(np.int64)
            b = self._view(core, inst.src2, n, w).astype(np.int64)
            self._check(core, inst.dst, inst.dst + n * w)
            if op is VMAX:
                r = np.maximum(a, b)
            elif w == 1:
                r = np.clip(a + b, -128, 127)
            else:
                r = a + b
                if r.min() < INT32_MIN or r.max() > INT32_MAX:
                    raise SimulationError(f"core {core.cid}: int32 overflow in VADD.w")
            self._store(core, inst.dst, r, w)
            self.tallies["vec_elems"] += n
        elif op is VRELU:
            a = self._view(core, inst.src, n, 1)
            self._check(core, inst.dst, inst.dst + n)
            self._store(core, inst.dst, np.maximum(a, 0), 1)
            self.tallies["vec_elems"] += n
        elif op is VCOPY:
            span = (n - 1) * inst.src_stride + 1
            self._check(core, inst.src, inst.src + span)
            self._check(core, inst.dst, inst.dst + n)
            if inst.src_stride == 0:
                data = np.full(n, core.mem[inst.src], dtype=np.uint8)
            else:
                data = core.mem[inst.src : inst.src + span : inst.src_stride].copy()
            core.mem[inst.dst : inst.dst + n] = data
            self.tallies["mem_bytes"] += n
        elif op is VSCALE:
            a = self._view(core, inst.src, n, 4)
            self._check(core, inst.dst, inst.dst + n)
            self._store(core, inst.dst, requantize(a, inst.multiplier, inst.shift), 1)
            self.tallies["vec_elems"] += n
        else:
            raise SimulationError(f"unknown vector instruction {inst}")
        return self.t.vec_setup_cycles + -(-n // self.t.vec_elems_per_cycle)

    def _exec_scalar(self, core: _Core, e: _Entry) -> int:
        inst = e.s.inst
        op = type(inst)
        r = core.regs
        if op is LI:
            r[inst.rd] = _wrap(inst.imm)
        elif op is SADD:
            r[inst.rd] = _wrap(r[inst.ra] + r[inst.rb])
        elif op is SSUB:
            r[inst.rd] = _wrap(r[inst.ra] - r[inst.rb])
        elif op is SMUL:
            r[inst.rd] = _wrap(r[inst.ra] * r[inst.rb])
        elif op is BNE:
            e.target = inst.target if r[inst.ra] != r[inst.rb] else e.idx + 1
        elif op is JMP:
            e.target = inst.target
        if op is not HALT:
            self.tallies["scalar_insts"] += 1
        return self.t.scalar_cycles

    # -- transfers ------------------------------------------------------------------

    def _transfer_dispatched(self, core: _Core, e: _Entry) -> None:
        inst = e.s.inst
        op = type(inst)
        if op is LOAD or op is STORE:
            self.requests.append((core.cid, len(self.requests), op, core, e, None, None))
            return
        if op is SEND:
            key = (core.cid, inst.dst_core, inst.tag)
            mine, theirs = self.sends, self.recvs
        else:
            key = (inst.src_core, core.cid, inst.tag)
            mine, theirs = self.recvs, self.sends
        if theirs[key]:
            peer_core, peer = theirs[key].popleft()
            if op is SEND:
                self._pair(core, e, peer_core, peer)
            else:
                self._pair(peer_core, peer, core, e)
        else:
            mine[key].append((core, e))

    def _pair(self, score, send, rcore, recv) -> None:
        self.requests.append((score.cid, len(self.requests), SEND, score, send, rcore, recv))

    def _arbitrate(self) -> None:
        """Book routes for transfers that became ready this cycle.

        Ties at one cycle are broken by sender core id, then request order.
        """
        reqs = sorted(self.requests, key=lambda r: (r[0], r[1]))
        self.requests = []
        for _sender, _seq, op, core, e, rcore, recv in reqs:
            inst = e.s.inst
            if op is SEND:
                rinst = recv.s.inst
                if rinst.len != inst.len:
                    raise SimulationError(
                        f"SEND/RECV length mismatch {core.cid}->{rcore.cid} tag {inst.tag}"
                    )
                self._check(core, inst.src, inst.src + inst.len)
                self._check(rcore, rinst.dst, rinst.dst + inst.len)
                rcore.mem[rinst.dst : rinst.dst + inst.len] = core.mem[inst.src : inst.src + inst.len]
                path = self.mesh.path(core.cid, rcore.cid)
                dur = transfer_cycles(inst.len, link_hops(path), self.t)
                ends = [(core, e), (rcore, recv)]
            else:
                if op is LOAD:
                    self._check(core, inst.dst, inst.dst + inst.len)
                    core.mem[inst.dst : inst.dst + inst.len] = self.gmem[inst.gaddr : inst.gaddr + inst.len]
                    path = self.mesh.path(None, core.cid)
                else:
                    self._check(core, inst.src, inst.src + inst.len)
                    self.gmem[inst.gaddr : inst.gaddr + inst.len] = core.mem[inst.src : inst.src + inst.len]
                    path = self.mesh.path(core.cid, None)
                dur = transfer_cycles(inst.len, link_hops(path), self.t, gmem=True)
                self.tallies["mem_bytes"] += inst.len
                ends = [(core, e)]
            self.tallies["noc_byte_hops"] += inst.len * link_hops(path)
            _start, end = self.mesh.reserve(path, self.now, dur)
            for c, ent in ends:
                ent.complete = end
                self._wake(end, c.cid)

    # -- reporting ------------------------------------------------------------------

    def _dump(self) -> dict:
        cores = {}
        for cid, c in self.cores.items():
            cores[cid] = {
                "halted": c.halted_at is not None,
                "pc": c.pc,
                "rob": [
                    {
                        "index": e.idx,
                        "inst": e.s.inst.mnemonic + " " + ", ".join(map(str, e.s.inst.operands())),
                        "status": ("waiting", "executing", "done")[e.status],
                        "issue": e.issue,
                    }
                    for e in c.rob
                ],
            }
        blocked = []
        for table, kind in ((self.sends, "SEND"), (self.recvs, "RECV")):
            for (src, dst, tag), q in sorted(table.items()):
                for _c, e in q:
                    blocked.append(
                        {"kind": kind, "src": src, "dst": dst, "tag": tag, "since": e.issue}
                    )
        return {"cycle": self.now, "cores": cores, "blocked_transfers": blocked}

    def _result(self) -> SimResult:
        records = []
        busy: dict[int, dict[str, int]] = {}
        counts = dict.fromkeys(isa.CLASSES, 0)
        for cid, c in self.cores.items():
            per_class = defaultdict(list)
            for e in c.executed:
                s = e.s
                records.append((cid, e.idx, s.klass, s.inst.mnemonic, e.issue, e.complete, s.layer))
                per_class[s.klass].append((e.issue, e.complete))
                counts[s.klass] += 1
            busy[cid] = {k: union_length(per_class.get(k, [])) for k in isa.CLASSES}
        halts = {cid: c.halted_at for cid, c in self.cores.items()}
        return SimResult(
            total_cycles=max(halts.values(), default=0),
            num_cores=self.cfg.num_cores,
            halt_cycles=halts,
            busy_cycles=busy,
            gmem=self.gmem.tobytes(),
            records=records,
            tallies=dict(self.tallies),
            inst_counts=counts,
            links=list(self.mesh.history) if self.trace else None,
            output=self.program.output,
        )


def _wrap(v: int) -> int:
    v %= _WRAP
    return v - _WRAP if v >= 1 << 63 else v


def union_length(intervals) -> int:
    total = 0
    end = None
    for lo, hi in sorted(intervals):
        if end is None or lo > end:
            total += hi - lo
            end = hi
        elif hi > end:
            total += hi - end
            end = hi
    return total


def simulate(program: isa.Program, cfg, gmem_init: bytes = b"", trace: bool = False) -> SimResult:
    """Run ``program`` to completion; raises DeadlockError / SimulationError."""
    return Engine(program, cfg, gmem_init, trace).run()
