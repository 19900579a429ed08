"""Lowering of a placed network into per-core instruction streams.

Internal activation layout is HWC (pixel-major) so that one convolution
window row is a single contiguous byte run; weight matrices are row-permuted
to match.  The network input arrives in CHW order and the terminal result
is written back in CHW order.

Code is emitted by a single global walk over output rows.  Each pass visits
the layers in network order and emits at most one row per layer when the
producer rows it needs exist, so producer and consumer rows interleave and
cores on different layers can run as a pipeline.  Every SEND/RECV pair is
appended to both endpoints at the same point of that walk; with in-order
transfer units this rules out circular waits.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .. import isa
from ..isa import HALT, LOAD, MVM, RECV, SEND, STORE, VADD, VCOPY, VMAX, VRELU, VSCALE
from ..nn import Layer, Network, as_chw, round_div, round_shift
from .errors import CompileError
from .mapping import Placement
from .memory import allocate_memory

GMEM_ALIGN = 64
MAX_ACCUMULATED_PRODUCTS = 1 << 15


@dataclass
class MatrixLayer:
    """A layer executed on crossbars, in convolution form.

    FC is a convolution whose kernel covers the whole input map; average
    pooling is a convolution with a fixed 0/1 channel-diagonal kernel.
    """

    layer: Layer
    c_in: int
    h_in: int
    w_in: int
    kh: int
    kw: int
    stride: int
    pad: int
    k: int
    ho: int
    wo: int
    weights: np.ndarray  # rows permuted to (ky, kx, c) window order
    multiplier: int
    shift: int

    @property
    def rows(self) -> int:
        return self.weights.shape[0]


def avg_pool_quant(window: int) -> tuple[int, int]:
    """(multiplier, shift) whose requantization equals rounded division by ``window``.

    Checked exhaustively over every reachable window sum.
    """
    xs = np.arange(-128 * window, 127 * window + 1, dtype=np.int64)
    want = round_div(xs, window)
    for shift in range(32):
        for mult in sorted({(1 << shift) // window, -(-(1 << shift) // window)}):
            if 0 < mult < 2**31 and np.array_equal(round_shift(xs * mult, shift), want):
                return mult, shift
    raise CompileError(f"no fixed-point reciprocal reproduces average pooling over {window}")


def hwc_permutation(c: int, kh: int, kw: int) -> np.ndarray:
    """Index map from (ky, kx, c) window order to (c, ky, kx) matrix rows."""
    return np.arange(c * kh * kw).reshape(c, kh, kw).transpose(1, 2, 0).reshape(-1)


def lower_matrix_layers(net: Network) -> dict[int, MatrixLayer]:
    out = {}
    for layer in net.layers:
        if layer.kind not in ("conv", "fc") and not (
            layer.kind == "pool" and layer.pool_kind == "avg"
        ):
            continue
        c, h, w = as_chw(layer.in_shape)
        if layer.kind == "conv":
            kh, kw = layer.kernel
            stride, pad = layer.stride, layer.padding
            k, ho, wo = layer.out_shape
            mat, mult, shift = layer.weights, layer.quant.multiplier, layer.quant.shift
        elif layer.kind == "fc":
            kh, kw, stride, pad = h, w, 1, 0
            k, ho, wo = layer.out_features, 1, 1
            mat, mult, shift = layer.weights, layer.quant.multiplier, layer.quant.shift
        else:
            kh, kw = layer.kernel
            stride, pad = layer.stride, 0
            k, ho, wo = layer.out_shape
            mat = np.zeros((c * kh * kw, c), dtype=np.int8)
            for ch in range(c):
                mat[ch * kh * kw : (ch + 1) * kh * kw, ch] = 1
            mult, shift = avg_pool_quant(kh * kw)
        if mat.shape[0] > MAX_ACCUMULATED_PRODUCTS:
            raise CompileError(f"layer {layer.id}: {mat.shape[0]} products may overflow int32")
        perm = hwc_permutation(c, kh, kw)
        out[layer.id] = MatrixLayer(
            layer, c, h, w, kh, kw, stride, pad, k, ho, wo,
            np.ascontiguousarray(mat[perm]), mult, shift,
        )  # fmt: skip
    return out


@dataclass(frozen=True)
class Target:
    """Where a producer's pixels land on one core.

    Pixel ``(y, x)`` of the producer goes to
    ``addr(buf) + ((y + pad) * width + x + pad) * ctot + coff``.
    """

    core: int
    buf: tuple
    pad: int
    width: int
    ctot: int
    coff: int
    alias: bool


class Codegen:
    def __init__(self, net: Network, lowered: dict[int, MatrixLayer], placement: Placement, cfg):
        self.net = net
        self.lowered = lowered
        self.placement = placement
        self.cfg = cfg
        self.tilings = {t.layer_id: t for t in placement.tilings}
        self.group_plans = placement.groups()
        # (core, layer, row_block) -> GroupPlan
        self.group_of = {
            (core, g.layer_id, g.row_block): g
            for core, gs in self.group_plans.items()
            for g in gs
        }
        self.program = isa.Program()
        for core in range(cfg.num_cores):
            self.program.core(core)
        self.tags: dict[tuple[int, int], int] = defaultdict(int)
        self.in_bytes = int(np.prod(net.input_shape))
        self.out_gaddr = -(-self.in_bytes // GMEM_ALIGN) * GMEM_ALIGN
        self.homes: dict[int, int] = {}
        self.sites: dict[int, list[int]] = {}
        self.targets: dict[tuple[int, int], list[Target]] = {}
        self.requests: dict[int, list] = defaultdict(list)
        self.mem: dict[int, dict] = {}
        self.netin_loaded: set[int] = set()

    # -- helpers ----------------------------------------------------------------------

    def chw(self, lid: int) -> tuple[int, int, int]:
        if lid < 0:
            return self.net.input_shape
        layer = self.net.layer(lid)
        if lid in self.lowered:
            ml = self.lowered[lid]
            return ml.k, ml.ho, ml.wo
        return as_chw(layer.out_shape)

    def addr(self, core: int, buf) -> int:
        return self.mem[core][buf][0]

    def paddr(self, t: Target, y: int, x: int) -> int:
        return self.addr(t.core, t.buf) + ((y + t.pad) * t.width + x + t.pad) * t.ctot + t.coff

    def emit(self, core: int, inst, layer: int | None) -> None:
        self.program.cores[core].append(inst, layer)

    def xfer(self, src_core: int, src: int, dst_core: int, dst: int, n: int, layer: int) -> None:
        if src_core == dst_core:
            self.emit(src_core, VCOPY(dst, src, n, 1), layer)
            return
        tag = self.tags[(src_core, dst_core)]
        self.tags[(src_core, dst_core)] += 1
        self.emit(src_core, SEND(dst_core, src, n, tag), layer)
        self.emit(dst_core, RECV(src_core, dst, n, tag), layer)

    def request(self, core: int, name, nbytes: int) -> None:
        if all(existing != name for existing, _ in self.requests[core]):
            self.requests[core].append((name, nbytes))

    # -- planning ---------------------------------------------------------------------

    def plan_homes(self) -> None:
        for layer in self.net.layers:
            lid = layer.id
            if lid in self.lowered:
                self.homes[lid] = self.placement.home(lid)
                self.sites[lid] = self.placement.cores_of(lid)
                continue
            home = None
            if layer.kind in ("add", "concat"):
                home = self._downstream_matrix_home(lid)
            if home is None:
                known = [p for p in layer.producers if p >= 0]
                home = self.homes[known[0]] if known else 0
            self.homes[lid] = home
            self.sites[lid] = [home]

    def _downstream_matrix_home(self, lid: int) -> int | None:
        # merge points run where their data is consumed next
        frontier = [lid]
        seen = set()
        best = None
        while frontier:
            nxt = []
            for cur in frontier:
                for c in self.net.consumers(cur):
                    if c.id in seen:
                        continue
                    seen.add(c.id)
                    if c.id in self.lowered:
                        if best is None or c.id < best:
                            best = c.id
                    else:
                        nxt.append(c.id)
            frontier = nxt
        return None if best is None else self.placement.home(best)

    def plan_buffers(self) -> None:
        for layer in self.net.layers:
            lid = layer.id
            c, h, w = self.chw(lid)
            self.request(self.homes[lid], ("out", lid), c * h * w)
            for i, p in enumerate(layer.producers):
                self.targets[(lid, i)] = [self._plan_target(layer, i, p, q) for q in self.sites[lid]]
            if lid in self.lowered:
                self._plan_matrix_buffers(lid)
        term = self.net.terminal.id
        c, h, w = self.chw(term)
        if c > 1 and h * w > 1:
            self.request(self.homes[term], ("stage_out",), c * h * w)

    def _plan_target(self, layer: Layer, i: int, p: int, q: int) -> Target:
        lid = layer.id
        pc, ph, pw = self.chw(p)
        if layer.kind == "concat":
            c_off = sum(self.chw(o)[0] for o in layer.producers[:i])
            return Target(q, ("out", lid), 0, pw, self.chw(lid)[0], c_off, False)
        pad = self.lowered[lid].pad if lid in self.lowered else 0
        if p >= 0 and self.homes[p] == q and pad == 0:
            return Target(q, ("out", p), 0, pw, pc, 0, True)
        self.request(q, ("in", lid, i), (ph + 2 * pad) * (pw + 2 * pad) * pc)
        if p < 0 and pc > 1 and ph * pw > 1:
            self.request(q, ("netin",), pc * ph * pw)
        return Target(q, ("in", lid, i), pad, pw + 2 * pad, pc, 0, False)

    def _window_contiguous(self, ml: MatrixLayer) -> bool:
        return ml.kh == 1 or ml.kw == ml.w_in + 2 * ml.pad

    def _plan_matrix_buffers(self, lid: int) -> None:
        ml = self.lowered[lid]
        tiling = self.tilings[lid]
        home = self.homes[lid]
        for q in self.sites[lid]:
            if not self._window_contiguous(ml):
                self.request(q, ("col", lid), ml.rows)
            for rb in range(tiling.row_blocks):
                g = self.group_of.get((q, lid, rb))
                if g is None:
                    continue
                self.request(q, ("psum", lid, rb), g.out_bytes)
                if q != home:
                    self.request(home, ("rbuf", lid, q, rb), g.out_bytes)
        if tiling.row_blocks > 1:
            self.request(home, ("acc", lid), 4 * tiling.matrix_cols)

    def build_groups(self) -> None:
        cfg = self.cfg
        for core, plans in self.group_plans.items():
            cp = self.program.cores[core]
            for g in plans:
                ml = self.lowered[g.layer_id]
                tiling = self.tilings[g.layer_id]
                r0 = g.row_block * cfg.xbar_rows
                members = []
                for xbar, cb, off, n in g.members:
                    img = np.zeros((cfg.xbar_rows, cfg.xbar_cols), dtype=np.int8)
                    c0 = cb * cfg.xbar_cols
                    img[: g.input_len, :n] = ml.weights[r0 : r0 + g.input_len, c0 : c0 + n]
                    cp.weights[xbar] = img
                    members.append(isa.GroupMember(xbar, off, n))
                assert g.input_len == tiling.rows_used(g.row_block)
                cp.groups[g.group_id] = isa.GroupEntry(g.group_id, g.input_len, tuple(members))

    # -- emission ---------------------------------------------------------------------

    def deliver(self, p: int, y: int, t: Target, tag_layer: int) -> None:
        """Move row ``y`` of producer ``p`` into target ``t``."""
        if t.alias:
            return
        pc, ph, pw = self.chw(p)
        chunks = [(0, pw)] if t.ctot == pc else [(x, 1) for x in range(pw)]
        q = t.core
        for x0, npix in chunks:
            dst = self.paddr(t, y, x0)
            nbytes = npix * pc
            if p >= 0:
                h = self.homes[p]
                src = self.addr(h, ("out", p)) + (y * pw + x0) * pc
                self.xfer(h, src, q, dst, nbytes, tag_layer)
            elif pc == 1 or ph * pw == 1:
                self.emit(q, LOAD(dst, y * pw + x0, nbytes), tag_layer)
            else:
                stage = self.addr(q, ("netin",))
                if q not in self.netin_loaded:
                    self.netin_loaded.add(q)
                    self.emit(q, LOAD(stage, 0, pc * ph * pw), tag_layer)
                for j in range(npix):
                    self.emit(
                        q, VCOPY(dst + j * pc, stage + y * pw + x0 + j, pc, ph * pw), tag_layer
                    )

    def deliver_row(self, p: int, y: int) -> None:
        for consumer in self.net.consumers(p):
            for i, prod in enumerate(consumer.producers):
                if prod == p:
                    for t in self.targets[(consumer.id, i)]:
                        self.deliver(p, y, t, consumer.id)

    def emit_matrix_pixel(self, lid: int, y: int, x: int) -> None:
        ml = self.lowered[lid]
        tiling = self.tilings[lid]
        cfg = self.cfg
        home = self.homes[lid]
        iy, ix = y * ml.stride, x * ml.stride
        seg = ml.kw * ml.c_in
        contiguous = self._window_contiguous(ml)
        for q, t in zip(self.sites[lid], self.targets[(lid, 0)]):
            rbs = [rb for rb in range(tiling.row_blocks) if (q, lid, rb) in self.group_of]
            win = self.addr(q, t.buf) + (iy * t.width + ix) * t.ctot
            if contiguous:
                src_base = win
            else:
                src_base = self.addr(q, ("col", lid))
                needed = [
                    (rb * cfg.xbar_rows, rb * cfg.xbar_rows + tiling.rows_used(rb)) for rb in rbs
                ]
                for ky in range(ml.kh):
                    s_lo, s_hi = ky * seg, (ky + 1) * seg
                    row_addr = win + ky * t.width * t.ctot
                    for lo, hi in needed:
                        a, b = max(lo, s_lo), min(hi, s_hi)
                        if a < b:
                            self.emit(q, VCOPY(src_base + a, row_addr + a - s_lo, b - a, 1), lid)
            for rb in rbs:
                g = self.group_of[(q, lid, rb)]
                self.emit(
                    q, MVM(g.group_id, src_base + rb * cfg.xbar_rows, self.addr(q, ("psum", lid, rb))), lid
                )
        for q in self.sites[lid]:
            if q == home:
                continue
            for rb in range(tiling.row_blocks):
                g = self.group_of.get((q, lid, rb))
                if g is not None:
                    self.xfer(
                        q, self.addr(q, ("psum", lid, rb)),
                        home, self.addr(home, ("rbuf", lid, q, rb)), g.out_bytes, lid,
                    )  # fmt: skip
        out = self.addr(home, ("out", lid)) + (y * ml.wo + x) * ml.k
        for cb in range(tiling.col_blocks):
            n = tiling.cols_used(cb)
            parts = []
            for rb in range(tiling.row_blocks):
                core, _xbar = self.placement.assign[(lid, rb, cb)]
                g = self.group_of[(core, lid, rb)]
                off = next(m[2] for m in g.members if m[1] == cb)
                buf = ("psum", lid, rb) if core == home else ("rbuf", lid, core, rb)
                parts.append(self.addr(home, buf) + off)
            if len(parts) == 1:
                acc = parts[0]
            else:
                acc = self.addr(home, ("acc", lid)) + 4 * cb * cfg.xbar_cols
                self.emit(home, VADD(acc, parts[0], parts[1], n, "w"), lid)
                for part in parts[2:]:
                    self.emit(home, VADD(acc, acc, part, n, "w"), lid)
            self.emit(
                home, VSCALE(out + cb * cfg.xbar_cols, acc, n, ml.multiplier, ml.shift), lid
            )

    def emit_row(self, layer: Layer, y: int) -> None:
        lid = layer.id
        if lid in self.lowered:
            for x in range(self.lowered[lid].wo):
                self.emit_matrix_pixel(lid, y, x)
            return
        h = self.homes[lid]
        c, _ho, w = self.chw(lid)
        out = self.addr(h, ("out", lid))
        if layer.kind == "relu":
            t = self.targets[(lid, 0)][0]
            self.emit(h, VRELU(out + y * w * c, self.paddr(t, y, 0), w * c), lid)
        elif layer.kind == "add":
            a, b = (self.targets[(lid, i)][0] for i in range(2))
            self.emit(h, VADD(out + y * w * c, self.paddr(a, y, 0), self.paddr(b, y, 0), w * c, "b"), lid)
        elif layer.kind == "pool":
            t = self.targets[(lid, 0)][0]
            kh, kw = layer.kernel
            s = layer.stride
            for x in range(w):
                dst = out + (y * w + x) * c
                srcs = [self.paddr(t, y * s + ky, x * s + kx) for ky in range(kh) for kx in range(kw)]
                if len(srcs) == 1:
                    self.emit(h, VCOPY(dst, srcs[0], c, 1), lid)
                    continue
                self.emit(h, VMAX(dst, srcs[0], srcs[1], c, "b"), lid)
                for src in srcs[2:]:
                    self.emit(h, VMAX(dst, dst, src, c, "b"), lid)
        # concat rows are assembled entirely by the producers' deliveries

    def rows_needed(self, layer: Layer, y: int) -> int:
        """Highest producer row that output row ``y`` reads."""
        lid = layer.id
        if lid in self.lowered:
            ml = self.lowered[lid]
            last = y * ml.stride - ml.pad + ml.kh - 1
            return max(0, min(ml.h_in - 1, last))
        if layer.kind == "pool":
            return y * layer.stride + layer.kernel[0] - 1
        return y

    def emit_all(self) -> None:
        for layer in self.net.layers:
            for i, p in enumerate(layer.producers):
                if p < 0:
                    for t in self.targets[(layer.id, i)]:
                        for y in range(self.net.input_shape[1]):
                            self.deliver(p, y, t, layer.id)
        done = {-1: self.net.input_shape[1]}
        for layer in self.net.layers:
            done[layer.id] = 0
        rows = {layer.id: self.chw(layer.id)[1] for layer in self.net.layers}
        remaining = sum(rows.values())
        while remaining:
            progressed = False
            for layer in self.net.layers:
                y = done[layer.id]
                if y >= rows[layer.id]:
                    continue
                need = self.rows_needed(layer, y)
                if all(done[p] > need for p in layer.producers):
                    self.emit_row(layer, y)
                    done[layer.id] += 1
                    remaining -= 1
                    progressed = True
                    self.deliver_row(layer.id, y)
            if not progressed:
                raise CompileError("row schedule stalled")
        self.emit_store()
        for core in range(self.cfg.num_cores):
            self.emit(core, HALT(), None)

    def emit_store(self) -> None:
        term = self.net.terminal.id
        h = self.homes[term]
        c, hh, w = self.chw(term)
        src = self.addr(h, ("out", term))
        if c > 1 and hh * w > 1:
            stage = self.addr(h, ("stage_out",))
            for ch in range(c):
                self.emit(h, VCOPY(stage + ch * hh * w, src + ch, hh * w, c), term)
            src = stage
        self.emit(h, STORE(self.out_gaddr, src, c * hh * w), term)
        self.program.output = (self.out_gaddr, c * hh * w)

    def run(self) -> isa.Program:
        self.plan_homes()
        self.plan_buffers()
        self.mem = allocate_memory(self.requests, self.cfg)
        self.build_groups()
        self.emit_all()
        return self.program


def schedule_and_codegen(net: Network, placement: Placement, cfg, lowered=None) -> isa.Program:
    lowered = lower_matrix_layers(net) if lowered is None else lowered
    return Codegen(net, lowered, placement, cfg).run()
