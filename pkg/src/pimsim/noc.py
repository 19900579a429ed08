"""Mesh interconnect: XY routing and message-level link occupancy.

A transfer holds every link of its route for its whole duration.  Links are
directed; ``(x, y, d)`` names the link leaving node ``(x, y)`` in direction
``d`` (E=+x, W=-x, N=+y, S=-y).  The global-memory port is modelled as one
more exclusive resource so concurrent LOAD/STORE requests serialize there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

_STEP = {"E": (1, 0), "W": (-1, 0), "N": (0, 1), "S": (0, -1)}

GMEM_PORT = ("gmem",)


def route_xy(src: tuple[int, int], dst: tuple[int, int]) -> list[tuple[int, int, str]]:
    """Directed links from ``src`` to ``dst``: all X hops first, then Y."""
    x, y = src
    path = []
    while x != dst[0]:
        d = "E" if dst[0] > x else "W"
        path.append((x, y, d))
        x += _STEP[d][0]
    while y != dst[1]:
        d = "N" if dst[1] > y else "S"
        path.append((x, y, d))
        y += _STEP[d][1]
    return path


def link_hops(path) -> int:
    return sum(1 for link in path if link is not GMEM_PORT)


def transfer_cycles(nbytes: int, hops: int, timing, gmem: bool = False) -> int:
    """Occupancy of one transfer once it has started."""
    t = timing
    cycles = t.transfer_base_cycles + hops * t.noc_cycles_per_hop
    cycles += -(-nbytes // t.link_bytes_per_cycle)
    if gmem:
        cycles += t.gmem_base_cycles + -(-nbytes // t.gmem_bytes_per_cycle)
    return cycles


@dataclass
class Mesh:
    width: int
    height: int
    gmem_node: tuple[int, int]
    busy_until: dict = field(default_factory=dict)
    # (link, start, end) occupancy records, for tracing
    history: list = field(default_factory=list)
    record: bool = False

    @classmethod
    def from_config(cls, cfg, record: bool = False) -> "Mesh":
        return cls(cfg.mesh_width, cfg.mesh_height, tuple(cfg.global_mem_node), record=record)

    def coord(self, core: int) -> tuple[int, int]:
        return core % self.width, core // self.width

    def path(self, src_core: int | None, dst_core: int | None) -> list:
        """Route between cores; ``None`` stands for global memory."""
        if src_core is None:
            return [GMEM_PORT] + route_xy(self.gmem_node, self.coord(dst_core))
        if dst_core is None:
            return route_xy(self.coord(src_core), self.gmem_node) + [GMEM_PORT]
        return route_xy(self.coord(src_core), self.coord(dst_core))

    def reserve(self, path: list, ready: int, duration: int) -> tuple[int, int]:
        """Book ``path`` for ``duration`` cycles at the earliest start >= ``ready``."""
        start = ready
        for link in path:
            start = max(start, self.busy_until.get(link, 0))
        end = start + duration
        for link in path:
            self.busy_until[link] = end
            if self.record:
                self.history.append((link, start, end))
        return start, end
