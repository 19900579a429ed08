"""Placement of weight tiles onto cores and crossbars.

Two policies are provided.  Utilization-first packs tiles tightly, filling
core 0 before core 1 and so on, so a core may hold several layers and a
layer may straddle cores.  Performance-first gives every layer its own
fresh cores, so a core never holds more than one layer.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .errors import CapacityError

STRATEGIES = ("utilization-first", "performance-first")
_ALIASES = {"utilization": "utilization-first", "performance": "performance-first"}


def normalize_strategy(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in STRATEGIES:
        raise ValueError(f"unknown mapping strategy {name!r}")
    return name


@dataclass
class GroupPlan:
    group_id: int
    layer_id: int
    row_block: int
    input_len: int
    # (xbar, col_block, out_offset bytes, out_len) in col_block order
    members: list[tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def out_bytes(self) -> int:
        return sum(4 * m[3] for m in self.members)


@dataclass
class Placement:
    strategy: str
    # (layer_id, row_block, col_block) -> (core, xbar)
    assign: dict[tuple[int, int, int], tuple[int, int]]
    tilings: list

    def cores_of(self, layer_id: int) -> list[int]:
        return sorted({c for (l, _, _), (c, _) in self.assign.items() if l == layer_id})

    def layers_on(self, core: int) -> list[int]:
        return sorted({l for (l, _, _), (c, _) in self.assign.items() if c == core})

    def used_cores(self) -> list[int]:
        return sorted({c for c, _ in self.assign.values()})

    def home(self, layer_id: int) -> int:
        """Lowest core holding one of the layer's column-block-0 tiles."""
        return min(c for (l, _, cb), (c, _) in self.assign.items() if l == layer_id and cb == 0)

    def groups(self) -> dict[int, list[GroupPlan]]:
        """Group tables: one group per (layer, row_block, core)."""
        out: dict[int, list[GroupPlan]] = defaultdict(list)
        index: dict[tuple[int, int, int], GroupPlan] = {}
        for tiling in self.tilings:
            for t in tiling.tiles:
                core, xbar = self.assign[(tiling.layer_id, t.row_block, t.col_block)]
                key = (core, tiling.layer_id, t.row_block)
                g = index.get(key)
                if g is None:
                    g = GroupPlan(len(out[core]), tiling.layer_id, t.row_block, t.rows_used)
                    index[key] = g
                    out[core].append(g)
                g.members.append((xbar, t.col_block, g.out_bytes, t.cols_used))
        return dict(out)


def _check_capacity(tilings, cfg) -> None:
    total = sum(len(t.tiles) for t in tilings)
    cap = cfg.num_cores * cfg.xbars_per_core
    if total > cap:
        raise CapacityError(f"{total} tiles exceed the chip's {cap} crossbars")


def map_utilization_first(tilings, cfg) -> Placement:
    _check_capacity(tilings, cfg)
    assign = {}
    slot = 0
    for tiling in tilings:
        for t in tiling.tiles:
            assign[(tiling.layer_id, t.row_block, t.col_block)] = divmod(slot, cfg.xbars_per_core)
            slot += 1
    return Placement("utilization-first", assign, list(tilings))


def map_performance_first(tilings, cfg) -> Placement:
    per = cfg.xbars_per_core
    need = sum(-(-len(t.tiles) // per) for t in tilings)
    if need > cfg.num_cores:
        raise CapacityError(
            f"performance-first needs {need} cores, the mesh has {cfg.num_cores}"
        )
    assign = {}
    next_core = 0
    for tiling in tilings:
        for i, t in enumerate(tiling.tiles):
            core, xbar = divmod(i, per)
            assign[(tiling.layer_id, t.row_block, t.col_block)] = (next_core + core, xbar)
        next_core += -(-len(tiling.tiles) // per)
    return Placement("performance-first", assign, list(tilings))


def map_tiles(tilings, cfg, strategy: str) -> Placement:
    strategy = normalize_strategy(strategy)
    if strategy == "utilization-first":
        return map_utilization_first(tilings, cfg)
    return map_performance_first(tilings, cfg)


def check_placement(p: Placement, cfg) -> list[str]:
    """Violations of the placement invariants (empty when sound)."""
    problems = []
    slots = list(p.assign.values())
    if len(set(slots)) != len(slots):
        problems.append("a crossbar hosts more than one tile")
    for core, xbar in slots:
        if not 0 <= core < cfg.num_cores or not 0 <= xbar < cfg.xbars_per_core:
            problems.append(f"slot ({core}, {xbar}) outside the chip")
    for tiling in p.tilings:
        for t in tiling.tiles:
            if (tiling.layer_id, t.row_block, t.col_block) not in p.assign:
                problems.append(f"tile {tiling.layer_id}/{t.row_block}/{t.col_block} unplaced")
    if p.strategy == "performance-first":
        for core in p.used_cores():
            if len(p.layers_on(core)) > 1:
                problems.append(f"core {core} hosts several layers")
    elif p.strategy == "utilization-first":
        used = defaultdict(int)
        for core, _ in slots:
            used[core] += 1
        if used:
            last = max(used)
            for core in range(last):
                if used.get(core, 0) != cfg.xbars_per_core:
                    problems.append(f"core {core} not full before core {last} is used")
    return problems
