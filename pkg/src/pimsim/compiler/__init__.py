"""Network to Program compiler: tile, map, allocate, emit."""

from __future__ import annotations

from dataclasses import dataclass

from .. import isa
from .codegen import Codegen, lower_matrix_layers, schedule_and_codegen
from .errors import CapacityError, CompileError, MemoryOverflowError
from .mapping import (
    STRATEGIES,
    Placement,
    check_placement,
    map_performance_first,
    map_tiles,
    map_utilization_first,
    normalize_strategy,
)
from .memory import allocate_memory
from .tiling import Tile, Tiling, tile_matrix

__all__ = [
    "STRATEGIES",
    "CapacityError",
    "CompileError",
    "Compiled",
    "MemoryOverflowError",
    "Placement",
    "Tile",
    "Tiling",
    "allocate_memory",
    "check_placement",
    "compile",
    "compile_network",
    "map_performance_first",
    "map_tiles",
    "map_utilization_first",
    "normalize_strategy",
    "schedule_and_codegen",
    "tile_matrix",
]


@dataclass
class Compiled:
    program: isa.Program
    placement: Placement
    memory: dict[int, dict]
    homes: dict[int, int]

    def report(self) -> dict:
        """Placement report: layer -> cores/crossbars, plus the memory map."""
        layers = []
        for tiling in self.placement.tilings:
            lid = tiling.layer_id
            tiles = [
                {
                    "row_block": t.row_block,
                    "col_block": t.col_block,
                    "rows_used": t.rows_used,
                    "cols_used": t.cols_used,
                    "core": self.placement.assign[(lid, t.row_block, t.col_block)][0],
                    "xbar": self.placement.assign[(lid, t.row_block, t.col_block)][1],
                }
                for t in tiling.tiles
            ]
            layers.append(
                {
                    "layer": lid,
                    "matrix": [tiling.matrix_rows, tiling.matrix_cols],
                    "cores": self.placement.cores_of(lid),
                    "home": self.placement.home(lid),
                    "tiles": tiles,
                }
            )
        memory = {
            str(core): [
                {"buffer": "/".join(str(part) for part in name), "addr": addr, "bytes": n}
                for name, (addr, n) in table.items()
            ]
            for core, table in sorted(self.memory.items())
        }
        return {
            "strategy": self.placement.strategy,
            "used_cores": self.placement.used_cores(),
            "layer_homes": {str(k): v for k, v in sorted(self.homes.items())},
            "layers": layers,
            "memory": memory,
            "output": list(self.program.output) if self.program.output else None,
        }


def compile_network(net, cfg, strategy: str = "performance-first") -> Compiled:
    strategy = normalize_strategy(strategy)
    lowered = lower_matrix_layers(net)
    tilings = [tile_matrix(ml.rows, ml.k, cfg, lid) for lid, ml in lowered.items()]
    placement = map_tiles(tilings, cfg, strategy)
    problems = check_placement(placement, cfg)
    if problems:
        raise CompileError("; ".join(problems))
    gen = Codegen(net, lowered, placement, cfg)
    program = gen.run()
    errors = isa.validate_program(program, cfg)
    if errors:
        raise CompileError("generated program is invalid: " + "; ".join(errors[:5]))
    return Compiled(program, placement, gen.mem, gen.homes)


def compile(net, cfg, strategy: str = "performance-first") -> isa.Program:  # noqa: A001
    return compile_network(net, cfg, strategy).program
