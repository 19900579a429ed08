from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tile:
    row_block: int
    col_block: int
    rows_used: int
    cols_used: int


@dataclass(frozen=True)
class Tiling:
    layer_id: int
    matrix_rows: int
    matrix_cols: int
    row_blocks: int
    col_blocks: int
    tiles: tuple[Tile, ...]

    def tile(self, rb: int, cb: int) -> Tile:
        return self.tiles[rb * self.col_blocks + cb]

    def rows_used(self, rb: int) -> int:
        return self.tile(rb, 0).rows_used

    def cols_used(self, cb: int) -> int:
        return self.tile(0, cb).cols_used


def tile_matrix(rows: int, cols: int, cfg, layer_id: int = 0) -> Tiling:
    """Cut a ``rows x cols`` weight matrix into crossbar-sized tiles.

    Tiles are listed in (row_block, col_block) order; edge tiles carry the
    remainders.
    """
    if rows < 1 or cols < 1:
        raise ValueError("matrix dimensions must be >= 1")
    r, c = cfg.xbar_rows, cfg.xbar_cols
    rbs, cbs = -(-rows // r), -(-cols // c)
    tiles = tuple(
        Tile(rb, cb, min(r, rows - rb * r), min(c, cols - cb * c))
        for rb in range(rbs)
        for cb in range(cbs)
    )
    return Tiling(layer_id, rows, cols, rbs, cbs, tiles)
