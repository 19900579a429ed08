from __future__ import annotations

from .errors import MemoryOverflowError

ALIGN = 4


def allocate_memory(requests: dict[int, list[tuple[object, int]]], cfg) -> dict[int, dict]:
    """Assign disjoint, 4-byte aligned local ranges to named buffers.

    ``requests`` maps a core to ``(name, nbytes)`` pairs in allocation
    order; the result maps each core to ``name -> (addr, nbytes)``.  Nothing
    is reused: a single inference is fully unrolled and every buffer lives
    for the whole program.
    """
    out: dict[int, dict] = {}
    for core in sorted(requests):
        cursor = 0
        table = {}
        for name, nbytes in requests[core]:
            if name in table:
                raise ValueError(f"buffer {name!r} requested twice on core {core}")
            cursor = -(-cursor // ALIGN) * ALIGN
            table[name] = (cursor, nbytes)
            cursor += nbytes
        if cursor > cfg.local_mem_bytes:
            raise MemoryOverflowError(core, cursor, cfg.local_mem_bytes)
        out[core] = table
    return out
