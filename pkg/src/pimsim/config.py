"""Architecture configuration: parsing, validation and emission.

The configuration file is a JSON document with the top-level sections
``mesh``, ``core``, ``timing``, ``energy`` and ``system``.  The full field
table lives in ``docs/config_schema.md``; ``SCHEMA`` below is the
executable form of the same table.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration documents.

    ``kind`` is one of ``"syntax"``, ``"schema"`` or ``"semantic"`` and
    ``path`` names the offending field (``"core.rob_size"``).
    """

    def __init__(self, kind: str, path: str, message: str):
        self.kind = kind
        self.path = path
        super().__init__(f"{kind} error at {path or '<document>'}: {message}")


@dataclass(frozen=True)
class TimingParams:
    mvm_setup_cycles: int = 2
    adc_cycles_per_sample: int = 1
    vec_setup_cycles: int = 1
    vec_elems_per_cycle: int = 32
    transfer_base_cycles: int = 2
    noc_cycles_per_hop: int = 1
    link_bytes_per_cycle: int = 32
    gmem_base_cycles: int = 20
    gmem_bytes_per_cycle: int = 16
    scalar_cycles: int = 1


@dataclass(frozen=True)
class EnergyParams:
    mvm_energy_per_xbar_pj: float = 10.0
    adc_energy_per_sample_pj: float = 2.0
    vec_energy_per_elem_pj: float = 0.5
    noc_energy_per_byte_hop_pj: float = 0.25
    mem_energy_per_byte_pj: float = 0.125
    scalar_energy_per_inst_pj: float = 0.5
    static_power_mw_per_core: float = 5.0


@dataclass(frozen=True)
class ArchConfig:
    mesh_width: int
    mesh_height: int
    xbars_per_core: int
    xbar_rows: int
    xbar_cols: int
    adcs_per_xbar: int = 1
    local_mem_bytes: int = 262144
    rob_size: int = 1
    dispatch_width: int = 4
    num_scalar_regs: int = 32
    global_mem_node: tuple[int, int] = (0, 0)
    frequency_hz: int = 1_000_000_000
    watchdog_cycles: int = 1_000_000
    timing: TimingParams = field(default_factory=TimingParams)
    energy: EnergyParams = field(default_factory=EnergyParams)

    @property
    def num_cores(self) -> int:
        return self.mesh_width * self.mesh_height

    def coord(self, core_id: int) -> tuple[int, int]:
        """Mesh coordinate ``(x, y)`` of a row-major core id."""
        return core_id % self.mesh_width, core_id // self.mesh_width

    def core_at(self, x: int, y: int) -> int:
        return y * self.mesh_width + x

    def with_overrides(self, **kw) -> "ArchConfig":
        return replace(self, **kw)


# (section, key) -> (ArchConfig attribute, kind, default or REQUIRED, lower bound)
REQUIRED = object()
_INT, _NUM, _NODE = "int", "number", "node"

SCHEMA: dict[str, dict[str, tuple]] = {
    "mesh": {
        "width": ("mesh_width", _INT, REQUIRED, 1),
        "height": ("mesh_height", _INT, REQUIRED, 1),
        "global_mem_node": ("global_mem_node", _NODE, (0, 0), 0),
    },
    "core": {
        "xbars_per_core": ("xbars_per_core", _INT, REQUIRED, 1),
        "xbar_rows": ("xbar_rows", _INT, REQUIRED, 1),
        "xbar_cols": ("xbar_cols", _INT, REQUIRED, 1),
        "adcs_per_xbar": ("adcs_per_xbar", _INT, 1, 1),
        "local_mem_bytes": ("local_mem_bytes", _INT, 262144, 1),
        "rob_size": ("rob_size", _INT, 1, 1),
        "dispatch_width": ("dispatch_width", _INT, 4, 1),
        "num_scalar_regs": ("num_scalar_regs", _INT, 32, 1),
    },
    "system": {
        "frequency_hz": ("frequency_hz", _INT, 1_000_000_000, 1),
        "watchdog_cycles": ("watchdog_cycles", _INT, 1_000_000, 1),
    },
    "timing": {
        "mvm_setup_cycles": ("mvm_setup_cycles", _INT, 2, 0),
        "adc_cycles_per_sample": ("adc_cycles_per_sample", _INT, 1, 1),
        "vec_setup_cycles": ("vec_setup_cycles", _INT, 1, 0),
        "vec_elems_per_cycle": ("vec_elems_per_cycle", _INT, 32, 1),
        "transfer_base_cycles": ("transfer_base_cycles", _INT, 2, 0),
        "noc_cycles_per_hop": ("noc_cycles_per_hop", _INT, 1, 1),
        "link_bytes_per_cycle": ("link_bytes_per_cycle", _INT, 32, 1),
        "gmem_base_cycles": ("gmem_base_cycles", _INT, 20, 0),
        "gmem_bytes_per_cycle": ("gmem_bytes_per_cycle", _INT, 16, 1),
        "scalar_cycles": ("scalar_cycles", _INT, 1, 1),
    },
    "energy": {
        "mvm_energy_per_xbar_pj": ("mvm_energy_per_xbar_pj", _NUM, 10.0, 0),
        "adc_energy_per_sample_pj": ("adc_energy_per_sample_pj", _NUM, 2.0, 0),
        "vec_energy_per_elem_pj": ("vec_energy_per_elem_pj", _NUM, 0.5, 0),
        "noc_energy_per_byte_hop_pj": ("noc_energy_per_byte_hop_pj", _NUM, 0.25, 0),
        "mem_energy_per_byte_pj": ("mem_energy_per_byte_pj", _NUM, 0.125, 0),
        "scalar_energy_per_inst_pj": ("scalar_energy_per_inst_pj", _NUM, 0.5, 0),
        "static_power_mw_per_core": ("static_power_mw_per_core", _NUM, 5.0, 0),
    },
}


def _coerce(kind: str, value, path: str):
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("schema", path, f"expected integer, got {value!r}")
        return value
    if kind == _NUM:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("schema", path, f"expected number, got {value!r}")
        return float(value)
    if (
        not isinstance(value, list)
        or len(value) != 2
        or any(isinstance(v, bool) or not isinstance(v, int) for v in value)
    ):
        raise ConfigError("schema", path, f"expected [x, y] integer pair, got {value!r}")
    return (value[0], value[1])


def config_from_dict(doc: dict) -> ArchConfig:
    """Build an ArchConfig from an already-decoded document, applying defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("schema", "", "top level must be an object")
    for key in doc:
        if key not in SCHEMA:
            raise ConfigError("schema", key, "unknown section")

    top, timing, energy = {}, {}, {}
    for section, fields in SCHEMA.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError("schema", section, "section must be an object")
        for key in body:
            if key not in fields:
                raise ConfigError("schema", f"{section}.{key}", "unknown field")
        dest = timing if section == "timing" else energy if section == "energy" else top
        for key, (attr, kind, default, _lo) in fields.items():
            path = f"{section}.{key}"
            if key in body:
                dest[attr] = _coerce(kind, body[key], path)
            elif default is REQUIRED:
                raise ConfigError("schema", path, "missing required field")
            else:
                dest[attr] = default

    cfg = ArchConfig(**top, timing=TimingParams(**timing), energy=EnergyParams(**energy))
    problems = validate_config(cfg)
    if problems:
        path, msg = problems[0]
        raise ConfigError("semantic", path, msg)
    return cfg


def parse_config(text: str) -> ArchConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("syntax", "", f"line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc)


def load_config(path) -> ArchConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_to_dict(cfg: ArchConfig) -> dict:
    flat = asdict(cfg)
    out: dict[str, dict] = {}
    for section, fields in SCHEMA.items():
        src = flat[section] if section in ("timing", "energy") else flat
        body = {}
        for key, (attr, kind, _d, _lo) in fields.items():
            value = src[attr]
            body[key] = list(value) if kind == _NODE else value
        out[section] = body
    return out


def emit_config(cfg: ArchConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


def validate_config(cfg: ArchConfig) -> list[tuple[str, str]]:
    """Return ``(field path, message)`` for every violated invariant."""
    problems = []
    flat = asdict(cfg)
    for section, fields in SCHEMA.items():
        src = flat[section] if section in ("timing", "energy") else flat
        for key, (attr, kind, _d, lo) in fields.items():
            value = src[attr]
            if kind == _NODE:
                continue
            if value < lo:
                problems.append((f"{section}.{key}", f"must be >= {lo}, got {value}"))
    if cfg.adcs_per_xbar > cfg.xbar_cols:
        problems.append(
            ("core.adcs_per_xbar", f"{cfg.adcs_per_xbar} exceeds xbar_cols={cfg.xbar_cols}")
        )
    gx, gy = cfg.global_mem_node
    if not (0 <= gx < cfg.mesh_width and 0 <= gy < cfg.mesh_height):
        problems.append(
            (
                "mesh.global_mem_node",
                f"({gx}, {gy}) outside {cfg.mesh_width}x{cfg.mesh_height} mesh",
            )
        )
    return problems
