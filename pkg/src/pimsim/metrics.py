"""Latency, energy, power and per-layer communication breakdown.

Dynamic energy is tallied as integer event counts during simulation and
multiplied by the per-event energy once, here, so reports carry no
accumulated floating-point drift.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .engine import SimResult, union_length
from .isa import CLASSES

ENERGY_CATEGORIES = ("mvm", "adc", "vector", "noc", "memory", "scalar", "static")
PJ_PER_MW_SECOND = 1e9
MW_PER_PJ_PER_SECOND = 1e-9


@dataclass
class LayerStats:
    layer_id: int
    compute_cycles: int
    comm_cycles: int
    comm_ratio: float


@dataclass
class Report:
    total_cycles: int
    frequency_hz: int
    latency_s: float
    energy_pj: dict[str, float]
    total_energy_pj: float
    avg_power_mw: float
    layers: list[LayerStats] = field(default_factory=list)
    utilization: dict[int, dict[str, float]] = field(default_factory=dict)
    inst_counts: dict[str, int] = field(default_factory=dict)
    events: dict[str, int] = field(default_factory=dict)

    def layer(self, lid: int) -> LayerStats:
        for ls in self.layers:
            if ls.layer_id == lid:
                return ls
        raise KeyError(lid)


def energy_breakdown(events: dict[str, int], energy, cores: int, latency_s: float):
    e = energy
    cats = {
        "mvm": e.mvm_energy_per_xbar_pj * events["xbar_activations"],
        "adc": e.adc_energy_per_sample_pj * events["adc_samples"],
        "vector": e.vec_energy_per_elem_pj * events["vec_elems"],
        "noc": e.noc_energy_per_byte_hop_pj * events["noc_byte_hops"],
        "memory": e.mem_energy_per_byte_pj * events["mem_bytes"],
        "scalar": e.scalar_energy_per_inst_pj * events["scalar_insts"],
        "static": e.static_power_mw_per_core * cores * latency_s * PJ_PER_MW_SECOND,
    }
    total = 0.0
    for k in ENERGY_CATEGORIES:
        total += cats[k]
    return cats, total


def layer_breakdown(records, layer_ids=()) -> list[LayerStats]:
    """Per-layer compute vs communication cycles.

    Transfer-class busy time (rendezvous waiting included) counts as
    communication, everything else as compute; overlapping intervals within
    one category are counted once.
    """
    spans: dict[int, dict[str, list]] = defaultdict(lambda: {"comm": [], "compute": []})
    for _core, _idx, klass, _mn, issue, complete, layer in records:
        if layer is None:
            continue
        spans[layer]["comm" if klass == "transfer" else "compute"].append((issue, complete))
    out = []
    for lid in sorted(set(spans) | set(layer_ids)):
        comm = union_length(spans[lid]["comm"])
        comp = union_length(spans[lid]["compute"])
        ratio = comm / (comm + comp) if comm + comp else 0.0
        out.append(LayerStats(lid, comp, comm, ratio))
    return out


def finalize_report(sim: SimResult, cfg, layer_ids=()) -> Report:
    latency = sim.total_cycles / cfg.frequency_hz
    cats, total = energy_breakdown(sim.tallies, cfg.energy, cfg.num_cores, latency)
    power = total / latency * MW_PER_PJ_PER_SECOND if latency else 0.0
    util = {}
    for cid, per in sorted(sim.busy_cycles.items()):
        util[cid] = {
            k: (per[k] / sim.total_cycles if sim.total_cycles else 0.0) for k in CLASSES
        }
    return Report(
        total_cycles=sim.total_cycles,
        frequency_hz=cfg.frequency_hz,
        latency_s=latency,
        energy_pj=cats,
        total_energy_pj=total,
        avg_power_mw=power,
        layers=layer_breakdown(sim.records, layer_ids),
        utilization=util,
        inst_counts=dict(sim.inst_counts),
        events=dict(sim.tallies),
    )


# -- serialization ----------------------------------------------------------------


def report_to_dict(r: Report) -> dict:
    d = asdict(r)
    d["utilization"] = {str(k): v for k, v in r.utilization.items()}
    return d


def report_from_dict(d: dict) -> Report:
    d = dict(d)
    d["layers"] = [LayerStats(**ls) for ls in d["layers"]]
    d["utilization"] = {int(k): v for k, v in d["utilization"].items()}
    return Report(**d)


def csv_rows(r: Report) -> list[tuple[str, str, object]]:
    rows: list[tuple[str, str, object]] = [
        ("chip", "total_cycles", r.total_cycles),
        ("chip", "frequency_hz", r.frequency_hz),
        ("chip", "latency_s", r.latency_s),
        ("chip", "total_energy_pj", r.total_energy_pj),
        ("chip", "avg_power_mw", r.avg_power_mw),
    ]
    rows += [("energy_pj", k, v) for k, v in r.energy_pj.items()]
    rows += [("events", k, v) for k, v in r.events.items()]
    rows += [("inst_count", k, v) for k, v in r.inst_counts.items()]
    for ls in r.layers:
        scope = f"layer:{ls.layer_id}"
        rows += [
            (scope, "compute_cycles", ls.compute_cycles),
            (scope, "comm_cycles", ls.comm_cycles),
            (scope, "comm_ratio", ls.comm_ratio),
        ]
    for cid, per in r.utilization.items():
        rows += [(f"core:{cid}", f"util_{k}", v) for k, v in per.items()]
    return rows


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def emit_report(r: Report, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report_to_dict(r), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return emit_reports_csv([(None, r)])
    raise ValueError(f"unknown report format {fmt!r}")


def emit_reports_csv(points) -> str:
    """Concatenate ``(label, Report)`` pairs into CSV blocks under one header.

    The ``point`` column is omitted when every label is ``None``.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    labelled = any(label is not None for label, _ in points)
    w.writerow((["point"] if labelled else []) + ["scope", "metric", "value"])
    for label, r in points:
        for scope, metric, value in csv_rows(r):
            w.writerow(([label] if labelled else []) + [scope, metric, _fmt(value)])
    return buf.getvalue()


def parse_report(text: str) -> Report:
    return report_from_dict(json.loads(text))
