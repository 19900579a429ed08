"""Command-line driver: ``pimsim compile | run | sweep``.

Exit codes: 0 success, 1 domain error (bad input, capacity, mismatch),
2 usage error, 3 simulation deadlock.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import numpy as np

from . import asm, isa
from .compiler import STRATEGIES, CompileError, compile_network, normalize_strategy
from .config import ConfigError, load_config
from .engine import DeadlockError, SimulationError, simulate
from .metrics import emit_report, emit_reports_csv, finalize_report
from .nn import NetworkError, generate_weights, load_network, reference_inference, reseed

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE, EXIT_DEADLOCK = 0, 1, 2, 3
DEFAULT_INPUT_SEED = 1
DUMP_NAME = "pimsim-deadlock.json"
SUMMARY_FIELDS = (
    "point", "strategy", "rob_size", "dispatch_width", "total_cycles", "latency_s",
    "total_energy_pj", "avg_power_mw", "output_sha256",
)  # fmt: skip


class UsageError(Exception):
    pass


def _builtin(kind: str, name: str) -> str:
    """Resolve a bare fixture name (``tiny_cnn``) to a shipped data file."""
    if os.path.exists(name):
        return name
    ext = ".asm" if kind == "programs" else ".json"
    candidate = resources.files("pimsim") / "data" / kind / (name + ext)
    if candidate.is_file():
        return str(candidate)
    return name


def builtin_names(kind: str) -> list[str]:
    root = resources.files("pimsim") / "data" / kind
    return sorted(p.name.rsplit(".", 1)[0] for p in root.iterdir() if p.is_file())


def load_cfg(path: str, rob_size=None, dispatch_width=None):
    cfg = load_config(_builtin("configs", path))
    overrides = {}
    if rob_size is not None:
        overrides["rob_size"] = rob_size
    if dispatch_width is not None:
        overrides["dispatch_width"] = dispatch_width
    return cfg.with_overrides(**overrides) if overrides else cfg


def load_net(path: str):
    net = load_network(_builtin("networks", path))
    seed = os.environ.get("PIMSIM_SEED")
    if seed not in (None, ""):
        try:
            base = int(seed, 0)
        except ValueError:
            raise UsageError(f"PIMSIM_SEED must be an integer, got {seed!r}") from None
        reseed(net, base)
    return net


def input_bytes(path, size: int, seed: int) -> bytes:
    """Network input as CHW int8 bytes: from ``path`` or drawn from ``seed``."""
    if path is None:
        return generate_weights(seed, 1, size).tobytes()
    if path.endswith(".npy"):
        arr = np.load(path)
        if arr.size != size:
            raise ValueError(f"input {path} has {arr.size} elements, expected {size}")
        return arr.astype(np.int8).reshape(-1).tobytes()
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) != size:
        raise ValueError(f"input {path} has {len(data)} bytes, expected {size}")
    return data


def _is_program(path: str) -> bool:
    return path.endswith(".asm")


def _layer_ids(program: isa.Program) -> list[int]:
    return sorted({l for cp in program.cores.values() for l in cp.layers if l is not None})


def write_trace(path: str, sim) -> None:
    with open(path, "w") as fh:
        for core, idx, klass, mnem, issue, complete, layer in sim.records:
            fh.write(
                json.dumps(
                    {"core": core, "index": idx, "class": klass, "op": mnem,
                     "issue": issue, "complete": complete, "layer": layer}  # fmt: skip
                )
                + "\n"
            )
        for link, start, end in sim.links or ():
            link = list(link) if isinstance(link, tuple) else link
            fh.write(json.dumps({"link": link, "start": start, "end": end}) + "\n")


def write_dump(out_dir: str | None, err: DeadlockError) -> str:
    path = os.path.join(out_dir or os.getcwd(), DUMP_NAME)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(err.dump, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# -- subcommands ----------------------------------------------------------------------


def cmd_compile(args) -> int:
    cfg = load_cfg(args.config)
    net = load_net(args.network)
    compiled = compile_network(net, cfg, args.strategy)
    os.makedirs(args.out, exist_ok=True)
    asm_path = asm.write_program(compiled.program, args.out)
    report_path = os.path.join(args.out, "placement.json")
    with open(report_path, "w") as fh:
        json.dump(compiled.report(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(asm_path)
    print(report_path)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_cfg(args.config, args.rob_size, args.dispatch_width)
    target = args.target
    net = None
    if _is_program(target) or (not os.path.exists(target) and _builtin("programs", target) != target):
        program = asm.load_program(_builtin("programs", target), (cfg.xbar_rows, cfg.xbar_cols))
        errors = isa.validate_program(program, cfg)
        if errors:
            raise CompileError("invalid program: " + "; ".join(errors[:5]))
        if args.net:
            net = load_net(args.net)
        elif args.check:
            raise UsageError("--check on a compiled program needs --net")
    else:
        net = load_net(target)
        program = compile_network(net, cfg, args.strategy).program

    if net is not None:
        size = int(np.prod(net.input_shape))
        gmem = input_bytes(args.input, size, args.input_seed)
        layer_ids = [l.id for l in net.layers]
    else:
        gmem = input_bytes(args.input, os.path.getsize(args.input), 0) if args.input else b""
        layer_ids = _layer_ids(program)

    try:
        sim = simulate(program, cfg, gmem_init=gmem, trace=bool(args.trace))
    except DeadlockError as err:
        path = write_dump(args.out, err)
        print(f"pimsim: {err}; state dump written to {path}", file=sys.stderr)
        return EXIT_DEADLOCK
    if args.trace:
        write_trace(args.trace, sim)
    report = finalize_report(sim, cfg, layer_ids)
    sys.stdout.write(emit_report(report, "csv" if args.csv else "json"))

    if args.check:
        want = reference_inference(net, np.frombuffer(gmem, dtype=np.int8)).reshape(-1)
        got = np.frombuffer(sim.output_bytes(), dtype=np.int8) if sim.output else np.zeros(0, np.int8)
        if got.shape != want.shape:
            print(f"pimsim: check failed: output has {got.size} bytes, expected {want.size}",
                  file=sys.stderr)  # fmt: skip
            return EXIT_DOMAIN
        diff = np.flatnonzero(got != want)
        if diff.size:
            i = int(diff[0])
            print(f"pimsim: check failed at index {i}: got {int(got[i])}, expected {int(want[i])}",
                  file=sys.stderr)  # fmt: skip
            return EXIT_DOMAIN
        print("pimsim: check passed", file=sys.stderr)
    return EXIT_OK


def parse_axis(text: str) -> tuple[str, list]:
    name, sep, values = text.partition("=")
    if not sep:
        raise UsageError(f"axis must look like rob=1,2,4 or strategy=both, got {text!r}")
    if name == "rob":
        try:
            vals = [int(v) for v in values.split(",")]
        except ValueError:
            raise UsageError(f"bad rob values {values!r}") from None
        if not vals or min(vals) < 1:
            raise UsageError("rob values must be >= 1")
        return "rob", vals
    if name == "strategy":
        if values == "both":
            return "strategy", list(STRATEGIES)
        try:
            return "strategy", [normalize_strategy(v) for v in values.split(",")]
        except ValueError as e:
            raise UsageError(str(e)) from None
    raise UsageError(f"unknown sweep axis {name!r}")


def _sweep_point(job):
    label, program, cfg, gmem, layer_ids, strategy = job
    sim = simulate(program, cfg, gmem_init=gmem)
    report = finalize_report(sim, cfg, layer_ids)
    out = sim.output_bytes() if sim.output else b""
    return label, strategy, cfg, report, hashlib.sha256(out).hexdigest()


def cmd_sweep(args) -> int:
    axis, values = parse_axis(args.axis)
    base = load_cfg(args.config, None, args.dispatch_width)
    net = load_net(args.network)
    gmem = input_bytes(args.input, int(np.prod(net.input_shape)), args.input_seed)
    layer_ids = [l.id for l in net.layers]
    jobs = []
    if axis == "rob":
        # rob size does not change compilation, so one program serves every point
        program = compile_network(net, base, args.strategy).program
        strategy = normalize_strategy(args.strategy)
        for v in values:
            jobs.append((f"rob={v}", program, base.with_overrides(rob_size=v), gmem, layer_ids, strategy))
    else:
        for s in values:
            program = compile_network(net, base, s).program
            jobs.append((f"strategy={s}", program, base, gmem, layer_ids, s))

    results = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_point, j) for j in jobs]
            for job, fut in zip(jobs, futures):
                results.append(_run_point(job[0], fut.result))
    else:
        for job in jobs:
            results.append(_run_point(job[0], lambda job=job: _sweep_point(job)))

    summary = io.StringIO()
    w = csv.writer(summary, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for label, strategy, cfg, r, digest in results:
        w.writerow([label, strategy, cfg.rob_size, cfg.dispatch_width, r.total_cycles,
                    repr(r.latency_s), repr(r.total_energy_pj), repr(r.avg_power_mw), digest])  # fmt: skip
    long_form = emit_reports_csv([(label, r) for label, _s, _c, r, _d in results])
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(summary.getvalue())
        stem, _ = os.path.splitext(args.out)
        with open(stem + "_reports.csv", "w") as fh:
            fh.write(long_form)
    else:
        sys.stdout.write(summary.getvalue())
    return EXIT_OK


class _PointFailure(Exception):
    def __init__(self, label, err):
        self.label = label
        self.err = err
        super().__init__(f"sweep point {label} failed: {err}")


def _run_point(label, fn):
    try:
        return fn()
    except (DeadlockError, SimulationError) as err:
        raise _PointFailure(label, err) from err


# -- entry point ----------------------------------------------------------------------


def _strategy(text: str) -> str:
    try:
        return normalize_strategy(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"invalid strategy {text!r} (choose utilization or performance)"
        ) from None


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pimsim", description="Crossbar processing-in-memory compiler and simulator."
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, strategy=True):
        if strategy:
            sp.add_argument("--strategy", type=_strategy, default="performance-first",
                            help="utilization or performance (default: performance)")  # fmt: skip

    c = sub.add_parser("compile", help="compile a network to assembly + placement report")
    c.add_argument("network", help="network JSON (or a shipped fixture name)")
    c.add_argument("config", help="architecture JSON (or a shipped config name)")
    c.add_argument("--out", default="out", help="output directory (default: out)")
    common(c)

    r = sub.add_parser("run", help="simulate a network or a compiled program")
    r.add_argument("target", help="network JSON, program .asm, or a fixture name")
    r.add_argument("config")
    common(r)
    r.add_argument("--rob-size", type=_positive)
    r.add_argument("--dispatch-width", type=_positive)
    r.add_argument("--input", help="input tensor: raw int8 CHW bytes or .npy")
    r.add_argument("--input-seed", type=int, default=DEFAULT_INPUT_SEED,
                   help="seed for the generated input when --input is absent")  # fmt: skip
    r.add_argument("--net", help="network for --check when running a compiled program")
    r.add_argument("--check", action="store_true", help="compare against the reference")
    r.add_argument("--trace", metavar="FILE", help="write the JSON-lines trace stream")
    r.add_argument("--csv", action="store_true", help="print the report as CSV")
    r.add_argument("--out", metavar="DIR", help="directory for the deadlock state dump")

    s = sub.add_parser("sweep", help="sweep rob size or mapping strategy")
    s.add_argument("network")
    s.add_argument("config")
    s.add_argument("--axis", required=True, help="rob=1,2,4,8,12,16 or strategy=both")
    common(s)
    s.add_argument("--dispatch-width", type=_positive)
    s.add_argument("--input")
    s.add_argument("--input-seed", type=int, default=DEFAULT_INPUT_SEED)
    s.add_argument("--out", metavar="CSV", help="summary CSV path (stdout when absent)")
    s.add_argument("--jobs", type=_positive, default=1, help="parallel worker processes")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"compile": cmd_compile, "run": cmd_run, "sweep": cmd_sweep}[args.command]
    try:
        return handler(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"pimsim: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except _PointFailure as err:
        if isinstance(err.err, DeadlockError):
            print(f"pimsim: {err}", file=sys.stderr)
            return EXIT_DEADLOCK
        print(f"pimsim: {err}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ConfigError, NetworkError, CompileError, asm.AsmError, SimulationError,
            ValueError, OSError) as err:  # fmt: skip
        print(f"pimsim: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
