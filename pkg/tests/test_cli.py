import csv
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import cfg_path, net_path
from pimsim.asm import load_program
from pimsim.cli import main
from pimsim.compiler import compile
from pimsim.config import load_config
from pimsim.nn import load_network


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_compile_writes_outputs(tmp_path, capsys, desk):
    code, out, _ = run_cli(capsys, "compile", "mlp3", "desk", "--strategy", "performance", "--out", str(tmp_path))
    assert code == 0
    prog = load_program(tmp_path / "program.asm", (desk.xbar_rows, desk.xbar_cols))
    assert prog == compile(load_network(net_path("mlp3")), desk, "performance")
    report = json.loads((tmp_path / "placement.json").read_text())
    assert report["strategy"] == "performance-first"
    assert [l["layer"] for l in report["layers"]] == [0, 2]


def test_unknown_strategy_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["compile", "mlp3", "desk", "--strategy", "fastest", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_capacity_is_domain_error(tmp_path, capsys):
    small = tmp_path / "small.json"
    small.write_text(json.dumps({"mesh": {"width": 1, "height": 1},
                                 "core": {"xbars_per_core": 1, "xbar_rows": 8, "xbar_cols": 8}}))  # fmt: skip
    code, _, err = run_cli(capsys, "compile", "tiny_cnn", str(small), "--out", str(tmp_path))
    assert code == 1 and "CapacityError" in err


def test_bad_config_is_domain_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    code, _, err = run_cli(capsys, "run", "mlp3", str(bad))
    assert code == 1 and "syntax" in err


def test_run_check_passes(capsys):
    code, out, err = run_cli(capsys, "run", "tiny_cnn", "desk", "--check")
    assert code == 0 and "check passed" in err
    report = json.loads(out)
    assert report["total_cycles"] > 0 and len(report["layers"]) == 6


def test_rob_override(capsys):
    _, a, _ = run_cli(capsys, "run", "tiny_cnn", "desk", "--rob-size", "1", "--check")
    _, b, _ = run_cli(capsys, "run", "tiny_cnn", "desk", "--rob-size", "16", "--check")
    assert json.loads(b)["total_cycles"] <= json.loads(a)["total_cycles"]


def test_deadlock_exit_code(tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", "mismatched_send", "desk", "--out", str(tmp_path))
    assert code == 3
    dump = json.loads((tmp_path / "pimsim-deadlock.json").read_text())
    assert str(tmp_path / "pimsim-deadlock.json") in err
    assert {t["kind"] for t in dump["blocked_transfers"]} == {"RECV"}


def test_run_compiled_program_with_check(tmp_path, capsys):
    run_cli(capsys, "compile", "tiny_resnet", "desk", "--out", str(tmp_path))
    code, _, err = run_cli(capsys, "run", str(tmp_path / "program.asm"), "desk", "--net", "tiny_resnet", "--check")
    assert code == 0, err


def test_check_reports_first_mismatch(tmp_path, capsys):
    run_cli(capsys, "compile", "mlp3", "desk", "--out", str(tmp_path))
    asm = tmp_path / "program.asm"
    text = asm.read_text()
    # perturb the final requantization shift
    asm.write_text(text.replace("VSCALE 0x0, 0x2c, 10, 1, 8", "VSCALE 0x0, 0x2c, 10, 1, 9"))
    assert asm.read_text() != text
    code, _, err = run_cli(capsys, "run", str(asm), "desk", "--net", "mlp3", "--check")
    assert code == 1 and "check failed at index" in err


def test_check_needs_net_for_programs(tmp_path, capsys):
    run_cli(capsys, "compile", "mlp3", "desk", "--out", str(tmp_path))
    code, _, _ = run_cli(capsys, "run", str(tmp_path / "program.asm"), "desk", "--check")
    assert code == 2


def test_run_is_deterministic(tmp_path, capsys):
    outs = []
    for i in range(2):
        trace = tmp_path / f"t{i}.jsonl"
        code, out, _ = run_cli(capsys, "run", "tiny_vgg", "desk", "--trace", str(trace))
        assert code == 0
        outs.append((out, trace.read_bytes()))
    assert outs[0] == outs[1]
    lines = outs[0][1].decode().splitlines()
    first = json.loads(lines[0])
    assert set(first) == {"core", "index", "class", "op", "issue", "complete", "layer"}
    assert any("link" in json.loads(l) for l in lines)


def test_csv_report(capsys):
    code, out, _ = run_cli(capsys, "run", "mlp3", "desk", "--csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0 and rows[0] == ["scope", "metric", "value"]
    assert ["chip", "frequency_hz", "1000000000"] in rows


def test_input_file(tmp_path, capsys):
    net = load_network(net_path("mlp3"))
    x = np.arange(64, dtype=np.int8) - 32
    raw = tmp_path / "x.bin"
    raw.write_bytes(x.tobytes())
    npy = tmp_path / "x.npy"
    np.save(npy, x.reshape(64, 1, 1))
    assert run_cli(capsys, "run", "mlp3", "desk", "--input", str(raw), "--check")[0] == 0
    assert run_cli(capsys, "run", "mlp3", "desk", "--input", str(npy), "--check")[0] == 0
    raw.write_bytes(b"\x00" * 3)
    assert run_cli(capsys, "run", "mlp3", "desk", "--input", str(raw))[0] == 1


def test_seed_env_changes_values_not_timing(monkeypatch, capsys):
    _, base, _ = run_cli(capsys, "run", "tiny_cnn", "desk", "--check")
    monkeypatch.setenv("PIMSIM_SEED", "4242")
    code, reseeded, _ = run_cli(capsys, "run", "tiny_cnn", "desk", "--check")
    assert code == 0
    assert json.loads(base)["total_cycles"] == json.loads(reseeded)["total_cycles"]
    monkeypatch.setenv("PIMSIM_SEED", "nope")
    assert run_cli(capsys, "run", "tiny_cnn", "desk")[0] == 2


def _summary(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_rob_sweep(tmp_path, capsys):
    out = tmp_path / "rob.csv"
    code, _, _ = run_cli(capsys, "sweep", "tiny_cnn", "desk", "--axis", "rob=1,2,4,8,12,16", "--out", str(out))
    assert code == 0
    rows = _summary(out)
    cycles = [int(r["total_cycles"]) for r in rows]
    assert [r["rob_size"] for r in rows] == ["1", "2", "4", "8", "12", "16"]
    assert cycles == sorted(cycles, reverse=True)
    assert len({r["output_sha256"] for r in rows}) == 1
    long_rows = list(csv.reader(open(tmp_path / "rob_reports.csv")))
    assert long_rows[0] == ["point", "scope", "metric", "value"]


def test_strategy_sweep(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert run_cli(capsys, "sweep", "tiny_vgg", "desk", "--axis", "strategy=both", "--out", str(out))[0] == 0
    rows = {r["strategy"]: r for r in _summary(out)}
    assert int(rows["performance-first"]["total_cycles"]) < int(rows["utilization-first"]["total_cycles"])


def test_sweep_parallel_matches_serial(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run_cli(capsys, "sweep", "mlp3", "desk", "--axis", "rob=16,1,4", "--out", str(a))
    run_cli(capsys, "sweep", "mlp3", "desk", "--axis", "rob=16,1,4", "--out", str(b), "--jobs", "3")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a_reports.csv").read_bytes() == (tmp_path / "b_reports.csv").read_bytes()
    assert [r["rob_size"] for r in _summary(a)] == ["16", "1", "4"]


@pytest.mark.parametrize("axis", ["rob=0", "rob=a", "width=2", "strategy=fast", "rob"])
def test_bad_axis(axis, capsys):
    assert run_cli(capsys, "sweep", "mlp3", "desk", "--axis", axis)[0] == 2


def test_sweep_point_failure_is_named(tmp_path, capsys):
    cfg = json.loads(open(cfg_path("desk")).read())
    cfg["system"]["watchdog_cycles"] = 3
    path = tmp_path / "wd.json"
    path.write_text(json.dumps(cfg))
    code, _, err = run_cli(capsys, "sweep", "mlp3", str(path), "--axis", "rob=1,2")
    assert code == 3 and "rob=1" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "pimsim.cli", "run", "mlp3", "desk", "--check", "--csv"],
        capture_output=True, text=True, check=False,
    )  # fmt: skip
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("scope,metric,value")
