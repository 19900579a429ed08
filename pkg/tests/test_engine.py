import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES, fixture_input, net_path, run_fixture
from pimsim.asm import parse_asm
from pimsim.compiler import compile_network
from pimsim.config import ArchConfig, TimingParams
from pimsim.engine import DeadlockError, SimulationError, simulate, union_length
from pimsim.isa import HALT, Program
from pimsim.nn import load_network, reseed


def rec_of(sim, core, idx):
    for c, i, _k, _m, issue, done, _l in sim.records:
        if (c, i) == (core, idx):
            return issue, done
    raise KeyError((core, idx))


def test_all_halt_takes_one_scalar_op():
    cfg = ArchConfig(2, 2, 1, 8, 8, timing=TimingParams(scalar_cycles=3))
    p = Program()
    for c in range(4):
        p.core(c).append(HALT())
    assert simulate(p, cfg).total_cycles == 3


def test_identity_mvm_widens_input():
    cfg = ArchConfig(1, 1, 1, 128, 128)
    v = np.arange(-64, 64, dtype=np.int8)
    src = ".core 0\n.group 0 in=128 xbar=0 off=0 out=128\nLOAD 0x0, 0, 128\nMVM g0, 0x0, 0x100\nSTORE 128, 0x100, 512\nHALT\n"
    prog = parse_asm(src)
    prog.cores[0].weights[0] = np.eye(128, dtype=np.int8)
    sim = simulate(prog, cfg, gmem_init=v.tobytes())
    out = np.frombuffer(bytes(sim.gmem[128:640]), dtype="<i4")
    assert out.tolist() == v.astype(np.int32).tolist()
    issue, done = rec_of(sim, 0, 1)
    assert done - issue == 130


def test_group_latency_is_slowest_member():
    cfg = ArchConfig(1, 1, 2, 128, 128)
    src = (
        ".core 0\n.group 0 in=128 xbar=0 off=0 out=128 xbar=1 off=512 out=72\n"
        "MVM g0, 0x0, 0x100\nHALT\n"
    )
    p = parse_asm(src)
    for x in (0, 1):
        p.cores[0].weights[x] = np.zeros((128, 128), dtype=np.int8)
    sim = simulate(p, cfg)
    issue, done = rec_of(sim, 0, 0)
    assert done - issue == 2 + 128


GROUPS = (
    ".core 0\n.group 0 in=4 xbar=0 off=0 out=8\n.group 1 in=4 xbar=1 off=0 out=8\n"
)


def _two_mvms(g2, rob):
    cfg = ArchConfig(1, 1, 2, 8, 8, rob_size=rob)
    p = parse_asm(GROUPS + f"MVM g0, 0x0, 0x40\nMVM g{g2}, 0x8, 0x80\nHALT\n")
    for x in (0, 1):
        p.cores[0].weights[x] = np.ones((8, 8), dtype=np.int8)
    sim = simulate(p, cfg)
    return rec_of(sim, 0, 0), rec_of(sim, 0, 1)


def test_same_group_is_structure_hazard():
    (i0, d0), (i1, _d1) = _two_mvms(0, rob=4)
    assert i1 >= d0


def test_distinct_groups_overlap():
    (i0, d0), (i1, _d1) = _two_mvms(1, rob=4)
    assert i1 < d0


def test_rob_one_is_serial():
    (i0, d0), (i1, _d1) = _two_mvms(1, rob=1)
    assert i1 >= d0


def test_raw_hazard_blocks_overlap():
    cfg = ArchConfig(1, 1, 2, 8, 8, rob_size=8)
    p = parse_asm(GROUPS + "MVM g0, 0x0, 0x40\nVSCALE 0x100, 0x40, 8, 1, 0\nHALT\n")
    for x in (0, 1):
        p.cores[0].weights[x] = np.ones((8, 8), dtype=np.int8)
    sim = simulate(p, cfg)
    assert rec_of(sim, 0, 1)[0] >= rec_of(sim, 0, 0)[1]


def test_war_hazard():
    cfg = ArchConfig(1, 1, 2, 8, 8, rob_size=8)
    p = parse_asm(GROUPS + "MVM g0, 0x0, 0x40\nVRELU 0x2, 0x100, 4\nHALT\n")
    for x in (0, 1):
        p.cores[0].weights[x] = np.ones((8, 8), dtype=np.int8)
    sim = simulate(p, cfg)
    # VRELU writes bytes the MVM is still reading
    assert rec_of(sim, 0, 1)[0] >= rec_of(sim, 0, 0)[1]


def _vec(src, gmem, out_at, n, cfg=None):
    cfg = cfg or ArchConfig(1, 1, 1, 8, 8)
    sim = simulate(parse_asm(".core 0\n" + src + "HALT\n"), cfg, gmem_init=gmem)
    return sim, bytes(sim.gmem[out_at : out_at + n])


def test_vrelu_example():
    _, out = _vec("LOAD 0x0, 0, 3\nVRELU 0x10, 0x0, 3\nSTORE 16, 0x10, 3\n", np.array([-3, 0, 7], np.int8).tobytes(), 16, 3)
    assert np.frombuffer(out, np.int8).tolist() == [0, 0, 7]


def test_vscale_example():
    acc = np.array([1000, -1000, 10**6], dtype="<i4").tobytes()
    _, out = _vec("LOAD 0x0, 0, 12\nVSCALE 0x20, 0x0, 3, 3, 5\nSTORE 16, 0x20, 3\n", acc + bytes(4), 16, 3)
    assert np.frombuffer(out, np.int8).tolist() == [94, -94, 127]


def test_vadd_b_saturates_and_vmax():
    a = np.array([100, -100, 5, -7], np.int8).tobytes()
    b = np.array([100, -100, -9, 3], np.int8).tobytes()
    src = "LOAD 0x0, 0, 8\nVADD.b 0x10, 0x0, 0x4, 4\nVMAX.b 0x14, 0x0, 0x4, 4\nSTORE 8, 0x10, 8\n"
    _, out = _vec(src, a + b, 8, 8)
    v = np.frombuffer(out, np.int8).tolist()
    assert v[:4] == [127, -128, -4, -4]
    assert v[4:] == [100, -100, 5, 3]


def test_vcopy_stride():
    src = "LOAD 0x0, 0, 12\nVCOPY 0x20, 0x1, 4, 3\nSTORE 12, 0x20, 4\n"
    _, out = _vec(src, bytes(range(12)), 12, 4)
    assert list(out) == [1, 4, 7, 10]


def test_vector_timing_formula():
    sim, _ = _vec("VRELU 0x0, 0x100, 256\n", b"", 0, 0)
    issue, done = rec_of(sim, 0, 0)
    assert done - issue == 1 + 256 // 32


def test_vadd_w_overflow_raises():
    big = np.array([2**31 - 1], dtype="<i4").tobytes()
    with pytest.raises(SimulationError, match="overflow"):
        _vec("LOAD 0x0, 0, 4\nVADD.w 0x8, 0x0, 0x0, 1\n", big, 0, 0)


def test_address_fault():
    with pytest.raises(SimulationError, match="address fault"):
        _vec("VRELU 0x0, 0xfffff0, 32\n", b"", 0, 0, ArchConfig(1, 1, 1, 8, 8, local_mem_bytes=64))


SCALAR = """
.core 0
LI r1, 5
SADD r2, r1, r1
LI r3, 0
LI r4, 1
loop: SADD r3, r3, r4
BNE r3, r1, loop
SMUL r5, r2, r3
SSUB r6, r5, r2
BNE r0, r0, never
JMP done
never: LI r7, 99
done: HALT
"""


@pytest.mark.parametrize("rob", [1, 3, 8])
def test_scalar_semantics(rob):
    from pimsim.engine import Engine

    eng = Engine(parse_asm(SCALAR), ArchConfig(1, 1, 1, 8, 8, rob_size=rob))
    eng.run()
    regs = eng.cores[0].regs
    assert (regs[2], regs[3], regs[5], regs[6], regs[7]) == (10, 5, 50, 40, 0)


def test_jump_to_halt():
    sim = simulate(parse_asm(".core 0\nJMP end\nNOP\nNOP\nend: HALT\n"), ArchConfig(1, 1, 1, 8, 8))
    assert [r[3] for r in sim.records] == ["JMP", "HALT"]


def test_missing_send_deadlocks_with_dump():
    p = parse_asm(".core 0\nRECV 1, 0x0, 4, 0\nHALT\n.core 1\nHALT\n")
    with pytest.raises(DeadlockError) as exc:
        simulate(p, ArchConfig(2, 1, 1, 8, 8))
    dump = exc.value.dump
    assert dump["cores"][0]["halted"] is False
    assert dump["cores"][1]["halted"] is True
    assert dump["blocked_transfers"][0]["kind"] == "RECV"


def test_watchdog_gap():
    cfg = ArchConfig(2, 1, 1, 8, 8, watchdog_cycles=5)
    p = parse_asm(".core 0\nLOAD 0x0, 0, 64\nHALT\n")
    with pytest.raises(DeadlockError):
        simulate(p, cfg)


def test_union_length():
    assert union_length([(0, 5), (3, 8), (10, 12)]) == 10
    assert union_length([]) == 0


# -- whole-program properties --------------------------------------------------------


def test_determinism(desk):
    _, x, compiled, a = run_fixture("tiny_resnet", desk)
    b = simulate(compiled.program, desk, gmem_init=x.tobytes(), trace=True)
    c = simulate(compiled.program, desk, gmem_init=x.tobytes(), trace=True)
    assert a.records == b.records == c.records
    assert b.links == c.links
    assert a.total_cycles == b.total_cycles and bytes(a.gmem) == bytes(b.gmem)


def test_timing_independent_of_values(desk):
    net = load_network(net_path("tiny_cnn"))
    _, _, _, a = run_fixture("tiny_cnn", desk, seed=1, net=net)
    other = load_network(net_path("tiny_cnn"))
    reseed(other, 999)
    _, _, _, b = run_fixture("tiny_cnn", desk, seed=2, net=other)
    assert a.total_cycles == b.total_cycles
    assert a.output_bytes() != b.output_bytes()


def test_conservation(desk):
    _, _, compiled, sim = run_fixture("tiny_vgg", desk)
    committed = {}
    for c, i, *_ in sim.records:
        committed[(c, i)] = committed.get((c, i), 0) + 1
    expected = sum(len(cp.instructions) for cp in compiled.program.cores.values())
    assert len(committed) == expected and set(committed.values()) == {1}
    for per in sim.busy_cycles.values():
        assert all(0 <= v <= sim.total_cycles for v in per.values())
    assert sim.total_cycles == max(sim.halt_cycles.values())


def test_serial_consistency(desk):
    cfg = desk.with_overrides(rob_size=1, dispatch_width=1)
    _, _, _, sim = run_fixture("mlp3", cfg)
    per_core = {}
    for c, i, _k, _m, issue, done, _l in sim.records:
        per_core.setdefault(c, []).append((i, issue, done))
    for recs in per_core.values():
        recs.sort()
        for (_, _, d0), (_, i1, _) in zip(recs, recs[1:]):
            assert i1 >= d0


@pytest.mark.parametrize("name", FIXTURES)
@pytest.mark.parametrize("strategy", ["utilization", "performance"])
def test_rob_monotone_on_fixtures(desk, name, strategy):
    net = load_network(net_path(name))
    x = fixture_input(net).tobytes()
    program = compile_network(net, desk, strategy).program
    cycles = [
        simulate(program, desk.with_overrides(rob_size=r), gmem_init=x).total_cycles
        for r in (1, 2, 4, 8, 12, 16)
    ]
    assert cycles == sorted(cycles, reverse=True)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 6))
def test_outputs_independent_of_rob_and_width(rob, width):
    cfg = ArchConfig(4, 4, 16, 32, 32, adcs_per_xbar=4, rob_size=rob, dispatch_width=width, local_mem_bytes=65536)
    net, x, _, sim = run_fixture("tiny_resnet", cfg, strategy="utilization")
    from pimsim.nn import reference_inference

    assert sim.output_bytes() == reference_inference(net, x).tobytes()
