from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from conftest import FIXTURES, fixture_input, net_path
from netgen import network_docs
from pimsim import isa
from pimsim.compiler import (
    CapacityError, MemoryOverflowError, allocate_memory, check_placement, compile,
    compile_network, map_performance_first, map_tiles, map_utilization_first, tile_matrix,
)  # fmt: skip
from pimsim.compiler.codegen import avg_pool_quant, hwc_permutation
from pimsim.config import ArchConfig
from pimsim.engine import simulate
from pimsim.nn import generate_weights, load_network, network_from_dict, reference_inference, round_div, round_shift

P128 = ArchConfig(8, 8, 512, 128, 128)


def cfg_with(xbars, cores=4, rows=8, cols=8, **kw):
    return ArchConfig(cores, 1, xbars, rows, cols, **kw)


# -- tiling -------------------------------------------------------------------------


def test_tile_300_by_200():
    t = tile_matrix(300, 200, P128)
    assert (t.row_blocks, t.col_blocks, len(t.tiles)) == (3, 2, 6)
    assert t.rows_used(2) == 44 and t.cols_used(1) == 72


def test_tile_exact_and_degenerate():
    assert len(tile_matrix(128, 128, P128).tiles) == 1
    one = tile_matrix(1, 1, P128).tiles
    assert len(one) == 1 and (one[0].rows_used, one[0].cols_used) == (1, 1)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 700), st.integers(1, 700), st.integers(8, 128), st.integers(8, 128))
def test_tiling_covers_matrix_once(rows, cols, xr, xc):
    cfg = ArchConfig(1, 1, 1, xr, xc)
    t = tile_matrix(rows, cols, cfg)
    assert len(t.tiles) == t.row_blocks * t.col_blocks
    for cb in range(t.col_blocks):
        assert sum(t.tile(rb, cb).rows_used for rb in range(t.row_blocks)) == rows
    for rb in range(t.row_blocks):
        assert sum(t.tile(rb, cb).cols_used for cb in range(t.col_blocks)) == cols
    assert sum(x.rows_used * x.cols_used for x in t.tiles) == rows * cols
    assert all(1 <= x.rows_used <= xr and 1 <= x.cols_used <= xc for x in t.tiles)


# -- mapping ------------------------------------------------------------------------


def tilings_for(counts, cols_per_tile=8):
    # each layer is one row of `count` column blocks
    cfg = cfg_with(1)
    return [tile_matrix(8, n * cols_per_tile, cfg, lid) for lid, n in enumerate(counts)]


def per_core(placement):
    out = defaultdict(Counter)
    for (lid, _rb, _cb), (core, _x) in placement.assign.items():
        out[core][lid] += 1
    return {c: dict(v) for c, v in out.items()}


def test_utilization_first_example():
    p = map_utilization_first(tilings_for([6, 5, 3]), cfg_with(8))
    assert per_core(p) == {0: {0: 6, 1: 2}, 1: {1: 3, 2: 3}}


def test_performance_first_example():
    p = map_performance_first(tilings_for([6, 5, 3]), cfg_with(8))
    assert per_core(p) == {0: {0: 6}, 1: {1: 5}, 2: {2: 3}}


def test_split_600_tiles():
    t = [tile_matrix(128, 600 * 128, P128, 0)]
    p = map_utilization_first(t, P128)
    assert per_core(p) == {0: {0: 512}, 1: {0: 88}}


def test_single_tile_lands_on_core0_xbar0():
    p = map_utilization_first(tilings_for([1]), cfg_with(8))
    assert list(p.assign.values()) == [(0, 0)]


def test_performance_first_closes_partial_core():
    p = map_performance_first(tilings_for([9, 1]), cfg_with(8))
    assert per_core(p) == {0: {0: 8}, 1: {0: 1}, 2: {1: 1}}


def test_capacity_errors():
    with pytest.raises(CapacityError):
        map_performance_first(tilings_for([1] * 65), ArchConfig(8, 8, 8, 8, 8))
    with pytest.raises(CapacityError):
        map_utilization_first(tilings_for([9]), cfg_with(2))


def test_lowest_free_xbar_order():
    p = map_utilization_first(tilings_for([3, 2]), cfg_with(4))
    assert [p.assign[(l, 0, c)] for l, c in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]] == [
        (0, 0), (0, 1), (0, 2), (0, 3), (1, 0)
    ]


layer_counts = st.lists(st.integers(1, 40), min_size=1, max_size=12)


@settings(max_examples=1000, deadline=None)
@given(layer_counts, st.integers(1, 16), st.integers(1, 64))
def test_utilization_first_invariants(counts, per, cores):
    cfg = cfg_with(per, cores)
    tilings = tilings_for(counts)
    if sum(counts) > per * cores:
        with pytest.raises(CapacityError):
            map_utilization_first(tilings, cfg)
        return
    p = map_utilization_first(tilings, cfg)
    assert check_placement(p, cfg) == []
    used = Counter(c for c, _ in p.assign.values())
    last = max(used)
    assert all(used[c] == per for c in range(last))
    assert set(used) == set(range(last + 1))
    # tiles of a layer occupy consecutive slots in (row_block, col_block) order
    slots = [p.assign[(t.layer_id, x.row_block, x.col_block)] for t in tilings for x in t.tiles]
    assert [c * per + x for c, x in slots] == list(range(sum(counts)))


@settings(max_examples=1000, deadline=None)
@given(layer_counts, st.integers(1, 16), st.integers(1, 64))
def test_performance_first_invariants(counts, per, cores):
    cfg = cfg_with(per, cores)
    tilings = tilings_for(counts)
    need = sum(-(-n // per) for n in counts)
    if need > cores:
        with pytest.raises(CapacityError):
            map_performance_first(tilings, cfg)
        return
    p = map_performance_first(tilings, cfg)
    assert check_placement(p, cfg) == []
    for core in p.used_cores():
        assert len(p.layers_on(core)) == 1
    # fresh cores are claimed in layer order, lowest index first
    firsts = [min(p.cores_of(lid)) for lid in range(len(counts))]
    assert firsts == sorted(firsts) and firsts[0] == 0
    assert p.used_cores() == list(range(need))


def test_groups_split_per_core():
    # one row block whose 5 column tiles straddle two cores
    cfg = cfg_with(3, rows=8, cols=8)
    p = map_utilization_first([tile_matrix(8, 40, cfg, 0)], cfg)
    groups = p.groups()
    assert [len(g.members) for g in groups[0]] == [3]
    assert [len(g.members) for g in groups[1]] == [2]
    for gs in groups.values():
        for g in gs:
            assert len({(g.layer_id, g.row_block)}) == 1
            offs = [m[2] for m in g.members]
            assert offs == sorted(offs) and offs[0] == 0


# -- memory -------------------------------------------------------------------------


def test_allocate_single_group():
    mem = allocate_memory({0: [("in", 128), ("psum", 512)]}, cfg_with(1, local_mem_bytes=4096))
    (a0, n0), (a1, n1) = mem[0]["in"], mem[0]["psum"]
    assert (n0, n1) == (128, 512) and (a0 + n0 <= a1 or a1 + n1 <= a0)


def test_allocate_two_groups_disjoint_and_aligned():
    req = {0: [("in0", 7), ("ps0", 20), ("in1", 5), ("ps1", 12)]}
    spans = sorted(allocate_memory(req, cfg_with(1, local_mem_bytes=4096))[0].values())
    assert all(a % 4 == 0 for a, _ in spans)
    assert all(a0 + n0 <= a1 for (a0, n0), (a1, _) in zip(spans, spans[1:]))


def test_allocate_overflow():
    with pytest.raises(MemoryOverflowError) as exc:
        allocate_memory({3: [("x", 100), ("y", 100)]}, cfg_with(1, local_mem_bytes=150))
    assert (exc.value.core, exc.value.required, exc.value.available) == (3, 200, 150)


# -- code generation ----------------------------------------------------------------


def _net(input_shape, layers):
    return network_from_dict({"name": "t", "input_shape": input_shape, "layers": layers})


def _mnemonics(prog, core):
    return [i.mnemonic for i in prog.cores[core].instructions]


def test_minimal_fc_pipeline():
    net = _net([8, 1, 1], [{"type": "fc", "out_features": 6, "weight_seed": 3, "quant": {"shift": 4}}])
    prog = compile(net, cfg_with(1))
    assert _mnemonics(prog, 0) == ["LOAD", "MVM", "VSCALE", "STORE", "HALT"]
    assert all(_mnemonics(prog, c) == ["HALT"] for c in range(1, 4))


def test_split_fc_reduction():
    net = _net([24, 1, 1], [{"type": "fc", "out_features": 8, "weight_seed": 3, "quant": {"shift": 6}}])
    cfg = cfg_with(2)
    c = compile_network(net, cfg, "utilization")
    assert c.placement.cores_of(0) == [0, 1]
    m0, m1 = _mnemonics(c.program, 0), _mnemonics(c.program, 1)
    assert m0.count("VADD.w") == 2 and m0.count("RECV") == 1
    assert m1 == ["LOAD", "MVM", "SEND", "HALT"]
    x = fixture_input(net)
    sim = simulate(c.program, cfg, gmem_init=x.tobytes())
    assert sim.output_bytes() == reference_inference(net, x).tobytes()


def test_residual_add_receives_both_operands():
    q = {"shift": 5}
    net = _net([2, 3, 3], [
        {"id": 0, "type": "conv", "out_channels": 2, "kernel": 1, "weight_seed": 1, "quant": q},
        {"id": 1, "type": "conv", "out_channels": 2, "kernel": 1, "weight_seed": 2, "quant": q},
        {"id": 2, "type": "add", "producers": [0, 1]},
        {"id": 3, "type": "conv", "out_channels": 2, "kernel": 1, "weight_seed": 3, "quant": q},
    ])
    c = compile_network(net, cfg_with(1), "performance")
    home = c.homes[2]
    assert home not in (c.homes[0], c.homes[1])
    insts = c.program.cores[home].instructions
    first_add = next(i for i, x in enumerate(insts) if x.mnemonic == "VADD.b")
    srcs = {x.src_core for x in insts[:first_add] if isinstance(x, isa.RECV)}
    assert srcs == {c.homes[0], c.homes[1]}


def test_every_instruction_carries_a_layer(desk):
    prog = compile(load_network(net_path("tiny_vgg")), desk, "utilization")
    for cp in prog.cores.values():
        for inst, tag in zip(cp.instructions, cp.layers):
            assert (tag is None) == isinstance(inst, isa.HALT)


@pytest.mark.parametrize("name", FIXTURES)
@pytest.mark.parametrize("strategy", ["utilization", "performance"])
def test_fixtures_validate(desk, chip64, name, strategy):
    net = load_network(net_path(name))
    for cfg in (desk, chip64):
        c = compile_network(net, cfg, strategy)
        assert isa.validate_program(c.program, cfg) == []
        assert check_placement(c.placement, cfg) == []


def test_strategies_place_differently(desk):
    net = load_network(net_path("mlp3"))
    u = compile_network(net, desk, "utilization").placement
    p = compile_network(net, desk, "performance").placement
    assert u.used_cores() == [0] and p.used_cores() == [0, 1]


def test_capacity_exceeded_through_compile():
    with pytest.raises(CapacityError):
        compile(load_network(net_path("tiny_cnn")), cfg_with(2, cores=2))


def test_memory_overflow_through_compile():
    cfg = ArchConfig(4, 4, 16, 32, 32, local_mem_bytes=512)
    with pytest.raises(MemoryOverflowError):
        compile(load_network(net_path("tiny_cnn")), cfg)


def test_compile_is_deterministic(desk):
    from pimsim.asm import emit_asm

    net = load_network(net_path("tiny_resnet"))
    assert emit_asm(compile(net, desk)) == emit_asm(compile(net, desk))


def test_tag_discipline_static(desk):
    prog = compile(load_network(net_path("tiny_resnet")), desk, "performance")
    sends, recvs = defaultdict(list), defaultdict(list)
    for cid, cp in prog.cores.items():
        for inst in cp.instructions:
            if isinstance(inst, isa.SEND):
                sends[(cid, inst.dst_core)].append(inst.tag)
            elif isinstance(inst, isa.RECV):
                recvs[(inst.src_core, cid)].append(inst.tag)
    assert sends.keys() == recvs.keys() and sends
    for pair in sends:
        assert sends[pair] == recvs[pair] == list(range(len(sends[pair])))


def test_report_document(desk):
    c = compile_network(load_network(net_path("tiny_cnn")), desk, "utilization")
    doc = c.report()
    assert doc["strategy"] == "utilization-first"
    assert {l["layer"] for l in doc["layers"]} == {0, 3, 5}
    for core, bufs in doc["memory"].items():
        spans = sorted((b["addr"], b["bytes"]) for b in bufs)
        assert all(a0 + n0 <= a1 for (a0, n0), (a1, _) in zip(spans, spans[1:]))


@pytest.mark.parametrize("window", [1, 2, 3, 4, 5, 6, 7, 8, 9, 16, 25])
def test_avg_pool_reciprocal_exhaustive(window):
    mult, shift = avg_pool_quant(window)
    xs = np.arange(-128 * window, 127 * window + 1)
    assert np.array_equal(round_shift(xs * mult, shift), round_div(xs, window))


def test_hwc_permutation():
    perm = hwc_permutation(2, 2, 3)
    # row (ky, kx, c) of the permuted matrix is row (c, ky, kx) of the original
    assert perm[0] == 0 and perm[1] == 6 and perm[2] == 1
    assert sorted(perm.tolist()) == list(range(12))


@settings(max_examples=120, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(
    network_docs(),
    st.sampled_from(["utilization", "performance"]),
    st.integers(1, 8),
    st.sampled_from([(4, 8, 8, 1), (3, 5, 6, 2), (2, 16, 16, 4)]),
)
def test_random_networks_bit_exact(doc, strategy, rob, geometry):
    xbars, rows, cols, adcs = geometry
    cfg = ArchConfig(4, 4, xbars, rows, cols, adcs_per_xbar=adcs, rob_size=rob, local_mem_bytes=1 << 20)
    net = network_from_dict(doc)
    try:
        prog = compile(net, cfg, strategy)
    except CapacityError:
        assume(False)
    x = generate_weights(3, 1, int(np.prod(net.input_shape))).reshape(-1)
    sim = simulate(prog, cfg, gmem_init=x.tobytes())
    assert sim.output_bytes() == reference_inference(net, x).tobytes()
