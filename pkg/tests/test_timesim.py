import dataclasses
import math
import random

import pytest

from cxlpim import compiler, isa, mapper
from cxlpim.compiler import ChannelStats
from cxlpim.config import ArchConfig, CxlParams, ModelSpec, TimingParams
from cxlpim.timesim import (
    DramCommand, TimingError, bracket_ns, channel_busy_ns,
    closed_form_gemv_latency, cxl_transfer_time, device_times,
    gemv_channel_commands, simulate_channel, simulate_system,
)

T = TimingParams()
ARCH = ArchConfig()

TINY = ModelSpec(name="tiny", n_layers=2, d_model=128, n_heads=2,
                 n_kv_heads=1, d_head=64, d_ff=2048, max_context=64)

LLAMA_70B = ModelSpec(name="llama2-70b", n_layers=80, d_model=8192,
                      n_heads=64, n_kv_heads=8, d_head=128, d_ff=28672)


def bracket(n_cols, row=0, channel=0):
    return ([DramCommand("ACTab", channel, row=row)]
            + [DramCommand("MACab", channel, row=row, col=i)
               for i in range(n_cols)]
            + [DramCommand("PREab", channel, row=row)])


# ---------------------------------------------------------------------------
# simulate_channel

def test_single_mac_bracket_is_tras_bound():
    # PREab waits for tRAS; 18 + max(1, 27-18) + 16 = 43
    assert simulate_channel(bracket(1), T).finish_ns == 43.0


def test_full_row_bracket_is_execution_bound():
    assert simulate_channel(bracket(64), T).finish_ns == 98.0


def test_empty_stream():
    assert simulate_channel([], T).finish_ns == 0.0


def test_issue_times_auto_scheduled():
    tl = simulate_channel(bracket(2), T)
    assert [e.issue_ns for e in tl.events] == [0.0, 18.0, 19.0, 27.0]


def test_scheduled_log_passes_validation():
    tl = simulate_channel(bracket(64), T)
    again = simulate_channel(tl.events, T)
    assert again.finish_ns == tl.finish_ns


def test_validation_rejects_early_column():
    cmds = [DramCommand("ACTab", row=0, issue_ns=0.0),
            DramCommand("MACab", row=0, col=0, issue_ns=10.0)]
    with pytest.raises(TimingError, match="violates"):
        simulate_channel(cmds, T)


def test_validation_rejects_early_precharge():
    cmds = [DramCommand("ACTab", row=0, issue_ns=0.0),
            DramCommand("PREab", row=0, issue_ns=20.0)]
    with pytest.raises(TimingError, match="violates"):
        simulate_channel(cmds, T)


def test_later_than_earliest_is_legal():
    cmds = [DramCommand("ACTab", row=0, issue_ns=5.0),
            DramCommand("MACab", row=0, col=0, issue_ns=40.0),
            DramCommand("PREab", row=0, issue_ns=50.0)]
    assert simulate_channel(cmds, T).finish_ns == 66.0


def test_mixed_issue_times_rejected():
    cmds = [DramCommand("ACTab", row=0, issue_ns=0.0),
            DramCommand("PREab", row=0)]
    with pytest.raises(TimingError, match="all or none"):
        simulate_channel(cmds, T)


def test_column_without_activate_rejected():
    with pytest.raises(TimingError, match="no open row"):
        simulate_channel([DramCommand("MACab", row=0, col=0)], T)


def test_activate_while_open_rejected():
    cmds = [DramCommand("ACTab", row=0), DramCommand("ACTab", row=1)]
    with pytest.raises(TimingError, match="row is open"):
        simulate_channel(cmds, T)


def test_wrong_row_rejected():
    cmds = [DramCommand("ACTab", row=0), DramCommand("RD", row=3, col=0)]
    with pytest.raises(TimingError, match="row 3"):
        simulate_channel(cmds, T)


def test_unknown_kind_rejected():
    with pytest.raises(TimingError, match="unknown command"):
        DramCommand("NOP")


def test_write_uses_trcdwr():
    cmds = [DramCommand("ACTab", row=0), DramCommand("WR", row=0, col=0)]
    tl = simulate_channel(cmds, T)
    assert tl.events[1].issue_ns == T.tRCDWR_ns


def test_adding_commands_never_decreases_finish():
    base = bracket(8)
    f0 = simulate_channel(base, T).finish_ns
    f1 = simulate_channel(base + bracket(8, row=1), T).finish_ns
    assert f1 >= f0


def test_event_log_csv(tmp_path):
    tl = simulate_channel(bracket(1), T)
    out = tmp_path / "events.csv"
    tl.write_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "time_ns,channel,command,bank,row,col"
    assert lines[1].startswith("0.000,0,ACTab,all,0,")
    assert len(lines) == 4


# ---------------------------------------------------------------------------
# closed-form GEMV oracle

def test_closed_form_16x8192():
    # 8 DRAM rows of 64 columns: 8 x 98 = 784 ns of bracket time, plus
    # 512 Global Buffer loads and one accumulator drain
    assert closed_form_gemv_latency(16, 8192, 1, T) == 784 + 512 + 25


def test_closed_form_16x16():
    assert closed_form_gemv_latency(16, 16, 1, T) == 43 + 1 + 25


def test_doubling_channels_halves_bracket_term():
    one = closed_form_gemv_latency(128, 4096, 1, T)
    two = closed_form_gemv_latency(128, 4096, 2, T)
    io = 256 * T.tCCDS_ns
    assert one - io == 2 * (two - io)


def test_closed_form_rejects_bad_shapes():
    with pytest.raises(TimingError):
        closed_form_gemv_latency(0, 16, 1, T)
    with pytest.raises(TimingError):
        closed_form_gemv_latency(16, 16, 0, T)


def test_simulator_matches_closed_form_200_random_shapes():
    rng = random.Random(20240229)
    for _ in range(200):
        rows = rng.randrange(1, 700)
        cols = rng.randrange(1, 5000)
        channels = rng.randrange(1, 9)
        groups = math.ceil(rows / 16)
        per = [groups // channels + (1 if c < groups % channels else 0)
               for c in range(channels)]
        sim = max((simulate_channel(gemv_channel_commands(g, cols), T).finish_ns
                   for g in per if g), default=0.0)
        assert sim == closed_form_gemv_latency(rows, cols, channels, T), \
            (rows, cols, channels)


def test_latency_monotone_in_every_timing_parameter():
    base = closed_form_gemv_latency(64, 2048, 2, T)
    for name in ("tRCDRD_ns", "tRAS_ns", "tCL_ns", "tCCDS_ns", "tRP_ns"):
        bumped = dataclasses.replace(T, **{name: getattr(T, name) + 4})
        assert closed_form_gemv_latency(64, 2048, 2, bumped) >= base


def test_refresh_inflates_latency():
    on = dataclasses.replace(T, refresh_enabled=True)
    assert (closed_form_gemv_latency(16, 1024, 1, on)
            > closed_form_gemv_latency(16, 1024, 1, T))
    assert (simulate_channel(gemv_channel_commands(1, 1024), on).finish_ns
            == closed_form_gemv_latency(16, 1024, 1, on))


def test_channel_busy_matches_closed_form():
    # 32x2048 on one channel: 2 groups x 2 row tiles, 128 buffer loads,
    # 2 accumulator drains
    st = ChannelStats(col_cmds=256, wr_gb=128, rd_mac=2)
    st.bracket_hist[64] = 4
    assert channel_busy_ns(st, T) == closed_form_gemv_latency(32, 2048, 1, T)


def test_bracket_floor_is_tras_plus_trp():
    assert bracket_ns(1, T) == 43.0
    assert bracket_ns(9, T) == 43.0
    assert bracket_ns(10, T) == 44.0


# ---------------------------------------------------------------------------
# CXL transfer model

CXL = CxlParams()


def test_p2p_16kb():
    assert cxl_transfer_time(16384, "P2P", 1, CXL) == pytest.approx(968.9, 0.001)


def test_multicast_doubles_latency_halves_bandwidth():
    assert cxl_transfer_time(16384, "MULTICAST", 31, CXL) == pytest.approx(
        1937.8, 0.001)


def test_gather_serializes_on_receiver():
    one = cxl_transfer_time(4096, "GATHER", 1, CXL)
    four = cxl_transfer_time(4096, "GATHER", 4, CXL)
    assert four - CXL.base_latency_ns == pytest.approx(
        4 * (one - CXL.base_latency_ns), rel=1e-12)


def test_zero_fanout_gather_is_base_latency():
    assert cxl_transfer_time(4096, "GATHER", 0, CXL) == CXL.base_latency_ns


def test_unknown_transfer_kind():
    with pytest.raises(TimingError, match="kind"):
        cxl_transfer_time(4096, "ALLTOALL", 1, CXL)


# ---------------------------------------------------------------------------
# system simulation

def tiny_pp_report(**kw):
    plan = mapper.plan_pipeline(TINY, ARCH, 64, n_devices=2)
    args = dict(prefill_tokens=4, decode_tokens=8, seq_gap=1)
    args.update(kw)
    return simulate_system(TINY, plan, ARCH, **args)


def test_tiny_pipeline_report_shape():
    rep = tiny_pp_report()
    assert rep.tokens_per_s > 0
    assert rep.prefill_ns > 0 and rep.decode_ns > 0
    assert rep.token_latency_ns > rep.token_step_ns
    total = sum(rep.breakdown_ns.values())
    assert rep.token_latency_ns == pytest.approx(total, rel=1e-9)
    # near-bank command streams dominate the latency budget
    assert rep.breakdown_ns["pim"] > 0.5 * total


def test_report_is_deterministic():
    assert tiny_pp_report().to_dict() == tiny_pp_report().to_dict()


def test_report_round_trips_to_json(tmp_path):
    rep = tiny_pp_report()
    out = tmp_path / "report.json"
    rep.save(out)
    import json
    d = json.loads(out.read_text())
    assert d["tokens_per_s"] == rep.tokens_per_s
    assert d["command_counts"]["MACab"] == rep.command_counts["MACab"]


def test_attention_growth_raises_latency():
    early = tiny_pp_report(prefill_tokens=0, decode_tokens=4)
    late = tiny_pp_report(prefill_tokens=40, decode_tokens=4)
    assert late.token_latency_ns > early.token_latency_ns
    assert late.tokens_per_s < early.tokens_per_s


def test_seq_gap_sampling_stays_close():
    dense = tiny_pp_report(decode_tokens=16, seq_gap=1)
    coarse = tiny_pp_report(decode_tokens=16, seq_gap=8)
    assert coarse.decode_ns == pytest.approx(dense.decode_ns, rel=0.05)


def test_data_parallel_replica_doubles_throughput():
    one = mapper.plan_scaled(TINY, ARCH, 1, context=64)
    two = mapper.plan_scaled(TINY, ARCH, 2, context=64)
    assert two.dp_replicas == 2
    r1 = simulate_system(TINY, one, ARCH, 0, 8)
    r2 = simulate_system(TINY, two, ARCH, 0, 8)
    assert r2.tokens_per_s == 2 * r1.tokens_per_s
    assert r2.command_counts["MACab"] == 2 * r1.command_counts["MACab"]
    assert r2.flops_per_token == r1.flops_per_token


def test_bad_query_shapes_rejected():
    with pytest.raises(TimingError):
        tiny_pp_report(decode_tokens=0)
    with pytest.raises(TimingError):
        tiny_pp_report(prefill_tokens=60, decode_tokens=8)  # context 64
    with pytest.raises(TimingError):
        tiny_pp_report(seq_gap=0)


def test_gemv_work_conservation():
    # every MAC micro-op is 16 bank-columns x 16 lanes x mul-add
    pl = compiler.TensorPlacement(
        name="w", kind=compiler.KIND_GEMV, device=0, channels=(0,),
        rows=16, cols=1024, base_row=0)
    insts = compiler.lower_gemv(16, 1024, pl, vec_slot=0, cfg=ARCH)
    mac = sum(isa.microop_count(i, ARCH) for i in insts
              if i.opcode == "MAC_ABK")
    assert mac * 16 * 32 == 2 * 16 * 1024


@pytest.mark.slow
def test_70b_tensor_vs_hybrid_breakdown():
    # wider tensor parallelism trades bank time for fabric time
    tp32 = mapper.plan_tensor(LLAMA_70B, ARCH, 4096)
    tp8 = mapper.plan_hybrid(LLAMA_70B, ARCH, tp=8, pp=4, context=4096)
    r32 = simulate_system(LLAMA_70B, tp32, ARCH, 0, 1)
    r8 = simulate_system(LLAMA_70B, tp8, ARCH, 0, 1)
    assert r32.breakdown_ns["pim"] < r8.breakdown_ns["pim"]
    assert r32.breakdown_ns["cxl"] > r8.breakdown_ns["cxl"]


@pytest.mark.slow
def test_70b_pipeline_steady_state():
    plan = mapper.plan_pipeline(LLAMA_70B, ARCH, 4096)
    rep = simulate_system(LLAMA_70B, plan, ARCH, 0, 1, layout=None)
    # bottleneck stage is a 3-block device; all tokens flow through it
    assert rep.tokens_per_s == pytest.approx(1e9 / rep.token_step_ns)
    per_block = [v for v in rep.breakdown_ns.values()]
    assert rep.token_step_ns < rep.token_latency_ns / 20
