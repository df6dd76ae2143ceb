"""Timing model for the PIM fleet.

Three layers, each usable on its own:

  * simulate_channel: schedules a single channel's DRAM command stream
    under the GDDR6 timing constraints and returns the finish time plus
    a per-command event log.  Streams with preassigned issue times are
    validated instead of scheduled.
  * closed_form_gemv_latency: analytic oracle for row-per-bank GEMV
    streams; simulate_channel must agree with it exactly.
  * simulate_system: composes compiled per-block activity summaries
    with CXL transfer times into per-token and per-query latencies,
    steady-state throughput, and the activity counts consumed by the
    energy model.
"""

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import compiler
from .compiler import ChannelStats, TraceSummary
from .config import ArchConfig, CxlParams, ModelSpec, TimingParams
from .mapper import MappingPlan


class TimingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# single-channel DRAM command scheduling

#: column commands that move data on the channel data bus
COLUMN_KINDS = frozenset({"MACab", "EWMULab", "RD", "WR", "AFab"})
COMMAND_KINDS = frozenset({"ACTab", "PREab"}) | COLUMN_KINDS


@dataclass
class DramCommand:
    """One channel-level command.  `row is None` marks a buffer-side
    column operation (Global Buffer load or accumulator drain) that
    needs no open DRAM row."""
    kind: str
    channel: int = 0
    banks: tuple = ()            # empty tuple = all banks
    row: Optional[int] = None
    col: Optional[int] = None
    issue_ns: Optional[float] = None

    def __post_init__(self):
        if self.kind not in COMMAND_KINDS:
            raise TimingError(f"unknown command kind {self.kind!r}")


@dataclass
class ChannelTimeline:
    finish_ns: float
    events: list            # DramCommand with issue_ns filled in

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_ns", "channel", "command", "bank", "row", "col"])
            for ev in self.events:
                bank = "all" if not ev.banks else ";".join(map(str, ev.banks))
                w.writerow([f"{ev.issue_ns:.3f}", ev.channel, ev.kind,
                            bank, "" if ev.row is None else ev.row,
                            "" if ev.col is None else ev.col])


def _duration(cmd: DramCommand, t: TimingParams) -> float:
    if cmd.kind == "PREab":
        return t.tRP_ns
    if cmd.kind == "RD":
        return t.tCL_ns
    if cmd.kind == "ACTab":
        return 0.0
    return t.tCCDS_ns


def simulate_channel(commands, t: TimingParams) -> ChannelTimeline:
    """Schedule (or validate) one channel's command stream.

    Auto mode (no issue times given) places every command at its
    earliest legal time.  If any command carries an issue time, all
    must, and each is checked against the constraints implied by its
    predecessors; violations raise TimingError.
    """
    commands = list(commands)
    given = [c.issue_ns is not None for c in commands]
    if any(given) and not all(given):
        raise TimingError("either all or none of the issue times may be set")
    validate = bool(commands) and all(given)

    bus = 0.0               # command bus free (one command per tCCDS)
    col_ready = 0.0         # column data path free
    act_at: Optional[float] = None
    open_row: Optional[int] = None
    bank_ready = 0.0        # precharge completion; gates the next ACTab
    finish = 0.0
    events = []
    for cmd in commands:
        k = cmd.kind
        if k == "ACTab":
            if open_row is not None:
                raise TimingError("ACTab while a row is open")
            earliest = max(bus, bank_ready)
        elif k == "PREab":
            if open_row is None:
                raise TimingError("PREab with no open row")
            earliest = max(bus, col_ready, act_at + t.tRAS_ns)
        elif cmd.row is not None:
            if open_row is None:
                raise TimingError(f"{k} with no open row")
            if cmd.row != open_row:
                raise TimingError(f"{k} row {cmd.row} but row "
                                  f"{open_row} is open")
            trcd = t.tRCDWR_ns if k == "WR" else t.tRCDRD_ns
            earliest = max(bus, col_ready, act_at + trcd)
        elif k == "WR":      # Global Buffer load
            earliest = max(bus, col_ready)
        elif k == "RD":      # accumulator drain; waits for quiescent banks
            earliest = max(bus, col_ready, bank_ready)
        else:
            raise TimingError(f"{k} requires a row target")

        if validate:
            if cmd.issue_ns + 1e-9 < earliest:
                raise TimingError(
                    f"{k} at {cmd.issue_ns} ns violates earliest legal "
                    f"issue {earliest} ns")
            issue = cmd.issue_ns
            ev = cmd
        else:
            issue = earliest
            ev = DramCommand(k, cmd.channel, cmd.banks, cmd.row, cmd.col,
                             issue_ns=issue)

        bus = issue + t.tCCDS_ns
        if k == "ACTab":
            act_at, open_row = issue, cmd.row if cmd.row is not None else -1
        elif k == "PREab":
            bank_ready = issue + t.tRP_ns
            act_at, open_row = None, None
        elif cmd.row is not None:
            col_ready = issue + t.tCCDS_ns
        elif k == "WR":
            col_ready = issue + t.tCCDS_ns
        else:                # accumulator drain: serialized on data return
            col_ready = issue + t.tCL_ns
        finish = max(finish, issue + _duration(cmd, t))
        events.append(ev)

    if t.refresh_enabled and finish > 0:
        finish *= 1.0 + t.tRFC_ns / t.tREFI_ns
    return ChannelTimeline(finish_ns=finish, events=events)


# ---------------------------------------------------------------------------
# analytic GEMV oracle

LANE = 16
COLS_PER_ROW = 64


def bracket_ns(n_cols: int, t: TimingParams) -> float:
    """Activate -> n column commands -> precharge, including recovery."""
    return (t.tRCDRD_ns + max(n_cols * t.tCCDS_ns,
                              t.tRAS_ns - t.tRCDRD_ns) + t.tRP_ns)


def _group_tile_cols(cols: int) -> list:
    """Column-command counts of the DRAM rows holding one 16-row group."""
    slots = math.ceil(cols / LANE)
    tiles = []
    while slots > 0:
        tiles.append(min(slots, COLS_PER_ROW))
        slots -= COLS_PER_ROW
    return tiles


def closed_form_gemv_latency(rows: int, cols: int, channels: int,
                             t: TimingParams) -> float:
    """Latency of a rows x cols GEMV with 16-row groups dealt round-robin
    over `channels`; the slowest channel sets the time."""
    if rows <= 0 or cols <= 0 or channels <= 0:
        raise TimingError("rows, cols, channels must be positive")
    groups = math.ceil(rows / LANE)
    slots = math.ceil(cols / LANE)
    per_bracket = sum(bracket_ns(n, t) for n in _group_tile_cols(cols))
    best = 0.0
    for c in range(channels):
        g = groups // channels + (1 if c < groups % channels else 0)
        if g == 0:
            continue
        ch = slots * t.tCCDS_ns + g * per_bracket + g * t.tCL_ns
        best = max(best, ch)
    if t.refresh_enabled and best > 0:
        best *= 1.0 + t.tRFC_ns / t.tREFI_ns
    return best


def gemv_channel_commands(row_groups: int, cols: int,
                          channel: int = 0) -> list:
    """Command stream of one channel's share of a GEMV: Global Buffer
    load, one activate/precharge bracket per DRAM row, one accumulator
    drain per 16-row group."""
    cmds = [DramCommand("WR", channel, col=i)
            for i in range(math.ceil(cols / LANE))]
    row = 0
    for _ in range(row_groups):
        for n in _group_tile_cols(cols):
            cmds.append(DramCommand("ACTab", channel, row=row))
            cmds.extend(DramCommand("MACab", channel, row=row, col=i)
                        for i in range(n))
            cmds.append(DramCommand("PREab", channel, row=row))
            row += 1
    cmds.extend(DramCommand("RD", channel) for _ in range(row_groups))
    return cmds


# ---------------------------------------------------------------------------
# CXL transfer model

CXL_KINDS = ("P2P", "BROADCAST", "MULTICAST", "GATHER", "SEND")


def cxl_transfer_time(payload_B: float, kind: str, fanout: int,
                      c: CxlParams) -> float:
    """Analytic switch-fabric transfer time in ns.

    P2P streams one copy at full effective bandwidth.  Broadcast and
    multicast pay doubled base latency and half bandwidth for the
    switch-replicated flit stream.  Gather serializes fanout payloads
    on the receiver link.
    """
    bw = c.effective_bandwidth_Bps
    if bw <= 0:
        raise TimingError("effective CXL bandwidth must be positive")
    per_ns = bw / 1e9
    if kind in ("P2P", "SEND"):
        return c.base_latency_ns + payload_B / per_ns
    if kind in ("BROADCAST", "MULTICAST"):
        return (c.multicast_latency_factor * c.base_latency_ns
                + payload_B / (c.multicast_bandwidth_factor * per_ns))
    if kind == "GATHER":
        return c.base_latency_ns + fanout * payload_B / per_ns
    raise TimingError(f"unknown CXL transfer kind {kind!r}")


# ---------------------------------------------------------------------------
# compiled-summary timing

def channel_busy_ns(st: ChannelStats, t: TimingParams) -> float:
    """Bank-array busy time of one channel from its bracket histogram
    plus buffer-load and accumulator-drain serial overheads."""
    ns = st.wr_gb * t.tCCDS_ns + st.rd_mac * t.tCL_ns
    for n_cols, count in st.bracket_hist.items():
        ns += count * bracket_ns(n_cols, t)
    if t.refresh_enabled:
        ns *= 1.0 + t.tRFC_ns / t.tREFI_ns
    return ns


_PNM_OPS = ("EXP", "RED", "ACC")


def device_times(summary: TraceSummary, t: TimingParams,
                 pnm_clock_Hz: float = 2e9) -> dict:
    """Per-device serial time components of one compiled trace."""
    pim = max((channel_busy_ns(st, t) for st in summary.channels.values()),
              default=0.0)
    cycle = 1e9 / pnm_clock_Hz
    pnm = 0.0
    for op in _PNM_OPS:
        insts = summary.instructions.get(op, 0)
        if insts:
            pnm += (insts * t.pnm_fill_cycles
                    + summary.microops.get(op, 0)) * cycle
    for kind, slots in summary.riscv_slots.items():
        pnm += slots * t.rv_cycles.get(kind, 2) * cycle
    dispatch = summary.total_instructions * t.dispatch_ns
    return {"pim": pim, "pnm": pnm, "dispatch": dispatch}


def _merge_counts(dst: Counter, summary: TraceSummary) -> None:
    """Fold one device trace into DRAM-command-level activity counts."""
    mo = summary.microops
    brackets = 0
    for st in summary.channels.values():
        brackets += sum(st.bracket_hist.values())
        dst["WR"] += st.wr_gb
        dst["RD"] += st.rd_mac
    dst["ACTab"] += brackets
    dst["PREab"] += brackets
    dst["MACab"] += mo.get("MAC_ABK", 0)
    dst["EWMULab"] += mo.get("EW_MUL", 0)
    dst["AFab"] += mo.get("AF", 0)
    dst["RD"] += mo.get("RD_SBK", 0) + mo.get("COPY_BKGB", 0)
    dst["WR"] += (mo.get("WR_SBK", 0) + mo.get("WR_ABK", 0)
                  + mo.get("COPY_GBBK", 0) + mo.get("WR_GB", 0))
    dst["PNM"] += summary.pnm_microops
    dst["CXL_B"] += summary.cxl_sent_B


# ---------------------------------------------------------------------------
# system simulation

@dataclass
class SimReport:
    strategy: str
    n_active_devices: int
    dp_replicas: int
    batch_size: int
    prefill_tokens: int
    decode_tokens: int
    seq_gap: int
    token_latency_ns: float       # one full forward pass, last decode position
    token_step_ns: float          # steady-state pipeline step, decode average
    prefill_ns: float             # per query
    decode_ns: float              # per query
    tokens_per_s: float
    breakdown_ns: dict            # {"pim","pnm","dispatch","cxl"} per token
    command_counts: dict          # fleet totals per pipeline step (decode avg)
    flops_per_token: float
    mac_microops_per_token: float
    channel_utilization: dict     # device -> {channel: busy fraction}

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_active_devices": self.n_active_devices,
            "dp_replicas": self.dp_replicas,
            "batch_size": self.batch_size,
            "prefill_tokens": self.prefill_tokens,
            "decode_tokens": self.decode_tokens,
            "seq_gap": self.seq_gap,
            "token_latency_ns": self.token_latency_ns,
            "token_step_ns": self.token_step_ns,
            "prefill_ns": self.prefill_ns,
            "decode_ns": self.decode_ns,
            "tokens_per_s": self.tokens_per_s,
            "breakdown_ns": dict(self.breakdown_ns),
            "command_counts": {k: self.command_counts[k]
                               for k in sorted(self.command_counts)},
            "flops_per_token": self.flops_per_token,
            "mac_microops_per_token": self.mac_microops_per_token,
            "channel_utilization": self.channel_utilization,
        }

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


@dataclass
class _TokenProfile:
    token_ns: float = 0.0
    step_ns: float = 0.0          # max stage latency (pipeline bottleneck)
    pim: float = 0.0
    pnm: float = 0.0
    dispatch: float = 0.0
    cxl: float = 0.0
    counts: Counter = field(default_factory=Counter)
    util: dict = field(default_factory=dict)


def _token_profile(layout, plan: MappingPlan, arch: ArchConfig,
                   pos: int) -> _TokenProfile:
    """Latency and activity of one forward pass at token position `pos`,
    measured on replica 0; replicas are identical by construction."""
    t = arch.timing
    classes = compiler.block_summaries(layout.model, plan, arch, pos, layout)
    by_key = {compiler._structure_key(c.representative): c for c in classes}
    role_times = {}
    for key, cls in by_key.items():
        role_times[key] = {di: device_times(s, t, arch.pnm_clock_Hz)
                           for di, s in cls.device_summaries.items()}

    # replicas reuse block ids; keep replica 0's events only
    rep0 = {d for a in plan.block_assignments if a.replica == 0
            for d in a.devices}
    events_by_block: dict = {}
    for ev in plan.comm_schedule:
        if ev.source in rep0:
            events_by_block.setdefault(ev.block, []).append(ev)

    prof = _TokenProfile()
    stage_ns: dict = {}
    busy: dict = {}
    for bl in layout.blocks:
        key = compiler._structure_key(bl)
        cls = by_key[key]
        if bl.replica == 0:
            times = role_times[key]
            worst = max(times.values(),
                        key=lambda d: d["pim"] + d["pnm"] + d["dispatch"])
            compute = worst["pim"] + worst["pnm"] + worst["dispatch"]
            cxl = 0.0
            for ev in events_by_block.get(bl.block, []):
                if ev.kind == "SEND" and ev.label == "boundary":
                    # inter-stage handoff: charged to the sending stage
                    hop = cxl_transfer_time(ev.payload_B, "P2P", 1, arch.cxl)
                    stage_ns[ev.source] = stage_ns.get(ev.source, 0.0) + hop
                    prof.cxl += hop
                    prof.token_ns += hop
                    continue
                kind = "GATHER" if ev.kind == "GATHER" else "MULTICAST"
                cxl += cxl_transfer_time(ev.payload_B, kind,
                                         len(ev.dests), arch.cxl)
            prof.token_ns += compute + cxl
            prof.pim += worst["pim"]
            prof.pnm += worst["pnm"]
            prof.dispatch += worst["dispatch"]
            prof.cxl += cxl
            stage_ns[bl.master] = stage_ns.get(bl.master, 0.0) + compute + cxl
            for di, dev in enumerate(bl.tp_group):
                summ = cls.device_summaries[di]
                chan_map = dict(zip(cls.representative.assignment.channels[di],
                                    bl.assignment.channels[di]))
                dbusy = busy.setdefault(dev, {})
                for ch_rep, st in summ.channels.items():
                    ch = chan_map.get(ch_rep, ch_rep)
                    dbusy[ch] = dbusy.get(ch, 0.0) + channel_busy_ns(st, t)
        # activity counts cover every replica (energy is fleet-wide)
        for di in range(len(bl.tp_group)):
            _merge_counts(prof.counts, cls.device_summaries[di])
    # boundary handoffs counted for all replicas
    word = layout.arch.word_B
    n_slots = compiler.slots_of(layout.model.d_model)
    n_boundaries = sum(1 for ev in plan.comm_schedule
                       if ev.kind == "SEND" and ev.label == "boundary")
    prof.counts["CXL_B"] += n_boundaries * n_slots * word

    prof.step_ns = max(stage_ns.values(), default=prof.token_ns)
    prof.util = {dev: dict(chs) for dev, chs in busy.items()}
    return prof


def _sample_positions(start: int, n: int, gap: int) -> list:
    """(position, weight) pairs covering [start, start+n) at stride gap."""
    out = []
    p = start
    while p < start + n:
        w = min(gap, start + n - p)
        out.append((p, w))
        p += gap
    return out


def simulate_system(model: ModelSpec, plan: MappingPlan, arch: ArchConfig,
                    prefill_tokens: int, decode_tokens: int,
                    seq_gap: int = 1, layout=None) -> SimReport:
    """Per-token latency, steady-state throughput, and fleet activity for
    one compiled mapping over a prefill + decode schedule.

    Pipeline-parallel plans complete one token per bottleneck-stage
    period in steady state; tensor-parallel plans serialize the whole
    pass per token.  Data-parallel replicas multiply throughput.
    """
    if prefill_tokens < 0 or decode_tokens <= 0 or seq_gap <= 0:
        raise TimingError("need prefill >= 0, decode > 0, seq_gap > 0")
    if prefill_tokens + decode_tokens > plan.context:
        raise TimingError(
            f"{prefill_tokens}+{decode_tokens} tokens exceed plan context "
            f"{plan.context}")
    layout = layout or compiler.build_layout(model, plan, arch)

    prefill_ns = 0.0
    for pos, w in _sample_positions(0, prefill_tokens, seq_gap):
        prefill_ns += w * _token_profile(layout, plan, arch, pos).token_ns

    decode_ns = 0.0
    step_total = 0.0
    counts = Counter()
    agg = Counter()
    last = None
    for pos, w in _sample_positions(prefill_tokens, decode_tokens, seq_gap):
        last = _token_profile(layout, plan, arch, pos)
        decode_ns += w * last.token_ns
        step_total += w * last.step_ns
        for k, v in last.counts.items():
            counts[k] += w * v
        for k in ("pim", "pnm", "dispatch", "cxl"):
            agg[k] += w * getattr(last, k)

    n = decode_tokens
    step_ns = step_total / n
    report = SimReport(
        strategy=plan.strategy,
        n_active_devices=len(plan.active_devices),
        dp_replicas=plan.dp_replicas,
        batch_size=plan.batch_size,
        prefill_tokens=prefill_tokens,
        decode_tokens=decode_tokens,
        seq_gap=seq_gap,
        token_latency_ns=last.token_ns,
        token_step_ns=step_ns,
        prefill_ns=prefill_ns,
        decode_ns=decode_ns,
        tokens_per_s=plan.dp_replicas * 1e9 / step_ns,
        breakdown_ns={k: agg[k] / n for k in
                      ("pim", "pnm", "dispatch", "cxl")},
        command_counts={k: counts[k] / n for k in counts},
        flops_per_token=(counts["MACab"] / n / plan.dp_replicas) * LANE * 32,
        mac_microops_per_token=counts["MACab"] / n / plan.dp_replicas,
        channel_utilization={
            str(dev): {str(ch): b / last.step_ns
                       for ch, b in sorted(chs.items())}
            for dev, chs in sorted(last.util.items())},
    )
    return report
