"""Lowers transformer blocks and whole token iterations to device traces.

Dataflow per block (all within one device group):
  RMSNorm -> fused QKV GEMV -> RoPE -> per-head attention (score GEMV,
  stabilized softmax, score x V GEMV) -> output projection -> residual ->
  RMSNorm -> fused gate/up GEMV + SiLU + elementwise gate -> down
  projection -> residual.

Matrices are row-partitioned: matrix row r lives in bank r%16, row-group
j = r//16; row groups round-robin over the assigned channels and map to
accumulation registers in batches of 32. Inputs are re-streamed through
the Global Buffer (or via COPY_BKGB from a DRAM scratch region) for each
register batch, so partial sums never spill.

Traces are emitted through a sink: ListSink materializes instructions
for the functional simulator, CountSink keeps instruction/micro-op
counters and per-channel activity statistics (for timing and energy)
without materializing anything.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .config import ArchConfig, ModelSpec
from . import isa
from .isa import Instruction, make_instruction
from .mapper import MappingPlan, BlockAssignment

LANE = 16                      # BF16 elements per 256-bit word
ROW_SLOTS = 64                 # columns per DRAM row
ROW_ELEMS = LANE * ROW_SLOTS   # 1024 elements per bank row
REGS = 32                      # accumulation registers per PU

SILU, GELU, SIGMOID, TANH = 0, 1, 2, 3

KIND_GEMV = "ROW_PER_BANK_GEMV"
KIND_PAIR = "NEIGHBOR_PAIR_DOT"
KIND_EWMUL = "BANKGROUP_TRIPLE_EWMUL"
KIND_KV = "KV_CACHE_APPEND"


class CompileError(ValueError):
    pass


def slots_of(elems: int) -> int:
    return -(-elems // LANE)


def input_tiles(cols: int) -> list[int]:
    """Slot count of each Global Buffer tile of a `cols`-wide vector."""
    total = slots_of(cols)
    out = []
    while total > 0:
        out.append(min(ROW_SLOTS, total))
        total -= ROW_SLOTS
    return out


# ---------------------------------------------------------------------------
# placements

@dataclass
class TensorPlacement:
    """Row-partitioned matrix layout on one device.

    Matrix row r -> bank r%16, row-group j = r//16; group j lives on
    channel ordinal j % n_channels at local index j // n_channels.
    Tile t of a group is one run of columns in a DRAM row; single-tile
    matrices pack several groups per row (the Global Buffer then holds
    replicated copies of the vector so every run sees its input).
    """
    name: str
    kind: str
    device: int
    channels: tuple[int, ...]
    rows: int
    cols: int
    base_row: int
    row_offset: int = 0          # first matrix row held here (TP slice)
    col_offset: int = 0          # first matrix column held here
    col_perm: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.rows % LANE and len(self.channels) > 1:
            raise CompileError(f"{self.name}: ragged row group would "
                               f"straddle channels")
        self.tiles = input_tiles(self.cols)
        self.n_groups = -(-self.rows // LANE)
        self.runs_per_row = (ROW_SLOTS // self.tiles[0]
                             if len(self.tiles) == 1 else 1)
        per_ch = -(-self.n_groups // len(self.channels))
        self.groups_per_channel = per_ch
        self.tile_row_offsets = []
        off = 0
        for _ in self.tiles:
            self.tile_row_offsets.append(off)
            off += -(-per_ch // self.runs_per_row)
        self.rows_needed = off

    def group_channel(self, j: int) -> tuple[int, int]:
        """(channel id, local index) of row group j."""
        nch = len(self.channels)
        return self.channels[j % nch], j // nch

    def loc(self, j: int, t: int) -> tuple[int, int, int]:
        """(row, column, slot width) of group j's tile t."""
        _, lg = self.group_channel(j)
        s = self.tiles[t]
        row = (self.base_row + self.tile_row_offsets[t]
               + lg // self.runs_per_row)
        co = (lg % self.runs_per_row) * s
        return row, co, s

    def channel_groups(self, ch: int) -> list[int]:
        nch = len(self.channels)
        return list(range(self.channels.index(ch), self.n_groups, nch))

    def element_loc(self, r: int, c: int):
        """(channel, bank, row, column, lane) of local element [r, c].
        c indexes physical storage order; col_perm names the logical
        column each physical position holds."""
        ch, _ = self.group_channel(r // LANE)
        t, e = divmod(c, ROW_ELEMS)
        row, co, _ = self.loc(r // LANE, t)
        return ch, r % LANE, row, co + e // LANE, e % LANE


@dataclass
class EwWeightPlacement:
    """Per-element weight vector for a bank-group triple pass: quarter g
    of the vector sits in bank 4g, the activation is written to bank
    4g+1 at run time and the product is read back from bank 4g+2."""
    name: str
    device: int
    channel: int
    base_row: int
    n_slots: int
    kind: str = KIND_EWMUL

    @property
    def quarter(self) -> int:
        return -(-self.n_slots // 4)

    @property
    def rows_needed(self) -> int:
        return -(-self.quarter // ROW_SLOTS)

    def loc(self, s: int) -> tuple[int, int, int]:
        """(bank, row, column) of vector slot s."""
        g, local = divmod(s, self.quarter)
        return 4 * g, self.base_row + local // ROW_SLOTS, local % ROW_SLOTS


@dataclass
class KvCachePlacement:
    """K rows packed like a score-GEMV matrix (position p -> bank p%16,
    row-group p//16); V stored transposed so one token's append lands
    one lane deep in every bank via WR_ABK."""
    kv_head: int
    channel: int
    d_head: int
    max_context: int
    k_base_row: int
    v_base_row: int
    kind: str = KIND_KV

    @property
    def dh_slots(self) -> int:
        return slots_of(self.d_head)

    @property
    def k_runs_per_row(self) -> int:
        return ROW_SLOTS // self.dh_slots

    def k_loc(self, group: int) -> tuple[int, int]:
        return (self.k_base_row + group // self.k_runs_per_row,
                (group % self.k_runs_per_row) * self.dh_slots)

    def k_rows_needed(self) -> int:
        groups = -(-self.max_context // LANE)
        return -(-groups // self.k_runs_per_row)

    @property
    def v_rows_per_group(self) -> int:
        return -(-self.max_context // ROW_ELEMS)

    def v_loc(self, group: int, pos: int) -> tuple[int, int, int]:
        """(row, column, lane) holding element [group dim, pos] of V^T."""
        row = (self.v_base_row + group * self.v_rows_per_group
               + pos // ROW_ELEMS)
        return row, (pos % ROW_ELEMS) // LANE, pos % LANE

    def v_rows_needed(self) -> int:
        return self.dh_slots * self.v_rows_per_group


# ---------------------------------------------------------------------------
# sinks

@dataclass
class ChannelStats:
    col_cmds: int = 0            # column commands issued inside brackets
    bracket_hist: Counter = field(default_factory=Counter)  # cols -> count
    wr_gb: int = 0               # Global Buffer column writes
    rd_mac: int = 0              # accumulator drains (tCL each)

    def merge(self, other: "ChannelStats", factor: int = 1) -> None:
        self.col_cmds += other.col_cmds * factor
        for k, v in other.bracket_hist.items():
            self.bracket_hist[k] += v * factor
        self.wr_gb += other.wr_gb * factor
        self.rd_mac += other.rd_mac * factor


@dataclass
class TraceSummary:
    instructions: Counter = field(default_factory=Counter)
    microops: Counter = field(default_factory=Counter)
    operators: Counter = field(default_factory=Counter)
    channels: dict = field(default_factory=dict)       # ch -> ChannelStats
    riscv_slots: Counter = field(default_factory=Counter)  # routine kind
    pnm_microops: int = 0
    cxl_sent_B: int = 0
    cxl_recv: int = 0

    def merge(self, other: "TraceSummary", factor: int = 1,
              chan_map: Optional[dict] = None) -> None:
        for k, v in other.instructions.items():
            self.instructions[k] += v * factor
        for k, v in other.microops.items():
            self.microops[k] += v * factor
        for k, v in other.operators.items():
            self.operators[k] += v * factor
        for k, v in other.riscv_slots.items():
            self.riscv_slots[k] += v * factor
        for ch, st in other.channels.items():
            dst = chan_map[ch] if chan_map else ch
            self.channels.setdefault(dst, ChannelStats()).merge(st, factor)
        self.pnm_microops += other.pnm_microops * factor
        self.cxl_sent_B += other.cxl_sent_B * factor
        self.cxl_recv += other.cxl_recv * factor

    @property
    def total_instructions(self) -> int:
        return sum(self.instructions.values())

    def mac_fraction(self) -> float:
        arith = sum(v for k, v in self.microops.items()
                    if k in isa.ARITHMETIC_OPCODES)
        return self.microops.get("MAC_ABK", 0) / arith if arith else 0.0

    def to_dict(self) -> dict:
        return {
            "instructions": dict(self.instructions),
            "microops": dict(self.microops),
            "operators": dict(self.operators),
            "riscv_slots": dict(self.riscv_slots),
            "pnm_microops": self.pnm_microops,
            "cxl_sent_B": self.cxl_sent_B,
            "cxl_recv": self.cxl_recv,
            "channels": {
                str(ch): {"col_cmds": st.col_cmds,
                          "wr_gb": st.wr_gb,
                          "rd_mac": st.rd_mac,
                          "bracket_hist": {str(k): v for k, v in
                                           sorted(st.bracket_hist.items())}}
                for ch, st in sorted(self.channels.items())},
        }


_BANK_ROW_OPS = frozenset({"MAC_ABK", "EW_MUL", "COPY_BKGB", "COPY_GBBK",
                           "WR_SBK", "RD_SBK", "WR_ABK"})


class CountSink:
    """Accumulates activity counters; never materializes instructions.

    Consecutive bank-row instructions on a channel that stay within one
    DRAM row share an activate/precharge bracket; the histogram of
    bracket column counts drives the timing and energy models.
    """

    keeps_instructions = False

    def __init__(self, device: int, cfg: ArchConfig):
        self.device = device
        self.cfg = cfg
        self.summary = TraceSummary()
        self.instructions = None
        self.annotations: list[tuple[str, int, int]] = []
        self._open: dict = {}          # ch -> [row, cols]

    def begin_op(self, name: str) -> None:
        self.summary.operators[name] += 1

    def end_op(self) -> None:
        pass

    def note_routine(self, pc: int, kind: str, params: tuple) -> None:
        pass

    @staticmethod
    def _channels_of(inst: Instruction) -> list[int]:
        fields = isa.OPCODE_FIELDS[inst.opcode]
        if "CHmask" in fields:
            return isa.mask_channels(inst.CHmask)
        if "CHid" in fields:
            return [inst.CHid]
        return []

    def emit(self, inst: Instruction,
             riscv_kind: Optional[str] = None) -> None:
        s = self.summary
        op = inst.opcode
        s.instructions[op] += 1
        n = isa.microop_count(inst, self.cfg)
        s.microops[op] += n
        opsize = inst.get("OPsize", 1)

        if op in _BANK_ROW_OPS:
            width = 1 if op == "WR_ABK" else opsize
            for ch in self._channels_of(inst):
                st = s.channels.setdefault(ch, ChannelStats())
                st.col_cmds += width
                cur = self._open.get(ch)
                if cur is not None and cur[0] == inst.RO:
                    cur[1] += width
                else:
                    if cur is not None:
                        st.bracket_hist[cur[1]] += 1
                    self._open[ch] = [inst.RO, width]
        elif op == "WR_GB":
            for ch in self._channels_of(inst):
                s.channels.setdefault(ch, ChannelStats()).wr_gb += opsize
        elif op == "RD_MAC":
            for ch in self._channels_of(inst):
                s.channels.setdefault(ch, ChannelStats()).rd_mac += 1
        elif op in ("EXP", "RED", "ACC", "RISCV"):
            s.pnm_microops += n
            if op == "RISCV":
                s.riscv_slots[riscv_kind or "generic"] += opsize
        elif op in ("SEND_CXL", "BCAST_CXL"):
            s.cxl_sent_B += self.cfg.word_B
        elif op == "RECV_CXL":
            s.cxl_recv += 1

    def finish(self) -> TraceSummary:
        for ch, cur in self._open.items():
            self.summary.channels[ch].bracket_hist[cur[1]] += 1
        self._open.clear()
        return self.summary


class ListSink(CountSink):
    """Materializes the instruction stream alongside the counters."""

    keeps_instructions = True

    def __init__(self, device: int, cfg: ArchConfig):
        super().__init__(device, cfg)
        self.instructions: list[Instruction] = []
        self._op_stack: list[tuple[str, int]] = []
        self.routines: dict = {}

    def begin_op(self, name: str) -> None:
        super().begin_op(name)
        self._op_stack.append((name, len(self.instructions)))

    def end_op(self) -> None:
        name, start = self._op_stack.pop()
        self.annotations.append((name, start, len(self.instructions)))

    def note_routine(self, pc: int, kind: str, params: tuple) -> None:
        self.routines[pc] = (kind, params)

    def emit(self, inst: Instruction,
             riscv_kind: Optional[str] = None) -> None:
        super().emit(inst, riscv_kind)
        self.instructions.append(inst)


@dataclass
class DeviceTrace:
    device: int
    instructions: Optional[list[Instruction]]
    annotations: list[tuple[str, int, int]]
    summary: TraceSummary
    routines: dict           # pc -> (kind, params)

    def manifest_entry(self) -> dict:
        d = self.summary.to_dict()
        d["device"] = self.device
        d["n_instructions"] = self.summary.total_instructions
        if self.instructions is not None:
            d["annotation_index"] = [list(a) for a in self.annotations]
        return d


def write_manifest(traces: list[DeviceTrace], path) -> None:
    manifest = {"devices": [t.manifest_entry() for t in traces]}
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True)
                          + "\n")


# ---------------------------------------------------------------------------
# layout

@dataclass
class SbMap:
    """Shared Buffer slot regions, reused by every block on a device."""
    zero: int        # 32 zero-constant slots (bias sources)
    hidden: int      # residual stream
    rms: int         # normalized vector; reused for concat head outputs
    qkv: int         # q vector, then reused for projection outputs;
                     # doubles as the staging region on non-master devices
    kv_new: int      # this token's k and v head vectors
    tmp: int         # chunk temporaries and softmax statistics
    size: int


def _build_sb_map(model: ModelSpec, arch: ArchConfig) -> SbMap:
    S = slots_of(model.d_model)
    Skv = slots_of(model.n_kv_heads * model.d_head)
    hidden = 32
    rms = hidden + S
    qkv = rms + S
    kv_new = qkv + S
    tmp = kv_new + 2 * Skv
    size = tmp + 160
    if size > arch.sb_slots:
        raise CompileError(f"Shared Buffer map needs {size} slots, "
                           f"only {arch.sb_slots} available")
    return SbMap(0, hidden, rms, qkv, kv_new, tmp, size)


@dataclass
class BlockLayout:
    block: int
    replica: int
    assignment: BlockAssignment
    tp_group: tuple[int, ...]
    master: int
    placements: dict             # name -> {device: placement}
    kv: list[KvCachePlacement]
    norm_channel: int
    rms_input_row: int           # neighbor-pair dot scratch (norm channel)
    rope_base_row: int           # cos/sin tables (norm channel)
    rope_rows: int
    ewmul_row: dict              # device -> FFN triple scratch row
    gated_scratch_row: dict      # device -> gated-vector staging base row
    score_scratch_row: dict      # kv channel -> score staging base row


@dataclass
class Layout:
    model: ModelSpec
    arch: ArchConfig
    plan: MappingPlan
    sb: SbMap
    blocks: list[BlockLayout]
    zero_rows: dict              # (device, channel) -> sorted row list


class _RowAlloc:
    def __init__(self, rows_per_bank: int):
        self.cursor: dict = {}
        self.limit = rows_per_bank

    def take(self, device: int, channels, n: int) -> int:
        base = max(self.cursor.get((device, c), 0) for c in channels)
        if base + n > self.limit:
            raise CompileError(f"device {device}: DRAM rows exhausted "
                               f"({base + n} > {self.limit})")
        for c in channels:
            self.cursor[(device, c)] = base + n
        return base


def _fc_shapes(model: ModelSpec) -> list[tuple[str, int, int]]:
    d = model.d_model
    kv = model.n_kv_heads * model.d_head
    return [("q", d, d), ("k", kv, d), ("v", kv, d), ("o", d, d),
            ("gate", model.d_ff, d), ("up", model.d_ff, d),
            ("down", d, model.d_ff)]


def build_layout(model: ModelSpec, plan: MappingPlan,
                 arch: ArchConfig) -> Layout:
    sb = _build_sb_map(model, arch)
    alloc = _RowAlloc(arch.rows_per_bank)
    zero_rows: dict = {}

    def mark_zero(device, ch, lo, n):
        zero_rows.setdefault((device, ch), set()).update(range(lo, lo + n))

    # transient scratch and the position-indexed RoPE tables hold no
    # per-block state, so blocks sharing a channel share one copy
    shared: dict = {}

    def take_shared(key, device, channels, n, zero=False):
        full = (key, device, tuple(channels))
        if full not in shared:
            shared[full] = alloc.take(device, channels, n)
            if zero:
                for c in channels:
                    mark_zero(device, c, shared[full], n)
        return shared[full]

    blocks = []
    for a in plan.block_assignments:
        group = a.devices
        master = a.master
        tp = len(group)
        placements: dict = {}
        for name, rows, cols in _fc_shapes(model):
            # down is split by columns (each device owns a gated slice
            # and emits a full-length partial sum); the rest by rows
            split_rows = rows if name == "down" else rows // tp
            if name == "down":
                if rows % LANE or cols % (LANE * tp):
                    raise CompileError(f"down: ({rows}, {cols}) not "
                                       f"divisible over tp={tp}")
            elif rows % (LANE * tp):
                raise CompileError(f"{name}: {rows} rows not divisible "
                                   f"over tp={tp} in 16-row groups")
            placements[name] = {}
            for di, dev in enumerate(group):
                chans = a.channels[di]
                pl = TensorPlacement(
                    name=name, kind=KIND_GEMV, device=dev, channels=chans,
                    rows=split_rows,
                    cols=cols // tp if name == "down" else cols,
                    base_row=alloc.take(dev, chans, 0),
                    row_offset=0 if name == "down" else di * split_rows,
                    col_offset=di * cols // tp if name == "down" else 0)
                pl.base_row = alloc.take(dev, chans, pl.rows_needed)
                placements[name][dev] = pl
        # the down projection reads its input in gated-vector production
        # order (per-channel group order), so its columns store permuted
        for di, dev in enumerate(group):
            gate = placements["gate"][dev]
            perm = []
            for c in gate.channels:
                for j in gate.channel_groups(c):
                    perm.extend(range(j * LANE,
                                      min((j + 1) * LANE, gate.rows)))
            placements["down"][dev].col_perm = tuple(perm)

        mchans = a.channels[a.devices.index(master)]
        norm_ch = mchans[0]
        S = slots_of(model.d_model)
        for wname in ("w_rms1", "w_rms2"):
            wp = EwWeightPlacement(wname, master, norm_ch, 0, S)
            wp.base_row = alloc.take(master, (norm_ch,), wp.rows_needed)
            placements[wname] = {master: wp}
            mark_zero(master, norm_ch, wp.base_row, wp.rows_needed)

        # RoPE cos/sin tables: position p occupies one run of columns
        dh_slots = slots_of(model.d_head)
        rope_rows = -(-model.max_context // (ROW_SLOTS // dh_slots))
        rope_base = take_shared("rope", master, (norm_ch,), rope_rows,
                                zero=True)

        # neighbor-pair scratch for the RMSNorm self dot product
        pair_slots = -(-S // 8)
        rms_rows = -(-pair_slots // ROW_SLOTS)
        rms_row = take_shared("rms_in", master, (norm_ch,), rms_rows,
                              zero=True)

        # KV caches: one channel per KV head, round-robin over the
        # master's channels; score staging rows beside each cache
        kvs = []
        score_row = {}
        score_rows = -(-slots_of(model.max_context) // ROW_SLOTS)
        for g in range(model.n_kv_heads):
            ch = mchans[g % len(mchans)]
            kv = KvCachePlacement(g, ch, model.d_head, model.max_context,
                                  0, 0)
            kv.k_base_row = alloc.take(master, (ch,), kv.k_rows_needed())
            kv.v_base_row = alloc.take(master, (ch,), kv.v_rows_needed())
            mark_zero(master, ch, kv.k_base_row, kv.k_rows_needed())
            mark_zero(master, ch, kv.v_base_row, kv.v_rows_needed())
            if ch not in score_row:
                score_row[ch] = take_shared("score", master, (ch,),
                                            score_rows)
            kvs.append(kv)

        # per-device FFN scratch: EW_MUL triple row + gated staging rows
        ew_row, gated_row = {}, {}
        for di, dev in enumerate(group):
            chans = a.channels[di]
            gated_rows = -(-slots_of(model.d_ff // tp) // ROW_SLOTS)
            ew_row[dev] = take_shared("ew", dev, chans, 1, zero=True)
            gated_row[dev] = take_shared("gated", dev, chans, gated_rows)

        blocks.append(BlockLayout(
            block=a.block, replica=a.replica, assignment=a, tp_group=group,
            master=master, placements=placements, kv=kvs,
            norm_channel=norm_ch, rms_input_row=rms_row,
            rope_base_row=rope_base, rope_rows=rope_rows,
            ewmul_row=ew_row, gated_scratch_row=gated_row,
            score_scratch_row=score_row))

    return Layout(model, arch, plan, sb, blocks,
                  {k: sorted(v) for k, v in zero_rows.items()})


# ---------------------------------------------------------------------------
# emission

class Emitter:
    def __init__(self, sink: CountSink, cfg: ArchConfig):
        self.sink = sink
        self.cfg = cfg
        self._routines: dict = {}       # (kind, params) -> pc

    def i(self, opcode: str, *ops, **kw) -> None:
        self.sink.emit(make_instruction(opcode, *ops, cfg=self.cfg, **kw))

    def riscv(self, kind: str, opsize: int, rd: int, rs: int,
              params: tuple = ()) -> None:
        key = (kind, params)
        pc = self._routines.get(key)
        if pc is None:
            pc = len(self._routines)
            self._routines[key] = pc
            self.sink.note_routine(pc, kind, params)
        self.sink.emit(make_instruction("RISCV", opsize, pc, rd, rs,
                                        cfg=self.cfg), riscv_kind=kind)

    @property
    def routines(self) -> dict:
        return {pc: key for key, pc in self._routines.items()}


def _chmask(channels) -> int:
    m = 0
    for c in channels:
        m |= 1 << c
    return m


@dataclass
class GemvJob:
    placement: TensorPlacement
    out_base: int        # result slot for row group j is out_base + j
    af: Optional[int] = None


def emit_gemv(em: Emitter, jobs: list[GemvJob], vec_src: tuple,
              sb_zero: int) -> None:
    """Shared GEMV loop: register batches x input tiles.

    vec_src is ("SB", base_slot) for Global Buffer loads from the Shared
    Buffer, or ("BK", base_row) to re-stream the vector from bank-0 DRAM
    scratch via COPY_BKGB. Fused jobs must share channels and input
    width.
    """
    pl0 = jobs[0].placement
    channels, tiles = pl0.channels, pl0.tiles
    for j in jobs[1:]:
        if j.placement.channels != channels or j.placement.tiles != tiles:
            raise CompileError("fused GEMV jobs must share layout")

    per_ch: dict[int, list] = {c: [] for c in channels}
    for job in jobs:
        for j in range(job.placement.n_groups):
            ch, _ = job.placement.group_channel(j)
            per_ch[ch].append((job, j))
    n_batches = max(-(-len(v) // REGS) for v in per_ch.values() if v)

    for b in range(n_batches):
        batch = {c: per_ch[c][b * REGS:(b + 1) * REGS] for c in channels}
        live = [c for c in channels if batch[c]]
        mask = _chmask(live)
        for t, s in enumerate(tiles):
            if vec_src[0] == "SB":
                reps = max(job.placement.loc(j, t)[1] // s
                           for c in live for job, j in batch[c]) + 1
                for r in range(reps):
                    em.i("WR_GB", mask, s, r * s,
                         vec_src[1] + t * ROW_SLOTS)
            else:
                if pl0.runs_per_row > 1:
                    raise CompileError("bank-streamed input cannot feed "
                                       "packed matrix rows")
                em.i("COPY_BKGB", mask, s, vec_src[1] + t, 0)
            for c in live:
                for idx, (job, j) in enumerate(batch[c]):
                    row, co, _ = job.placement.loc(j, t)
                    if t == 0:
                        em.i("WR_BIAS", 1 << c, sb_zero)
                    em.i("MAC_ABK", 1 << c, s, row, co, idx)
        for c in live:
            for idx, (job, j) in enumerate(batch[c]):
                if job.af is not None:
                    em.i("AF", 1 << c, job.af, idx)
            for idx, (job, j) in enumerate(batch[c]):
                em.i("RD_MAC", 1 << c, job.out_base + j, idx)


# ---------------------------------------------------------------------------
# block lowering

class BlockLowering:
    """Emits one transformer block for one token position."""

    def __init__(self, layout: Layout, bl: BlockLayout, position: int,
                 emitters: dict):
        self.L = layout
        self.bl = bl
        self.pos = position
        self.em = emitters                       # device -> Emitter
        self.model = layout.model
        self.cfg = layout.arch
        self.sb = layout.sb
        self.tp = len(bl.tp_group)
        self.master = bl.master
        self.me = emitters[bl.master]

    def _begin(self, name: str) -> None:
        for d in self.bl.tp_group:
            self.em[d].sink.begin_op(name)

    def _end(self) -> None:
        for d in self.bl.tp_group:
            self.em[d].sink.end_op()

    def _d_slots(self) -> int:
        return slots_of(self.model.d_model)

    # -- collectives -------------------------------------------------------

    def _bcast(self, base: int, n: int) -> None:
        """Master broadcasts n Shared Buffer slots to the group."""
        if self.tp == 1:
            return
        for i in range(n):
            self.me.i("BCAST_CXL", self.tp - 1, base + i, base + i)
        for dev in self.bl.tp_group:
            if dev != self.master:
                for _ in range(n):
                    self.em[dev].i("RECV_CXL")

    def _gather(self, name: str, out: int, sender_base: int) -> None:
        """Non-masters send their output shares to the master's slots."""
        if self.tp == 1:
            return
        for dev in self.bl.tp_group:
            if dev == self.master:
                continue
            pl = self.bl.placements[name][dev]
            first = pl.row_offset // LANE
            for g in range(pl.n_groups):
                self.em[dev].i("SEND_CXL", self.master, sender_base + g,
                               out + first + g)
            for _ in range(pl.n_groups):
                self.me.i("RECV_CXL")

    def _gather_accumulate(self, out: int, sender_base: int) -> None:
        """Down-projection partial sums: stage each sender's full vector
        on the master (in the rms region, dead by this point), then add
        it in. Each sender's SEND batch arrives contiguously (senders
        never block mid-batch), so the shared staging is race-free."""
        if self.tp == 1:
            return
        n = self._d_slots()
        for dev in self.bl.tp_group:
            if dev == self.master:
                continue
            for g in range(n):
                self.em[dev].i("SEND_CXL", self.master, sender_base + g,
                               self.sb.rms + g)
            for _ in range(n):
                self.me.i("RECV_CXL")
            self.me.i("ACC", n, out, self.sb.rms)

    # -- operators ---------------------------------------------------------

    def rmsnorm(self, w_name: str) -> None:
        self._begin("rmsnorm")
        m, sb, em = self.model, self.sb, self.me
        ch = self.bl.norm_channel
        S = self._d_slots()
        pair_slots = -(-S // 8)
        # duplicate each eighth of the vector into both banks of its
        # neighbor pair so the pair dot product accumulates x*x
        for p in range(8):
            seg = min(pair_slots, S - p * pair_slots)
            if seg <= 0:
                break
            for bank in (2 * p, 2 * p + 1):
                off = 0
                while off < seg:
                    n = min(ROW_SLOTS - off % ROW_SLOTS, seg - off)
                    em.i("WR_SBK", ch, n, bank,
                         self.bl.rms_input_row + off // ROW_SLOTS,
                         off % ROW_SLOTS, sb.hidden + p * pair_slots + off)
                    off += n
        em.i("WR_BIAS", 1 << ch, sb.zero)
        for r in range(-(-pair_slots // ROW_SLOTS)):
            n = min(ROW_SLOTS, pair_slots - r * ROW_SLOTS)
            em.i("MAC_ABK", 1 << ch, n, self.bl.rms_input_row + r, 0, 0,
                 source_select="BANK")
        em.i("RD_MAC", 1 << ch, sb.tmp, 0)
        em.i("RED", 1, sb.tmp + 1, sb.tmp)
        # every element is counted twice (both banks of its pair)
        em.riscv("rms_finalize", 1, sb.tmp + 2, sb.tmp + 1,
                 params=(m.d_model, 1e-5, 2))
        em.riscv("scale", S, sb.rms, sb.hidden, params=(sb.tmp + 2,))
        # learned per-element weights via a bank-group triple pass
        wp = self.bl.placements[w_name][self.master]
        q = wp.quarter
        for g in range(4):
            seg = min(q, S - g * q)
            if seg <= 0:
                break
            off = 0
            while off < seg:
                n = min(ROW_SLOTS - off % ROW_SLOTS, seg - off)
                em.i("WR_SBK", ch, n, 4 * g + 1,
                     wp.base_row + off // ROW_SLOTS, off % ROW_SLOTS,
                     sb.rms + g * q + off)
                off += n
        for r in range(wp.rows_needed):
            em.i("EW_MUL", 1 << ch, min(ROW_SLOTS, q - r * ROW_SLOTS),
                 wp.base_row + r, 0)
        for g in range(4):
            seg = min(q, S - g * q)
            if seg <= 0:
                break
            off = 0
            while off < seg:
                n = min(ROW_SLOTS - off % ROW_SLOTS, seg - off)
                em.i("RD_SBK", ch, n, 4 * g + 2,
                     wp.base_row + off // ROW_SLOTS, off % ROW_SLOTS,
                     sb.rms + g * q + off)
                off += n
        self._end()

    def rope(self, base_slot: int, n_heads: int) -> None:
        """Rotate n_heads head vectors in place on the master."""
        m, sb, em = self.model, self.sb, self.me
        ch = self.bl.norm_channel
        dh = slots_of(m.d_head)
        per_row = ROW_SLOTS // dh
        row = self.bl.rope_base_row + self.pos // per_row
        co = (self.pos % per_row) * dh
        for h in range(n_heads):
            x = base_slot + h * dh
            em.riscv("rope_pack", dh, sb.tmp, x)   # pairwise swap-negate
            em.i("WR_SBK", ch, dh, 1, row, co, x)
            em.i("WR_SBK", ch, dh, 5, row, co, sb.tmp)
            em.i("EW_MUL", 1 << ch, dh, row, co)
            em.i("RD_SBK", ch, dh, 2, row, co, sb.tmp)
            em.i("RD_SBK", ch, dh, 6, row, co, sb.tmp + dh)
            em.riscv("rope_combine", dh, x, sb.tmp, params=(dh,))

    def attention(self) -> None:
        self._begin("attention")
        m, sb, em = self.model, self.sb, self.me
        kvS = slots_of(m.n_kv_heads * m.d_head)
        if self.tp == 1:
            jobs = [GemvJob(self.bl.placements["q"][self.master], sb.qkv),
                    GemvJob(self.bl.placements["k"][self.master],
                            sb.kv_new),
                    GemvJob(self.bl.placements["v"][self.master],
                            sb.kv_new + kvS)]
            emit_gemv(em, jobs, ("SB", sb.rms), sb.zero)
        else:
            for name, out in (("q", sb.qkv), ("k", sb.kv_new),
                              ("v", sb.kv_new + kvS)):
                self._bcast(sb.rms, self._d_slots())
                for dev in self.bl.tp_group:
                    pl = self.bl.placements[name][dev]
                    base = ((out + pl.row_offset // LANE)
                            if dev == self.master else sb.qkv)
                    emit_gemv(self.em[dev], [GemvJob(pl, base)],
                              ("SB", sb.rms), sb.zero)
                self._gather(name, out, sb.qkv)

        dh = slots_of(m.d_head)
        self.rope(sb.qkv, m.n_heads)
        self.rope(sb.kv_new, m.n_kv_heads)
        inv_sqrt = 1.0 / math.sqrt(m.d_head)
        heads_per_kv = m.n_heads // m.n_kv_heads
        n_groups = -(-(self.pos + 1) // LANE)
        for kv in self.bl.kv:
            ch = kv.channel
            # append this token's K row and V lane before the score pass
            krow, kco = kv.k_loc(self.pos // LANE)
            em.i("WR_SBK", ch, dh, self.pos % LANE, krow, kco,
                 sb.kv_new + kv.kv_head * dh)
            for g in range(dh):
                vrow, vco, lane = kv.v_loc(g, self.pos)
                em.i("WR_ABK", ch, vrow, vco,
                     sb.kv_new + kvS + kv.kv_head * dh + g, lane)
            for hq in range(heads_per_kv):
                head = kv.kv_head * heads_per_kv + hq
                qslot = sb.qkv + head * dh
                em.riscv("scale_const", dh, qslot, qslot,
                         params=(inv_sqrt,))
                self._head_attention(kv, qslot, n_groups, head)
        # output projection over the concatenated head outputs
        if self.tp == 1:
            emit_gemv(em, [GemvJob(self.bl.placements["o"][self.master],
                                   sb.qkv)], ("SB", sb.rms), sb.zero)
        else:
            self._bcast(sb.rms, self._d_slots())
            for dev in self.bl.tp_group:
                pl = self.bl.placements["o"][dev]
                base = ((sb.qkv + pl.row_offset // LANE)
                        if dev == self.master else sb.qkv)
                emit_gemv(self.em[dev], [GemvJob(pl, base)],
                          ("SB", sb.rms), sb.zero)
            self._gather("o", sb.qkv, sb.qkv)
        em.i("ACC", self._d_slots(), sb.hidden, sb.qkv)
        self._end()

    def _head_attention(self, kv: KvCachePlacement, q_slot: int,
                        n_groups: int, head: int) -> None:
        """Scores into DRAM staging (pass 1, tracking the running max),
        then per 64-slot tile: stabilized exp, denominator accumulation
        and the score x V GEMV (pass 2). Normalization by 1/denominator
        is applied once to the d_head output slots."""
        sb, em = self.sb, self.me
        ch, dh = kv.channel, kv.dh_slots
        mask = 1 << ch
        srow = self.bl.score_scratch_row[ch]
        smax, sden, sred, sinv = (sb.tmp + 8, sb.tmp + 9, sb.tmp + 10,
                                  sb.tmp + 11)
        stile = sb.tmp + 16
        # replicate q so each packed K run sees it at its own columns
        for r in range(min(kv.k_runs_per_row, n_groups)):
            em.i("WR_GB", mask, dh, r * dh, q_slot)
        em.riscv("fill", 1, smax, smax, params=(-3.0e38,))
        em.riscv("fill", 1, sden, sden, params=(0.0,))
        for base in range(0, n_groups, REGS):
            chunk = min(REGS, n_groups - base)
            for i in range(chunk):
                row, co = kv.k_loc(base + i)
                em.i("WR_BIAS", mask, sb.zero)
                em.i("MAC_ABK", mask, dh, row, co, i)
            for i in range(chunk):
                em.i("RD_MAC", mask, stile + i, i)
            if base + chunk == n_groups and (self.pos + 1) % LANE:
                em.riscv("mask_tail", 1, stile + chunk - 1,
                         stile + chunk - 1,
                         params=((self.pos + 1) % LANE,))
            em.i("RED", chunk, sred, stile, red_mode="MAX")
            em.riscv("maxacc", 1, smax, sred)
            em.i("WR_SBK", ch, chunk, 0, srow + base // ROW_SLOTS,
                 base % ROW_SLOTS, stile)
        em.riscv("set_stab", 1, smax, smax)
        for t, s in enumerate(input_tiles(n_groups * LANE)):
            em.i("RD_SBK", ch, s, 0, srow + t, 0, stile)
            em.i("EXP", s, stile, stile)
            em.i("RED", s, sred, stile)
            em.i("ACC", 1, sden, sred)
            em.i("WR_GB", mask, s, 0, stile)
            for g in range(dh):
                if t == 0:
                    em.i("WR_BIAS", mask, sb.zero)
                em.i("MAC_ABK", mask, s,
                     kv.v_base_row + g * kv.v_rows_per_group + t, 0, g)
        em.riscv("recip", 1, sinv, sden)
        out = sb.rms + head * dh
        for g in range(dh):
            em.i("RD_MAC", mask, out + g, g)
        em.riscv("scale", dh, out, out, params=(sinv,))

    def ffn(self) -> None:
        self._begin("ffn")
        sb = self.sb
        if self.tp > 1:
            self._bcast(sb.rms, self._d_slots())
        for dev in self.bl.tp_group:
            self._ffn_gate_up(dev)
        for dev in self.bl.tp_group:
            emit_gemv(self.em[dev],
                      [GemvJob(self.bl.placements["down"][dev], sb.qkv)],
                      ("BK", self.bl.gated_scratch_row[dev]), sb.zero)
        self._gather_accumulate(sb.qkv, sb.qkv)
        self.me.i("ACC", self._d_slots(), sb.hidden, sb.qkv)
        self._end()

    def _ffn_gate_up(self, dev: int) -> None:
        """Fused gate/up pass: 16+16 matched row groups fill all 32
        accumulation registers, SiLU lands in-register via AF, gate x up
        runs on a bank-group triple, and the gated chunk is staged into
        every channel's gated scratch rows for the down projection."""
        sb = self.sb
        em = self.em[dev]
        gate = self.bl.placements["gate"][dev]
        up = self.bl.placements["up"][dev]
        ew_row = self.bl.ewmul_row[dev]
        gbase = self.bl.gated_scratch_row[dev]
        half = REGS // 2
        tg, tu = sb.tmp + 16, sb.tmp + 16 + half

        per_ch = {c: list(zip(gate.channel_groups(c),
                              up.channel_groups(c)))
                  for c in gate.channels}
        phys_off, acc = {}, 0
        for c in gate.channels:
            phys_off[c] = acc
            acc += len(per_ch[c])

        tiles = gate.tiles
        n_rounds = max(-(-len(v) // half) for v in per_ch.values() if v)
        for rnd in range(n_rounds):
            batch = {c: per_ch[c][rnd * half:(rnd + 1) * half]
                     for c in gate.channels}
            live = [c for c in gate.channels if batch[c]]
            mask = _chmask(live)
            for t, s in enumerate(tiles):
                reps = 1 + max(
                    max(gate.loc(gj, t)[1], up.loc(uj, t)[1]) // s
                    for c in live for gj, uj in batch[c])
                for r in range(reps):
                    em.i("WR_GB", mask, s, r * s, sb.rms + t * ROW_SLOTS)
                for c in live:
                    for i, (gj, uj) in enumerate(batch[c]):
                        grow, gco, _ = gate.loc(gj, t)
                        urow, uco, _ = up.loc(uj, t)
                        if t == 0:
                            em.i("WR_BIAS", 1 << c, sb.zero)
                        em.i("MAC_ABK", 1 << c, s, grow, gco, i)
                        if t == 0:
                            em.i("WR_BIAS", 1 << c, sb.zero)
                        em.i("MAC_ABK", 1 << c, s, urow, uco, half + i)
            for c in live:
                n = len(batch[c])
                for i in range(n):
                    em.i("AF", 1 << c, SILU, i)
                for i in range(n):
                    em.i("RD_MAC", 1 << c, tg + i, i)
                for i in range(n):
                    em.i("RD_MAC", 1 << c, tu + i, half + i)
                q = -(-n // 4)
                for g in range(4):
                    seg = min(q, n - g * q)
                    if seg <= 0:
                        break
                    em.i("WR_SBK", c, seg, 4 * g, ew_row, 0, tg + g * q)
                    em.i("WR_SBK", c, seg, 4 * g + 1, ew_row, 0,
                         tu + g * q)
                em.i("EW_MUL", 1 << c, q, ew_row, 0)
                for g in range(4):
                    seg = min(q, n - g * q)
                    if seg <= 0:
                        break
                    em.i("RD_SBK", c, seg, 4 * g + 2, ew_row, 0,
                         tg + g * q)
                off = phys_off[c] + rnd * half
                for dst in gate.channels:
                    pos = 0
                    while pos < n:
                        w = min(ROW_SLOTS - (off + pos) % ROW_SLOTS,
                                n - pos)
                        em.i("WR_SBK", dst, w, 0,
                             gbase + (off + pos) // ROW_SLOTS,
                             (off + pos) % ROW_SLOTS, tg + pos)
                        pos += w


# ---------------------------------------------------------------------------
# standalone operator entry points

class InstructionList(list):
    """Instruction list that also carries the RISC-V routine table
    (pc -> (kind, params)) referenced by its RISCV instructions."""
    routines: dict = {}


def _finish_list(sink: ListSink, em: Emitter) -> "InstructionList":
    sink.finish()
    out = InstructionList(sink.instructions)
    out.routines = em.routines
    return out


def lower_gemv(rows: int, cols: int, placement: TensorPlacement,
               vec_slot: int, out_base: int = 1024,
               cfg: Optional[ArchConfig] = None,
               sb_zero: int = 0) -> list[Instruction]:
    cfg = cfg or ArchConfig()
    if placement.kind != KIND_GEMV:
        raise CompileError(f"placement kind {placement.kind} is not "
                           f"{KIND_GEMV}")
    if (rows, cols) != (placement.rows, placement.cols):
        raise CompileError(
            f"shape ({rows}, {cols}) does not match placement "
            f"({placement.rows}, {placement.cols})")
    sink = ListSink(placement.device, cfg)
    em = Emitter(sink, cfg)
    emit_gemv(em, [GemvJob(placement, out_base)], ("SB", vec_slot), sb_zero)
    return _finish_list(sink, em)


def lower_softmax(length: int, base_slot: int,
                  cfg: Optional[ArchConfig] = None, stabilize: bool = True,
                  tmp_slot: int = 2000) -> list[Instruction]:
    """Normalize `length` scores held in Shared Buffer slots in place."""
    if length <= 0:
        raise CompileError("softmax length must be positive")
    cfg = cfg or ArchConfig()
    sink = ListSink(0, cfg)
    em = Emitter(sink, cfg)
    sink.begin_op("softmax")
    n = slots_of(length)
    if length % LANE:
        em.riscv("mask_tail", 1, base_slot + n - 1, base_slot + n - 1,
                 params=(length % LANE,))
    if stabilize:
        em.i("RED", n, tmp_slot, base_slot, red_mode="MAX")
    else:
        em.riscv("fill", 1, tmp_slot, tmp_slot, params=(0.0,))
    em.riscv("set_stab", 1, tmp_slot, tmp_slot)
    em.i("EXP", n, base_slot, base_slot)
    em.i("RED", n, tmp_slot, base_slot)
    em.riscv("recip", 1, tmp_slot + 1, tmp_slot)
    em.riscv("scale", n, base_slot, base_slot, params=(tmp_slot + 1,))
    sink.end_op()
    return _finish_list(sink, em)


def _single_block_lowering(layout: Layout, block: int, position: int):
    bl = layout.blocks[block]
    sinks = {d: ListSink(d, layout.arch) for d in bl.tp_group}
    ems = {d: Emitter(sinks[d], layout.arch) for d in bl.tp_group}
    return BlockLowering(layout, bl, position, ems), sinks


def lower_rmsnorm(d: int, layout: Layout, block: int = 0,
                  weights: str = "w_rms1") -> list[Instruction]:
    if d % LANE:
        raise CompileError(f"d={d} not divisible by lane width {LANE}")
    if d != layout.model.d_model:
        raise CompileError("d does not match the laid-out model")
    low, sinks = _single_block_lowering(layout, block, 0)
    low.rmsnorm(weights)
    return _finish_list(sinks[low.master], low.em[low.master])


def lower_rope(d_head: int, position: int, layout: Layout, block: int = 0,
               base_slot: Optional[int] = None,
               n_heads: int = 1) -> list[Instruction]:
    if d_head % 2:
        raise CompileError("d_head must be even")
    if d_head != layout.model.d_head:
        raise CompileError("d_head does not match the laid-out model")
    low, sinks = _single_block_lowering(layout, block, position)
    low.rope(layout.sb.qkv if base_slot is None else base_slot, n_heads)
    return _finish_list(sinks[low.master], low.em[low.master])


def lower_attention(model: ModelSpec, context_len: int, layout: Layout,
                    block: int = 0) -> list[Instruction]:
    if context_len < 1:
        raise CompileError("context_len must be >= 1")
    if context_len > model.max_context:
        raise CompileError(f"context_len {context_len} exceeds reserved "
                           f"cache rows ({model.max_context} positions)")
    low, sinks = _single_block_lowering(layout, block, context_len - 1)
    low.attention()
    return _finish_list(sinks[low.master], low.em[low.master])


# ---------------------------------------------------------------------------
# whole-token compilation

def _replica_chains(layout: Layout) -> list[list[BlockLayout]]:
    chains: dict = {}
    for bl in layout.blocks:
        chains.setdefault(bl.replica, []).append(bl)
    return [sorted(v, key=lambda b: b.block)
            for _, v in sorted(chains.items())]


def _compile_block(layout: Layout, bl: BlockLayout, position: int,
                   emitters: dict) -> None:
    low = BlockLowering(layout, bl, position,
                        {d: emitters[d] for d in bl.tp_group})
    low.rmsnorm("w_rms1")
    low.attention()
    low.rmsnorm("w_rms2")
    low.ffn()


def compile_token(model: ModelSpec, plan: MappingPlan, token_pos: int,
                  phase: str = "DECODE", arch: Optional[ArchConfig] = None,
                  mode: str = "list",
                  layout: Optional[Layout] = None) -> list[DeviceTrace]:
    """Lower one full token step to per-device traces.

    Prefill and decode use the identical per-token path; `phase` is
    carried for reporting only. mode="count" skips instruction
    materialization and compiles one representative block per structure
    class, scaling the counters (all blocks at a given group shape and
    channel split are structurally identical).
    """
    if phase not in ("PREFILL", "DECODE"):
        raise CompileError(f"unknown phase {phase!r}")
    arch = arch or (layout.arch if layout else ArchConfig())
    if token_pos >= model.max_context:
        raise CompileError(f"position {token_pos} beyond max context "
                           f"{model.max_context}")
    layout = layout or build_layout(model, plan, arch)
    sink_cls = ListSink if mode == "list" else CountSink
    devices = sorted({d for a in plan.block_assignments
                      for d in a.devices})
    sinks = {d: sink_cls(d, arch) for d in devices}
    emitters = {d: Emitter(sinks[d], arch) for d in devices}

    if mode == "count":
        _compile_counting(layout, token_pos, sinks)
    else:
        for chain in _replica_chains(layout):
            for i, bl in enumerate(chain):
                _compile_block(layout, bl, token_pos, emitters)
                if i + 1 < len(chain):
                    _emit_boundary(layout, bl, chain[i + 1], emitters)

    traces = []
    for d in devices:
        sinks[d].finish()
        traces.append(DeviceTrace(
            device=d,
            instructions=sinks[d].instructions,
            annotations=sinks[d].annotations,
            summary=sinks[d].summary,
            routines=emitters[d].routines if mode == "list" else {}))
    return traces


def _emit_boundary(layout: Layout, bl: BlockLayout, nxt: BlockLayout,
                   emitters: dict) -> None:
    """Hidden-state handoff to the next block's master device."""
    if nxt.master == bl.master:
        return
    n = slots_of(layout.model.d_model)
    h = layout.sb.hidden
    for i in range(n):
        emitters[bl.master].i("SEND_CXL", nxt.master, h + i, h + i)
    for _ in range(n):
        emitters[nxt.master].i("RECV_CXL")


def _structure_key(bl: BlockLayout) -> tuple:
    return (len(bl.tp_group), tuple(map(len, bl.assignment.channels)))


@dataclass
class BlockClassSummary:
    """Counters for one structurally-identical class of blocks."""
    count: int
    representative: BlockLayout
    device_summaries: dict       # role index within tp_group -> summary


def block_summaries(model: ModelSpec, plan: MappingPlan, arch: ArchConfig,
                    token_pos: int, layout: Optional[Layout] = None
                    ) -> list[BlockClassSummary]:
    """One compiled summary per structure class of blocks; the timing
    model multiplies per-block latency by the class count."""
    layout = layout or build_layout(model, plan, arch)
    classes: dict = {}
    order = []
    for bl in layout.blocks:
        key = _structure_key(bl)
        if key not in classes:
            classes[key] = [0, bl]
            order.append(key)
        classes[key][0] += 1
    out = []
    for key in order:
        count, rep = classes[key]
        sinks = {d: CountSink(d, arch) for d in rep.tp_group}
        ems = {d: Emitter(sinks[d], arch) for d in rep.tp_group}
        _compile_block(layout, rep, token_pos, ems)
        out.append(BlockClassSummary(
            count, rep, {di: sinks[dev].finish()
                         for di, dev in enumerate(rep.tp_group)}))
    return out


def _compile_counting(layout: Layout, token_pos: int, sinks: dict) -> None:
    classes = block_summaries(layout.model, layout.plan, layout.arch,
                              token_pos, layout)
    by_key = {_structure_key(c.representative): c for c in classes}
    for bl in layout.blocks:
        cls = by_key[_structure_key(bl)]
        rep = cls.representative
        for di, dev in enumerate(bl.tp_group):
            chan_map = dict(zip(rep.assignment.channels[di],
                                bl.assignment.channels[di]))
            sinks[dev].summary.merge(cls.device_summaries[di], 1,
                                     chan_map=chan_map)
    # boundary handoffs between consecutive blocks on different devices
    n = slots_of(layout.model.d_model)
    word = layout.arch.word_B
    for chain in _replica_chains(layout):
        for bl, nxt in zip(chain, chain[1:]):
            if nxt.master == bl.master:
                continue
            s = sinks[bl.master].summary
            s.instructions["SEND_CXL"] += n
            s.microops["SEND_CXL"] += n
            s.cxl_sent_B += n * word
            r = sinks[nxt.master].summary
            r.instructions["RECV_CXL"] += n
            r.microops["RECV_CXL"] += n
            r.cxl_recv += n
