#!/usr/bin/env python3
"""Derive the per-command DRAM energies shipped as `c-die-default`.

Per-command energies follow the standard current-based methodology for
DRAM power estimation: each command's energy is the supply voltage
times the current delta it draws over the standby floor, integrated
over the window in which that delta flows.

  E(ACT+PRE, per bank)   = VDD * dI_act      * tRC        (tRAS + tRP)
  E(column, per column)  = VDD * dI_cmd      * tCCDS      (gapless burst)
  P(standby, per channel)= VDD * I_standby

Datasheets for 8Gb GDDR6 parts do not publish currents for near-bank
MAC columns, and published IDD tables vary by speed grade, so the
current deltas below are calibrated: they are chosen within the range
plausible for an 8Gb GDDR6 C-die so that the resulting energies
reproduce the measured per-device power of the reference 70B pipeline
run (see tests).  Rerunning this script regenerates
src/cxlpim/params/cdie_default.json.
"""

import argparse
import json
from pathlib import Path

VDD_V = 1.35

# calibrated current deltas (amperes) over the all-bank standby floor
DI_ACT_PER_BANK_A = 0.0883204   # one bank's share of an all-bank activate
DI_MAC_COL_PER_BANK_A = 0.1135556  # row-buffer read + 16-lane MAC datapath
DI_RD_COL_A = 0.8111111         # column read burst incl. I/O
DI_WR_COL_A = 1.0244444         # column write burst incl. I/O
I_STANDBY_PER_CHANNEL_A = 0.0963

# timing windows (ns); must match the default TimingParams
T_RC_NS = 27.0 + 16.0           # tRAS + tRP
T_CCDS_NS = 1.0

# controller-die static powers, carried through unchanged
STATIC = {
    "p_memctrl_W_per_2ch": 0.3146,
    "p_scalar_core_W": 0.25,
    "p_ctrl_logic_W": 1.06,
    "p_host_W": 100.0,
}


def derive() -> dict:
    pj = 1000.0  # V * A * ns -> nJ; *1000 -> pJ
    params = {
        "name": "c-die-default",
        "e_act_pre_pJ": round(VDD_V * DI_ACT_PER_BANK_A * T_RC_NS * pj, 1),
        "e_mac_col_pJ": round(VDD_V * DI_MAC_COL_PER_BANK_A * T_CCDS_NS * pj, 1),
        "e_rd_col_pJ": round(VDD_V * DI_RD_COL_A * T_CCDS_NS * pj, 1),
        "e_wr_col_pJ": round(VDD_V * DI_WR_COL_A * T_CCDS_NS * pj, 1),
        "p_background_W_per_channel": round(VDD_V * I_STANDBY_PER_CHANNEL_A, 3),
    }
    params.update(STATIC)
    return params


def main() -> None:
    default_out = (Path(__file__).resolve().parent.parent / "src" / "cxlpim"
                   / "params" / "cdie_default.json")
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(default_out),
                    help="where to write the parameter set")
    ap.add_argument("--check", action="store_true",
                    help="verify the existing file instead of rewriting it")
    args = ap.parse_args()
    params = derive()
    text = json.dumps(params, indent=2) + "\n"
    out = Path(args.out)
    if args.check:
        current = json.loads(out.read_text())
        if current != params:
            raise SystemExit(f"{out} does not match the derivation")
        print(f"{out} matches the derivation")
    else:
        out.write_text(text)
        print(f"wrote {out}")
    print(text, end="")


if __name__ == "__main__":
    main()
