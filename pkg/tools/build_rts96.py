"""Assemble the 73-bus three-area reliability test system case file.

Network (buses, loads, branch reactances, continuous ratings) comes from
MATPOWER's case_RTS_GMLC.m, which keeps the 1996 three-area topology.
Generators, cost curves and short-term ratings are the single-area 24-bus
data (case24_ieee_rts.m) repeated in every area. Permanent outage rates
for the in-area branches are the single-area reliability data; tie-line
rates are estimates (see RATE_TIES).

usage: python3 tools/build_rts96.py MATPOWER_DATA_DIR > src/cascade_risk/data/rts96.m
"""
import sys
from pathlib import Path


def block(text, name):
    body = text[text.index(f"mpc.{name} = ["):]
    body = body[body.index("\n") + 1 : body.index("];")]
    rows = []
    for line in body.splitlines():
        line = line.split("%")[0].strip().rstrip(";")
        if line:
            rows.append([float(v) for v in line.split()])
    return rows


# permanent outage rate (outages/year) per single-area branch, in the
# 24-bus branch order
RATE_AREA = [
    0.24, 0.51, 0.33, 0.39, 0.48, 0.38, 0.02, 0.36, 0.34, 0.33,
    0.30, 0.44, 0.44, 0.02, 0.02, 0.02, 0.02, 0.40, 0.39, 0.40,
    0.52, 0.49, 0.38, 0.33, 0.41, 0.41, 0.41, 0.35, 0.34, 0.32,
    0.54, 0.35, 0.35, 0.38, 0.38, 0.34, 0.34, 0.45,
]
# ties: estimated from the length/rate relation of same-voltage lines
RATE_TIES = {
    (107, 203): 0.44,
    (113, 215): 0.47,
    (123, 217): 0.54,
    (325, 121): 0.52,
    (318, 223): 0.54,
    (323, 325): 0.02,
}
STE_TIES = {(107, 203): 220.0}


def main(src):
    gmlc = (src / "case_RTS_GMLC.m").read_text()
    rts24 = (src / "case24_ieee_rts.m").read_text()
    bus = block(gmlc, "bus")
    branch = block(gmlc, "branch")
    gen24 = block(rts24, "gen")
    cost24 = block(rts24, "gencost")
    branch24 = block(rts24, "branch")

    key24 = {}
    for k, row in enumerate(branch24):
        pair = (int(row[0]), int(row[1]))
        key24.setdefault(pair, []).append(k)

    out = [
        "function mpc = rts96",
        "%RTS96  73-bus three-area reliability test system (DC data).",
        "%   Built by tools/build_rts96.py from MATPOWER case_RTS_GMLC.m (network)",
        "%   and case24_ieee_rts.m (generation, costs, short-term ratings).",
        "%   branch_reliability column 1: permanent outage rate, outages/year.",
        "mpc.version = '2';",
        "mpc.baseMVA = 100;",
        "",
        "%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin",
        "mpc.bus = [",
    ]
    for row in bus:
        out.append("\t" + "\t".join(f"{v:g}" for v in row[:13]) + ";")
    out += ["];", "", "%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin", "mpc.gen = ["]
    costs = []
    for area in (1, 2, 3):
        for row, c in zip(gen24, cost24):
            r = list(row[:10])
            r[0] = 100 * area + int(row[0])
            out.append("\t" + "\t".join(f"{v:g}" for v in r) + ";")
            costs.append(c)
    out += ["];", "", "%% fbus tbus r x b rateA rateB rateC ratio angle status", "mpc.branch = ["]
    rates = []
    used = {}
    for row in branch:
        f, t = int(row[0]), int(row[1])
        r = list(row[:11])
        if f // 100 == t // 100 and (f, t) != (323, 325):
            pair = (f % 100, t % 100)
            n = used.get((f, t), 0)
            used[(f, t)] = n + 1
            k = key24[pair][n]
            r[7] = branch24[k][7]
            rates.append(RATE_AREA[k])
        else:
            r[7] = STE_TIES.get((f, t), 625.0 if (f, t) != (323, 325) else 0.0)
            rates.append(RATE_TIES[(f, t)])
        r[6] = r[5]
        out.append("\t" + "\t".join(f"{v:g}" for v in r) + ";")
    out += ["];", "", "%% model startup shutdown n c2 c1 c0", "mpc.gencost = ["]
    for c in costs:
        out.append("\t" + "\t".join(f"{v:g}" for v in c) + ";")
    out += ["];", "", "%% branch lambda_permanent", "mpc.branch_reliability = ["]
    for k, lam in enumerate(rates, start=1):
        out.append(f"\t{k}\t{lam:g};")
    out += ["];", ""]
    sys.stdout.write("\n".join(out))


if __name__ == "__main__":
    main(Path(sys.argv[1]))
