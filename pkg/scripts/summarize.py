#!/usr/bin/env python3
"""Print a compact text summary of the *_summary.json files in an output directory."""
import json
import sys
from pathlib import Path


def show(path: Path) -> None:
    s = json.loads(path.read_text())
    cmd = s.get("command", path.stem)
    print(f"[{cmd}] config {s.get('config_hash', '')[:12]}")
    if cmd == "sweep":
        for mode, pts in s.get("improvement", {}).items():
            print(f"  {mode} winograd - direct:", " ".join(f"{b:.2g}:{d:+.3f}" for b, d in pts))
        print("  monotone:", s.get("monotone"))
    elif cmd == "compare-fi":
        print("  neuron CIs overlap everywhere:", s["neuron_indistinguishable"])
        print("  op-level separates somewhere:", s["op_level_separates"])
    elif cmd in ("layer-vuln", "optype-vuln"):
        print(f"  ber {s['ber']:.3g}")
        for eng, r in s["engines"].items():
            if cmd == "layer-vuln":
                vfs = " ".join(f"L{x['layer']}:{x['vf']:+.3f}" for x in r["layers"])
                print(f"  {eng}: {vfs}  spearman {r['spearman_vf_vs_mul']:.3f}")
            else:
                print(f"  {eng}: baseline {r['baseline']['accuracy']:.3f}  mul-free {r['mul_fault_free']['accuracy']:.3f}"
                      f"  add-free {r['add_fault_free']['accuracy']:.3f}")
    elif cmd == "tmr":
        print(f"  ber {s['ber']:.3g}  goals {[round(g, 3) for g in s['goals']]}")
        for mode, series in s["series"].items():
            print(f"  {mode:10s}", " ".join(f"{x:.3f}" for x in series))
    elif cmd == "energy":
        for eng, pts in s["voltage_scans"].items():
            print(f"  {eng} scan reached {pts[-1][0]:.3f} V" if pts else f"  {eng}: no points")


def main() -> None:
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "out")
    for p in sorted(out.glob("*_summary.json")):
        show(p)
    energy = out / "energy.csv"
    if energy.exists():
        print("[energy] normalized energy by mode and budget")
        lines = energy.read_text().splitlines()
        hdr = lines[0].split(",")
        i_mode, i_b, i_v, i_e = (hdr.index(k) for k in ("mode", "budget", "voltage", "normalized_energy"))
        for line in lines[1:]:
            f = line.split(",")
            print(f"  {f[i_mode]:10s} budget {f[i_b]}  V {f[i_v]}  E {float(f[i_e]):.4f}")


if __name__ == "__main__":
    main()
