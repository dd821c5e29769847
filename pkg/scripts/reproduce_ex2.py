#!/usr/bin/env python3
"""Certified-tube tracking of a planned trajectory on the 2-state plant.

Simulates the shipped planning scenario (start [3.4, -2.4], target origin,
8 s), reports tube containment and obstacle clearance, then re-runs the
certificate search with the tuning left to the optimizer to show a fully
certified parameter pair.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from ccml1.cli import main as ccml1
from ccml1.scenario import builtin_scenario, canonical_json


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(
        description="planned-path tube containment study")
    ap.add_argument("--out", default="out/ex2", metavar="DIR")
    ap.add_argument("--quick", action="store_true",
                    help="2 s horizon instead of 8 s")
    args = ap.parse_args(argv)
    out = Path(args.out)

    doc = builtin_scenario("ex2").doc
    if args.quick:
        doc = dict(doc)
        doc["sim"] = dict(doc["sim"], t_final=2.0)

    with tempfile.NamedTemporaryFile("w", suffix=".json",
                                     delete=False) as fh:
        fh.write(canonical_json(doc))
        scenario_path = fh.name

    rc = ccml1(["simulate", "--scenario", scenario_path,
                "--out", str(out / "run")])
    if rc != 0:
        return rc

    rep = json.loads((out / "run" / "containment.json").read_text())
    cert = json.loads((out / "run" / "certificate.json").read_text())
    rho = cert["certificate"]["rho"]
    print(f"\ntube radius {rho:.3g}: sup dist "
          f"{rep['closed_loop']['max_dist']:.4f}, contained = "
          f"{rep['closed_loop']['contained']}, obstacle clearance "
          f"{rep.get('obstacle_clearance', float('nan')):.4f}")

    auto = dict(doc)
    auto["l1"] = {"omega": "auto", "gamma": "auto"}
    with tempfile.NamedTemporaryFile("w", suffix=".json",
                                     delete=False) as fh:
        fh.write(canonical_json(auto))
        auto_path = fh.name
    rc = ccml1(["certify", "--scenario", auto_path,
                "--out", str(out / "certified")])
    print(f"outputs under {out}/")
    return rc


if __name__ == "__main__":
    sys.exit(run())
