"""
The whole pipeline at desk scale
================================

gen-synthetic, train (no regularizer vs copy regularizer), metrics,
per-head ablation and the reading-time analysis, all through the CLI entry
point. Roughly ten minutes on one core.

    python demos/desk_pipeline.py [workdir]
"""

import json
import sys
from pathlib import Path

from phaselab.harness.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "desk_run")
plan, out = str(work / "inputs" / "plan.json"), str(work / "out")

for argv in (["gen-synthetic", "--out", str(work / "inputs"), "--seed", "0"],
             ["train", "--plan", plan, "--out", out],
             ["metrics", "--plan", plan, "--out", out],
             ["ablate", "--plan", plan, "--out", out, "--run", "L2_none_s0"],
             ["ppp", "--plan", plan, "--out", out]):
    print("$ phaselab", " ".join(argv))
    if main(argv) != 0:
        sys.exit(f"step {argv[0]} failed")

reports = work / "out" / "reports"
summary = json.loads((reports / "ppp_summary.json").read_text())
for run, info in summary["runs"].items():
    for corpus, c in info["corpora"].items():
        tp = c["tipping_point"]
        print(f"{run} / {corpus}: tipping point at {tp['tokens_seen']} tokens (delta LL {tp['delta_ll']:.2f})")
for t in summary["permutation_tests"]:
    print(f"{t['run']} vs {t['reference']}: p = {t['p']:.4g}")
print("reports in", reports)
