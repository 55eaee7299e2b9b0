"""Command-line entry point: ``phaselab <command> [flags]``.

Exit codes: 0 success, 1 validation error (bad plan, missing files or
runs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from phaselab.harness.plan import ExperimentPlan, PlanError

log = logging.getLogger("phaselab")


def _common(p: argparse.ArgumentParser, plan: bool = True) -> None:
    if plan:
        p.add_argument("--plan", required=True, help="experiment plan (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the plan seed")
    p.add_argument("--scale", type=float, default=None, help="checkpoint schedule scale factor")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--precision", choices=["f32", "f64"], default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phaselab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic corpus, parses, reading times and a plan")
    _common(p, plan=False)

    p = sub.add_parser("train", help="train every grid cell of the plan")
    _common(p)

    p = sub.add_parser("metrics", help="PS / UAS / SAS / ICL / loss per checkpoint")
    _common(p)
    p.add_argument("--runs", nargs="*", default=None)

    p = sub.add_parser("ablate", help="per-head pattern-preserving ablation sweep")
    _common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", type=int, default=None, help="tokens_seen of the checkpoint (default: last)")
    p.add_argument("--corpus", nargs="*", default=None)

    p = sub.add_parser("ppp", help="ΔLL trajectories, tipping points, correlations, permutation tests")
    _common(p)
    p.add_argument("--runs", nargs="*", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full regularized loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--n-instances", type=int, default=5)
    return ap


def _plan(args) -> ExperimentPlan:
    plan = ExperimentPlan.load(args.plan)
    return plan.with_overrides(seed=args.seed, scale=args.scale, precision=args.precision)


def run(args) -> int:
    from phaselab.harness import commands, gensynth

    if args.command == "gen-synthetic":
        paths = gensynth.generate(args.out, seed=args.seed or 0)
        print(f"wrote {', '.join(sorted(p.name for p in paths.values()))} to {args.out}")
        return 0
    if args.command == "gradcheck":
        from phaselab.harness.gradcheck import regularized_loss_gradcheck

        worst = max(regularized_loss_gradcheck(seed=args.seed + i, dtype=np.float64 if args.precision == "f64"
                                               else np.float32) for i in range(args.n_instances))
        print(f"max relative error {worst:.3e}")
        return 0 if worst < 1e-4 else 2
    plan = _plan(args)
    if args.command == "train":
        ledgers = commands.cmd_train(plan, args.out, jobs=args.jobs)
        for led in ledgers:
            print(f"{led.run_id}: {led.status}" + (f" ({led.error})" if led.error else ""))
        return 0 if all(l.complete for l in ledgers) else 2
    if args.command == "metrics":
        for rid, b in commands.cmd_metrics(plan, args.out, args.runs).items():
            print(f"{rid}: breakthroughs {b}")
        return 0
    if args.command == "ablate":
        for corpus, res in commands.cmd_ablate(plan, args.out, args.run, args.checkpoint, args.corpus).items():
            print(f"{corpus}: {res['n_heads']} heads, pearson {res['pearson_ddll']}")
        return 0
    if args.command == "ppp":
        s = commands.cmd_ppp(plan, args.out, args.runs)
        print(f"{len(s['runs'])} runs, {len(s['permutation_tests'])} permutation tests")
        return 0
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (PlanError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - top-level report
        log.exception("runtime failure")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
