"""Command-line entry points.

uwtrack run <plan.toml>        full Monte Carlo sweep, CSV outputs
uwtrack compare <plan.toml>    method-by-method BER table
uwtrack track <meas.csv> <plan.toml>   tracker over recorded measurements
uwtrack qprofile <plan.toml>   mirror focusing profiles at one epoch

Exit codes: 0 ok, 2 plan validation error, 3 completed with trial failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .harness import PlanError, compare_baselines, load_plan, q_profiles, run, track_file


def _common_overrides(plan, args):
    if getattr(args, "seed", None) is not None:
        plan = replace(plan, seed=args.seed)
    if getattr(args, "trials", None) is not None:
        plan = replace(plan, trials=args.trials)
    return plan


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="uwtrack",
                                     description="doubly-spread channel tracking and "
                                                 "time-reversal equalization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment plan")
    p_run.add_argument("plan")
    p_cmp = sub.add_parser("compare", help="run and tabulate BER per method")
    p_cmp.add_argument("plan")
    for p in (p_run, p_cmp):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--threads", type=int, default=1)

    p_trk = sub.add_parser("track", help="track a measurement CSV")
    p_trk.add_argument("measurements")
    p_trk.add_argument("plan")
    p_trk.add_argument("--out", default="out")
    p_trk.add_argument("--seed", type=int, default=None)

    p_qp = sub.add_parser("qprofile", help="mirror q-profiles at one epoch")
    p_qp.add_argument("plan")
    p_qp.add_argument("--epoch", type=int, default=1)
    p_qp.add_argument("--out", default="out")

    args = parser.parse_args(argv)
    try:
        plan = load_plan(args.plan)
        plan = _common_overrides(plan, args)
        if args.command == "run":
            report = run(plan, threads=args.threads, out_dir=args.out)
            print(f"completed {report.trials_completed}/{plan.trials} trials "
                  f"in {report.elapsed_s:.1f}s -> {args.out}")
            return 3 if report.failures else 0
        if args.command == "compare":
            report, table = compare_baselines(plan, threads=args.threads, out_dir=args.out)
            for method, value in table.ordered():
                print(f"{method}: mean BER {value:.4g}")
            return 3 if report.failures else 0
        if args.command == "track":
            steps = track_file(plan, args.measurements, out_dir=args.out)
            print(f"tracked {len(steps)} epochs -> {args.out}/tracks.csv")
            return 0
        if args.command == "qprofile":
            profiles = q_profiles(plan, epoch=args.epoch, out_dir=args.out)
            for mode, prof in profiles.items():
                print(f"{mode}: peak {prof.mainlobe_peak:.4g} at {prof.peak_lag * 1e3:.3f} ms, "
                      f"focusing ratio {prof.focusing_ratio:.3g}")
            return 0
    except PlanError as exc:
        print(exc, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
