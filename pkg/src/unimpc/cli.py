"""Command-line entry point.

Subcommands: ``run <config>`` (one closed-loop run), ``compare <configs...>``
(aligned multi-policy runs), ``reproduce fig1|fig2|table2`` (the bundled
benchmark studies), ``selftest`` (oracle cross-check suites).  Exit codes:
0 success, 1 engine abort or failed selftest, 2 configuration error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, default_config, load_config, resolve_config
from .harness import (
    compare_policies,
    policy_label,
    run_closed_loop,
    solve_first_ocp,
    write_comparison,
    write_report,
)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    run = cfg.run
    if args.out is not None:
        run = replace(run, out_dir=args.out)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    return replace(cfg, run=run)


def _say(args, *msg):
    if not args.quiet:
        print(*msg)


def _cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    report = run_closed_loop(cfg)
    paths = write_report(report, cfg.run.out_dir)
    agg = report.aggregates()
    _say(args, f"{policy_label(cfg)}: {agg['steps_completed']} steps, n_it_mean={agg['n_it_mean']}, "
               f"dr_avg={agg['dr_avg']}, max_violation={agg['max_violation']:.3e}")
    _say(args, "wrote:", ", ".join(str(p) for p in paths))
    return 1 if report.aborted_at is not None else 0


def _cmd_compare(args) -> int:
    cfgs = [_apply_overrides(load_config(p), args) for p in args.configs]
    out = args.out or cfgs[0].run.out_dir
    cmp_ = compare_policies(cfgs)
    write_comparison(cmp_, out)
    for label, agg in cmp_.aggregates().items():
        _say(args, f"{label:>35s}: n_it_mean={agg['n_it_mean']}, dr_avg={agg['dr_avg']}, status={agg['status']}")
    aborted = any(rep.aborted_at is not None for rep in cmp_.reports)
    return 1 if aborted else 0


def _variant(anchors: str, sensitivity: str = "ftc", seed: int = 0, **policy_kw) -> RunConfig:
    base = default_config("cart_pendulum")
    policy = replace(base.policy, sensitivity=sensitivity, anchors=anchors, **policy_kw)
    return resolve_config(replace(base, policy=policy, run=replace(base.run, seed=seed)))


def _fig1_variants(seed: int) -> list[tuple[str, RunConfig]]:
    kw = dict(termination="fixed_iterations", term_count=10)
    return [
        ("sqp", _variant("previous_iterate", "linearize", seed, **kw)),
        ("lpv_previous_iterate", _variant("previous_iterate", seed=seed, **kw)),
        ("lpv_zero", _variant("zero", seed=seed, **kw)),
        ("lpv_constant_point", _variant("constant_point", seed=seed, **kw)),
        ("lpv_measured_state_last_input", _variant("measured_state_last_input", seed=seed, **kw)),
        ("lpv_optimal", _variant("optimal", seed=seed, **kw)),
    ]


def _closed_loop_variants(seed: int, with_fixed_anchors: bool) -> list[RunConfig]:
    cfgs = [
        _variant("previous_iterate", "linearize", seed),
        _variant("previous_iterate", seed=seed),
        _variant("measured_state_last_input", seed=seed),
        _variant("optimal", seed=seed),
    ]
    if with_fixed_anchors:
        cfgs.insert(2, _variant("zero", seed=seed))
        cfgs.insert(3, _variant("constant_point", seed=seed))
    return cfgs


def _cmd_reproduce(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or "out") / args.target
    out.mkdir(parents=True, exist_ok=True)
    if args.target == "fig1":
        for label, cfg in _fig1_variants(seed):
            res = solve_first_ocp(cfg)
            path = out / f"{label}.csv"
            with open(path, "w") as fh:
                fh.write("iter,kkt_stat,kkt_feas,kkt_comp,kkt_max\n")
                for rep in res.reports:
                    k = rep.kkt
                    fh.write(
                        f"{rep.iter_index},{k['stationarity']!r},{k['feasibility']!r},"
                        f"{k['complementarity']!r},{k['max']!r}\n"
                    )
            final = res.reports[-1].kkt["max"] if res.reports else float("nan")
            _say(args, f"{label:>32s}: {len(res.reports)} iterations, final KKT residual {final:.3e}")
        return 0
    cfgs = _closed_loop_variants(seed, with_fixed_anchors=args.target == "table2")
    cmp_ = compare_policies(cfgs)
    write_comparison(cmp_, out)
    _say(args, f"{'policy':>35s}  {'n_it_mean':>10s}  {'dr_avg':>10s}  {'r_avg':>10s}")
    for label, agg in cmp_.aggregates().items():
        dr = "-" if agg["dr_avg"] is None else f"{agg['dr_avg']:.3f}"
        ra = "-" if agg["r_avg"] is None else f"{agg['r_avg']:.2e}"
        _say(args, f"{label:>35s}  {agg['n_it_mean']:>10.3f}  {dr:>10s}  {ra:>10s}")
    return 1 if any(rep.aborted_at is not None for rep in cmp_.reports) else 0


def _cmd_selftest(args) -> int:
    from .oracles import selftest

    return selftest(verbose=not args.quiet)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="unimpc", description="stage-QP nonlinear MPC benchmark runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("run", _cmd_run), ("compare", _cmd_compare), ("reproduce", _cmd_reproduce), ("selftest", _cmd_selftest)):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        if name == "run":
            p.add_argument("config", help="path to an INI run configuration")
        elif name == "compare":
            p.add_argument("configs", nargs="+", help="paths to INI run configurations")
        elif name == "reproduce":
            p.add_argument("target", choices=["fig1", "fig2", "table2"])
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
