"""Command-line entry point.

Exit codes: 0 ok, 2 config error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import partition_report
from .engine import Simulator, build_setup, run
from .metrics import (DIVERGED_MARK, CostModel, cost_to_target, mean_std, metrics_row,
                      plot_data, rounds_to_target, rows_to_csv)
from .runio import RunDirError, load_run, prepare_out_dir, write_run
from .verify import SWEEP_PATHS, sweep, sweep_csv, verify_trace

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("tacofl")


def _seeds(text: str | None) -> list[int] | None:
    """"0,1,2" or "0-4" or a mix of both."""
    if not text:
        return None
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ConfigError("empty seed list", "--seeds")
    return out


def _load(path: str, args) -> RunConfig:
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = config_mod.parse_config(path)
    changes = {}
    if getattr(args, "analysis_mode", False):
        changes["analysis_mode"] = True
    if getattr(args, "no_detection", False):
        changes["detection.enabled"] = False
    return config_mod.override(cfg, **changes) if changes else cfg


def _summary(trace) -> str:
    cfg = trace.cfg
    rtt = rounds_to_target(trace, cfg.target_acc) if cfg.target_acc > 0 else None
    parts = [f"strategy={cfg.strategy.name}", f"seed={cfg.seed}",
             f"rounds={len(trace.records)}", f"final_acc={trace.final_acc:.4f}"]
    if cfg.target_acc > 0:
        parts.append(f"rounds_to_target={'not reached' if rtt is None else rtt}")
    if trace.diverged:
        parts.append(f"DIVERGED at round {trace.diverged['round']}")
    return " ".join(parts)


def cmd_run(args) -> int:
    cfg = _load(args.config, args)
    seeds = _seeds(args.seeds) or [cfg.seed]
    out = prepare_out_dir(args.out, args.force)
    status = EXIT_OK
    for s in seeds:
        c = cfg.with_seed(s)
        setup = build_setup(c)
        trace = Simulator(c, threads=args.threads, setup=setup).run()
        target = out if len(seeds) == 1 else out / f"seed_{s}"
        write_run(target, trace, setup, force=True)
        print(_summary(trace))
        if trace.diverged:
            status = EXIT_DIVERGED
    return status


def cmd_sweep(args) -> int:
    cfg = _load(args.config, args)
    seeds = _seeds(args.seeds) or [cfg.seed]
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("no sweep values", "--values")
    out = prepare_out_dir(args.out, args.force) if args.out else None
    rows = sweep(args.param, values, cfg, seeds, threads=args.threads)
    text = sweep_csv(args.param, rows)
    if out is not None:
        (out / "sweep.csv").write_text(text)
        (out / "config.toml").write_text(config_mod.dumps(cfg))
    print(f"{args.param:>10} {'acc':>16} {'tpr':>6} {'fpr':>6} {'div':>4}")
    for r in rows:
        tpr = "" if r.tpr is None else f"{r.tpr:.2f}"
        fpr = "" if r.fpr is None else f"{r.fpr:.2f}"
        print(f"{r.value:>10.4g} {r.acc_mean:>8.4f}±{r.acc_std:<7.4f} {tpr:>6} {fpr:>6} {r.diverged:>4}")
    return EXIT_OK


def cmd_verify(args) -> int:
    trace = load_run(args.run_dir)
    rep = verify_trace(trace)
    sys.stdout.write(rep.text())
    if args.out:
        out = prepare_out_dir(args.out, args.force)
        (out / "verify.txt").write_text(rep.text())
        (out / "verify.csv").write_text(rep.csv())
    return EXIT_OK


def cmd_partition_report(args) -> int:
    cfg = _load(args.config, args)
    setup = build_setup(cfg)
    text = partition_report(setup.train, setup.shards)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        if Path(args.out).exists() and not args.force:
            raise RunDirError(f"{args.out} exists (use --force to overwrite)")
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _strip_strategy(cfg: RunConfig) -> dict:
    d = config_mod.to_dict(cfg)
    d.pop("strategy")
    d.pop("seed")
    d["cost"].pop("overhead")
    d["detection"].pop("enabled")
    return d


def _diffs(a, b, prefix="") -> list[str]:
    if isinstance(a, dict) and isinstance(b, dict):
        out = []
        for k in sorted(set(a) | set(b)):
            out += _diffs(a.get(k), b.get(k), f"{prefix}{k}.")
        return out
    return [] if a == b else [f"{prefix[:-1]}: {a!r} != {b!r}"]


def compare_table(traces_by_label: dict[str, list], target_acc: float,
                  cm: CostModel) -> list[dict]:
    rows = []
    for label, traces in traces_by_label.items():
        m, sd = mean_std([t.final_acc for t in traces])
        rtts = [rounds_to_target(t, target_acc) for t in traces]
        costs = [cost_to_target(t, cm, target_acc) for t in traces]
        reached = [r for r in rtts if r is not None]
        reached_c = [c for c in costs if c is not None]
        div = sum(t.diverged is not None for t in traces)
        rows.append({
            "strategy": label,
            "final_acc_mean": m,
            "final_acc_std": sd,
            "rounds_to_target": float(np.mean(reached)) if reached else None,
            "cost_to_target": float(np.mean(reached_c)) if reached_c else None,
            "reached": len(reached),
            "runs": len(traces),
            "diverged": div,
            "mark": DIVERGED_MARK if div else "",
        })
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'strategy':<12} {'final acc':>17} {'rounds':>8} {'cost':>10} {'div':>4} {DIVERGED_MARK}"
    lines = [head]
    for r in rows:
        acc = "nan" if np.isnan(r["final_acc_mean"]) else \
            f"{r['final_acc_mean']:.4f}±{r['final_acc_std']:.4f}"
        rt = "-" if r["rounds_to_target"] is None else f"{r['rounds_to_target']:.1f}"
        ct = "-" if r["cost_to_target"] is None else f"{r['cost_to_target']:.1f}"
        lines.append(f"{r['strategy']:<12} {acc:>17} {rt:>8} {ct:>10} {r['diverged']:>4} {r['mark']}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    if args.reuse:
        traces = {}
        for d in args.configs:
            tr = load_run(d)
            traces.setdefault(tr.cfg.strategy.name, []).append(tr)
        cfgs = [ts[0].cfg for ts in traces.values()]
    else:
        cfgs = [_load(p, args) for p in args.configs]
    base = _strip_strategy(cfgs[0])
    problems = []
    for p, c in zip(args.configs[1:], cfgs[1:]):
        problems += [f"{p}: {d}" for d in _diffs(base, _strip_strategy(c))]
    if problems:
        raise ConfigError("configs differ outside [strategy]:\n  " + "\n  ".join(problems))
    target = args.target_acc if args.target_acc is not None else cfgs[0].target_acc
    overhead = {c.strategy.name: c.cost.overhead for c in cfgs}
    overhead["fedavg"] = 0.0
    cm = CostModel(cfgs[0].cost.grad_eval_cost, overhead)
    if not args.reuse:
        seeds = _seeds(args.seeds) or [cfgs[0].seed]
        traces = {}
        for i, c in enumerate(cfgs):
            label = c.strategy.name
            if label in traces:
                label = f"{label}#{i}"
            traces[label] = [run(c.with_seed(s), threads=args.threads) for s in seeds]
    rows = compare_table(traces, target, cm)
    table = format_table(rows)
    sys.stdout.write(table)
    if args.out:
        out = prepare_out_dir(args.out, args.force)
        (out / "compare.csv").write_text(rows_to_csv(rows))
        (out / "compare.txt").write_text(table)
        (out / "runs.csv").write_text(rows_to_csv(
            [dict(metrics_row(t, cm, target), label=k) for k, ts in traces.items() for t in ts]))
        (out / "plot_data.json").write_text(
            plot_data([t for ts in traces.values() for t in ts], cm))
    return EXIT_DIVERGED if any(r["diverged"] for r in rows) and args.strict else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tacofl", description="Federated learning simulator "
                                "with tailored adaptive correction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out_required=False):
        if config:
            sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--analysis-mode", action="store_true")
        sp.add_argument("--no-detection", action="store_true")

    sp = sub.add_parser("run", help="run one experiment and write a run directory")
    common(sp, out_required=True)
    sp.add_argument("--seeds", help="e.g. 0-4 or 0,3,7 (one sub-directory per seed)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="sweep one hyper-parameter over seeds")
    common(sp)
    sp.add_argument("--param", required=True, choices=sorted(SWEEP_PATHS))
    sp.add_argument("--values", required=True, help="comma-separated")
    sp.add_argument("--seeds")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="check lemma identities and estimates on a run")
    sp.add_argument("run_dir")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("partition-report", help="per-client class counts as CSV")
    common(sp)
    sp.set_defaults(func=cmd_partition_report)

    sp = sub.add_parser("compare", help="compare strategies on otherwise identical configs")
    sp.add_argument("configs", nargs="+")
    sp.add_argument("--target-acc", type=float)
    sp.add_argument("--seeds")
    sp.add_argument("--reuse", action="store_true",
                    help="treat the arguments as existing run directories")
    sp.add_argument("--strict", action="store_true", help="exit 3 if any run diverged")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--analysis-mode", action="store_true")
    sp.add_argument("--no-detection", action="store_true")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RunDirError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
