"""Evaluation yardsticks: rounds/cost to a target accuracy, per-group
correction coefficients and freeloader detection quality."""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_OVERHEAD

NOT_REACHED = None
DIVERGED_MARK = "×"


@dataclass(frozen=True)
class CostModel:
    grad_eval_cost: float = 1.0
    correction_overhead: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_OVERHEAD))

    def __post_init__(self):
        if self.grad_eval_cost < 0 or any(v < 0 for v in self.correction_overhead.values()):
            raise ValueError("costs must be non-negative")
        if self.correction_overhead.get("fedavg", 0.0) != 0.0:
            raise ValueError("fedavg has no correction overhead by definition")

    def client_round_cost(self, strategy: str, grad_evals: int, K: int) -> float:
        if grad_evals == 0:  # freeloaders do no local work
            return 0.0
        return grad_evals * self.grad_eval_cost + K * self.correction_overhead.get(strategy, 0.0)


@dataclass
class DetectionReport:
    tpr: float | None
    fpr: float | None
    per_client: dict[int, bool]


def _accs(trace) -> tuple[list[float], bool]:
    if hasattr(trace, "records"):
        return [r.test_acc for r in trace.records], trace.diverged is not None
    return [float(a) for a in trace], False


def rounds_to_target(trace, target_acc: float, diverged: bool = False) -> int | None:
    """Index of the first round whose test accuracy reaches ``target_acc``.

    ``trace`` is a Trace or a plain accuracy sequence. Diverged runs never
    count as reaching the target.
    """
    accs, div = _accs(trace)
    if not accs and not hasattr(trace, "records"):
        raise ValueError("empty trace")
    if div or diverged:
        return NOT_REACHED
    for t, a in enumerate(accs):
        if a >= target_acc:
            return t
    return NOT_REACHED


def round_costs(trace, cm: CostModel) -> list[float]:
    """Slowest-client cost of every round."""
    strategy, K = trace.cfg.strategy.name, trace.cfg.local_steps
    return [max(cm.client_round_cost(strategy, n, K) for n in r.grad_evals.values())
            for r in trace.records]


def cost_to_target(trace, cm: CostModel, target_acc: float) -> float | None:
    t = rounds_to_target(trace, target_acc)
    if t is NOT_REACHED:
        return NOT_REACHED
    return float(sum(round_costs(trace, cm)[:t + 1]))


def group_alpha_stats(trace, group_assignment: dict[int, str],
                      burn_in: float | None = None) -> dict[str, tuple[float, float]]:
    """Per-group (mean, std) of the time-averaged coefficient of each client.

    Rounds before ``burn_in`` (default T/10) are skipped.
    """
    if trace.cfg.strategy.name != "taco":
        raise ValueError("group_alpha_stats needs a TACO trace")
    T = trace.cfg.rounds
    start = T / 10 if burn_in is None else burn_in
    per_client: dict[int, list[float]] = {}
    for r in trace.records:
        if r.t < start:
            continue
        for i, a in r.alpha.items():
            per_client.setdefault(i, []).append(a)
    groups: dict[str, list[float]] = {}
    for i, vals in sorted(per_client.items()):
        if i in group_assignment:
            groups.setdefault(group_assignment[i], []).append(float(np.mean(vals)))
    return {g: (float(np.mean(v)), float(np.std(v))) for g, v in sorted(groups.items())}


def detection_quality(expelled, true_freeloaders, all_clients) -> DetectionReport:
    expelled, bad, everyone = set(expelled), set(true_freeloaders), set(all_clients)
    if not bad <= everyone or not expelled <= everyone:
        raise ValueError("client sets are inconsistent")
    honest = everyone - bad
    tpr = len(expelled & bad) / len(bad) if bad else None
    fpr = len(expelled - bad) / len(honest) if honest else None
    return DetectionReport(tpr, fpr, {i: i in expelled for i in sorted(everyone)})


def final_detection(trace) -> DetectionReport:
    expelled = trace.records[-1].expelled if trace.records else []
    return detection_quality(expelled, trace.freeloaders, trace.behaviors.keys())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_row(trace, cm: CostModel, target_acc: float) -> dict:
    return {
        "strategy": trace.cfg.strategy.name,
        "seed": trace.cfg.seed,
        "final_acc": trace.final_acc,
        "rounds_to_target": rounds_to_target(trace, target_acc),
        "cost_to_target": cost_to_target(trace, cm, target_acc),
        "diverged": int(trace.diverged is not None),
    }


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]))
    for row in rows:
        w.writerow([_fmt(v) for v in row.values()])
    return buf.getvalue()


def group_alpha_csv(stats: dict[str, tuple[float, float]]) -> str:
    return rows_to_csv([{"group": g, "alpha_mean": m, "alpha_std": s} for g, (m, s) in stats.items()])


def plot_data(traces, cm: CostModel) -> str:
    """x/y series for round-accuracy and cost-accuracy curves, as JSON."""
    series = []
    for tr in traces:
        costs = np.cumsum(round_costs(tr, cm)).tolist() if tr.records else []
        accs = [r.test_acc for r in tr.records]
        series.append({
            "strategy": tr.cfg.strategy.name,
            "seed": tr.cfg.seed,
            "diverged": tr.diverged is not None,
            "round_accuracy": {"x": list(range(len(accs))), "y": accs},
            "cost_accuracy": {"x": costs, "y": accs},
        })
    return json.dumps({"series": series}, indent=1)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    if not vals:
        return float("nan"), float("nan")
    return float(np.mean(vals)), float(np.std(vals))
